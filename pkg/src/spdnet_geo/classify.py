"""Classifiers over covariance sets: nearest-prototype, tangent-space
linear models, CSP filtering, and the two deep congruence networks.

Every ``*_predict`` is deterministic and pure given a model; argmax
ties resolve to the lowest class index. The deep networks' per-item
prediction paths are written as explicit straight-line numpy steps so
they can be mirrored by an independent reimplementation bit for bit.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as dat
from . import geometry as geo
from . import model_io
from .align import (
    _dense,
    default_unet_dims,
    eigv_basis,
    init_congruence_weight,
    unet_forward_np,
    unet_forward_var,
    unet_init_weights,
)
from .errors import (
    EmptyInput,
    NumericalError,
    ShapeError,
    TrainingError,
)

LDA_SHRINKAGE = 0.05


def _check_classes(labels, n_classes=None):
    classes = np.unique(np.asarray(labels))
    if n_classes is not None:
        expected = np.arange(n_classes)
        missing = sorted(set(expected) - set(classes.tolist()))
        if missing:
            raise TrainingError(f"classes missing from training data: {missing}")
        classes = expected
    return classes


# ---------------------------------------------------------------------------
# minimum distance to mean


@dataclass
class MdmModel:
    classes: np.ndarray
    prototypes: np.ndarray  # (K, d, d) AIRM Frechet means


def mdm_fit(ds, n_classes=None):
    classes = _check_classes(ds.labels, n_classes)
    prototypes = []
    for k in classes:
        mats = ds.mats[ds.labels == k]
        if len(mats) == 0:
            raise TrainingError(f"class {int(k)} has no training items")
        prototypes.append(geo.karcher_mean(mats, tol=1e-8, max_iter=150))
    return MdmModel(classes, np.stack(prototypes))


def mdm_predict(model, C):
    dists = [geo.airm_distance(C, mu) for mu in model.prototypes]
    return int(model.classes[int(np.argmin(dists))])


def mdm_predict_set(model, ds):
    return np.array([mdm_predict(model, C) for C in ds.mats])


# ---------------------------------------------------------------------------
# tangent-space logistic regression


@dataclass
class TslrModel:
    classes: np.ndarray
    base: np.ndarray  # tangent base point (training log-Euclidean mean)
    whitener: np.ndarray  # base^-1/2
    weights: np.ndarray  # (K, m)
    bias: np.ndarray  # (K,)
    loss_history: np.ndarray = field(default=None, repr=False)


def _train_softmax(Z, y_idx, n_classes, steps, lr, weight_decay, batch_size, seed):
    n, m = Z.shape
    params = {"weights": np.zeros((n_classes, m)), "bias": np.zeros(n_classes)}
    state = ad.AdamState(lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    history = np.empty(steps)
    for t in range(steps):
        batch = np.arange(n) if n <= batch_size else rng.permutation(n)[:batch_size]
        tape = ad.Tape()
        W = tape.leaf(params["weights"])
        b = tape.leaf(params["bias"])
        loss = ad.cross_entropy(ad.log_softmax(ad.linear(tape.leaf(Z[batch]), W, b)), y_idx[batch])
        value = float(loss.value)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss at step {t}")
        history[t] = value
        grads = ad.backward(loss)
        ad.adam_step(params, {"weights": grads[W], "bias": grads[b]}, state)
    return params, history


def tslr_fit(ds, steps=1000, lr=1e-3, weight_decay=1e-5, batch_size=256, seed=0):
    classes = _check_classes(ds.labels)
    if len(classes) < 2:
        raise TrainingError("logistic regression needs >= 2 classes")
    y_idx = np.searchsorted(classes, ds.labels)
    base = geo.log_euclidean_mean(ds.mats)
    whitener = geo.spd_power(base, -0.5)
    Z = geo.vec_upper(geo.spd_log(geo.sym(whitener @ ds.mats @ whitener)))
    params, history = _train_softmax(Z, y_idx, len(classes), steps, lr, weight_decay, batch_size, seed)
    return TslrModel(classes, base, whitener, params["weights"], params["bias"], history)


def tslr_predict(model, C):
    """Returns (label, probabilities over model.classes)."""
    P = model.whitener
    z = geo.vec_upper(geo.spd_log(geo.sym(P @ C @ P)))
    logits = model.weights @ z + model.bias
    logits -= logits.max()
    p = np.exp(logits)
    p /= p.sum()
    return int(model.classes[int(np.argmax(logits))]), p


def tslr_predict_set(model, ds):
    return np.array([tslr_predict(model, C)[0] for C in ds.mats])


# ---------------------------------------------------------------------------
# LDA over tangent features


@dataclass
class LdaModel:
    classes: np.ndarray
    means: np.ndarray  # (K, m)
    cov: np.ndarray  # shared within-class covariance, shrunk
    cov_inv_means: np.ndarray  # (K, m): Sigma^-1 mu_k
    const: np.ndarray  # (K,): -mu_k^T Sigma^-1 mu_k / 2 + log pi_k


def lda_fit(X, y, shrinkage=LDA_SHRINKAGE, n_classes=None):
    classes = _check_classes(y, n_classes)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    n, m = X.shape
    means, priors = [], []
    cov = np.zeros((m, m))
    for k in classes:
        Xk = X[y == k]
        if len(Xk) < 2:
            raise TrainingError(f"class {int(k)} needs >= 2 samples for LDA")
        mu = Xk.mean(axis=0)
        means.append(mu)
        priors.append(len(Xk) / n)
        centered = Xk - mu
        cov += centered.T @ centered
    cov /= n
    cov = (1.0 - shrinkage) * cov + shrinkage * (np.trace(cov) / m) * np.eye(m)
    means = np.stack(means)
    try:
        cov_inv_means = np.linalg.solve(cov, means.T).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular within-class covariance: {exc}") from exc
    const = -0.5 * np.sum(means * cov_inv_means, axis=1) + np.log(priors)
    return LdaModel(classes, means, cov, cov_inv_means, const)


def lda_decision(model, x):
    """Discriminants delta_k(x) = x^T Sigma^-1 mu_k - mu_k^T Sigma^-1 mu_k / 2 + log pi_k."""
    return model.cov_inv_means @ np.asarray(x, dtype=float) + model.const


def lda_predict(model, x):
    return int(model.classes[int(np.argmax(lda_decision(model, x)))])


@dataclass
class TsaLdaModel:
    base: np.ndarray
    whitener: np.ndarray
    lda: LdaModel


def tsa_lda_fit(ds, shrinkage=LDA_SHRINKAGE):
    base = geo.log_euclidean_mean(ds.mats)
    whitener = geo.spd_power(base, -0.5)
    Z = geo.vec_upper(geo.spd_log(geo.sym(whitener @ ds.mats @ whitener)))
    return TsaLdaModel(base, whitener, lda_fit(Z, ds.labels, shrinkage))


def tsa_lda_predict(model, C):
    P = model.whitener
    z = geo.vec_upper(geo.spd_log(geo.sym(P @ C @ P)))
    return lda_predict(model.lda, z)


def tsa_lda_predict_set(model, ds):
    return np.array([tsa_lda_predict(model, C) for C in ds.mats])


# ---------------------------------------------------------------------------
# CSP + LDA over log-variance features


@dataclass
class CspModel:
    channels: int
    m_filters: int
    zscore: bool
    shrinkage: bool
    classes: np.ndarray
    filters: np.ndarray  # (K, m, C) one one-vs-rest bank per class
    lda: LdaModel


def _zscore_epoch(X):
    mu = X.mean(axis=1, keepdims=True)
    sd = X.std(axis=1, keepdims=True)
    return (X - mu) / np.maximum(sd, 1e-12)


def _csp_features(filters, C):
    """Concatenated log-variances of one covariance under all filter banks."""
    feats = []
    for bank in filters:
        var = np.einsum("mc,cd,md->m", bank, C, bank)
        feats.append(np.log(np.maximum(var, 1e-300)))
    return np.concatenate(feats)


def csp_fit(epochs, m_filters=8, zscore=False, shrinkage=False):
    """One-vs-rest CSP filter banks plus LDA on log-variance features.

    Per class pairing the filters are the top and bottom m/2 generalized
    eigenvectors of (C_k, C_t) with C_t = C_k + C_rest, solved by
    whitening with C_t^-1/2.
    """
    if m_filters % 2 != 0 or m_filters < 2:
        raise ShapeError("m_filters must be a positive even number")
    if m_filters > epochs.channels:
        raise ShapeError("m_filters cannot exceed the channel count")
    classes = _check_classes(epochs.labels)
    if len(classes) < 2:
        raise TrainingError("CSP needs >= 2 classes")

    prepared = [_zscore_epoch(X) if zscore else np.asarray(X, dtype=float) for X in epochs.epochs]
    covs = np.stack([dat.estimate_covariance(X, shrinkage=shrinkage) for X in prepared])
    labels = epochs.labels

    half = m_filters // 2
    banks = []
    for k in classes:
        C_k = covs[labels == k].mean(axis=0)
        C_rest = covs[labels != k].mean(axis=0)
        C_t = geo.sym(C_k + C_rest)
        P = geo.spd_power(C_t, -0.5)
        _, U = geo.sym_eig(geo.sym(P @ C_k @ P))
        selected = np.concatenate([U[:, :half], U[:, -half:]], axis=1)
        banks.append(selected.T @ P)  # rows are spatial filters
    filters = np.stack(banks)

    feats = np.stack([_csp_features(filters, C) for C in covs])
    return CspModel(epochs.channels, m_filters, zscore, shrinkage, classes,
                    filters, lda_fit(feats, labels))


def csp_predict(model, epoch):
    X = np.asarray(epoch, dtype=float)
    if X.shape[0] != model.channels:
        raise ShapeError(f"epoch has {X.shape[0]} channels, model expects {model.channels}")
    if model.zscore:
        X = _zscore_epoch(X)
    C = dat.estimate_covariance(X, shrinkage=model.shrinkage)
    return lda_predict(model.lda, _csp_features(model.filters, C))


def csp_predict_set(model, epochs):
    return np.array([csp_predict(model, X) for X in epochs.epochs])


# ---------------------------------------------------------------------------
# shared pieces for the deep congruence networks


@dataclass
class NetTrainConfig:
    lambda_ce: float = 1.0
    lambda_act: float = 0.05
    lambda_sub: float = 0.05
    lambda_w: float = 1.0
    lambda_b: float = 1.0
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 256
    steps: int = 1000
    clip_norm: float = 10.0
    seed: int = 0


def _net_minibatches(n, batch_size, steps, rng):
    produced = 0
    while produced < steps:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            if produced == steps:
                return
            batch = perm[start : start + batch_size]
            if len(batch) == 0:
                break
            yield batch
            produced += 1


def _fisher_penalties(cfg, W_A, B_A, W_S, B_S):
    action = ad.add(ad.scale(W_A, cfg.lambda_w), ad.scale(B_A, -cfg.lambda_b))
    subject = ad.add(ad.scale(B_S, cfg.lambda_b), ad.scale(W_S, -cfg.lambda_w))
    return ad.add(ad.scale(action, cfg.lambda_act), ad.scale(subject, cfg.lambda_sub))


def _log_tangent_single(C):
    """Straight-line log + upper-triangle vectorization of one matrix."""
    w, U = np.linalg.eigh(C)
    w = np.maximum(w, geo.EIG_FLOOR * w.max())
    S = (U * np.log(w)) @ U.T
    d = S.shape[0]
    iu, ju = np.triu_indices(d)
    return S[iu, ju] * np.where(iu == ju, 1.0, np.sqrt(2.0))


# ---------------------------------------------------------------------------
# feed-forward deep congruence network


@dataclass
class DcNetConfig(NetTrainConfig):
    widths: tuple = None  # congruence chain; None -> (d, 2d, 2d, d)
    eps: float = 1e-6
    head_hidden: int = 64


@dataclass
class DcNetModel:
    widths: tuple
    eps: float
    classes: np.ndarray
    stack: dict  # w_0 .. w_{L-1}
    head: dict  # h0 (hidden, m), h1 (K, hidden), b (K,)
    loss_history: np.ndarray = field(default=None, repr=False)
    ce_history: np.ndarray = field(default=None, repr=False)


def default_dcnet_widths(d):
    return (d, 2 * d, 2 * d, d)


def dcnet_fit(ds, cfg=None):
    """Train the congruence stack and deep-linear action head.

    Loss: ce + act * (w * W(A) - b * B(A)) + sub * (b * B(S) - w * W(S)),
    each congruence followed by the +eps I stabilizer.
    """
    cfg = cfg or DcNetConfig()
    widths = tuple(cfg.widths or default_dcnet_widths(ds.dim))
    if widths[0] != ds.dim:
        raise ShapeError(f"stack input width {widths[0]} != data dim {ds.dim}")
    classes = _check_classes(ds.labels)
    if len(classes) < 2:
        raise TrainingError("classifier training needs >= 2 classes")
    y_idx = np.searchsorted(classes, ds.labels)
    subj_idx, _ = _dense(ds.subjects)
    n_classes = len(classes)

    U = eigv_basis(ds.mats)
    stack = {
        f"w_{i}": init_congruence_weight(U, widths[i], widths[i + 1])
        for i in range(len(widths) - 1)
    }
    m = geo.vec_dim(widths[-1])
    rng = np.random.default_rng(cfg.seed)
    head = {
        "h0": rng.standard_normal((cfg.head_hidden, m)) / np.sqrt(m),
        "h1": rng.standard_normal((n_classes, cfg.head_hidden)) / np.sqrt(cfg.head_hidden),
        "b": np.zeros(n_classes),
    }
    params = {**stack, **head}
    state = ad.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    history, ce_history = [], []

    for batch in _net_minibatches(len(ds), cfg.batch_size, cfg.steps, rng):
        tape = ad.Tape()
        leaves = {k: tape.leaf(v) for k, v in params.items()}
        C = tape.leaf(ds.mats[batch], symmetric=True)
        for i in range(len(widths) - 1):
            C = ad.add_scaled_identity(ad.congruence(C, leaves[f"w_{i}"]), cfg.eps)
        z = ad.vec_upper(ad.matrix_log(C))
        hidden = ad.matmul(z, ad.transpose(leaves["h0"]))
        logits = ad.linear(hidden, leaves["h1"], leaves["b"])
        ce = ad.cross_entropy(ad.log_softmax(logits), y_idx[batch])
        W_A, B_A, W_S, B_S = ad.fisher_stats(z, y_idx[batch], subj_idx[batch])
        loss = ad.add(ad.scale(ce, cfg.lambda_ce), _fisher_penalties(cfg, W_A, B_A, W_S, B_S))

        value = float(loss.value)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss at step {len(history)}")
        history.append(value)
        ce_history.append(float(ce.value))
        grads = ad.backward(loss)
        gdict = {k: grads[v] for k, v in leaves.items()}
        gdict, _ = ad.clip_gradients(gdict, cfg.clip_norm)
        ad.adam_step(params, gdict, state)

    stack = {k: params[k] for k in stack}
    head = {k: params[k] for k in ("h0", "h1", "b")}
    return DcNetModel(widths, cfg.eps, classes, stack, head,
                      np.asarray(history), np.asarray(ce_history))


def dcnet_logits(model, C):
    """Per-item forward pass as explicit numpy steps (oracle-mirrorable)."""
    C = np.asarray(C, dtype=float)
    if C.shape != (model.widths[0], model.widths[0]):
        raise ShapeError(f"input shape {C.shape} != ({model.widths[0]}, {model.widths[0]})")
    for i in range(len(model.widths) - 1):
        W = model.stack[f"w_{i}"]
        C = W.T @ C @ W
        C = C + model.eps * np.eye(C.shape[0])
    z = _log_tangent_single(C)
    hidden = model.head["h0"] @ z
    return model.head["h1"] @ hidden + model.head["b"]


def dcnet_predict(model, C):
    return int(model.classes[int(np.argmax(dcnet_logits(model, C)))])


def dcnet_predict_set(model, ds):
    return np.array([dcnet_predict(model, C) for C in ds.mats])


# ---------------------------------------------------------------------------
# U-Net + tangent logistic head


@dataclass
class RifuNetConfig(NetTrainConfig):
    encoder_dims: tuple = None
    eps: float = 1e-6
    lambda_rec: float = 0.1
    base_mode: str = "train"  # "train" | "batch"


@dataclass
class RifuNetModel:
    dims: tuple
    eps: float
    classes: np.ndarray
    weights: dict  # U-Net congruence weights
    head_w: np.ndarray  # (K, m)
    head_b: np.ndarray  # (K,)
    base: np.ndarray  # training-set log-Euclidean mean of network outputs
    base_mode: str
    loss_history: np.ndarray = field(default=None, repr=False)
    ce_history: np.ndarray = field(default=None, repr=False)


def rifunet_fit(ds, cfg=None):
    """Train the SPD U-Net with a tangent logistic head.

    Loss: ce + act * (w * W(A) - b * B(A)) + sub * (b * B(S) - w * W(S))
    + rec * mean ||C_out - C_in||_F^2. During training the tangent head
    aligns to the batch log-Euclidean mean of the outputs; the stored
    model freezes the training-set mean for deterministic inference.
    """
    cfg = cfg or RifuNetConfig()
    dims = tuple(cfg.encoder_dims or default_unet_dims(ds.dim))
    if dims[0] != ds.dim:
        raise ShapeError(f"encoder input dim {dims[0]} != data dim {ds.dim}")
    classes = _check_classes(ds.labels)
    if len(classes) < 2:
        raise TrainingError("classifier training needs >= 2 classes")
    y_idx = np.searchsorted(classes, ds.labels)
    subj_idx, _ = _dense(ds.subjects)
    n_classes = len(classes)
    m = geo.vec_dim(ds.dim)

    params = {k: np.array(v) for k, v in unet_init_weights(ds.mats, dims).items()}
    params["head_w"] = np.zeros((n_classes, m))
    params["head_b"] = np.zeros(n_classes)
    state = ad.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history, ce_history = [], []

    unet_keys = ("enc_0", "enc_1", "dec_0", "dec_1")
    for batch in _net_minibatches(len(ds), cfg.batch_size, cfg.steps, rng):
        tape = ad.Tape()
        leaves = {k: tape.leaf(params[k]) for k in params}
        C = tape.leaf(ds.mats[batch], symmetric=True)
        out = unet_forward_var({k: leaves[k] for k in unet_keys}, C, cfg.eps)
        S_out = ad.matrix_log(out)
        base_inv_sqrt = ad.matrix_exp_sym(ad.scale(ad.batch_mean(S_out), -0.5))
        T = ad.matrix_log(ad.matmul(ad.matmul(base_inv_sqrt, out), base_inv_sqrt))
        z = ad.vec_upper(T)
        logits = ad.linear(z, leaves["head_w"], leaves["head_b"])
        ce = ad.cross_entropy(ad.log_softmax(logits), y_idx[batch])
        W_A, B_A, W_S, B_S = ad.fisher_stats(z, y_idx[batch], subj_idx[batch])
        rec = ad.scale(ad.frobenius_norm_sq(ad.sub(out, C)), 1.0 / len(batch))
        loss = ad.add(ad.scale(ce, cfg.lambda_ce), _fisher_penalties(cfg, W_A, B_A, W_S, B_S))
        loss = ad.add(loss, ad.scale(rec, cfg.lambda_rec))

        value = float(loss.value)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss at step {len(history)}")
        history.append(value)
        ce_history.append(float(ce.value))
        grads = ad.backward(loss)
        gdict = {k: grads[v] for k, v in leaves.items()}
        gdict, _ = ad.clip_gradients(gdict, cfg.clip_norm)
        ad.adam_step(params, gdict, state)

    unet_weights = {k: params[k] for k in unet_keys}
    outs = unet_forward_np(unet_weights, ds.mats, cfg.eps)
    base = geo.log_euclidean_mean(outs)
    return RifuNetModel(dims, cfg.eps, classes, unet_weights,
                        params["head_w"], params["head_b"], base, cfg.base_mode,
                        np.asarray(history), np.asarray(ce_history))


def _unet_forward_single(model, C):
    """Per-item U-Net forward as explicit numpy steps."""

    def cong(M, W):
        M = W.T @ M @ W
        return M + model.eps * np.eye(M.shape[0])

    def logm(M):
        w, U = np.linalg.eigh(M)
        w = np.maximum(w, geo.EIG_FLOOR * w.max())
        return (U * np.log(w)) @ U.T

    def expm(S):
        w, U = np.linalg.eigh(S)
        return (U * np.exp(w)) @ U.T

    e1 = cong(C, model.weights["enc_0"])
    bott = cong(e1, model.weights["enc_1"])
    d2 = cong(bott, model.weights["dec_0"])
    m1 = expm(0.5 * (logm(d2) + logm(e1)))
    d1 = cong(m1, model.weights["dec_1"])
    return expm(0.5 * (logm(d1) + logm(C)))


def rifunet_predict(model, mats):
    """Labels and tangent features for a batch of covariances.

    ``base_mode="train"`` aligns each item to the frozen training mean
    (per-item predictions independent of batch composition);
    ``"batch"`` recomputes the log-Euclidean mean of the batch outputs.
    """
    mats = np.asarray(mats, dtype=float)
    if mats.ndim == 2:
        mats = mats[None]
    if len(mats) == 0:
        raise EmptyInput("prediction needs a nonempty batch")
    outs = [_unet_forward_single(model, C) for C in mats]
    if model.base_mode == "batch":
        base = geo.log_euclidean_mean(np.stack(outs))
    else:
        base = model.base
    w, U = np.linalg.eigh(base)
    w = np.maximum(w, geo.EIG_FLOOR * w.max())
    iP = (U * (1.0 / np.sqrt(w))) @ U.T
    labels, features = [], []
    for out in outs:
        z = _log_tangent_single(iP @ out @ iP)
        logits = model.head_w @ z + model.head_b
        labels.append(int(model.classes[int(np.argmax(logits))]))
        features.append(z)
    return np.array(labels), np.stack(features)


def rifunet_predict_set(model, ds):
    return rifunet_predict(model, ds.mats)[0]


# ---------------------------------------------------------------------------
# persistence


def save_classifier(model, path):
    if isinstance(model, MdmModel):
        meta = {"classes": model.classes.tolist()}
        blocks = {"prototypes": model.prototypes}
        model_io.save_blocks(path, model_io.CLASSIFIER_MAGIC, "mdm", meta, blocks)
    elif isinstance(model, TslrModel):
        meta = {"classes": model.classes.tolist()}
        blocks = {"base": model.base, "whitener": model.whitener,
                  "weights": model.weights, "bias": model.bias}
        model_io.save_blocks(path, model_io.CLASSIFIER_MAGIC, "tslr", meta, blocks)
    elif isinstance(model, TsaLdaModel):
        meta = {"classes": model.lda.classes.tolist()}
        blocks = {"base": model.base, "whitener": model.whitener,
                  "means": model.lda.means, "cov": model.lda.cov,
                  "cov_inv_means": model.lda.cov_inv_means, "const": model.lda.const}
        model_io.save_blocks(path, model_io.CLASSIFIER_MAGIC, "tsa-lda", meta, blocks)
    elif isinstance(model, CspModel):
        meta = {"classes": model.classes.tolist(), "channels": model.channels,
                "m_filters": model.m_filters, "zscore": model.zscore,
                "shrinkage": model.shrinkage}
        blocks = {"filters": model.filters, "means": model.lda.means,
                  "cov": model.lda.cov, "cov_inv_means": model.lda.cov_inv_means,
                  "const": model.lda.const}
        model_io.save_blocks(path, model_io.CLASSIFIER_MAGIC, "csp-lda", meta, blocks)
    elif isinstance(model, DcNetModel):
        meta = {"classes": model.classes.tolist(), "widths": list(model.widths),
                "eps": model.eps}
        blocks = {**model.stack, **model.head}
        model_io.save_blocks(path, model_io.CLASSIFIER_MAGIC, "dcnet", meta, blocks)
    elif isinstance(model, RifuNetModel):
        meta = {"classes": model.classes.tolist(), "dims": list(model.dims),
                "eps": model.eps, "base_mode": model.base_mode}
        blocks = {**model.weights, "head_w": model.head_w, "head_b": model.head_b,
                  "base": model.base}
        model_io.save_blocks(path, model_io.CLASSIFIER_MAGIC, "rifunet", meta, blocks)
    else:
        raise ShapeError(f"not a classifier model: {type(model).__name__}")


def load_classifier(path):
    kind, meta, blocks = model_io.load_blocks(path, model_io.CLASSIFIER_MAGIC)
    classes = np.array(meta["classes"], dtype=int)
    if kind == "mdm":
        return MdmModel(classes, blocks["prototypes"])
    if kind == "tslr":
        return TslrModel(classes, blocks["base"], blocks["whitener"],
                         blocks["weights"], blocks["bias"])
    if kind == "tsa-lda":
        lda = LdaModel(classes, blocks["means"], blocks["cov"],
                       blocks["cov_inv_means"], blocks["const"])
        return TsaLdaModel(blocks["base"], blocks["whitener"], lda)
    if kind == "csp-lda":
        lda = LdaModel(classes, blocks["means"], blocks["cov"],
                       blocks["cov_inv_means"], blocks["const"])
        return CspModel(meta["channels"], meta["m_filters"], meta["zscore"],
                        meta["shrinkage"], classes, blocks["filters"], lda)
    if kind == "dcnet":
        widths = tuple(meta["widths"])
        stack = {k: blocks[k] for k in blocks if k.startswith("w_")}
        head = {k: blocks[k] for k in ("h0", "h1", "b")}
        return DcNetModel(widths, float(meta["eps"]), classes, stack, head)
    if kind == "rifunet":
        weights = {k: blocks[k] for k in ("enc_0", "enc_1", "dec_0", "dec_1")}
        return RifuNetModel(tuple(meta["dims"]), float(meta["eps"]), classes,
                            weights, blocks["head_w"], blocks["head_b"],
                            blocks["base"], meta["base_mode"])
    raise ShapeError(f"unknown classifier kind '{kind}'")
