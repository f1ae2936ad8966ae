"""Covariance alignment stages: RA, RPA, and the trained pre-aligners.

All stages consume and produce :class:`~spdnet_geo.data.CovarianceSet`.
RA and RPA are label-free and may therefore be fitted on held-out
subjects' unlabeled data under the zero-shot protocol; the trained
pre-aligners (rotation/scale alignment and the SPD U-Net) use labels
and are fitted on training subjects only.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import model_io
from .errors import (
    EmptyInput,
    NumericalError,
    ShapeError,
    TrainingError,
    UnknownSubject,
)

SOFTPLUS_SHIFT = 1e-6  # scale = softplus(raw) + SOFTPLUS_SHIFT

# raw value at which softplus(raw) + SOFTPLUS_SHIFT == 1 exactly
SCALE_RAW_UNIT = math.log(math.exp(1.0 - SOFTPLUS_SHIFT) - 1.0)


def _dense(values):
    """Map arbitrary integer labels onto 0..k-1; returns (index, uniques)."""
    uniques, idx = np.unique(np.asarray(values), return_inverse=True)
    return idx, uniques


# ---------------------------------------------------------------------------
# Fisher statistics (measurement path; the differentiable version lives in
# autodiff.fisher_stats)


@dataclass
class FisherStats:
    within_action: float
    between_action: float
    within_subject: float
    between_subject: float
    class_means: dict
    subject_means: dict
    global_mean: np.ndarray


def fisher_stats(z, actions, subjects):
    """Scatter statistics of tangent rows grouped by action and subject.

    W = (1/N) sum_i ||z_i - mu_{group(i)}||^2 and
    B = (1/N) sum_g n_g ||mu_g - mu||^2 for each grouping.
    """
    z = np.asarray(z, dtype=float)
    if len(z) == 0:
        raise EmptyInput("fisher_stats of empty batch")
    n = len(z)
    mu = z.mean(axis=0)

    def pair(labels):
        idx, uniques = _dense(labels)
        k = len(uniques)
        counts = np.bincount(idx, minlength=k).astype(float)
        sums = np.zeros((k, z.shape[1]))
        np.add.at(sums, idx, z)
        means = sums / counts[:, None]
        within = float(np.sum((z - means[idx]) ** 2)) / n
        between = float(np.sum(counts[:, None] * (means - mu) ** 2)) / n
        return within, between, {int(u): means[i] for i, u in enumerate(uniques)}

    W_A, B_A, cmeans = pair(actions)
    W_S, B_S, smeans = pair(subjects)
    return FisherStats(W_A, B_A, W_S, B_S, cmeans, smeans, mu)


def tangent_features(ds, base=None):
    """Tangent rows z_i = vec_upper(log(base^-1/2 C_i base^-1/2)).

    ``base=None`` uses the identity (appropriate for whitened sets).
    """
    mats = ds.mats
    if base is not None:
        iP = geo.spd_power(base, -0.5)
        mats = geo.sym(iP @ mats @ iP)
    return geo.vec_upper(geo.spd_log(mats))


# ---------------------------------------------------------------------------
# Riemannian Alignment


@dataclass
class RaModel:
    """Per-subject (or global) whitening references."""

    scope: str  # "subject" | "train-global"
    mean_kind: str
    references: dict  # subject id -> SPD reference
    whiteners: dict  # subject id -> reference^-1/2

    GLOBAL = -1


def _reference_mean(mats, mean_kind):
    if mean_kind == "log-euclidean":
        return geo.log_euclidean_mean(mats)
    if mean_kind == "karcher":
        return geo.karcher_mean(mats, tol=1e-10, max_iter=200)
    raise ShapeError(f"unknown reference mean '{mean_kind}'")


def ra_fit(ds, scope="subject", mean_kind="log-euclidean"):
    """Whitening references from unlabeled covariances.

    ``subject`` scope computes one reference per subject present in
    ``ds``; ``train-global`` computes a single shared reference, usable
    for subjects never seen at fit time.
    """
    if scope not in ("subject", "train-global"):
        raise ShapeError(f"unknown RA scope '{scope}'")
    references, whiteners = {}, {}
    if scope == "train-global":
        ref = _reference_mean(ds.mats, mean_kind)
        references[RaModel.GLOBAL] = ref
        whiteners[RaModel.GLOBAL] = geo.spd_power(ref, -0.5)
    else:
        for s in ds.subject_ids():
            ref = _reference_mean(ds.mats[ds.subjects == s], mean_kind)
            references[int(s)] = ref
            whiteners[int(s)] = geo.spd_power(ref, -0.5)
    return RaModel(scope, mean_kind, references, whiteners)


def ra_apply(model, ds):
    """Whiten every covariance by its subject's reference."""
    out = np.empty_like(ds.mats)
    if model.scope == "train-global":
        P = model.whiteners[RaModel.GLOBAL]
        out = geo.sym(P @ ds.mats @ P)
    else:
        for s in ds.subject_ids():
            if int(s) not in model.whiteners:
                raise UnknownSubject(f"subject {int(s)} not in RA model")
            P = model.whiteners[int(s)]
            sel = ds.subjects == s
            out[sel] = geo.sym(P @ ds.mats[sel] @ P)
    return ds.with_mats(out)


# ---------------------------------------------------------------------------
# Riemannian Procrustes Analysis


@dataclass
class RpaModel:
    means: dict  # subject -> mu_s
    dispersions: dict  # subject -> Sigma_s
    rotations: dict  # subject -> R_s (eigenvectors of Sigma_s)
    dispersion_kind: str


RPA_EPS = 1e-8


def rpa_fit(ds, dispersion="log-scatter"):
    """Per-subject recentering mean, dispersion matrix, and rotation.

    The recentering mean is the AIRM Frechet mean, so the recentered
    cloud is centered at the identity. The dispersion matrix is
    ``exp(mean_i (L_i - L_mean)^2 + eps I)`` over recentered logs
    (``log-scatter``), or the log-Euclidean mean of the recentered set
    (``mean``).
    """
    if dispersion not in ("log-scatter", "mean"):
        raise ShapeError(f"unknown RPA dispersion '{dispersion}'")
    means, dispersions, rotations = {}, {}, {}
    for s in ds.subject_ids():
        mats = ds.mats[ds.subjects == s]
        if len(mats) < 2:
            raise EmptyInput(f"subject {int(s)} needs >= 2 items for dispersion")
        mu = geo.karcher_mean(mats, tol=1e-10, max_iter=200)
        iP = geo.spd_power(mu, -0.5)
        recentered = geo.sym(iP @ mats @ iP)
        logs = geo.spd_log(recentered)
        centered = logs - logs.mean(axis=0)
        if dispersion == "log-scatter":
            scatter = geo.sym((centered @ centered).mean(axis=0))
            Sigma = geo.spd_exp(scatter + RPA_EPS * np.eye(ds.dim))
        else:
            Sigma = geo.log_euclidean_mean(recentered)
        _, U = geo.sym_eig(Sigma)
        means[int(s)] = mu
        dispersions[int(s)] = Sigma
        rotations[int(s)] = U
    return RpaModel(means, dispersions, rotations, dispersion)


def rpa_apply(model, ds):
    out = np.empty_like(ds.mats)
    for s in ds.subject_ids():
        if int(s) not in model.means:
            raise UnknownSubject(f"subject {int(s)} not in RPA model")
        sel = ds.subjects == s
        iMu = geo.spd_power(model.means[int(s)], -0.5)
        iSig = geo.spd_power(model.dispersions[int(s)], -0.5)
        R = model.rotations[int(s)]
        step1 = geo.sym(iMu @ ds.mats[sel] @ iMu)
        step2 = geo.sym(iSig @ step1 @ iSig)
        out[sel] = geo.sym(np.swapaxes(R, -1, -2) @ step2 @ R)
    return ds.with_mats(out)


def rpa_align(ds, dispersion="log-scatter"):
    """Recenter, rescale dispersion, and rotate each subject's cloud."""
    return rpa_apply(rpa_fit(ds, dispersion), ds)


# ---------------------------------------------------------------------------
# trained rotation/scale pre-aligner (log-domain, Fisher objective)


@dataclass
class DcrHyper:
    fisher_weight: float = 1.0  # on W/(B + eps)
    center_weight: float = 0.1  # on the off-diagonal center penalty
    scale_anchor: float = 0.1  # on (scale - 1)^2
    identity_reg: float = 0.01  # base of the cosine-decayed ||R - I||^2 term
    fisher_eps: float = 1e-6
    lr: float = 1e-3
    steps: int = 1000


@dataclass
class DcrModel:
    generator: np.ndarray  # unconstrained rotation generator
    scale_raw: float
    loss_history: np.ndarray = field(default=None, repr=False)

    @property
    def rotation(self):
        tape = ad.Tape()
        return ad.matrix_exp_skew(tape.leaf(self.generator)).value

    @property
    def scale(self):
        return float(np.logaddexp(0.0, self.scale_raw) + SOFTPLUS_SHIFT)


def dcr_fit(ds, hyper=None):
    """Learn a global rotation and dispersion scale in the log domain.

    Minimizes a Fisher ratio of rotated, dispersion-scaled logs plus a
    center penalty, a scale anchor, and a cosine-decayed pull of the
    rotation toward the identity. Expects a whitened, labeled set.
    """
    hyper = hyper or DcrHyper()
    actions, classes = _dense(ds.labels)
    if len(classes) < 2:
        raise TrainingError("rotation alignment needs >= 2 classes")
    d = ds.dim
    n_classes = len(classes)
    counts = np.bincount(actions, minlength=n_classes).astype(float)
    logs = geo.spd_log(ds.mats)

    params = {
        "generator": np.zeros((d, d)),
        "scale_raw": np.asarray(SCALE_RAW_UNIT),
    }
    state = ad.AdamState(lr=hyper.lr)
    eye = np.eye(d)
    history = np.empty(hyper.steps + 1)

    for t in range(hyper.steps):
        tape = ad.Tape()
        A = tape.leaf(params["generator"])
        raw = tape.leaf(params["scale_raw"])
        L_const = tape.leaf(logs, symmetric=True)

        R = ad.matrix_exp_skew(A)
        lam = ad.add(ad.softplus(raw), SOFTPLUS_SHIFT)
        Lp = ad.scale(L_const, lam)
        class_means = ad.segment_mean(Lp, actions, n_classes)
        global_mean = ad.batch_mean(Lp)

        Rt = ad.transpose(R)
        diffs = ad.sub(Lp, ad.index_rows(class_means, actions))
        within = ad.frobenius_norm_sq(ad.matmul(ad.matmul(Rt, diffs), R))
        dev = ad.sub(class_means, global_mean)
        dev_rot = ad.matmul(ad.matmul(Rt, dev), R)
        between = ad.frobenius_norm_sq(ad.scale_rows(dev_rot, np.sqrt(counts)))
        center = ad.offdiag_norm_sq(ad.batch_mean(ad.matmul(ad.matmul(Rt, Lp), R)))

        beta_t = hyper.identity_reg * (1.0 + math.cos(math.pi * t / hyper.steps)) / 2.0
        loss = ad.scale(ad.div(within, ad.add(between, hyper.fisher_eps)), hyper.fisher_weight)
        loss = ad.add(loss, ad.scale(center, hyper.center_weight))
        loss = ad.add(loss, ad.scale(ad.square(ad.sub(lam, 1.0)), hyper.scale_anchor))
        loss = ad.add(loss, ad.scale(ad.frobenius_norm_sq(ad.sub(R, tape.leaf(eye))), beta_t / d))

        value = float(loss.value)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss at step {t}")
        history[t] = value
        grads = ad.backward(loss)
        ad.adam_step(params, {k: grads[v] for k, v in (("generator", A), ("scale_raw", raw))}, state)

    history[hyper.steps] = _dcr_loss_value(params, logs, actions, counts, hyper)
    return DcrModel(params["generator"], float(params["scale_raw"]), history)


def _dcr_loss_value(params, logs, actions, counts, hyper):
    """Forward-only loss at the final parameters (beta_T = 0)."""
    tape = ad.Tape()
    R = ad.matrix_exp_skew(tape.leaf(params["generator"])).value
    lam = float(np.logaddexp(0.0, params["scale_raw"]) + SOFTPLUS_SHIFT)
    Lp = lam * logs
    n_classes = len(counts)
    sums = np.zeros((n_classes,) + logs.shape[1:])
    np.add.at(sums, actions, Lp)
    means = sums / counts[:, None, None]
    M = Lp.mean(axis=0)
    rot = lambda X: np.swapaxes(R, -1, -2) @ X @ R
    within = float(np.sum(rot(Lp - means[actions]) ** 2))
    between = float(np.sum(counts[:, None, None] * rot(means - M) ** 2))
    center_mat = rot(Lp).mean(axis=0)
    center = float(np.sum((center_mat * (1.0 - np.eye(Lp.shape[-1]))) ** 2))
    return (
        hyper.fisher_weight * within / (between + hyper.fisher_eps)
        + hyper.center_weight * center
        + hyper.scale_anchor * (lam - 1.0) ** 2
    )


def dcr_apply(model, ds):
    """Per item: exp(R^T (scale * log C) R)."""
    R = model.rotation
    logs = model.scale * geo.spd_log(ds.mats)
    rotated = np.swapaxes(R, -1, -2) @ logs @ R
    return ds.with_mats(geo.spd_exp(geo.sym(rotated)))


# ---------------------------------------------------------------------------
# SPD U-Net pre-aligner


@dataclass
class RifuConfig:
    encoder_dims: tuple = None  # (d, d1, d2); None derives from the data dim
    lambda_within: float = 1.0
    lambda_between: float = 1.0
    lambda_subject: float = 0.5
    lambda_rec: float = 0.1
    eps: float = 1e-6  # SPD stabilizer after each congruence
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 256
    steps: int = 1000
    clip_norm: float = 10.0
    seed: int = 0


@dataclass
class RifuModel:
    dims: tuple  # (d, d1, d2)
    eps: float
    weights: dict  # enc_0, enc_1, dec_0, dec_1
    loss_history: np.ndarray = field(default=None, repr=False)


def default_unet_dims(d):
    """Encoder widths d -> d1 -> d2 (22 -> 16 -> 8 at full EEG scale)."""
    d1 = max(1, round(d * 8 / 11))
    d2 = max(1, round(d1 / 2))
    return (d, d1, d2)


def eigv_basis(mats):
    """Eigenvectors of the Euclidean global mean, leading first."""
    _, U = geo.sym_eig(np.asarray(mats).mean(axis=0))
    return U[:, ::-1]


def init_congruence_weight(U, d_in, d_out):
    """Leading-eigenvector slice W = U[:d_in, :d_out] of a basis matrix.

    Widths beyond the basis size extend U block-diagonally; when the
    slice needs more columns than rows, orthonormal column blocks are
    tiled side by side and rescaled so rows keep unit norm
    (up-projections are rank-d_in by construction).
    """
    d = U.shape[0]
    if max(d_in, d_out) > d:
        reps = int(np.ceil(max(d_in, d_out) / d))
        big = np.zeros((d * reps, d * reps))
        for r in range(reps):
            big[r * d : (r + 1) * d, r * d : (r + 1) * d] = U
        U = big
    if d_out <= d_in:
        return U[:d_in, :d_out].copy()
    base = U[:d_in, :d_in]
    reps = int(np.ceil(d_out / d_in))
    return np.concatenate([base] * reps, axis=1)[:, :d_out] / np.sqrt(reps)


def unet_init_weights(mats, dims):
    U = eigv_basis(mats)
    d, d1, d2 = dims
    return {
        "enc_0": init_congruence_weight(U, d, d1),
        "enc_1": init_congruence_weight(U, d1, d2),
        "dec_0": init_congruence_weight(U, d2, d1),
        "dec_1": init_congruence_weight(U, d1, d),
    }


def merge_var(a, b):
    """Differentiable log-Euclidean merge of two SPD Vars."""
    return ad.matrix_exp_sym(ad.scale(ad.add(ad.matrix_log(a), ad.matrix_log(b)), 0.5))


def unet_forward_var(weights, C, eps):
    """U-Net forward on the tape: encoder, bottleneck, decoder with merges."""
    e1 = ad.add_scaled_identity(ad.congruence(C, weights["enc_0"]), eps)
    bott = ad.add_scaled_identity(ad.congruence(e1, weights["enc_1"]), eps)
    d2 = ad.add_scaled_identity(ad.congruence(bott, weights["dec_0"]), eps)
    m1 = merge_var(d2, e1)
    d1 = ad.add_scaled_identity(ad.congruence(m1, weights["dec_1"]), eps)
    return merge_var(d1, C)


def unet_forward_np(weights, mats, eps):
    """Plain-array U-Net forward (inference path)."""

    def cong(C, W):
        out = np.swapaxes(W, -1, -2) @ C @ W
        return out + eps * np.eye(out.shape[-1])

    def merge(a, b):
        return geo.spd_exp(0.5 * (geo.spd_log(a) + geo.spd_log(b)))

    e1 = cong(mats, weights["enc_0"])
    bott = cong(e1, weights["enc_1"])
    d2 = cong(bott, weights["dec_0"])
    m1 = merge(d2, e1)
    d1 = cong(m1, weights["dec_1"])
    return merge(d1, mats)


def _minibatches(n, batch_size, steps, rng):
    """Deterministic stream of minibatch index arrays (reshuffle per pass)."""
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


def rifu_fit(ds, cfg=None, init_weights=None):
    """Train the SPD U-Net to tighten action clusters and spread subject
    structure while reconstructing its input in the log domain."""
    cfg = cfg or RifuConfig()
    dims = cfg.encoder_dims or default_unet_dims(ds.dim)
    if dims[0] != ds.dim:
        raise ShapeError(f"encoder input dim {dims[0]} != data dim {ds.dim}")
    actions, _ = _dense(ds.labels)
    subjects, _ = _dense(ds.subjects)

    params = init_weights or unet_init_weights(ds.mats, dims)
    params = {k: np.array(v, dtype=float) for k, v in params.items()}
    z_in = geo.vec_upper(geo.spd_log(ds.mats))
    state = ad.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history = []

    for batch in _minibatches(len(ds), cfg.batch_size, cfg.steps, rng):
        tape = ad.Tape()
        leaves = {k: tape.leaf(v) for k, v in params.items()}
        C = tape.leaf(ds.mats[batch], symmetric=True)
        out = unet_forward_var(leaves, C, cfg.eps)
        z = ad.vec_upper(ad.matrix_log(out))
        W_A, B_A, W_S, _ = ad.fisher_stats(z, actions[batch], subjects[batch])
        rec = ad.scale(ad.frobenius_norm_sq(ad.sub(z, tape.leaf(z_in[batch]))), 1.0 / len(batch))

        loss = ad.scale(W_A, cfg.lambda_within)
        loss = ad.add(loss, ad.scale(B_A, -cfg.lambda_between))
        loss = ad.add(loss, ad.scale(W_S, -cfg.lambda_subject))
        loss = ad.add(loss, ad.scale(rec, cfg.lambda_rec))

        value = float(loss.value)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss at step {len(history)}")
        history.append(value)
        if value < -1e6:
            break  # objective is not coercive; bail out of a runaway
        grads = ad.backward(loss)
        gdict = {k: grads[v] for k, v in leaves.items()}
        gdict, _ = ad.clip_gradients(gdict, cfg.clip_norm)
        ad.adam_step(params, gdict, state)

    return RifuModel(tuple(dims), cfg.eps, params, np.asarray(history))


def rifu_apply(model, ds):
    """Forward every covariance through the trained U-Net."""
    if ds.dim != model.dims[0]:
        raise ShapeError(f"data dim {ds.dim} != model dim {model.dims[0]}")
    return ds.with_mats(unet_forward_np(model.weights, ds.mats, model.eps))


# ---------------------------------------------------------------------------
# model persistence


def save_align_model(model, path):
    if isinstance(model, RaModel):
        ids = sorted(model.references)
        meta = {"scope": model.scope, "mean_kind": model.mean_kind, "subjects": ids}
        blocks = {}
        for s in ids:
            blocks[f"ref_{s}"] = model.references[s]
            blocks[f"whit_{s}"] = model.whiteners[s]
        model_io.save_blocks(path, model_io.ALIGN_MAGIC, "ra", meta, blocks)
    elif isinstance(model, RpaModel):
        ids = sorted(model.means)
        meta = {"dispersion": model.dispersion_kind, "subjects": ids}
        blocks = {}
        for s in ids:
            blocks[f"mean_{s}"] = model.means[s]
            blocks[f"disp_{s}"] = model.dispersions[s]
            blocks[f"rot_{s}"] = model.rotations[s]
        model_io.save_blocks(path, model_io.ALIGN_MAGIC, "rpa", meta, blocks)
    elif isinstance(model, DcrModel):
        meta = {"dim": int(model.generator.shape[0])}
        blocks = {"generator": model.generator, "scale_raw": np.asarray(model.scale_raw)}
        model_io.save_blocks(path, model_io.ALIGN_MAGIC, "dcr", meta, blocks)
    elif isinstance(model, RifuModel):
        meta = {"dims": list(model.dims), "eps": model.eps}
        model_io.save_blocks(path, model_io.ALIGN_MAGIC, "rifu", meta, dict(model.weights))
    else:
        raise ShapeError(f"not an alignment model: {type(model).__name__}")


def load_align_model(path):
    kind, meta, blocks = model_io.load_blocks(path, model_io.ALIGN_MAGIC)
    if kind == "ra":
        refs = {int(s): blocks[f"ref_{s}"] for s in meta["subjects"]}
        whits = {int(s): blocks[f"whit_{s}"] for s in meta["subjects"]}
        return RaModel(meta["scope"], meta["mean_kind"], refs, whits)
    if kind == "rpa":
        ids = [int(s) for s in meta["subjects"]]
        return RpaModel(
            {s: blocks[f"mean_{s}"] for s in ids},
            {s: blocks[f"disp_{s}"] for s in ids},
            {s: blocks[f"rot_{s}"] for s in ids},
            meta["dispersion"],
        )
    if kind == "dcr":
        return DcrModel(blocks["generator"], float(blocks["scale_raw"]))
    if kind == "rifu":
        return RifuModel(tuple(meta["dims"]), float(meta["eps"]), blocks)
    raise ShapeError(f"unknown alignment model kind '{kind}'")
