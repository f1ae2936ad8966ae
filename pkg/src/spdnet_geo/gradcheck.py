"""Finite-difference verification suite for every differentiable
primitive and every full training loss; used by tests and the CLI.
"""

import numpy as np

from . import align as al
from . import autodiff as ad
from . import classify as cl
from . import data as dat
from . import geometry as geo

TOLERANCE = 1e-4
STEP = 1e-5


def _random_orthogonal(rng, d):
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    return Q * np.sign(np.diag(R))


def _random_spd(rng, d, cond=20.0):
    Q = _random_orthogonal(rng, d)
    w = np.logspace(0.0, -np.log10(cond), d) if d > 1 else np.ones(1)
    return (Q * w) @ Q.T


def _random_sym(rng, d, scale=1.0):
    A = rng.standard_normal((d, d))
    return scale * 0.5 * (A + A.T)


def _near_degenerate_spd(rng, d, gap=1e-10):
    Q = _random_orthogonal(rng, d)
    w = np.linspace(1.0, 3.0, d)
    w[1] = w[0] + gap
    return (Q * w) @ Q.T


def primitive_checks(rng, d):
    """One parameter set per primitive for a given draw."""
    C = _random_spd(rng, d)
    S = _random_sym(rng, d)
    A = _random_sym(rng, d)
    W = rng.standard_normal((d, d))
    Wdown = rng.standard_normal((d, max(1, d - 2)))
    v = rng.standard_normal(d)
    X = rng.standard_normal((5, d))
    y = rng.integers(0, 3, size=5)
    Wl = rng.standard_normal((3, d))
    b = rng.standard_normal(3)
    Z = rng.standard_normal((8, d))
    acts = rng.integers(0, 3, size=8)
    subs = rng.integers(0, 2, size=8)
    Cdeg = _near_degenerate_spd(rng, d)
    Cs = np.stack([_random_spd(rng, d) for _ in range(4)])
    labels4 = np.array([0, 1, 0, 1])
    vec_coeff = rng.standard_normal(geo.vec_dim(d))

    def reduce_with(Avar, const):
        return ad.sum_all(ad.mul(Avar, const))

    return {
        "add": (lambda t, p: ad.sum_all(ad.square(ad.add(p["a"], p["b"]))),
                {"a": S, "b": A}, ()),
        "scale": (lambda t, p: ad.frobenius_norm_sq(ad.scale(p["x"], p["s"])),
                  {"x": S, "s": np.array(0.7)}, ()),
        "mul": (lambda t, p: ad.sum_all(ad.mul(p["a"], p["b"])),
                {"a": W, "b": W + 1.0}, ()),
        "div": (lambda t, p: ad.div(p["a"], p["b"]),
                {"a": np.array(1.3), "b": np.array(0.8)}, ()),
        "matmul": (lambda t, p: ad.frobenius_norm_sq(ad.matmul(p["a"], p["b"])),
                   {"a": W, "b": W.T + 0.5}, ()),
        "transpose": (lambda t, p: reduce_with(ad.transpose(p["a"]), t.leaf(W)),
                      {"a": W}, ()),
        "congruence": (lambda t, p: ad.frobenius_norm_sq(ad.congruence(p["C"], p["W"])),
                       {"C": C, "W": Wdown}, ("C",)),
        "add_scaled_identity": (
            lambda t, p: ad.frobenius_norm_sq(ad.add_scaled_identity(p["C"], 0.3)),
            {"C": C}, ("C",)),
        "sym_eig": (lambda t, p: _sym_eig_scalar(t, p["C"], A),
                    {"C": C}, ("C",)),
        "matrix_log": (lambda t, p: reduce_with(ad.matrix_log(p["C"]), t.leaf(A)),
                       {"C": C}, ("C",)),
        "matrix_log_degenerate": (
            lambda t, p: reduce_with(ad.matrix_log(p["C"]), t.leaf(A)),
            {"C": Cdeg}, ("C",)),
        "matrix_exp": (lambda t, p: reduce_with(ad.matrix_exp_sym(p["S"]), t.leaf(A)),
                       {"S": S}, ("S",)),
        "matrix_exp_degenerate": (
            lambda t, p: reduce_with(ad.matrix_exp_sym(p["S"]), t.leaf(A)),
            {"S": geo.spd_log(Cdeg)}, ("S",)),
        "matrix_exp_skew": (lambda t, p: reduce_with(ad.matrix_exp_skew(p["A"]), t.leaf(A)),
                            {"A": W}, ()),
        "inverse": (lambda t, p: reduce_with(ad.inverse(p["M"]), t.leaf(A)),
                    {"M": C + np.eye(d)}, ()),
        "frobenius_norm_sq": (lambda t, p: ad.frobenius_norm_sq(p["a"]), {"a": W}, ()),
        "trace": (lambda t, p: ad.sum_all(ad.trace(p["a"])), {"a": W}, ()),
        "offdiag_norm_sq": (lambda t, p: ad.offdiag_norm_sq(p["a"]), {"a": W}, ()),
        "vec_upper": (lambda t, p: reduce_with(ad.vec_upper(p["S"]), t.leaf(vec_coeff)),
                      {"S": S}, ("S",)),
        "diag_embed": (lambda t, p: reduce_with(ad.diag_embed(p["v"]), t.leaf(A)),
                       {"v": v}, ()),
        "softplus": (lambda t, p: ad.softplus(p["x"]), {"x": np.array(0.4)}, ()),
        "square": (lambda t, p: ad.square(p["x"]), {"x": np.array(-1.2)}, ()),
        "linear": (lambda t, p: ad.frobenius_norm_sq(ad.linear(t.leaf(X), p["W"], p["b"])),
                   {"W": Wl, "b": b}, ()),
        "log_softmax": (
            lambda t, p: ad.cross_entropy(ad.log_softmax(ad.linear(t.leaf(X), p["W"], p["b"])), y),
            {"W": Wl, "b": b}, ()),
        "cross_entropy": (
            lambda t, p: ad.cross_entropy(ad.log_softmax(p["z"]), y),
            {"z": rng.standard_normal((5, 3))}, ()),
        "fisher_stats": (lambda t, p: _fisher_scalar(p["Z"], acts, subs),
                         {"Z": Z}, ()),
        "batch_mean": (lambda t, p: reduce_with(ad.batch_mean(p["X"]), t.leaf(A)),
                       {"X": Cs}, ()),
        "segment_mean": (
            lambda t, p: ad.frobenius_norm_sq(ad.segment_mean(p["X"], labels4, 2)),
            {"X": Cs}, ()),
        "index_rows": (
            lambda t, p: ad.frobenius_norm_sq(
                ad.sub(p["X"], ad.index_rows(ad.segment_mean(p["X"], labels4, 2), labels4))),
            {"X": Cs}, ()),
        "scale_rows": (
            lambda t, p: ad.frobenius_norm_sq(ad.scale_rows(p["X"], np.array([1.0, 2.0, 0.5, 1.5]))),
            {"X": Cs}, ()),
    }


def _sym_eig_scalar(tape, Cvar, A):
    w, U = ad.sym_eig(Cvar)
    coeffs = np.linspace(0.5, 1.5, A.shape[0])
    diag = ad.diag_embed(ad.add(ad.scale(w, 0.5), tape.leaf(coeffs)))
    M = ad.matmul(ad.matmul(U, diag), ad.transpose(U))
    return ad.sum_all(ad.mul(M, tape.leaf(A)))


def _fisher_scalar(Zvar, acts, subs):
    W_A, B_A, W_S, B_S = ad.fisher_stats(Zvar, acts, subs)
    out = ad.add(W_A, ad.scale(B_A, -0.7))
    return ad.add(out, ad.add(ad.scale(W_S, 0.4), ad.scale(B_S, -0.3)))


def check_primitives(instances=10, seed=2024):
    """Worst relative FD error per primitive over randomized instances."""
    rng = np.random.default_rng(seed)
    worst = {}
    for i in range(instances):
        d = int(rng.integers(3, 9)) if i else 4
        for name, (build, params, sym_names) in primitive_checks(rng, d).items():
            err = ad.check_gradient(build, params, step=STEP, symmetric=sym_names)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


# ---------------------------------------------------------------------------
# full training losses


def _toy_set(rng, d, n_classes=2, n_subjects=2, n_trials=2):
    cfg = dat.SynthConfig(dim=d, n_subjects=n_subjects, n_classes=n_classes,
                          n_trials=n_trials, class_spread=0.6, rotation_scale=0.3,
                          noise_scale=0.25, seed=int(rng.integers(1 << 30)))
    return dat.synth_generate(cfg)


def _dcr_loss_check(rng):
    ds = _toy_set(rng, 3, n_trials=2)
    actions, _ = al._dense(ds.labels)
    counts = np.bincount(actions).astype(float)
    logs = geo.spd_log(ds.mats)
    hyper = al.DcrHyper()
    eye = np.eye(3)

    def build(tape, p):
        L = tape.leaf(logs, symmetric=True)
        R = ad.matrix_exp_skew(p["generator"])
        lam = ad.add(ad.softplus(p["scale_raw"]), al.SOFTPLUS_SHIFT)
        Lp = ad.scale(L, lam)
        means = ad.segment_mean(Lp, actions, len(counts))
        M = ad.batch_mean(Lp)
        Rt = ad.transpose(R)
        within = ad.frobenius_norm_sq(
            ad.matmul(ad.matmul(Rt, ad.sub(Lp, ad.index_rows(means, actions))), R))
        between = ad.frobenius_norm_sq(
            ad.scale_rows(ad.matmul(ad.matmul(Rt, ad.sub(means, M)), R), np.sqrt(counts)))
        center = ad.offdiag_norm_sq(ad.batch_mean(ad.matmul(ad.matmul(Rt, Lp), R)))
        loss = ad.scale(ad.div(within, ad.add(between, hyper.fisher_eps)), hyper.fisher_weight)
        loss = ad.add(loss, ad.scale(center, hyper.center_weight))
        loss = ad.add(loss, ad.scale(ad.square(ad.sub(lam, 1.0)), hyper.scale_anchor))
        return ad.add(loss, ad.scale(
            ad.frobenius_norm_sq(ad.sub(R, tape.leaf(eye))), hyper.identity_reg / 3))

    params = {"generator": 0.2 * rng.standard_normal((3, 3)),
              "scale_raw": np.asarray(al.SCALE_RAW_UNIT)}
    return ad.check_gradient(build, params, step=STEP)


def _rifu_loss_check(rng):
    ds = _toy_set(rng, 6, n_trials=1)
    dims = (6, 4, 2)
    params = al.unet_init_weights(ds.mats, dims)
    actions, _ = al._dense(ds.labels)
    subjects, _ = al._dense(ds.subjects)
    z_in = geo.vec_upper(geo.spd_log(ds.mats))

    def build(tape, leaves):
        C = tape.leaf(ds.mats, symmetric=True)
        out = al.unet_forward_var(leaves, C, 1e-4)
        z = ad.vec_upper(ad.matrix_log(out))
        W_A, B_A, W_S, _ = ad.fisher_stats(z, actions, subjects)
        rec = ad.scale(ad.frobenius_norm_sq(ad.sub(z, tape.leaf(z_in))), 1.0 / len(ds))
        loss = ad.add(W_A, ad.scale(B_A, -1.0))
        loss = ad.add(loss, ad.scale(W_S, -0.5))
        return ad.add(loss, ad.scale(rec, 0.1))

    return ad.check_gradient(build, params, step=STEP)


def _rifunet_loss_check(rng):
    ds = _toy_set(rng, 6, n_trials=1)
    dims = (6, 4, 2)
    m = geo.vec_dim(6)
    params = al.unet_init_weights(ds.mats, dims)
    params["head_w"] = 0.1 * rng.standard_normal((2, m))
    params["head_b"] = np.zeros(2)
    y_idx = np.searchsorted(np.unique(ds.labels), ds.labels)
    subjects, _ = al._dense(ds.subjects)
    cfg = cl.RifuNetConfig(lambda_act=0.3, lambda_sub=0.2, lambda_rec=0.1)

    def build(tape, leaves):
        C = tape.leaf(ds.mats, symmetric=True)
        unet = {k: leaves[k] for k in ("enc_0", "enc_1", "dec_0", "dec_1")}
        out = al.unet_forward_var(unet, C, 1e-4)
        S_out = ad.matrix_log(out)
        base_inv_sqrt = ad.matrix_exp_sym(ad.scale(ad.batch_mean(S_out), -0.5))
        T = ad.matrix_log(ad.matmul(ad.matmul(base_inv_sqrt, out), base_inv_sqrt))
        z = ad.vec_upper(T)
        ce = ad.cross_entropy(ad.log_softmax(ad.linear(z, leaves["head_w"], leaves["head_b"])), y_idx)
        W_A, B_A, W_S, B_S = ad.fisher_stats(z, y_idx, subjects)
        rec = ad.scale(ad.frobenius_norm_sq(ad.sub(out, C)), 1.0 / len(ds))
        loss = ad.add(ce, cl._fisher_penalties(cfg, W_A, B_A, W_S, B_S))
        return ad.add(loss, ad.scale(rec, cfg.lambda_rec))

    return ad.check_gradient(build, params, step=STEP)


def _dcnet_loss_check(rng):
    ds = _toy_set(rng, 6, n_trials=1)
    widths = (6, 12, 12, 6)  # d -> 2d -> 2d -> d with L = 3 congruences
    U = al.eigv_basis(ds.mats)
    m = geo.vec_dim(6)
    params = {f"w_{i}": al.init_congruence_weight(U, widths[i], widths[i + 1])
              for i in range(3)}
    params["h0"] = rng.standard_normal((4, m)) / np.sqrt(m)
    params["h1"] = rng.standard_normal((2, 4)) / 2.0
    params["b"] = np.zeros(2)
    y_idx = np.searchsorted(np.unique(ds.labels), ds.labels)
    subjects, _ = al._dense(ds.subjects)
    cfg = cl.DcNetConfig(lambda_act=0.3, lambda_sub=0.2)

    def build(tape, leaves):
        C = tape.leaf(ds.mats, symmetric=True)
        for i in range(3):
            C = ad.add_scaled_identity(ad.congruence(C, leaves[f"w_{i}"]), 1e-4)
        z = ad.vec_upper(ad.matrix_log(C))
        hidden = ad.matmul(z, ad.transpose(leaves["h0"]))
        ce = ad.cross_entropy(ad.log_softmax(ad.linear(hidden, leaves["h1"], leaves["b"])), y_idx)
        W_A, B_A, W_S, B_S = ad.fisher_stats(z, y_idx, subjects)
        return ad.add(ce, cl._fisher_penalties(cfg, W_A, B_A, W_S, B_S))

    return ad.check_gradient(build, params, step=STEP)


LOSS_CHECKS = {
    "loss_dcr": _dcr_loss_check,
    "loss_rifu": _rifu_loss_check,
    "loss_rifunet": _rifunet_loss_check,
    "loss_dcnet": _dcnet_loss_check,
}


def check_losses(instances=10, seed=77):
    rng = np.random.default_rng(seed)
    worst = {}
    for _ in range(instances):
        for name, fn in LOSS_CHECKS.items():
            worst[name] = max(worst.get(name, 0.0), fn(rng))
    return worst


def run_suite(instances=10, seed=2024):
    """Full verification suite; returns {check name: worst rel err}."""
    results = check_primitives(instances=instances, seed=seed)
    results.update(check_losses(instances=instances, seed=seed + 1))
    return results
