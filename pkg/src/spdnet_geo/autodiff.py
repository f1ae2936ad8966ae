"""Reverse-mode differentiation over scalars, vectors, and matrices.

A :class:`Tape` records matrix-level operations in topological order;
:func:`backward` replays it once in reverse, accumulating adjoints
additively at fan-out. Values are plain float64 ``numpy`` arrays; the
matrix ops accept stacks ``(..., d, d)`` so a whole minibatch is one
node. Adjoints of nodes flagged symmetric are projected onto the
symmetric subspace before propagation, which keeps gradients of
symmetric-matrix parameters symmetric.

The matrix-log and matrix-exp backward passes use the Daleckii-Krein
divided-difference construction, with the divided differences replaced
by the derivative limit when an eigenvalue gap falls below
``1e-12 * lambda_max`` to avoid catastrophic cancellation.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ShapeError

__all__ = [
    "Tape",
    "Var",
    "AdamState",
    "adam_step",
    "backward",
    "check_gradient",
    "clip_gradients",
]


class Node:
    __slots__ = ("value", "parents", "backward_fn", "symmetric")

    def __init__(self, value, parents, backward_fn, symmetric):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.symmetric = symmetric


class Tape:
    """Append-only operation record; one backward pass per forward pass."""

    def __init__(self):
        self.nodes = []
        self._backward_done = False

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, symmetric=False):
        """Register an input (parameter or constant) as a differentiable leaf."""
        return self._push(np.asarray(value, dtype=float), (), None, symmetric)

    def _push(self, value, parents, backward_fn, symmetric=False):
        self.nodes.append(Node(np.asarray(value, dtype=float), parents, backward_fn, symmetric))
        return Var(self, len(self.nodes) - 1)


class Var:
    """Handle to a tape node. Shape is fixed at creation."""

    __slots__ = ("tape", "nid")

    def __init__(self, tape, nid):
        self.tape = tape
        self.nid = nid

    @property
    def value(self):
        return self.tape.nodes[self.nid].value

    @property
    def shape(self):
        return self.tape.nodes[self.nid].value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_var(tape, x):
    """Wrap raw arrays/scalars as constant leaves."""
    if isinstance(x, Var):
        return x
    return tape.leaf(np.asarray(x, dtype=float))


def _sym(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (undo numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Gradients:
    """Adjoint per node; unreachable leaves read as zero."""

    def __init__(self, by_node, tape):
        self._by_node = by_node
        self._tape = tape

    def __getitem__(self, var):
        g = self._by_node.get(var.nid)
        if g is None:
            return np.zeros_like(var.value)
        return g


def backward(loss):
    """Reverse sweep from a scalar loss; returns :class:`Gradients`.

    Exactly one adjoint accumulation happens per input edge; fan-out
    adds. Gradients at symmetric nodes are symmetrized.
    """
    tape = loss.tape
    if loss.value.shape != ():
        raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
    if tape._backward_done:
        raise RuntimeError("tape already consumed by a backward pass")
    tape._backward_done = True

    adjoint = {loss.nid: np.ones(())}
    for nid in range(loss.nid, -1, -1):
        g = adjoint.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.symmetric:
            g = _sym(g)
            adjoint[nid] = g
        if node.backward_fn is None:
            continue
        for pid, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None:
                continue
            if pid in adjoint:
                adjoint[pid] = adjoint[pid] + pg
            else:
                adjoint[pid] = pg
    return Gradients(adjoint, tape)


# ---------------------------------------------------------------------------
# primitive operations


def add(a, b):
    tape = a.tape if isinstance(a, Var) else b.tape
    a = _as_var(tape, a)
    b = _as_var(tape, b)
    av, bv = a.value, b.value
    sym_out = (
        tape.nodes[a.nid].symmetric
        and tape.nodes[b.nid].symmetric
        and av.shape == bv.shape
    )

    def bwd(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return tape._push(av + bv, (a.nid, b.nid), bwd, sym_out)


def sub(a, b):
    tape = a.tape if isinstance(a, Var) else b.tape
    a = _as_var(tape, a)
    b = _as_var(tape, b)
    av, bv = a.value, b.value
    sym_out = (
        tape.nodes[a.nid].symmetric
        and tape.nodes[b.nid].symmetric
        and av.shape == bv.shape
    )

    def bwd(g):
        return _unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)

    return tape._push(av - bv, (a.nid, b.nid), bwd, sym_out)


def scale(x, s):
    """Product of a tensor and a scalar; either side may be a Var."""
    tape = x.tape if isinstance(x, Var) else s.tape
    x = _as_var(tape, x)
    s = _as_var(tape, s)
    xv, sv = x.value, s.value
    if sv.shape != ():
        raise ShapeError("scale factor must be scalar")

    def bwd(g):
        return g * sv, np.sum(g * xv)

    return tape._push(xv * sv, (x.nid, s.nid), bwd, tape.nodes[x.nid].symmetric)


def mul(a, b):
    """Elementwise product (scalars or same-shape tensors)."""
    tape = a.tape if isinstance(a, Var) else b.tape
    a = _as_var(tape, a)
    b = _as_var(tape, b)
    av, bv = a.value, b.value

    def bwd(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return tape._push(av * bv, (a.nid, b.nid), bwd)


def div(a, b):
    """Scalar division a / b."""
    tape = a.tape if isinstance(a, Var) else b.tape
    a = _as_var(tape, a)
    b = _as_var(tape, b)
    av, bv = a.value, b.value

    def bwd(g):
        return g / bv, -g * av / (bv * bv)

    return tape._push(av / bv, (a.nid, b.nid), bwd)


def matmul(a, b):
    tape = a.tape if isinstance(a, Var) else b.tape
    a = _as_var(tape, a)
    b = _as_var(tape, b)
    av, bv = a.value, b.value

    def bwd(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return tape._push(av @ bv, (a.nid, b.nid), bwd)


def transpose(a):
    av = a.value

    def bwd(g):
        return (np.swapaxes(g, -1, -2),)

    return a.tape._push(np.swapaxes(av, -1, -2), (a.nid,), bwd)


def congruence(C, W):
    """W^T C W for one weight matrix W (d_in, d_out) and C (..., d_in, d_in)."""
    tape = C.tape if isinstance(C, Var) else W.tape
    C = _as_var(tape, C)
    W = _as_var(tape, W)
    Cv, Wv = C.value, W.value
    out = np.swapaxes(Wv, -1, -2) @ Cv @ Wv

    def bwd(g):
        gC = Wv @ g @ np.swapaxes(Wv, -1, -2)
        gW = Cv @ Wv @ np.swapaxes(g, -1, -2) + np.swapaxes(Cv, -1, -2) @ Wv @ g
        return _unbroadcast(gC, Cv.shape), _unbroadcast(gW, Wv.shape)

    return tape._push(out, (C.nid, W.nid), bwd, symmetric=True)


def add_scaled_identity(C, eps):
    """C + eps * I on the trailing two axes."""
    Cv = C.value
    d = Cv.shape[-1]
    out = Cv + eps * np.eye(d)

    def bwd(g):
        return (g,)

    return C.tape._push(out, (C.nid,), bwd, symmetric=C.tape.nodes[C.nid].symmetric)


def _eigh_cached(M):
    try:
        return np.linalg.eigh(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigensolver failed: {exc}") from exc


def sym_eig(M):
    """Differentiable eigendecomposition of a symmetric matrix.

    Returns ``(eigenvalues, eigenvectors)`` as two Vars sharing one
    forward factorization. The eigenvector adjoint uses the standard
    inverse-gap construction and is valid away from degenerate spectra.
    """
    Mv = M.value
    w, U = _eigh_cached(Mv)

    def bwd_vals(g):
        return (_sym(np.einsum("...ij,...j,...kj->...ik", U, g, U)),)

    def bwd_vecs(g):
        gap = w[..., None, :] - w[..., :, None]
        near = np.abs(gap) < 1e-12 * np.abs(w).max(axis=-1)[..., None, None]
        F = np.where(near, 0.0, 1.0 / np.where(near, 1.0, gap))
        inner = np.swapaxes(U, -1, -2) @ g
        return (_sym(U @ (F * inner) @ np.swapaxes(U, -1, -2)),)

    vals = M.tape._push(w, (M.nid,), bwd_vals)
    vecs = M.tape._push(U, (M.nid,), bwd_vecs)
    return vals, vecs


def _loewner(w, fn, dfn, gap_tol=1e-12):
    """Divided-difference matrix Phi for a spectral function fn.

    Phi_ij = (fn(w_i) - fn(w_j)) / (w_i - w_j), with the diagonal and
    near-degenerate pairs replaced by the derivative dfn.
    """
    fw = fn(w)
    num = fw[..., :, None] - fw[..., None, :]
    den = w[..., :, None] - w[..., None, :]
    scale_ = np.abs(w).max(axis=-1)[..., None, None]
    near = np.abs(den) < gap_tol * np.maximum(scale_, 1e-300)
    mid = 0.5 * (w[..., :, None] + w[..., None, :])
    return np.where(near, dfn(mid), num / np.where(near, 1.0, den))


def _spectral_op(M, fn, dfn, clamp_floor=None, overflow=None):
    Mv = M.value
    w, U = _eigh_cached(Mv)
    if clamp_floor is not None:
        wmax = w.max(axis=-1, keepdims=True)
        if np.any(wmax <= 0) or np.any(w < -clamp_floor * wmax):
            raise NumericalError("matrix function input is not positive definite")
        w = np.maximum(w, clamp_floor * wmax)
    if overflow is not None and np.any(w > overflow):
        raise NumericalError("matrix exponential overflow")
    out = _sym(np.einsum("...ij,...j,...kj->...ik", U, fn(w), U))

    def bwd(g):
        g = _sym(g)
        inner = np.swapaxes(U, -1, -2) @ g @ U
        Phi = _loewner(w, fn, dfn)
        return (_sym(U @ (Phi * inner) @ np.swapaxes(U, -1, -2)),)

    return M.tape._push(out, (M.nid,), bwd, symmetric=True)


def matrix_log(M):
    """Principal matrix logarithm of an SPD value (eigenvalues floored)."""
    return _spectral_op(M, np.log, lambda x: 1.0 / x, clamp_floor=1e-10)


def matrix_exp_sym(M):
    """Matrix exponential of a symmetric value."""
    return _spectral_op(M, np.exp, np.exp, overflow=700.0)


def frobenius_norm_sq(A):
    Av = A.value

    def bwd(g):
        return (2.0 * g * Av,)

    return A.tape._push(np.sum(Av * Av), (A.nid,), bwd)


def trace(A):
    """Trace over the trailing two axes (batch traces stay a vector)."""
    Av = A.value
    d = Av.shape[-1]

    def bwd(g):
        return (g[..., None, None] * np.eye(d),)

    return A.tape._push(np.trace(Av, axis1=-2, axis2=-1), (A.nid,), bwd)


def offdiag_norm_sq(A):
    """Sum of squared off-diagonal entries (all axes reduced)."""
    Av = A.value
    d = Av.shape[-1]
    mask = 1.0 - np.eye(d)

    def bwd(g):
        return (2.0 * g * Av * mask,)

    return A.tape._push(np.sum(Av * Av * mask), (A.nid,), bwd)


def batch_mean(A):
    """Mean over the leading batch axis."""
    Av = A.value
    n = Av.shape[0]

    def bwd(g):
        return (np.broadcast_to(g / n, Av.shape).copy(),)

    return A.tape._push(Av.mean(axis=0), (A.nid,), bwd, symmetric=A.tape.nodes[A.nid].symmetric)


def sum_all(A):
    Av = A.value

    def bwd(g):
        return (np.broadcast_to(g, Av.shape).copy(),)

    return A.tape._push(np.sum(Av), (A.nid,), bwd)


def segment_mean(A, labels, n_segments):
    """Per-label means over the leading axis: out[k] = mean of A[labels == k].

    Empty segments produce zeros and receive no gradient.
    """
    Av = A.value
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=n_segments).astype(float)
    out = np.zeros((n_segments,) + Av.shape[1:])
    np.add.at(out, labels, Av)
    safe = np.maximum(counts, 1.0)
    out /= safe.reshape((n_segments,) + (1,) * (Av.ndim - 1))

    def bwd(g):
        per_item = g / safe.reshape((n_segments,) + (1,) * (Av.ndim - 1))
        return (per_item[labels],)

    return A.tape._push(out, (A.nid,), bwd, symmetric=A.tape.nodes[A.nid].symmetric)


def index_rows(A, idx):
    """Gather rows of the leading axis: out[i] = A[idx[i]] (scatter-add backward)."""
    Av = A.value
    idx = np.asarray(idx)
    out = Av[idx]

    def bwd(g):
        gA = np.zeros_like(Av)
        np.add.at(gA, idx, g)
        return (gA,)

    return A.tape._push(out, (A.nid,), bwd, symmetric=A.tape.nodes[A.nid].symmetric)


def scale_rows(A, weights):
    """Multiply each leading-axis slice by a constant weight."""
    Av = A.value
    weights = np.asarray(weights, dtype=float)
    wexp = weights.reshape((len(weights),) + (1,) * (Av.ndim - 1))

    def bwd(g):
        return (g * wexp,)

    return A.tape._push(Av * wexp, (A.nid,), bwd, symmetric=A.tape.nodes[A.nid].symmetric)


def vec_upper(S):
    """Upper-triangle vectorization with sqrt(2) off-diagonal weighting."""
    Sv = S.value
    d = Sv.shape[-1]
    iu, ju = np.triu_indices(d)
    weights = np.where(iu == ju, 1.0, np.sqrt(2.0))
    out = Sv[..., iu, ju] * weights

    def bwd(g):
        gS = np.zeros_like(Sv)
        half = 0.5 * g * weights
        gS[..., iu, ju] += half
        gS[..., ju, iu] += half
        return (gS,)

    return S.tape._push(out, (S.nid,), bwd)


def diag_embed(v):
    """Embed a vector (..., d) as a diagonal matrix (..., d, d)."""
    vv = v.value
    d = vv.shape[-1]
    idx = np.arange(d)
    out = np.zeros(vv.shape + (d,))
    out[..., idx, idx] = vv

    def bwd(g):
        return (g[..., idx, idx],)

    return v.tape._push(out, (v.nid,), bwd, symmetric=True)


def softplus(x):
    xv = x.value
    out = np.logaddexp(0.0, xv)

    def bwd(g):
        return (g / (1.0 + np.exp(-xv)),)

    return x.tape._push(out, (x.nid,), bwd)


def square(x):
    xv = x.value

    def bwd(g):
        return (2.0 * g * xv,)

    return x.tape._push(xv * xv, (x.nid,), bwd)


def inverse(A):
    """Matrix inverse (used by the Pade evaluation of the skew exponential)."""
    Av = A.value
    try:
        inv = np.linalg.inv(Av)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular matrix in inverse: {exc}") from exc
    invT = np.swapaxes(inv, -1, -2)

    def bwd(g):
        return (-invT @ g @ invT,)

    return A.tape._push(inv, (A.nid,), bwd)


# Pade order-7 coefficients for expm scaling-and-squaring.
_PADE7 = (17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0)


def matrix_exp_skew(A):
    """R = exp(A - A^T), an orthogonal rotation from an unconstrained generator.

    Computed by scaling-and-squaring with a Pade(7,7) approximant at
    threshold ||X||_1 <= 0.5; the backward pass falls out of the
    primitive ops composing the evaluation.
    """
    tape = A.tape
    X = sub(A, transpose(A))
    d = X.value.shape[-1]
    norm1 = float(np.abs(X.value).sum(axis=-2).max()) if d else 0.0
    squarings = max(0, int(np.ceil(np.log2(norm1 / 0.5))) if norm1 > 0.5 else 0)
    Xs = scale(X, 0.5**squarings)

    I = tape.leaf(np.eye(d))
    b = _PADE7
    X2 = matmul(Xs, Xs)
    X4 = matmul(X2, X2)
    X6 = matmul(X2, X4)
    # U_p = X (b7 X^6 + b5 X^4 + b3 X^2 + b1 I), V_p = b6 X^6 + b4 X^4 + b2 X^2 + b0 I
    U_p = matmul(Xs, add(add(scale(X6, b[7]), scale(X4, b[5])), add(scale(X2, b[3]), scale(I, b[1]))))
    V_p = add(add(scale(X6, b[6]), scale(X4, b[4])), add(scale(X2, b[2]), scale(I, b[0])))
    R = matmul(inverse(sub(V_p, U_p)), add(V_p, U_p))
    for _ in range(squarings):
        R = matmul(R, R)
    return R


def linear(X, W, b):
    """Affine layer: X (n, d) -> X @ W.T + b with W (k, d), b (k,)."""
    tape = X.tape if isinstance(X, Var) else W.tape
    X = _as_var(tape, X)
    W = _as_var(tape, W)
    b = _as_var(tape, b)
    Xv, Wv, bv = X.value, W.value, b.value
    out = Xv @ Wv.T + bv

    def bwd(g):
        return g @ Wv, g.T @ Xv, g.sum(axis=0)

    return tape._push(out, (X.nid, W.nid, b.nid), bwd)


def log_softmax(Z):
    """Row-wise log-softmax of logits (n, k)."""
    Zv = Z.value
    zmax = Zv.max(axis=-1, keepdims=True)
    lse = zmax + np.log(np.sum(np.exp(Zv - zmax), axis=-1, keepdims=True))
    out = Zv - lse
    p = np.exp(out)

    def bwd(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Z.tape._push(out, (Z.nid,), bwd)


def cross_entropy(logp, y):
    """Mean negative log-likelihood of integer labels under row log-probs."""
    lv = logp.value
    y = np.asarray(y)
    n = lv.shape[0]
    out = -lv[np.arange(n), y].mean()

    def bwd(g):
        glp = np.zeros_like(lv)
        glp[np.arange(n), y] = -g / n
        return (glp,)

    return logp.tape._push(out, (logp.nid,), bwd)


def fisher_stats(Z, actions, subjects):
    """Within/between scatter of tangent rows for action and subject labels.

    Returns four scalar Vars ``(W_A, B_A, W_S, B_S)``:
    ``W_A = (1/N) sum_i ||z_i - mu_{a_i}||^2``,
    ``B_A = (1/N) sum_k n_k ||mu_k - mu||^2``, and the same pair over
    subject labels. Empty classes contribute zero. Differentiable in Z.
    """
    tape = Z.tape
    Zv = Z.value
    actions = np.asarray(actions)
    subjects = np.asarray(subjects)
    n = Zv.shape[0]
    mu = Zv.mean(axis=0)

    def _pair(labels):
        k = int(labels.max()) + 1 if len(labels) else 0
        counts = np.bincount(labels, minlength=k).astype(float)
        sums = np.zeros((k, Zv.shape[1]))
        np.add.at(sums, labels, Zv)
        means = sums / np.maximum(counts, 1.0)[:, None]
        centered = Zv - means[labels]
        within = float(np.sum(centered**2)) / n
        dev = means - mu
        between = float(np.sum(counts[:, None] * dev**2)) / n

        def bwd_within(g):
            return (2.0 * g / n * centered,)

        def bwd_between(g):
            return (2.0 * g / n * (means[labels] - mu),)

        w_var = tape._push(np.asarray(within), (Z.nid,), bwd_within)
        b_var = tape._push(np.asarray(between), (Z.nid,), bwd_between)
        return w_var, b_var

    W_A, B_A = _pair(actions)
    W_S, B_S = _pair(subjects)
    return W_A, B_A, W_S, B_S


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Adam moments with decoupled weight decay."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One Adam update in place on a dict of named parameter arrays.

    Weight decay is decoupled (applied to parameters, not folded into
    the gradient moments).
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p
        p -= state.lr * update
    return params, state


def clip_gradients(grads, max_norm):
    """Scale a dict of gradients so their global L2 norm is <= max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm and total > 0:
        factor = max_norm / total
        return {k: g * factor for k, g in grads.items()}, total
    return grads, total


# ---------------------------------------------------------------------------
# finite-difference checking


def check_gradient(build, params, step=1e-5, symmetric=()):
    """Compare tape gradients of a scalar function against central differences.

    ``build(tape, leaves)`` constructs the loss from a dict of leaf Vars
    created from ``params`` (name -> array). Parameters named in
    ``symmetric`` are treated as symmetric matrices: perturbations hit
    (i, j) and (j, i) together and upper-triangle coordinates only are
    checked. Returns the worst relative error, with the denominator
    floored at 1e-8; NaN anywhere reports as infinity.
    """
    symmetric = set(symmetric)

    def evaluate(values):
        tape = Tape()
        leaves = {k: tape.leaf(v, symmetric=k in symmetric) for k, v in values.items()}
        return build(tape, leaves), leaves

    loss, leaves = evaluate(params)
    grads = backward(loss)
    analytic = {k: np.array(grads[v]) for k, v in leaves.items()}

    worst = 0.0
    for name, base in params.items():
        base = np.asarray(base, dtype=float)
        if name in symmetric:
            d = base.shape[-1]
            coords = [(i, j) for i in range(d) for j in range(i, d)]
        else:
            coords = list(np.ndindex(base.shape if base.shape else (1,)))
        for coord in coords:
            perturbed = {k: np.array(v, dtype=float) for k, v in params.items()}

            def poke(sign):
                arr = np.array(base)
                if name in symmetric:
                    i, j = coord
                    arr[..., i, j] += sign * step
                    if i != j:
                        arr[..., j, i] += sign * step
                elif base.shape == ():
                    arr = arr + sign * step
                else:
                    arr[coord] += sign * step
                perturbed[name] = arr
                val, _ = evaluate(perturbed)
                return float(val.value)

            numeric = (poke(+1.0) - poke(-1.0)) / (2.0 * step)
            if name in symmetric:
                i, j = coord
                a = analytic[name][..., i, j] + (analytic[name][..., j, i] if i != j else 0.0)
                a = float(a)
            elif base.shape == ():
                a = float(analytic[name])
            else:
                a = float(analytic[name][coord])
            if not np.isfinite(numeric) or not np.isfinite(a):
                return np.inf
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
