"""Dense linear algebra and Riemannian geometry on the SPD manifold.

Conventions used throughout the library:

- matrices are plain ``numpy`` arrays; spectral operations accept stacks
  with shape ``(..., d, d)`` and act on the trailing two axes,
- congruence transforms are written ``W.T @ C @ W`` with
  ``W`` of shape ``(d_in, d_out)``,
- eigenvalues inside matrix functions are clamped to
  ``EIG_FLOOR * lambda_max`` so near-singular covariances from short
  epochs stay usable; genuinely indefinite input raises
  :class:`NotPositiveDefinite`.
"""

import numpy as np

from .errors import EmptyInput, NotPositiveDefinite, NumericalError, ShapeError

# Relative eigenvalue floor: eigenvalues below EIG_FLOOR * lambda_max are
# clamped in spd_log/spd_power; below -EIG_FLOOR * lambda_max they are
# rejected as indefinite.
EIG_FLOOR = 1e-10

# spd_exp overflows float64 for eigenvalues beyond roughly log(DBL_MAX).
EXP_OVERFLOW = 700.0


def sym(M):
    """Symmetrize: (M + M^T) / 2 on the trailing two axes."""
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def as_sym(M):
    """Validate and symmetrize a square matrix (or stack of them)."""
    M = np.asarray(M, dtype=float)
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise ShapeError(f"expected square matrix, got shape {M.shape}")
    if M.shape[-1] < 1:
        raise ShapeError("matrix dimension must be >= 1")
    if not np.all(np.isfinite(M)):
        raise NumericalError("matrix has non-finite entries")
    return sym(M)


def as_spd(M):
    """Validate an SPD matrix: symmetric and no eigenvalue below the floor.

    Eigenvalues in ``[-EIG_FLOOR * lambda_max, 0]`` are tolerated (they are
    clamped inside matrix functions); anything lower is rejected.
    """
    M = as_sym(M)
    w = np.linalg.eigvalsh(M)
    wmax = w.max(axis=-1)
    if np.any(wmax <= 0.0):
        raise NotPositiveDefinite("matrix has no positive eigenvalue")
    if np.any(w.min(axis=-1) < -EIG_FLOOR * wmax):
        raise NotPositiveDefinite(
            f"matrix is indefinite (min eigenvalue {w.min():.3e})"
        )
    return M


def sym_eig(M):
    """Eigendecomposition of a symmetric matrix.

    Returns ``(w, U)`` with eigenvalues ascending and orthonormal
    eigenvector columns such that ``U @ diag(w) @ U.T == M``.
    """
    M = np.asarray(M, dtype=float)
    if M.shape[-1] != M.shape[-2]:
        raise ShapeError(f"expected square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NumericalError("matrix has non-finite entries")
    try:
        return np.linalg.eigh(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigensolver failed to converge: {exc}") from exc


def _clamped_eig(C):
    """eigh with the SPD floor applied; rejects indefinite input."""
    w, U = sym_eig(C)
    wmax = w.max(axis=-1, keepdims=True)
    if np.any(wmax <= 0.0):
        raise NotPositiveDefinite("matrix has no positive eigenvalue")
    if np.any(w < -EIG_FLOOR * wmax):
        raise NotPositiveDefinite(
            f"eigenvalue below clamp tolerance (min {w.min():.3e})"
        )
    return np.maximum(w, EIG_FLOOR * wmax), U


def _apply_spectral(w, U, fn):
    return sym(np.einsum("...ij,...j,...kj->...ik", U, fn(w), U))


def spd_log(C):
    """Matrix logarithm of an SPD matrix (principal branch)."""
    w, U = _clamped_eig(C)
    return _apply_spectral(w, U, np.log)


def spd_exp(S):
    """Matrix exponential of a symmetric matrix; the result is SPD."""
    w, U = sym_eig(np.asarray(S, dtype=float))
    if np.any(w > EXP_OVERFLOW):
        raise NumericalError(
            f"matrix exponential overflow (max eigenvalue {w.max():.3e})"
        )
    return _apply_spectral(w, U, np.exp)


def spd_power(C, p):
    """Fractional power ``C^p`` of an SPD matrix."""
    w, U = _clamped_eig(C)
    return _apply_spectral(w, U, lambda x: np.power(x, p))


def _check_same_dim(C1, C2):
    if C1.shape[-1] != C2.shape[-1]:
        raise ShapeError(f"dimension mismatch: {C1.shape} vs {C2.shape}")


def airm_distance(C1, C2):
    """Affine-invariant geodesic distance ||log(C1^-1/2 C2 C1^-1/2)||_F."""
    C1 = np.asarray(C1, dtype=float)
    C2 = np.asarray(C2, dtype=float)
    _check_same_dim(C1, C2)
    iS = spd_power(C1, -0.5)
    w, _ = _clamped_eig(sym(iS @ C2 @ iS))
    return float(np.sqrt(np.sum(np.log(w) ** 2)))


def log_map(base, C):
    """Riemannian log map at ``base``: base^1/2 log(base^-1/2 C base^-1/2) base^1/2."""
    base = np.asarray(base, dtype=float)
    C = np.asarray(C, dtype=float)
    _check_same_dim(base, C)
    w, U = _clamped_eig(base)
    P = _apply_spectral(w, U, np.sqrt)
    iP = _apply_spectral(w, U, lambda x: 1.0 / np.sqrt(x))
    return sym(P @ spd_log(sym(iP @ C @ iP)) @ P)


def exp_map(base, V):
    """Riemannian exp map at ``base``: base^1/2 exp(base^-1/2 V base^-1/2) base^1/2."""
    base = np.asarray(base, dtype=float)
    V = np.asarray(V, dtype=float)
    _check_same_dim(base, V)
    w, U = _clamped_eig(base)
    P = _apply_spectral(w, U, np.sqrt)
    iP = _apply_spectral(w, U, lambda x: 1.0 / np.sqrt(x))
    return sym(P @ spd_exp(sym(iP @ V @ iP)) @ P)


def congruence(C, W):
    """Congruence transform ``W.T @ C @ W`` with SPD validation.

    ``W`` has shape ``(d_in, d_out)`` with ``d_out <= d_in``; rank
    deficiency is detected through the output spectrum.
    """
    C = np.asarray(C, dtype=float)
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or C.shape[-1] != W.shape[0]:
        raise ShapeError(f"congruence shapes incompatible: {C.shape} and {W.shape}")
    if W.shape[1] > W.shape[0]:
        raise ShapeError("congruence must not increase dimension")
    out = sym(W.T @ C @ W)
    w = np.linalg.eigvalsh(out)
    wmax = w.max(axis=-1)
    if np.any(wmax <= 0.0) or np.any(w.min(axis=-1) <= EIG_FLOOR * wmax):
        raise NotPositiveDefinite("congruence output is not positive definite")
    return out


def log_euclidean_merge(C1, C2):
    """exp((log C1 + log C2) / 2); commutative and SPD-preserving."""
    C1 = np.asarray(C1, dtype=float)
    C2 = np.asarray(C2, dtype=float)
    _check_same_dim(C1, C2)
    return spd_exp(0.5 * (spd_log(C1) + spd_log(C2)))


def log_euclidean_mean(Cs):
    """exp of the arithmetic mean of matrix logs."""
    Cs = np.asarray(Cs, dtype=float)
    if Cs.ndim == 2:
        Cs = Cs[None]
    if Cs.shape[0] == 0:
        raise EmptyInput("log_euclidean_mean of empty sequence")
    return spd_exp(spd_log(Cs).mean(axis=0))


def karcher_mean(Cs, tol=1e-9, max_iter=100):
    """Fixed-point iteration for the AIRM Frechet mean (squared distances).

    Iterates ``mu <- exp_map(mu, mean_i log_map(mu, C_i))`` until the
    tangent-space gradient norm drops below ``tol``.
    """
    Cs = np.asarray(Cs, dtype=float)
    if Cs.ndim == 2:
        Cs = Cs[None]
    if Cs.shape[0] == 0:
        raise EmptyInput("karcher_mean of empty sequence")
    mu = log_euclidean_mean(Cs)
    for _ in range(max_iter):
        w, U = _clamped_eig(mu)
        P = _apply_spectral(w, U, np.sqrt)
        iP = _apply_spectral(w, U, lambda x: 1.0 / np.sqrt(x))
        V = sym(P @ spd_log(sym(iP @ Cs @ iP)).mean(axis=0) @ P)
        if np.linalg.norm(V) < tol:
            return mu
        mu = sym(P @ spd_exp(sym(iP @ V @ iP)) @ P)
    raise NumericalError(
        f"karcher_mean did not converge within {max_iter} iterations",
        last_iterate=mu,
    )


def vec_upper(S):
    """Vectorize the upper triangle with sqrt(2) off-diagonal weighting.

    The weighting makes the Euclidean norm of the vector equal the
    Frobenius norm of the symmetric matrix.
    """
    S = np.asarray(S, dtype=float)
    d = S.shape[-1]
    if S.shape[-2] != d:
        raise ShapeError(f"expected square matrix, got shape {S.shape}")
    iu, ju = np.triu_indices(d)
    weights = np.where(iu == ju, 1.0, np.sqrt(2.0))
    return S[..., iu, ju] * weights


def unvec_upper(z):
    """Inverse of :func:`vec_upper`; infers the matrix dimension."""
    z = np.asarray(z, dtype=float)
    m = z.shape[-1]
    d = int(round((np.sqrt(8 * m + 1) - 1) / 2))
    if d * (d + 1) // 2 != m:
        raise ShapeError(f"vector length {m} is not a triangular number")
    iu, ju = np.triu_indices(d)
    weights = np.where(iu == ju, 1.0, np.sqrt(2.0))
    S = np.zeros(z.shape[:-1] + (d, d))
    S[..., iu, ju] = z / weights
    S[..., ju, iu] = S[..., iu, ju]
    return S


def vec_dim(d):
    """Length of the tangent coordinate vector for a d x d matrix."""
    return d * (d + 1) // 2
