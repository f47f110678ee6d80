"""Dense real linear algebra used throughout the package.

Matrices and vectors are plain numpy float64 arrays (row-major). Every
operation validates its inputs and is a pure function, so everything here
is safe to call from concurrent workers.
"""

from __future__ import annotations

import warnings

import numpy as np

__all__ = [
    "ConvergenceError",
    "RankDeficientWarning",
    "build_cholesky",
    "covariance",
    "log_det_psd",
    "polar_decompose",
    "solve_least_squares",
    "svd",
]

_EPS = np.finfo(np.float64).eps


class ConvergenceError(RuntimeError):
    """Iterative factorization failed to converge within its sweep cap."""

    def __init__(self, message: str, sweeps: int):
        super().__init__(message)
        self.sweeps = sweeps


class RankDeficientWarning(UserWarning):
    """A least-squares design matrix was numerically rank deficient."""


def _as_matrix(a, name: str) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be a 2-d matrix, got ndim={m.ndim}")
    if not np.isfinite(m).all():
        raise ValueError(f"{name} contains non-finite entries")
    return m


def _as_vector(v, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError(f"{name} must be a 1-d vector, got ndim={a.ndim}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite entries")
    return a


def cholesky_spd(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Raises ValueError when a pivot falls below a scale-relative floor,
    which is how callers detect rank deficiency.
    """
    a = _as_matrix(a, "a")
    n = a.shape[0]
    if a.shape[1] != n:
        raise ValueError("cholesky_spd requires a square matrix")
    scale = max(float(np.abs(np.diag(a)).max(initial=0.0)), 1.0)
    floor = scale * _EPS * max(n, 4) * 16.0
    low = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            acc = a[i, j] - low[i, :j] @ low[j, :j]
            if i == j:
                if acc <= floor:
                    raise ValueError("matrix is not positive definite")
                low[i, i] = np.sqrt(acc)
            else:
                low[i, j] = acc / low[j, j]
    return low


def _solve_cholesky(low: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    # Solve (L L^T) x = rhs by forward then backward substitution.
    n = low.shape[0]
    y = np.zeros_like(rhs)
    for i in range(n):
        y[i] = (rhs[i] - low[i, :i] @ y[:i]) / low[i, i]
    x = np.zeros_like(rhs)
    for i in range(n - 1, -1, -1):
        x[i] = (y[i] - low[i + 1 :, i] @ x[i + 1 :]) / low[i, i]
    return x


def solve_least_squares(design, targets) -> np.ndarray:
    """Coefficients X minimizing ||design @ X - targets||_F^2.

    Solved through the normal equations with a Cholesky factorization;
    sizes in this package keep that well conditioned. A numerically
    rank-deficient design falls back to the pseudoinverse and emits a
    RankDeficientWarning.
    """
    d = _as_matrix(design, "design")
    t = _as_matrix(targets, "targets")
    if d.shape[0] < d.shape[1]:
        raise ValueError(
            f"design needs at least as many rows as columns, got {d.shape}"
        )
    if t.shape[0] != d.shape[0]:
        raise ValueError(
            f"targets row count {t.shape[0]} does not match design {d.shape[0]}"
        )
    gram = d.T @ d
    rhs = d.T @ t
    try:
        low = cholesky_spd(gram)
    except ValueError:
        warnings.warn(
            "rank-deficient design; solving via pseudoinverse",
            RankDeficientWarning,
            stacklevel=2,
        )
        u, s, vt = svd(d)
        cutoff = max(d.shape) * _EPS * (s[0] if s.size else 0.0)
        inv_s = np.where(s > cutoff, 1.0 / np.where(s > cutoff, s, 1.0), 0.0)
        return vt.T @ (inv_s[:, None] * (u.T @ t))
    return _solve_cholesky(low, rhs)


def svd(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD via one-sided Jacobi column rotations.

    Returns (U, S, Vt) with S nonincreasing and nonnegative, U having
    orthonormal columns and Vt orthonormal rows. Deterministic and
    accurate for the small dense matrices used here.
    """
    a = _as_matrix(m, "m").copy()
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T.copy()
    rows, cols = a.shape
    v = np.eye(cols)

    max_sweeps = 100
    tol = 1e-12
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                app = a[:, p] @ a[:, p]
                aqq = a[:, q] @ a[:, q]
                apq = a[:, p] @ a[:, q]
                if app * aqq == 0.0 or abs(apq) <= tol * np.sqrt(app * aqq):
                    continue
                rotated = True
                zeta = (aqq - app) / (2.0 * apq)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                col_p = a[:, p].copy()
                a[:, p] = c * col_p - s * a[:, q]
                a[:, q] = s * col_p + c * a[:, q]
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if not rotated:
            break
    else:
        raise ConvergenceError(
            f"one-sided Jacobi SVD did not converge in {max_sweeps} sweeps",
            sweeps=max_sweeps,
        )

    norms = np.sqrt((a * a).sum(axis=0))
    order = np.argsort(-norms, kind="stable")
    s_sorted = norms[order]
    tiny = rows * _EPS * max(s_sorted[0] if cols else 0.0, 1.0)
    u = np.zeros((rows, cols))
    for j, col in enumerate(order):
        if s_sorted[j] > tiny:
            u[:, j] = a[:, col] / s_sorted[j]
        else:
            s_sorted[j] = 0.0
    # Complete an orthonormal basis for any zero singular directions.
    for j in range(cols):
        if s_sorted[j] > tiny:
            continue
        for k in range(rows):
            cand = np.zeros(rows)
            cand[k] = 1.0
            cand -= u @ (u.T @ cand)
            norm = np.sqrt(cand @ cand)
            if norm > 0.5:
                u[:, j] = cand / norm
                break
    vt = v[:, order].T
    if transposed:
        return vt.T.copy(), s_sorted, u.T.copy()
    return u, s_sorted, vt


def polar_decompose(a) -> tuple[np.ndarray, np.ndarray]:
    """Factor a square matrix as a = U @ P, U orthogonal and P symmetric PSD."""
    m = _as_matrix(a, "a")
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"polar decomposition requires a square matrix, got {m.shape}")
    u, s, vt = svd(m)
    orth = u @ vt
    p = vt.T @ (s[:, None] * vt)
    p = 0.5 * (p + p.T)
    return orth, p


def covariance(samples) -> np.ndarray:
    """Sample covariance (denominator M-1) of row observations, symmetrized."""
    x = _as_matrix(samples, "samples")
    m = x.shape[0]
    if m < 2:
        raise ValueError(f"covariance needs at least 2 samples, got {m}")
    centered = x - x.mean(axis=0)
    c = centered.T @ centered / (m - 1)
    return 0.5 * (c + c.T)


def eigvals_symmetric(m, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix via cyclic Jacobi rotations."""
    a = _as_matrix(m, "m").copy()
    n = a.shape[0]
    if a.shape[1] != n:
        raise ValueError("eigvals_symmetric requires a square matrix")
    a = 0.5 * (a + a.T)
    scale = max(float(np.abs(a).max(initial=0.0)), 1.0)
    tol = 1e-14 * scale
    for sweep in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            off = max(off, float(np.abs(a[p, p + 1 :]).max(initial=0.0)))
        if off <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= tol:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(1.0 + theta * theta))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
    else:
        raise ConvergenceError(
            f"Jacobi eigensolver did not converge in {max_sweeps} sweeps",
            sweeps=max_sweeps,
        )
    return np.diag(a).copy()


def log_det_psd(m, eigen_floor: float) -> float:
    """Sum of log eigenvalues with each eigenvalue floored from below.

    The floor keeps the log-determinant finite when embeddings repeat
    exactly across runs and the covariance collapses.
    """
    a = _as_matrix(m, "m")
    if a.shape[0] != a.shape[1]:
        raise ValueError("log_det_psd requires a square matrix")
    if eigen_floor <= 0.0:
        raise ValueError("eigen_floor must be positive")
    asym = float(np.abs(a - a.T).max(initial=0.0))
    if asym > 1e-9:
        raise ValueError(f"matrix is asymmetric beyond 1e-9 (max |m - m^T| = {asym:g})")
    eig = eigvals_symmetric(a)
    return float(np.log(np.maximum(eig, eigen_floor)).sum())


def lower_triangle_indices(dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major (row, col) index arrays for the strict lower triangle."""
    return np.tril_indices(dim, k=-1)


def build_cholesky(diag_raw, lower_flat) -> np.ndarray:
    """Lower-triangular factor with diagonal exp(diag_raw).

    The strict lower triangle is filled row-major from lower_flat. The
    exponential keeps the diagonal strictly positive, so L @ L.T is
    always symmetric positive definite.
    """
    diag = _as_vector(diag_raw, "diag_raw")
    lower = _as_vector(lower_flat, "lower_flat")
    d = diag.shape[0]
    expected = d * (d - 1) // 2
    if lower.shape[0] != expected:
        raise ValueError(
            f"lower_flat has length {lower.shape[0]}, expected {expected} for dim {d}"
        )
    low = np.zeros((d, d))
    np.fill_diagonal(low, np.exp(diag))
    rows, cols = lower_triangle_indices(d)
    low[rows, cols] = lower
    return low
