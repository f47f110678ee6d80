"""Latent-space comparison metrics.

Two embeddings of the same dataset are compared modulo an affine map:
``lsd`` (latent space distortion) is the minimum mean squared error of
``A @ mu(x) + b`` against the target means, with the minimizing (A, b)
found in closed form. ``retraining_variability`` measures, per data
point, the log volume of the covariance of that point's latent means
across repeated training runs, averaged over the dataset.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import linalg

__all__ = [
    "AffineMap",
    "MapAnalysis",
    "analyze_map",
    "fit_affine",
    "log_volume_per_point",
    "lsd",
    "median_iqr",
    "normalize_by_baseline",
    "retraining_variability",
]


@dataclass(frozen=True)
class AffineMap:
    """z -> matrix @ z + offset, with the mean squared fit residual."""

    matrix: np.ndarray
    offset: np.ndarray
    fit_residual: float

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=np.float64)
        b = np.ascontiguousarray(self.offset, dtype=np.float64)
        if m.ndim != 2 or b.shape != (m.shape[0],):
            raise ValueError("offset length must match the map's output dimension")
        if self.fit_residual < 0.0:
            raise ValueError("fit_residual must be nonnegative")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "offset", b)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.matrix.T + self.offset


@dataclass(frozen=True)
class MapAnalysis:
    """Spectral summary of a fitted map: stretch spectrum, distance of the
    spectrally rescaled matrix from the identity, and the offset norm."""

    spectrum: np.ndarray
    identity_distance: float
    bias_norm: float


def _as_points(a, name: str) -> np.ndarray:
    pts = np.ascontiguousarray(a, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError(f"{name} must be an (n, d) matrix")
    if not np.isfinite(pts).all():
        raise ValueError(f"{name} contains non-finite entries")
    return pts


def fit_affine(source_means, target_means) -> AffineMap:
    """Least-squares affine map from source means onto target means.

    Closed form through the design [source | 1]; exact for this quadratic
    objective. Needs at least d+1 rows to be determined.
    """
    src = _as_points(source_means, "source_means")
    tgt = _as_points(target_means, "target_means")
    if src.shape != tgt.shape:
        raise ValueError(f"shape mismatch: {src.shape} vs {tgt.shape}")
    n, d = src.shape
    if n <= d:
        raise ValueError(f"need more than d={d} rows to fit an affine map, got {n}")
    design = np.hstack([src, np.ones((n, 1))])
    coef = linalg.solve_least_squares(design, tgt)
    matrix = coef[:d, :].T
    offset = coef[d, :]
    mapped = src @ matrix.T + offset
    residual = float(((mapped - tgt) ** 2).sum(axis=1).mean())
    return AffineMap(matrix=matrix, offset=offset, fit_residual=residual)


def lsd(affine: AffineMap, source_means, target_means) -> float:
    """Mean squared error of the mapped source means against the target.

    Evaluated on the fitting set this equals the map's fit residual; when
    scoring two data slices the same fitted map must be used for both.
    """
    src = _as_points(source_means, "source_means")
    tgt = _as_points(target_means, "target_means")
    if src.shape != tgt.shape:
        raise ValueError(f"shape mismatch: {src.shape} vs {tgt.shape}")
    if src.shape[1] != affine.matrix.shape[1]:
        raise ValueError("map dimension does not match the embeddings")
    return float(((affine.apply(src) - tgt) ** 2).sum(axis=1).mean())


def _run_stack(runs) -> np.ndarray:
    """(M, n, d) stack of per-run latent means with identical row order."""
    arrays = []
    ref_indices = None
    for run in runs:
        means = getattr(run, "means", run)
        idx = getattr(run, "indices", None)
        if idx is not None:
            if ref_indices is None:
                ref_indices = np.asarray(idx)
            elif not np.array_equal(ref_indices, idx):
                raise ValueError("runs must share identical dataset ordering")
        arrays.append(_as_points(means, "run means"))
    if len(arrays) < 2:
        raise ValueError("need at least 2 runs")
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ValueError("all runs must embed the same dataset")
    return np.stack(arrays, axis=0)


def log_volume_per_point(runs, eigen_floor: float = 1e-12) -> np.ndarray:
    """Per point: log det of the covariance of its means across runs."""
    stack = _run_stack(runs)
    m, n, d = stack.shape
    if m <= d:
        warnings.warn(
            f"only {m} runs for {d} latent dimensions; covariances are "
            "rank deficient and the eigenvalue floor engages",
            RuntimeWarning,
            stacklevel=2,
        )
    out = np.empty(n)
    for i in range(n):
        rows = stack[:, i, :]
        # Canonical row order makes the result exactly invariant to the
        # order the runs were supplied in.
        rows = rows[np.lexsort(rows.T[::-1])]
        cov = linalg.covariance(rows)
        out[i] = linalg.log_det_psd(cov, eigen_floor)
    return out


def retraining_variability(runs, eigen_floor: float = 1e-12) -> float:
    """Mean over data of the per-point log covariance volume across runs."""
    return float(log_volume_per_point(runs, eigen_floor).mean())


def normalize_by_baseline(values, baseline) -> list[float]:
    """Subtract the baseline median, so the baseline method reports 0."""
    base = np.asarray(list(baseline), dtype=np.float64)
    if base.size == 0:
        raise ValueError("baseline must be nonempty")
    shift = float(np.median(base))
    return [float(v) - shift for v in values]


def median_iqr(values) -> tuple[float, float]:
    """Median and interquartile range of a value series."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("values must be nonempty")
    return (
        float(np.median(arr)),
        float(np.percentile(arr, 75) - np.percentile(arr, 25)),
    )


def analyze_map(affine: AffineMap) -> MapAnalysis:
    """Decompose the fitted map into rotation and stretch and summarize it.

    The spectrum holds the eigenvalues of the symmetric factor of the
    polar decomposition (the per-direction stretches), nonincreasing.
    identity_distance is the Frobenius distance between the identity and
    the map rescaled to a maximum singular value of 1.
    """
    a = affine.matrix
    if a.shape[0] != a.shape[1]:
        raise ValueError("map analysis requires a square matrix")
    scale = float(np.abs(a).max(initial=0.0))
    if scale == 0.0:
        raise ValueError("cannot analyze the zero map (no scale)")
    _, stretch = linalg.polar_decompose(a)
    spectrum = np.sort(linalg.eigvals_symmetric(stretch))[::-1].copy()
    sigma_max = float(spectrum[0])
    rescaled = a / sigma_max
    identity_distance = float(
        np.sqrt(((rescaled - np.eye(a.shape[0])) ** 2).sum())
    )
    return MapAnalysis(
        spectrum=spectrum,
        identity_distance=identity_distance,
        bias_norm=float(np.sqrt(affine.offset @ affine.offset)),
    )
