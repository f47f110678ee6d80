"""Distill a trained model's latent means into a set of Rosetta anchors.

All selectors are deterministic functions of their inputs and seed, and
every tie anywhere breaks toward the lowest index; the whole point of the
anchors is that re-running distillation cannot silently change them.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import linalg
from .datasets import FLOAT_FMT, Dataset
from .vae import ModelState, RosettaSet, model_digest, posterior_table

__all__ = [
    "ClusterResult",
    "EmbeddingTable",
    "SELECTORS",
    "embed_dataset",
    "kmeans",
    "load_rosetta",
    "save_rosetta",
    "select_rosetta",
    "select_variant",
]

SELECTORS = ("kmeans", "agglomerative", "gmm", "random")
ROSETTA_FORMAT = "rvae-rosetta-1"


@dataclass
class EmbeddingTable:
    """Latent mean per dataset row, in dataset order."""

    indices: np.ndarray  # (n,) row index into the source dataset
    means: np.ndarray  # (n, d)
    source_digest: str = ""

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.means = np.ascontiguousarray(self.means, dtype=np.float64)
        if self.means.ndim != 2 or self.indices.shape != (self.means.shape[0],):
            raise ValueError("indices and means must align row for row")

    def __len__(self) -> int:
        return self.means.shape[0]


@dataclass
class ClusterResult:
    centroids: np.ndarray  # (k, d)
    assignments: np.ndarray  # (n,)
    inertia: float

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float64)
        self.assignments = np.asarray(self.assignments, dtype=np.int64)
        k = self.centroids.shape[0]
        if self.assignments.min(initial=0) < 0 or self.assignments.max(initial=0) >= k:
            raise ValueError("assignments must index into centroids")
        if self.inertia < 0.0:
            raise ValueError("inertia must be nonnegative")


def embed_dataset(model: ModelState, data: Dataset) -> EmbeddingTable:
    """Encode every row of the dataset; rows keep dataset order."""
    means, _ = posterior_table(model, data.inputs)
    return EmbeddingTable(
        indices=np.arange(len(data)), means=means, source_digest=model_digest(model)
    )


def _table_points(table) -> np.ndarray:
    if isinstance(table, EmbeddingTable):
        return table.means
    pts = np.ascontiguousarray(table, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("expected an EmbeddingTable or an (n, d) array")
    return pts


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (n, k) squared Euclidean distances.
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _plus_plus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    closest = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # All remaining mass sits on chosen points; fall back to uniform.
            pick = int(rng.integers(n))
        else:
            r = rng.random() * total
            pick = int(np.searchsorted(np.cumsum(closest), r, side="right"))
            pick = min(pick, n - 1)
        centroids[j] = points[pick]
        closest = np.minimum(closest, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _lloyd(
    points: np.ndarray, centroids: np.ndarray, max_iters: int
) -> tuple[np.ndarray, np.ndarray, float, list[float]]:
    """Lloyd iterations with deterministic empty-cluster reseeding.

    An emptied centroid jumps to the point currently farthest from its
    own centroid (lowest index on ties), which strictly reduces inertia
    and never crashes.
    """
    k = centroids.shape[0]
    centroids = centroids.copy()
    assignments = None
    history: list[float] = []
    for _ in range(max_iters):
        dists = _sq_dists(points, centroids)
        new_assign = dists.argmin(axis=1)
        for c in range(k):
            if (new_assign == c).any():
                continue
            own = dists[np.arange(points.shape[0]), new_assign]
            donor = int(own.argmax())
            centroids[c] = points[donor]
            new_assign[donor] = c
            dists[:, c] = ((points - centroids[c]) ** 2).sum(axis=1)
        if assignments is not None and (new_assign == assignments).all():
            break
        assignments = new_assign
        for c in range(k):
            centroids[c] = points[assignments == c].mean(axis=0)
        history.append(
            float(((points - centroids[assignments]) ** 2).sum())
        )
    dists = _sq_dists(points, centroids)
    assignments = dists.argmin(axis=1)
    inertia = float(dists[np.arange(points.shape[0]), assignments].sum())
    history.append(inertia)
    return centroids, assignments, inertia, history


def kmeans(
    table,
    k: int,
    seed: int = 0,
    max_iters: int = 100,
    restarts: int = 8,
) -> ClusterResult:
    """Best of `restarts` seeded k-means++ runs, judged by final inertia.

    Restart results reduce by (inertia, restart index), so evaluating the
    restarts in parallel could never change the answer.
    """
    points = _table_points(table)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    seeds = np.random.SeedSequence(seed).spawn(max(restarts, 1))
    best = None
    for r, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        init = _plus_plus_init(points, k, rng)
        centroids, assignments, inertia, _ = _lloyd(points, init, max_iters)
        key = (inertia, r)
        if best is None or key < best[0]:
            best = (key, centroids, assignments, inertia)
    _, centroids, assignments, inertia = best
    return ClusterResult(centroids=centroids, assignments=assignments, inertia=inertia)


def _nearest_row(points: np.ndarray, target: np.ndarray) -> int:
    d = ((points - target) ** 2).sum(axis=1)
    return int(d.argmin())


def select_rosetta(
    table: EmbeddingTable,
    clusters: ClusterResult,
    data: Dataset,
    selector_name: str = "kmeans",
) -> RosettaSet:
    """Anchor per centroid: the embedding row closest to it, paired with
    that row's original input vector. Output order follows centroid index."""
    if len(table) != len(data):
        raise ValueError("embedding table and dataset must have the same rows")
    picks = [_nearest_row(table.means, c) for c in clusters.centroids]
    rows = np.asarray(picks, dtype=np.int64)
    return RosettaSet(
        inputs=data.inputs[table.indices[rows]],
        latents=table.means[rows],
        selector=selector_name,
        source_digest=table.source_digest,
    )


def _ward_clusters(points: np.ndarray, k: int) -> list[np.ndarray]:
    """Ward-linkage agglomeration down to k clusters (lowest-index ties).

    Uses the exact Ward merge cost on cluster means and sizes; fine for
    the few hundred points a distillation sees.
    """
    n = points.shape[0]
    sizes = {i: 1 for i in range(n)}
    means = {i: points[i].copy() for i in range(n)}
    members: dict[int, list[int]] = {i: [i] for i in range(n)}
    while len(members) > k:
        ids = sorted(members)
        best = None
        for a_pos in range(len(ids) - 1):
            a = ids[a_pos]
            for b in ids[a_pos + 1 :]:
                na, nb = sizes[a], sizes[b]
                diff = means[a] - means[b]
                cost = (na * nb) / (na + nb) * float(diff @ diff)
                if best is None or cost < best[0]:
                    best = (cost, a, b)
        _, a, b = best
        na, nb = sizes[a], sizes[b]
        means[a] = (na * means[a] + nb * means[b]) / (na + nb)
        sizes[a] = na + nb
        members[a].extend(members[b])
        del members[b], means[b], sizes[b]
    ordered = sorted(members.values(), key=min)
    return [np.asarray(sorted(m), dtype=np.int64) for m in ordered]


def _gmm_components(
    points: np.ndarray, k: int, seed: int, n_iters: int = 50
) -> np.ndarray:
    """Component means from full-covariance EM started from k-means.

    Initial covariances are spherical (per-cluster mean squared spread);
    EM then updates full covariances. A component whose covariance drops
    an eigenvalue below 1e-10 is reset to the identity and flagged.
    """
    n, d = points.shape
    start = kmeans(points, k, seed=seed)
    means = start.centroids.copy()
    weights = np.array(
        [(start.assignments == c).sum() / n for c in range(k)], dtype=np.float64
    )
    covs = np.empty((k, d, d))
    for c in range(k):
        member = points[start.assignments == c]
        if member.shape[0] >= 2:
            spread = float(((member - means[c]) ** 2).sum() / (member.shape[0] * d))
        else:
            spread = float(points.var())
        covs[c] = max(spread, 1e-6) * np.eye(d)

    log2pi = d * np.log(2.0 * np.pi)
    for _ in range(n_iters):
        log_resp = np.empty((n, k))
        for c in range(k):
            cov = 0.5 * (covs[c] + covs[c].T)
            if linalg.eigvals_symmetric(cov).min() < 1e-10:
                warnings.warn(
                    f"degenerate mixture component {c}; covariance reset to identity",
                    RuntimeWarning,
                    stacklevel=2,
                )
                cov = np.eye(d)
                covs[c] = cov
            low = linalg.cholesky_spd(cov)
            diff = points - means[c]
            y = np.empty_like(diff)
            for i in range(d):
                y[:, i] = (diff[:, i] - y[:, :i] @ low[i, :i]) / low[i, i]
            maha = (y * y).sum(axis=1)
            logdet = 2.0 * float(np.log(np.diag(low)).sum())
            log_resp[:, c] = np.log(max(weights[c], 1e-300)) - 0.5 * (
                log2pi + logdet + maha
            )
        shift = log_resp.max(axis=1, keepdims=True)
        resp = np.exp(log_resp - shift)
        resp /= resp.sum(axis=1, keepdims=True)
        mass = resp.sum(axis=0)
        weights = mass / n
        for c in range(k):
            if mass[c] <= 1e-12:
                continue
            means[c] = (resp[:, c : c + 1] * points).sum(axis=0) / mass[c]
            diff = points - means[c]
            covs[c] = (resp[:, c : c + 1] * diff).T @ diff / mass[c]
    return means


def select_variant(
    table: EmbeddingTable,
    data: Dataset,
    k: int,
    method: str = "kmeans",
    seed: int = 0,
) -> RosettaSet:
    """Anchor selection by clustering method or uniform random choice."""
    if method not in SELECTORS:
        raise ValueError(f"method must be one of {SELECTORS}, got '{method}'")
    points = table.means
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if method == "kmeans":
        return select_rosetta(table, kmeans(table, k, seed=seed), data, "kmeans")
    if method == "random":
        rng = np.random.default_rng(seed)
        rows = rng.choice(n, size=k, replace=False).astype(np.int64)
    elif method == "agglomerative":
        clusters = _ward_clusters(points, k)
        rows = np.asarray(
            [c[_nearest_row(points[c], points[c].mean(axis=0))] for c in clusters],
            dtype=np.int64,
        )
    else:  # gmm
        component_means = _gmm_components(points, k, seed)
        rows = np.asarray(
            [_nearest_row(points, m) for m in component_means], dtype=np.int64
        )
    return RosettaSet(
        inputs=data.inputs[table.indices[rows]],
        latents=points[rows],
        selector=method,
        source_digest=table.source_digest,
    )


# ---------------------------------------------------------------------------
# Anchor file format: one JSON header line, then one comma-separated text
# row per anchor holding the input vector followed by the latent mean,
# each value printed with 17 significant digits (round-trip exact).


def save_rosetta(rosetta: RosettaSet, path) -> None:
    header = {
        "format": ROSETTA_FORMAT,
        "selector": rosetta.selector,
        "k": len(rosetta),
        "source_digest": rosetta.source_digest,
        "input_dim": rosetta.input_dim,
        "latent_dim": rosetta.latent_dim,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for x, z in zip(rosetta.inputs, rosetta.latents):
            vals = [FLOAT_FMT % v for v in x] + [FLOAT_FMT % v for v in z]
            fh.write(",".join(vals) + "\n")


def load_rosetta(path) -> RosettaSet:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: file is empty")
    header = json.loads(lines[0])
    if header.get("format") != ROSETTA_FORMAT:
        raise ValueError(f"{path}: unrecognized anchor file format")
    m, d = int(header["input_dim"]), int(header["latent_dim"])
    rows = np.empty((len(lines) - 1, m + d))
    for i, line in enumerate(lines[1:], start=1):
        parts = line.split(",")
        if len(parts) != m + d:
            raise ValueError(f"{path}: row {i} has {len(parts)} values, expected {m + d}")
        rows[i - 1] = [float(p) for p in parts]
    return RosettaSet(
        inputs=rows[:, :m],
        latents=rows[:, m:],
        selector=str(header["selector"]),
        source_digest=str(header["source_digest"]),
    )
