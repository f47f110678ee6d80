"""Benchmark data generation, partitioning, splits, and tabular file I/O.

The built-in benchmark draws eight Gaussian components spaced evenly on a
circle in the first two input dimensions and pads the remaining
dimensions with pure noise. The half-plane partition assigns the four
components on the +x side to D1 and the rest to D2, which is the setup
the sequential-training protocol expects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset",
    "gen_8gaussians",
    "load_tabular",
    "partition_halfplane",
    "save_tabular",
    "split_train_val",
]

PARTITIONS = ("joint", "D1", "D2")
FLOAT_FMT = "%.17g"


@dataclass
class Dataset:
    """Input rows with optional per-row component labels and a partition tag."""

    inputs: np.ndarray
    labels: np.ndarray | None = None
    partition: str = "joint"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("inputs must be a nonempty (n, m) matrix")
        if not np.isfinite(x).all():
            raise ValueError("inputs contain non-finite entries")
        self.inputs = x
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (x.shape[0],):
                raise ValueError("labels must have one entry per row")
            self.labels = lab
        if self.partition not in PARTITIONS:
            raise ValueError(f"partition must be one of {PARTITIONS}")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices: np.ndarray, partition: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            inputs=self.inputs[idx],
            labels=None if self.labels is None else self.labels[idx],
            partition=self.partition if partition is None else partition,
            meta=dict(self.meta),
        )


def gen_8gaussians(
    n_per_component: int = 100,
    sigma_cluster: float = 0.5,
    sigma_noise: float = 1.0,
    seed: int = 0,
    radius: float = 4.0,
    noise_dims: int = 3,
) -> Dataset:
    """Eight Gaussian blobs on a circle plus pure-noise padding dimensions.

    Row i of component j is center_j + N(0, sigma_cluster^2 I) in the two
    position dimensions and N(0, sigma_noise^2) in each padding
    dimension. Labels record the component index.
    """
    if n_per_component < 1:
        raise ValueError("n_per_component must be >= 1")
    if sigma_cluster <= 0.0 or sigma_noise <= 0.0:
        raise ValueError("sigmas must be positive")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(8) / 8.0
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    blocks = []
    labels = []
    for j in range(8):
        pos = centers[j] + sigma_cluster * rng.standard_normal((n_per_component, 2))
        noise = sigma_noise * rng.standard_normal((n_per_component, noise_dims))
        blocks.append(np.hstack([pos, noise]))
        labels.append(np.full(n_per_component, j, dtype=np.int64))
    return Dataset(
        inputs=np.vstack(blocks),
        labels=np.concatenate(labels),
        partition="joint",
        meta={
            "generator": "8gaussians",
            "seed": int(seed),
            "sigma_cluster": float(sigma_cluster),
            "sigma_noise": float(sigma_noise),
            "radius": float(radius),
            "noise_dims": int(noise_dims),
            "centers": centers.tolist(),
        },
    )


def partition_halfplane(data: Dataset) -> tuple[Dataset, Dataset]:
    """Split the 8-component benchmark by the vertical boundary x = 0.

    Components with center x > 0 go to D1 and x < 0 to D2; the two
    components sitting exactly on the boundary split by the sign of
    their center y (+y to D1, -y to D2), keeping four components a side.
    """
    if data.meta.get("generator") != "8gaussians" or data.labels is None:
        raise ValueError("half-plane partition requires a generated 8-Gaussians dataset")
    centers = np.asarray(data.meta["centers"], dtype=np.float64)
    tol = 1e-9
    d1_components = []
    for j, (cx, cy) in enumerate(centers):
        if cx > tol or (abs(cx) <= tol and cy > 0.0):
            d1_components.append(j)
    mask = np.isin(data.labels, d1_components)
    d1 = Dataset(data.inputs[mask], data.labels[mask], "D1", dict(data.meta))
    d2 = Dataset(data.inputs[~mask], data.labels[~mask], "D2", dict(data.meta))
    return d1, d2


def split_train_val(
    data: Dataset, fraction: float = 0.6, seed: int = 0
) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then a disjoint and exhaustive train/validation split."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    n = len(data)
    if n < 2:
        raise ValueError("need at least 2 rows to split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_train = int(round(n * fraction))
    n_train = min(max(n_train, 1), n - 1)
    meta = {"split_fraction": float(fraction), "split_seed": int(seed)}
    train = data.subset(perm[:n_train])
    val = data.subset(perm[n_train:])
    train.meta.update(meta, split_role="train")
    val.meta.update(meta, split_role="val")
    return train, val


# ---------------------------------------------------------------------------
# Tabular file formats.
#
# Delimited text: one header row of comma-separated column roles (every
# role is "feature" except an optional single "label" column), then one
# comma-separated numeric row per record with 17 significant digits.
#
# Raw float matrix: a text header line "rows cols" followed by the
# little-endian float64 payload in row-major order.


def save_tabular(data: Dataset, path, fmt: str = "delimited") -> None:
    path = Path(path)
    if fmt == "delimited":
        roles = ["feature"] * data.n_features
        cols = [data.inputs]
        if data.labels is not None:
            roles.append("label")
            cols.append(data.labels[:, None].astype(np.float64))
        table = np.hstack(cols)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(roles) + "\n")
            for row in table:
                fh.write(",".join(FLOAT_FMT % v for v in row) + "\n")
    elif fmt == "raw":
        with open(path, "wb") as fh:
            fh.write(f"{data.inputs.shape[0]} {data.inputs.shape[1]}\n".encode())
            fh.write(np.ascontiguousarray(data.inputs, dtype="<f8").tobytes())
    else:
        raise ValueError(f"unknown format '{fmt}' (use 'delimited' or 'raw')")


def load_tabular(path, fmt: str = "delimited") -> Dataset:
    """Read a dataset file; errors carry the offending data row number."""
    path = Path(path)
    if fmt == "raw":
        with open(path, "rb") as fh:
            header = fh.readline().split()
            if len(header) != 2:
                raise ValueError(f"{path}: raw header must be 'rows cols'")
            rows, cols = int(header[0]), int(header[1])
            payload = fh.read()
        if len(payload) != rows * cols * 8:
            raise ValueError(f"{path}: raw payload size does not match header")
        inputs = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()
        return Dataset(inputs=inputs, meta={"source": str(path)})
    if fmt != "delimited":
        raise ValueError(f"unknown format '{fmt}' (use 'delimited' or 'raw')")

    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: file is empty")
    roles = [tok.strip() for tok in lines[0].split(",")]
    for tok in roles:
        if tok not in ("feature", "label"):
            raise ValueError(f"{path}: unknown column role '{tok}'")
    if roles.count("label") > 1:
        raise ValueError(f"{path}: at most one label column is supported")
    if len(lines) == 1:
        raise ValueError(f"{path}: no data rows")
    width = len(roles)
    values = np.empty((len(lines) - 1, width))
    for i, line in enumerate(lines[1:], start=1):
        parts = line.split(",")
        if len(parts) != width:
            raise ValueError(
                f"{path}: row {i} has {len(parts)} columns, expected {width}"
            )
        try:
            values[i - 1] = [float(p) for p in parts]
        except ValueError as exc:
            raise ValueError(f"{path}: row {i}: {exc}") from None
    if "label" in roles:
        label_col = roles.index("label")
        feature_cols = [c for c in range(width) if c != label_col]
        return Dataset(
            inputs=values[:, feature_cols],
            labels=values[:, label_col].astype(np.int64),
            meta={"source": str(path)},
        )
    return Dataset(inputs=values, meta={"source": str(path)})
