"""Experiment orchestration: grid search, the reproducibility and
sequential-training protocols, ablation sweeps, and report emission.

Seeding layout: run i of every method uses seed = base_seed + i; the
template, the train/validation split, and the distillation draw from
fixed offsets of the base seed. Reports are pure functions of the
configuration, so rerunning a protocol with an identical config yields
byte-identical report files (wall-clock timings live only in runs.csv).
"""

from __future__ import annotations

import hashlib
import json
import multiprocessing
import os
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import distill, metrics
from ._kernels import BACKEND
from .datasets import Dataset, gen_8gaussians, load_tabular, partition_halfplane, split_train_val
from .vae import (
    ArchSpec,
    ModelState,
    RosettaSet,
    TrainConfig,
    TrainingDivergence,
    save_checkpoint,
    train,
)

__all__ = [
    "ExperimentConfig",
    "GridResult",
    "MethodVariant",
    "ReportRow",
    "RunRecord",
    "config_digest",
    "export_embeddings",
    "grid_search",
    "grid_values",
    "load_config_file",
    "render_report",
    "run_ablation",
    "run_reproducibility",
    "run_sequential",
    "write_report",
]

WORKERS_ENV = "ROSETTAVAE_WORKERS"

TEMPLATE_SEED_OFFSET = 10_000
PHASE1_SEED_OFFSET = 10_001
SPLIT_SEED_OFFSET = 20_000
DISTILL_SEED_OFFSET = 30_000

ARCH_PRESETS = {
    "simple": (32,),
    "same": None,  # the configured hidden widths
    "complex": (64, 64, 64),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat configuration covering the data, model, training, and protocol."""

    # data: generated benchmark unless data_path is given
    data_path: str | None = None
    data_format: str = "delimited"
    n_per_component: int = 100
    sigma_cluster: float = 0.5
    sigma_noise: float = 1.0
    data_seed: int = 0
    # architecture
    hidden: tuple[int, ...] = (32, 32)
    latent_dim: int = 2
    activation: str = "relu"
    # training
    beta: float = 2.5  # the beta-VAE baseline's KL weight
    rho: float = 7.5  # the anchored method's penalty weight
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 200
    seed: int = 0
    eigen_floor: float = 1e-12
    rosetta_weighting: bool = True
    train_fraction: float = 0.6
    # protocol
    protocol: str = "reproducibility"
    n_repeats: int = 10
    k: int = 8
    selector: str = "kmeans"
    methods: tuple[str, ...] = ("vae", "beta_vae", "r_vae")
    out_dir: str = "runs"
    # ablation
    ablation_axis: str = "rp_count"
    base_protocol: str = "reproducibility"
    rp_counts: tuple[int, ...] = (2, 4, 8, 16)
    arch_variants: tuple[str, ...] = ("simple", "same", "complex")
    # grid search
    beta_grid_start: float = 0.0
    beta_grid_step: float = 2.5
    beta_grid_stop: float = 25.0
    rho_grid_start: float = 0.0
    rho_grid_step: float = 0.75
    rho_grid_stop: float = 15.0
    grid_epochs: int = 20
    plateau_window: int = 20

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "rp_counts", tuple(int(v) for v in self.rp_counts))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "arch_variants", tuple(self.arch_variants))
        if self.n_repeats < 2:
            raise ValueError("n_repeats must be >= 2 (covariances across runs)")
        for m in self.methods:
            if m not in ("vae", "beta_vae", "r_vae"):
                raise ValueError(f"unknown method '{m}'")

    def arch(self, input_dim: int, hidden: tuple[int, ...] | None = None) -> ArchSpec:
        return ArchSpec(
            input_dim=input_dim,
            latent_dim=self.latent_dim,
            hidden=self.hidden if hidden is None else hidden,
            activation=self.activation,
        )

    def train_config(self, beta: float, rho: float, seed: int, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(
            beta=beta,
            rho=rho,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs if epochs is None else epochs,
            seed=seed,
            eigen_floor=self.eigen_floor,
            rosetta_weighting=self.rosetta_weighting,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("hidden", "methods", "rp_counts", "arch_variants"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("hidden", "methods", "rp_counts", "arch_variants"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def load_config_file(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def config_digest(cfg: ExperimentConfig) -> str:
    """Digest of the experiment content; where the outputs land is
    execution plumbing and deliberately not part of the identity."""
    payload = cfg.to_dict()
    payload.pop("out_dir")
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode("utf-8")
    ).hexdigest()[:16]


@dataclass(frozen=True)
class ReportRow:
    dataset: str
    method: str
    metric: str
    median: float
    iqr: float
    n_runs: int
    eigen_floor: float
    norm_choice: str


@dataclass
class RunRecord:
    method: str
    run_index: int
    seed: int
    config_digest: str
    checkpoint_path: str
    table_path: str
    trace_path: str
    wall_clock_s: float


@dataclass(frozen=True)
class MethodVariant:
    """One trained method in a protocol: label, loss weights, and optional
    selector or architecture overrides used by the ablation sweeps."""

    label: str
    beta: float
    rho: float
    selector: str | None = None
    hidden: tuple[int, ...] | None = None


def default_variants(cfg: ExperimentConfig) -> tuple[MethodVariant, ...]:
    table = {
        "vae": MethodVariant("vae", beta=1.0, rho=0.0),
        "beta_vae": MethodVariant("beta_vae", beta=cfg.beta, rho=0.0),
        "r_vae": MethodVariant("r_vae", beta=1.0, rho=cfg.rho),
    }
    return tuple(table[m] for m in cfg.methods)


# ---------------------------------------------------------------------------
# Dataset preparation.


def _dataset_label(cfg: ExperimentConfig) -> str:
    if cfg.data_path is None:
        return "8gaussians"
    return Path(cfg.data_path).stem


def _protocol_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset | None]:
    """(D1, D2); D2 is None for external data without a known partition."""
    if cfg.data_path is None:
        joint = gen_8gaussians(
            n_per_component=cfg.n_per_component,
            sigma_cluster=cfg.sigma_cluster,
            sigma_noise=cfg.sigma_noise,
            seed=cfg.data_seed,
        )
        return partition_halfplane(joint)
    data = load_tabular(cfg.data_path, cfg.data_format)
    return data, None


def _method_training_inputs(
    method_label: str,
    train_rows: np.ndarray,
    rosetta: RosettaSet,
    anchored_sees_anchor_rows: bool,
) -> tuple[np.ndarray, RosettaSet | None]:
    """What a method trains on.

    Baseline methods see the anchor inputs appended once each as plain
    rows and never read the anchor latents. The anchored method receives
    the anchor set for its penalty; in the sequential protocol (where the
    anchors come from another partition) it also trains on the anchor
    inputs as plain rows, in the reproducibility protocol those rows are
    already part of its training data.
    """
    if method_label.startswith("r_vae"):
        if anchored_sees_anchor_rows:
            return np.vstack([train_rows, rosetta.inputs]), rosetta
        return train_rows, rosetta
    return np.vstack([train_rows, rosetta.inputs]), None


# ---------------------------------------------------------------------------
# Run execution (module level so worker processes can pickle the specs).


@dataclass(frozen=True)
class _RunSpec:
    label: str
    run_index: int
    arch: ArchSpec
    tconf: TrainConfig
    rows: np.ndarray
    val_rows: np.ndarray | None
    rosetta: RosettaSet | None
    digest: str


@dataclass
class _RunOut:
    label: str
    run_index: int
    model: ModelState
    trace: list
    wall_clock_s: float


def _execute_run(spec: _RunSpec) -> _RunOut:
    started = time.perf_counter()
    result = train(
        spec.arch,
        spec.rows,
        spec.tconf,
        rosetta=spec.rosetta,
        val_data=spec.val_rows,
        config_digest=spec.digest,
    )
    return _RunOut(
        label=spec.label,
        run_index=spec.run_index,
        model=result.model,
        trace=result.trace,
        wall_clock_s=time.perf_counter() - started,
    )


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _run_all(specs: list[_RunSpec]) -> list[_RunOut]:
    workers = worker_count()
    if workers > 1 and len(specs) > 1:
        with multiprocessing.get_context("fork").Pool(workers) as pool:
            return pool.map(_execute_run, specs)
    return [_execute_run(s) for s in specs]


# ---------------------------------------------------------------------------
# Report files.


def write_report(rows: list[ReportRow], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("dataset,method,metric,median,iqr,n_runs,eigen_floor,norm_choice\n")
        for r in rows:
            fh.write(
                f"{r.dataset},{r.method},{r.metric},{r.median:.17g},{r.iqr:.17g},"
                f"{r.n_runs},{r.eigen_floor:.17g},{r.norm_choice}\n"
            )


def render_report(rows: list[ReportRow]) -> str:
    """Readable table: one block per (dataset, metric), one `median(iqr)`
    line per method."""
    lines = []
    blocks: list[tuple[str, str]] = []
    for r in rows:
        key = (r.dataset, r.metric)
        if key not in blocks:
            blocks.append(key)
    width = max((len(r.method) for r in rows), default=8) + 2
    for dataset, metric in blocks:
        block = [r for r in rows if (r.dataset, r.metric) == (dataset, metric)]
        lines.append(f"{metric}  [dataset={dataset}, n_runs={block[0].n_runs}]")
        for r in block:
            lines.append(f"  {r.method:<{width}} {r.median:.3f}({r.iqr:.3f})")
        lines.append("")
    return "\n".join(lines)


def _write_runs_csv(records: list[RunRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            "method,run_index,seed,config_digest,checkpoint_path,table_path,"
            "trace_path,wall_clock_s\n"
        )
        for r in records:
            fh.write(
                f"{r.method},{r.run_index},{r.seed},{r.config_digest},"
                f"{r.checkpoint_path},{r.table_path},{r.trace_path},"
                f"{r.wall_clock_s:.6f}\n"
            )


def _write_trace(trace, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for s in trace:
            val = "" if s.val_loss is None else f"{s.val_loss:.17g}"
            fh.write(f"{s.epoch},{s.train_loss:.17g},{val}\n")


def _write_meta(out: Path, cfg: ExperimentConfig, extra: dict) -> None:
    config_echo = cfg.to_dict()
    config_echo.pop("out_dir")  # keeps reports byte-identical across locations
    meta = {
        "backend": BACKEND,
        "config": config_echo,
        "config_digest": config_digest(cfg),
        "grid_notation": "[start:step:stop] inclusive of both endpoints",
        "identity_distance_norm": "frobenius",
        "map_scale_norm": "max_singular_value",
        "normalization": "baseline median subtracted",
    }
    meta.update(extra)
    with open(out / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def export_embeddings(model: ModelState, data: Dataset, path) -> None:
    """Delimited table of per-row latent means and flattened Cholesky factors.

    Columns: row index, the latent mean, then the lower-triangular factor
    (diagonal included) in row-major order. The file re-imports through
    load_tabular and round-trips exactly.
    """
    from .vae import posterior_table

    means, chols = posterior_table(model, data.inputs)
    table = np.hstack([np.arange(len(data), dtype=np.float64)[:, None], means, chols])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(["feature"] * table.shape[1]) + "\n")
        for row in table:
            fh.write(",".join("%.17g" % v for v in row) + "\n")


def _match_anchor_indices(rows: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Dataset row index of each anchor input (anchors are exact copies)."""
    out = np.empty(anchors.shape[0], dtype=np.int64)
    for i, x in enumerate(anchors):
        hits = np.nonzero((rows == x).all(axis=1))[0]
        if hits.size == 0:
            raise ValueError("anchor input not found in the dataset")
        out[i] = hits[0]
    return out


# ---------------------------------------------------------------------------
# Reproducibility protocol.


@dataclass
class ReproResult:
    report_rows: list[ReportRow]
    normalized: dict[str, dict[str, np.ndarray]]
    raw: dict[str, dict[str, np.ndarray]]
    rosetta: RosettaSet
    anchor_indices: np.ndarray
    out_dir: Path


def run_reproducibility(
    cfg: ExperimentConfig,
    out_dir=None,
    variants: tuple[MethodVariant, ...] | None = None,
    baseline_label: str = "vae",
    dataset_label: str | None = None,
) -> ReproResult:
    """Template on D1, distill anchors, retrain every method n_repeats
    times, and report per-point retraining variability over the anchor
    points and over the rest, normalized by the baseline median."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "tables").mkdir(exist_ok=True)
    (out / "traces").mkdir(exist_ok=True)
    variants = default_variants(cfg) if variants is None else variants
    labels = [v.label for v in variants]
    if len(set(labels)) != len(labels):
        raise ValueError("variant labels must be unique")
    if baseline_label not in labels:
        raise ValueError(f"baseline '{baseline_label}' is not among the variants")
    digest = config_digest(cfg)
    label = dataset_label if dataset_label is not None else _dataset_label(cfg)

    d1, _ = _protocol_datasets(cfg)
    d1_train, d1_val = split_train_val(d1, cfg.train_fraction, cfg.seed + SPLIT_SEED_OFFSET)
    arch = cfg.arch(d1.n_features)

    template = train(
        arch,
        d1_train,
        cfg.train_config(1.0, 0.0, cfg.seed + TEMPLATE_SEED_OFFSET),
        val_data=d1_val,
        config_digest=digest,
    ).model
    save_checkpoint(template, out / "checkpoints" / "template.ckpt")
    table = distill.embed_dataset(template, d1)

    anchors_by_selector: dict[str, RosettaSet] = {}

    def anchors_for(selector: str) -> RosettaSet:
        if selector not in anchors_by_selector:
            anchors_by_selector[selector] = distill.select_variant(
                table, d1, cfg.k, selector, seed=cfg.seed + DISTILL_SEED_OFFSET
            )
        return anchors_by_selector[selector]

    default_anchors = anchors_for(cfg.selector)
    distill.save_rosetta(default_anchors, out / "rosetta.txt")

    specs: list[_RunSpec] = []
    for variant in variants:
        anchors = anchors_for(variant.selector or cfg.selector)
        rows, penalty_anchors = _method_training_inputs(
            variant.label, d1_train.inputs, anchors, anchored_sees_anchor_rows=False
        )
        run_arch = cfg.arch(d1.n_features, variant.hidden)
        for i in range(cfg.n_repeats):
            specs.append(
                _RunSpec(
                    label=variant.label,
                    run_index=i,
                    arch=run_arch,
                    tconf=cfg.train_config(variant.beta, variant.rho, cfg.seed + i),
                    rows=rows,
                    val_rows=d1_val.inputs,
                    rosetta=penalty_anchors,
                    digest=digest,
                )
            )
    outs = _run_all(specs)

    records: list[RunRecord] = []
    means_by_label: dict[str, list[np.ndarray]] = {lbl: [] for lbl in labels}
    for spec, run in zip(specs, outs):
        ckpt = out / "checkpoints" / f"{run.label}_{run.run_index}.ckpt"
        tbl = out / "tables" / f"{run.label}_{run.run_index}.csv"
        trc = out / "traces" / f"{run.label}_{run.run_index}.csv"
        save_checkpoint(run.model, ckpt)
        export_embeddings(run.model, d1, tbl)
        _write_trace(run.trace, trc)
        records.append(
            RunRecord(
                method=run.label,
                run_index=run.run_index,
                seed=spec.tconf.seed,
                config_digest=digest,
                checkpoint_path=str(ckpt.relative_to(out)),
                table_path=str(tbl.relative_to(out)),
                trace_path=str(trc.relative_to(out)),
                wall_clock_s=run.wall_clock_s,
            )
        )
        means_by_label[run.label].append(
            distill.embed_dataset(run.model, d1).means
        )
    _write_runs_csv(records, out / "runs.csv")

    anchor_idx: dict[str, np.ndarray] = {}
    for variant in variants:
        anchors = anchors_for(variant.selector or cfg.selector)
        anchor_idx[variant.label] = _match_anchor_indices(d1.inputs, anchors.inputs)

    raw: dict[str, dict[str, np.ndarray]] = {}
    for lbl in labels:
        logvol = metrics.log_volume_per_point(means_by_label[lbl], cfg.eigen_floor)
        idx = anchor_idx[lbl]
        mask = np.zeros(len(d1), dtype=bool)
        mask[idx] = True
        raw[lbl] = {
            "rv_rosetta_points": logvol[mask],
            "rv_rest_of_data": logvol[~mask],
        }

    normalized: dict[str, dict[str, np.ndarray]] = {lbl: {} for lbl in labels}
    report_rows: list[ReportRow] = []
    for metric_name in ("rv_rosetta_points", "rv_rest_of_data"):
        base_median = float(np.median(raw[baseline_label][metric_name]))
        for lbl in labels:
            vals = raw[lbl][metric_name] - base_median
            normalized[lbl][metric_name] = vals
            med, iqr = metrics.median_iqr(vals)
            report_rows.append(
                ReportRow(
                    dataset=label,
                    method=lbl,
                    metric=metric_name,
                    median=med,
                    iqr=iqr,
                    n_runs=cfg.n_repeats,
                    eigen_floor=cfg.eigen_floor,
                    norm_choice=f"{baseline_label}_median_subtracted",
                )
            )

    write_report(report_rows, out / "report.csv")
    with open(out / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(render_report(report_rows))
    _write_meta(out, cfg, {"protocol": "reproducibility", "baseline": baseline_label})
    return ReproResult(
        report_rows=report_rows,
        normalized=normalized,
        raw=raw,
        rosetta=default_anchors,
        anchor_indices=anchor_idx[baseline_label]
        if baseline_label in anchor_idx
        else next(iter(anchor_idx.values())),
        out_dir=out,
    )


# ---------------------------------------------------------------------------
# Sequential protocol.


def _plateau_epochs(trace, window: int, cap: int) -> int:
    """Budget from the windowed-median validation loss: the epoch count at
    which the running best window stopped improving for `window` epochs."""
    vals = [s.val_loss for s in trace if s.val_loss is not None]
    if len(vals) < window:
        return cap
    best = np.inf
    best_epoch = 0
    for e in range(window - 1, len(vals)):
        med = float(np.median(vals[e - window + 1 : e + 1]))
        if med < best:
            best = med
            best_epoch = e
        elif e - best_epoch >= window:
            return e + 1
    return min(len(vals), cap)




@dataclass
class SequentialResult:
    report_rows: list[ReportRow]
    lsd: dict[str, dict[str, np.ndarray]]  # label -> {"d1": per-run, "d2": per-run}
    rv: dict[str, dict[str, np.ndarray]]  # label -> {"d1": per-point, "d2": per-point}
    spectra: dict[str, np.ndarray]  # label -> (runs, latent_dim)
    identity_distance: dict[str, np.ndarray]
    bias_norm: dict[str, np.ndarray]
    epochs_used: int
    out_dir: Path


def run_sequential(
    cfg: ExperimentConfig,
    out_dir=None,
    variants: tuple[MethodVariant, ...] | None = None,
    baseline_label: str = "vae",
    dataset_label: str | None = None,
    include_rv_rows: bool = False,
) -> SequentialResult:
    """Joint template, anchors from a D1-only model, methods retrained on
    D2 plus anchors, one affine map per run fitted on all joint rows."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "tables").mkdir(exist_ok=True)
    (out / "traces").mkdir(exist_ok=True)
    variants = default_variants(cfg) if variants is None else variants
    labels = [v.label for v in variants]
    if len(set(labels)) != len(labels):
        raise ValueError("variant labels must be unique")
    if baseline_label not in labels:
        raise ValueError(f"baseline '{baseline_label}' is not among the variants")
    digest = config_digest(cfg)
    label = dataset_label if dataset_label is not None else _dataset_label(cfg)

    d1, d2 = _protocol_datasets(cfg)
    if d2 is None:
        raise ValueError("the sequential protocol needs a partitioned dataset")
    joint_rows = np.vstack([d1.inputs, d2.inputs])
    d1_mask = np.zeros(joint_rows.shape[0], dtype=bool)
    d1_mask[: len(d1)] = True
    joint = Dataset(inputs=joint_rows, partition="joint", meta={"generator": "joint"})
    arch = cfg.arch(joint.n_features)

    joint_train, joint_val = split_train_val(
        joint, cfg.train_fraction, cfg.seed + SPLIT_SEED_OFFSET
    )
    template_run = train(
        arch,
        joint_train,
        cfg.train_config(1.0, 0.0, cfg.seed + TEMPLATE_SEED_OFFSET),
        val_data=joint_val.inputs,
        config_digest=digest,
    )
    template = template_run.model
    epochs_used = _plateau_epochs(template_run.trace, cfg.plateau_window, cfg.epochs)
    save_checkpoint(template, out / "checkpoints" / "template.ckpt")

    # The anchor-source model shares the plateau budget: anchors distilled
    # far past the plateau inherit an over-compressed latent layout.
    d1_train, d1_val = split_train_val(
        d1, cfg.train_fraction, cfg.seed + SPLIT_SEED_OFFSET + 1
    )
    phase1 = train(
        arch,
        d1_train,
        cfg.train_config(1.0, 0.0, cfg.seed + PHASE1_SEED_OFFSET, epochs=epochs_used),
        val_data=d1_val.inputs,
        config_digest=digest,
    ).model
    save_checkpoint(phase1, out / "checkpoints" / "phase1.ckpt")
    table = distill.embed_dataset(phase1, d1)

    anchors_by_selector: dict[str, RosettaSet] = {}

    def anchors_for(selector: str) -> RosettaSet:
        if selector not in anchors_by_selector:
            anchors_by_selector[selector] = distill.select_variant(
                table, d1, cfg.k, selector, seed=cfg.seed + DISTILL_SEED_OFFSET
            )
        return anchors_by_selector[selector]

    default_anchors = anchors_for(cfg.selector)
    distill.save_rosetta(default_anchors, out / "rosetta.txt")

    d2_train, d2_val = split_train_val(
        d2, cfg.train_fraction, cfg.seed + SPLIT_SEED_OFFSET + 2
    )
    specs: list[_RunSpec] = []
    for variant in variants:
        anchors = anchors_for(variant.selector or cfg.selector)
        rows, penalty_anchors = _method_training_inputs(
            variant.label, d2_train.inputs, anchors, anchored_sees_anchor_rows=True
        )
        run_arch = cfg.arch(joint.n_features, variant.hidden)
        for i in range(cfg.n_repeats):
            specs.append(
                _RunSpec(
                    label=variant.label,
                    run_index=i,
                    arch=run_arch,
                    tconf=cfg.train_config(
                        variant.beta, variant.rho, cfg.seed + i, epochs=epochs_used
                    ),
                    rows=rows,
                    val_rows=d2_val.inputs,
                    rosetta=penalty_anchors,
                    digest=digest,
                )
            )
    outs = _run_all(specs)

    template_means = distill.embed_dataset(template, joint).means
    records: list[RunRecord] = []
    lsd_by: dict[str, dict[str, list[float]]] = {
        lbl: {"d1": [], "d2": []} for lbl in labels
    }
    means_by_label: dict[str, list[np.ndarray]] = {lbl: [] for lbl in labels}
    spectra: dict[str, list[np.ndarray]] = {lbl: [] for lbl in labels}
    ident: dict[str, list[float]] = {lbl: [] for lbl in labels}
    bias: dict[str, list[float]] = {lbl: [] for lbl in labels}
    for spec, run in zip(specs, outs):
        ckpt = out / "checkpoints" / f"{run.label}_{run.run_index}.ckpt"
        tbl = out / "tables" / f"{run.label}_{run.run_index}.csv"
        trc = out / "traces" / f"{run.label}_{run.run_index}.csv"
        save_checkpoint(run.model, ckpt)
        _write_trace(run.trace, trc)
        run_means = distill.embed_dataset(run.model, joint).means
        export_embeddings(run.model, joint, tbl)
        means_by_label[run.label].append(run_means)
        affine = metrics.fit_affine(run_means, template_means)
        lsd_by[run.label]["d1"].append(
            metrics.lsd(affine, run_means[d1_mask], template_means[d1_mask])
        )
        lsd_by[run.label]["d2"].append(
            metrics.lsd(affine, run_means[~d1_mask], template_means[~d1_mask])
        )
        analysis = metrics.analyze_map(affine)
        spectra[run.label].append(analysis.spectrum)
        ident[run.label].append(analysis.identity_distance)
        bias[run.label].append(analysis.bias_norm)
        records.append(
            RunRecord(
                method=run.label,
                run_index=run.run_index,
                seed=spec.tconf.seed,
                config_digest=digest,
                checkpoint_path=str(ckpt.relative_to(out)),
                table_path=str(tbl.relative_to(out)),
                trace_path=str(trc.relative_to(out)),
                wall_clock_s=run.wall_clock_s,
            )
        )
    _write_runs_csv(records, out / "runs.csv")

    rv: dict[str, dict[str, np.ndarray]] = {}
    for lbl in labels:
        logvol = metrics.log_volume_per_point(means_by_label[lbl], cfg.eigen_floor)
        rv[lbl] = {"d1": logvol[d1_mask], "d2": logvol[~d1_mask]}

    report_rows: list[ReportRow] = []
    lsd_arrays = {
        lbl: {split: np.asarray(v) for split, v in d.items()}
        for lbl, d in lsd_by.items()
    }
    norm = f"{baseline_label}_median_subtracted"
    for split in ("d1", "d2"):
        base_median = float(np.median(lsd_arrays[baseline_label][split]))
        for lbl in labels:
            med, iqr = metrics.median_iqr(lsd_arrays[lbl][split] - base_median)
            report_rows.append(
                ReportRow(label, lbl, f"lsd_{split}", med, iqr, cfg.n_repeats,
                          cfg.eigen_floor, norm)
            )
    if include_rv_rows:
        for split in ("d1", "d2"):
            base_median = float(np.median(rv[baseline_label][split]))
            for lbl in labels:
                med, iqr = metrics.median_iqr(rv[lbl][split] - base_median)
                report_rows.append(
                    ReportRow(label, lbl, f"rv_{split}", med, iqr, cfg.n_repeats,
                              cfg.eigen_floor, norm)
                )

    write_report(report_rows, out / "report.csv")
    with open(out / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(render_report(report_rows))
    with open(out / "series_spectrum.csv", "w", encoding="utf-8") as fh:
        fh.write("method,run,index,eigenvalue\n")
        for lbl in labels:
            for r, spec_vals in enumerate(spectra[lbl]):
                for j, v in enumerate(spec_vals):
                    fh.write(f"{lbl},{r},{j},{v:.17g}\n")
    with open(out / "series_map.csv", "w", encoding="utf-8") as fh:
        fh.write("method,run,identity_distance,bias_norm\n")
        for lbl in labels:
            for r in range(len(ident[lbl])):
                fh.write(f"{lbl},{r},{ident[lbl][r]:.17g},{bias[lbl][r]:.17g}\n")
    _write_meta(
        out,
        cfg,
        {
            "protocol": "sequential",
            "baseline": baseline_label,
            "epochs_used": epochs_used,
        },
    )
    return SequentialResult(
        report_rows=report_rows,
        lsd=lsd_arrays,
        rv=rv,
        spectra={lbl: np.asarray(v) for lbl, v in spectra.items()},
        identity_distance={lbl: np.asarray(v) for lbl, v in ident.items()},
        bias_norm={lbl: np.asarray(v) for lbl, v in bias.items()},
        epochs_used=epochs_used,
        out_dir=out,
    )


# ---------------------------------------------------------------------------
# Ablation sweeps.


@dataclass
class AblationResult:
    axis: str
    report_rows: list[ReportRow]
    sub_results: dict
    out_dir: Path


def run_ablation(cfg: ExperimentConfig, out_dir=None) -> AblationResult:
    """Sweep anchor count, selector, or architecture on a base protocol."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = cfg.base_protocol
    if base not in ("reproducibility", "sequential"):
        raise ValueError(f"unknown base protocol '{base}'")
    runner = run_reproducibility if base == "reproducibility" else run_sequential
    label = _dataset_label(cfg)
    rows: list[ReportRow] = []
    subs: dict = {}

    if cfg.ablation_axis == "rp_count":
        for k in cfg.rp_counts:
            sub_cfg = replace(cfg, k=k, protocol=base)
            res = runner(
                sub_cfg,
                out_dir=out / f"rp_{k}",
                dataset_label=f"{label}[rp_count={k}]",
            )
            rows.extend(res.report_rows)
            subs[k] = res
    elif cfg.ablation_axis == "selector":
        variants = tuple(
            MethodVariant(f"r_vae[{s}]", beta=1.0, rho=cfg.rho, selector=s)
            for s in distill.SELECTORS
        )
        kwargs = {"include_rv_rows": True} if base == "sequential" else {}
        res = runner(
            replace(cfg, protocol=base),
            out_dir=out / "selector",
            variants=variants,
            baseline_label="r_vae[kmeans]",
            dataset_label=f"{label}[selector]",
            **kwargs,
        )
        rows.extend(res.report_rows)
        subs["selector"] = res
    elif cfg.ablation_axis == "architecture":
        variants = []
        for name in cfg.arch_variants:
            if name not in ARCH_PRESETS:
                raise ValueError(f"unknown architecture variant '{name}'")
            hidden = ARCH_PRESETS[name]
            variants.append(
                MethodVariant(
                    f"r_vae[{name}]",
                    beta=1.0,
                    rho=cfg.rho,
                    hidden=cfg.hidden if hidden is None else hidden,
                )
            )
        kwargs = {"include_rv_rows": True} if base == "sequential" else {}
        res = runner(
            replace(cfg, protocol=base),
            out_dir=out / "architecture",
            variants=tuple(variants),
            baseline_label="r_vae[same]",
            dataset_label=f"{label}[architecture]",
            **kwargs,
        )
        rows.extend(res.report_rows)
        subs["architecture"] = res
    else:
        raise ValueError(f"unknown ablation axis '{cfg.ablation_axis}'")

    write_report(rows, out / "report.csv")
    with open(out / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(render_report(rows))
    _write_meta(out, cfg, {"protocol": f"ablation:{cfg.ablation_axis}", "base": base})
    return AblationResult(axis=cfg.ablation_axis, report_rows=rows, sub_results=subs, out_dir=out)


# ---------------------------------------------------------------------------
# Hyperparameter grid search.


def grid_values(start: float, step: float, stop: float) -> tuple[float, ...]:
    """Inclusive arithmetic grid; [0:2.5:25] has 11 values."""
    if step <= 0.0:
        return (float(start),)
    count = int(round((stop - start) / step)) + 1
    return tuple(float(start + i * step) for i in range(count))


@dataclass
class GridCell:
    parameter: str
    value: float
    val_loss: float | None
    status: str  # "ok" or "diverged"


@dataclass
class GridResult:
    beta_best: float
    rho_best: float
    cells: list[GridCell]
    out_dir: Path


def _select_best(values, scores) -> float:
    """Lowest score wins; ascending iteration keeps the smaller value on ties."""
    best_value = None
    best_score = np.inf
    for v, s in zip(values, scores):
        if s is None:
            continue
        if s < best_score:
            best_score = s
            best_value = v
    if best_value is None:
        raise RuntimeError("every grid cell diverged")
    return float(best_value)


def grid_search(cfg: ExperimentConfig, out_dir=None) -> GridResult:
    """Short-budget sweeps over the KL weight and the anchor weight.

    Each cell trains for grid_epochs and is scored by its final-epoch
    validation loss under the method's own objective; the best cell's
    hyperparameter is returned (ties break toward the smaller value).
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = config_digest(cfg)
    d1, _ = _protocol_datasets(cfg)
    d1_train, d1_val = split_train_val(d1, cfg.train_fraction, cfg.seed + SPLIT_SEED_OFFSET)
    arch = cfg.arch(d1.n_features)

    beta_vals = grid_values(cfg.beta_grid_start, cfg.beta_grid_step, cfg.beta_grid_stop)
    rho_vals = grid_values(cfg.rho_grid_start, cfg.rho_grid_step, cfg.rho_grid_stop)

    template = train(
        arch,
        d1_train,
        cfg.train_config(1.0, 0.0, cfg.seed + TEMPLATE_SEED_OFFSET),
        val_data=d1_val.inputs,
        config_digest=digest,
    ).model
    anchors = distill.select_variant(
        distill.embed_dataset(template, d1),
        d1,
        cfg.k,
        cfg.selector,
        seed=cfg.seed + DISTILL_SEED_OFFSET,
    )

    cells: list[GridCell] = []

    def evaluate(parameter: str, value: float) -> GridCell:
        # Cells train on the bare split: beta cells with the scaled KL,
        # rho cells with the anchor penalty. Scoring stays comparable
        # within each sweep because only the swept weight changes.
        beta = value if parameter == "beta" else 1.0
        rho = value if parameter == "rho" else 0.0
        rows = d1_train.inputs
        penalty_anchors = anchors if parameter == "rho" else None
        tconf = cfg.train_config(beta, rho, cfg.seed, epochs=cfg.grid_epochs)
        try:
            result = train(
                arch,
                rows,
                tconf,
                rosetta=penalty_anchors,
                val_data=d1_val.inputs,
                config_digest=digest,
            )
        except TrainingDivergence:
            return GridCell(parameter, value, None, "diverged")
        return GridCell(parameter, value, result.trace[-1].val_loss, "ok")

    for v in beta_vals:
        cells.append(evaluate("beta", v))
    for v in rho_vals:
        cells.append(evaluate("rho", v))

    # Log every cell (including diverged ones) before selection, which
    # fails when no cell survived.
    with open(out / "grid.csv", "w", encoding="utf-8") as fh:
        fh.write("parameter,value,val_loss,status\n")
        for c in cells:
            loss = "" if c.val_loss is None else f"{c.val_loss:.17g}"
            fh.write(f"{c.parameter},{c.value:.17g},{loss},{c.status}\n")

    beta_cells = [c for c in cells if c.parameter == "beta"]
    rho_cells = [c for c in cells if c.parameter == "rho"]
    beta_best = _select_best(
        [c.value for c in beta_cells], [c.val_loss for c in beta_cells]
    )
    rho_best = _select_best(
        [c.value for c in rho_cells], [c.val_loss for c in rho_cells]
    )

    _write_meta(
        out,
        cfg,
        {"protocol": "grid", "beta_best": beta_best, "rho_best": rho_best},
    )
    return GridResult(beta_best=beta_best, rho_best=rho_best, cells=cells, out_dir=out)
