"""Command-line interface.

Every experiment field can come from a JSON config file (--config) with
individual flags overriding it. Exit code 0 on success; failures print a
single machine-readable JSON line to stderr and exit nonzero. The only
environment variable read is ROSETTAVAE_WORKERS (parallel run count).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import distill, harness
from .datasets import gen_8gaussians, load_tabular, partition_halfplane, save_tabular
from .harness import ExperimentConfig
from .vae import load_checkpoint, save_checkpoint, train

_TUPLE_FIELDS = {"hidden", "methods", "rp_counts", "arch_variants"}


def _parse_tuple(raw: str, elem_type):
    return tuple(elem_type(tok) for tok in raw.split(",") if tok.strip())


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got '{raw}'")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="JSON config file; flags override it")
    for f in dataclasses.fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name in _TUPLE_FIELDS:
            parser.add_argument(flag, default=None, dest=f.name,
                                help=f"comma separated (default {f.default})")
        elif f.type in ("bool", bool):
            parser.add_argument(flag, default=None, dest=f.name, type=_parse_bool,
                                help=f"true/false (default {f.default})")
        elif f.type in ("int", int):
            parser.add_argument(flag, default=None, dest=f.name, type=int)
        elif f.type in ("float", float):
            parser.add_argument(flag, default=None, dest=f.name, type=float)
        else:
            parser.add_argument(flag, default=None, dest=f.name)


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    base = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            base = json.load(fh)
    for f in dataclasses.fields(ExperimentConfig):
        value = getattr(args, f.name, None)
        if value is None:
            continue
        if f.name in _TUPLE_FIELDS:
            elem = int if f.name in ("hidden", "rp_counts") else str
            value = _parse_tuple(value, elem)
        base[f.name] = value
    return ExperimentConfig.from_dict(base)


def _dataset_for(cfg: ExperimentConfig, partition: str):
    if cfg.data_path is not None:
        return load_tabular(cfg.data_path, cfg.data_format)
    joint = gen_8gaussians(
        n_per_component=cfg.n_per_component,
        sigma_cluster=cfg.sigma_cluster,
        sigma_noise=cfg.sigma_noise,
        seed=cfg.data_seed,
    )
    if partition == "joint":
        return joint
    d1, d2 = partition_halfplane(joint)
    return d1 if partition == "D1" else d2


def _cmd_gen_data(args) -> int:
    cfg = _config_from_args(args)
    data = _dataset_for(cfg, args.partition)
    save_tabular(data, args.out, args.format)
    print(f"wrote {len(data)} rows ({args.partition}) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _config_from_args(args)
    data = _dataset_for(cfg, args.partition)
    beta, rho = {
        "vae": (1.0, 0.0),
        "beta_vae": (cfg.beta, 0.0),
        "r_vae": (1.0, cfg.rho),
    }[args.method]
    rosetta = distill.load_rosetta(args.rosetta) if args.rosetta else None
    if args.method == "r_vae" and rosetta is None:
        raise ValueError("r_vae training needs --rosetta")
    result = train(
        cfg.arch(data.n_features),
        data,
        cfg.train_config(beta, rho, cfg.seed),
        rosetta=rosetta,
        config_digest=harness.config_digest(cfg),
    )
    save_checkpoint(result.model, args.checkpoint_out)
    if args.trace_out:
        harness._write_trace(result.trace, args.trace_out)
    print(f"trained {args.method} for {cfg.epochs} epochs -> {args.checkpoint_out}")
    return 0


def _cmd_distill(args) -> int:
    cfg = _config_from_args(args)
    data = _dataset_for(cfg, args.partition)
    model = load_checkpoint(args.checkpoint)
    table = distill.embed_dataset(model, data)
    rosetta = distill.select_variant(table, data, cfg.k, cfg.selector, seed=cfg.seed)
    distill.save_rosetta(rosetta, args.out)
    print(f"distilled {len(rosetta)} anchors ({cfg.selector}) -> {args.out}")
    return 0


def _cmd_grid(args) -> int:
    cfg = _config_from_args(args)
    result = harness.grid_search(cfg)
    print(f"beta_best={result.beta_best:g} rho_best={result.rho_best:g}")
    print(f"grid table -> {result.out_dir / 'grid.csv'}")
    return 0


def _cmd_repro(args) -> int:
    cfg = _config_from_args(args)
    result = harness.run_reproducibility(cfg)
    print(harness.render_report(result.report_rows))
    print(f"report -> {result.out_dir / 'report.csv'}")
    return 0


def _cmd_sequential(args) -> int:
    cfg = _config_from_args(args)
    result = harness.run_sequential(cfg)
    print(harness.render_report(result.report_rows))
    print(f"report -> {result.out_dir / 'report.csv'}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    result = harness.run_ablation(cfg)
    print(harness.render_report(result.report_rows))
    print(f"report -> {result.out_dir / 'report.csv'}")
    return 0


def _cmd_export(args) -> int:
    cfg = _config_from_args(args)
    data = _dataset_for(cfg, args.partition)
    model = load_checkpoint(args.checkpoint)
    harness.export_embeddings(model, data, args.out)
    print(f"exported {len(data)} embeddings -> {args.out}")
    return 0


def _cmd_report(args) -> int:
    rows = []
    with open(args.path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            vals = dict(zip(header, line.rstrip("\n").split(",")))
            rows.append(
                harness.ReportRow(
                    dataset=vals["dataset"],
                    method=vals["method"],
                    metric=vals["metric"],
                    median=float(vals["median"]),
                    iqr=float(vals["iqr"]),
                    n_runs=int(vals["n_runs"]),
                    eigen_floor=float(vals["eigen_floor"]),
                    norm_choice=vals["norm_choice"],
                )
            )
    print(harness.render_report(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rosettavae",
        description="Anchored VAE training and latent-space reproducibility toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate or convert a dataset file")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--format", default="delimited", choices=("delimited", "raw"))
    p.add_argument("--partition", default="joint", choices=("joint", "D1", "D2"))
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    _add_config_flags(p)
    p.add_argument("--method", default="vae", choices=("vae", "beta_vae", "r_vae"))
    p.add_argument("--partition", default="D1", choices=("joint", "D1", "D2"))
    p.add_argument("--rosetta", default=None, help="anchor file for r_vae")
    p.add_argument("--checkpoint-out", required=True)
    p.add_argument("--trace-out", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("distill", help="distill anchors from a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--partition", default="D1", choices=("joint", "D1", "D2"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_distill)

    p = sub.add_parser("grid", help="hyperparameter grid search")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_grid)

    p = sub.add_parser("repro", help="reproducibility protocol")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_repro)

    p = sub.add_parser("sequential", help="sequential-training protocol")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_sequential)

    p = sub.add_parser("ablate", help="ablation sweep")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("export", help="export latent embeddings for a dataset")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--partition", default="joint", choices=("joint", "D1", "D2"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("report", help="render a report.csv as a table")
    p.add_argument("path")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single machine-readable error line
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
