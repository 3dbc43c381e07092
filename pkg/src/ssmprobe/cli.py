"""Command-line entry point: synth, inspect, train, sweep, diagnose, ablate.

Every command resolves its config to a frozen JSON snapshot inside the run
manifest, so a finished run directory is sufficient to re-execute the run
bit-identically (``ssmprobe train <run>/manifest.json``).  All randomness
flows from the single configured seed through tagged streams.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover - py310 fallback
    import tomli as tomllib

from . import __version__
from .checkpoint import load_params, save_params
from .diagnostics import (
    DiagnosticsReport,
    EvidenceCurve,
    emit_report,
    evidence_curve,
    plan_diagnostics,
    stochasticity_report,
)
from .features import FeatureSet, SynthSpec, generate_synthetic, read_features, write_features
from .probes import KINDS, HeadSpec, SinkhornS4Head, build_head
from .routing import load_plan
from .ssm import discretize, spectral_radius
from .trainer import (
    SINKHORN_GRID_FIELDS,
    STATE_DIM_FIELDS,
    TrainConfig,
    ablate_scramble,
    sweep_sinkhorn_grid,
    sweep_state_dim,
    train_joint,
    write_csv,
)

MANIFEST_NAME = "manifest.json"


class CliError(Exception):
    pass


def _load_toml(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise CliError(f"{path}: {exc}")


def _load_config(path: Path) -> dict:
    """TOML config, or the frozen snapshot out of a run manifest."""
    if path.suffix == ".json":
        payload = json.loads(path.read_text())
        if "config" not in payload:
            raise CliError(f"{path} is not a run manifest")
        return payload["config"]
    return _load_toml(path)


def _head_specs(config: dict) -> list[HeadSpec]:
    raw = config.get("heads")
    if not raw:
        raise CliError("config needs at least one [[heads]] entry")
    known = {f.name for f in fields(HeadSpec)}
    specs = []
    for i, entry in enumerate(raw):
        if "kind" not in entry:
            raise CliError(f"heads[{i}]: missing 'kind'")
        if entry["kind"] not in KINDS:
            raise CliError(f"heads[{i}]: unknown kind {entry['kind']!r} "
                           f"(choices: {', '.join(KINDS)})")
        bad = set(entry) - known
        if bad:
            raise CliError(f"heads[{i}]: unknown keys {sorted(bad)}")
        specs.append(HeadSpec(**entry))
    names = [s.resolved_name() for s in specs]
    if len(set(names)) != len(names):
        raise CliError(f"duplicate head names: {names}")
    return specs


def _train_config(config: dict) -> TrainConfig:
    raw = dict(config.get("train", {}))
    known = {f.name for f in fields(TrainConfig)}
    bad = set(raw) - known
    if bad:
        raise CliError(f"[train]: unknown keys {sorted(bad)}")
    cfg = TrainConfig(**raw)
    try:
        cfg.validate()
    except ValueError as exc:
        raise CliError(f"[train]: {exc}")
    return cfg


def _data_sets(config: dict) -> tuple[FeatureSet, FeatureSet]:
    data = config.get("data", {})
    for key in ("train", "eval"):
        if key not in data:
            raise CliError(f"[data]: missing '{key}' feature file path")
    try:
        train = read_features(data["train"], split_tag="train")
        evals = read_features(data["eval"], split_tag="eval")
    except FileNotFoundError as exc:
        raise CliError(f"feature file not found: {exc.filename}")
    except ValueError as exc:
        raise CliError(f"invalid feature file: {exc}")
    return train, evals


def _run_dir(args, default_name: str) -> Path:
    if args.run_dir:
        root = Path(args.run_dir)
    else:
        root = Path(os.environ.get("SSMPROBE_RUN_ROOT", "runs")) / default_name
    root.mkdir(parents=True, exist_ok=True)
    return root


def _write_manifest(run_dir: Path, command: str, config: dict,
                    artifacts: dict, wall_s: float, seed: int = 0) -> Path:
    manifest = {
        "tool_version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": artifacts,
        "wall_seconds": round(wall_s, 3),
    }
    path = run_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2))
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    raw = _load_toml(Path(args.spec))
    known = {f.name for f in fields(SynthSpec)}
    bad = set(raw) - known
    if bad:
        raise CliError(f"synth spec: unknown keys {sorted(bad)}")
    try:
        spec = SynthSpec(**raw)
        fset = generate_synthetic(spec)
        write_features(fset, args.out)
    except (TypeError, ValueError) as exc:
        raise CliError(f"synth spec: {exc}")
    print(f"wrote {args.out}: {len(fset)} samples, grid "
          f"{fset.grid_h}x{fset.grid_w} (N={fset.n_tokens}), d={fset.d}, "
          f"{fset.num_classes} classes, split '{fset.split_tag}'")
    return 0


def cmd_inspect(args) -> int:
    try:
        fset = read_features(args.features)
    except (FileNotFoundError, ValueError) as exc:
        raise CliError(f"{args.features}: {exc}")
    labels = [s.label for s in fset.samples]
    print(f"{args.features}: {len(fset)} samples, grid {fset.grid_h}x{fset.grid_w} "
          f"(N={fset.n_tokens}), d={fset.d}, {fset.num_classes} classes")
    if labels:
        counts = np.bincount(labels, minlength=fset.num_classes)
        norms = [float(np.linalg.norm(s.patch_tokens)) for s in fset.samples[:64]]
        print(f"label counts: {counts.tolist()}")
        print(f"patch-matrix norm (first {len(norms)}): "
              f"mean {np.mean(norms):.4f}, max {np.max(norms):.4f}")
    return 0


def cmd_train(args) -> int:
    start = time.time()
    config_path = Path(args.config)
    config = _load_config(config_path)
    cfg = _train_config(config)
    specs = _head_specs(config)
    train_set, eval_set = _data_sets(config)
    heads = [build_head(s, train_set.grid_h, train_set.grid_w, train_set.d,
                        train_set.num_classes) for s in specs]

    run_dir = _run_dir(args, f"train-{config_path.stem}-seed{cfg.seed}")
    run = train_joint(heads, train_set, eval_set, cfg)

    metrics_path = run_dir / "metrics.csv"
    write_csv(metrics_path, ["step", "head", "split", "metric", "value"],
              [dict(zip(["step", "head", "split", "metric", "value"], row))
               for row in run.log])

    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    ckpt_paths = {}
    for spec, head in zip(specs, heads):
        extra = {
            "head_spec": asdict(spec),
            "grid_h": train_set.grid_h,
            "grid_w": train_set.grid_w,
            "d": train_set.d,
            "num_classes": train_set.num_classes,
            "init_seed": cfg.seed,
            "best_eval_acc": run.best_eval_acc[head.name],
            "best_eval_step": run.best_eval_step[head.name],
        }
        base = ckpt_dir / head.name
        save_params(base, run.best_params[head.name], extra)
        ckpt_paths[head.name] = str(base)

    _write_manifest(run_dir, "train", config,
                    {"metrics": str(metrics_path), "checkpoints": ckpt_paths},
                    time.time() - start, cfg.seed)
    for name in run.head_names:
        print(f"{name}: best eval acc {run.best_eval_acc[name]:.4f} "
              f"at step {run.best_eval_step[name]}")
    print(f"run dir: {run_dir}")
    return 0


def cmd_sweep(args) -> int:
    start = time.time()
    config_path = Path(args.config)
    config = _load_config(config_path)
    cfg = _train_config(config)
    train_set, eval_set = _data_sets(config)
    sweep = config.get("sweep", {})
    seeds = [int(s) for s in sweep.get("seeds", [cfg.seed])]
    head_raw = config.get("head", {"kind": "s4-sinkhorn"})
    spec = HeadSpec(**head_raw)

    run_dir = _run_dir(args, f"sweep-{args.kind}-{config_path.stem}")
    if args.kind == "sinkhorn-grid":
        rows = sweep_sinkhorn_grid(
            train_set, eval_set, cfg, spec,
            [int(k) for k in sweep.get("iterations", [1, 5, 10, 20])],
            [float(t) for t in sweep.get("taus", [0.1, 0.2, 0.5, 1.0])],
            seeds)
        fields_ = SINKHORN_GRID_FIELDS
    elif args.kind == "state-dim":
        rows = sweep_state_dim(
            train_set, eval_set, cfg, spec,
            [int(n) for n in sweep.get("n_states", [1, 2, 4, 8, 16, 32, 64, 128, 256])],
            seeds)
        fields_ = STATE_DIM_FIELDS
    else:  # argparse already restricts choices; keep the guard for API users
        raise CliError(f"unknown sweep kind {args.kind!r}")
    table_path = run_dir / f"{args.kind}.csv"
    write_csv(table_path, fields_, rows)
    _write_manifest(run_dir, f"sweep-{args.kind}", config,
                    {"table": str(table_path)}, time.time() - start, cfg.seed)
    for row in rows:
        print(row)
    print(f"table: {table_path}")
    return 0


def _load_head_checkpoint(base: str):
    params, extra = load_params(base)
    spec = HeadSpec(**extra["head_spec"])
    head = build_head(spec, extra["grid_h"], extra["grid_w"], extra["d"],
                      extra["num_classes"])
    # rebuild non-trainable state (frozen A, fixed permutations) with the
    # same derivation the trainer used, then overwrite trained values
    from .seeding import derive_rng
    head.init_params(derive_rng(extra.get("init_seed", 0), "init", head.name))
    return head, params, spec, extra


def cmd_diagnose(args) -> int:
    start = time.time()
    run_dir = _run_dir(args, "diagnose")
    report = DiagnosticsReport([], [], [])

    if args.plan_file:
        plan = load_plan(args.plan_file)
        report.plans.append(plan_diagnostics(plan, args.edge_band))
        report.stochasticity.append(stochasticity_report(plan))
    if args.checkpoint:
        if not args.features:
            raise CliError("--checkpoint also needs --features")
        head, params, spec, extra = _load_head_checkpoint(args.checkpoint)
        fset = read_features(args.features)
        tokens, _, labels = fset.stacked()
        wants_plans = args.plans or args.evidence is not None
        if wants_plans and not isinstance(head, SinkhornS4Head):
            raise CliError(f"head '{head.name}' produces no transport plan")
        if args.plans:
            _, plans, _, _, _ = head.route_only(params, tokens)
            diags = [plan_diagnostics(p, args.edge_band) for p in plans]
            if args.aggregate:
                n = diags[0].n
                agg = type(diags[0])(
                    rank_coverage=float(np.mean([d.rank_coverage for d in diags])),
                    unique_positions=int(round(np.mean([d.unique_positions for d in diags]))),
                    norm_entropy=float(np.mean([d.norm_entropy for d in diags])),
                    edge_mass=float(np.mean([d.edge_mass for d in diags])),
                    row_max_mean=float(np.mean([d.row_max_mean for d in diags])),
                    row_max_p95=float(np.mean([d.row_max_p95 for d in diags])),
                    n=n,
                )
                report.plans.append(agg)
            else:
                report.plans.extend(diags)
            report.stochasticity.extend(stochasticity_report(p) for p in plans)
        if args.evidence is not None:
            cls_idx = int(args.evidence)
            if not 0 <= cls_idx < fset.num_classes:
                raise CliError(f"--evidence class {cls_idx} outside "
                               f"[0, {fset.num_classes})")
            gamma = args.gamma
            if gamma is None:
                gamma = min(1.0, spectral_radius(discretize(head.s4_view(params)).A_bar))
            mask = labels == cls_idx
            if not mask.any():
                raise CliError(f"no samples with label {cls_idx} in {args.features}")
            sel = tokens[mask]
            reordered, _, _, _, _ = head.route_only(params, sel)
            from .heads import Classifier

            clf = Classifier(params["W"], params["b"])
            raster_mean = np.mean(
                [evidence_curve(clf, t, cls_idx, gamma, "raster").contributions
                 for t in sel], axis=0)
            routed_mean = np.mean(
                [evidence_curve(clf, t, cls_idx, gamma, "routed").contributions
                 for t in reordered], axis=0)
            report.curves.append(EvidenceCurve(raster_mean.tolist(), cls_idx,
                                               "raster", gamma))
            report.curves.append(EvidenceCurve(routed_mean.tolist(), cls_idx,
                                               "routed", gamma))
    if not (args.plan_file or args.checkpoint):
        raise CliError("diagnose needs --checkpoint and/or --plan-file")

    json_path, csv_path = emit_report(report, run_dir / "report")
    _write_manifest(run_dir, "diagnose",
                    {"checkpoint": args.checkpoint, "features": args.features,
                     "plan_file": args.plan_file, "evidence": args.evidence},
                    {"report": str(json_path), "curves": str(csv_path)},
                    time.time() - start)
    print(f"report: {json_path}")
    return 0


def cmd_ablate(args) -> int:
    start = time.time()
    head, params, spec, extra = _load_head_checkpoint(args.checkpoint)
    if not isinstance(head, SinkhornS4Head):
        raise CliError(f"head '{head.name}' has no routing to scramble")
    fset = read_features(args.features)
    run_dir = _run_dir(args, "ablate-scramble")
    rows = []
    for seed in args.seeds:
        accs = ablate_scramble(head, params, fset, seed=seed)
        for condition, acc in accs.items():
            rows.append({"seed": seed, "condition": condition, "accuracy": acc})
        print(f"seed {seed}: " + "  ".join(f"{c}={a:.4f}" for c, a in accs.items()))
    table_path = run_dir / "scramble.csv"
    write_csv(table_path, ["seed", "condition", "accuracy"], rows)
    _write_manifest(run_dir, "ablate-scramble",
                    {"checkpoint": args.checkpoint, "features": args.features,
                     "seeds": args.seeds},
                    {"table": str(table_path)}, time.time() - start)
    print(f"table: {table_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssmprobe",
        description="Order-sensitive probing of frozen patch-token features")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic needle dataset")
    p.add_argument("spec", help="TOML file with SynthSpec fields")
    p.add_argument("--out", required=True, help="output feature file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect", help="validate and summarize a feature file")
    p.add_argument("features")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("train", help="joint training of configured heads")
    p.add_argument("config", help="TOML config or a run manifest.json")
    p.add_argument("--run-dir", help="exact output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="hyperparameter sweep drivers")
    p.add_argument("config")
    p.add_argument("--kind", required=True, choices=["sinkhorn-grid", "state-dim"])
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("diagnose", help="plan diagnostics and evidence curves")
    p.add_argument("--checkpoint", help="checkpoint base path (no extension)")
    p.add_argument("--features", help="feature file to diagnose over")
    p.add_argument("--plan-file", help="externally produced binary plan")
    p.add_argument("--plans", action="store_true",
                   help="per-sample transport-plan diagnostics")
    p.add_argument("--aggregate", action="store_true",
                   help="average plan diagnostics over samples")
    p.add_argument("--evidence", metavar="CLASS",
                   help="emit raster vs routed evidence curves for a class")
    p.add_argument("--gamma", type=float,
                   help="decay factor; defaults to the trained spectral radius")
    p.add_argument("--edge-band", type=float, default=0.10)
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("ablate-scramble",
                       help="eval a trained routing head under scrambles")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
