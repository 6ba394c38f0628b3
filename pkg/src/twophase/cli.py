"""``twophase`` command line: generate, plan, train, finetune, evaluate, experiment, report, inspect.

Exit codes: 0 ok, 1 config/user error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import model as M
from .data import (
    SplitSpec,
    SyntheticSpec,
    load_bundle,
    manifest_from_distribution,
    read_manifest,
    save_bundle,
    ss9_distribution,
    synthesize_bundle,
    write_manifest,
)
from .experiment import ConfigError, ExperimentConfig, plan_only, run_experiment
from .metrics import PerClassTable, delta_report, deltas_to_csv, deltas_to_gnuplot, evaluate, write_text
from .optim import NonFiniteGradient
from .sampling import REGIMES, PlanError, SamplingConfig, apply_plan_to_set, load_plan, regime_plan
from .training import NumericFailure, TrainConfig, train

logger = logging.getLogger("twophase")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the user-error code rather than argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def _json_arg(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise UserError(f"cannot read {path}: {e}") from None


def _ensure_empty(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise UserError(f"{out} exists and is not empty (use --force)")


def _sampling_from_args(args) -> SamplingConfig:
    base = {}
    if getattr(args, "ros_tiers", None):
        base["ros_tiers"] = args.ros_tiers
    if getattr(args, "ros_cap", None) is not None:
        base["ros_cap"] = args.ros_cap
    if getattr(args, "rus_threshold", None) is not None:
        base["rus_threshold"] = args.rus_threshold
    try:
        return SamplingConfig.from_dict(base)
    except (KeyError, ValueError) as e:
        raise UserError(f"sampling options: {e}") from None


def _add_sampling_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ros-tiers", help='half-open tiers "lo:hi:mult,..." (default 1:100:10,100:500:8,500:1000:6,1000:5000:4)')
    p.add_argument("--ros-cap", type=int, help="oversampling cap (default 5000)")
    p.add_argument("--rus-threshold", type=float, help="undersampling threshold (default 15000)")


def _train_config(args, base: TrainConfig = TrainConfig()) -> TrainConfig:
    overrides = {}
    for key in ("batch_size", "learning_rate", "max_epochs", "patience", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            overrides[key] = v
    if getattr(args, "no_augment", False):
        overrides["augment"] = False
    try:
        return TrainConfig.from_dict(overrides, base)
    except (KeyError, ValueError) as e:
        raise UserError(str(e)) from None


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-augment", action="store_true")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    out = Path(args.out)
    _ensure_empty(out, args.force)
    if args.fixture:
        out.mkdir(parents=True, exist_ok=True)
        for split_name in ("train", "test"):
            m = manifest_from_distribution(ss9_distribution(split_name), prefix=f"{split_name}-")
            write_manifest(m, out / f"{split_name}.csv", out / "classes.json")
        m = manifest_from_distribution(ss9_distribution("train"))
        write_text(out / "dataset.json", json.dumps({"fixture": "ss9", "counts_only": True}, indent=2) + "\n")
        print(f"wrote counts-only season-9 fixture ({len(m)} train rows) to {out}")
        return EXIT_OK
    try:
        spec = SyntheticSpec.from_dict(_json_arg(args.spec))
        spec.validate()
    except (KeyError, TypeError, ValueError) as e:
        raise UserError(f"synthetic spec: {e}") from None
    bundle = synthesize_bundle(spec, args.seed, SplitSpec(seed=args.seed))
    save_bundle(bundle, out)
    total = sum(spec.class_counts())
    print(f"{spec.num_classes} classes, {total} samples "
          f"(train {len(bundle.train)}, val {len(bundle.val)}, test {len(bundle.test)}) -> {out}")
    return EXIT_OK


def cmd_plan(args) -> int:
    if args.fixture:
        dist = ss9_distribution("train")
    elif args.dataset:
        dist = read_manifest(Path(args.dataset) / "train.csv").distribution()
    else:
        raise UserError("plan needs --fixture ss9 or --dataset DIR")
    plan = regime_plan(args.regime, dist, _sampling_from_args(args))
    if args.out:
        plan.save(args.out)
    else:
        print(json.dumps(plan.to_dict(), indent=2))
    print(f"{args.regime}: {plan.original_total()} -> {plan.target_total()}", file=sys.stderr)
    return EXIT_OK


def _model_spec(args, bundle) -> M.ModelSpec:
    shape = list(bundle.train.images.shape[1:])
    n = len(bundle.classes)
    if args.model in M.PRESETS:
        cfg = {"preset": args.model}
    else:
        cfg = _json_arg(args.model) if args.model else None
    return M.spec_from_config(cfg, shape, n)


def cmd_train(args) -> int:
    bundle = load_bundle(args.dataset).normalized()
    cfg = _train_config(args)
    sampling = _sampling_from_args(args)
    if args.plan:
        plan = load_plan(args.plan)
    else:
        plan = regime_plan(args.regime, bundle.train.manifest.distribution(), sampling)
    balanced = apply_plan_to_set(bundle.train, plan, cfg.seed)
    spec = _model_spec(args, bundle)
    model = M.build(spec, cfg.seed)
    out = Path(args.out)
    outcome = train(model, balanced, bundle.val, cfg, out / "phase1.ckpt", {"phase": 1, "regime": plan.regime})
    write_text(out / "phase1.json", json.dumps({"config": asdict(cfg), "plan": plan.to_dict(),
                                               **outcome.to_dict()}, indent=2) + "\n")
    print(f"best epoch {outcome.best_epoch}/{outcome.epochs_run} ({outcome.stop_reason}); "
          f"val macro F1 {outcome.best.val_macro_f1:.4f} -> {outcome.checkpoint}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    bundle = load_bundle(args.dataset).normalized()
    model, meta = M.model_from_checkpoint(args.checkpoint)
    M.freeze(model, "feature")
    cfg = _train_config(args, TrainConfig(seed=int(meta.get("seed", 0))))
    out = Path(args.out)
    before = M.tensor_digest(M.partition(model).feature)
    outcome = train(model, bundle.train, bundle.val, cfg, out / "phase2.ckpt",
                    {"phase": 2, "regime": meta.get("regime"), "parent": str(args.checkpoint)})
    after = M.tensor_digest(M.partition(model).feature)
    write_text(out / "phase2.json", json.dumps({"config": asdict(cfg), "feature_hash": after,
                                               **outcome.to_dict()}, indent=2) + "\n")
    print(f"trainable {outcome.trainable_params} of {model.total_count()}; features unchanged: {before == after}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    bundle = load_bundle(args.dataset).normalized()
    model, _ = M.model_from_checkpoint(args.checkpoint)
    data = {"train": bundle.train, "val": bundle.val, "test": bundle.test}[args.split]
    report = evaluate(model, data)
    counts = [n for _, n in bundle.train.manifest.distribution().items()]
    table = PerClassTable.from_report(report, counts)
    if args.out:
        out = Path(args.out)
        write_text(out / f"{args.split}_metrics.json", json.dumps(report.summary(), indent=2) + "\n")
        write_text(out / f"{args.split}_per_class.csv", table.to_csv())
    print(json.dumps(report.summary(), indent=2))
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg_dict = _json_arg(args.config)
    if args.regimes:
        cfg_dict["regimes"] = args.regimes.split(",")
    if args.seeds:
        cfg_dict["seeds"] = [int(s) for s in args.seeds.split(",")]
    sampling = dict(cfg_dict.get("sampling") or {})
    if args.ros_tiers:
        sampling["ros_tiers"] = args.ros_tiers
    if args.ros_cap is not None:
        sampling["ros_cap"] = args.ros_cap
    if args.rus_threshold is not None:
        sampling["rus_threshold"] = args.rus_threshold
    if sampling:
        cfg_dict["sampling"] = sampling
    cfg = ExperimentConfig.from_dict(cfg_dict)
    out = Path(args.out)
    if args.plan_only:
        out.mkdir(parents=True, exist_ok=True)
        write_text(out / "config.json", json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")
        plans = plan_only(cfg, out)
        for regime, p in plans.items():
            print(f"{regime}: {p['totals']['original']} -> {p['totals']['target']}")
        return EXIT_OK
    _ensure_empty(out, args.force)
    jobs = 1 if args.deterministic else args.jobs
    if args.deterministic:
        _limit_threads()
    cells = run_experiment(cfg, out, jobs=jobs, save_checkpoints=not args.no_checkpoints)
    for c in cells:
        p2 = f"{c.phase2['accuracy']:.4f}/{c.phase2['macro_f1']:.4f}" if c.phase2 else "N.A."
        print(f"{c.regime:>12} seed {c.seed}: phase1 acc/F1 {c.phase1['accuracy']:.4f}/{c.phase1['macro_f1']:.4f}"
              f"  phase2 {p2}")
    return EXIT_OK


def _limit_threads() -> None:
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return
    threadpool_limits(1)


def _load_table(path: Path, regime: str | None, seed: int | None, phase: int | None) -> PerClassTable:
    """A per-class table from a CSV file or from a run directory's per_class/<regime>.csv."""
    if path.is_file():
        return PerClassTable.read_csv(path)
    log_regimes = []
    for line in (path / "run_log.jsonl").read_text(encoding="utf-8").splitlines():
        ev = json.loads(line)
        if ev.get("event") == "cell":
            log_regimes.append((ev["regime"], ev["seed"]))
    if not log_regimes:
        raise UserError(f"{path}: no evaluated cells")
    regime = regime or next((r for r, _ in log_regimes if r != "baseline"), log_regimes[0][0])
    seeds = [s for r, s in log_regimes if r == regime]
    if not seeds:
        raise UserError(f"{path}: regime {regime!r} not in run")
    seed = seeds[0] if seed is None else seed
    with open(path / "per_class" / f"{regime}.csv", encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    phases = {int(r["Phase"]) for r in rows if int(r["Seed"]) == seed}
    phase = max(phases) if phase is None else phase
    picked = [r for r in rows if int(r["Seed"]) == seed and int(r["Phase"]) == phase]
    if not picked:
        raise UserError(f"{path}: no rows for regime {regime} seed {seed} phase {phase}")
    return PerClassTable.from_rows([{
        "species": r["Species"], "precision": float(r["Precision"]), "recall": float(r["Recall"]),
        "f1": float(r["F1"]), "count_train": int(r["Count(Train)"]), "count_test": int(r["Count(Test)"]),
    } for r in picked])


def _original_counts(path: Path) -> dict[str, int] | None:
    log = path / "run_log.jsonl" if path.is_dir() else None
    if not log or not log.exists():
        return None
    for line in log.read_text(encoding="utf-8").splitlines():
        ev = json.loads(line)
        if ev.get("event") == "cell":
            names = [e["class"] for e in ev["plan"]["entries"]]
            return dict(zip(names, ev["original_train_counts"]))
    return None


def cmd_report(args) -> int:
    a_path, b_path = Path(args.baseline), Path(args.run)
    a = _load_table(a_path, args.baseline_regime or ("baseline" if a_path.is_dir() else None), args.seed,
                    args.baseline_phase)
    b = _load_table(b_path, args.regime, args.seed, args.phase)
    freq = _original_counts(a_path) or _original_counts(b_path)
    try:
        rows = delta_report(a, b, freq)
    except ValueError as e:
        raise UserError(str(e)) from None
    out = Path(args.out)
    name = args.name or f"{a_path.stem}_vs_{b_path.stem}"
    write_text(out / f"{name}.csv", deltas_to_csv(rows))
    write_text(out / f"{name}.dat", deltas_to_gnuplot(rows, name))
    print(f"{len(rows)} classes -> {out / (name + '.csv')}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.checkpoint:
        model, meta = M.model_from_checkpoint(args.checkpoint)
        spec = model.spec
    else:
        if args.paper_analog:
            spec = M.resnet18_analog(args.num_classes or 52)
        elif args.spec:
            spec = M.ModelSpec.from_dict(_json_arg(args.spec))
        else:
            spec = M.desk_spec(args.num_classes or 10)
        meta = {}
    spec.validate()
    counts = M.count_params(spec)
    info = {
        "spec": spec.to_dict(),
        "feature_params": counts["feature"],
        "head_params": counts["head"],
        "total_params": counts["total"],
        "phase2_trainable_params": counts["head"],
        "meta": meta,
    }
    print(json.dumps(info, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="twophase", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic long-tail dataset (or the season-9 count fixture)")
    p.add_argument("--spec", help="synthetic spec JSON (defaults apply to missing keys)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fixture", choices=["ss9"], help="write the counts-only season-9 manifest instead")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("plan", help="print or save a resample plan")
    p.add_argument("--regime", choices=REGIMES, default="ros")
    p.add_argument("--fixture", choices=["ss9"])
    p.add_argument("--dataset")
    p.add_argument("--out")
    _add_sampling_flags(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", help="phase 1: train all parameters on a resampled train split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--regime", choices=REGIMES, default="baseline")
    p.add_argument("--plan", help="explicit plan JSON (overrides --regime)")
    p.add_argument("--model", help="preset name (desk, compact, resnet18) or model spec JSON file; input shape and classes come from the data")
    _add_sampling_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="phase 2: freeze features and fit the head on the original train split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on one split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="run regimes x seeds and write comparison tables")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--regimes", help="comma-separated override")
    p.add_argument("--seeds", help="comma-separated override")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--deterministic", action="store_true", help="single worker, single BLAS thread")
    p.add_argument("--plan-only", action="store_true", help="write plans and stop; no training")
    p.add_argument("--no-checkpoints", action="store_true")
    p.add_argument("--force", action="store_true")
    _add_sampling_flags(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="per-class F1 deltas between two runs or per-class CSVs")
    p.add_argument("run", help="run directory or per-class CSV (the 'b' side)")
    p.add_argument("--baseline", required=True, help="run directory or per-class CSV (the 'a' side)")
    p.add_argument("--regime")
    p.add_argument("--baseline-regime")
    p.add_argument("--seed", type=int)
    p.add_argument("--phase", type=int)
    p.add_argument("--baseline-phase", type=int)
    p.add_argument("--name")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("inspect", help="print the feature/head partition and parameter counts")
    p.add_argument("--checkpoint")
    p.add_argument("--spec")
    p.add_argument("--paper-analog", action="store_true", help="ResNet-18 stage layout, 224x224x3")
    p.add_argument("--num-classes", type=int)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error at '{e.key}': {e}", file=sys.stderr)
        return EXIT_USER
    except (NumericFailure, NonFiniteGradient, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UserError, PlanError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
