"""Regime x seed experiment grid and the comparison / per-class / delta outputs."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from . import model as M
from .data import (ClassDistribution, DatasetBundle, SplitSpec, SyntheticSpec, class_name, load_bundle,
                   read_manifest, split_counts, ss9_distribution, synthesize_bundle)
from .metrics import PerClassTable, delta_report, deltas_to_csv, deltas_to_gnuplot, write_text
from .sampling import REGIMES, SamplingConfig, regime_plan
from .training import TrainConfig, TwoPhaseConfig, TwoPhaseResult, two_phase

logger = logging.getLogger(__name__)

NA = "N.A."
REGIME_LABELS = {
    "baseline": "Baseline",
    "ros": "ROS",
    "rus": "RUS",
    "ros_rus_15k": "ROS&RUS(15K)",
    "ros_rus_5k": "ROS&RUS(5K)",
}
METRIC_FILES = {
    "accuracy": "comparison_accuracy.csv",
    "f1": "comparison_f1.csv",
    "precision": "comparison_precision.csv",
    "recall": "comparison_recall.csv",
}
TOP_LEVEL_KEYS = {"dataset", "regimes", "seeds", "model", "train", "phase2", "sampling", "split"}


class ConfigError(ValueError):
    """Malformed experiment config; ``key`` points at the offending entry."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass
class ExperimentConfig:
    dataset: dict
    regimes: list[str] = field(default_factory=lambda: ["baseline", "rus"])
    seeds: list[int] = field(default_factory=lambda: [0])
    model: dict | None = None
    train: TrainConfig = TrainConfig()
    phase2: TrainConfig | None = None
    sampling: SamplingConfig = SamplingConfig()
    split: SplitSpec = SplitSpec()
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        for k in d:
            if k not in TOP_LEVEL_KEYS:
                raise ConfigError(k, "unknown key")
        if "dataset" not in d:
            raise ConfigError("dataset", "missing")
        ds = d["dataset"]
        if not isinstance(ds, dict) or len({"synthetic", "path", "fixture"} & set(ds)) != 1:
            raise ConfigError("dataset", "needs exactly one of 'synthetic', 'path', 'fixture'")
        for k in ds:
            if k not in {"synthetic", "path", "fixture", "seed"}:
                raise ConfigError(f"dataset.{k}", "unknown key")
        if "synthetic" in ds:
            try:
                SyntheticSpec.from_dict(ds["synthetic"] or {}).validate()
            except (KeyError, TypeError, ValueError) as e:
                raise ConfigError("dataset.synthetic", str(e)) from None
        if "fixture" in ds and ds["fixture"] != "ss9":
            raise ConfigError("dataset.fixture", f"unknown fixture {ds['fixture']!r}")

        regimes = list(d.get("regimes", ["baseline", "rus"]))
        if not regimes:
            raise ConfigError("regimes", "need at least one regime")
        for i, r in enumerate(regimes):
            if r not in REGIMES:
                raise ConfigError(f"regimes[{i}]", f"unknown regime {r!r}")
        seeds = d.get("seeds", [0])
        if not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("seeds", "need a non-empty list of integers")

        model = d.get("model")
        if model is not None:
            try:
                if not isinstance(model, dict):
                    raise TypeError("expected an object")
                probe = dict(model)
                if "preset" in probe or "stages" not in probe:
                    M.spec_from_config(probe, (64, 64, 1), 2)
                else:
                    M.ModelSpec.from_dict({"input_shape": [1, 1, 1], "num_classes": 1, **probe})
            except (KeyError, TypeError, ValueError) as e:
                raise ConfigError("model", str(e)) from None

        def _train(key, base):
            try:
                return TrainConfig.from_dict(d.get(key) or {}, base)
            except (KeyError, TypeError, ValueError) as e:
                raise ConfigError(key, str(e)) from None

        train = _train("train", TrainConfig())
        phase2 = _train("phase2", train) if "phase2" in d else None
        try:
            sampling = SamplingConfig.from_dict(d.get("sampling") or {})
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError("sampling", str(e)) from None
        sp = d.get("split") or {}
        try:
            unknown = set(sp) - {"fractions", "seed"}
            if unknown:
                raise KeyError(f"unknown keys {sorted(unknown)}")
            split_spec = SplitSpec(tuple(sp.get("fractions", (0.8, 0.1, 0.1))), int(sp.get("seed", ds.get("seed", 0))))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError("split", str(e)) from None
        return cls(ds, regimes, list(seeds), model, train, phase2, sampling, split_spec, raw=d)

    def resolved(self) -> dict:
        """Fully resolved snapshot written into the run directory."""
        return {
            "dataset": self.dataset,
            "regimes": self.regimes,
            "seeds": self.seeds,
            "model": self.model,
            "train": asdict(self.train),
            "phase2": asdict(self.phase2) if self.phase2 else None,
            "sampling": self.sampling.to_dict(),
            "split": {"fractions": list(self.split.fractions), "seed": self.split.seed},
        }


def load_config(path) -> ExperimentConfig:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError("<file>", f"invalid JSON: {e}") from None
    return ExperimentConfig.from_dict(d)


def build_bundle(cfg: ExperimentConfig) -> DatasetBundle:
    ds = cfg.dataset
    if "synthetic" in ds:
        spec = SyntheticSpec.from_dict(ds["synthetic"] or {})
        return synthesize_bundle(spec, int(ds.get("seed", 0)), cfg.split)
    if "path" in ds:
        return load_bundle(ds["path"])
    raise ConfigError("dataset", "fixture datasets carry counts only; use --plan-only")


def model_spec_for(cfg: ExperimentConfig, bundle: DatasetBundle) -> M.ModelSpec:
    shape = tuple(bundle.train.images.shape[1:])
    n = len(bundle.classes)
    return M.spec_from_config(cfg.model, shape, n)


# ---------------------------------------------------------------------------
# running cells
# ---------------------------------------------------------------------------


@dataclass
class CellResult:
    regime: str
    seed: int
    phase1: dict
    phase2: dict | None
    per_class_phase1: PerClassTable
    per_class_phase2: PerClassTable | None
    log: dict

    def final_table(self) -> PerClassTable:
        return self.per_class_phase2 if self.per_class_phase2 is not None else self.per_class_phase1


def _summarise(res: TwoPhaseResult, orig_train: list[int]) -> CellResult:
    balanced = [e.target for e in res.plan.entries]
    pc1 = PerClassTable.from_report(res.test_phase1, balanced)
    pc2 = PerClassTable.from_report(res.test_phase2, balanced) if res.test_phase2 is not None else None
    log = {
        "regime": res.regime,
        "seed": res.seed,
        "plan": res.plan.to_dict(),
        "phase1": res.phase1.to_dict(),
        "phase2": res.phase2.to_dict() if res.phase2 else None,
        "feature_hash_before_phase2": res.feature_hash_before,
        "feature_hash_after_phase2": res.feature_hash_after,
        "original_train_counts": orig_train,
    }
    return CellResult(res.regime, res.seed, res.test_phase1.summary(),
                      res.test_phase2.summary() if res.test_phase2 else None, pc1, pc2, log)


def run_cell(spec: M.ModelSpec, bundle: DatasetBundle, cfg: ExperimentConfig, regime: str, seed: int,
             checkpoint_dir=None) -> CellResult:
    tp = TwoPhaseConfig(regime, cfg.train, cfg.phase2, cfg.sampling)
    t0 = time.perf_counter()
    res = two_phase(spec, bundle, tp, seed, checkpoint_dir)
    cell = _summarise(res, [n for _, n in bundle.train.manifest.distribution().items()])
    cell.log["seconds"] = round(time.perf_counter() - t0, 3)
    return cell


_worker_state: dict = {}


def _worker_init(cfg_raw: dict):
    cfg = ExperimentConfig.from_dict(cfg_raw)
    bundle = build_bundle(cfg).normalized()
    _worker_state.update(cfg=cfg, bundle=bundle, spec=model_spec_for(cfg, bundle))


def _worker_run(args):
    regime, seed, ckpt = args
    s = _worker_state
    return run_cell(s["spec"], s["bundle"], s["cfg"], regime, seed, ckpt)


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------


def _fmt(x: float | None) -> str:
    return NA if x is None else f"{x:.6f}"


def comparison_csv(cells: Sequence[CellResult], metric: str) -> str:
    key = {"accuracy": "accuracy", "f1": "macro_f1", "precision": "macro_precision", "recall": "macro_recall"}[metric]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Model", "Seed", "Phase 1", "Phase 2"])
    for c in cells:
        w.writerow([REGIME_LABELS.get(c.regime, c.regime), c.seed, _fmt(c.phase1[key]),
                    _fmt(c.phase2[key] if c.phase2 else None)])
    return buf.getvalue()


def per_class_csv(cells: Sequence[CellResult]) -> str:
    """Per-class table rows for one regime, prefixed with seed and phase."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Seed", "Phase"] + ["Species", "Precision", "Recall", "F1", "Count(Train)", "Count(Test)"])
    for c in cells:
        for phase, table in ((1, c.per_class_phase1), (2, c.per_class_phase2)):
            if table is None:
                continue
            for i, s in enumerate(table.species):
                w.writerow([c.seed, phase, s, f"{table.precision[i]:.6f}", f"{table.recall[i]:.6f}",
                            f"{table.f1[i]:.6f}", table.count_train[i], table.count_test[i]])
    return buf.getvalue()


def write_outputs(cells: Sequence[CellResult], out: Path, original_train: dict[str, int]) -> None:
    for metric, fname in METRIC_FILES.items():
        write_text(out / fname, comparison_csv(cells, metric))
    by_regime: dict[str, list[CellResult]] = {}
    for c in cells:
        by_regime.setdefault(c.regime, []).append(c)
    for regime, group in by_regime.items():
        write_text(out / "per_class" / f"{regime}.csv", per_class_csv(group))

    baseline = {c.seed: c for c in by_regime.get("baseline", [])}
    for regime, group in by_regime.items():
        if regime == "baseline":
            continue
        for c in group:
            sfx = f"_seed{c.seed}"
            if c.seed in baseline:
                rows = delta_report(baseline[c.seed].final_table(), c.final_table(), original_train)
                name = f"baseline_vs_{regime}{sfx}"
                write_text(out / "deltas" / f"{name}.csv", deltas_to_csv(rows))
                write_text(out / "deltas" / f"{name}.dat", deltas_to_gnuplot(rows, name))
            if c.per_class_phase2 is not None:
                rows = delta_report(c.per_class_phase1, c.per_class_phase2, original_train)
                name = f"{regime}_phase1_vs_{regime}_phase2{sfx}"
                write_text(out / "deltas" / f"{name}.csv", deltas_to_csv(rows))
                write_text(out / "deltas" / f"{name}.dat", deltas_to_gnuplot(rows, name))


def plan_only(cfg: ExperimentConfig, out: Path) -> dict[str, dict]:
    """Write one plan JSON per regime without touching the numeric core."""
    if "fixture" in cfg.dataset:
        dist = ss9_distribution("train")
    elif "synthetic" in cfg.dataset:
        spec = SyntheticSpec.from_dict(cfg.dataset["synthetic"] or {})
        dist = ClassDistribution((class_name(k), split_counts(n, cfg.split.fractions)[0])
                                 for k, n in enumerate(spec.class_counts()))
    else:
        dist = read_manifest(Path(cfg.dataset["path"]) / "train.csv").distribution()
    plans = {}
    for regime in cfg.regimes:
        plan = regime_plan(regime, dist, cfg.sampling)
        plan.save(out / "plans" / f"{regime}.json")
        plans[regime] = plan.to_dict()
    return plans


def run_experiment(cfg: ExperimentConfig, out_dir, jobs: int = 1, save_checkpoints: bool = True,
                   bundle: DatasetBundle | None = None) -> list[CellResult]:
    """Run every (regime, seed) cell and write the comparison outputs into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "config.json", json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")
    if bundle is None:
        bundle = build_bundle(cfg)
    bundle = bundle.normalized()
    spec = model_spec_for(cfg, bundle)
    ckpt = out / "checkpoints" if save_checkpoints else None
    tasks = [(r, s) for r in cfg.regimes for s in cfg.seeds]

    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init, initargs=(cfg.raw,)) as ex:
            cells = list(ex.map(_worker_run, [(r, s, ckpt) for r, s in tasks]))
    else:
        cells = [run_cell(spec, bundle, cfg, r, s, ckpt) for r, s in tasks]

    original_train = dict(bundle.train.manifest.distribution().items())
    write_outputs(cells, out, original_train)
    with open(out / "run_log.jsonl", "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps({"event": "start", "model": spec.to_dict(), "dataset": bundle.meta,
                            "seeds": cfg.seeds, "regimes": cfg.regimes}, sort_keys=True) + "\n")
        for c in cells:
            f.write(json.dumps({"event": "cell", **c.log}, sort_keys=True) + "\n")
    return cells
