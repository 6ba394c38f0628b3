"""Seeded training with early stopping, and the two-phase (rebalance, then head-only) procedure."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import core, model as M
from .data import DatasetBundle, LabeledSet, augment
from .metrics import EvalReport, confusion_matrix, evaluate, metrics_from_cm, predict
from .optim import Adam
from .sampling import ResamplePlan, SamplingConfig, apply_plan_to_set, regime_plan

logger = logging.getLogger(__name__)

MONITORS = {"val_macro_f1": "max", "val_accuracy": "max", "val_loss": "min"}


class NumericFailure(RuntimeError):
    """Training produced a non-finite loss; ``record`` says where."""

    def __init__(self, record: dict):
        self.record = record
        super().__init__(f"non-finite loss: {record}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    max_epochs: int = 20
    patience: int = 3
    monitor: str = "val_macro_f1"
    seed: int = 0
    augment: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.monitor not in MONITORS:
            raise ValueError(f"monitor must be one of {sorted(MONITORS)}")

    @classmethod
    def from_dict(cls, d: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        base = base or cls()
        unknown = set(d) - set(asdict(base))
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return replace(base, **d)


class EarlyStopping:
    """Tracks the best monitored value; stops after ``patience`` epochs without strict improvement."""

    def __init__(self, patience: int, mode: str = "max"):
        self.patience = patience
        self.mode = mode
        self.best = -math.inf if mode == "max" else math.inf
        self.best_epoch = 0
        self.since = 0

    def update(self, epoch: int, value: float) -> tuple[bool, bool]:
        """Return ``(improved, stop)`` for this epoch's value."""
        improved = value > self.best if self.mode == "max" else value < self.best
        if improved:
            self.best, self.best_epoch, self.since = value, epoch, 0
            return True, False
        self.since += 1
        return False, self.since > self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    val_macro_f1: float


@dataclass
class PhaseOutcome:
    records: list[EpochRecord]
    best_epoch: int
    stop_reason: str  # "patience" | "max_epochs"
    best_state: dict[str, np.ndarray] = field(repr=False)
    trainable_params: int = 0
    train_size: int = 0
    checkpoint: str | None = None

    @property
    def epochs_run(self) -> int:
        return len(self.records)

    @property
    def best(self) -> EpochRecord:
        return self.records[self.best_epoch - 1]

    def to_dict(self) -> dict:
        return {
            "records": [asdict(r) for r in self.records],
            "best_epoch": self.best_epoch,
            "stop_reason": self.stop_reason,
            "trainable_params": self.trainable_params,
            "train_size": self.train_size,
            "checkpoint": self.checkpoint,
        }


def _validate(model: M.Model, data: LabeledSet, batch_size: int = 256) -> tuple[float, EvalReport]:
    logits = model.predict_logits(data.images, batch_size)
    logp = core.log_softmax(logits.astype(np.float64))
    loss = float(-logp[np.arange(len(data)), data.labels].mean())
    cm = confusion_matrix(data.labels, predict(logits), len(data.manifest.classes))
    return loss, metrics_from_cm(cm, data.manifest.classes)


def train(model: M.Model, train_set: LabeledSet, val_set: LabeledSet, config: TrainConfig = TrainConfig(),
          checkpoint_path=None, meta: dict | None = None) -> PhaseOutcome:
    """Train the unfrozen parameters of ``model`` in place.

    One epoch is one seeded shuffled pass. After the loop the weights of the
    best-monitored epoch are restored (and saved to ``checkpoint_path``).
    """
    if len(train_set) == 0:
        raise ValueError("training manifest is empty")
    if len(val_set) == 0:
        raise ValueError("validation manifest is empty")
    classes = train_set.manifest.classes
    if val_set.manifest.classes != classes or model.spec.num_classes != len(classes):
        raise ValueError("model, train and validation sets must share one class list")

    shuffle_rng, aug_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    opt = Adam(model.params, lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2,
               epsilon=config.epsilon)
    stopper = EarlyStopping(config.patience, MONITORS[config.monitor])
    best_state = model.state_dict()
    records: list[EpochRecord] = []
    stop_reason = "max_epochs"
    n = len(train_set)
    images, labels = train_set.images, train_set.labels

    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            xb = augment(images[idx], aug_rng, enabled=config.augment)
            opt.zero_grad()
            loss = core.softmax_cross_entropy(model.forward(xb), labels[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericFailure({"epoch": epoch, "batch": bi, "loss": value})
            loss.backward()
            if model.trainable_count():
                opt.step()
            loss_sum += value * len(idx)

        val_loss, rep = _validate(model, val_set)
        rec = EpochRecord(epoch, loss_sum / n, val_loss, rep.accuracy, rep.macro_f1)
        records.append(rec)
        improved, stop = stopper.update(epoch, getattr(rec, config.monitor))
        logger.info("epoch %d train_loss=%.4f val_loss=%.4f val_acc=%.4f val_f1=%.4f%s", epoch,
                    rec.train_loss, rec.val_loss, rec.val_accuracy, rec.val_macro_f1, " *" if improved else "")
        if improved:
            best_state = model.state_dict()
        if stop:
            stop_reason = "patience"
            break

    model.load_state_dict(best_state)
    outcome = PhaseOutcome(records, stopper.best_epoch, stop_reason, best_state,
                           trainable_params=model.trainable_count(), train_size=n)
    if checkpoint_path is not None:
        md = dict(meta or {}, epoch=stopper.best_epoch, seed=config.seed)
        outcome.checkpoint = str(M.save_checkpoint(checkpoint_path, model.spec, best_state, md))
    return outcome


# ---------------------------------------------------------------------------
# two-phase procedure
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TwoPhaseConfig:
    regime: str = "rus"
    phase1: TrainConfig = TrainConfig()
    phase2: TrainConfig | None = None  # None: reuse phase-1 settings
    sampling: SamplingConfig = SamplingConfig()
    plan: ResamplePlan | None = None  # explicit plan for regime "custom"

    @property
    def has_phase2(self) -> bool:
        return self.regime != "baseline"


@dataclass
class TwoPhaseResult:
    regime: str
    seed: int
    plan: ResamplePlan
    phase1: PhaseOutcome
    phase2: PhaseOutcome | None
    test_phase1: EvalReport
    test_phase2: EvalReport | None
    feature_hash_before: str | None = None
    feature_hash_after: str | None = None

    @property
    def final(self) -> EvalReport:
        return self.test_phase2 if self.test_phase2 is not None else self.test_phase1


def resolve_plan(cfg: TwoPhaseConfig, train_set: LabeledSet) -> ResamplePlan:
    dist = train_set.manifest.distribution()
    if cfg.regime == "custom":
        if cfg.plan is None:
            raise ValueError("regime 'custom' needs an explicit plan")
        return cfg.plan
    return regime_plan(cfg.regime, dist, cfg.sampling)


def two_phase(spec: M.ModelSpec, bundle: DatasetBundle, cfg: TwoPhaseConfig, seed: int,
              checkpoint_dir=None) -> TwoPhaseResult:
    """Phase 1 trains everything on the rebalanced train split; phase 2 reloads the
    best phase-1 weights, freezes the feature extractor and fits only the head on
    the original train split. Validation and test splits are never resampled, and
    the test split is read once, after all training."""
    p1cfg = replace(cfg.phase1, seed=seed)
    p2cfg = replace(cfg.phase2 or cfg.phase1, seed=seed)
    plan = resolve_plan(cfg, bundle.train)
    balanced = apply_plan_to_set(bundle.train, plan, seed)
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    tag = f"{cfg.regime}_seed{seed}"

    model = M.build(spec, seed)
    logger.info("[%s] phase 1 on %d samples (plan total %d)", tag, len(balanced), plan.target_total())
    p1 = train(model, balanced, bundle.val, p1cfg,
               checkpoint_path=ckpt / f"{tag}_phase1.ckpt" if ckpt else None,
               meta={"phase": 1, "regime": cfg.regime})
    phase1_state = p1.best_state

    p2 = None
    h_before = h_after = None
    if cfg.has_phase2:
        model2 = M.build(spec, seed)
        model2.load_state_dict(phase1_state)
        M.freeze(model2, "feature")
        part = M.partition(model2)
        h_before = M.tensor_digest(part.feature)
        logger.info("[%s] phase 2: %d trainable of %d", tag, model2.trainable_count(), model2.total_count())
        p2 = train(model2, bundle.train, bundle.val, p2cfg,
                   checkpoint_path=ckpt / f"{tag}_phase2.ckpt" if ckpt else None,
                   meta={"phase": 2, "regime": cfg.regime})
        h_after = M.tensor_digest(M.partition(model2).feature)
        if h_before != h_after:
            raise AssertionError("frozen feature parameters changed during phase 2")

    # test split: read once, after training
    model.load_state_dict(phase1_state)
    test1 = evaluate(model, bundle.test)
    test2 = evaluate(model2, bundle.test) if p2 is not None else None
    return TwoPhaseResult(cfg.regime, seed, plan, p1, p2, test1, test2, h_before, h_after)
