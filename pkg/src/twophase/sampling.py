"""Tiered random oversampling / threshold undersampling plans and their application.

Defaults reproduce the season-9 regimes: ROS multiplies classes below 5000 by
10/8/6/4 depending on size bracket and clips at 5000; RUS cuts classes above a
threshold down to it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ClassDistribution, DatasetManifest, LabeledSet

TIER_MULTIPLIER = "tier"
CAP = "cap"
UNDERSAMPLE = "undersample"
UNTOUCHED = "untouched"


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class Tier:
    lo: int
    hi: int
    multiplier: int

    def __contains__(self, count: int) -> bool:
        return self.lo <= count < self.hi


@dataclass(frozen=True)
class RosTierTable:
    tiers: tuple[Tier, ...] = (Tier(1, 100, 10), Tier(100, 500, 8), Tier(500, 1000, 6), Tier(1000, 5000, 4))
    cap: int = 5000
    exempt: int = 5000

    def __post_init__(self):
        if not self.tiers:
            raise ValueError("tier table needs at least one tier")
        if self.tiers[0].lo != 1:
            raise ValueError("first tier must start at 1")
        for a, b in zip(self.tiers, self.tiers[1:]):
            if a.hi != b.lo:
                raise ValueError(f"tiers must be contiguous: [{a.lo},{a.hi}) then [{b.lo},{b.hi})")
        if self.tiers[-1].hi != self.exempt:
            raise ValueError(f"tiers must cover [1, {self.exempt})")
        for t in self.tiers:
            if t.hi <= t.lo or t.multiplier < 1:
                raise ValueError(f"bad tier {t}")
        if self.cap < 1:
            raise ValueError("cap must be >= 1")

    def tier_for(self, count: int) -> Tier | None:
        for t in self.tiers:
            if count in t:
                return t
        return None

    @classmethod
    def parse(cls, text: str, cap: int | None = None, exempt: int | None = None) -> "RosTierTable":
        """Parse ``"1:100:10,100:500:8"`` (lo:hi:multiplier, half-open)."""
        tiers = []
        for part in text.split(","):
            lo, hi, mult = (int(v) for v in part.strip().split(":"))
            tiers.append(Tier(lo, hi, mult))
        last = tiers[-1].hi
        return cls(tuple(tiers), cap=last if cap is None else cap, exempt=last if exempt is None else exempt)

    def scaled(self, cap: int) -> "RosTierTable":
        """Same multipliers with bracket edges rescaled so the table ends at ``cap``."""
        f = cap / self.exempt
        edges = [1] + [max(2, round(t.hi * f)) for t in self.tiers]
        for i in range(1, len(edges)):
            edges[i] = max(edges[i], edges[i - 1] + 1)
        tiers = tuple(Tier(edges[i], edges[i + 1], t.multiplier) for i, t in enumerate(self.tiers))
        return RosTierTable(tiers, cap=edges[-1], exempt=edges[-1])

    def to_dict(self) -> dict:
        return {"tiers": [[t.lo, t.hi, t.multiplier] for t in self.tiers], "cap": self.cap, "exempt": self.exempt}


@dataclass(frozen=True)
class RusRule:
    threshold: float = 15000

    def __post_init__(self):
        if not self.threshold >= 1:
            raise ValueError("undersampling threshold must be >= 1")

    def to_dict(self) -> dict:
        return {"threshold": None if math.isinf(self.threshold) else int(self.threshold)}


@dataclass(frozen=True)
class PlanEntry:
    name: str
    original: int
    target: int
    rule: str
    multiplier: int | None = None

    @property
    def identity(self) -> bool:
        return self.rule == UNTOUCHED


@dataclass
class ResamplePlan:
    entries: list[PlanEntry]
    regime: str = "custom"
    rules: dict = field(default_factory=dict)

    def __post_init__(self):
        for e in self.entries:
            if e.original >= 1 and e.target < 1:
                raise PlanError(f"{e.name}: target {e.target} < 1 for a non-empty class")
            if e.identity and e.target != e.original:
                raise PlanError(f"{e.name}: untouched entry changes count")

    def __getitem__(self, name: str) -> PlanEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def classes(self) -> list[str]:
        return [e.name for e in self.entries]

    def targets(self) -> dict[str, int]:
        return {e.name: e.target for e in self.entries}

    def original_total(self) -> int:
        return sum(e.original for e in self.entries)

    def target_total(self) -> int:
        return sum(e.target for e in self.entries)

    def is_identity(self) -> bool:
        return all(e.identity for e in self.entries)

    def target_distribution(self) -> ClassDistribution:
        return ClassDistribution((e.name, e.target) for e in self.entries)

    def to_dict(self) -> dict:
        return {
            "regime": self.regime,
            "rules": self.rules,
            "entries": [
                {"class": e.name, "original": e.original, "target": e.target, "rule": e.rule,
                 **({"multiplier": e.multiplier} if e.multiplier is not None else {})}
                for e in self.entries
            ],
            "totals": {"original": self.original_total(), "target": self.target_total()},
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path


def identity_plan(dist: ClassDistribution, regime: str = "baseline") -> ResamplePlan:
    return ResamplePlan([PlanEntry(k, n, n, UNTOUCHED) for k, n in dist.items()], regime=regime)


def plan_ros(dist: ClassDistribution, table: RosTierTable = RosTierTable()) -> ResamplePlan:
    entries = []
    for name, n in dist.items():
        tier = table.tier_for(n) if n < table.exempt else None
        if n == 0 or tier is None:
            entries.append(PlanEntry(name, n, n, UNTOUCHED))
            continue
        raw = n * tier.multiplier
        if raw > table.cap:
            entries.append(PlanEntry(name, n, max(table.cap, n), CAP, tier.multiplier))
        elif raw == n:
            entries.append(PlanEntry(name, n, n, UNTOUCHED))
        else:
            entries.append(PlanEntry(name, n, raw, TIER_MULTIPLIER, tier.multiplier))
    return ResamplePlan(entries, regime="ros", rules={"ros": table.to_dict()})


def plan_rus(dist: ClassDistribution, rule: RusRule = RusRule()) -> ResamplePlan:
    entries = []
    for name, n in dist.items():
        if n > rule.threshold:
            entries.append(PlanEntry(name, n, int(rule.threshold), UNDERSAMPLE))
        else:
            entries.append(PlanEntry(name, n, n, UNTOUCHED))
    return ResamplePlan(entries, regime="rus", rules={"rus": rule.to_dict()})


def compose(ros_plan: ResamplePlan, rus_plan: ResamplePlan, regime: str | None = None) -> ResamplePlan:
    """Merge two plans over the same distribution; the non-identity entry wins per class."""
    if ros_plan.classes() != rus_plan.classes():
        raise PlanError("plans cover different class sets")
    entries = []
    for a, b in zip(ros_plan.entries, rus_plan.entries):
        if a.original != b.original:
            raise PlanError(f"{a.name}: plans disagree on original count ({a.original} vs {b.original})")
        if not a.identity and not b.identity:
            raise PlanError(f"{a.name}: both plans modify this class ({a.rule} and {b.rule})")
        entries.append(b if a.identity else a)
    rules = {**ros_plan.rules, **rus_plan.rules}
    return ResamplePlan(entries, regime=regime or f"{ros_plan.regime}+{rus_plan.regime}", rules=rules)


def plan_indices(labels: np.ndarray, classes: Sequence[str], plan: ResamplePlan,
                 seed: int) -> np.ndarray:
    """Source-row indices realising ``plan`` exactly.

    Undersampled classes draw ``target`` rows without replacement. Oversampled
    classes repeat every row ``target // n`` times and add ``target % n`` rows
    drawn without replacement, so duplicate counts differ by at most one.
    Rows keep their original relative order; duplicates sit next to their source.
    """
    labels = np.asarray(labels)
    missing = set(plan.classes()) - set(classes)
    if missing:
        raise PlanError(f"plan classes not in manifest: {sorted(missing)}")
    rng = np.random.default_rng(seed)
    mult = np.ones(len(labels), dtype=np.int64)
    for e in plan.entries:
        ci = list(classes).index(e.name)
        members = np.flatnonzero(labels == ci)
        n = len(members)
        if e.target > 0 and n == 0:
            raise PlanError(f"{e.name}: target {e.target} but the class has no samples")
        if e.identity or e.target == n:
            continue
        if e.target < n:
            keep = rng.choice(members, size=e.target, replace=False)
            mult[members] = 0
            mult[keep] = 1
        else:
            q, r = divmod(e.target, n)
            mult[members] = q
            if r:
                mult[rng.choice(members, size=r, replace=False)] += 1
    return np.repeat(np.arange(len(labels)), mult)


def _dup_ids(ids: Sequence[str], idx: np.ndarray) -> list[str]:
    out = []
    prev, k = -1, 0
    for i in idx:
        k = k + 1 if i == prev else 0
        out.append(ids[i] if k == 0 else f"{ids[i]}#dup{k}")
        prev = i
    return out


def apply_plan(manifest: DatasetManifest, plan: ResamplePlan, seed: int) -> DatasetManifest:
    idx = plan_indices(manifest.labels, manifest.classes, plan, seed)
    return manifest.take(idx, _dup_ids(manifest.ids, idx))


def apply_plan_to_set(data: LabeledSet, plan: ResamplePlan, seed: int) -> LabeledSet:
    idx = plan_indices(data.labels, data.manifest.classes, plan, seed)
    if plan.is_identity():
        return data
    return data.take(idx, _dup_ids(data.manifest.ids, idx))


# ---------------------------------------------------------------------------
# named regimes
# ---------------------------------------------------------------------------

REGIMES = ("baseline", "ros", "rus", "ros_rus_15k", "ros_rus_5k")


@dataclass(frozen=True)
class SamplingConfig:
    """Rule parameters for the named regimes.

    ``ros_rus_15k`` pairs the ROS table with ``rus_threshold``; ``ros_rus_5k``
    pairs it with an undersampling threshold equal to the ROS cap.
    """

    tiers: RosTierTable = RosTierTable()
    rus_threshold: float = 15000

    @classmethod
    def from_dict(cls, d: dict) -> "SamplingConfig":
        unknown = set(d) - {"ros_tiers", "ros_cap", "rus_threshold", "ros_scale_to"}
        if unknown:
            raise KeyError(f"unknown sampling keys: {sorted(unknown)}")
        tiers = RosTierTable()
        if "ros_tiers" in d:
            spec = d["ros_tiers"]
            tiers = RosTierTable.parse(spec) if isinstance(spec, str) else RosTierTable(
                tuple(Tier(*t) for t in spec), cap=spec[-1][1], exempt=spec[-1][1])
        if "ros_scale_to" in d:
            tiers = tiers.scaled(int(d["ros_scale_to"]))
        if "ros_cap" in d:
            tiers = RosTierTable(tiers.tiers, cap=int(d["ros_cap"]), exempt=tiers.exempt)
        return cls(tiers, float(d.get("rus_threshold", 15000)))

    def to_dict(self) -> dict:
        return {"ros": self.tiers.to_dict(), "rus_threshold": RusRule(self.rus_threshold).to_dict()["threshold"]}


def regime_plan(regime: str, dist: ClassDistribution, config: SamplingConfig = SamplingConfig()) -> ResamplePlan:
    if regime == "baseline":
        return identity_plan(dist, "baseline")
    if regime == "ros":
        return plan_ros(dist, config.tiers)
    if regime == "rus":
        return plan_rus(dist, RusRule(config.rus_threshold))
    if regime == "ros_rus_15k":
        return compose(plan_ros(dist, config.tiers), plan_rus(dist, RusRule(config.rus_threshold)), regime)
    if regime == "ros_rus_5k":
        return compose(plan_ros(dist, config.tiers), plan_rus(dist, RusRule(config.tiers.cap)), regime)
    raise PlanError(f"unknown regime {regime!r}; expected one of {REGIMES}")


def load_plan(path) -> ResamplePlan:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    entries = [PlanEntry(e["class"], e["original"], e["target"], e["rule"], e.get("multiplier"))
               for e in d["entries"]]
    return ResamplePlan(entries, regime=d.get("regime", "custom"), rules=d.get("rules", {}))
