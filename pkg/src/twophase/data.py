"""Manifests, class distributions, stratified splits, augmentation and the synthetic long-tail generator."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class ClassDistribution:
    """Ordered class -> count mapping. Order is the canonical report order."""

    def __init__(self, counts: dict[str, int] | Iterable[tuple[str, int]]):
        items = counts.items() if isinstance(counts, dict) else counts
        self.counts: dict[str, int] = {}
        for k, v in items:
            v = int(v)
            if v < 0:
                raise ValueError(f"negative count for class {k!r}: {v}")
            self.counts[k] = v

    def total(self) -> int:
        return sum(self.counts.values())

    def classes(self) -> list[str]:
        return list(self.counts)

    def __getitem__(self, k: str) -> int:
        return self.counts[k]

    def __iter__(self) -> Iterator[str]:
        return iter(self.counts)

    def __len__(self) -> int:
        return len(self.counts)

    def items(self):
        return self.counts.items()

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClassDistribution):
            return NotImplemented
        return list(self.counts.items()) == list(other.counts.items())

    def __add__(self, other: "ClassDistribution") -> "ClassDistribution":
        keys = list(self.counts) + [k for k in other.counts if k not in self.counts]
        return ClassDistribution({k: self.counts.get(k, 0) + other.counts.get(k, 0) for k in keys})

    def __repr__(self) -> str:
        return f"ClassDistribution({self.counts!r})"

    def by_frequency(self) -> list[str]:
        """Classes sorted by descending count; ties keep canonical order."""
        order = {k: i for i, k in enumerate(self.counts)}
        return sorted(self.counts, key=lambda k: (-self.counts[k], order[k]))


@dataclass
class DatasetManifest:
    """Samples as parallel columns. ``labels`` index into ``classes``."""

    classes: list[str]
    ids: list[str]
    labels: np.ndarray
    locators: list[str]
    multi_label: np.ndarray = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.multi_label is None:
            self.multi_label = np.zeros(len(self.ids), dtype=bool)
        self.multi_label = np.asarray(self.multi_label, dtype=bool)
        n = len(self.ids)
        if not (len(self.labels) == len(self.locators) == len(self.multi_label) == n):
            raise ValueError("manifest columns have different lengths")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.classes)):
            raise ValueError("class index out of range")
        if len(set(self.ids)) != n:
            raise ValueError("sample ids are not unique")

    def __len__(self) -> int:
        return len(self.ids)

    def distribution(self) -> ClassDistribution:
        counts = np.bincount(self.labels, minlength=len(self.classes))
        return ClassDistribution(zip(self.classes, counts.tolist()))

    def take(self, idx: Sequence[int], ids: Sequence[str] | None = None) -> "DatasetManifest":
        idx = np.asarray(idx, dtype=np.int64)
        return DatasetManifest(
            classes=list(self.classes),
            ids=[self.ids[i] for i in idx] if ids is None else list(ids),
            labels=self.labels[idx],
            locators=[self.locators[i] for i in idx],
            multi_label=self.multi_label[idx],
        )


def manifest_from_distribution(dist: ClassDistribution, prefix: str = "s") -> DatasetManifest:
    """Counts-only manifest: one placeholder row per sample, no payload."""
    ids, labels = [], []
    for ci, (name, n) in enumerate(dist.items()):
        ids.extend(f"{prefix}{name}-{i}" for i in range(n))
        labels.extend([ci] * n)
    return DatasetManifest(dist.classes(), ids, np.array(labels, dtype=np.int64), ["none"] * len(ids))


# ---------------------------------------------------------------------------
# CSV + JSON sidecar
# ---------------------------------------------------------------------------


def write_manifest(manifest: DatasetManifest, csv_path, classes_path=None) -> None:
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "class", "locator", "multi_label"])
        for sid, lab, loc, ml in zip(manifest.ids, manifest.labels, manifest.locators, manifest.multi_label):
            w.writerow([sid, manifest.classes[lab], loc, int(ml)])
    if classes_path is not None:
        Path(classes_path).write_text(json.dumps({"classes": manifest.classes}, indent=2) + "\n", encoding="utf-8")


def read_manifest(csv_path, classes_path=None, classes: Sequence[str] | None = None) -> DatasetManifest:
    if classes is None:
        if classes_path is None:
            classes_path = Path(csv_path).with_name("classes.json")
        classes = json.loads(Path(classes_path).read_text(encoding="utf-8"))["classes"]
    index = {c: i for i, c in enumerate(classes)}
    ids, labels, locs, ml = [], [], [], []
    with open(csv_path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            if row["class"] not in index:
                raise ValueError(f"{csv_path}: class {row['class']!r} not in class order")
            ids.append(row["id"])
            labels.append(index[row["class"]])
            locs.append(row.get("locator", ""))
            ml.append(row.get("multi_label", "0") in ("1", "true", "True"))
    return DatasetManifest(list(classes), ids, np.array(labels, dtype=np.int64), locs, np.array(ml, dtype=bool))


# ---------------------------------------------------------------------------
# filtering and splitting
# ---------------------------------------------------------------------------


def filter_manifest(manifest: DatasetManifest, exclude: Iterable[str] = (),
                    drop_multi_label: bool = True) -> DatasetManifest:
    """Drop excluded classes and (optionally) multi-label samples, re-indexing classes."""
    exclude = set(exclude)
    unknown = exclude - set(manifest.classes)
    if unknown:
        warnings.warn(f"excluded classes not in manifest: {sorted(unknown)}", stacklevel=2)
    kept_classes = [c for c in manifest.classes if c not in exclude]
    remap = np.full(len(manifest.classes), -1, dtype=np.int64)
    for new, c in enumerate(kept_classes):
        remap[manifest.classes.index(c)] = new
    keep = remap[manifest.labels] >= 0
    if drop_multi_label:
        keep &= ~manifest.multi_label
    idx = np.flatnonzero(keep)
    return DatasetManifest(
        classes=kept_classes,
        ids=[manifest.ids[i] for i in idx],
        labels=remap[manifest.labels[idx]],
        locators=[manifest.locators[i] for i in idx],
        multi_label=manifest.multi_label[idx],
    )


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or any(not 0 <= f <= 1 for f in self.fractions):
            raise ValueError(f"fractions must be three values in [0, 1], got {self.fractions}")
        if not math.isclose(sum(self.fractions), 1.0, abs_tol=1e-9):
            raise ValueError(f"fractions must sum to 1, got {sum(self.fractions)}")


def split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; ties favour earlier splits."""
    quotas = [n * f for f in fractions]
    counts = [math.floor(q) for q in quotas]
    rest = n - sum(counts)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    if n >= 1 and counts[0] == 0:
        # a class must be trainable: take the sample from the largest other split
        donor = max(range(1, len(counts)), key=lambda i: counts[i])
        counts[donor] -= 1
        counts[0] += 1
    return counts


def split(manifest: DatasetManifest, spec: SplitSpec = SplitSpec()
          ) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Stratified train/validation/test split, deterministic under ``spec.seed``.

    Each output keeps the input's relative sample order.
    """
    rng = np.random.default_rng(spec.seed)
    assign = np.empty(len(manifest), dtype=np.int64)
    for ci in range(len(manifest.classes)):
        members = np.flatnonzero(manifest.labels == ci)
        if not len(members):
            continue
        counts = split_counts(len(members), spec.fractions)
        perm = rng.permutation(members)
        assign[perm[:counts[0]]] = 0
        assign[perm[counts[0]:counts[0] + counts[1]]] = 1
        assign[perm[counts[0] + counts[1]:]] = 2
    return tuple(manifest.take(np.flatnonzero(assign == k)) for k in range(3))


# ---------------------------------------------------------------------------
# synthetic long-tail images
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Class k renders as ``signal * template_k + (1 - signal) * clutter + noise_std * white``.

    ``clutter`` is a per-sample smooth Gaussian field, so lowering ``signal``
    hides the template behind structured background as well as pixel noise.
    """

    image_size: tuple[int, int, int] = (16, 16, 3)
    num_classes: int = 10
    counts: tuple[int, ...] | None = None
    head_count: int = 4096
    decay: float = 0.5
    signal: float = 0.5
    noise_std: float = 0.5

    def class_counts(self) -> list[int]:
        if self.counts is not None:
            if len(self.counts) != self.num_classes:
                raise ValueError("counts length must equal num_classes")
            out = [int(c) for c in self.counts]
        else:
            out = [int(round(self.head_count * self.decay ** k)) for k in range(self.num_classes)]
        if any(c < 1 for c in out):
            raise ValueError(f"every class needs >= 1 sample, got {out}")
        return out

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if min(self.image_size) < 1:
            raise ValueError(f"image size must be positive, got {self.image_size}")
        if not 0 < self.signal <= 1:
            raise ValueError("signal must lie in (0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        self.class_counts()

    def to_dict(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "num_classes": self.num_classes,
            "counts": None if self.counts is None else list(self.counts),
            "head_count": self.head_count,
            "decay": self.decay,
            "signal": self.signal,
            "noise_std": self.noise_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        unknown = set(d) - set(cls().to_dict())
        if unknown:
            raise KeyError(f"unknown synthetic spec keys: {sorted(unknown)}")
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        if d.get("counts") is not None:
            d["counts"] = tuple(d["counts"])
        return cls(**d)


def class_name(k: int) -> str:
    return f"class{k:02d}"


_SHAPES = ("ring", "cross", "square", "hstripes", "checker")


def template(k: int, size: tuple[int, int, int]) -> np.ndarray:
    """Deterministic pattern for class ``k``.

    Classes ``k`` and ``k + 5`` (and ``k + 10``, ...) share a base shape and
    colour; each later cycle adds a small inverted corner marker. Under a
    geometric long tail the rarer member of each family is therefore a
    fine-grained variant of a common class.
    """
    h, w, c = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    y = (yy + 0.5) / h * 2 - 1
    x = (xx + 0.5) / w * 2 - 1
    base = k % len(_SHAPES)
    cycle = k // len(_SHAPES)
    r = np.sqrt(x * x + y * y)
    shape = _SHAPES[base]
    if shape == "ring":
        m = (r > 0.35) & (r < 0.7)
    elif shape == "cross":
        m = (np.abs(x) < 0.2) | (np.abs(y) < 0.2)
    elif shape == "square":
        m = (np.abs(x) < 0.55) & (np.abs(y) < 0.55)
    elif shape == "hstripes":
        m = np.sin(y * 2.5 * math.pi) > 0
    else:
        m = (np.sin(x * 2 * math.pi) * np.sin(y * 2 * math.pi)) > 0
    pattern = np.where(m, 1.0, -1.0)
    if cycle:
        corner = (cycle - 1) % 4
        sy = 1 if corner in (0, 1) else -1
        sx = 1 if corner in (0, 2) else -1
        marker = (np.abs(y - sy * 0.55) < 0.3) & (np.abs(x - sx * 0.55) < 0.3)
        pattern = np.where(marker, -pattern, pattern)
    phase = 2 * math.pi * base / len(_SHAPES)
    if c == 1:
        colour = np.ones(1)
    else:
        colour = 0.6 + 0.4 * np.array([math.cos(phase + 2 * math.pi * ch / c) for ch in range(c)])
    return (pattern[:, :, None] * colour[None, None, :]).astype(np.float32)


def sample_seed(seed: int, sample_id: str) -> int:
    digest = hashlib.blake2b(f"{seed}:{sample_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def render_sample(k: int, sseed: int, spec: SyntheticSpec, _cache: dict | None = None) -> np.ndarray:
    h, w, c = spec.image_size
    if _cache is not None and k in _cache:
        tpl = _cache[k]
    else:
        tpl = template(k, spec.image_size)
        if _cache is not None:
            _cache[k] = tpl
    rng = np.random.default_rng(sseed)
    img = spec.signal * tpl.astype(np.float64)
    if spec.signal < 1:
        coarse = rng.standard_normal((max(h // 4, 1) + 1, max(w // 4, 1) + 1, c))
        ys = np.linspace(0, coarse.shape[0] - 1, h)
        xs = np.linspace(0, coarse.shape[1] - 1, w)
        y0 = np.floor(ys).astype(int).clip(0, coarse.shape[0] - 2) if coarse.shape[0] > 1 else np.zeros(h, int)
        x0 = np.floor(xs).astype(int).clip(0, coarse.shape[1] - 2) if coarse.shape[1] > 1 else np.zeros(w, int)
        fy = (ys - y0)[:, None, None]
        fx = (xs - x0)[None, :, None]
        y1 = np.minimum(y0 + 1, coarse.shape[0] - 1)
        x1 = np.minimum(x0 + 1, coarse.shape[1] - 1)
        clutter = ((1 - fy) * (1 - fx) * coarse[y0][:, x0] + (1 - fy) * fx * coarse[y0][:, x1]
                   + fy * (1 - fx) * coarse[y1][:, x0] + fy * fx * coarse[y1][:, x1])
        img += (1 - spec.signal) * clutter
    if spec.noise_std > 0:
        img += spec.noise_std * rng.standard_normal((h, w, c))
    return img.astype(np.float32)


def parse_synthetic_locator(loc: str) -> tuple[int, int]:
    # "synthetic:<class index>:<sample seed>"
    kind, k, s = loc.split(":")
    if kind != "synthetic":
        raise ValueError(f"not a synthetic locator: {loc!r}")
    return int(k), int(s)


def generate_synthetic(spec: SyntheticSpec, seed: int) -> tuple[DatasetManifest, np.ndarray]:
    """Manifest plus the (N, H, W, C) float32 images, in manifest order."""
    spec.validate()
    classes = [class_name(k) for k in range(spec.num_classes)]
    ids, labels, locs = [], [], []
    for k, n in enumerate(spec.class_counts()):
        for i in range(n):
            sid = f"{classes[k]}-{i:05d}"
            ids.append(sid)
            labels.append(k)
            locs.append(f"synthetic:{k}:{sample_seed(seed, sid)}")
    manifest = DatasetManifest(classes, ids, np.array(labels, dtype=np.int64), locs)
    return manifest, materialize(manifest, spec)


def materialize(manifest: DatasetManifest, spec: SyntheticSpec | None = None,
                root: Path | None = None) -> np.ndarray:
    """Render or load every sample's payload. Locators are synthetic recipes or ``.npy`` paths."""
    cache: dict = {}
    out = []
    for loc in manifest.locators:
        if loc.startswith("synthetic:"):
            if spec is None:
                raise ValueError("synthetic locator needs a SyntheticSpec")
            k, s = parse_synthetic_locator(loc)
            out.append(render_sample(k, s, spec, cache))
        else:
            path = Path(loc) if root is None else Path(root) / loc
            out.append(np.load(path).astype(np.float32))
    if not out:
        shape = spec.image_size if spec is not None else (0, 0, 0)
        return np.zeros((0, *shape), dtype=np.float32)
    return np.stack(out)


# ---------------------------------------------------------------------------
# augmentation and normalisation
# ---------------------------------------------------------------------------


def augment(batch: np.ndarray, rng: np.random.Generator, enabled: bool = True, pad: int = 4) -> np.ndarray:
    """Per-image horizontal flip (p = 0.5) and pad-then-random-crop. Returns a new array."""
    if not enabled:
        return batch
    n, h, w, _ = batch.shape
    flips = rng.random(n) < 0.5
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    padded = np.pad(batch, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.empty_like(batch)
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, dy:dy + h, dx:dx + w]
        out[i] = crop[:, ::-1] if flips[i] else crop
    return out


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, images: np.ndarray) -> "Normalizer":
        mean = images.mean(axis=(0, 1, 2), dtype=np.float64)
        std = images.std(axis=(0, 1, 2), dtype=np.float64)
        return cls(mean.astype(np.float32), np.where(std > 0, std, 1.0).astype(np.float32))

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return ((images - self.mean) / self.std).astype(np.float32)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


# ---------------------------------------------------------------------------
# labelled splits and on-disk datasets
# ---------------------------------------------------------------------------


@dataclass
class LabeledSet:
    manifest: DatasetManifest
    images: np.ndarray  # aligned with manifest order

    def __post_init__(self):
        if len(self.images) != len(self.manifest):
            raise ValueError(f"{len(self.images)} images for {len(self.manifest)} manifest rows")

    @property
    def labels(self) -> np.ndarray:
        return self.manifest.labels

    def __len__(self) -> int:
        return len(self.manifest)

    def take(self, idx, ids=None) -> "LabeledSet":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledSet(self.manifest.take(idx, ids), self.images[idx])


@dataclass
class DatasetBundle:
    train: LabeledSet
    val: LabeledSet
    test: LabeledSet
    meta: dict = field(default_factory=dict)

    @property
    def classes(self) -> list[str]:
        return self.train.manifest.classes

    def normalized(self) -> "DatasetBundle":
        """Per-channel standardisation with statistics of the original train split."""
        norm = Normalizer.fit(self.train.images)
        meta = dict(self.meta, normalizer=norm.to_dict())
        return DatasetBundle(
            LabeledSet(self.train.manifest, norm(self.train.images)),
            LabeledSet(self.val.manifest, norm(self.val.images)),
            LabeledSet(self.test.manifest, norm(self.test.images)),
            meta,
        )


SPLITS = ("train", "val", "test")


def write_blob(path, images: np.ndarray, classes: Sequence[str], seed: int, split_name: str) -> None:
    header = {"shape": list(images.shape), "classes": list(classes), "seed": seed, "split": split_name,
              "dtype": "<f4"}
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(np.ascontiguousarray(images, dtype="<f4").tobytes())


def read_blob(path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    arr = np.frombuffer(raw, dtype="<f4", offset=nl + 1).reshape(header["shape"])
    return header, arr.astype(np.float32)


def synthesize_bundle(spec: SyntheticSpec, seed: int = 0,
                      split_spec: SplitSpec | None = None) -> DatasetBundle:
    manifest, images = generate_synthetic(spec, seed)
    split_spec = split_spec or SplitSpec(seed=seed)
    pos = {sid: i for i, sid in enumerate(manifest.ids)}
    parts = []
    for m in split(manifest, split_spec):
        parts.append(LabeledSet(m, images[[pos[s] for s in m.ids]] if len(m) else images[:0]))
    meta = {"synthetic": spec.to_dict(), "seed": seed,
            "split": {"fractions": list(split_spec.fractions), "seed": split_spec.seed}}
    return DatasetBundle(*parts, meta=meta)


def save_bundle(bundle: DatasetBundle, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = int(bundle.meta.get("seed", 0))
    (out / "classes.json").write_text(json.dumps({"classes": bundle.classes}, indent=2) + "\n", encoding="utf-8")
    for name, part in zip(SPLITS, (bundle.train, bundle.val, bundle.test)):
        write_manifest(part.manifest, out / f"{name}.csv")
        write_blob(out / f"{name}.bin", part.images, bundle.classes, seed, name)
    (out / "dataset.json").write_text(json.dumps(bundle.meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def load_bundle(path) -> DatasetBundle:
    path = Path(path)
    classes = json.loads((path / "classes.json").read_text(encoding="utf-8"))["classes"]
    meta = json.loads((path / "dataset.json").read_text(encoding="utf-8")) if (path / "dataset.json").exists() else {}
    parts = []
    for name in SPLITS:
        m = read_manifest(path / f"{name}.csv", classes=classes)
        blob = path / f"{name}.bin"
        if blob.exists():
            header, images = read_blob(blob)
            if header["classes"] != classes:
                raise ValueError(f"{blob}: class order differs from classes.json")
        elif meta.get("synthetic"):
            images = materialize(m, SyntheticSpec.from_dict(meta["synthetic"]))
        else:
            images = materialize(m, root=path)
        parts.append(LabeledSet(m, images))
    return DatasetBundle(*parts, meta=meta)


# ---------------------------------------------------------------------------
# embedded season-9 count fixture
# ---------------------------------------------------------------------------

FIXTURE_TABLES = {
    "baseline": "ss9_baseline.csv",
    "ros": "ss9_ros_two_phase.csv",
    "rus": "ss9_rus_two_phase.csv",
}


def fixture_rows(table: str = "baseline") -> list[dict]:
    """Rows of an embedded per-species table (species, precision, recall, f1, count_train, count_test)."""
    text = resources.files("twophase.fixtures").joinpath(FIXTURE_TABLES[table]).read_text(encoding="utf-8")
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append({
            "species": r["species"],
            "precision": float(r["precision"]),
            "recall": float(r["recall"]),
            "f1": float(r["f1"]),
            "count_train": int(r["count_train"]),
            "count_test": int(r["count_test"]),
        })
    return rows


# The baseline table lists vervetMonkey/porcupine train counts as 120/118, while both
# resampled tables imply 118/120 (944 = 118 x 8 and 960 = 120 x 8 under oversampling,
# 118 and 120 untouched under undersampling). The two values are swapped back here.
SS9_TRAIN_CORRECTIONS = {"vervetMonkey": 118, "porcupine": 120}


def ss9_distribution(split_name: str = "train", reconciled: bool = True) -> ClassDistribution:
    """Season-9 per-class counts after filtering and splitting, as embedded in the fixture.

    With ``reconciled`` (the default) the train counts carry ``SS9_TRAIN_CORRECTIONS``;
    pass False for the baseline table's column verbatim. Totals are identical either way.
    """
    key = {"train": "count_train", "test": "count_test"}[split_name]
    rows = fixture_rows("baseline")
    fix = SS9_TRAIN_CORRECTIONS if (reconciled and split_name == "train") else {}
    return ClassDistribution((r["species"], fix.get(r["species"], r[key])) for r in rows)
