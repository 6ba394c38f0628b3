"""Configurable residual CNN with an explicit feature-extractor / head split.

Layout: a 3x3 stem conv, then stages of blocks. Every stage after the first
starts with a 2x2 max pool. A residual block is conv-relu-conv plus a skip
(1x1 projection when the width changes) followed by relu; a plain block is
conv-relu. Global average pooling feeds a single affine head.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import core
from .core import Tensor

HEAD_PARAMS = ("head.weight", "head.bias")


@dataclass(frozen=True)
class StageSpec:
    blocks: int
    width: int
    residual: bool = True


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int]  # H, W, C
    stages: tuple[StageSpec, ...]
    num_classes: int

    @property
    def feature_dim(self) -> int:
        return self.stages[-1].width

    def validate(self) -> None:
        h, w, c = self.input_shape
        if min(h, w, c) < 1:
            raise ValueError(f"input shape must be positive, got {self.input_shape}")
        if not self.stages:
            raise ValueError("model needs at least one stage")
        if any(s.blocks < 1 or s.width < 1 for s in self.stages):
            raise ValueError("every stage needs blocks >= 1 and width >= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        factor = 2 ** (len(self.stages) - 1)
        if h % factor or w % factor:
            raise ValueError(
                f"input {h}x{w} is not divisible by the stage downsampling factor {factor}")

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "stages": [asdict(s) for s in self.stages],
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        unknown = set(d) - {"input_shape", "stages", "num_classes"}
        if unknown:
            raise KeyError(f"unknown model spec keys: {sorted(unknown)}")
        return cls(
            input_shape=tuple(int(v) for v in d["input_shape"]),
            stages=tuple(StageSpec(**s) for s in d["stages"]),
            num_classes=int(d["num_classes"]),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def desk_spec(num_classes: int = 10, input_shape=(32, 32, 3)) -> ModelSpec:
    """Three residual stages, widths 32/64/128, two blocks each."""
    return ModelSpec(tuple(input_shape), tuple(StageSpec(2, w) for w in (32, 64, 128)), num_classes)


def compact_spec(num_classes: int = 10, input_shape=(16, 16, 3), width: int = 8) -> ModelSpec:
    """Three residual stages of one block each, widths ``width``/2x/4x. Fast enough for multi-seed sweeps."""
    return ModelSpec(tuple(input_shape), tuple(StageSpec(1, width * m) for m in (1, 2, 4)), num_classes)


def resnet18_analog(num_classes: int = 52, input_shape=(224, 224, 3)) -> ModelSpec:
    """Same stage/width layout as ResNet-18 (64/128/256/512, two blocks each)."""
    return ModelSpec(tuple(input_shape), tuple(StageSpec(2, w) for w in (64, 128, 256, 512)), num_classes)


PRESETS = {"desk": desk_spec, "compact": compact_spec, "resnet18": resnet18_analog}


def spec_from_config(cfg: dict | None, input_shape, num_classes: int) -> ModelSpec:
    """Model spec from a config dict: ``{"preset": name, ...}``, explicit ``stages``, or None for desk."""
    cfg = dict(cfg or {})
    preset = cfg.pop("preset", None if "stages" in cfg else "desk")
    if preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"unknown model preset {preset!r}; expected one of {sorted(PRESETS)}")
        if cfg and preset != "compact":
            raise ValueError(f"preset {preset!r} takes no options, got {sorted(cfg)}")
        if set(cfg) - {"width"}:
            raise ValueError(f"unknown model keys {sorted(set(cfg) - {'width'})}")
        spec = PRESETS[preset](num_classes, tuple(input_shape), **cfg)
    else:
        spec = ModelSpec.from_dict({"input_shape": list(input_shape), "num_classes": num_classes, **cfg})
    spec.validate()
    return spec


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes for ``spec``. Construction order is init order."""
    shapes: dict[str, tuple[int, ...]] = {}
    cin = spec.input_shape[2]
    w0 = spec.stages[0].width
    shapes["stem.weight"] = (3, 3, cin, w0)
    shapes["stem.bias"] = (w0,)
    cin = w0
    for si, stage in enumerate(spec.stages):
        for bi in range(stage.blocks):
            p = f"stage{si}.block{bi}"
            shapes[f"{p}.conv1.weight"] = (3, 3, cin, stage.width)
            shapes[f"{p}.conv1.bias"] = (stage.width,)
            if stage.residual:
                shapes[f"{p}.conv2.weight"] = (3, 3, stage.width, stage.width)
                shapes[f"{p}.conv2.bias"] = (stage.width,)
                if cin != stage.width:
                    shapes[f"{p}.proj.weight"] = (1, 1, cin, stage.width)
                    shapes[f"{p}.proj.bias"] = (stage.width,)
            cin = stage.width
    shapes["head.weight"] = (spec.feature_dim, spec.num_classes)
    shapes["head.bias"] = (spec.num_classes,)
    return shapes


def count_params(spec: ModelSpec) -> dict[str, int]:
    shapes = param_shapes(spec)
    head = sum(int(np.prod(shapes[k])) for k in HEAD_PARAMS)
    total = sum(int(np.prod(s)) for s in shapes.values())
    return {"feature": total - head, "head": head, "total": total}


@dataclass
class ParameterPartition:
    feature: dict[str, Tensor]
    head: dict[str, Tensor]

    def counts(self) -> dict[str, int]:
        f = sum(t.data.size for t in self.feature.values())
        h = sum(t.data.size for t in self.head.values())
        return {"feature": f, "head": h, "total": f + h}


class Model:
    def __init__(self, spec: ModelSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = params
        self.frozen: set[str] = set()

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def features(self, x) -> Tensor:
        spec = self.spec
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.data.ndim != 4 or x.shape[1:] != tuple(spec.input_shape):
            raise core.ShapeError("model.forward", ("B",) + tuple(spec.input_shape), x.shape)
        h = core.relu(core.conv2d(x, self._p("stem.weight"), self._p("stem.bias"), padding=1))
        for si, stage in enumerate(spec.stages):
            if si > 0:
                h = core.max_pool2d(h, 2)
            for bi in range(stage.blocks):
                p = f"stage{si}.block{bi}"
                y = core.relu(core.conv2d(h, self._p(f"{p}.conv1.weight"), self._p(f"{p}.conv1.bias"), padding=1))
                if stage.residual:
                    y = core.conv2d(y, self._p(f"{p}.conv2.weight"), self._p(f"{p}.conv2.bias"), padding=1)
                    skip = h
                    if f"{p}.proj.weight" in self.params:
                        skip = core.conv2d(h, self._p(f"{p}.proj.weight"), self._p(f"{p}.proj.bias"))
                    y = core.relu(core.residual_add(y, skip))
                h = y
        return core.global_avg_pool(h)

    def forward(self, x) -> Tensor:
        return core.affine(self.features(x), self._p("head.weight"), self._p("head.bias"))

    __call__ = forward

    def predict_logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        outs = [self.forward(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)

    def trainable_count(self) -> int:
        return sum(t.data.size for t in self.params.values() if t.requires_grad)

    def total_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise KeyError(f"state mismatch: {sorted(set(state) ^ set(self.params))}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = v.astype(self.params[k].dtype, copy=True)


def build(spec: ModelSpec, seed: int, dtype=np.float32) -> Model:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases, drawn in parameter order."""
    spec.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".bias"):
            arr = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            arr = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return Model(spec, params)


def partition(model: Model) -> ParameterPartition:
    head = {k: model.params[k] for k in HEAD_PARAMS}
    feature = {k: t for k, t in model.params.items() if k not in HEAD_PARAMS}
    return ParameterPartition(feature=feature, head=head)


def freeze(model: Model, which: str = "feature") -> Model:
    """Mark one side of the partition as frozen; ``which`` in {feature, head, none}.

    Frozen tensors get ``requires_grad = False`` so no backward closure is ever
    recorded through them, and the optimizer skips them.
    """
    if which not in ("feature", "head", "none"):
        raise ValueError(f"which must be feature, head or none, got {which!r}")
    part = partition(model)
    frozen = {"feature": part.feature, "head": part.head, "none": {}}[which]
    model.frozen = set(frozen)
    for name, t in model.params.items():
        t.requires_grad = name not in model.frozen
        t.grad = None
    return model


def tensor_digest(tensors: dict[str, Tensor] | dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.data if isinstance(t, Tensor) else t
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints: one JSON header line, then raw little-endian blobs by sorted name
# ---------------------------------------------------------------------------


def save_checkpoint(path, spec: ModelSpec, state: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    entries = []
    offset = 0
    for name in sorted(state):
        arr = state[name]
        dt = "<f8" if arr.dtype == np.float64 else "<f4"
        nbytes = arr.size * np.dtype(dt).itemsize
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt, "offset": offset})
        offset += nbytes
    header = {
        "format": "twophase-ckpt/1",
        "spec": spec.to_dict(),
        "spec_hash": spec.digest(),
        "tensors": entries,
        "meta": meta or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for e in entries:
            f.write(np.ascontiguousarray(state[e["name"]], dtype=e["dtype"]).tobytes())
    return path


def load_checkpoint(path) -> tuple[ModelSpec, dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    spec = ModelSpec.from_dict(header["spec"])
    if spec.digest() != header["spec_hash"]:
        raise ValueError(f"{path}: spec hash mismatch")
    body = raw[nl + 1:]
    state = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(body, dtype=dt, count=n, offset=e["offset"]).reshape(e["shape"])
        state[e["name"]] = arr.astype(dt.newbyteorder("="))
    return spec, state, header.get("meta", {})


def model_from_checkpoint(path) -> tuple[Model, dict]:
    spec, state, meta = load_checkpoint(path)
    dtype = next(iter(state.values())).dtype
    model = build(spec, seed=0, dtype=dtype)
    model.load_state_dict(state)
    return model, meta


def describe(model: Model) -> dict:
    part = partition(model)
    counts = part.counts()
    return {
        "spec": model.spec.to_dict(),
        "feature_params": counts["feature"],
        "head_params": counts["head"],
        "total_params": counts["total"],
        "trainable_params": model.trainable_count(),
        "frozen": sorted(model.frozen),
        "head_tensors": sorted(part.head),
    }
