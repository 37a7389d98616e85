"""Small declarative CNNs: architecture specs, initialization and forward passes.

A :class:`ModelSpec` is compiled into a flat execution plan of
:class:`ConvInfo`, :class:`AddInfo`, :class:`PoolInfo` and :class:`DenseInfo`
steps. Each step writes one named tensor; the names double as layer ids in
:class:`ModelState` and in prune masks.

Layer ids::

    conv{i}                          plain conv at spec position i
    res{i}.conv1 / .conv2 / .proj    convs inside a residual block
    res{i}                           the block's post-add tensor
    pool{i}, dense{i}, head
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "Conv",
    "ResidualBlock",
    "GlobalAvgPool",
    "Dense",
    "SoftmaxHead",
    "ModelSpec",
    "ModelState",
    "ForwardTrace",
    "SpecError",
    "build_model",
    "forward",
    "predict",
    "preset",
    "PRESETS",
    "save_state",
    "load_state",
]


class SpecError(ValueError):
    """Raised when a model spec does not describe a valid network."""


@dataclass(frozen=True)
class Conv:
    filters: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    activation: Optional[str] = "relu"
    affine: bool = False  # per-channel scale+shift after the conv (stands in for batch norm)


@dataclass(frozen=True)
class ResidualBlock:
    """``act(conv2(conv1(x)) + skip(x))``; conv2's activation is applied after the add."""

    conv1: Conv
    conv2: Conv
    projection: Optional[bool] = None  # None: 1x1 projection iff channels or stride change


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Dense:
    units: int
    activation: Optional[str] = "relu"


@dataclass(frozen=True)
class SoftmaxHead:
    classes: int


LayerSpec = Union[Conv, ResidualBlock, GlobalAvgPool, Dense, SoftmaxHead]


# --------------------------------------------------------------------------
# compiled plan
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvInfo:
    id: str
    source: str
    in_channels: int
    filters: int
    kernel: int
    stride: int
    padding: int
    in_hw: tuple
    out_hw: tuple
    activation: Optional[str]
    affine: bool


@dataclass(frozen=True)
class AddInfo:
    id: str
    inputs: tuple
    channels: int
    hw: tuple
    activation: Optional[str]


@dataclass(frozen=True)
class PoolInfo:
    id: str
    source: str
    channels: int


@dataclass(frozen=True)
class DenseInfo:
    id: str
    source: str
    in_features: int
    units: int
    activation: Optional[str]
    head: bool


Step = Union[ConvInfo, AddInfo, PoolInfo, DenseInfo]


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple = (1, 16, 16)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "_plan", _compile(self))

    @property
    def plan(self) -> tuple:
        return self._plan

    @property
    def num_classes(self) -> int:
        return self.layers[-1].classes

    def conv_layers(self) -> list:
        return [s for s in self.plan if isinstance(s, ConvInfo)]

    def dense_layers(self) -> list:
        return [s for s in self.plan if isinstance(s, DenseInfo)]

    def step(self, layer_id: str) -> Step:
        for s in self.plan:
            if s.id == layer_id:
                return s
        raise KeyError(layer_id)

    def param_count(self) -> int:
        """Analytic parameter count from layer shapes."""
        total = 0
        for s in self.plan:
            if isinstance(s, ConvInfo):
                total += s.filters * (s.in_channels * s.kernel * s.kernel + 1 + (2 if s.affine else 0))
            elif isinstance(s, DenseInfo):
                total += s.units * (s.in_features + 1)
        return total

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            if isinstance(layer, Conv):
                layers.append({"type": "conv", **_conv_dict(layer)})
            elif isinstance(layer, ResidualBlock):
                entry = {"type": "residual", "conv1": _conv_dict(layer.conv1), "conv2": _conv_dict(layer.conv2)}
                if layer.projection is not None:
                    entry["projection"] = layer.projection
                layers.append(entry)
            elif isinstance(layer, GlobalAvgPool):
                layers.append({"type": "pool"})
            elif isinstance(layer, Dense):
                layers.append({"type": "dense", "units": layer.units, "activation": layer.activation or "none"})
            elif isinstance(layer, SoftmaxHead):
                layers.append({"type": "head", "classes": layer.classes})
        return {"input_shape": list(self.input_shape), "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        layers = []
        for entry in d["layers"]:
            kind = entry.get("type")
            if kind == "conv":
                layers.append(_conv_from(entry))
            elif kind == "residual":
                layers.append(
                    ResidualBlock(_conv_from(entry["conv1"]), _conv_from(entry["conv2"]), entry.get("projection"))
                )
            elif kind == "pool":
                layers.append(GlobalAvgPool())
            elif kind == "dense":
                act = entry.get("activation", "relu")
                layers.append(Dense(int(entry["units"]), None if act == "none" else act))
            elif kind == "head":
                layers.append(SoftmaxHead(int(entry["classes"])))
            else:
                raise SpecError(f"unknown layer type {kind!r}")
        return cls(tuple(layers), tuple(d.get("input_shape", (1, 16, 16))))


def _conv_dict(c: Conv) -> dict:
    return {
        "filters": c.filters,
        "kernel": c.kernel,
        "stride": c.stride,
        "padding": c.padding,
        "activation": c.activation or "none",
        "affine": c.affine,
    }


def _conv_from(d: dict) -> Conv:
    act = d.get("activation", "relu")
    return Conv(
        int(d["filters"]),
        int(d.get("kernel", 3)),
        int(d.get("stride", 1)),
        int(d.get("padding", 1)),
        None if act == "none" else act,
        bool(d.get("affine", False)),
    )


def _compile(spec: ModelSpec) -> tuple:
    if len(spec.input_shape) != 3 or min(spec.input_shape) < 1:
        raise SpecError(f"input shape must be [C,H,W] with positive sizes, got {spec.input_shape}")
    if not spec.layers or not isinstance(spec.layers[-1], SoftmaxHead):
        raise SpecError("the last layer must be a SoftmaxHead")
    if sum(isinstance(x, SoftmaxHead) for x in spec.layers) != 1:
        raise SpecError("exactly one SoftmaxHead is allowed")
    if spec.layers[-1].classes < 2:
        raise SpecError("SoftmaxHead needs at least 2 classes")

    steps: list = []
    c, h, w = spec.input_shape
    src = "input"
    pooled = False

    def conv_step(layer_id, conv, source, cin, hw):
        if conv.filters < 1 or conv.kernel < 1 or conv.stride < 1 or conv.padding < 0:
            raise SpecError(f"{layer_id}: invalid conv hyperparameters {conv}")
        if conv.activation not in (None, "relu"):
            raise SpecError(f"{layer_id}: unsupported activation {conv.activation!r}")
        ho = T.conv_output_size(hw[0], conv.kernel, conv.stride, conv.padding)
        wo = T.conv_output_size(hw[1], conv.kernel, conv.stride, conv.padding)
        if ho < 1 or wo < 1:
            raise SpecError(f"{layer_id}: output would be empty for input {hw} with kernel {conv.kernel}")
        return ConvInfo(
            layer_id, source, cin, conv.filters, conv.kernel, conv.stride, conv.padding,
            tuple(hw), (ho, wo), conv.activation, conv.affine,
        )

    for i, layer in enumerate(spec.layers):
        if isinstance(layer, (Conv, ResidualBlock)) and pooled:
            raise SpecError(f"layer {i}: convolution after global pooling")
        if isinstance(layer, Conv):
            info = conv_step(f"conv{i}", layer, src, c, (h, w))
            steps.append(info)
            src, c, (h, w) = info.id, info.filters, info.out_hw
        elif isinstance(layer, ResidualBlock):
            bid = f"res{i}"
            c1 = conv_step(f"{bid}.conv1", layer.conv1, src, c, (h, w))
            c2 = conv_step(f"{bid}.conv2", replace(layer.conv2, activation=None), c1.id, c1.filters, c1.out_hw)
            needs_proj = c2.filters != c or c2.out_hw != (h, w)
            proj = needs_proj if layer.projection is None else layer.projection
            if needs_proj and not proj:
                raise SpecError(f"{bid}: identity skip cannot join {c} channels {(h, w)} to {c2.filters} {c2.out_hw}")
            steps += [c1, c2]
            skip = src
            if proj:
                p = conv_step(
                    f"{bid}.proj",
                    Conv(c2.filters, 1, layer.conv1.stride, 0, None, layer.conv2.affine),
                    src, c, (h, w),
                )
                if p.out_hw != c2.out_hw:
                    raise SpecError(f"{bid}: projection output {p.out_hw} != inner output {c2.out_hw}")
                steps.append(p)
                skip = p.id
            steps.append(AddInfo(bid, (c2.id, skip), c2.filters, c2.out_hw, layer.conv2.activation))
            src, c, (h, w) = bid, c2.filters, c2.out_hw
        elif isinstance(layer, GlobalAvgPool):
            if pooled:
                raise SpecError(f"layer {i}: pooling twice")
            steps.append(PoolInfo(f"pool{i}", src, c))
            src, pooled = f"pool{i}", True
        elif isinstance(layer, (Dense, SoftmaxHead)):
            if not pooled:
                raise SpecError(f"layer {i}: dense layers need a preceding GlobalAvgPool")
            head = isinstance(layer, SoftmaxHead)
            units = layer.classes if head else layer.units
            if units < 1:
                raise SpecError(f"layer {i}: units must be positive")
            act = None if head else layer.activation
            lid = "head" if head else f"dense{i}"
            steps.append(DenseInfo(lid, src, c, units, act, head))
            src, c = lid, units
        else:
            raise SpecError(f"layer {i}: unknown layer {layer!r}")
    return tuple(steps)


# --------------------------------------------------------------------------
# state
# --------------------------------------------------------------------------


@dataclass
class ModelState:
    """Parameter values for a spec: ``params[layer_id][name] -> ndarray``."""

    spec: ModelSpec
    params: dict
    seed: Optional[int] = None

    def copy(self) -> "ModelState":
        return ModelState(self.spec, {k: {n: a.copy() for n, a in v.items()} for k, v in self.params.items()}, self.seed)

    def filter_counts(self) -> dict:
        return {s.id: s.filters for s in self.spec.conv_layers()}

    def param_count(self) -> int:
        return int(sum(a.size for v in self.params.values() for a in v.values()))

    def flat(self) -> dict:
        """``{(layer_id, name): array}`` view of all parameters."""
        return {(k, n): a for k, v in self.params.items() for n, a in v.items()}

    def equals(self, other: "ModelState") -> bool:
        a, b = self.flat(), other.flat()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def build_model(spec: ModelSpec, seed: int) -> ModelState:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases, unit affine scales."""
    rng = np.random.default_rng(seed)
    params: dict = {}
    for s in spec.plan:
        if isinstance(s, ConvInfo):
            fan_in = s.in_channels * s.kernel * s.kernel
            p = {
                "weight": rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(s.filters, s.in_channels, s.kernel, s.kernel)),
                "bias": np.zeros(s.filters),
            }
            if s.affine:
                p["scale"] = np.ones(s.filters)
                p["shift"] = np.zeros(s.filters)
            params[s.id] = p
        elif isinstance(s, DenseInfo):
            params[s.id] = {
                "weight": rng.normal(0.0, np.sqrt(2.0 / s.in_features), size=(s.units, s.in_features)),
                "bias": np.zeros(s.units),
            }
    return ModelState(spec, params, seed)


def save_state(state: ModelState, path) -> None:
    """Write spec and parameters to a single ``.npz`` file."""
    arrays = {f"{k}/{n}": a for k, v in state.params.items() for n, a in v.items()}
    meta = {"spec": state.spec.to_dict(), "seed": state.seed}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_state(path) -> ModelState:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        params: dict = {}
        for key in z.files:
            if key == "__meta__":
                continue
            layer, name = key.rsplit("/", 1)
            params.setdefault(layer, {})[name] = z[key].copy()
    return ModelState(ModelSpec.from_dict(meta["spec"]), params, meta["seed"])


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Per-conv feature maps (after activation and gating) plus final outputs."""

    feature_maps: dict = field(default_factory=dict)
    logits: Optional[Tensor] = None
    probs: Optional[Tensor] = None


def as_tensors(state: ModelState, requires_grad: bool = False) -> dict:
    return {
        k: {n: Tensor(a, requires_grad=requires_grad) for n, a in v.items()} for k, v in state.params.items()
    }


def run(spec: ModelSpec, params: dict, x, gates: Optional[dict] = None) -> ForwardTrace:
    """Differentiable forward pass.

    ``params`` holds Tensors (see :func:`as_tensors`); ``gates`` optionally maps
    conv layer ids to per-filter multiplier Tensors applied to that layer's
    feature map. Records on the active tape when anything requires grad.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise T.ShapeError(f"batch shape {x.shape} does not match model input [N,{','.join(map(str, spec.input_shape))}]")
    gates = gates or {}
    values = {"input": x}
    trace = ForwardTrace()
    for s in spec.plan:
        if isinstance(s, ConvInfo):
            p = params[s.id]
            y = T.conv2d(values[s.source], p["weight"], p["bias"], s.stride, s.padding)
            if s.affine:
                y = T.channel_affine(y, p["scale"], p["shift"])
            if s.activation == "relu":
                y = T.relu(y)
            if s.id in gates:
                y = T.channel_affine(y, gates[s.id])
            trace.feature_maps[s.id] = y
            values[s.id] = y
        elif isinstance(s, AddInfo):
            y = T.add(values[s.inputs[0]], values[s.inputs[1]])
            if s.activation == "relu":
                y = T.relu(y)
            values[s.id] = y
        elif isinstance(s, PoolInfo):
            values[s.id] = T.global_avg_pool(values[s.source])
        else:
            p = params[s.id]
            y = T.linear(values[s.source], p["weight"], p["bias"])
            if s.activation == "relu":
                y = T.relu(y)
            values[s.id] = y
    trace.logits = values["head"]
    trace.probs = T.softmax(trace.logits)
    return trace


def forward(state: ModelState, batch, record_trace: bool = False):
    """Return class probabilities ``[N, K]`` (and the trace when requested)."""
    trace = run(state.spec, as_tensors(state), batch)
    probs = trace.probs.data
    return (probs, trace) if record_trace else probs


def predict(state: ModelState, images: np.ndarray, batch_size: int = 256):
    """Probabilities and argmax classes (ties resolve to the lowest index)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError("predict needs a non-empty [N,C,H,W] image array")
    chunks = [forward(state, images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    probs = np.concatenate(chunks, axis=0)
    return probs, probs.argmax(axis=1)


# --------------------------------------------------------------------------
# presets
# --------------------------------------------------------------------------


def mini_plain(classes: int = 2, input_shape=(1, 16, 16)) -> ModelSpec:
    return ModelSpec(
        (
            Conv(8, 3, 1, 1, affine=True),
            Conv(16, 3, 2, 1, affine=True),
            Conv(16, 3, 2, 1, affine=True),
            GlobalAvgPool(),
            SoftmaxHead(classes),
        ),
        input_shape,
    )


def mini_res(classes: int = 2, input_shape=(1, 16, 16)) -> ModelSpec:
    return ModelSpec(
        (
            Conv(8, 3, 1, 1, affine=True),
            ResidualBlock(Conv(8, 3, 1, 1, affine=True), Conv(8, 3, 1, 1, affine=True)),
            ResidualBlock(Conv(16, 3, 2, 1, affine=True), Conv(16, 3, 1, 1, affine=True)),
            GlobalAvgPool(),
            SoftmaxHead(classes),
        ),
        input_shape,
    )


PRESETS = {"mini-plain": mini_plain, "mini-res": mini_res}


def preset(name: str, classes: int = 2, input_shape=(1, 16, 16)) -> ModelSpec:
    try:
        return PRESETS[name](classes, input_shape)
    except KeyError:
        raise SpecError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
