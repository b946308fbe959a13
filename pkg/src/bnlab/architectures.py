"""Network families, their layer plans, realization and parameter accounting.

A :class:`LayerPlan` is a topologically ordered list of :class:`Layer`
descriptors. Each descriptor names its inputs, so residual blocks are plain
DAG edges (``"input"`` is the network input). Parameters are labelled with
exactly one group: ``batchnorm``, ``output``, ``shortcut`` or ``body``.

Parameter names follow ``stage/block/layer/role`` with dots, e.g.
``stage2.block0.shortcut.conv.weight`` or ``stage1.block3.bn2.gamma``.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterator, Optional

import numpy as np

from . import tensor as T
from .batchnorm import BatchNormState, BnInitScheme, bn_forward
from .batchnorm import bn_init as make_bn_state
from .rng import Prng

GROUPS = ("batchnorm", "output", "shortcut", "body")

IMAGENET_BLOCKS = {
    18: ("basic", (2, 2, 2, 2)),
    34: ("basic", (3, 4, 6, 3)),
    50: ("bottleneck", (3, 4, 6, 3)),
    101: ("bottleneck", (3, 4, 23, 3)),
    200: ("bottleneck", (3, 24, 36, 3)),
}

VGG_CONFIGS = {
    11: (64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512),
    13: (64, 64, "M", 128, 128, "M", 256, 256, "M", 512, 512, "M", 512, 512),
    16: (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512),
    19: (64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512, 512, 512, 512),
}


class ConfigError(ValueError):
    """An architecture description that cannot be realized."""


class FeatureInitScheme(str, enum.Enum):
    HE_NORMAL = "he_normal"
    UNIFORM = "uniform"
    BINARIZED = "binarized"
    ORTHOGONAL = "orthogonal"


def parse_width(w) -> Fraction:
    try:
        width = Fraction(str(w))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"invalid width scale {w!r}") from exc
    if width <= 0:
        raise ConfigError(f"width scale must be positive, got {w}")
    return width


@dataclass
class ArchSpec:
    family: str = "cifar_resnet"
    depth: int = 14
    width_scale: Fraction = Fraction(1)
    block_counts: Optional[tuple[int, ...]] = None
    feature_init: FeatureInitScheme = FeatureInitScheme.HE_NORMAL
    bn_init: BnInitScheme = BnInitScheme.UNIFORM01_ZERO

    def __post_init__(self):
        self.width_scale = parse_width(self.width_scale)
        self.feature_init = FeatureInitScheme(self.feature_init)
        self.bn_init = BnInitScheme(self.bn_init)
        self.depth = int(self.depth)
        if self.family == "imagenet_resnet" and self.block_counts is None and self.depth in IMAGENET_BLOCKS:
            self.block_counts = IMAGENET_BLOCKS[self.depth][1]
        if self.block_counts is not None:
            self.block_counts = tuple(int(b) for b in self.block_counts)

    @property
    def label(self) -> str:
        if self.family == "vgg":
            return f"VGG-{self.depth}"
        if self.family == "cifar_resnet" and self.width_scale != 1:
            return f"WRN-{self.depth}-{self.width_scale}"
        return f"ResNet-{self.depth}"

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "depth": self.depth,
            "width_scale": str(self.width_scale),
            "block_counts": list(self.block_counts) if self.block_counts else None,
            "feature_init": self.feature_init.value,
            "bn_init": self.bn_init.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        if d.get("block_counts") is not None:
            d["block_counts"] = tuple(d["block_counts"])
        return cls(**d)


@dataclass
class Layer:
    kind: str  # conv, batchnorm, relu, maxpool, avgpool, linear, residual_add
    name: str
    inputs: tuple[str, ...]
    group: Optional[str] = None
    attrs: dict = field(default_factory=dict)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        a = self.attrs
        if self.kind == "conv":
            shapes = {"weight": (a["out_channels"], a["in_channels"], a["kernel"], a["kernel"])}
            if a.get("bias"):
                shapes["bias"] = (a["out_channels"],)
            return shapes
        if self.kind == "batchnorm":
            return {"gamma": (a["features"],), "beta": (a["features"],)}
        if self.kind == "linear":
            return {"weight": (a["out_features"], a["in_features"]), "bias": (a["out_features"],)}
        return {}


@dataclass
class LayerPlan:
    spec: ArchSpec
    layers: list[Layer]
    num_classes: int

    @property
    def output(self) -> str:
        return self.layers[-1].name

    def params(self) -> Iterator[tuple[str, tuple[int, ...], str, Layer]]:
        for layer in self.layers:
            for role, shape in layer.param_shapes().items():
                yield f"{layer.name}.{role}", shape, layer.group, layer

    def weight_layer_depth(self) -> int:
        """Conv layers off the shortcut path plus linear layers."""
        return sum(1 for l in self.layers if (l.kind == "conv" and l.group == "body") or l.kind == "linear")

    def manifest(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "num_classes": self.num_classes,
            "layers": [
                {"kind": l.kind, "name": l.name, "inputs": list(l.inputs), "group": l.group, "attrs": l.attrs}
                for l in self.layers
            ],
        }

    def manifest_text(self) -> str:
        return json.dumps(self.manifest(), indent=1, sort_keys=True)


class _Builder:
    def __init__(self):
        self.layers: list[Layer] = []
        self.last = "input"

    def add(self, kind, name, group=None, inputs=None, **attrs) -> str:
        inputs = (self.last,) if inputs is None else tuple(inputs)
        self.layers.append(Layer(kind, name, inputs, group, attrs))
        self.last = name
        return name


def _channels(base: int, width: Fraction) -> int:
    c = base * width
    if c.denominator != 1:
        raise ConfigError(f"width scale {width} gives a non-integral channel count {base}*{width} = {c}")
    return int(c)


def build_cifar_resnet(n: int, width=1, feature_init="he_normal", bn_init="uniform01_zero",
                       num_classes: int = 10) -> LayerPlan:
    """ResNet-(6n+2) for 32x32 inputs with stage widths 16W, 32W, 64W."""
    if int(n) != n or n < 1:
        raise ConfigError(f"CIFAR ResNets need an integer N >= 1 (depth = 6N+2), got N={n}")
    n = int(n)
    w = parse_width(width)
    widths = [_channels(16, w), _channels(32, w), _channels(64, w)]
    spec = ArchSpec("cifar_resnet", 6 * n + 2, w, None, feature_init, bn_init)
    b = _Builder()
    b.add("conv", "stem.conv", "body", in_channels=3, out_channels=widths[0], kernel=3, stride=1, padding=1)
    b.add("batchnorm", "stem.bn", "batchnorm", features=widths[0], path="body")
    b.add("relu", "stem.relu")
    cin = widths[0]
    for s, cout in enumerate(widths, start=1):
        for k in range(n):
            stride = 2 if (s > 1 and k == 0) else 1
            _basic_block(b, f"stage{s}.block{k}", cin, cout, stride)
            cin = cout
    b.add("avgpool", "pool")
    b.add("linear", "fc", "output", in_features=cin, out_features=num_classes)
    return LayerPlan(spec, b.layers, num_classes)


def _basic_block(b: _Builder, p: str, cin: int, cout: int, stride: int) -> None:
    block_in = b.last
    b.add("conv", f"{p}.conv1", "body", in_channels=cin, out_channels=cout, kernel=3, stride=stride, padding=1)
    b.add("batchnorm", f"{p}.bn1", "batchnorm", features=cout, path="body")
    b.add("relu", f"{p}.relu1")
    b.add("conv", f"{p}.conv2", "body", in_channels=cout, out_channels=cout, kernel=3, stride=1, padding=1)
    main = b.add("batchnorm", f"{p}.bn2", "batchnorm", features=cout, path="body")
    skip = _shortcut(b, p, block_in, cin, cout, stride)
    b.add("residual_add", f"{p}.add", inputs=(main, skip))
    b.add("relu", f"{p}.relu2")


def _shortcut(b: _Builder, p: str, block_in: str, cin: int, cout: int, stride: int) -> str:
    if stride == 1 and cin == cout:
        return block_in
    b.add("conv", f"{p}.shortcut.conv", "shortcut", inputs=(block_in,), in_channels=cin, out_channels=cout,
          kernel=1, stride=stride, padding=0)
    return b.add("batchnorm", f"{p}.shortcut.bn", "batchnorm", features=cout, path="shortcut")


def _bottleneck_block(b: _Builder, p: str, cin: int, mid: int, stride: int) -> None:
    cout = 4 * mid
    block_in = b.last
    b.add("conv", f"{p}.conv1", "body", in_channels=cin, out_channels=mid, kernel=1, stride=1, padding=0)
    b.add("batchnorm", f"{p}.bn1", "batchnorm", features=mid, path="body")
    b.add("relu", f"{p}.relu1")
    b.add("conv", f"{p}.conv2", "body", in_channels=mid, out_channels=mid, kernel=3, stride=stride, padding=1)
    b.add("batchnorm", f"{p}.bn2", "batchnorm", features=mid, path="body")
    b.add("relu", f"{p}.relu2")
    b.add("conv", f"{p}.conv3", "body", in_channels=mid, out_channels=cout, kernel=1, stride=1, padding=0)
    main = b.add("batchnorm", f"{p}.bn3", "batchnorm", features=cout, path="body")
    skip = _shortcut(b, p, block_in, cin, cout, stride)
    b.add("residual_add", f"{p}.add", inputs=(main, skip))
    b.add("relu", f"{p}.relu3")


def build_imagenet_resnet(depth: int, feature_init="he_normal", bn_init="uniform01_zero",
                          num_classes: int = 1000, width=1) -> LayerPlan:
    if depth not in IMAGENET_BLOCKS:
        raise ConfigError(f"unsupported ImageNet ResNet depth {depth}; choose one of {sorted(IMAGENET_BLOCKS)}")
    kind, counts = IMAGENET_BLOCKS[depth]
    w = parse_width(width)
    spec = ArchSpec("imagenet_resnet", depth, w, counts, feature_init, bn_init)
    b = _Builder()
    stem = _channels(64, w)
    b.add("conv", "stem.conv", "body", in_channels=3, out_channels=stem, kernel=7, stride=2, padding=3)
    b.add("batchnorm", "stem.bn", "batchnorm", features=stem, path="body")
    b.add("relu", "stem.relu")
    b.add("maxpool", "stem.pool", window=3, stride=2, padding=1)
    cin = stem
    for s, (base, count) in enumerate(zip((64, 128, 256, 512), counts), start=1):
        mid = _channels(base, w)
        for k in range(count):
            stride = 2 if (s > 1 and k == 0) else 1
            if kind == "basic":
                _basic_block(b, f"stage{s}.block{k}", cin, mid, stride)
                cin = mid
            else:
                _bottleneck_block(b, f"stage{s}.block{k}", cin, mid, stride)
                cin = 4 * mid
    b.add("avgpool", "pool")
    b.add("linear", "fc", "output", in_features=cin, out_features=num_classes)
    return LayerPlan(spec, b.layers, num_classes)


def build_vgg(depth: int, feature_init="he_normal", bn_init="uniform01_zero", num_classes: int = 10,
              width=1) -> LayerPlan:
    if depth not in VGG_CONFIGS:
        raise ConfigError(f"unsupported VGG depth {depth}; choose one of {sorted(VGG_CONFIGS)}")
    w = parse_width(width)
    spec = ArchSpec("vgg", depth, w, None, feature_init, bn_init)
    b = _Builder()
    cin, li, pi = 3, 0, 0
    for item in VGG_CONFIGS[depth]:
        if item == "M":
            b.add("maxpool", f"pool{pi}", window=2, stride=2, padding=0)
            pi += 1
            continue
        cout = _channels(item, w)
        b.add("conv", f"features.layer{li}.conv", "body", in_channels=cin, out_channels=cout, kernel=3,
              stride=1, padding=1, bias=True)
        b.add("batchnorm", f"features.layer{li}.bn", "batchnorm", features=cout, path="body")
        b.add("relu", f"features.layer{li}.relu")
        cin, li = cout, li + 1
    b.add("avgpool", "pool")
    b.add("linear", "fc", "output", in_features=cin, out_features=num_classes)
    return LayerPlan(spec, b.layers, num_classes)


def build_plan(spec: ArchSpec) -> LayerPlan:
    fi, bi = spec.feature_init, spec.bn_init
    if spec.family == "cifar_resnet":
        if (spec.depth - 2) % 6 or spec.depth < 8:
            raise ConfigError(f"CIFAR ResNet depth must be 6N+2 with N >= 1 (8, 14, 20, 32, 56, 110, ...), "
                              f"got {spec.depth}")
        return build_cifar_resnet((spec.depth - 2) // 6, spec.width_scale, fi, bi)
    if spec.family == "imagenet_resnet":
        if spec.depth in IMAGENET_BLOCKS and spec.block_counts not in (None, IMAGENET_BLOCKS[spec.depth][1]):
            raise ConfigError(f"ResNet-{spec.depth} has block counts {IMAGENET_BLOCKS[spec.depth][1]}")
        return build_imagenet_resnet(spec.depth, fi, bi, width=spec.width_scale)
    if spec.family == "vgg":
        return build_vgg(spec.depth, fi, bi, width=spec.width_scale)
    raise ConfigError(f"unknown family {spec.family!r}")


def count_params(plan: LayerPlan) -> dict[str, int]:
    """Exact integer parameter counts per group plus the total."""
    counts = {g: 0 for g in GROUPS}
    for _, shape, group, _ in plan.params():
        counts[group] += int(np.prod(shape))
    counts["total"] = sum(counts[g] for g in GROUPS)
    return counts


# ---------------------------------------------------------------- initialization

def _fan_in(shape: tuple[int, ...]) -> int:
    return int(np.prod(shape[1:]))


def init_weight(shape: tuple[int, ...], scheme: FeatureInitScheme | str, rng: Prng, dtype=np.float32) -> np.ndarray:
    scheme = FeatureInitScheme(scheme)
    fan_in = _fan_in(shape)
    std = np.sqrt(2.0 / fan_in)
    if scheme is FeatureInitScheme.UNIFORM:
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, shape, dtype=np.float64).astype(dtype)
    draw = rng.normal(shape) * std
    if scheme is FeatureInitScheme.HE_NORMAL:
        return draw.astype(dtype)
    if scheme is FeatureInitScheme.BINARIZED:
        return (np.where(draw >= 0, 1.0, -1.0) * std).astype(dtype)
    rows, cols = shape[0], fan_in
    m = draw.reshape(rows, cols)
    if rows <= cols:
        q, r = np.linalg.qr(m.T)
        q = (q * np.sign(np.diag(r))).T  # rows orthonormal
        scale = np.sqrt(cols) * std
    else:
        q, r = np.linalg.qr(m)
        q = q * np.sign(np.diag(r))  # columns orthonormal
        scale = np.sqrt(rows) * std
    return (q * scale).reshape(shape).astype(dtype)


# ---------------------------------------------------------------- realized network

class Network:
    """A plan with concrete parameter tensors and batchnorm states."""

    def __init__(self, plan: LayerPlan, rng: Prng | None = None, dtype=np.float32,
                 feature_init: FeatureInitScheme | str | None = None, bn_init: BnInitScheme | str | None = None):
        self.plan = plan
        self.dtype = np.dtype(dtype)
        self.params: dict[str, T.Tensor] = {}
        self.groups: dict[str, str] = {}
        self.bn: dict[str, BatchNormState] = {}
        rng = rng if rng is not None else Prng(0)
        fi = FeatureInitScheme(feature_init or plan.spec.feature_init)
        bi = BnInitScheme(bn_init or plan.spec.bn_init)
        wrng, grng = rng.child("weights"), rng.child("gamma")
        for layer in plan.layers:
            if layer.kind == "batchnorm":
                st = make_bn_state(layer.attrs["features"], bi, grng.child(layer.name), dtype=self.dtype)
                st.gamma.name, st.beta.name = f"{layer.name}.gamma", f"{layer.name}.beta"
                self.bn[layer.name] = st
                self.params[st.gamma.name], self.params[st.beta.name] = st.gamma, st.beta
            elif layer.kind in ("conv", "linear"):
                shapes = layer.param_shapes()
                name = f"{layer.name}.weight"
                self.params[name] = T.Tensor(init_weight(shapes["weight"], fi, wrng.child(name), self.dtype),
                                             requires_grad=True, dtype=self.dtype, name=name)
                if "bias" in shapes:
                    self.params[f"{layer.name}.bias"] = T.Tensor(np.zeros(shapes["bias"], self.dtype),
                                                                requires_grad=True, dtype=self.dtype,
                                                                name=f"{layer.name}.bias")
            for role in layer.param_shapes():
                self.groups[f"{layer.name}.{role}"] = layer.group

    @classmethod
    def from_spec(cls, spec: ArchSpec, rng: Prng | None = None, dtype=np.float32) -> "Network":
        return cls(build_plan(spec), rng, dtype)

    @property
    def spec(self) -> ArchSpec:
        return self.plan.spec

    def named_parameters(self) -> Iterator[tuple[str, T.Tensor]]:
        return iter(self.params.items())

    def set_mode(self, mode: str) -> None:
        for st in self.bn.values():
            st.mode = mode

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def set_requires_grad(self, names) -> None:
        names = set(names)
        for n, p in self.params.items():
            p.requires_grad = n in names

    def forward(self, x, train: bool = True, observe: Callable[[str, np.ndarray], None] | None = None) -> T.Tensor:
        """Run the plan on ``x``; ``observe(name, array)`` sees every ReLU output."""
        if not isinstance(x, T.Tensor):
            x = T.Tensor(x, dtype=self.dtype)
        if x.dtype != self.dtype:
            x = T.Tensor(x.data, dtype=self.dtype)
        self.set_mode("train" if train else "eval")
        vals: dict[str, T.Tensor] = {"input": x}
        for layer in self.plan.layers:
            args = [vals[i] for i in layer.inputs]
            a = layer.attrs
            k = layer.kind
            if k == "conv":
                out = T.conv2d(args[0], self.params[f"{layer.name}.weight"], a["stride"], a["padding"],
                               bias=self.params.get(f"{layer.name}.bias"))
            elif k == "batchnorm":
                out = bn_forward(args[0], self.bn[layer.name])
            elif k == "relu":
                out = T.relu(args[0])
                if observe is not None:
                    observe(layer.name, out.data)
            elif k == "maxpool":
                out = T.maxpool2d(args[0], a["window"], a["stride"], a.get("padding", 0))
            elif k == "avgpool":
                out = T.avgpool_global(args[0])
            elif k == "linear":
                out = T.linear(args[0], self.params[f"{layer.name}.weight"], self.params[f"{layer.name}.bias"])
            elif k == "residual_add":
                out = T.add(args[0], args[1])
            else:
                raise ConfigError(f"unknown layer kind {k!r}")
            vals[layer.name] = out
        return vals[self.plan.output]

    __call__ = forward

    def relu_layers(self) -> list[str]:
        return [l.name for l in self.plan.layers if l.kind == "relu"]


# ---------------------------------------------------------------- reference tables

TABLE1_CONFIGS: list[tuple[str, int, int]] = (
    [("cifar_resnet", d, 1) for d in (14, 32, 56, 110, 218, 434, 866)]
    + [("cifar_resnet", 14, w) for w in (1, 2, 4, 8, 16, 32)]
    + [("imagenet_resnet", d, 1) for d in (18, 34, 50, 101, 200)]
)
VGG_TABLE_CONFIGS: list[tuple[str, int, int]] = [("vgg", d, 1) for d in (11, 13, 16, 19)]


def count_table(configs) -> list[dict]:
    rows = []
    for family, depth, width in configs:
        c = count_params(build_plan(ArchSpec(family, depth, width)))
        rows.append({"family": family, "depth": depth, "width": str(parse_width(width)), **{
            k: c[k] for k in ("total", "batchnorm", "output", "shortcut")}})
    return rows
