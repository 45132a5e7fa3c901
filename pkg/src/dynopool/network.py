"""Declarative CNN specs, resizer replacement, parameters and forward pass."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .complexity import GmacsLedger, LedgerEntry, count_layer_gmacs
from .functional import conv2d
from .pool import ScaleParam, build_geometry, resize
from .tensor import Tensor, relu

LAYER_KINDS = (
    "conv", "relu", "dynopool", "linear", "flatten", "global_avg_pool",
    "maxpool", "avgpool", "branch",
)
POOL_MARKERS = ("maxpool", "avgpool")


class LayerError(RuntimeError):
    """A layer failed its preconditions during shape propagation or forward."""

    def __init__(self, layer_id: str, kind: str, message: str):
        super().__init__(f"layer {layer_id} ({kind}): {message}")
        self.layer_id = layer_id
        self.kind = kind


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: Optional[int] = None
    in_features: int = 0
    out_features: int = 0
    resizer_id: Optional[str] = None
    init_ratio: Tuple[float, float] = (0.5, 0.5)
    branches: Tuple[Tuple["LayerSpec", ...], ...] = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and self.kernel % 2 == 0:
            raise ValueError("conv kernels must have odd size")
        if self.kind == "dynopool" and not self.resizer_id:
            raise ValueError("dynopool layers need a resizer_id")

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding


def conv(cin: int, cout: int, kernel: int = 3, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv", in_channels=cin, out_channels=cout, kernel=kernel, stride=stride)


def dynopool(resizer_id: str, r_h: float = 0.5, r_w: Optional[float] = None) -> LayerSpec:
    return LayerSpec("dynopool", resizer_id=resizer_id, init_ratio=(r_h, r_h if r_w is None else r_w))


def maxpool(stride: int = 2) -> LayerSpec:
    return LayerSpec("maxpool", kernel=stride, stride=stride)


def linear(fan_in: int, fan_out: int) -> LayerSpec:
    return LayerSpec("linear", in_features=fan_in, out_features=fan_out)


RELU = LayerSpec("relu")
GAP = LayerSpec("global_avg_pool")
FLATTEN = LayerSpec("flatten")


@dataclass(frozen=True)
class NetworkSpec:
    layers: Tuple[LayerSpec, ...]
    in_channels: int
    input_size: Tuple[int, int]
    num_classes: int

    def resizers(self) -> Dict[str, Tuple[float, float]]:
        """resizer_id -> initial ratio; layers sharing an id share one alpha."""
        found: Dict[str, Tuple[float, float]] = {}
        for _, layer in walk(self.layers):
            if layer.kind == "dynopool":
                prev = found.setdefault(layer.resizer_id, layer.init_ratio)
                if prev != layer.init_ratio:
                    raise ValueError(f"resizer {layer.resizer_id} declared with two initial ratios")
        return found

    def groups(self) -> Dict[str, List[str]]:
        """resizer_id -> ids of every layer that resizes with it."""
        out: Dict[str, List[str]] = {}
        for path, layer in walk(self.layers):
            if layer.kind == "dynopool":
                out.setdefault(layer.resizer_id, []).append(path)
        return out


def walk(layers: Sequence[LayerSpec], prefix: str = "") -> Iterator[Tuple[str, LayerSpec]]:
    for i, layer in enumerate(layers):
        path = f"{prefix}{i}"
        yield path, layer
        for b, branch in enumerate(layer.branches):
            yield from walk(branch, f"{path}.{b}.")


# ---------------------------------------------------------------- replacement
def replace_resizers(spec: NetworkSpec) -> NetworkSpec:
    """Swap every fixed resizer for a DynOPool.

    pool(s)             -> dynopool(1/s)
    conv(s), relu       -> conv(1), relu, dynopool(1/s)
    conv(s)             -> conv(1), dynopool(1/s)
    New resizers that end up adjacent are fused into one with the product
    ratio. The k-th new resizer of every arm of a branch layer shares one
    scale parameter. Global average pooling is left alone.
    """
    taken = set(spec.resizers())
    counter = iter(i for i in range(10**6) if f"p{i}" not in taken)
    layers = _replace(spec.layers, counter)
    return replace(spec, layers=layers)


def _replace(layers: Sequence[LayerSpec], counter, shared_ids: Optional[List[str]] = None) -> Tuple[LayerSpec, ...]:
    staged: List[Union[LayerSpec, float]] = []  # floats mark new resizers
    i = 0
    while i < len(layers):
        layer = layers[i]
        if layer.kind in POOL_MARKERS:
            staged.append(1.0 / layer.stride)
        elif layer.kind == "conv" and layer.stride > 1:
            staged.append(replace(layer, stride=1))
            if i + 1 < len(layers) and layers[i + 1].kind == "relu":
                staged.append(layers[i + 1])
                i += 1
            staged.append(1.0 / layer.stride)
        elif layer.kind == "branch":
            ids: List[str] = []
            arms = tuple(_replace(arm, counter, ids) for arm in layer.branches)
            staged.append(replace(layer, branches=arms))
        elif layer.kind in LAYER_KINDS:
            staged.append(layer)
        else:  # pragma: no cover - LayerSpec validates kinds
            raise ValueError(f"unsupported resizer kind {layer.kind!r}")
        i += 1

    fused: List[Union[LayerSpec, float]] = []
    for item in staged:
        if isinstance(item, float) and fused and isinstance(fused[-1], float):
            fused[-1] *= item
        else:
            fused.append(item)

    out: List[LayerSpec] = []
    k = 0
    for item in fused:
        if isinstance(item, float):
            if shared_ids is not None and k < len(shared_ids):
                rid = shared_ids[k]
            else:
                rid = f"p{next(counter)}"
                if shared_ids is not None:
                    shared_ids.append(rid)
            out.append(dynopool(rid, item, item))
            k += 1
        else:
            out.append(item)
    return tuple(out)


# ------------------------------------------------------------------ built-ins
def builtin(name: str, in_channels: int, num_classes: int, input_size: Tuple[int, int]) -> NetworkSpec:
    """Small VGG-style stand-ins: conv3x3 + relu + resizer per block."""
    widths = {"tiny3": (8, 16, 32), "tiny5": (8, 16, 16, 32, 32)}
    if name not in widths:
        raise ValueError(f"unknown architecture {name!r}; choose from {sorted(widths)}")
    layers: List[LayerSpec] = []
    cin = in_channels
    for cout in widths[name]:
        layers += [conv(cin, cout), RELU, maxpool(2)]
        cin = cout
    layers += [GAP, linear(cin, num_classes)]
    pooled = NetworkSpec(tuple(layers), in_channels, tuple(input_size), num_classes)
    return replace_resizers(pooled)


# ------------------------------------------------------------------ text form
def parse_spec(text: str) -> NetworkSpec:
    """Parse the plain-text network description.

    ::

        input 1 16 16        # channels height width
        classes 4
        conv 1 8 3 stride=2  # in out kernel
        relu
        maxpool 2
        dynopool p0 0.5 0.5
        gap
        linear 8 4
        branch               # arms separated by "or", closed by "end"
    """
    header = {}
    stack: List[List] = [[]]
    arms_stack: List[List] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        word, *args = line.split()
        kw = dict(a.split("=", 1) for a in args if "=" in a)
        pos = [a for a in args if "=" not in a]
        try:
            if word == "input":
                header["input"] = tuple(int(v) for v in pos)
            elif word == "classes":
                header["classes"] = int(pos[0])
            elif word == "conv":
                stack[-1].append(conv(int(pos[0]), int(pos[1]), int(pos[2]), int(kw.get("stride", 1))))
            elif word == "relu":
                stack[-1].append(RELU)
            elif word in POOL_MARKERS:
                stack[-1].append(LayerSpec(word, kernel=int(pos[0]), stride=int(pos[0])))
            elif word == "dynopool":
                r_h = float(pos[1]) if len(pos) > 1 else 0.5
                r_w = float(pos[2]) if len(pos) > 2 else r_h
                stack[-1].append(dynopool(pos[0], r_h, r_w))
            elif word == "gap":
                stack[-1].append(GAP)
            elif word == "flatten":
                stack[-1].append(FLATTEN)
            elif word == "linear":
                stack[-1].append(linear(int(pos[0]), int(pos[1])))
            elif word == "branch":
                arms_stack.append([])
                stack.append([])
            elif word == "or":
                arms_stack[-1].append(tuple(stack.pop()))
                stack.append([])
            elif word == "end":
                arms_stack[-1].append(tuple(stack.pop()))
                stack[-1].append(LayerSpec("branch", branches=tuple(arms_stack.pop())))
            else:
                raise ValueError(f"unknown directive {word!r}")
        except (IndexError, ValueError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
    if len(stack) != 1:
        raise ValueError("unterminated branch")
    if "input" not in header or "classes" not in header:
        raise ValueError("config needs 'input C H W' and 'classes K' lines")
    c, h, w = header["input"]
    return NetworkSpec(tuple(stack[0]), c, (h, w), header["classes"])


def format_spec(spec: NetworkSpec) -> str:
    lines = [f"input {spec.in_channels} {spec.input_size[0]} {spec.input_size[1]}", f"classes {spec.num_classes}"]

    def emit(layers, depth):
        pad = "  " * depth
        for layer in layers:
            k = layer.kind
            if k == "conv":
                extra = f" stride={layer.stride}" if layer.stride != 1 else ""
                lines.append(f"{pad}conv {layer.in_channels} {layer.out_channels} {layer.kernel}{extra}")
            elif k in POOL_MARKERS:
                lines.append(f"{pad}{k} {layer.stride}")
            elif k == "dynopool":
                lines.append(f"{pad}dynopool {layer.resizer_id} {layer.init_ratio[0]!r} {layer.init_ratio[1]!r}")
            elif k == "linear":
                lines.append(f"{pad}linear {layer.in_features} {layer.out_features}")
            elif k == "global_avg_pool":
                lines.append(f"{pad}gap")
            elif k == "branch":
                lines.append(f"{pad}branch")
                for b, arm in enumerate(layer.branches):
                    if b:
                        lines.append(f"{pad}or")
                    emit(arm, depth + 1)
                lines.append(f"{pad}end")
            else:
                lines.append(f"{pad}{k}")

    emit(spec.layers, 0)
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------- parameters
@dataclass
class Params:
    weights: Dict[str, Tensor] = field(default_factory=dict)
    scales: Dict[str, ScaleParam] = field(default_factory=dict)

    def weight_tensors(self) -> List[Tuple[str, Tensor]]:
        return list(self.weights.items())

    def alpha_tensors(self) -> List[Tuple[str, Tensor]]:
        out = []
        for rid, sp in self.scales.items():
            out += [(f"alpha.{rid}.h", sp.alpha_h), (f"alpha.{rid}.w", sp.alpha_w)]
        return out

    def named_tensors(self) -> List[Tuple[str, Tensor]]:
        return self.weight_tensors() + self.alpha_tensors()

    def count(self) -> int:
        return int(sum(t.data.size for _, t in self.named_tensors()))

    def ratios(self) -> Dict[str, Tuple[float, float]]:
        return {rid: sp.ratio_values() for rid, sp in self.scales.items()}

    def zero_grad(self) -> None:
        for _, t in self.named_tensors():
            t.grad = None


def init_params(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32) -> Params:
    """He-normal conv/linear weights, zero biases, alpha = 1 / init ratio."""
    params = Params()
    for path, layer in walk(spec.layers):
        if layer.kind == "conv":
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel))
            params.weights[f"{path}.weight"] = Tensor(w.astype(dtype), requires_grad=True)
            params.weights[f"{path}.bias"] = Tensor(np.zeros(layer.out_channels, dtype), requires_grad=True)
        elif layer.kind == "linear":
            w = rng.normal(0.0, math.sqrt(1.0 / layer.in_features), (layer.in_features, layer.out_features))
            params.weights[f"{path}.weight"] = Tensor(w.astype(dtype), requires_grad=True)
            params.weights[f"{path}.bias"] = Tensor(np.zeros(layer.out_features, dtype), requires_grad=True)
    for rid, (r_h, r_w) in spec.resizers().items():
        params.scales[rid] = ScaleParam.from_ratio(r_h, r_w, dtype=dtype)
    return params


def initial_scales(spec: NetworkSpec, dtype=np.float32) -> Dict[str, ScaleParam]:
    return {rid: ScaleParam.from_ratio(r_h, r_w, dtype=dtype) for rid, (r_h, r_w) in spec.resizers().items()}


# -------------------------------------------------------------------- forward
@dataclass
class LayerShape:
    layer_id: str
    h: int
    w: int


@dataclass
class ForwardResult:
    logits: Optional[Tensor]
    ledger: GmacsLedger
    shapes: List[LayerShape]


Size = Union[int, Tensor]


def _area(h: Size, w: Size) -> Optional[Tensor]:
    if isinstance(h, Tensor) or isinstance(w, Tensor):
        ht = h if isinstance(h, Tensor) else Tensor(np.asarray(h, dtype=np.float32))
        return ht * w
    return None


def _as_int(n: Size) -> int:
    return int(round(float(n.data))) if isinstance(n, Tensor) else int(n)


class _Runner:
    """Walks a spec, optionally without data, building the ledger."""

    def __init__(self, spec: NetworkSpec, scales: Dict[str, ScaleParam], weights: Optional[Dict[str, Tensor]],
                 relaxed: bool, initial: Optional[Dict[str, Tuple[int, float]]]):
        self.spec = spec
        self.scales = scales
        self.weights = weights
        self.relaxed = relaxed
        self.initial = initial
        self.ledger = GmacsLedger()
        self.shapes: List[LayerShape] = []

    def run(self, x: Optional[Tensor]):
        h, w = self.spec.input_size
        chans = self.spec.in_channels
        return self._seq(self.spec.layers, "", x, h, w, chans)

    def _record(self, path: str, layer: LayerSpec, h: Size, w: Size) -> None:
        hi, wi = _as_int(h), _as_int(w)
        if layer.kind == "conv":
            self.shapes.append(LayerShape(path, hi, wi))
        if self.initial is None:
            return
        init_area, init_gmacs = self.initial[path]
        self.ledger.add(LedgerEntry(path, layer, init_gmacs, init_area, hi, wi, _area(h, w)))

    def _seq(self, layers, prefix, x, h, w, chans):
        for i, layer in enumerate(layers):
            path = f"{prefix}{i}"
            try:
                x, h, w, chans = self._layer(path, layer, x, h, w, chans)
            except LayerError:
                raise
            except Exception as exc:
                raise LayerError(path, layer.kind, str(exc)) from exc
        return x, h, w, chans

    def _layer(self, path, layer, x, h, w, chans):
        kind = layer.kind
        if kind in POOL_MARKERS or (kind == "conv" and layer.stride != 1):
            raise ValueError("fixed resizers must be replaced before running (see replace_resizers)")
        if kind == "conv":
            if h is None:
                raise ValueError("conv after spatial dims were reduced")
            if chans != layer.in_channels:
                raise ValueError(f"expected {layer.in_channels} input channels, got {chans}")
            if 2 * layer.pad != layer.kernel - 1:
                raise ValueError("conv padding must preserve spatial size")
            self._record(path, layer, h, w)
            if x is not None:
                x = conv2d(x, self.weights[f"{path}.weight"], self.weights[f"{path}.bias"], layer.pad)
            return x, h, w, layer.out_channels
        if kind == "relu":
            return (relu(x) if x is not None else None), h, w, chans
        if kind == "dynopool":
            if h is None:
                raise ValueError("dynopool needs a spatial input")
            geom = build_geometry(h, w, self.scales[layer.resizer_id], self.relaxed)
            if x is not None:
                x = resize(x, geom)
            return x, geom.h_size, geom.w_size, chans
        if kind == "global_avg_pool":
            return (x.mean(axis=(2, 3)) if x is not None else None), None, None, chans
        if kind == "flatten":
            feats = chans * (1 if h is None else _as_int(h) * _as_int(w))
            return (x.reshape(x.shape[0], -1) if x is not None else None), None, None, feats
        if kind == "linear":
            if h is not None:
                raise ValueError("linear layers need a flattened or pooled input")
            if chans != layer.in_features:
                raise ValueError(f"expected {layer.in_features} features, got {chans}")
            self._record(path, layer, 1, 1)
            if x is not None:
                x = x @ self.weights[f"{path}.weight"] + self.weights[f"{path}.bias"]
            return x, None, None, layer.out_features
        if kind == "branch":
            outs = [self._seq(arm, f"{path}.{b}.", x, h, w, chans) for b, arm in enumerate(layer.branches)]
            shapes = {(_as_int(o[1]) if o[1] is not None else None, _as_int(o[2]) if o[2] is not None else None, o[3]) for o in outs}
            if len(shapes) != 1:
                raise ValueError(f"branch arms disagree on output shape: {sorted(shapes, key=str)}")
            total = outs[0][0]
            for o in outs[1:]:
                total = total + o[0] if total is not None else None
            return total, outs[0][1], outs[0][2], outs[0][3]
        raise ValueError(f"unsupported layer kind {kind!r}")


@functools.lru_cache(maxsize=64)
def initial_counts(spec: NetworkSpec) -> Dict[str, Tuple[int, float]]:
    """layer_id -> (initial output area, initial GMACs) at the declared ratios."""
    counts: Dict[str, Tuple[int, float]] = {}

    class _Collect(_Runner):
        def _record(self, path, layer, h, w):
            hi, wi = _as_int(h), _as_int(w)
            counts[path] = (hi * wi, count_layer_gmacs(layer, hi, wi))

    _Collect(spec, initial_scales(spec), None, False, None).run(None)
    return counts


def propagate(spec: NetworkSpec, scales: Dict[str, ScaleParam], relaxed: bool = False) -> ForwardResult:
    """Shape and ledger pass without data."""
    runner = _Runner(spec, scales, None, relaxed, initial_counts(spec))
    runner.run(None)
    return ForwardResult(None, runner.ledger, runner.shapes)


def forward(spec: NetworkSpec, x: Tensor, params: Params, relaxed: bool = False) -> ForwardResult:
    if tuple(x.shape[1:]) != (spec.in_channels, *spec.input_size):
        raise ValueError(f"batch shape {x.shape} does not match spec input {(spec.in_channels, *spec.input_size)}")
    runner = _Runner(spec, params.scales, params.weights, relaxed, initial_counts(spec))
    out, h, _, chans = runner.run(x)
    if h is not None or out.ndim != 2 or out.shape[1] != spec.num_classes:
        raise ValueError(f"network output {out.shape} is not [B, {spec.num_classes}] logits")
    return ForwardResult(out, runner.ledger, runner.shapes)
