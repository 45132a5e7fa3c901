"""Training loop, optimizer, metrics CSV and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .complexity import gmacs_loss
from .data import Dataset, split
from .network import LayerShape, NetworkSpec, Params, forward, init_params, initial_scales, propagate
from .pool import ALPHA_BOUNDS, ScaleParam
from .tensor import Tensor, softmax_cross_entropy

log = logging.getLogger(__name__)

CSV_HEADER = ["epoch", "train_loss", "train_acc", "eval_acc", "gmacs", "resizer_id", "r_h", "r_w", "layer_id", "h", "w"]


class NumericalError(RuntimeError):
    def __init__(self, epoch: int, step: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 128
    lr_weights: float = 0.02
    lr_alpha: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lam: float = 0.0
    seed: int = 0
    schedule: str = "cosine"
    # r <= 1 keeps feature maps no larger than their input; the engine accepts ALPHA_BOUNDS
    alpha_clamp: Tuple[float, float] = (1.0, ALPHA_BOUNDS[1])
    freeze_alpha: bool = False
    # penalize compute relative to the initial model rather than in raw GMACs
    normalize_gmacs: bool = True
    shards: int = 1
    eval_fraction: float = 0.1

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.shards < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and shards >= 1 required")
        lo, hi = self.alpha_clamp
        if not 0 < lo < hi:
            raise ValueError(f"bad alpha clamp {self.alpha_clamp}")
        self.alpha_clamp = (float(lo), float(hi))


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    train_acc: float
    eval_acc: float
    gmacs: float
    ratios: Dict[str, Tuple[float, float]]
    shapes: List[LayerShape]


# ------------------------------------------------------------------ optimizer
def lr_factor(step: int, total: int, schedule: str) -> float:
    """Multiplier on the base rate at ``step`` of ``total`` (cosine to zero)."""
    if schedule == "constant" or total <= 0:
        return 1.0
    t = min(max(step / total, 0.0), 1.0)
    return 0.5 * (1.0 + math.cos(math.pi * t))


class SGD:
    """SGD with heavy-ball momentum and decoupled parameter groups.

    v <- mu * v + (g + wd * w);  w <- w - lr * v
    """

    def __init__(self, groups: Sequence[Tuple[Sequence[Tuple[str, Tensor]], float, float]], momentum: float):
        self.groups = [(list(named), lr, wd) for named, lr, wd in groups]
        self.momentum = momentum
        self.buffers: Dict[str, np.ndarray] = {}

    def step(self, scale: float = 1.0) -> None:
        for named, lr, wd in self.groups:
            for name, p in named:
                if p.grad is None:
                    continue
                g = p.grad
                if wd:
                    g = g + wd * p.data
                buf = self.buffers.get(name)
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.buffers[name] = buf
                p.data = (p.data - (lr * scale) * buf).astype(p.dtype)


# ------------------------------------------------------------------- training
@dataclass
class TrainState:
    params: Params
    buffers: Dict[str, np.ndarray]
    epoch: int
    rng: np.random.Generator
    metrics: List[MetricsRow] = field(default_factory=list)


def _shadow(params: Params, grads: bool, alpha_grads: bool) -> Params:
    """Fresh leaves that share storage with ``params``."""
    out = Params()
    for name, t in params.weights.items():
        out.weights[name] = Tensor(t.data, requires_grad=grads)
    for rid, sp in params.scales.items():
        out.scales[rid] = ScaleParam(
            Tensor(sp.alpha_h.data, requires_grad=alpha_grads),
            Tensor(sp.alpha_w.data, requires_grad=alpha_grads),
        )
    return out


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("DYNOPOOL_THREADS", "1")))
    except ValueError:
        return 1


def penalty_weight(spec: NetworkSpec, cfg: TrainConfig) -> float:
    """Coefficient on gmacs_loss in the training objective."""
    if not cfg.normalize_gmacs or not cfg.lam:
        return cfg.lam
    return cfg.lam / propagate(spec, initial_scales(spec, np.float64)).ledger.initial_total


def evaluate(spec: NetworkSpec, params: Params, data: Dataset, weight: float = 0.0, batch_size: int = 256) -> Tuple[float, float]:
    """(mean total loss, accuracy) of the current model on ``data``.

    ``weight`` multiplies gmacs_loss in the reported loss (see penalty_weight).
    """
    frozen = _shadow(params, grads=False, alpha_grads=False)
    penalty = weight * float(gmacs_loss(propagate(spec, frozen.scales).ledger).data) if weight else 0.0
    loss_sum, correct = 0.0, 0
    for start in range(0, len(data), batch_size):
        x = data.images[start : start + batch_size]
        y = data.labels[start : start + batch_size]
        logits = forward(spec, Tensor(x), frozen).logits
        loss_sum += float(softmax_cross_entropy(logits, y).data) * len(y)
        correct += int((logits.data.argmax(axis=1) == y).sum())
    return loss_sum / len(data) + penalty, correct / len(data)


def _snapshot(spec: NetworkSpec, params: Params, epoch: int, train_loss: float, train_acc: float, eval_acc: float) -> MetricsRow:
    res = propagate(spec, params.scales)
    return MetricsRow(epoch, train_loss, train_acc, eval_acc, res.ledger.current_gmacs(), params.ratios(), res.shapes)


def _shard_grads(spec, params, x, y, batch, alpha_grads):
    shadow = _shadow(params, grads=True, alpha_grads=alpha_grads)
    res = forward(spec, Tensor(x), shadow)
    task = softmax_cross_entropy(res.logits, y)
    (task * (len(y) / batch)).backward()
    grads = [t.grad for _, t in shadow.named_tensors()]
    correct = int((res.logits.data.argmax(axis=1) == y).sum())
    return float(task.data) * len(y), correct, grads


def train_step(spec: NetworkSpec, params: Params, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
               pool: Optional[ThreadPoolExecutor] = None, weight: Optional[float] = None) -> Tuple[float, int]:
    """Accumulate gradients of the total loss for one batch into ``params``.

    Returns (summed task loss over the batch, correct predictions). Shards
    are reduced in their fixed order, so results do not depend on threading.
    """
    alpha_grads = not cfg.freeze_alpha
    bounds = np.linspace(0, len(y), min(cfg.shards, len(y)) + 1).astype(int)
    jobs = [(x[a:b], y[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    if pool is not None and len(jobs) > 1:
        outs = list(pool.map(lambda j: _shard_grads(spec, params, j[0], j[1], len(y), alpha_grads), jobs))
    else:
        outs = [_shard_grads(spec, params, xs, ys, len(y), alpha_grads) for xs, ys in jobs]

    params.zero_grad()
    named = params.named_tensors()
    for _, _, grads in outs:
        for (_, t), g in zip(named, grads):
            if g is not None:
                t.grad = g.copy() if t.grad is None else t.grad + g

    loss = sum(o[0] for o in outs)
    weight = penalty_weight(spec, cfg) if weight is None else weight
    if weight:
        penalty = gmacs_loss(propagate(spec, params.scales).ledger) * weight
        if alpha_grads:
            penalty.backward()
        loss += float(penalty.data) * len(y)
    return loss, sum(o[1] for o in outs)


def make_optimizer(params: Params, cfg: TrainConfig) -> SGD:
    groups = [(params.weight_tensors(), cfg.lr_weights, cfg.weight_decay)]
    if not cfg.freeze_alpha:
        groups.append((params.alpha_tensors(), cfg.lr_alpha, 0.0))
    return SGD(groups, cfg.momentum)


def init_state(spec: NetworkSpec, cfg: TrainConfig) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    return TrainState(init_params(spec, rng), {}, 0, rng)


def train(
    spec: NetworkSpec,
    data: Dataset,
    cfg: TrainConfig,
    state: Optional[TrainState] = None,
    on_epoch: Optional[Callable[[TrainState], None]] = None,
) -> TrainState:
    """Train until ``cfg.epochs``; resumes from ``state`` when given.

    A metrics row is recorded for the initial model (epoch 0) and after
    every epoch. The returned state holds parameters, optimizer buffers,
    the generator and the full metrics history.
    """
    if data.shape != (spec.in_channels, *spec.input_size):
        raise ValueError(f"data shape {data.shape} does not match network input")
    train_set, eval_set = split(data, cfg.seed, cfg.eval_fraction)
    weight = penalty_weight(spec, cfg)
    if state is None:
        state = init_state(spec, cfg)
        loss, acc = evaluate(spec, state.params, train_set, weight)
        _, eval_acc = evaluate(spec, state.params, eval_set)
        state.metrics.append(_snapshot(spec, state.params, 0, loss, acc, eval_acc))
        if on_epoch:
            on_epoch(state)

    params = state.params
    opt = make_optimizer(params, cfg)
    opt.buffers = state.buffers
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    workers = min(_workers(), cfg.shards)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for epoch in range(state.epoch + 1, cfg.epochs + 1):
            order = state.rng.permutation(len(train_set))
            loss_sum, correct = 0.0, 0
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                x, y = train_set.images[idx], train_set.labels[idx]
                loss, hits = train_step(spec, params, x, y, cfg, pool, weight)
                if not math.isfinite(loss):
                    raise NumericalError(epoch, b, loss)
                step = (epoch - 1) * steps_per_epoch + b
                opt.step(lr_factor(step, total_steps, cfg.schedule))
                for sp in params.scales.values():
                    sp.clamp_(*cfg.alpha_clamp)
                loss_sum += loss
                correct += hits
            _, eval_acc = evaluate(spec, params, eval_set)
            row = _snapshot(spec, params, epoch, loss_sum / len(train_set), correct / len(train_set), eval_acc)
            state.metrics.append(row)
            state.epoch = epoch
            log.info("epoch %d loss %.4f acc %.3f eval %.3f gmacs %.3e", epoch, row.train_loss, row.train_acc, eval_acc, row.gmacs)
            if on_epoch:
                on_epoch(state)
    finally:
        if pool is not None:
            pool.shutdown()
    return state


# -------------------------------------------------------------------- metrics
def _fmt(v: float) -> str:
    return format(float(v), ".9g")


def metrics_to_csv(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        head = [row.epoch, _fmt(row.train_loss), _fmt(row.train_acc), _fmt(row.eval_acc), _fmt(row.gmacs)]
        for rid, (r_h, r_w) in row.ratios.items():
            writer.writerow(head + [rid, _fmt(r_h), _fmt(r_w), "", "", ""])
        for s in row.shapes:
            writer.writerow(head + ["", "", "", s.layer_id, s.h, s.w])
    return buf.getvalue()


def write_metrics(rows: Sequence[MetricsRow], path: Union[str, Path]) -> None:
    Path(path).write_text(metrics_to_csv(rows))


def read_metrics(path: Union[str, Path]) -> List[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"unexpected metrics header {reader.fieldnames}")
        rows: Dict[int, MetricsRow] = {}
        for rec in reader:
            epoch = int(rec["epoch"])
            row = rows.get(epoch)
            if row is None:
                row = rows[epoch] = MetricsRow(
                    epoch, float(rec["train_loss"]), float(rec["train_acc"]), float(rec["eval_acc"]),
                    float(rec["gmacs"]), {}, [],
                )
            if rec["resizer_id"]:
                row.ratios[rec["resizer_id"]] = (float(rec["r_h"]), float(rec["r_w"]))
            if rec["layer_id"]:
                row.shapes.append(LayerShape(rec["layer_id"], int(rec["h"]), int(rec["w"])))
    return [rows[e] for e in sorted(rows)]


# ---------------------------------------------------------------- checkpoints
CKPT_MAGIC = b"DYNC"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _rows_to_json(rows: Sequence[MetricsRow]) -> list:
    return [
        {**{k: v for k, v in asdict(r).items() if k != "shapes"},
         "shapes": [[s.layer_id, s.h, s.w] for s in r.shapes]}
        for r in rows
    ]


def _rows_from_json(items: list) -> List[MetricsRow]:
    return [
        MetricsRow(d["epoch"], d["train_loss"], d["train_acc"], d["eval_acc"], d["gmacs"],
                   {k: tuple(v) for k, v in d["ratios"].items()}, [LayerShape(*s) for s in d["shapes"]])
        for d in items
    ]


def checkpoint_save(state: TrainState, path: Union[str, Path]) -> None:
    """Versioned binary: header, JSON metadata, then named tensors."""
    meta = json.dumps({
        "epoch": state.epoch,
        "rng": state.rng.bit_generator.state,
        "metrics": _rows_to_json(state.metrics),
    }).encode()
    tensors = [(name, t.data) for name, t in state.params.named_tensors()]
    tensors += [(f"momentum/{name}", buf) for name, buf in state.buffers.items()]
    out = bytearray(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(meta)))
    out += meta
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        arr = np.asarray(arr, order="C")
        key = name.encode()
        out += struct.pack("<HBB", len(key), _CODES[arr.dtype], arr.ndim) + key
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype(_DTYPES[_CODES[arr.dtype]], copy=False).tobytes()
    Path(path).write_bytes(bytes(out))


def _read_tensors(raw: bytes, offset: int) -> Dict[str, np.ndarray]:
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        klen, code, ndim = struct.unpack_from("<HBB", raw, offset)
        offset += 4
        name = raw[offset : offset + klen].decode()
        offset += klen
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        dtype = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        out[name] = np.frombuffer(raw, dtype, size // dtype.itemsize, offset).reshape(shape).copy()
        offset += size
    return out


def _layer_of(name: str) -> str:
    if name.startswith("alpha."):
        return f"resizer {name.split('.')[1]}"
    return f"layer {name.rsplit('.', 1)[0]}"


def checkpoint_load(path: Union[str, Path], spec: NetworkSpec, seed: int = 0) -> TrainState:
    raw = Path(path).read_bytes()
    try:
        magic, version, meta_len = struct.unpack_from("<4sII", raw)
    except struct.error as exc:
        raise CheckpointError("file too short for a checkpoint header") from exc
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"magic: expected {CKPT_MAGIC!r}, got {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"version: expected {CKPT_VERSION}, got {version}")
    meta = json.loads(raw[12 : 12 + meta_len])
    stored = _read_tensors(raw, 12 + meta_len)

    params = init_params(spec, np.random.default_rng(seed))
    expected = params.named_tensors()
    stored_params = [k for k in stored if not k.startswith("momentum/")]
    for i, (name, t) in enumerate(expected):
        got = stored_params[i] if i < len(stored_params) else None
        if got != name:
            raise CheckpointError(f"{_layer_of(name)}: expected tensor {name!r}, checkpoint has {got!r}")
        if stored[name].shape != t.shape:
            raise CheckpointError(f"{_layer_of(name)}: {name} shape {stored[name].shape} != {t.shape}")
        t.data = stored[name].astype(t.dtype)
    if len(stored_params) > len(expected):
        extra = stored_params[len(expected)]
        raise CheckpointError(f"{_layer_of(extra)}: unexpected tensor {extra!r} in checkpoint")

    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    buffers = {k.split("/", 1)[1]: v for k, v in stored.items() if k.startswith("momentum/")}
    return TrainState(params, buffers, int(meta["epoch"]), rng, _rows_from_json(meta["metrics"]))
