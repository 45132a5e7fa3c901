"""Finite-difference checks of every differentiable path.

All checks run the engine in float64 and compare analytic gradients with
central differences (step 1e-3). An element passes when
``|analytic - numeric| <= max(rtol * |numeric|, atol)``; the reported error
is ``|analytic - numeric| / max(|numeric|, atol / rtol)`` so a check passes
exactly when its error is at most ``rtol``.

Piecewise-smooth operators (relu, max, bilinear cell boundaries, clamps,
rounding) are only probed at points whose active piece is the same at
``x - h`` and ``x + h``; configurations straddling a kink are redrawn.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import functional as F
from .complexity import gmacs_loss
from .network import builtin, propagate
from .pool import ScaleParam, build_geometry, compute_output_size, resize
from .tensor import Tensor, matmul, max_over_axis, relu, softmax_cross_entropy

STEP = 1e-3
RTOL = 1e-2
ATOL = 1e-4
F64 = np.float64


@dataclass
class CheckResult:
    name: str
    max_error: float
    configs: int
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error <= RTOL)


def _err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.abs(numeric), ATOL / RTOL)
    return float(np.max(np.abs(analytic - numeric) / scale))


def compare(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    rng: np.random.Generator,
    probes: int = 8,
    signature: Optional[Callable[[], object]] = None,
) -> Optional[float]:
    """Max normalized error of d(sum fn())/d(inputs) on random probe entries.

    Returns None when a probe moves ``signature()`` (a kink was crossed).
    """
    for t in inputs:
        t.grad = None
    out = fn()
    out.sum().backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
    base_sig = signature() if signature else None

    worst = 0.0
    for t, grad in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(probes, flat.size), replace=False)
        numeric = np.empty(len(picks))
        for k, idx in enumerate(picks):
            orig = flat[idx]
            vals = []
            for sign in (1.0, -1.0):
                flat[idx] = orig + sign * STEP
                vals.append(float(fn().data.sum()))
                if signature and signature() != base_sig:
                    flat[idx] = orig
                    return None
            flat[idx] = orig
            numeric[k] = (vals[0] - vals[1]) / (2 * STEP)
        worst = max(worst, _err(grad.reshape(-1)[picks], numeric))
    return worst


def _run(name: str, trial: Callable[[np.random.Generator], Optional[float]], rng, configs: int) -> CheckResult:
    start = time.perf_counter()
    worst, done, attempts = 0.0, 0, 0
    while done < configs:
        attempts += 1
        if attempts > 20 * configs:
            raise RuntimeError(f"{name}: could not draw smooth configurations")
        err = trial(rng)
        if err is None:
            continue
        worst = max(worst, err)
        done += 1
    return CheckResult(name, worst, done, time.perf_counter() - start)


def _leaf(rng, shape, low=-1.0, high=1.0, margin=0.0) -> Tensor:
    x = rng.uniform(low, high, size=shape)
    if margin:
        x = np.where(x >= 0, x + margin, x - margin)
    return Tensor(x.astype(F64), requires_grad=True)


# ---------------------------------------------------------------- the checks
def _check_add_mul(rng):
    a, b, c = _leaf(rng, (3, 4)), _leaf(rng, (1, 4)), _leaf(rng, (3, 1))
    return compare(lambda: (a + b) * c - a * b / (c * c + 1.0), [a, b, c], rng)


def _check_matmul(rng):
    n, k, m = rng.integers(1, 5, size=3)
    a, b = _leaf(rng, (n, k)), _leaf(rng, (k, m))
    return compare(lambda: matmul(a, b), [a, b], rng)


def _check_relu(rng):
    x = _leaf(rng, (2, 3, 4), margin=5 * STEP)
    w = rng.uniform(-1, 1, size=x.shape)
    return compare(lambda: relu(x) * Tensor(w), [x], rng)


def _check_max(rng):
    x = _leaf(rng, (3, 4, 5))
    w = rng.uniform(0.5, 1.5, size=(3, 4))

    def sig():
        return np.argmax(x.data, axis=-1).tobytes()

    return compare(lambda: max_over_axis(x, -1) * Tensor(w), [x], rng, signature=sig)


def _check_xent(rng):
    batch, classes = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    logits = _leaf(rng, (batch, classes), -3, 3)
    labels = rng.integers(0, classes, size=batch)
    return compare(lambda: softmax_cross_entropy(logits, labels), [logits], rng)


def _check_conv(rng):
    b, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    h, w = rng.integers(3, 7, size=2)
    k = int(rng.choice([1, 3, 5]))
    x = _leaf(rng, (b, cin, h, w))
    wt = _leaf(rng, (cout, cin, k, k))
    bias = _leaf(rng, (cout,))
    mix = Tensor(rng.uniform(-1, 1, size=(b, cout, h, w)))
    return compare(lambda: F.conv2d(x, wt, bias, k // 2) * mix, [x, wt, bias], rng)


def _coords_signature(coords: Tensor, h: int, w: int):
    def sig():
        uh = F.to_pixel(coords.data[:, 0], h)
        uw = F.to_pixel(coords.data[:, 1], w)
        return (np.floor(uh).tobytes(), np.floor(uw).tobytes())

    return sig


def _check_bilinear_values(rng):
    h, w = rng.integers(1, 7, size=2)
    x = _leaf(rng, (2, 2, h, w))
    coords = Tensor(rng.uniform(-1.2, 1.2, size=(int(rng.integers(1, 10)), 2)))
    mix = Tensor(rng.uniform(-1, 1, size=(2, 2, coords.shape[0])))
    return compare(lambda: F.bilinear_sample(x, coords) * mix, [x], rng)


def _check_bilinear_coords(rng):
    h, w = rng.integers(2, 7, size=2)
    x = Tensor(rng.uniform(-1, 1, size=(2, 2, h, w)))
    coords = _leaf(rng, (int(rng.integers(1, 10)), 2), -1.1, 1.1)
    mix = Tensor(rng.uniform(-1, 1, size=(2, 2, coords.shape[0])))
    sig = _coords_signature(coords, h, w)
    return compare(lambda: F.bilinear_sample(x, coords) * mix, [coords], rng, signature=sig)


def _check_output_size(rng):
    n = int(rng.integers(1, 40))
    r = _leaf(rng, (), 0.05, 2.5)

    def sig():
        return bool(n * r.data > 1.5)

    # relaxed value is the continuous surrogate the STE differentiates
    return compare(lambda: compute_output_size(n, r, relaxed=True)[1], [r], rng, signature=sig)


def _random_scale(rng, low=0.3, high=2.0) -> ScaleParam:
    r_h, r_w = rng.uniform(low, high, size=2)
    return ScaleParam.from_ratio(float(r_h), float(r_w), dtype=F64)


def _pool_signature(x: Tensor, scale: ScaleParam):
    def sig():
        geom = build_geometry(x.shape[2], x.shape[3], scale, relaxed=True)
        coords = geom.query_coords().data
        uh = F.to_pixel(coords[:, 0], x.shape[2])
        uw = F.to_pixel(coords[:, 1], x.shape[3])
        samples = F.bilinear_sample(x.detach(), Tensor(coords)).data
        samples = samples.reshape(x.shape[0], x.shape[1], geom.h_out, geom.w_out, 4)
        return (geom.shape, np.floor(uh).tobytes(), np.floor(uw).tobytes(), np.argmax(samples, -1).tobytes())

    return sig


def _pool_fn(x: Tensor, scale: ScaleParam, mix: np.ndarray):
    def fn():
        out = resize(x, build_geometry(x.shape[2], x.shape[3], scale, relaxed=True))
        return out * Tensor(mix[..., : out.shape[2], : out.shape[3]])

    return fn


def _check_pool_alpha(rng):
    h, w = rng.integers(2, 11, size=2)
    x = Tensor(rng.uniform(-1, 1, size=(1, 2, h, w)))
    scale = _random_scale(rng)
    mix = rng.uniform(0.5, 1.5, size=(1, 2, 32, 32))
    return compare(_pool_fn(x, scale, mix), scale.parameters(), rng, signature=_pool_signature(x, scale))


def _check_pool_input(rng):
    h, w = rng.integers(2, 11, size=2)
    x = _leaf(rng, (1, 2, h, w))
    scale = _random_scale(rng)
    mix = rng.uniform(0.5, 1.5, size=(1, 2, 32, 32))
    return compare(_pool_fn(x, scale, mix), [x], rng, signature=_pool_signature(x, scale))


_GMACS_SPEC = builtin("tiny3", 1, 4, (16, 16))


def _check_gmacs(rng):
    scales = {rid: _random_scale(rng, 0.3, 1.2) for rid in _GMACS_SPEC.resizers()}
    leaves = [a for sp in scales.values() for a in sp.parameters()]

    # the raw loss is ~1e-4; scale it so the absolute floor is not vacuous
    def fn():
        return gmacs_loss(propagate(_GMACS_SPEC, scales, relaxed=True).ledger) * 1e4

    def sig():
        # which sizes sit on the 1.5 floor, and the frozen integer grid
        active, h, w = [], 16.0, 16.0
        for sp in scales.values():
            r_h, r_w = sp.ratio_values()
            active += [h * r_h > 1.5, w * r_w > 1.5]
            h, w = max(h * r_h, 1.5), max(w * r_w, 1.5)
        shapes = [(s.h, s.w) for s in propagate(_GMACS_SPEC, scales).shapes]
        return active, shapes

    return compare(fn, leaves, rng, signature=sig)


CHECKS: Dict[str, Callable] = {
    "add_mul_broadcast": _check_add_mul,
    "matmul": _check_matmul,
    "relu": _check_relu,
    "max_over_axis": _check_max,
    "softmax_cross_entropy": _check_xent,
    "conv2d": _check_conv,
    "bilinear_sample.values": _check_bilinear_values,
    "bilinear_sample.coords": _check_bilinear_coords,
    "output_size.surrogate": _check_output_size,
    "dynopool.alpha": _check_pool_alpha,
    "dynopool.input": _check_pool_input,
    "gmacs_loss.alpha": _check_gmacs,
}


def run_suite(seed: int = 0, configs: int = 50, names: Optional[Sequence[str]] = None) -> List[CheckResult]:
    results = []
    for i, (name, trial) in enumerate(CHECKS.items()):
        if names and name not in names:
            continue
        rng = np.random.default_rng([seed, i])
        results.append(_run(name, trial, rng, configs))
    return results


def format_report(results: Sequence[CheckResult]) -> str:
    lines = [f"{'check':<26}{'configs':>8}{'max rel err':>14}{'time s':>8}  status"]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name:<26}{r.configs:>8}{r.max_error:>14.3e}{r.seconds:>8.2f}  {status}")
    return "\n".join(lines)
