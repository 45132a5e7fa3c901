"""GMACs accounting and the complexity penalty.

The penalty weighs each layer's initial GMACs by how much its output area
has grown or shrunk since initialization:

    L_gmacs = sum_l (H_l^t * W_l^t) / (H_l^0 * W_l^0) * GMACs_l

The live areas are straight-through size products, so the penalty is
differentiable with respect to every scale parameter upstream of a layer.
Loss values are kept in float64; the counts are ~1e-4 and the identity
with the static count is checked to 1e-9.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .tensor import Tensor

GIGA = 1e9


def count_layer_gmacs(layer, out_h: int, out_w: int) -> float:
    """Multiply-accumulates of one layer for a single sample, in GMACs."""
    if layer.kind == "conv":
        return layer.in_channels * layer.out_channels * layer.kernel * layer.kernel * out_h * out_w / GIGA
    if layer.kind == "linear":
        return layer.in_features * layer.out_features / GIGA
    if layer.kind in ("relu", "dynopool", "flatten", "global_avg_pool", "maxpool", "avgpool"):
        return 0.0
    raise ValueError(f"cannot count GMACs for layer kind {layer.kind!r}")


@dataclass
class LedgerEntry:
    layer_id: str
    layer: object
    initial_gmacs: float
    initial_area: int
    h: int
    w: int
    live_area: Optional[Tensor] = None  # None when the area cannot change

    @property
    def area(self) -> int:
        return self.h * self.w

    @property
    def weight(self) -> float:
        """Forward value of w_l = live area / initial area."""
        return self.area / self.initial_area


@dataclass
class GmacsLedger:
    entries: List[LedgerEntry] = field(default_factory=list)

    def add(self, entry: LedgerEntry) -> None:
        if entry.initial_gmacs < 0 or entry.initial_area < 1:
            raise ValueError(f"invalid ledger entry for {entry.layer_id}")
        self.entries.append(entry)

    @property
    def initial_total(self) -> float:
        return sum(e.initial_gmacs for e in self.entries)

    def current_gmacs(self) -> float:
        """Recount GMACs at the current discrete shapes."""
        return sum(count_layer_gmacs(e.layer, e.h, e.w) for e in self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def gmacs_loss(ledger: GmacsLedger) -> Tensor:
    total = Tensor(np.zeros((), dtype=np.float64))
    for e in ledger.entries:
        per_area = np.asarray(e.initial_gmacs / e.initial_area, dtype=np.float64)
        if e.live_area is None:
            total = total + Tensor(per_area * e.area)
        else:
            total = total + e.live_area * Tensor(per_area)
    return total


def total_loss(task: Tensor, gmacs: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    if lam == 0:
        return task
    return task + gmacs * lam
