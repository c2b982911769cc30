"""Analytic backpropagation cost of latent connections and its reconciliation.

The analytic model splits one step's backward FLOPs into a plug-in term
(weight updates of aligners, gates, positional K/V and connected-block LoRA,
plus the activation gradients inside the aligners), the activation gradient
through the output head, and an activation-gradient term proportional to the
number of connected blocks::

    T(N) = T_dw_aligners + T_dy_emb + (N / L) * T_dy_llm
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .tensorcore import FlopsCounters

PLUGIN_REGIONS = ("aligner", "gate", "other")
HEAD_REGIONS = ("head", "output_embedding")


class InfeasibleBudget(ValueError):
    pass


@dataclass(frozen=True)
class CostInputs:
    T_dw_aligners: float
    T_dy_emb: float
    T_dy_llm: float
    L: int
    N: int

    def __post_init__(self):
        if min(self.T_dw_aligners, self.T_dy_emb, self.T_dy_llm) < 0:
            raise ValueError("FLOPs terms must be non-negative")
        if not 1 <= self.N <= self.L:
            raise ValueError(f"N must lie in [1, {self.L}], got {self.N}")

    def with_n(self, N: int) -> "CostInputs":
        return replace(self, N=N)


def analytic_backprop_flops(inputs: CostInputs) -> float:
    return inputs.T_dw_aligners + inputs.T_dy_emb + inputs.N / inputs.L * inputs.T_dy_llm


def flops_ratio(inputs: CostInputs) -> tuple[float, float]:
    """``(exact, approx)`` cost ratio of connecting all L blocks versus N."""
    exact = analytic_backprop_flops(inputs.with_n(inputs.L)) / analytic_backprop_flops(inputs)
    return exact, inputs.L / inputs.N


def choose_n(budget: float, inputs: CostInputs) -> int:
    """Largest N whose analytic cost fits in ``budget`` (``inputs.N`` is ignored)."""
    best = None
    for n in range(1, inputs.L + 1):
        if analytic_backprop_flops(inputs.with_n(n)) <= budget:
            best = n
    if best is None:
        raise InfeasibleBudget(f"budget {budget:g} is below the N=1 cost "
                               f"{analytic_backprop_flops(inputs.with_n(1)):g}")
    return best


@dataclass(frozen=True)
class CostReport:
    N: int
    L: int
    analytic_backprop: float
    measured_backprop: int
    regions: dict = field(default_factory=dict)
    lora_dw: int = 0
    tolerance: float = 0.05

    @property
    def gap(self) -> float:
        return abs(self.analytic_backprop - self.measured_backprop) / self.measured_backprop

    @property
    def flagged(self) -> bool:
        return self.gap > self.tolerance

    def as_row(self) -> dict:
        row = {"N": self.N, "L": self.L, "analytic": round(self.analytic_backprop),
               "measured": self.measured_backprop, "gap": f"{self.gap:.6f}",
               "approx_ratio": f"{self.L / self.N:.6f}", "lora_dw": self.lora_dw}
        for tag, r in sorted(self.regions.items(), key=lambda kv: _region_key(kv[0])):
            row[f"{tag}.dy"] = r["backward_dy"]
            row[f"{tag}.dw"] = r["backward_dw"]
        return row


def _region_key(tag: str):
    """Blocks in numeric order, after the other regions."""
    if tag.startswith("block["):
        return (1, int(tag[6:-1]), "")
    return (0, 0, tag)


def _block_dw(snapshot: FlopsCounters) -> int:
    return sum(r.backward_dw for r in snapshot.blocks().values())


def cost_terms(snapshot: FlopsCounters, L: int, N: int) -> CostInputs:
    """Read the three terms off one measured step.

    ``T_dy_llm`` is the mean dy of the blocks that carried gradients, times
    ``L``; LoRA weight gradients are folded into the plug-in term.
    """
    blocks = {j: r for j, r in snapshot.blocks().items() if r.backward_dy > 0}
    if not blocks:
        raise ValueError("snapshot has no block activation gradients")
    per_block = sum(r.backward_dy for r in blocks.values()) / len(blocks)
    plugin = sum(snapshot.region(t).backward for t in PLUGIN_REGIONS) + _block_dw(snapshot)
    emb = sum(snapshot.region(t).backward for t in HEAD_REGIONS)
    return CostInputs(plugin, emb, per_block * L, L, N)


def calibrate(reference: FlopsCounters, L: int, N: int) -> CostInputs:
    """Cost inputs for N connected blocks from one reference step at N = L.

    Per-block dy and head dy come straight from the reference; the plug-in
    term keeps the reference's aligner/gate/positional cost and rescales the
    LoRA weight-gradient cost to ``N`` connected blocks.
    """
    full = cost_terms(reference, L, L)
    lora_per_block = _block_dw(reference) / L
    plugin = full.T_dw_aligners - _block_dw(reference) + lora_per_block * N
    return CostInputs(plugin, full.T_dy_emb, full.T_dy_llm, L, N)


def reconcile(measured: FlopsCounters, inputs: CostInputs, tolerance: float = 0.05) -> CostReport:
    if measured.backward == 0:
        raise ValueError("reconcile: snapshot holds no backward FLOPs")
    regions = {t: {"backward_dy": r.backward_dy, "backward_dw": r.backward_dw}
               for t, r in measured.by_region.items()}
    return CostReport(inputs.N, inputs.L, analytic_backprop_flops(inputs), measured.backward,
                      regions, _block_dw(measured), tolerance)


def reports_to_csv(reports: Sequence[CostReport], path: str | Path | None = None) -> str:
    rows = [r.as_row() for r in reports]
    cols: list[str] = []
    for row in rows:
        for k in row:
            if k not in cols:
                cols.append(k)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", restval=0)
    w.writeheader()
    w.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
