"""Block importance (mean block difference) and greedy block retention."""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Sequence

from .nn_model import Model, blocks_of
from .tensor_core import ParameterVector, diff, l2_norm, param_count


@dataclass(frozen=True)
class ScoredBlock:
    block_name: str
    mbd: float
    size: int
    payload: ParameterVector | None = None


def mbd(block_old: ParameterVector, block_new: ParameterVector) -> float:
    """L2 norm of the block change divided by the block's parameter count."""
    return l2_norm(diff(block_old, block_new)) / param_count(block_old)


def retain(scored: Sequence[ScoredBlock], total_size: int, dropout_rate: float) -> list[ScoredBlock]:
    """Pop blocks by descending MBD, keeping each one that still fits the budget.

    The budget is ``(1 - dropout_rate) * total_size`` parameters.  A block that
    does not fit is skipped and later (smaller) blocks are still considered.
    Equal scores pop in input order.
    """
    if not 0.0 <= dropout_rate <= 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1], got {dropout_rate}")
    budget = (1.0 - dropout_rate) * total_size
    heap = [(-b.mbd, i, b) for i, b in enumerate(scored)]
    heapq.heapify(heap)
    kept = []
    used = 0
    while heap:
        _, _, block = heapq.heappop(heap)
        if used + block.size > budget:
            continue
        used += block.size
        kept.append(block)
    return kept


def score_blocks(global_model: Model, local_model: Model) -> list[ScoredBlock]:
    if global_model.spec != local_model.spec:
        raise ValueError("global and local models have different specs")
    scored = []
    for (name, old), (_, new) in zip(blocks_of(global_model), blocks_of(local_model)):
        scored.append(ScoredBlock(name, mbd(old, new), param_count(new), new))
    return scored


def select_blocks(global_model: Model, local_model: Model, dropout_rate: float) -> list[ScoredBlock]:
    """Blocks of ``local_model`` worth uploading, in pop (descending MBD) order."""
    scored = score_blocks(global_model, local_model)
    return retain(scored, param_count(local_model.params), dropout_rate)
