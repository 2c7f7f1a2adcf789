"""Score-to-remask mapping: turn window PRM scores into per-block remask
probabilities, token counts, and concrete mask positions.

The mapping runs in three stages:

1. quality value     q = exp(-alpha * score)          (lower score -> higher q)
2. window min-max    P = p_min + (1 - p_min) * (q - min q) / (max q - min q + eps)
3. token count       round_half_up(beta * P * block_len)

so within a reviewed window the worst block is remasked almost entirely and
the best block gets exactly the floor probability p_min. A window whose scores
are all (numerically) equal carries no ranking information; it is remasked at
full probability when the shared score sits below the refinement threshold and
at p_min otherwise.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

from .core import StructuralError, TokenSeq
from .rng import RngStream


def quality_value(score: float, alpha_b: float) -> float:
    """Exponential-decay quality value q = exp(-alpha_b * score).

    Strictly decreasing in the score; alpha_b controls how sharply higher
    scores are pushed toward zero.
    """
    if not 0.0 <= score <= 1.0:
        raise StructuralError(f"score {score} outside [0, 1]")
    if alpha_b <= 0.0:
        raise StructuralError("alpha_b must be > 0")
    return math.exp(-alpha_b * score)


def remask_probabilities(
    scores: Sequence[float],
    alpha_b: float,
    p_min: float,
    epsilon: float,
    tau_thresh: float,
) -> list[float]:
    """Map window scores to remask probabilities in [p_min, 1], order-reversing.

    Degenerate window (quality range below epsilon, i.e. all scores equal):
    the min-max form would yield p_min everywhere, which cannot drive any
    refinement, so every block gets probability 1.0 when the shared score is
    below tau_thresh and p_min otherwise.
    """
    if not scores:
        raise StructuralError("empty window")
    q = [quality_value(s, alpha_b) for s in scores]
    q_min, q_max = min(q), max(q)
    if q_max - q_min < epsilon:
        fill = 1.0 if scores[0] < tau_thresh else p_min
        return [fill] * len(scores)
    return [p_min + (1.0 - p_min) * (qi - q_min) / (q_max - q_min + epsilon) for qi in q]


def remask_token_count(p_r: float, beta_i: float, block_len: int) -> int:
    """Number of tokens to remask: round_half_up(beta_i * p_r * block_len),
    clamped to [0, block_len]. No forced minimum of one token."""
    if not 0.0 <= p_r <= 1.0:
        raise StructuralError(f"remask probability {p_r} outside [0, 1]")
    if not 0.0 <= beta_i <= 1.0:
        raise StructuralError(f"beta_i {beta_i} outside [0, 1]")
    count = math.floor(beta_i * p_r * block_len + 0.5)
    return max(0, min(block_len, count))


def select_positions(
    block: Sequence[int],
    count: int,
    policy: str,
    rng: RngStream,
) -> frozenset[int]:
    """Choose `count` distinct in-block offsets to mask.

    uniform: drawn without replacement from the supplied stream.
    prefix:  the first `count` offsets; deterministic, for golden tests.
    """
    block_len = len(block)
    if not 0 <= count <= block_len:
        raise StructuralError(f"count {count} outside [0, {block_len}]")
    if policy == "uniform":
        picked = rng.gen.choice(block_len, size=count, replace=False)
        return frozenset(int(p) for p in picked)
    if policy == "prefix":
        return frozenset(range(count))
    raise StructuralError(f"unknown position policy {policy!r}")


@dataclass(frozen=True)
class BlockRemask:
    """Remask decision for one block of a window."""

    score: float
    quality: float
    probability: float
    token_count: int
    positions: tuple[int, ...]  # sorted in-block offsets

    def __post_init__(self) -> None:
        if len(self.positions) != self.token_count:
            raise StructuralError("positions do not match token_count")
        if any(not 0 <= p for p in self.positions):
            raise StructuralError("negative in-block offset")


@dataclass(frozen=True)
class WindowRemaskPlan:
    """Per-block remask decisions for one reviewed window."""

    blocks: tuple[BlockRemask, ...]

    @property
    def total_masks(self) -> int:
        return sum(b.token_count for b in self.blocks)


def build_remask_plan(
    scores: Sequence[float],
    block_len: int,
    alpha_b: float,
    beta_i: float,
    p_min: float,
    epsilon: float,
    tau_thresh: float,
    policy: str,
    rng: RngStream,
) -> WindowRemaskPlan:
    """Compose the full score -> positions pipeline for one window.

    Probabilities depend only on the scores; the position draw consumes the
    supplied stream, so independent plans for the same window need fresh
    streams.
    """
    probs = remask_probabilities(scores, alpha_b, p_min, epsilon, tau_thresh)
    blocks = []
    for s, p in zip(scores, probs):
        count = remask_token_count(p, beta_i, block_len)
        positions = select_positions(range(block_len), count, policy, rng)
        blocks.append(
            BlockRemask(
                score=float(s),
                quality=quality_value(s, alpha_b),
                probability=p,
                token_count=count,
                positions=tuple(sorted(positions)),
            )
        )
    return WindowRemaskPlan(blocks=tuple(blocks))


def apply_window_mask(seq: TokenSeq, plan: WindowRemaskPlan, window_start: int) -> TokenSeq:
    """Write mask tokens at exactly the planned positions of the window that
    begins at block index `window_start`. All other positions are untouched."""
    last = window_start + len(plan.blocks) - 1
    if not (0 <= window_start and last < seq.n_blocks):
        raise StructuralError(
            f"plan window [{window_start}, {last}] misaligned with {seq.n_blocks} blocks"
        )
    absolute: list[int] = []
    for i, blk in enumerate(plan.blocks):
        start, stop = seq.block_bounds(window_start + i)
        for off in blk.positions:
            if off >= seq.block_len:
                raise StructuralError(f"offset {off} outside block of length {seq.block_len}")
            absolute.append(start + off)
    return seq.with_masks(absolute)
