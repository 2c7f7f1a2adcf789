"""Synthetic arithmetic-chain task with oracle models.

A task is a chain of n_total arithmetic steps over a bounded integer value;
block b of a correct generation renders the b-th intermediate value as
fixed-width digits padded to exactly block_len tokens. The oracle denoiser
fills masked value tokens from the true chain with a configurable per-block
error rate, and the oracle scorer rates a block high exactly when it decodes
to the expected value. Both satisfy the pluggable model contracts, which makes
the full review/remask/refine loop checkable against closed-form probabilities
at desk scale.

Vocabulary: ids 0-9 are digits, PAD_ID fills the rest of a block, and the mask
marker is the maximum vocabulary id plus one.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field, replace

from .core import R3Config, StructuralError, TokenSeq
from .models import Denoiser, ProcessReward
from .rng import RngStream, derive_stream

PAD_ID = 10
MASK_ID = 11  # max vocabulary id + 1

OP_KINDS = ("add", "sub", "mul")

DEFAULT_DIGIT_WIDTH = 6

_MAKE_TASK_RETRIES = 200


@dataclass(frozen=True)
class ToyParams:
    """Knobs of the synthetic world, shared by task generation and oracles."""

    p_err: float = 0.3
    hi: float = 0.95
    lo: float = 0.1
    noise_sigma: float = 0.05
    prm_mode: str = "exact"  # exact | noisy
    context_mode: str = "truth"  # truth | contextual
    digit_width: int = DEFAULT_DIGIT_WIDTH

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_err <= 1.0:
            raise StructuralError("p_err must be in [0, 1]")
        if not 0.0 <= self.lo <= 1.0 or not 0.0 <= self.hi <= 1.0:
            raise StructuralError("hi/lo must be in [0, 1]")
        if self.prm_mode not in ("exact", "noisy"):
            raise StructuralError("prm_mode must be 'exact' or 'noisy'")
        if self.context_mode not in ("truth", "contextual"):
            raise StructuralError("context_mode must be 'truth' or 'contextual'")
        if self.digit_width < 1:
            raise StructuralError("digit_width must be >= 1")


@dataclass(frozen=True)
class ChainTask:
    """One deterministic arithmetic chain: start value, per-block ops, truth."""

    seed: int
    start_value: int
    ops: tuple[tuple[str, int], ...]
    truth: tuple[int, ...]
    block_len: int
    digit_width: int

    @property
    def value_limit(self) -> int:
        return 10**self.digit_width

    @property
    def mask_id(self) -> int:
        return MASK_ID

    def render_value(self, value: int) -> list[int]:
        """Fixed-width token encoding: digit tokens then padding, exactly
        block_len tokens."""
        if not 0 <= value < self.value_limit:
            raise StructuralError(f"value {value} outside [0, {self.value_limit})")
        digits = [int(c) for c in str(value).zfill(self.digit_width)]
        return digits + [PAD_ID] * (self.block_len - self.digit_width)

    def decode_block(self, tokens: Sequence[int]) -> int | None:
        """Inverse of render_value; None when the block is not well-formed."""
        if len(tokens) != self.block_len:
            return None
        digits = tokens[: self.digit_width]
        if any(not 0 <= t <= 9 for t in digits):
            return None
        if any(t != PAD_ID for t in tokens[self.digit_width :]):
            return None
        return int("".join(str(t) for t in digits))

    def prompt(self) -> list[int]:
        """The prompt encodes the start value, one block wide."""
        return self.render_value(self.start_value)

    def value_offsets(self) -> range:
        """In-block offsets that carry the value (the digit positions)."""
        return range(self.digit_width)


def apply_op(op: tuple[str, int], value: int) -> int:
    kind, operand = op
    if kind == "add":
        return value + operand
    if kind == "sub":
        return value - operand
    if kind == "mul":
        return value * operand
    raise StructuralError(f"unknown op kind {kind!r}")


def make_task(seed: int, cfg: R3Config, params: ToyParams | None = None) -> ChainTask:
    """Deterministically generate a chain task from the seed.

    Each step draws an op whose result stays within the digit width; an
    out-of-range draw is retried with fresh constants, and persistent overflow
    is a structural error.
    """
    params = params or ToyParams()
    width = params.digit_width
    if width > cfg.block_len:
        raise StructuralError(f"digit_width {width} exceeds block_len {cfg.block_len}")
    limit = 10**width
    gen = derive_stream(seed, 0, 0, "task").gen
    start = int(gen.integers(limit // 10, limit))
    ops: list[tuple[str, int]] = []
    truth: list[int] = []
    value = start
    add_cap = max(2, limit // 100)
    for _ in range(cfg.n_total):
        for attempt in range(_MAKE_TASK_RETRIES):
            kind = OP_KINDS[int(gen.integers(0, len(OP_KINDS)))]
            if kind == "mul":
                operand = int(gen.integers(2, 4))
            else:
                operand = int(gen.integers(1, add_cap))
            nxt = apply_op((kind, operand), value)
            if 0 <= nxt < limit:
                break
        else:
            raise StructuralError(f"could not keep chain within {width} digits")
        ops.append((kind, operand))
        truth.append(nxt)
        value = nxt
    return ChainTask(
        seed=seed,
        start_value=start,
        ops=tuple(ops),
        truth=tuple(truth),
        block_len=cfg.block_len,
        digit_width=width,
    )


class NoisyOracleDenoiser(Denoiser):
    """Oracle infilling model over a chain task.

    Whenever any value-bearing (digit) token of a block is masked, the whole
    block value is redrawn: the true chain value with probability 1 - p_err,
    otherwise a uniformly chosen wrong value of the same digit width. Only the
    masked positions are written, so a partially masked block keeps its
    surviving digits; masked padding positions are refilled with padding.
    This keeps per-block correctness analytically computable.
    """

    def __init__(self, task: ChainTask, p_err: float):
        if not 0.0 <= p_err <= 1.0:
            raise StructuralError("p_err must be in [0, 1]")
        self.task = task
        self.p_err = p_err

    def _draw_value(self, b: int, gen) -> int:
        true_value = self.task.truth[b]
        if gen.random() < self.p_err:
            wrong = int(gen.integers(0, self.task.value_limit - 1))
            if wrong >= true_value:
                wrong += 1
            return wrong
        return true_value

    def denoise(
        self,
        seq: TokenSeq,
        editable: frozenset[int],
        temperature: float,
        steps: int,
        rng: RngStream,
    ) -> TokenSeq:
        task = self.task
        out = list(seq.tokens)
        digit_offsets = set(task.value_offsets())
        for b in range(seq.n_blocks):
            start, stop = seq.block_bounds(b)
            masked = [p for p in range(start, stop) if p in editable and out[p] == seq.mask_id]
            if not masked:
                continue
            if b >= len(task.truth):
                raise StructuralError(f"block {b} beyond the task's {len(task.truth)} steps")
            masked_digits = [p for p in masked if (p - start) in digit_offsets]
            if masked_digits:
                rendered = task.render_value(self._draw_value(b, rng.gen))
                for p in masked_digits:
                    out[p] = rendered[p - start]
            for p in masked:
                if (p - start) not in digit_offsets:
                    out[p] = PAD_ID
        return replace(seq, tokens=tuple(out))


class OracleProcessReward(ProcessReward):
    """Oracle scorer: hi when the block decodes to the expected chain value,
    lo otherwise (undecodable blocks score lo).

    In truth mode the expected value comes from the task definition; in
    contextual mode it is recomputed from the previous rendered block, so an
    earlier error makes its (possibly innocent) successor look wrong too.
    Noisy mode adds zero-mean Gaussian noise clipped back into [0, 1].
    """

    def __init__(self, task: ChainTask, params: ToyParams):
        self.task = task
        self.params = params

    def _block_index(self, context: Sequence[int]) -> int:
        task = self.task
        gen_len = len(context) - task.block_len  # prompt is one block wide
        if gen_len < 0 or gen_len % task.block_len != 0:
            raise StructuralError(f"context length {len(context)} does not align with blocks")
        b = gen_len // task.block_len
        if b >= len(task.truth):
            raise StructuralError(f"block {b} beyond the task's {len(task.truth)} steps")
        return b

    def _expected_value(self, b: int, context: Sequence[int]) -> int | None:
        if self.params.context_mode == "truth":
            return self.task.truth[b]
        prev = self.task.decode_block(list(context[-self.task.block_len :]))
        if prev is None:
            return None
        return apply_op(self.task.ops[b], prev)

    def score(self, context: Sequence[int], block: Sequence[int], rng: RngStream) -> float:
        b = self._block_index(context)
        expected = self._expected_value(b, context)
        got = self.task.decode_block(list(block))
        base = self.params.hi if (expected is not None and got == expected) else self.params.lo
        if self.params.prm_mode == "noisy":
            base = float(min(1.0, max(0.0, base + rng.gen.normal(0.0, self.params.noise_sigma))))
        return base


@dataclass
class GradeReport:
    """Per-block and overall correctness of a finished sequence."""

    per_block: list[bool]
    overall: bool
    undecodable: list[int] = field(default_factory=list)

    @property
    def all_blocks_correct(self) -> bool:
        return all(self.per_block)


def grade(seq: TokenSeq, task: ChainTask) -> GradeReport:
    """Block b is correct iff it decodes to the b-th chain value; the run is
    correct overall iff the final block is (final-answer convention).
    Undecodable blocks count as incorrect and are flagged, never fatal."""
    if seq.n_blocks != len(task.truth):
        raise StructuralError(f"sequence has {seq.n_blocks} blocks, task has {len(task.truth)}")
    per_block: list[bool] = []
    undecodable: list[int] = []
    for b in range(seq.n_blocks):
        got = task.decode_block(seq.block_slice(b))
        if got is None:
            undecodable.append(b)
        per_block.append(got == task.truth[b])
    return GradeReport(per_block=per_block, overall=per_block[-1], undecodable=undecodable)


def make_models(
    task: ChainTask, params: ToyParams
) -> tuple[NoisyOracleDenoiser, OracleProcessReward]:
    return NoisyOracleDenoiser(task, params.p_err), OracleProcessReward(task, params)
