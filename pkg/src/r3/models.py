"""Behavioral contracts for the two pluggable models (masked-infilling
denoiser and process reward scorer), plus the call accountant that counts
every invocation.

The engine never touches a model directly: it goes through `denoise_region`
and `score_blocks`, which enforce the contracts and keep the counters honest.
A violation aborts the run rather than being silently repaired, so buggy
adapters cannot masquerade as working ones.
"""

from __future__ import annotations

import abc
import threading
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .core import ContractViolation, StructuralError, TokenSeq
from .rng import RngStream


class Denoiser(abc.ABC):
    """Masked-infilling model: fill the mask tokens of an editable region.

    Contract:
      * positions outside `editable` come back bit-identical;
      * every mask token inside `editable` is replaced by a vocabulary token.

    `parallel_safe` declares whether the instance may be invoked from several
    batch items concurrently; the engine serializes calls when it is False.
    """

    parallel_safe: bool = True

    @abc.abstractmethod
    def denoise(
        self,
        seq: TokenSeq,
        editable: frozenset[int],
        temperature: float,
        steps: int,
        rng: RngStream,
    ) -> TokenSeq:
        raise NotImplementedError


class ProcessReward(abc.ABC):
    """Block quality scorer: score(context, block) in [0, 1], higher is better.

    Must be deterministic given (context, block, rng stream); stochastic
    scorers draw their noise from the supplied stream only.
    """

    parallel_safe: bool = True

    @abc.abstractmethod
    def score(self, context: Sequence[int], block: Sequence[int], rng: RngStream) -> float:
        raise NotImplementedError

    def score_batch(self, requests: Sequence[ScoreRequest]) -> list[float]:
        """Score many (context, block) pairs. Default: loop over score().

        Adapters that can submit one wire request per batch override this.
        """
        return [self.score(r.context, r.block, r.rng) for r in requests]


class ConstantProcessReward(ProcessReward):
    """Returns one fixed score for every block. Handy for forcing the
    refinement trigger always-on (value < threshold) or always-off."""

    def __init__(self, value: float):
        self.value = float(value)

    def score(self, context: Sequence[int], block: Sequence[int], rng: RngStream) -> float:
        return self.value


@dataclass(frozen=True)
class ScoreRequest:
    """One (context, block) pair queued for scoring, with its noise stream."""

    context: tuple[int, ...]
    block: tuple[int, ...]
    rng: RngStream


class CallAccountant:
    """Monotone counters for model usage.

    Two PRM counters are kept deliberately distinct: `batched_prm_invocations`
    counts submitted scoring batches (one per review, however many pairs it
    holds) while `block_scorings` counts individual (context, block) pairs.
    Conflating the two makes efficiency comparisons meaningless.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.batched_prm_invocations = 0
        self.block_scorings = 0
        self.denoiser_invocations = 0
        self.denoiser_token_updates = 0

    def record_prm_batch(self, n_pairs: int) -> None:
        if n_pairs < 1:
            raise StructuralError("a PRM batch must score at least one pair")
        with self._lock:
            self.batched_prm_invocations += 1
            self.block_scorings += n_pairs

    def record_denoise(self, n_token_updates: int) -> None:
        with self._lock:
            self.denoiser_invocations += 1
            self.denoiser_token_updates += n_token_updates

    def as_dict(self) -> dict[str, int]:
        with self._lock:
            return {
                "batched_prm_invocations": self.batched_prm_invocations,
                "block_scorings": self.block_scorings,
                "denoiser_invocations": self.denoiser_invocations,
                "denoiser_token_updates": self.denoiser_token_updates,
            }

    def add(self, other: CallAccountant) -> None:
        snap = other.as_dict()
        with self._lock:
            self.batched_prm_invocations += snap["batched_prm_invocations"]
            self.block_scorings += snap["block_scorings"]
            self.denoiser_invocations += snap["denoiser_invocations"]
            self.denoiser_token_updates += snap["denoiser_token_updates"]


def _default_streams(n: int) -> list[RngStream]:
    # Fixed fallback streams for direct calls outside the engine; the engine
    # always derives per-(item, block, phase) streams itself.
    return [RngStream(key=f"adhoc.{i}", gen=np.random.default_rng([0, i])) for i in range(n)]


def score_blocks(
    prm: ProcessReward,
    items: Sequence[tuple[Sequence[int], Sequence[int]]],
    acct: CallAccountant,
    rngs: Sequence[RngStream] | None = None,
) -> list[float]:
    """Submit one batched scoring request for the given (context, block) pairs.

    Counts one batched invocation and len(items) block scorings. Any score
    outside [0, 1] is a contract violation and aborts the run.
    """
    if not items:
        return []
    if rngs is None:
        rngs = _default_streams(len(items))
    if len(rngs) != len(items):
        raise StructuralError("rngs must align with items")
    requests = [
        ScoreRequest(context=tuple(ctx), block=tuple(blk), rng=rng)
        for (ctx, blk), rng in zip(items, rngs)
    ]
    scores = prm.score_batch(requests)
    acct.record_prm_batch(len(items))
    if len(scores) != len(items):
        raise ContractViolation(f"PRM returned {len(scores)} scores for {len(items)} pairs")
    for i, s in enumerate(scores):
        if not 0.0 <= s <= 1.0:
            raise ContractViolation(f"PRM score {s!r} for pair {i} outside [0, 1]")
    return [float(s) for s in scores]


def denoise_region(
    dn: Denoiser,
    seq: TokenSeq,
    editable: frozenset[int],
    temperature: float,
    steps: int,
    rng: RngStream,
    acct: CallAccountant,
) -> TokenSeq:
    """Invoke the denoiser on `editable` and verify the infilling contract.

    Precondition: every mask token in `seq` lies inside `editable`. After the
    call, no mask remains in the editable region and everything outside it is
    bit-identical. Counts one invocation plus the number of changed tokens.
    """
    n = len(seq.tokens)
    for p in editable:
        if not 0 <= p < n:
            raise StructuralError(f"editable position {p} out of range")
        if p < seq.prompt_len:
            raise StructuralError(f"editable position {p} inside prompt region")
    for p, t in enumerate(seq.tokens):
        if t == seq.mask_id and p not in editable:
            raise StructuralError(f"mask at position {p} outside editable region")

    out = dn.denoise(seq, editable, temperature, steps, rng)

    if len(out.tokens) != n:
        raise ContractViolation(f"denoiser changed sequence length {n} -> {len(out.tokens)}")
    if (out.prompt_len, out.block_len, out.mask_id) != (seq.prompt_len, seq.block_len, seq.mask_id):
        raise ContractViolation("denoiser changed sequence structure")
    changed = 0
    for p in range(n):
        if p in editable:
            if out.tokens[p] == seq.mask_id:
                raise ContractViolation(f"mask left unfilled at editable position {p}")
            if out.tokens[p] != seq.tokens[p]:
                changed += 1
        elif out.tokens[p] != seq.tokens[p]:
            raise ContractViolation(f"denoiser altered non-editable position {p}")
    acct.record_denoise(changed)
    return out
