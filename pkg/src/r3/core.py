"""Core domain types: block-structured token sequences, run configuration,
per-block score ledgers and event transcripts.

Token ids are abstract non-negative integers; the engine never assumes a
tokenizer. A sequence is a prompt region followed by zero or more fixed-length
generation blocks, with one reserved id acting as the mask marker.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterator, Sequence


class R3Error(Exception):
    """Base class for all errors raised by this package."""


class StructuralError(R3Error):
    """Shape, index or precondition problem in caller-supplied data."""


class ContractViolation(R3Error):
    """A model (denoiser or PRM) broke its behavioral contract. Aborts the run."""


class ConfigError(R3Error):
    """Invalid configuration value or config file."""


class AdapterError(R3Error):
    """A remote model endpoint failed after exhausting retries."""


METRICS = ("product", "min")
POSITION_POLICIES = ("uniform", "prefix")


@dataclass(frozen=True)
class TokenSeq:
    """A prompt plus `n_blocks` generation blocks of `block_len` tokens each.

    Immutable: every operation returns a new instance. Block b occupies the
    half-open index range [prompt_len + b*block_len, prompt_len + (b+1)*block_len).
    """

    tokens: tuple[int, ...]
    prompt_len: int
    block_len: int
    mask_id: int

    def __post_init__(self) -> None:
        if self.prompt_len <= 0:
            raise StructuralError("prompt must be nonempty")
        if self.block_len < 1:
            raise StructuralError("block_len must be >= 1")
        gen = len(self.tokens) - self.prompt_len
        if gen < 0 or gen % self.block_len != 0:
            raise StructuralError(
                f"length {len(self.tokens)} != prompt_len {self.prompt_len} "
                f"+ k * block_len {self.block_len}"
            )
        for i, t in enumerate(self.tokens):
            if t < 0:
                raise StructuralError(f"negative token id {t} at position {i}")
            if t == self.mask_id and i < self.prompt_len:
                raise StructuralError(f"mask_id in prompt region at position {i}")

    @classmethod
    def from_prompt(cls, prompt: Sequence[int], block_len: int, mask_id: int) -> TokenSeq:
        return cls(tokens=tuple(prompt), prompt_len=len(prompt), block_len=block_len, mask_id=mask_id)

    @property
    def n_blocks(self) -> int:
        return (len(self.tokens) - self.prompt_len) // self.block_len

    def block_bounds(self, b: int) -> tuple[int, int]:
        """Half-open absolute index range of block b."""
        if not 0 <= b < self.n_blocks:
            raise StructuralError(f"block index {b} out of range [0, {self.n_blocks})")
        start = self.prompt_len + b * self.block_len
        return start, start + self.block_len

    def block_slice(self, b: int) -> list[int]:
        """The block_len tokens of block b."""
        start, stop = self.block_bounds(b)
        return list(self.tokens[start:stop])

    def append_block(self, block: Sequence[int]) -> TokenSeq:
        """Concatenate one fully generated block. The block must contain real
        vocabulary tokens only, never the mask marker."""
        if len(block) != self.block_len:
            raise StructuralError(f"block length {len(block)} != block_len {self.block_len}")
        if any(t == self.mask_id for t in block):
            raise ContractViolation("appended block contains mask_id")
        if any(t < 0 for t in block):
            raise StructuralError("appended block contains a negative token id")
        return replace(self, tokens=self.tokens + tuple(block))

    def append_masked_block(self) -> TokenSeq:
        """Append one fresh block consisting entirely of mask tokens (the
        starting state for block generation)."""
        return replace(self, tokens=self.tokens + (self.mask_id,) * self.block_len)

    def window_blocks(self, first: int, last: int) -> list[list[int]]:
        """Token content of blocks first..last inclusive."""
        return [self.block_slice(b) for b in range(first, last + 1)]

    def replace_window(self, first: int, blocks: Sequence[Sequence[int]]) -> TokenSeq:
        """Overwrite blocks first..first+len(blocks)-1 with new content."""
        last = first + len(blocks) - 1
        if not (0 <= first and last < self.n_blocks):
            raise StructuralError(f"window [{first}, {last}] not within {self.n_blocks} blocks")
        out = list(self.tokens)
        for i, blk in enumerate(blocks):
            if len(blk) != self.block_len:
                raise StructuralError("replacement block has wrong length")
            if any(t == self.mask_id for t in blk):
                raise ContractViolation("replacement block contains mask_id")
            start, stop = self.block_bounds(first + i)
            out[start:stop] = list(blk)
        return replace(self, tokens=tuple(out))

    def with_masks(self, positions: Sequence[int]) -> TokenSeq:
        """Set mask_id at the given absolute positions (generation region only)."""
        out = list(self.tokens)
        for p in positions:
            if not self.prompt_len <= p < len(out):
                raise StructuralError(f"mask position {p} outside generation region")
            out[p] = self.mask_id
        return replace(self, tokens=tuple(out))

    def truncate_blocks(self, n_blocks: int) -> TokenSeq:
        """Keep the prompt and the first n_blocks blocks."""
        if not 0 <= n_blocks <= self.n_blocks:
            raise StructuralError(f"cannot truncate to {n_blocks} blocks")
        return replace(self, tokens=self.tokens[: self.prompt_len + n_blocks * self.block_len])

    def context_before(self, b: int) -> list[int]:
        """Everything strictly before block b, prompt included."""
        start, _ = self.block_bounds(b)
        return list(self.tokens[:start])


@dataclass(frozen=True)
class R3Config:
    """All hyperparameters of one run.

    Defaults follow the reference operating point: 16 blocks of 32 tokens,
    window 8, threshold 0.8, 5 candidate samples, intensity 0.8, score mapping
    factor 10, 128 demasking steps, temperature 0.8.
    """

    n_total: int = 16
    block_len: int = 32
    window: int = 8
    tau_thresh: float = 0.8
    n_samples: int = 5
    beta_i: float = 0.8
    alpha_b: float = 10.0
    p_min: float = 0.01
    epsilon: float = 1e-8
    temperature: float = 0.8
    demask_steps: int = 128
    metric: str = "product"
    retain_original: bool = True
    position_policy: str = "uniform"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_total < 1:
            raise ConfigError("n_total must be >= 1")
        if self.block_len < 1:
            raise ConfigError("block_len must be >= 1")
        if not 1 <= self.window <= self.n_total:
            raise ConfigError("window must satisfy 1 <= window <= n_total")
        if not 0.0 <= self.tau_thresh <= 1.0:
            raise ConfigError("tau_thresh must be in [0, 1]")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if not 0.0 <= self.beta_i <= 1.0:
            raise ConfigError("beta_i must be in [0, 1] so the remask proportion fits the block")
        if self.alpha_b <= 0.0:
            raise ConfigError("alpha_b must be > 0")
        if not 0.0 <= self.p_min < 1.0:
            raise ConfigError("p_min must be in [0, 1)")
        if self.epsilon <= 0.0:
            raise ConfigError("epsilon must be > 0")
        if self.temperature < 0.0:
            raise ConfigError("temperature must be >= 0")
        if self.demask_steps < 1:
            raise ConfigError("demask_steps must be >= 1")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}")
        if self.position_policy not in POSITION_POLICIES:
            raise ConfigError(f"position_policy must be one of {POSITION_POLICIES}")
        if not 0 <= self.seed < (1 << 64):
            raise ConfigError("seed must be a 64-bit non-negative integer")

    @property
    def steps_per_block(self) -> int:
        """Per-block demasking steps: the sequence-level budget split evenly."""
        return max(1, self.demask_steps // self.n_total)


class ScoreLedger:
    """Per-block PRM scores for one batch item.

    One placeholder entry is appended per generated block and stays unfilled
    (None) until a review covers that block; a refinement that replaces a
    window overwrites its entries with the selected candidate's scores.
    """

    def __init__(self, n_total: int):
        self.n_total = n_total
        self.scores: list[float | None] = []

    def __len__(self) -> int:
        return len(self.scores)

    def add_placeholder(self) -> None:
        """Reserve the (unfilled) entry for the block just generated."""
        if len(self.scores) >= self.n_total:
            raise StructuralError(f"ledger already holds {self.n_total} entries")
        self.scores.append(None)

    def fill(self, first: int, scores: Sequence[float]) -> None:
        """Store scores for blocks first..first+len(scores)-1."""
        last = first + len(scores) - 1
        if not (0 <= first and last < len(self.scores)):
            raise StructuralError(f"ledger window [{first}, {last}] out of range")
        for i, s in enumerate(scores):
            self.scores[first + i] = float(s)

    def window(self, first: int, last: int) -> list[float]:
        out = []
        for b in range(first, last + 1):
            s = self.scores[b]
            if s is None:
                raise StructuralError(f"ledger entry {b} is unfilled")
            out.append(s)
        return out

    @property
    def unfilled(self) -> list[int]:
        return [b for b, s in enumerate(self.scores) if s is None]


EVENT_KINDS = (
    "Extend",
    "Review",
    "Trigger",
    "Remask",
    "Propose",
    "ScoreCandidates",
    "Select",
    "Retain",
)


@dataclass(frozen=True)
class TranscriptEvent:
    """One engine action: what happened, to which item, over which blocks."""

    event: str
    item: int
    block_range: tuple[int, int]
    payload: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.event not in EVENT_KINDS:
            raise StructuralError(f"unknown event kind {self.event!r}")

    def to_record(self, run_id: str) -> dict[str, Any]:
        return {
            "run_id": run_id,
            "item": self.item,
            "event": self.event,
            "block_range": list(self.block_range),
            "payload": self.payload,
        }


class Transcript:
    """Ordered event log for one batch item.

    An optional sink receives every event as it is recorded, so external
    writers hold a complete prefix of the log even if the run aborts midway.
    """

    def __init__(self, sink: Callable[[TranscriptEvent], None] | None = None):
        self.events: list[TranscriptEvent] = []
        self._sink = sink

    def record(
        self,
        event: str,
        item: int,
        block_range: tuple[int, int],
        payload: dict[str, Any] | None = None,
    ) -> TranscriptEvent:
        ev = TranscriptEvent(event=event, item=item, block_range=block_range, payload=payload or {})
        self.events.append(ev)
        if self._sink is not None:
            self._sink(ev)
        return ev

    def __iter__(self) -> Iterator[TranscriptEvent]:
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def to_jsonl(self, run_id: str) -> str:
        """Deterministic line-delimited serialization (one event per line)."""
        return "".join(
            json.dumps(ev.to_record(run_id), sort_keys=True, separators=(",", ":")) + "\n"
            for ev in self.events
        )
