"""The block-wise generate / review / refine loop.

One run extends the sequence block by block. After every `window`-th block
(and after the final block) the most recent window is scored in a single
batched PRM submission; any batch item whose minimum window score falls below
the threshold gets a refinement cycle: draw remask plans, re-denoise the
masked tokens into candidate windows, score all candidates in one more batched
submission, and keep the best window under the configured metric.

Everything stochastic draws from streams keyed by (item, block, phase), so a
run is a pure function of (seed, config, models).
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

from .core import (
    R3Config,
    ScoreLedger,
    StructuralError,
    TokenSeq,
    Transcript,
    TranscriptEvent,
)
from .models import CallAccountant, Denoiser, ProcessReward, denoise_region, score_blocks
from .remasking import WindowRemaskPlan, apply_window_mask, build_remask_plan
from .rng import derive_stream

EventSink = Callable[[TranscriptEvent], None]


@dataclass(frozen=True)
class WindowRef:
    """The inclusive block range [first, last] reviewed together."""

    first: int
    last: int

    def __post_init__(self) -> None:
        if not 0 <= self.first <= self.last:
            raise StructuralError(f"bad window [{self.first}, {self.last}]")

    @classmethod
    def ending_at(cls, j: int, window: int) -> WindowRef:
        """The last `window` blocks up to and including block j."""
        return cls(first=max(0, j - window + 1), last=j)

    @property
    def width(self) -> int:
        return self.last - self.first + 1

    def blocks(self) -> range:
        return range(self.first, self.last + 1)

    def as_range(self) -> tuple[int, int]:
        return (self.first, self.last)


def is_review_point(j: int, cfg: R3Config) -> bool:
    """Reviews fire every `window` blocks and always after the final block."""
    return (j + 1) % cfg.window == 0 or j == cfg.n_total - 1


def needs_refinement(scores: Sequence[float], tau_thresh: float) -> bool:
    """Trigger iff the window's minimum score is strictly below the threshold."""
    if not scores:
        raise StructuralError("empty window scores")
    return min(scores) < tau_thresh


def metric_value(scores: Sequence[float], metric: str) -> float:
    """Window aggregate used to rank candidates."""
    if not scores:
        raise StructuralError("empty score list")
    if metric == "product":
        return math.prod(scores)
    if metric == "min":
        return min(scores)
    raise StructuralError(f"unknown metric {metric!r}")


@dataclass
class Candidate:
    """One refined window proposal: tokens per block, its remask plan, and
    (after scoring) per-block scores."""

    blocks: list[list[int]]
    plan: WindowRemaskPlan
    scores: list[float] | None = None


@dataclass
class CandidateSet:
    """All proposals for one (item, window) refinement."""

    item: int
    window: WindowRef
    prefix: TokenSeq  # the item's sequence as it stood when proposing
    candidates: list[Candidate] = field(default_factory=list)

    @property
    def scored(self) -> bool:
        return all(c.scores is not None for c in self.candidates)


@dataclass(frozen=True)
class Selection:
    """Outcome of ranking candidates against the (optionally retained)
    original window. chosen is None when the original wins."""

    chosen: int | None
    metrics: tuple[float, ...]
    original_metric: float | None

    @property
    def winner_metric(self) -> float:
        if self.chosen is None:
            assert self.original_metric is not None
            return self.original_metric
        return self.metrics[self.chosen]


@dataclass
class ItemState:
    """Mutable per-item run state."""

    index: int
    seq: TokenSeq
    ledger: ScoreLedger
    transcript: Transcript


@dataclass
class ItemResult:
    seq: TokenSeq
    ledger: ScoreLedger
    transcript: Transcript


@dataclass
class R3Result:
    items: list[ItemResult]
    accountant: CallAccountant

    @property
    def seq(self) -> TokenSeq:
        """Convenience accessor for single-item runs."""
        if len(self.items) != 1:
            raise StructuralError("result holds more than one item; index explicitly")
        return self.items[0].seq


def extend_block(
    state: ItemState,
    j: int,
    dn: Denoiser,
    cfg: R3Config,
    acct: CallAccountant,
    sample: int = 0,
) -> None:
    """Append one fresh fully-masked block and denoise it in place.

    `sample` selects the random stream, so repeated draws of the same block
    (best-of-N style) get independent yet reproducible streams; sample 0 is
    the canonical draw shared by every method.
    """
    if state.seq.n_blocks != j:
        raise StructuralError(f"state has {state.seq.n_blocks} blocks, expected {j}")
    masked = state.seq.append_masked_block()
    start, stop = masked.block_bounds(j)
    rng = derive_stream(cfg.seed, state.index, j, "extend", sample)
    out = denoise_region(
        dn, masked, frozenset(range(start, stop)), cfg.temperature, cfg.steps_per_block, rng, acct
    )
    state.seq = out
    state.ledger.add_placeholder()
    state.transcript.record(
        "Extend", state.index, (j, j), {"tokens": out.block_slice(j), "sample": sample}
    )


def review_window(
    states: Sequence[ItemState],
    j: int,
    prm: ProcessReward,
    cfg: R3Config,
    acct: CallAccountant,
) -> list[list[float]]:
    """Score the window ending at block j for every batch item in one batched
    PRM submission; fill ledgers and emit one Review event per item."""
    win = WindowRef.ending_at(j, cfg.window)
    pairs = []
    rngs = []
    for st in states:
        for b in win.blocks():
            pairs.append((st.seq.context_before(b), st.seq.block_slice(b)))
            rngs.append(derive_stream(cfg.seed, st.index, j, "prm", b))
    flat = score_blocks(prm, pairs, acct, rngs)
    out: list[list[float]] = []
    for i, st in enumerate(states):
        scores = flat[i * win.width : (i + 1) * win.width]
        st.ledger.fill(win.first, scores)
        st.transcript.record("Review", st.index, win.as_range(), {"scores": scores})
        out.append(scores)
    return out


def propose_candidates(
    state: ItemState,
    window: WindowRef,
    scores: Sequence[float],
    dn: Denoiser,
    cfg: R3Config,
    acct: CallAccountant,
) -> CandidateSet:
    """Generate n_samples refined versions of the triggered window.

    Each candidate draws an independent remask plan (same probabilities,
    fresh positions), then re-denoises its window blocks left to right; block
    b conditions on the candidate's own already-refined earlier blocks, never
    on blocks after b.
    """
    if len(scores) != window.width:
        raise StructuralError("scores do not match window width")
    j = window.last
    cset = CandidateSet(item=state.index, window=window, prefix=state.seq)
    for s in range(cfg.n_samples):
        plan = build_remask_plan(
            scores,
            cfg.block_len,
            cfg.alpha_b,
            cfg.beta_i,
            cfg.p_min,
            cfg.epsilon,
            cfg.tau_thresh,
            cfg.position_policy,
            derive_stream(cfg.seed, state.index, j, "remask", s),
        )
        masked = apply_window_mask(state.seq, plan, window.first)
        state.transcript.record(
            "Remask",
            state.index,
            window.as_range(),
            {
                "candidate": s,
                "positions": [list(b.positions) for b in plan.blocks],
                "masked_tokens": [masked.block_slice(b) for b in window.blocks()],
            },
        )
        work = list(masked.tokens)
        for b in window.blocks():
            start, stop = masked.block_bounds(b)
            editable = frozenset(
                p for p in range(start, stop) if work[p] == masked.mask_id
            )
            prefix = TokenSeq(
                tokens=tuple(work[:stop]),
                prompt_len=masked.prompt_len,
                block_len=masked.block_len,
                mask_id=masked.mask_id,
            )
            rng = derive_stream(cfg.seed, state.index, j, "refine", s, b)
            refined = denoise_region(
                dn, prefix, editable, cfg.temperature, cfg.steps_per_block, rng, acct
            )
            work[start:stop] = refined.tokens[start:stop]
        cand_blocks = [
            work[masked.block_bounds(b)[0] : masked.block_bounds(b)[1]] for b in window.blocks()
        ]
        cset.candidates.append(Candidate(blocks=cand_blocks, plan=plan))
        state.transcript.record(
            "Propose", state.index, window.as_range(), {"candidate": s, "tokens": cand_blocks}
        )
    return cset


def score_candidate_sets(
    sets: Sequence[CandidateSet],
    states: Sequence[ItemState],
    prm: ProcessReward,
    cfg: R3Config,
    acct: CallAccountant,
) -> None:
    """Score every block of every candidate of every triggered item in one
    batched PRM submission, each block under its candidate-local context."""
    if not sets:
        return
    by_index = {st.index: st for st in states}
    pairs = []
    rngs = []
    for cset in sets:
        for s, cand in enumerate(cset.candidates):
            prefix = list(cset.prefix.tokens[: cset.prefix.block_bounds(cset.window.first)[0]])
            context = list(prefix)
            for offset, blk in enumerate(cand.blocks):
                b = cset.window.first + offset
                pairs.append((list(context), list(blk)))
                rngs.append(
                    derive_stream(cfg.seed, cset.item, cset.window.last, "prm-cand", s, b)
                )
                context.extend(blk)
    flat = score_blocks(prm, pairs, acct, rngs)
    pos = 0
    for cset in sets:
        width = cset.window.width
        all_scores = []
        for cand in cset.candidates:
            cand.scores = flat[pos : pos + width]
            all_scores.append(cand.scores)
            pos += width
        by_index[cset.item].transcript.record(
            "ScoreCandidates", cset.item, cset.window.as_range(), {"scores": all_scores}
        )


def score_candidates(
    cands: CandidateSet,
    state: ItemState,
    prm: ProcessReward,
    cfg: R3Config,
    acct: CallAccountant,
) -> CandidateSet:
    """Score one item's candidate set (single batched PRM submission)."""
    score_candidate_sets([cands], [state], prm, cfg, acct)
    return cands


def select_best(
    cands: CandidateSet, original_scores: Sequence[float], cfg: R3Config
) -> Selection:
    """Rank candidates by the configured metric.

    When retain_original is set, the original window competes with its stored
    review scores and ranks before all candidates; ties then go to the lowest
    candidate index. Candidates must already be scored.
    """
    if not cands.scored:
        raise StructuralError("candidate set is not scored")
    metrics = tuple(metric_value(c.scores, cfg.metric) for c in cands.candidates)
    original_metric = (
        metric_value(list(original_scores), cfg.metric) if cfg.retain_original else None
    )
    chosen: int | None
    if cfg.retain_original:
        chosen = None
        best = original_metric
    else:
        chosen = 0
        best = metrics[0]
    for i, m in enumerate(metrics):
        if m > best:
            chosen = i
            best = m
    return Selection(chosen=chosen, metrics=metrics, original_metric=original_metric)


def apply_selection(
    state: ItemState, cands: CandidateSet, selection: Selection
) -> None:
    """Write the winning window (tokens and scores) back into the item state
    and emit the Select/Retain event."""
    win = cands.window
    payload = {
        "metrics": list(selection.metrics),
        "original_metric": selection.original_metric,
    }
    if selection.chosen is None:
        state.transcript.record("Retain", state.index, win.as_range(), payload)
        return
    winner = cands.candidates[selection.chosen]
    state.seq = state.seq.replace_window(win.first, winner.blocks)
    state.ledger.fill(win.first, winner.scores)
    state.transcript.record(
        "Select", state.index, win.as_range(), {**payload, "chosen": selection.chosen}
    )


def _normalize_prompts(prompt: Sequence[int] | Sequence[Sequence[int]]) -> list[list[int]]:
    if not prompt:
        raise StructuralError("prompt must be nonempty")
    first = prompt[0]
    if isinstance(first, (list, tuple)):
        return [list(p) for p in prompt]
    return [list(prompt)]


def init_states(
    prompt: Sequence[int] | Sequence[Sequence[int]],
    cfg: R3Config,
    mask_id: int,
    sink: EventSink | None = None,
) -> list[ItemState]:
    states = []
    for i, p in enumerate(_normalize_prompts(prompt)):
        seq = TokenSeq.from_prompt(p, cfg.block_len, mask_id)
        states.append(
            ItemState(index=i, seq=seq, ledger=ScoreLedger(cfg.n_total), transcript=Transcript(sink))
        )
    return states


def run_r3(
    prompt: Sequence[int] | Sequence[Sequence[int]],
    dn: Denoiser,
    prm: ProcessReward,
    cfg: R3Config,
    mask_id: int,
    sink: EventSink | None = None,
    acct: CallAccountant | None = None,
) -> R3Result:
    """Run the full loop over one prompt or a batch of prompts.

    Per review point the PRM is submitted to at most twice (once for the
    review, once for all triggered items' candidates together), so batched
    invocations stay within [ceil(n_total/window), 2*ceil(n_total/window)]
    regardless of batch size. Deterministic given (seed, config, models).
    Pass an accountant to accumulate counters across several runs.
    """
    states = init_states(prompt, cfg, mask_id, sink)
    acct = acct if acct is not None else CallAccountant()
    for j in range(cfg.n_total):
        for st in states:
            extend_block(st, j, dn, cfg, acct)
        if not is_review_point(j, cfg):
            continue
        win = WindowRef.ending_at(j, cfg.window)
        all_scores = review_window(states, j, prm, cfg, acct)
        triggered: list[tuple[ItemState, list[float]]] = []
        sets: list[CandidateSet] = []
        for st, scores in zip(states, all_scores):
            if needs_refinement(scores, cfg.tau_thresh):
                st.transcript.record(
                    "Trigger",
                    st.index,
                    win.as_range(),
                    {
                        "min_score": min(scores),
                        "window_tokens": [st.seq.block_slice(b) for b in win.blocks()],
                    },
                )
                triggered.append((st, scores))
                sets.append(propose_candidates(st, win, scores, dn, cfg, acct))
        score_candidate_sets(sets, [st for st, _ in triggered], prm, cfg, acct)
        for (st, scores), cset in zip(triggered, sets):
            selection = select_best(cset, scores, cfg)
            apply_selection(st, cset, selection)
    return R3Result(
        items=[ItemResult(st.seq, st.ledger, st.transcript) for st in states],
        accountant=acct,
    )
