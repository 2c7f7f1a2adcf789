"""Comparison systems: plain block-by-block generation (pass@1) and
block-wise best-of-N reranking.

pass@1 draws each block once with no scorer in the loop; its token output is
bit-identical to the full loop with a never-triggering scorer under the same
seed. Best-of-N draws n_samples versions of every block, scores them in one
batched submission per block, and keeps the highest-scoring candidate.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

from .core import R3Config, ScoreLedger, TokenSeq, Transcript
from .engine import EventSink, ItemState, extend_block, init_states
from .models import CallAccountant, Denoiser, ProcessReward, score_blocks
from .rng import derive_stream


@dataclass
class Pass1Result:
    seq: TokenSeq
    transcript: Transcript
    accountant: CallAccountant


@dataclass
class BonResult:
    seq: TokenSeq
    ledger: ScoreLedger
    transcript: Transcript
    accountant: CallAccountant


def run_pass1(
    prompt: Sequence[int],
    dn: Denoiser,
    cfg: R3Config,
    mask_id: int,
    sink: EventSink | None = None,
    acct: CallAccountant | None = None,
) -> Pass1Result:
    """Sequential block-by-block generation; the PRM counters stay at zero."""
    state = init_states(prompt, cfg, mask_id, sink)[0]
    acct = acct if acct is not None else CallAccountant()
    for j in range(cfg.n_total):
        extend_block(state, j, dn, cfg, acct)
    return Pass1Result(seq=state.seq, transcript=state.transcript, accountant=acct)


def run_block_bon(
    prompt: Sequence[int],
    dn: Denoiser,
    prm: ProcessReward,
    cfg: R3Config,
    mask_id: int,
    sink: EventSink | None = None,
    acct: CallAccountant | None = None,
) -> BonResult:
    """Block-wise best-of-N: per block, draw n_samples candidates, score each
    against the sequence so far in one batched submission, append the best.

    Candidate 0 uses the same stream as the plain extend draw, so n_samples=1
    reproduces pass@1 exactly. Ties go to the lowest candidate index. Total
    block scorings come to n_total * n_samples.
    """
    state = init_states(prompt, cfg, mask_id, sink)[0]
    acct = acct if acct is not None else CallAccountant()
    for j in range(cfg.n_total):
        base = state.seq
        context = list(base.tokens)
        candidates: list[list[int]] = []
        for s in range(cfg.n_samples):
            scratch = ItemState(
                index=state.index,
                seq=base,
                ledger=ScoreLedger(cfg.n_total),
                transcript=Transcript(),
            )
            extend_block(scratch, j, dn, cfg, acct, sample=s)
            candidates.append(scratch.seq.block_slice(j))
        rngs = [
            derive_stream(cfg.seed, state.index, j, "prm-bon", s)
            for s in range(cfg.n_samples)
        ]
        scores = score_blocks(prm, [(context, blk) for blk in candidates], acct, rngs)
        best = max(range(len(scores)), key=lambda i: (scores[i], -i))
        state.seq = base.append_block(candidates[best])
        state.ledger.add_placeholder()
        state.ledger.fill(j, [scores[best]])
        state.transcript.record(
            "ScoreCandidates", state.index, (j, j), {"scores": [[s] for s in scores]}
        )
        state.transcript.record("Select", state.index, (j, j), {"chosen": best, "metrics": scores})
        state.transcript.record(
            "Extend", state.index, (j, j), {"tokens": candidates[best], "sample": best}
        )
    return BonResult(
        seq=state.seq, ledger=state.ledger, transcript=state.transcript, accountant=acct
    )
