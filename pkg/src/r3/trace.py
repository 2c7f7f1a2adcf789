"""Trace files: line-delimited event records and their replay verifier.

A trace line is {"run_id", "item", "event", "block_range", "payload"}. The
replay harness re-derives what it can from the recorded payloads (masked
windows from remask positions, selection winners from metrics) and checks the
log's structural invariants, so a trace is evidence, not just prose.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any

from .core import StructuralError, Transcript


def emit_trace(
    transcripts: Transcript | Sequence[Transcript],
    destination: str | Path | IO[str],
    run_id: str,
) -> None:
    """Write all events, one JSON object per line, item by item."""
    if isinstance(transcripts, Transcript):
        transcripts = [transcripts]
    if hasattr(destination, "write"):
        for tr in transcripts:
            destination.write(tr.to_jsonl(run_id))
        return
    with open(destination, "w", encoding="utf-8") as fh:
        for tr in transcripts:
            fh.write(tr.to_jsonl(run_id))


def read_trace(source: str | Path | IO[str]) -> list[dict[str, Any]]:
    if hasattr(source, "read"):
        lines = source.read().splitlines()
    else:
        lines = Path(source).read_text(encoding="utf-8").splitlines()
    records = []
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise StructuralError(f"trace line {n} is not valid JSON: {exc}") from exc
        for key in ("run_id", "item", "event", "block_range", "payload"):
            if key not in rec:
                raise StructuralError(f"trace line {n} missing field {key!r}")
        records.append(rec)
    return records


@dataclass
class ReplayReport:
    """Outcome of replaying one trace."""

    events: int = 0
    items: int = 0
    triggers: int = 0
    remasks_verified: int = 0
    selections_verified: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        status = "ok" if self.ok else f"{len(self.violations)} violation(s)"
        return (
            f"replay: {self.events} events, {self.items} item(s), "
            f"{self.triggers} trigger(s), {self.remasks_verified} remask(s) verified, "
            f"{self.selections_verified} selection(s) verified -> {status}"
        )


def _check_remask(window_tokens: list[list[int]], payload: dict[str, Any]) -> str | None:
    """Re-apply recorded positions to the pre-refinement window and compare
    with the recorded masked window."""
    positions = payload.get("positions")
    masked = payload.get("masked_tokens")
    if positions is None or masked is None:
        return "Remask event lacks positions/masked_tokens"
    if not (len(positions) == len(masked) == len(window_tokens)):
        return "Remask payload shape does not match the triggered window"
    mask_marker: int | None = None
    for blk_idx, (offs, blk_masked, blk_orig) in enumerate(zip(positions, masked, window_tokens)):
        if len(blk_masked) != len(blk_orig):
            return f"masked block {blk_idx} has wrong length"
        offset_set = set(offs)
        if len(offset_set) != len(offs):
            return f"duplicate remask offsets in block {blk_idx}"
        for p, (tok_masked, tok_orig) in enumerate(zip(blk_masked, blk_orig)):
            if p in offset_set:
                if mask_marker is None:
                    mask_marker = tok_masked
                elif tok_masked != mask_marker:
                    return f"inconsistent mask marker in block {blk_idx} offset {p}"
            elif tok_masked != tok_orig:
                return f"non-remasked token changed in block {blk_idx} offset {p}"
    return None


def _check_selection(event: str, payload: dict[str, Any]) -> str | None:
    metrics = payload.get("metrics")
    if metrics is None:
        return f"{event} event lacks metrics"
    original = payload.get("original_metric")
    if event == "Retain":
        if original is None:
            return "Retain event lacks original_metric"
        if any(m > original for m in metrics):
            return "Retain despite a strictly better candidate"
        return None
    chosen = payload.get("chosen")
    if chosen is None or not 0 <= chosen < len(metrics):
        return f"Select chose index {chosen!r} out of {len(metrics)} candidates"
    best = metrics[chosen]
    if any(m > best for m in metrics):
        return "Select did not pick the metric argmax"
    if any(metrics[i] >= best for i in range(chosen)):
        return "Select broke the lowest-index tie rule"
    if original is not None and best <= original:
        return "Select despite the original being at least as good"
    return None


def replay_trace(source: str | Path | IO[str] | Iterable[dict[str, Any]]) -> ReplayReport:
    """Verify a trace's structural invariants and recorded computations.

    Checks per item: Extend events in nondecreasing block order; every Trigger
    resolved by exactly one Select/Retain over the same window; every Remask
    reproduces the masked window from the trigger's snapshot; every selection
    consistent with its recorded metrics.
    """
    if isinstance(source, (str, Path)) or hasattr(source, "read"):
        records = read_trace(source)
    else:
        records = list(source)
    report = ReplayReport(events=len(records))

    by_item: dict[tuple[str, int], list[dict[str, Any]]] = {}
    for rec in records:
        by_item.setdefault((rec["run_id"], rec["item"]), []).append(rec)
    report.items = len(by_item)

    for (run_id, item), events in by_item.items():
        where = f"run {run_id!r} item {item}"
        last_extend = -1
        pending: tuple[list[int], list[list[int]]] | None = None  # (range, window tokens)
        for rec in events:
            kind = rec["event"]
            rng_ = rec["block_range"]
            payload = rec["payload"]
            if kind == "Extend":
                if rng_[0] < last_extend:
                    report.violations.append(f"{where}: Extend order regressed at block {rng_[0]}")
                last_extend = rng_[0]
            elif kind == "Trigger":
                report.triggers += 1
                if pending is not None:
                    report.violations.append(f"{where}: Trigger while another is unresolved")
                if "window_tokens" not in payload:
                    report.violations.append(f"{where}: Trigger lacks window_tokens")
                    pending = (rng_, None)
                else:
                    pending = (rng_, payload["window_tokens"])
            elif kind == "Remask":
                if pending is None or pending[0] != rng_:
                    report.violations.append(f"{where}: Remask outside a triggered window")
                elif pending[1] is not None:
                    err = _check_remask(pending[1], payload)
                    if err:
                        report.violations.append(f"{where}: {err}")
                    else:
                        report.remasks_verified += 1
            elif kind in ("Select", "Retain"):
                err = _check_selection(kind, payload)
                if err:
                    report.violations.append(f"{where}: {err}")
                else:
                    report.selections_verified += 1
                if pending is not None:
                    if pending[0] != rng_:
                        report.violations.append(
                            f"{where}: {kind} resolves a different window than the trigger"
                        )
                    pending = None
        if pending is not None:
            report.violations.append(f"{where}: Trigger never resolved by Select/Retain")
    return report
