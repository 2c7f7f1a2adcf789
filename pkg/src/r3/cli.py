"""Command line entry points: run experiments, replay traces, self-test.

    r3 run --config exp.conf [--method r3,pass1] [--trials N] [--seed S]
           [--out DIR] [--trace]
    r3 replay --trace out/trace-r3-00000.jsonl
    r3 selftest
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

import numpy as np

from .core import ConfigError, R3Config, R3Error
from .engine import run_r3
from .experiment import format_report_table, load_config, run_experiment
from .models import ConstantProcessReward
from .remasking import (
    apply_window_mask,
    build_remask_plan,
    remask_probabilities,
    remask_token_count,
)
from .rng import RngStream
from .toyworld import MASK_ID, ToyParams, make_models, make_task
from .trace import replay_trace


def _cmd_run(args: argparse.Namespace) -> int:
    exp = load_config(args.config)
    overrides = {}
    if args.method is not None:
        overrides["method"] = args.method
    if args.trials is not None:
        overrides["trials"] = args.trials
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.trace:
        overrides["trace"] = True
    if overrides:
        exp = replace(exp, **overrides)
        exp.methods()
    report = run_experiment(exp)
    print(format_report_table(report))
    if exp.out:
        print(f"\nreport written to {exp.out}/report.json")
    return 0


def _cmd_replay(args: argparse.Namespace) -> int:
    report = replay_trace(args.trace)
    print(report.summary())
    for v in report.violations:
        print(f"  violation: {v}")
    return 0 if report.ok else 1


def _selftest_checks() -> list[tuple[str, bool, str]]:
    """Fast subset of the invariant suite. Returns (name, ok, detail) rows."""
    checks: list[tuple[str, bool, str]] = []
    cfg = R3Config(seed=7)
    params = ToyParams()
    task = make_task(7, cfg, params)
    dn, _ = make_models(task, params)
    prompt = task.prompt()

    # batched-call arithmetic: 2 reviews for K=8/N=16, 4 with refinement on
    never = run_r3(prompt, dn, ConstantProcessReward(1.0), cfg, MASK_ID)
    always = run_r3(prompt, dn, ConstantProcessReward(0.5), cfg, MASK_ID)
    got = (
        never.accountant.batched_prm_invocations,
        always.accountant.batched_prm_invocations,
    )
    checks.append(("batched PRM call bounds (2, 4)", got == (2, 4), f"got {got}"))

    # score-to-probability mapping spot values
    probs = remask_probabilities([0.1, 0.5, 0.9], 10.0, 0.01, 1e-8, 0.8)
    expected = (0.99999997307998, 0.0278063473782815, 0.01)
    ok = all(abs(p - e) < 1e-6 for p, e in zip(probs, expected))
    checks.append(("remask probability formula", ok, f"got {[round(p, 8) for p in probs]}"))

    # anti-monotonicity and range on random windows
    gen = np.random.default_rng(123)
    violations = 0
    for _ in range(200):
        size = int(gen.integers(1, 9))
        scores = [float(s) for s in gen.uniform(0, 1, size)]
        probs = remask_probabilities(scores, float(gen.choice([1.0, 5.0, 10.0])), 0.01, 1e-8, 0.8)
        if any(not 0.01 <= p <= 1.0 for p in probs):
            violations += 1
        for a in range(size):
            for b in range(size):
                if scores[a] < scores[b] and probs[a] < probs[b] - 1e-12:
                    violations += 1
    checks.append(("order reversal and range (200 windows)", violations == 0, f"{violations} violations"))

    # mask accounting on random plans applied to real sequences
    from .core import TokenSeq

    bad = 0
    for i in range(200):
        size = int(gen.integers(1, 5))
        block_len = int(gen.integers(4, 17))
        n_blocks = size + int(gen.integers(0, 3))
        scores = [float(s) for s in gen.uniform(0, 1, size)]
        beta = float(gen.uniform(0, 1))
        plan = build_remask_plan(
            scores, block_len, 10.0, beta, 0.01, 1e-8, 0.8, "uniform",
            RngStream(key=f"selftest.{i}", gen=np.random.default_rng([9, i])),
        )
        tokens = [int(t) for t in gen.integers(0, 9, 3 + n_blocks * block_len)]
        seq = TokenSeq(tokens=tuple(tokens), prompt_len=3, block_len=block_len, mask_id=99)
        start_block = int(gen.integers(0, n_blocks - size + 1))
        masked = apply_window_mask(seq, plan, start_block)
        for k, blk in enumerate(plan.blocks):
            n_masks = sum(t == 99 for t in masked.block_slice(start_block + k))
            if n_masks != blk.token_count or blk.token_count != remask_token_count(
                blk.probability, beta, block_len
            ):
                bad += 1
        lo_end, hi_start = seq.block_bounds(start_block)[0], seq.block_bounds(start_block + size - 1)[1]
        if masked.tokens[:lo_end] != seq.tokens[:lo_end] or masked.tokens[hi_start:] != seq.tokens[hi_start:]:
            bad += 1
    checks.append(("mask accounting (200 plans)", bad == 0, f"{bad} mismatches"))

    # determinism of a full run
    a = run_r3(prompt, *make_models(task, params), cfg, MASK_ID)
    b = run_r3(prompt, *make_models(task, params), cfg, MASK_ID)
    same = (
        a.items[0].seq.tokens == b.items[0].seq.tokens
        and a.items[0].transcript.to_jsonl("x") == b.items[0].transcript.to_jsonl("x")
    )
    checks.append(("seeded determinism", same, "transcripts identical" if same else "diverged"))
    return checks


def _cmd_selftest(_args: argparse.Namespace) -> int:
    failures = 0
    for name, ok, detail in _selftest_checks():
        status = "ok" if ok else "FAIL"
        print(f"[{status}] {name}: {detail}")
        if not ok:
            failures += 1
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="r3", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a configured experiment")
    p_run.add_argument("--config", required=True, help="path to a key=value config file")
    p_run.add_argument("--method", help="override method (r3|pass1|bon, comma-separated list ok)")
    p_run.add_argument("--trials", type=int, help="override trial count")
    p_run.add_argument("--seed", type=int, help="override base seed")
    p_run.add_argument("--out", help="override output directory")
    p_run.add_argument("--trace", action="store_true", help="write per-trial trace files")
    p_run.set_defaults(func=_cmd_run)

    p_replay = sub.add_parser("replay", help="verify a trace file")
    p_replay.add_argument("--trace", required=True, help="path to a trace .jsonl file")
    p_replay.set_defaults(func=_cmd_replay)

    p_self = sub.add_parser("selftest", help="run the fast invariant subset")
    p_self.set_defaults(func=_cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except R3Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
