"""Experiment driver: flat key=value configs, seeded trials, metrics reports.

Trial t runs with seed = base seed + t, so two methods given the same config
see identical tasks and identical canonical draws (paired-seed comparison).
Reports are deterministic for a fixed (config, seed) apart from the wall-time
fields, and are emitted both as a human-readable table and as JSON.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Callable

from .baselines import run_block_bon, run_pass1
from .core import AdapterError, ConfigError, R3Config, Transcript
from .engine import run_r3
from .httpmodels import http_denoiser_adapter, http_prm_adapter
from .models import CallAccountant, Denoiser, ProcessReward
from .toyworld import MASK_ID, ChainTask, ToyParams, grade, make_models, make_task
from .trace import emit_trace

log = logging.getLogger(__name__)

METHODS = ("r3", "pass1", "bon")

COUNTER_KEYS = (
    "batched_prm_invocations",
    "block_scorings",
    "denoiser_invocations",
    "denoiser_token_updates",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs, mirroring the engine configuration
    plus the driver and toy-world knobs."""

    method: str = "r3"  # one of METHODS, or a comma-separated list
    trials: int = 10
    seed: int = 0
    out: str = ""
    trace: bool = False
    workers: int = 1
    # engine configuration
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
    # toy world
    toy_p_err: float = 0.3
    toy_hi: float = 0.95
    toy_lo: float = 0.1
    toy_noise_sigma: float = 0.05
    toy_prm_mode: str = "exact"
    toy_context_mode: str = "truth"
    toy_digit_width: int = 6
    # external model endpoints (empty = oracle toy models)
    denoiser_endpoint: str = ""
    prm_endpoint: str = ""
    http_timeout: float = 30.0
    http_retries: int = 2

    def methods(self) -> list[str]:
        out = [m.strip() for m in self.method.split(",") if m.strip()]
        if not out:
            raise ConfigError("no method given")
        for m in out:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; expected one of {METHODS}")
        if len(set(out)) != len(out):
            raise ConfigError("duplicate method in list")
        return out

    def r3_config(self, seed: int) -> R3Config:
        return R3Config(
            n_total=self.n_total,
            block_len=self.block_len,
            window=self.window,
            tau_thresh=self.tau_thresh,
            n_samples=self.n_samples,
            beta_i=self.beta_i,
            alpha_b=self.alpha_b,
            p_min=self.p_min,
            epsilon=self.epsilon,
            temperature=self.temperature,
            demask_steps=self.demask_steps,
            metric=self.metric,
            retain_original=self.retain_original,
            position_policy=self.position_policy,
            seed=seed,
        )

    def toy_params(self) -> ToyParams:
        return ToyParams(
            p_err=self.toy_p_err,
            hi=self.toy_hi,
            lo=self.toy_lo,
            noise_sigma=self.toy_noise_sigma,
            prm_mode=self.toy_prm_mode,
            context_mode=self.toy_context_mode,
            digit_width=self.toy_digit_width,
        )

    @property
    def uses_toy_models(self) -> bool:
        return not (self.denoiser_endpoint or self.prm_endpoint)


_BOOL_VALUES = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _convert(name: str, raw: str, typ: type) -> Any:
    try:
        if typ is bool:
            key = raw.strip().lower()
            if key not in _BOOL_VALUES:
                raise ValueError(f"expected a boolean, got {raw!r}")
            return _BOOL_VALUES[key]
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {name!r}: {exc}") from exc


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse the flat `key = value` format ('#' starts a comment)."""
    defaults = ExperimentConfig()
    types = {f.name: type(getattr(defaults, f.name)) for f in fields(ExperimentConfig)}
    values: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"config line {n}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"config line {n}: duplicate key {key!r}")
        values[key] = _convert(key, raw, types[key])
    cfg = ExperimentConfig(**values)
    cfg.methods()  # validate early
    cfg.r3_config(cfg.seed)
    cfg.toy_params()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


@dataclass
class TrialOutcome:
    trial: int
    seed: int
    method: str
    failed: bool = False
    error: str = ""
    final_correct: bool = False
    all_blocks_correct: bool = False
    blocks_correct: int = 0
    n_blocks: int = 0
    undecodable: int = 0
    counters: dict[str, int] | None = None
    wall_s: float = 0.0


def _build_models(
    exp: ExperimentConfig, task: ChainTask
) -> tuple[Denoiser, ProcessReward]:
    params = exp.toy_params()
    toy_dn, toy_prm = make_models(task, params)
    dn: Denoiser = toy_dn
    prm: ProcessReward = toy_prm
    if exp.denoiser_endpoint:
        dn = http_denoiser_adapter(exp.denoiser_endpoint, exp.http_timeout, exp.http_retries)
    if exp.prm_endpoint:
        prm = http_prm_adapter(exp.prm_endpoint, exp.http_timeout, exp.http_retries)
    return dn, prm


def _run_one(
    exp: ExperimentConfig, method: str, trial: int, sink: Callable | None
) -> TrialOutcome:
    seed = exp.seed + trial
    outcome = TrialOutcome(trial=trial, seed=seed, method=method)
    cfg = exp.r3_config(seed)
    task = make_task(seed, cfg, exp.toy_params())
    dn, prm = _build_models(exp, task)
    prompt = task.prompt()
    t0 = time.perf_counter()
    try:
        acct: CallAccountant
        if method == "pass1":
            res1 = run_pass1(prompt, dn, cfg, MASK_ID, sink)
            seq, acct = res1.seq, res1.accountant
        elif method == "bon":
            resb = run_block_bon(prompt, dn, prm, cfg, MASK_ID, sink)
            seq, acct = resb.seq, resb.accountant
        else:
            resr = run_r3(prompt, dn, prm, cfg, MASK_ID, sink)
            seq, acct = resr.items[0].seq, resr.accountant
    except AdapterError as exc:
        outcome.failed = True
        outcome.error = str(exc)
        outcome.wall_s = time.perf_counter() - t0
        log.warning("trial %d (%s) failed and is excluded: %s", trial, method, exc)
        return outcome
    outcome.wall_s = time.perf_counter() - t0
    outcome.counters = acct.as_dict()
    if exp.uses_toy_models:
        report = grade(seq, task)
        outcome.final_correct = report.overall
        outcome.all_blocks_correct = report.all_blocks_correct
        outcome.blocks_correct = sum(report.per_block)
        outcome.n_blocks = len(report.per_block)
        outcome.undecodable = len(report.undecodable)
    return outcome


def _run_trial_all_methods(exp: ExperimentConfig, trial: int) -> list[TrialOutcome]:
    outcomes = []
    for method in exp.methods():
        sink = None
        handle = None
        if exp.trace and exp.out:
            path = Path(exp.out) / f"trace-{method}-{trial:05d}.jsonl"
            handle = open(path, "w", encoding="utf-8")
            run_id = f"{method}-s{exp.seed + trial}"

            def sink(ev, _fh=handle, _rid=run_id):
                _fh.write(json.dumps(ev.to_record(_rid), sort_keys=True, separators=(",", ":")) + "\n")

        try:
            outcomes.append(_run_one(exp, method, trial, sink))
        finally:
            if handle is not None:
                handle.close()
    return outcomes


def _aggregate(exp: ExperimentConfig, outcomes: list[TrialOutcome]) -> dict[str, Any]:
    by_method: dict[str, list[TrialOutcome]] = {m: [] for m in exp.methods()}
    for o in outcomes:
        by_method[o.method].append(o)
    methods_report: dict[str, Any] = {}
    for method, rows in by_method.items():
        rows = sorted(rows, key=lambda r: r.trial)
        ok_rows = [r for r in rows if not r.failed]
        n = len(ok_rows)
        counters_total = {k: sum(r.counters[k] for r in ok_rows) for k in COUNTER_KEYS} if n else {
            k: 0 for k in COUNTER_KEYS
        }
        entry: dict[str, Any] = {
            "trials": len(rows),
            "failed": len(rows) - n,
            "counters_total": counters_total,
            "counters_mean": {
                k: (counters_total[k] / n if n else 0.0) for k in COUNTER_KEYS
            },
            "wall_time_total_s": sum(r.wall_s for r in rows),
            "wall_time_mean_s": (sum(r.wall_s for r in rows) / len(rows)) if rows else 0.0,
        }
        if exp.uses_toy_models:
            total_blocks = sum(r.n_blocks for r in ok_rows)
            entry.update(
                {
                    "accuracy_final": (sum(r.final_correct for r in ok_rows) / n) if n else 0.0,
                    "accuracy_all_blocks": (
                        sum(r.all_blocks_correct for r in ok_rows) / n if n else 0.0
                    ),
                    "per_block_accuracy": (
                        sum(r.blocks_correct for r in ok_rows) / total_blocks
                        if total_blocks
                        else 0.0
                    ),
                    "undecodable_blocks": sum(r.undecodable for r in ok_rows),
                    "final_correct_by_trial": [int(r.final_correct) for r in ok_rows],
                }
            )
        methods_report[method] = entry
    report: dict[str, Any] = {
        "schema": "r3-report-v1",
        "config": {f.name: getattr(exp, f.name) for f in fields(ExperimentConfig)},
        "methods": methods_report,
    }
    names = exp.methods()
    if len(names) > 1 and exp.uses_toy_models:
        deltas = {}
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                ra, rb = methods_report[a], methods_report[b]
                deltas[f"{a}_minus_{b}"] = {
                    "accuracy_final": ra["accuracy_final"] - rb["accuracy_final"],
                    "accuracy_all_blocks": ra["accuracy_all_blocks"] - rb["accuracy_all_blocks"],
                }
        report["deltas"] = deltas
    return report


def format_report_table(report: dict[str, Any]) -> str:
    """Human-readable summary table."""
    cols = [
        ("method", 8),
        ("trials", 7),
        ("failed", 7),
        ("acc_final", 10),
        ("acc_all", 8),
        ("per_block", 10),
        ("prm_batches", 12),
        ("scorings", 9),
        ("denoises", 9),
        ("wall_mean_s", 11),
    ]
    header = " ".join(name.ljust(width) for name, width in cols)
    lines = [header, "-" * len(header)]
    for method, entry in report["methods"].items():
        acc = entry.get("accuracy_final")
        acc_all = entry.get("accuracy_all_blocks")
        per_block = entry.get("per_block_accuracy")
        row = [
            method.ljust(8),
            str(entry["trials"]).ljust(7),
            str(entry["failed"]).ljust(7),
            (f"{acc:.4f}" if acc is not None else "-").ljust(10),
            (f"{acc_all:.4f}" if acc_all is not None else "-").ljust(8),
            (f"{per_block:.4f}" if per_block is not None else "-").ljust(10),
            f"{entry['counters_mean']['batched_prm_invocations']:.1f}".ljust(12),
            f"{entry['counters_mean']['block_scorings']:.1f}".ljust(9),
            f"{entry['counters_mean']['denoiser_invocations']:.1f}".ljust(9),
            f"{entry['wall_time_mean_s']:.3f}".ljust(11),
        ]
        lines.append(" ".join(row))
    if "deltas" in report:
        lines.append("")
        for pair, vals in report["deltas"].items():
            lines.append(f"{pair}: accuracy_final {vals['accuracy_final']:+.4f}")
    return "\n".join(lines)


def run_experiment(exp: ExperimentConfig) -> dict[str, Any]:
    """Run all trials of all configured methods and aggregate the report.

    Writes report.json and report.txt (plus per-trial traces when enabled)
    under the output directory when one is configured.
    """
    if exp.trials < 1:
        raise ConfigError("trials must be >= 1")
    if exp.workers < 1:
        raise ConfigError("workers must be >= 1")
    if exp.out:
        Path(exp.out).mkdir(parents=True, exist_ok=True)
    outcomes: list[TrialOutcome] = []
    if exp.workers == 1:
        for t in range(exp.trials):
            outcomes.extend(_run_trial_all_methods(exp, t))
    else:
        with ThreadPoolExecutor(max_workers=exp.workers) as pool:
            for rows in pool.map(lambda t: _run_trial_all_methods(exp, t), range(exp.trials)):
                outcomes.extend(rows)
    report = _aggregate(exp, outcomes)
    if exp.out:
        out = Path(exp.out)
        (out / "report.json").write_text(
            json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        (out / "report.txt").write_text(format_report_table(report) + "\n", encoding="utf-8")
    return report


def strip_wall_times(report: dict[str, Any]) -> dict[str, Any]:
    """Copy of a report with the (nondeterministic) wall-time fields removed."""
    clone = json.loads(json.dumps(report))
    for entry in clone.get("methods", {}).values():
        entry.pop("wall_time_total_s", None)
        entry.pop("wall_time_mean_s", None)
    return clone


def paired_difference_ci(
    xs: list[int] | list[float], ys: list[int] | list[float], z: float = 1.96
) -> tuple[float, float, float]:
    """Mean paired difference x - y with a normal-approximation CI.

    Returns (mean, lo, hi). Requires aligned per-trial outcomes.
    """
    if len(xs) != len(ys) or not xs:
        raise ConfigError("paired samples must be nonempty and aligned")
    n = len(xs)
    diffs = [float(a) - float(b) for a, b in zip(xs, ys)]
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1) if n > 1 else 0.0
    half = z * math.sqrt(var / n)
    return mean, mean - half, mean + half
