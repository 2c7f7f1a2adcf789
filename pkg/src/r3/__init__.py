"""Review-Remask-Refine: process-guided block-wise masked diffusion inference.

The package is model-agnostic: any masked-infilling denoiser and any block
scorer satisfying the contracts in `r3.models` plug into the engine. A
synthetic arithmetic world (`r3.toyworld`) provides oracle models for
desk-scale experiments.
"""

from .core import (
    AdapterError,
    ConfigError,
    ContractViolation,
    R3Config,
    R3Error,
    ScoreLedger,
    StructuralError,
    TokenSeq,
    Transcript,
    TranscriptEvent,
)
from .engine import (
    CandidateSet,
    R3Result,
    Selection,
    WindowRef,
    metric_value,
    needs_refinement,
    run_r3,
    select_best,
)
from .baselines import BonResult, Pass1Result, run_block_bon, run_pass1
from .models import (
    CallAccountant,
    ConstantProcessReward,
    Denoiser,
    ProcessReward,
    denoise_region,
    score_blocks,
)
from .remasking import (
    WindowRemaskPlan,
    apply_window_mask,
    build_remask_plan,
    quality_value,
    remask_probabilities,
    remask_token_count,
    select_positions,
)
from .rng import RngStream, derive_stream
from .toyworld import (
    ChainTask,
    GradeReport,
    NoisyOracleDenoiser,
    OracleProcessReward,
    ToyParams,
    grade,
    make_models,
    make_task,
)

__version__ = "0.1.0"

__all__ = [
    "AdapterError",
    "BonResult",
    "CallAccountant",
    "CandidateSet",
    "ChainTask",
    "ConfigError",
    "ConstantProcessReward",
    "ContractViolation",
    "Denoiser",
    "GradeReport",
    "NoisyOracleDenoiser",
    "OracleProcessReward",
    "Pass1Result",
    "ProcessReward",
    "R3Config",
    "R3Error",
    "R3Result",
    "RngStream",
    "ScoreLedger",
    "Selection",
    "StructuralError",
    "TokenSeq",
    "ToyParams",
    "Transcript",
    "TranscriptEvent",
    "WindowRef",
    "WindowRemaskPlan",
    "apply_window_mask",
    "build_remask_plan",
    "denoise_region",
    "derive_stream",
    "grade",
    "make_models",
    "make_task",
    "metric_value",
    "needs_refinement",
    "quality_value",
    "remask_probabilities",
    "remask_token_count",
    "run_block_bon",
    "run_pass1",
    "run_r3",
    "score_blocks",
    "select_best",
    "select_positions",
]
