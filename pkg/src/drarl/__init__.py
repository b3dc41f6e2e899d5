"""Disengagement-reason-augmented reinforcement learning.

A desk-scale 2D driving stack: recorded safety-driver takeovers are scanned
for the objects whose motion a nominal-traffic predictor cannot explain, and
the offending frame windows parameterize imagination environments in which
the driving policy is retrained.
"""

from .core import (
    DT,
    CaseError,
    CaseIOError,
    CaseParseError,
    CaseValidationError,
    DisengagementCase,
    Frame,
    KinematicState,
    ObjectRecord,
    ReasonElement,
    ReasonSet,
    ReplayBuffer,
    ScenarioMap,
    load_buffer,
    load_case,
    save_buffer,
    save_case,
    validate_case,
)
from .imagine import ImaginationEnv, ImagineConfig, ImagineError, build_env, build_replay_env
from .ood import OodVerdict, ReasonConfig, ReasonTrace, identify_reason, trace_reason
from .predictor import PredictorConfig, PredictorModel, extract_windows, sample_futures, train
from .scenarios import ScenarioSpec, build_world, gen_scenario, pseudo_driver

__version__ = "0.1.0"

__all__ = [
    "DT",
    "CaseError",
    "CaseIOError",
    "CaseParseError",
    "CaseValidationError",
    "DisengagementCase",
    "Frame",
    "KinematicState",
    "ObjectRecord",
    "ReasonElement",
    "ReasonSet",
    "ReplayBuffer",
    "ScenarioMap",
    "load_buffer",
    "load_case",
    "save_buffer",
    "save_case",
    "validate_case",
    "ImaginationEnv",
    "ImagineConfig",
    "ImagineError",
    "build_env",
    "build_replay_env",
    "OodVerdict",
    "ReasonConfig",
    "ReasonTrace",
    "identify_reason",
    "trace_reason",
    "PredictorConfig",
    "PredictorModel",
    "extract_windows",
    "sample_futures",
    "train",
    "ScenarioSpec",
    "build_world",
    "gen_scenario",
    "pseudo_driver",
    "__version__",
]
