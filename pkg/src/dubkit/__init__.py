"""Unit-sequence dubbing toolkit.

Discrete speech-unit sequences move through a small, fully checkable
pipeline: run-length speed estimation and adaptation, masked-diffusion
translation with explicit duration control, a flow-matching math core, and
dubbing compliance metrics, all exercised on a synthetic bilingual task
whose exact posterior is computable.
"""

__version__ = "0.1.0"

from .errors import (
    DataError,
    DegenerateBinError,
    DubkitError,
    InconsistentStateError,
    ValidationError,
)
from .units import (
    EXTREME_RATIO_WARNING,
    RunLengthForm,
    UnitRecord,
    UnitSequence,
    adapt_speed,
    dedup,
    from_runs,
    read_unit_jsonl,
    to_runs,
    unit_speed,
    write_unit_jsonl,
)
from .diffusion import (
    MASK,
    Denoiser,
    DiffusionState,
    LossStrategy,
    MaskSchedule,
    MaskedLossResult,
    SamplerConfig,
    classify_trivial,
    duration_sweep,
    forward_mask,
    mask_with_rng,
    masked_ce_loss,
    sample,
    scoring_positions,
)
from .toy import (
    ORACLE_MAX_TARGET_LEN,
    CountDenoiser,
    EvalRow,
    OracleDenoiser,
    ParallelPair,
    SourceContext,
    SpeedAdapter,
    ToyTaskSpec,
    adapt_corpus,
    composition_posterior_exact,
    evaluate_translation,
    generate_corpus,
    generate_pair,
    oracle_cross_entropy,
    read_corpus_jsonl,
    skeleton_accuracy,
    train_count_denoiser,
    translate_corpus,
    write_corpus_jsonl,
)
from .flow import (
    AffineFieldModel,
    FlowSample,
    GaussianTestbed,
    build_condition,
    cfm_loss,
    euler_sample,
    fit_affine_field,
    gaussian_field_checks,
    interpolate,
    sample_flow_batch,
    target_velocity,
)
from .metrics import (
    ComplianceReport,
    Histogram,
    build_report,
    compliance,
    speed_correlation,
    speed_histogram,
    write_histogram_csv,
    write_report_csv,
    write_report_json,
)
from .config import RunManifest, config_hash, resolve_config
from .seeding import derive_item_seed, rng_from

__all__ = [
    "__version__",
    "DubkitError",
    "ValidationError",
    "DataError",
    "InconsistentStateError",
    "DegenerateBinError",
    "UnitSequence",
    "RunLengthForm",
    "UnitRecord",
    "to_runs",
    "from_runs",
    "dedup",
    "unit_speed",
    "adapt_speed",
    "EXTREME_RATIO_WARNING",
    "read_unit_jsonl",
    "write_unit_jsonl",
    "MASK",
    "MaskSchedule",
    "DiffusionState",
    "Denoiser",
    "LossStrategy",
    "MaskedLossResult",
    "SamplerConfig",
    "forward_mask",
    "mask_with_rng",
    "classify_trivial",
    "scoring_positions",
    "masked_ce_loss",
    "sample",
    "duration_sweep",
    "ToyTaskSpec",
    "ParallelPair",
    "SourceContext",
    "SpeedAdapter",
    "generate_pair",
    "generate_corpus",
    "adapt_corpus",
    "read_corpus_jsonl",
    "write_corpus_jsonl",
    "composition_posterior_exact",
    "ORACLE_MAX_TARGET_LEN",
    "OracleDenoiser",
    "CountDenoiser",
    "train_count_denoiser",
    "translate_corpus",
    "evaluate_translation",
    "oracle_cross_entropy",
    "skeleton_accuracy",
    "EvalRow",
    "FlowSample",
    "AffineFieldModel",
    "GaussianTestbed",
    "interpolate",
    "target_velocity",
    "build_condition",
    "cfm_loss",
    "fit_affine_field",
    "euler_sample",
    "sample_flow_batch",
    "gaussian_field_checks",
    "Histogram",
    "ComplianceReport",
    "compliance",
    "speed_correlation",
    "speed_histogram",
    "write_histogram_csv",
    "write_report_csv",
    "write_report_json",
    "build_report",
    "RunManifest",
    "resolve_config",
    "config_hash",
    "rng_from",
    "derive_item_seed",
]
