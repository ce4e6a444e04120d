"""Monte Carlo harness: manifests, chunked runs, goldens, pipeline."""

from .config import (
    LatticeRun,
    MomentsRun,
    PicardRun,
    PipelineRun,
    RunConfig,
    Sde1dRun,
    SplittingRun,
    config_to_json,
    load_config,
    parse_config,
)
from .golden import (
    GOLDEN_CONFIGS,
    GoldenCheck,
    default_golden_dir,
    golden_check,
    write_goldens,
)
from .pipeline import (
    PipelineConstants,
    PipelineReport,
    PipelineResult,
    Stage1Exhausted,
    best_explosion_bound,
    derive_constants,
    merge_pipeline_results,
    product_bound,
    run_blowup_pipeline,
    slowed_drift,
)
from .runner import (
    SCHEMA_VERSION,
    RunOutput,
    merge,
    plan_chunks,
    render_long,
    render_summary,
    run_chunk,
    run_experiment,
    summary_dict,
    write_outputs,
)

__all__ = [
    "GOLDEN_CONFIGS",
    "GoldenCheck",
    "LatticeRun",
    "MomentsRun",
    "PicardRun",
    "PipelineConstants",
    "PipelineReport",
    "PipelineResult",
    "PipelineRun",
    "RunConfig",
    "RunOutput",
    "SCHEMA_VERSION",
    "Sde1dRun",
    "SplittingRun",
    "Stage1Exhausted",
    "best_explosion_bound",
    "config_to_json",
    "default_golden_dir",
    "derive_constants",
    "golden_check",
    "load_config",
    "merge",
    "merge_pipeline_results",
    "parse_config",
    "plan_chunks",
    "product_bound",
    "render_long",
    "render_summary",
    "run_blowup_pipeline",
    "run_chunk",
    "run_experiment",
    "slowed_drift",
    "summary_dict",
    "write_goldens",
    "write_outputs",
]
