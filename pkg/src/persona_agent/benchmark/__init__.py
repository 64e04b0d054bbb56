from persona_agent.benchmark.data import (
    TaskDefinition,
    UserDataset,
    load_dataset,
    load_task_definition,
    select_top_users,
    write_dataset,
)
from persona_agent.benchmark.experiment import find_self_retrievals, find_temporal_leaks, run_experiment
from persona_agent.benchmark.methods import (
    ABLATION_VARIANTS,
    AblationFlags,
    BenchContext,
    Method,
    parse_method,
    run_method,
)
from persona_agent.benchmark.metrics import LengthMismatch, MetricReport, compute_metrics, macro_f1

__all__ = [
    "ABLATION_VARIANTS",
    "AblationFlags",
    "BenchContext",
    "LengthMismatch",
    "Method",
    "MetricReport",
    "TaskDefinition",
    "UserDataset",
    "compute_metrics",
    "find_self_retrievals",
    "find_temporal_leaks",
    "load_dataset",
    "load_task_definition",
    "macro_f1",
    "parse_method",
    "run_experiment",
    "run_method",
    "select_top_users",
    "write_dataset",
]
