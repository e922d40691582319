from .experiments import ExperimentPlan, PlanError, fig2_trace, gop_sweep, run_cell, run_plan
from .sequence import EncodedSequence, FrameStat, encode_sequence

__all__ = [
    "EncodedSequence",
    "ExperimentPlan",
    "FrameStat",
    "PlanError",
    "encode_sequence",
    "fig2_trace",
    "gop_sweep",
    "run_cell",
    "run_plan",
]
