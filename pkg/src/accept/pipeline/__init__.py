"""1F1B pipeline-parallel training on a simulated clock."""
from .coordinator import PredictorCoordinator, RatioCoordinator, pipeline_comm_table
from .costs import ConstantCost, DeviceCost, Slowdown
from .sequential import train_sequential
from .sim import (
    LatencyReport,
    PipelineDeadlock,
    PipelineSimulator,
    RunResult,
    StaticCoordinator,
    TrainRunConfig,
    run_pipeline,
)
from .stage import (
    BACKWARD,
    FORWARD,
    WAIT,
    BatchTicket,
    StageState,
    StashError,
    audit_trace,
    backward_with_stash,
    expected_forward_version,
    schedule_next,
    stash_and_forward,
)

__all__ = [name for name in dir() if not name.startswith("_")]
