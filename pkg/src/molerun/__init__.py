"""Workflow engine for distributed parameter exploration of stochastic models.

Workflows are typed dataflow trees over immutable contexts. Tasks wrap model
kernels or external commands; explorations fan a context out into branches,
aggregations collect branch results back into arrays. Runs are coordinated
by a single session over local pools, a simulated cluster, or a (mock) batch
scheduler, and are bitwise reproducible for a fixed master seed.
"""

from molerun.core import (
    Capsule,
    CommandError,
    Context,
    DataflowError,
    Defect,
    DisplayHook,
    ExternalCommand,
    HookError,
    Kind,
    KindError,
    MissingInputError,
    Prototype,
    SavePopulationHook,
    Task,
    ToStringHook,
    Transition,
    TransitionMode,
    Workflow,
    run_task,
    validate_workflow,
)
from molerun.engine import (
    BatchConfig,
    BatchEnvironment,
    EnvironmentAssignment,
    Job,
    JobState,
    LocalEnvironment,
    RetryPolicy,
    RunReport,
    Session,
    SimulatedDistributedConfig,
    SimulatedEnvironment,
    assign_environment,
    run_workflow,
    write_run_outputs,
)
from molerun.stochastic import (
    Descriptor,
    SeedFactor,
    StatisticSpec,
    compute_statistic,
    replicate,
    sample_seeds,
)
from molerun.surrogate import SurrogateParams, evaluate_surrogate, make_surrogate_task

__all__ = [
    "BatchConfig",
    "BatchEnvironment",
    "Capsule",
    "CommandError",
    "Context",
    "DataflowError",
    "Defect",
    "Descriptor",
    "DisplayHook",
    "EnvironmentAssignment",
    "ExternalCommand",
    "HookError",
    "Job",
    "JobState",
    "Kind",
    "KindError",
    "LocalEnvironment",
    "MissingInputError",
    "Prototype",
    "RetryPolicy",
    "RunReport",
    "SavePopulationHook",
    "SeedFactor",
    "Session",
    "SimulatedDistributedConfig",
    "SimulatedEnvironment",
    "StatisticSpec",
    "SurrogateParams",
    "Task",
    "ToStringHook",
    "Transition",
    "TransitionMode",
    "Workflow",
    "assign_environment",
    "compute_statistic",
    "evaluate_surrogate",
    "make_surrogate_task",
    "replicate",
    "run_task",
    "run_workflow",
    "sample_seeds",
    "validate_workflow",
    "write_run_outputs",
]

__version__ = "0.1.0"
