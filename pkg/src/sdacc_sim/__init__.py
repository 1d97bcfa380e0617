from .version import __version__

# Workload models
from .models import (
    BlockId,
    Footprint,
    LayerDescriptor,
    LayerKind,
    MacBreakdown,
    NetworkGraph,
    Side,
)

# Core components
from .workload import build_unet, cost_curve, count_macs
from .scheduler import SchedulePlan, SchedulerConfig, plan_schedule
from .simcore import AblationSwitches, HardwareConfig, SimReport, simulate_network

# Phase-aware sampling
from .phase import PlanParams, SamplingPlan, analyze_trace, load_trace, preset_plan, search_plan

# Configuration
from .config import RunConfig, load_config

# Error classes
from .errors import (
    SimulatorError,
    TopologyError,
    TraceError,
    ConfigError,
    # Planning errors
    PlanError,
    InfeasiblePlanError,
    # Numeric and consistency errors
    NumericFaultError,
    SchemaVersionError,
    InvariantViolationError,
)
