from enum import Enum

class KernelFamily(Enum):
    RBF = "rbf"
    IMQ = "imq"
    LINEAR = "linear"

class TargetFamily(Enum):
    GAUSSIAN = "gaussian"
    MIXTURE = "mixture"

class InitFamily(Enum):
    GAUSSIAN = "gaussian"
    GRID = "grid"

class StepMode(Enum):
    CONSTANT = "constant"
    CAPPED = "capped"
    KSD_PROPORTIONAL = "ksd"

class Integrator(Enum):
    EULER = "euler"
    RK4 = "rk4"

class NoiseConvention(Enum):
    SDE = "sde"
    TWO_SQRT_EPS = "paper_literal"

class Estimator(Enum):
    VSTAT = "vstat"
    USTAT = "ustat"

THREADS_ENV_VAR = "STEINFLOW_THREADS"

# Kernel defaults
MEDIAN = "median"
DEFAULT_BANDWIDTH = 1.0
DEFAULT_IMQ_OFFSET = 1.0
DEFAULT_IMQ_EXPONENT = -0.5

# Numerical thresholds
SINGULAR_DET_THRESHOLD = 1e-12
SIMPLEX_TOLERANCE = 1e-12
BL_WEIGHT_TOLERANCE = 1e-9
BL_MAX_SUPPORT = 256

# Rows handed to one worker when evaluating pairwise sums
ROW_BLOCK_SIZE = 256

# File names written by the run/flow/langevin subcommands
TRAJECTORY_FILE = "trajectory.csv"
META_FILE = "meta.json"
CHART_FILE = "chart.svg"
PARTICLES_FILE_TEMPLATE = "particles_{step}.csv"
