"""Joint calibration of microphone arrays from a moving sound source."""

from .bundled import FIGURES, bundled_names, load_bundled
from .calibrate import (
    CalibrationProblem,
    CalibrationResult,
    SolverOptions,
    covariance_from_fim,
    crlb,
    initial_guess_builder,
    perturb_state,
    solve,
)
from .errors import (
    DegenerateGeometry,
    InvalidConfig,
    MicArrayError,
    NonConvergence,
    SingularFIM,
    SingularNormalEquations,
    SolverError,
)
from .geometry import ArrayExtrinsics, EulerAngles, doa, predict, rotation_matrix, tdoa
from .jacobian import JacobianBundle, StateVector, assemble, finite_difference_jacobian, fim
from .observability import (
    RankReport,
    build_F,
    build_Fbar_prime,
    build_MjT,
    check_necessary,
    check_sufficient,
    detect_degenerate,
    rank_trace,
    reduce_Lbar,
    reduce_Tbar,
)
from .scenario import MeasurementSet, NoiseModel, Scenario, make_scenario, synthesize

__version__ = "0.1.0"
