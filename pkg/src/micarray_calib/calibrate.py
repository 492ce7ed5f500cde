"""Weighted least-squares calibration with damped Gauss-Newton iterations."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateGeometry,
    InvalidConfig,
    NonConvergence,
    SingularFIM,
    SingularNormalEquations,
)
from .geometry import SPEED_OF_SOUND
from .jacobian import (
    JacobianBundle,
    StateVector,
    jacobian_at,
    observation,
    rank_tolerance,
    whiten,
)
from .observability import RankReport, rank_report_for_state
from .scenario import MeasurementSet, NoiseModel, Scenario

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CalibrationProblem:
    measurements: MeasurementSet
    noise: NoiseModel
    initial_guess: StateVector
    dt: float = 1.0
    c: float = SPEED_OF_SOUND

    def __post_init__(self):
        N, K = self.measurements.n_arrays, self.measurements.n_steps
        if self.noise.n_arrays != N:
            raise InvalidConfig(f"noise model is for {self.noise.n_arrays} arrays, measurements for {N}")
        if (self.initial_guess.n_arrays, self.initial_guess.n_steps) != (N, K):
            raise InvalidConfig(
                f"initial guess has N={self.initial_guess.n_arrays}, K={self.initial_guess.n_steps}; "
                f"measurements have N={N}, K={K}"
            )
        if not self.c > 0:
            raise InvalidConfig(f"speed of sound must be positive, got {self.c!r}")

    @property
    def dims(self) -> tuple[int, int]:
        return self.measurements.n_arrays, self.measurements.n_steps

    @classmethod
    def from_scenario(cls, sc: Scenario, measurements: MeasurementSet, noise: NoiseModel,
                      initial_guess: StateVector) -> "CalibrationProblem":
        return cls(measurements, noise, initial_guess, sc.dt, sc.c)


@dataclass(frozen=True)
class SolverOptions:
    damping: float = 1e-3
    damping_factor: float = 10.0
    damping_max: float = 1e16
    gtol: float = 1e-10
    xtol: float = 1e-12
    max_iter: int = 200
    rank_tol: float | None = None


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    cost: float
    damping: float
    gradient_norm: float


@dataclass(frozen=True)
class CalibrationResult:
    """Outcome of :func:`solve`.

    ``covariance`` is the inverse FIM evaluated at the estimate (not at the
    unknown truth) and is ``None`` when that FIM is singular.
    """

    estimate: StateVector
    final_cost: float
    iterations: int
    converged: bool
    gradient_norm: float
    covariance: np.ndarray | None
    rank_report: RankReport
    status: str
    history: list[IterationRecord] = field(default_factory=list)


def residual(x, prob: CalibrationProblem) -> tuple[np.ndarray, float]:
    """``r = m - g(x)`` and the weighted cost ``r^T W^{-1} r``."""
    state = x if isinstance(x, StateVector) else StateVector.from_vector(x, *prob.dims)
    if (state.n_arrays, state.n_steps) != prob.dims:
        raise InvalidConfig("state dimensions do not match the problem")
    r = prob.measurements.stacked() - observation(state, prob.dt, prob.c)
    rw = whiten(r, prob.noise, prob.measurements.n_steps)
    return r, float(rw @ rw)


def normalize_angles(x: np.ndarray, n_arrays: int) -> np.ndarray:
    """Wrap theta_x, theta_z into [0, 2*pi) and theta_y into (-pi, pi] in place.

    theta_y is only wrapped, never folded into [0, pi]: folding requires
    changing all three angles at once and is not possible for every pitch.
    """
    for j in range(n_arrays - 1):
        base = 8 * j + 3
        x[base] = np.mod(x[base], 2 * np.pi)
        x[base + 2] = np.mod(x[base + 2], 2 * np.pi)
        x[base + 1] = np.pi - np.mod(np.pi - x[base + 1], 2 * np.pi)
    return x


def _whitened(prob, state):
    bundle = jacobian_at(state, prob.dt, prob.c)
    return bundle, whiten(bundle.J, prob.noise, prob.measurements.n_steps)


def solve(prob: CalibrationProblem, options: SolverOptions | None = None) -> CalibrationResult:
    """Minimize ``||m - g(x)||^2_{W^-1}`` from ``prob.initial_guess``.

    Levenberg-Marquardt damping on ``diag(J^T W^-1 J)``: the damping is
    divided by ``damping_factor`` after an accepted step and multiplied by it
    after a rejected one.  Stops when the gradient norm ``|J^T W^-1 r|`` drops
    below ``gtol`` or the step below ``xtol * (|x| + xtol)``.

    Raises
    ------
    SingularNormalEquations
        The Jacobian at the final estimate is rank deficient, or no damping up
        to ``damping_max`` gives a solvable system.  ``exc.result`` holds the
        estimate and its rank report.
    NonConvergence
        ``max_iter`` reached; ``exc.result`` holds the best iterate.
    """
    opt = options or SolverOptions()
    N, K = prob.dims
    m = prob.measurements.stacked()
    x = normalize_angles(prob.initial_guess.to_vector().copy(), N)
    state = StateVector.from_vector(x, N, K)
    r = m - observation(state, prob.dt, prob.c)
    rw = whiten(r, prob.noise, K)
    cost = float(rw @ rw)
    lam = opt.damping
    history = []
    status = "max_iter"
    grad_norm = np.inf
    it = 0
    for it in range(1, opt.max_iter + 1):
        _, Jw = _whitened(prob, state)
        grad = Jw.T @ rw
        grad_norm = float(np.linalg.norm(grad))
        history.append(IterationRecord(it - 1, cost, lam, grad_norm))
        if grad_norm < opt.gtol:
            status = "gtol"
            it -= 1
            break
        A = Jw.T @ Jw
        D = np.maximum(np.diag(A), np.finfo(float).tiny)
        accepted = False
        while not accepted:
            if lam > opt.damping_max:
                result = _finish(prob, state, cost, it, False, grad_norm, "damping_exhausted", history, opt)
                raise SingularNormalEquations(
                    f"damping exceeded {opt.damping_max:g} without a solvable step", result)
            try:
                Lc = np.linalg.cholesky(A + lam * np.diag(D))
            except np.linalg.LinAlgError:
                lam *= opt.damping_factor
                continue
            dx = np.linalg.solve(Lc.T, np.linalg.solve(Lc, grad))
            step_norm = float(np.linalg.norm(dx))
            if step_norm < opt.xtol * (np.linalg.norm(x) + opt.xtol):
                status = "xtol"
                break
            x_new = normalize_angles(x + dx, N)
            new_state = StateVector.from_vector(x_new, N, K)
            try:
                r_new = m - observation(new_state, prob.dt, prob.c)
            except DegenerateGeometry:
                lam *= opt.damping_factor
                continue
            rw_new = whiten(r_new, prob.noise, K)
            cost_new = float(rw_new @ rw_new)
            if cost_new < cost:
                accepted = True
                x, state, rw, cost = x_new, new_state, rw_new, cost_new
                lam = max(lam / opt.damping_factor, 1e-15)
            else:
                lam *= opt.damping_factor
        if status == "xtol":
            break
    else:
        # loop ran out: evaluate the gradient at the last accepted iterate
        _, Jw = _whitened(prob, state)
        grad_norm = float(np.linalg.norm(Jw.T @ rw))
        if grad_norm < opt.gtol:
            status = "gtol"
        history.append(IterationRecord(it, cost, lam, grad_norm))
    converged = status in ("gtol", "xtol")
    result = _finish(prob, state, cost, it, converged, grad_norm, status, history, opt)
    if not result.rank_report.full_column_rank:
        raise SingularNormalEquations(
            f"Jacobian at the estimate has rank deficit {int(result.rank_report.deficit[-1])}",
            result)
    if not converged:
        raise NonConvergence(f"no convergence after {opt.max_iter} iterations", result)
    return result


def _finish(prob, state, cost, iterations, converged, grad_norm, status, history, opt):
    report = rank_report_for_state(state, prob.dt, prob.c, opt.rank_tol)
    bundle = jacobian_at(state, prob.dt, prob.c)
    try:
        cov = covariance_from_fim(bundle, prob.noise, opt.rank_tol)
    except SingularFIM:
        cov = None
    log.debug("solver finished: status=%s iterations=%d cost=%.3e", status, iterations, cost)
    return CalibrationResult(state, cost, iterations, converged, grad_norm, cov, report, status,
                             list(history))


def covariance_from_fim(bundle: JacobianBundle, nm: NoiseModel, tol: float | None = None) -> np.ndarray:
    """Inverse of ``J^T W^-1 J``, computed from the SVD of the whitened Jacobian.

    Raises :class:`SingularFIM` (with a null-space basis) when the numerical
    rank is below the number of parameters.
    """
    Jw = whiten(bundle.J, nm, bundle.n_steps)
    _, s, Vt = np.linalg.svd(Jw, full_matrices=True)
    n = Jw.shape[1]
    # rank(FIM) == rank(J) since W > 0; test on the whitened Jacobian
    thresh = rank_tolerance(s, Jw.shape) if tol is None else tol
    rank = int(np.count_nonzero(s > thresh))
    if rank < n:
        raise SingularFIM(rank, n, Vt[rank:].T.copy())
    cov = (Vt.T / s**2) @ Vt
    return 0.5 * (cov + cov.T)


def crlb(sc: Scenario, nm: NoiseModel, tol: float | None = None) -> np.ndarray:
    """Cramer-Rao bound: inverse FIM at the ground truth."""
    return covariance_from_fim(jacobian_at(StateVector.from_scenario(sc), sc.dt, sc.c), nm, tol)


# ---------------------------------------------------------------------------
# initial guesses

PERTURBATION = {"position": 0.2, "angle": 0.1, "tau": 0.02, "delta": 2e-5, "source": 0.2}


def perturb_state(truth: StateVector, scales: dict | None = None, seed: int = 0) -> StateVector:
    """Uniform perturbation within +/- the given half-widths per parameter kind."""
    sc = dict(PERTURBATION)
    if scales:
        unknown = set(scales) - set(sc)
        if unknown:
            raise InvalidConfig(f"unknown perturbation keys {sorted(unknown)}")
        sc.update(scales)
    rng = np.random.default_rng(seed)
    arr = truth.arr_params.copy()
    half = np.array([sc["position"]] * 3 + [sc["angle"]] * 3 + [sc["tau"], sc["delta"]])
    arr += rng.uniform(-1.0, 1.0, arr.shape) * half
    src = truth.sources + rng.uniform(-1.0, 1.0, truth.sources.shape) * sc["source"]
    return StateVector(arr, src)


def initial_guess_builder(measurements: MeasurementSet, strategy: str = "dead_reckoning", *,
                          truth: StateVector | None = None, scales: dict | None = None,
                          seed: int = 0, start=(0.0, 0.0, 0.0), arrays=None,
                          path=None) -> StateVector:
    """Starting point for :func:`solve`.

    Strategies
    ----------
    ``"truth_plus_noise"``
        ``truth`` perturbed by :func:`perturb_state` (testing only).
    ``"dead_reckoning"``
        sources integrated from the measured displacements starting at
        ``start``; array parameters zero unless ``arrays`` ((N-1, 8)) is
        given.  With the default zero start the first source sits on the
        reference array, so callers solving from it should pass ``start``.
    ``"file"``
        read a state file from ``path``.
    """
    N, K = measurements.n_arrays, measurements.n_steps
    if strategy == "truth_plus_noise":
        if truth is None:
            raise InvalidConfig("truth_plus_noise needs the true state")
        return perturb_state(truth, scales, seed)
    if strategy == "dead_reckoning":
        src = np.empty((K, 3))
        src[0] = start
        if K > 1:
            src[1:] = src[0] + np.cumsum(measurements.odometry, axis=0)
        arr = np.zeros((N - 1, 8)) if arrays is None else np.asarray(arrays, dtype=float).reshape(N - 1, 8)
        return StateVector(arr, src)
    if strategy == "file":
        from .io import load_state

        if path is None:
            raise InvalidConfig("file strategy needs a path")
        state = load_state(path)
        if (state.n_arrays, state.n_steps) != (N, K):
            raise InvalidConfig(f"state file is for N={state.n_arrays}, K={state.n_steps}; expected N={N}, K={K}")
        return state
    raise InvalidConfig(f"unknown initial-guess strategy {strategy!r}")
