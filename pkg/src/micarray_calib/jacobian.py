"""Analytic Jacobian of the stacked observation model, its blocks, and the FIM.

State layout: ``x = [x_arr_2; ...; x_arr_N; s^1; ...; s^K]`` with each
``x_arr_i = [position(3); euler(3); tau; delta]``.  Observation layout:
``m = [y^1; sD^1; y^2; ...; sD^{K-1}; y^K]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DegenerateGeometry, InvalidConfig
from .geometry import (
    SPEED_OF_SOUND,
    ArrayExtrinsics,
    predict,
    rotation_matrix,
    rotation_transpose_derivatives,
)
from .scenario import NoiseModel, Scenario, stack_observations

FD_STEP = 1e-6


def dims(n_arrays: int, n_steps: int) -> tuple[int, int]:
    """``(g1, g2)``: rows and columns of the full Jacobian."""
    m = n_arrays - 1
    return 4 * m * n_steps + 3 * (n_steps - 1), 8 * m + 3 * n_steps


ARRAY_FIELDS = ("px", "py", "pz", "theta_x", "theta_y", "theta_z", "tau", "delta")


def parameter_names(n_arrays: int, n_steps: int) -> list[str]:
    """Labels for the state-vector entries, e.g. ``array2.theta_y`` or ``source3.z``."""
    names = [f"array{i}.{f}" for i in range(2, n_arrays + 1) for f in ARRAY_FIELDS]
    names += [f"source{k}.{a}" for k in range(1, n_steps + 1) for a in "xyz"]
    return names


# ---------------------------------------------------------------------------
# numerical rank

def rank_tolerance(singular_values, shape) -> float:
    s = np.asarray(singular_values)
    if s.size == 0:
        return 0.0
    return float(s.max() * max(shape) * np.finfo(float).eps)


def numerical_rank(M, tol: float | None = None) -> int:
    """SVD rank with threshold ``sigma_max * max(M.shape) * eps`` unless ``tol`` is given."""
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if tol is None:
        tol = rank_tolerance(s, M.shape)
    return int(np.count_nonzero(s > tol))


# ---------------------------------------------------------------------------
# state vector

@dataclass(frozen=True, eq=False)
class StateVector:
    """Unknowns of the calibration problem.

    ``arr_params`` has one row ``[x, y, z, theta_x, theta_y, theta_z, tau,
    delta]`` per non-reference array; ``sources`` one row per step.  The
    reference array never appears here (gauge fixing).
    """

    arr_params: np.ndarray
    sources: np.ndarray

    def __post_init__(self):
        a = np.array(self.arr_params, dtype=float).reshape(-1, 8)
        s = np.array(self.sources, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "arr_params", a)
        object.__setattr__(self, "sources", s)

    @property
    def n_arrays(self) -> int:
        return self.arr_params.shape[0] + 1

    @property
    def n_steps(self) -> int:
        return self.sources.shape[0]

    @property
    def dim(self) -> int:
        return self.arr_params.size + self.sources.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.arr_params.ravel(), self.sources.ravel()])

    @classmethod
    def from_vector(cls, x, n_arrays: int, n_steps: int) -> "StateVector":
        x = np.asarray(x, dtype=float)
        n_arr = 8 * (n_arrays - 1)
        if x.shape != (n_arr + 3 * n_steps,):
            raise InvalidConfig(
                f"state has {x.size} entries, expected {n_arr + 3 * n_steps} for N={n_arrays}, K={n_steps}"
            )
        return cls(x[:n_arr].reshape(-1, 8), x[n_arr:].reshape(-1, 3))

    @classmethod
    def from_scenario(cls, sc: Scenario) -> "StateVector":
        return cls(sc.arr_params, sc.trajectory)

    def __eq__(self, other):
        if not isinstance(other, StateVector):
            return NotImplemented
        return (np.array_equal(self.arr_params, other.arr_params)
                and np.array_equal(self.sources, other.sources))

    __hash__ = None

    def extrinsics(self) -> list[ArrayExtrinsics]:
        """All N arrays, reference first.  Angles are normalized on the way."""
        return [ArrayExtrinsics.reference()] + [ArrayExtrinsics.from_vector(r) for r in self.arr_params]


def observation(state: StateVector, dt: float, c: float = SPEED_OF_SOUND) -> np.ndarray:
    """The combined noise-free observation ``g(x)``."""
    z = predict(state.arr_params, state.sources, dt, c)
    return stack_observations(z, np.diff(state.sources, axis=0))


# ---------------------------------------------------------------------------
# blocks

def _diff(position, source, array_index=None, step=None):
    diff = np.asarray(source, dtype=float) - np.asarray(position, dtype=float)
    d = float(np.linalg.norm(diff))
    if d == 0.0:
        raise DegenerateGeometry("source coincides with array", step=step, array=array_index)
    return diff, d


def _A(diff, d):
    return (d * d * np.eye(3) - np.outer(diff, diff)) / d**3


def _params(arr) -> np.ndarray:
    if isinstance(arr, ArrayExtrinsics):
        return arr.as_vector()
    return np.asarray(arr, dtype=float).reshape(8)


def block_h(arr_i, source, c: float = SPEED_OF_SOUND) -> np.ndarray:
    """d(TDOA)/d(array position): ``-(s - p)^T / (c d)``."""
    diff, d = _diff(_params(arr_i)[:3], source)
    return -diff / (c * d)


def block_U(arr_i, source) -> np.ndarray:
    """d(DOA)/d(array position): ``-R^T A`` with ``A = (d^2 I - D D^T) / d^3``."""
    p = _params(arr_i)
    diff, d = _diff(p[:3], source)
    return -rotation_matrix(*p[3:6]).T @ _A(diff, d)


def block_V(arr_i, source) -> np.ndarray:
    """d(DOA)/d(Euler angles); column j is ``(dR^T/dtheta_j) (s - p) / d``."""
    p = _params(arr_i)
    diff, d = _diff(p[:3], source)
    return np.column_stack([D @ diff for D in rotation_transpose_derivatives(p[3:6])]) / d


def block_Hi(arr_i, source, k: int, dt: float, c: float = SPEED_OF_SOUND) -> np.ndarray:
    """The 4x8 block ``[[h, 0, 1, k dt], [U, V, 0, 0]]`` of one array at step ``k``."""
    H = np.zeros((4, 8))
    H[0, :3] = block_h(arr_i, source, c)
    H[0, 6] = 1.0
    H[0, 7] = k * dt
    H[1:, :3] = block_U(arr_i, source)
    H[1:, 3:6] = block_V(arr_i, source)
    return H


def _source_term(source, c, step=None):
    s = np.asarray(source, dtype=float)
    d1 = float(np.linalg.norm(s))
    if d1 == 0.0:
        raise DegenerateGeometry("source at reference array origin", step=step, array=1)
    return s / (c * d1)


def block_Tk(sc: Scenario, k: int) -> np.ndarray:
    """d(z^k)/d(s^k) for 1-based step ``k``: rows ``-h_i - (s/(c d_1))^T`` and ``-U_i``."""
    s = sc.trajectory[k - 1]
    return _block_T(sc.arr_params, s, sc.c, step=k)


def _block_T(arr_params, s, c, step=None):
    t = _source_term(s, c, step)
    m = arr_params.shape[0]
    T = np.empty((4 * m, 3))
    for j, row in enumerate(arr_params):
        diff, d = _diff(row[:3], s, j + 2, step)
        T[4 * j] = diff / (c * d) - t
        T[4 * j + 1:4 * j + 4] = rotation_matrix(*row[3:6]).T @ _A(diff, d)
    return T


# ---------------------------------------------------------------------------
# assembly

@dataclass(frozen=True)
class JacobianBundle:
    """Full Jacobian and its constituent blocks.

    Block arrays are indexed ``[j, k]`` with ``j = i - 2`` for array ``i`` and
    ``k`` the 0-based step.

    Attributes
    ----------
    J : (g1, g2) ndarray
    L : (K, 4(N-1), 8(N-1)) ndarray
    T : (K, 4(N-1), 3) ndarray
    h : (N-1, K, 3) ndarray
    U, V : (N-1, K, 3, 3) ndarray
    """

    J: np.ndarray
    L: np.ndarray
    T: np.ndarray
    h: np.ndarray
    U: np.ndarray
    V: np.ndarray
    n_arrays: int
    n_steps: int
    dt: float

    def H(self, i: int, k: int) -> np.ndarray:
        """4x8 block of array ``i`` (2..N) at step ``k`` (1..K)."""
        j = i - 2
        return self.L[k - 1, 4 * j:4 * j + 4, 8 * j:8 * j + 8]

    @property
    def F(self) -> np.ndarray:
        """Stacked ``[L^k  T^k]`` with the source columns shared across steps."""
        return np.concatenate([np.concatenate([self.L[k], self.T[k]], axis=1)
                               for k in range(self.n_steps)], axis=0)


def jacobian_at(state: StateVector, dt: float, c: float = SPEED_OF_SOUND) -> JacobianBundle:
    """Assemble the analytic Jacobian at an arbitrary state."""
    arr, src = state.arr_params, state.sources
    m, K = arr.shape[0], src.shape[0]
    g1, g2 = dims(m + 1, K)
    h = np.empty((m, K, 3))
    U = np.empty((m, K, 3, 3))
    V = np.empty((m, K, 3, 3))
    for j, row in enumerate(arr):
        rt = rotation_matrix(*row[3:6]).T
        dR = rotation_transpose_derivatives(row[3:6])
        for k in range(K):
            diff, d = _diff(row[:3], src[k], j + 2, k + 1)
            h[j, k] = -diff / (c * d)
            U[j, k] = -rt @ _A(diff, d)
            V[j, k] = np.column_stack([D @ diff for D in dR]) / d
    L = np.zeros((K, 4 * m, 8 * m))
    T = np.empty((K, 4 * m, 3))
    for k in range(K):
        t = _source_term(src[k], c, k + 1)
        for j in range(m):
            r, col = 4 * j, 8 * j
            L[k, r, col:col + 3] = h[j, k]
            L[k, r, col + 6] = 1.0
            L[k, r, col + 7] = (k + 1) * dt
            L[k, r + 1:r + 4, col:col + 3] = U[j, k]
            L[k, r + 1:r + 4, col + 3:col + 6] = V[j, k]
            T[k, r] = -h[j, k] - t
            T[k, r + 1:r + 4] = -U[j, k]
    J = np.zeros((g1, g2))
    width = 4 * m
    stride = width + 3
    scol = 8 * m
    eye = np.eye(3)
    for k in range(K):
        r = k * stride
        J[r:r + width, :scol] = L[k]
        J[r:r + width, scol + 3 * k:scol + 3 * k + 3] = T[k]
        if k < K - 1:
            J[r + width:r + stride, scol + 3 * k:scol + 3 * k + 3] = -eye
            J[r + width:r + stride, scol + 3 * k + 3:scol + 3 * k + 6] = eye
    return JacobianBundle(J, L, T, h, U, V, m + 1, K, float(dt))


def assemble(sc: Scenario) -> JacobianBundle:
    """Analytic Jacobian at the scenario's ground truth."""
    return jacobian_at(StateVector.from_scenario(sc), sc.dt, sc.c)


def finite_difference_jacobian(sc: Scenario, h: float = FD_STEP, state: StateVector | None = None) -> np.ndarray:
    """Central-difference Jacobian of ``g`` at the ground truth (or at ``state``)."""
    if not h > 0:
        raise InvalidConfig(f"finite-difference step must be positive, got {h!r}")
    state = StateVector.from_scenario(sc) if state is None else state
    x0 = state.to_vector()
    N, K = state.n_arrays, state.n_steps
    cols = []
    for j in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp[j] += h
        xm[j] -= h
        gp = observation(StateVector.from_vector(xp, N, K), sc.dt, sc.c)
        gm = observation(StateVector.from_vector(xm, N, K), sc.dt, sc.c)
        cols.append((gp - gm) / (2 * h))
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# weighting and FIM

def _cholesky(M, name):
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise InvalidConfig(f"{name} is not positive definite") from None


def whiten(A, nm: NoiseModel, n_steps: int) -> np.ndarray:
    """Apply ``W^{-1/2}`` (block Cholesky solves) to a stacked vector or matrix."""
    LP = _cholesky(nm.P, "P")
    LQ = _cholesky(nm.Q, "Q")
    A = np.asarray(A, dtype=float)
    out = np.empty_like(A)
    width = nm.P.shape[0]
    stride = width + 3
    if A.shape[0] != n_steps * width + 3 * (n_steps - 1):
        raise InvalidConfig(f"cannot whiten {A.shape[0]} rows with P of size {width} and K={n_steps}")
    for k in range(n_steps):
        r = k * stride
        out[r:r + width] = solve_triangular(LP, A[r:r + width], lower=True)
        if k < n_steps - 1:
            out[r + width:r + stride] = solve_triangular(LQ, A[r + width:r + stride], lower=True)
    return out


def fim(bundle: JacobianBundle, nm: NoiseModel) -> np.ndarray:
    """Fisher information ``J^T W^{-1} J`` with ``W = diag(P, Q, ..., Q, P)``."""
    if nm.P.shape[0] != 4 * (bundle.n_arrays - 1):
        raise InvalidConfig("noise model does not match the number of arrays")
    Jw = whiten(bundle.J, nm, bundle.n_steps)
    info = Jw.T @ Jw
    return 0.5 * (info + info.T)
