"""Rank-based observability analysis of the joint calibration problem.

The Jacobian ``J`` has full column rank exactly when the reduced matrix
``F = [L^k  T^k]_k`` does, where the three source columns are shared by all
steps: the odometry rows force any null vector of ``J`` to move every source
position by the same amount.  Consequently ``g2 - rank(J) == (8(N-1)+3) -
rank(F)``.

``F`` is further reduced by elementary operations to ``F'`` with a
block-diagonal part ``diag(Lbar_2, ..., Lbar_N)`` and a common last column
block ``Tbar`` (built here from closed forms, the equality of ranks is checked
by the test-suite).  ``Tbar`` carries the source geometry seen from the
reference array, ``Lbar_i`` the extrinsics and clock of array ``i``.

Condition codes reported by the checks:

``min_steps_bound``
    fewer rows than columns: ``K < ceil(2 + 3 / (4(N-1)))``.
``fewer_than_five_steps``
    ``K < 5``; ``Tbar`` has only ``K-2`` nonzero rows.
``tbar_rank_deficient`` / ``lbar_rank_deficient``
    a necessary rank condition fails.
``source_collinear_with_reference``
    all ``s^k`` on one line through the reference origin.
``source_coplanar_with_reference``
    all ``s^k`` on one plane through the reference origin (includes the
    planes ``x = a y``, ``x = b z``, ``y = c z``).
``source_collinear_with_array``
    all ``s^k`` on one line through the origin of array ``i``.
``gimbal_singularity``
    ``theta_y = pi/2`` for array ``i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag

from .errors import DegenerateGeometry, InvalidConfig
from .jacobian import JacobianBundle, StateVector, assemble, jacobian_at, numerical_rank
from .scenario import Scenario

GEOMETRY_RTOL = 1e-9
GIMBAL_ATOL = 1e-9


@dataclass(frozen=True)
class Condition:
    """One failed condition or detected degeneracy."""

    code: str
    message: str
    array: int | None = None
    details: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {"code": self.code, "message": self.message}
        if self.array is not None:
            out["array"] = self.array
        if self.details:
            out["details"] = self.details
        return out


@dataclass(frozen=True)
class ReducedMatrices:
    F: np.ndarray
    Fbar_prime: np.ndarray
    Tbar: np.ndarray
    Lbar: dict[int, np.ndarray]
    MjT: dict[int, np.ndarray]


def min_steps(n_arrays: int) -> int:
    """Smallest K for which the Jacobian has at least as many rows as columns."""
    return math.ceil(2 + 3 / (4 * (n_arrays - 1)))


def f_columns(n_arrays: int) -> int:
    return 8 * (n_arrays - 1) + 3


# ---------------------------------------------------------------------------
# matrix builders (bundle level, shared with the solver)

def _tbar(sources: np.ndarray, c: float) -> np.ndarray:
    sources = np.atleast_2d(sources)
    K = sources.shape[0]
    d1 = np.linalg.norm(sources, axis=1)
    if np.any(d1 == 0.0):
        raise DegenerateGeometry("source at reference array origin",
                                 step=int(np.argmin(d1)) + 1, array=1)
    t = sources / (c * d1[:, None])
    Tbar = np.zeros((4 * K, 3))
    for k in range(3, K + 1):
        Tbar[k - 1] = -(k - 2) * t[0] + (k - 1) * t[1] - t[k - 1]
    return Tbar


def tbar_rank(Tbar: np.ndarray, sources, c: float, tol: float | None = None) -> int:
    """Rank of ``Tbar`` with a tolerance matched to its construction.

    Each row is a combination of ``s^k / (c d_1^k)`` terms with coefficients
    summing in magnitude to ``2(k-1)``, so its roundoff is of order
    ``eps * 2K * max|t|`` regardless of how small the row itself is.
    """
    if tol is None:
        sources = np.atleast_2d(sources)
        K = sources.shape[0]
        tol = max(Tbar.shape) * np.finfo(float).eps * 2 * K / c
    return numerical_rank(Tbar, tol)


def _lbar(bundle: JacobianBundle, i: int) -> np.ndarray:
    j = i - 2
    K = bundle.n_steps
    h, U, V = bundle.h[j], bundle.U[j], bundle.V[j]
    Lbar = np.zeros((4 * K, 8))
    Lbar[0, 0] = 1.0
    if K >= 2:
        Lbar[1, 1] = 1.0
    for k in range(3, K + 1):
        Lbar[k - 1, 2:5] = (k - 2) * h[0] - (k - 1) * h[1] + h[k - 1]
    for k in range(K):
        Lbar[K + 3 * k:K + 3 * k + 3, 2:5] = U[k]
        Lbar[K + 3 * k:K + 3 * k + 3, 5:8] = V[k]
    return Lbar


def _check_dt(dt: float):
    if dt == 0:
        raise InvalidConfig("the reduction divides the drift column by dt; dt must be nonzero")


def _fbar_prime(bundle: JacobianBundle, Tbar: np.ndarray) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    _check_dt(bundle.dt)
    N = bundle.n_arrays
    lbars = {i: _lbar(bundle, i) for i in range(2, N + 1)}
    left = block_diag(*[lbars[i] for i in range(2, N + 1)])
    right = np.vstack([Tbar] * (N - 1))
    return np.hstack([left, right]), lbars


def _mjt(lbar_j: np.ndarray, Tbar: np.ndarray, n_arrays: int) -> np.ndarray:
    rows = [np.hstack([lbar_j, Tbar])]
    rows += [np.hstack([-lbar_j, np.zeros_like(Tbar)])] * (n_arrays - 2)
    return np.vstack(rows)


# ---------------------------------------------------------------------------
# scenario-level API

def build_F(sc: Scenario) -> np.ndarray:
    """``[L^k  T^k]`` stacked over steps, shape (4(N-1)K, 8(N-1)+3)."""
    return assemble(sc).F


def reduce_Tbar(sc: Scenario) -> np.ndarray:
    """``Tbar`` (4K x 3): two zero rows, ``K-2`` second-difference rows, ``3K`` zero rows."""
    return _tbar(sc.trajectory, sc.c)


def reduce_Lbar(sc: Scenario, i: int, bundle: JacobianBundle | None = None) -> np.ndarray:
    """``Lbar_i`` (4K x 8) with columns ordered ``[tau, delta, position, euler]``."""
    if not 2 <= i <= sc.n_arrays:
        raise InvalidConfig(f"array index must be in 2..{sc.n_arrays}, got {i}")
    _check_dt(sc.dt)
    return _lbar(bundle if bundle is not None else assemble(sc), i)


def build_Fbar_prime(sc: Scenario) -> ReducedMatrices:
    bundle = assemble(sc)
    Tbar = _tbar(sc.trajectory, sc.c)
    fbp, lbars = _fbar_prime(bundle, Tbar)
    mjts = {j: _mjt(lbars[j], Tbar, sc.n_arrays) for j in lbars}
    return ReducedMatrices(bundle.F, fbp, Tbar, lbars, mjts)


def build_MjT(sc: Scenario, j: int) -> np.ndarray:
    """``[[Lbar_j, Tbar], [-Lbar_j, 0], ...]`` with ``N-2`` negated copies (11 columns)."""
    if not 2 <= j <= sc.n_arrays:
        raise InvalidConfig(f"array index must be in 2..{sc.n_arrays}, got {j}")
    Tbar = _tbar(sc.trajectory, sc.c)
    return _mjt(reduce_Lbar(sc, j), Tbar, sc.n_arrays)


# ---------------------------------------------------------------------------
# conditions

def _necessary(n_arrays: int, n_steps: int, Tbar, lbars, tol, sources, c) -> list[Condition]:
    out = []
    kmin = min_steps(n_arrays)
    if n_steps < kmin:
        out.append(Condition("min_steps_bound",
                             f"K={n_steps} gives fewer equations than unknowns; need K >= {kmin}",
                             details={"K": n_steps, "required": kmin}))
    if n_steps < 5:
        out.append(Condition("fewer_than_five_steps",
                             f"K={n_steps} < 5: Tbar has at most {max(n_steps - 2, 0)} nonzero rows",
                             details={"K": n_steps}))
    rt = tbar_rank(Tbar, sources, c, tol)
    if rt < 3:
        out.append(Condition("tbar_rank_deficient", f"rank(Tbar) = {rt} < 3",
                             details={"rank": rt}))
    for i, Lb in lbars.items():
        rl = numerical_rank(Lb, tol)
        if rl < 8:
            out.append(Condition("lbar_rank_deficient", f"rank(Lbar_{i}) = {rl} < 8", array=i,
                                 details={"rank": rl}))
    return out


def check_necessary(sc: Scenario, tol: float | None = None) -> list[Condition]:
    """Necessary conditions that fail; an empty list means all of them hold."""
    red = build_Fbar_prime(sc)
    return _necessary(sc.n_arrays, sc.n_steps, red.Tbar, red.Lbar, tol, sc.trajectory, sc.c)


@dataclass(frozen=True)
class SufficiencyVerdict:
    sufficient: bool
    witness: int | None
    rank_MjT: dict[int, int]
    rank_Lbar: dict[int, int]

    def as_dict(self) -> dict:
        return {
            "sufficient": self.sufficient,
            "witness": self.witness,
            "rank_MjT": {str(k): v for k, v in self.rank_MjT.items()},
            "rank_Lbar": {str(k): v for k, v in self.rank_Lbar.items()},
        }


def _sufficient(n_arrays, Tbar, lbars, tol) -> SufficiencyVerdict:
    rank_l = {i: numerical_rank(Lb, tol) for i, Lb in lbars.items()}
    rank_m = {j: numerical_rank(_mjt(lbars[j], Tbar, n_arrays), tol) for j in lbars}
    witness = None
    for j in sorted(lbars):
        if rank_m[j] == 11 and all(rank_l[i] == 8 for i in lbars if i != j):
            witness = j
            break
    return SufficiencyVerdict(witness is not None, witness, rank_m, rank_l)


def check_sufficient(sc: Scenario, tol: float | None = None) -> SufficiencyVerdict:
    """Sufficient condition: some ``M_jT`` has rank 11 and every other ``Lbar_i`` rank 8."""
    red = build_Fbar_prime(sc)
    return _sufficient(sc.n_arrays, red.Tbar, red.Lbar, tol)


def _unit_rows(M):
    norms = np.linalg.norm(M, axis=1)
    return M / norms[:, None]


def _sv_ratios(M) -> np.ndarray:
    s = np.linalg.svd(M, compute_uv=False)
    return s / s[0]


_PLANE_FAMILIES = (
    # zero normal component -> (family, numerator index, denominator index)
    (2, "x=ay", 1, 0),
    (1, "x=bz", 2, 0),
    (0, "y=cz", 2, 1),
)


def _plane_family(normal: np.ndarray, rtol: float):
    """Match a plane normal to ``x=a*y``, ``x=b*z`` or ``y=c*z``."""
    n = normal / np.abs(normal).max()
    for zero_idx, name, num, den in _PLANE_FAMILIES:
        if abs(n[zero_idx]) <= rtol:
            if abs(n[den]) > rtol:
                # n[den] * u + n[num] * v = 0  ->  u = -(n[num] / n[den]) v
                return name, float(-n[num] / n[den])
    return None, None


def detect_degenerate(sc: Scenario, rtol: float = GEOMETRY_RTOL,
                      gimbal_tol: float = GIMBAL_ATOL) -> list[Condition]:
    """Geometric tests for the known unobservable configurations."""
    S = sc.trajectory
    K = sc.n_steps
    out = []
    if K >= 2:
        ratios = _sv_ratios(_unit_rows(S))
        if ratios[1] <= rtol:
            out.append(Condition("source_collinear_with_reference",
                                 "all source positions lie on a line through the reference origin",
                                 details={"sv_ratio": float(ratios[1])}))
        elif K >= 3 and ratios[2] <= rtol:
            normal = np.linalg.svd(_unit_rows(S))[2][-1]
            family, coef = _plane_family(normal, rtol)
            details = {"normal": normal.tolist(), "sv_ratio": float(ratios[2])}
            if family is not None:
                details.update(family=family, coefficient=coef)
                msg = f"all source positions lie on the plane {family} with coefficient {coef:.6g}"
            else:
                msg = "all source positions lie on a plane through the reference origin"
            out.append(Condition("source_coplanar_with_reference", msg, details=details))
        for i, arr in enumerate(sc.arrays[1:], start=2):
            r = _sv_ratios(_unit_rows(S - arr.position))
            if r[1] <= rtol:
                out.append(Condition("source_collinear_with_array",
                                     f"all source positions lie on a line through array {i}",
                                     array=i, details={"sv_ratio": float(r[1])}))
    for i, arr in enumerate(sc.arrays[1:], start=2):
        if abs(arr.euler.theta_y - np.pi / 2) <= gimbal_tol:
            out.append(Condition("gimbal_singularity", f"theta_y of array {i} is pi/2",
                                 array=i, details={"theta_y": arr.euler.theta_y}))
    return out


# ---------------------------------------------------------------------------
# rank traces

@dataclass(frozen=True)
class RankReport:
    """Rank of ``F`` after each prefix of steps, plus final reduced ranks.

    ``rank`` and ``g2`` are expressed for the full Jacobian of each prefix
    (``g2(k) = 8(N-1) + 3k`` and ``rank = g2(k) - deficit``), ``rank_F`` is
    the rank of ``F`` itself, whose column count ``8(N-1)+3`` does not grow.
    """

    n_arrays: int
    steps: np.ndarray
    rank_F: np.ndarray
    deficit: np.ndarray
    first_full_rank_step: int | None
    rank_Tbar: int
    rank_Lbar: dict[int, int]
    rank_MjT: dict[int, int]
    violated_conditions: list[Condition]
    sufficiency: SufficiencyVerdict | None = None

    @property
    def g2(self) -> np.ndarray:
        return 8 * (self.n_arrays - 1) + 3 * self.steps

    @property
    def rank(self) -> np.ndarray:
        return self.g2 - self.deficit

    @property
    def full_column_rank(self) -> bool:
        return bool(self.deficit[-1] == 0)

    def rows(self) -> list[tuple[int, int, int, int, int, int]]:
        """``(step, rank, g2, deficit, full_rank_flag, rank_F)`` per prefix."""
        return [(int(k), int(r), int(g), int(d), int(d == 0), int(rf))
                for k, r, g, d, rf in zip(self.steps, self.rank, self.g2, self.deficit, self.rank_F)]

    def as_dict(self) -> dict:
        return {
            "n_arrays": self.n_arrays,
            "n_steps": int(self.steps[-1]),
            "full_column_rank": self.full_column_rank,
            "first_full_rank_step": self.first_full_rank_step,
            "final_deficit": int(self.deficit[-1]),
            "rank_Tbar": self.rank_Tbar,
            "rank_Lbar": {str(k): v for k, v in self.rank_Lbar.items()},
            "rank_MjT": {str(k): v for k, v in self.rank_MjT.items()},
            "violated_conditions": [c.as_dict() for c in self.violated_conditions],
            "sufficiency": None if self.sufficiency is None else self.sufficiency.as_dict(),
        }


def _trace(bundle: JacobianBundle, sources, c, tol, extra_conditions=()) -> RankReport:
    N, K = bundle.n_arrays, bundle.n_steps
    F = bundle.F
    rows_per_step = 4 * (N - 1)
    ncols = f_columns(N)
    ranks = np.array([numerical_rank(F[:rows_per_step * k], tol) for k in range(1, K + 1)])
    deficit = ncols - ranks
    full = np.flatnonzero(deficit == 0)
    Tbar = _tbar(sources, c)
    _check_dt(bundle.dt)
    lbars = {i: _lbar(bundle, i) for i in range(2, N + 1)}
    conditions = _necessary(N, K, Tbar, lbars, tol, sources, c) + list(extra_conditions)
    suff = _sufficient(N, Tbar, lbars, tol)
    return RankReport(
        n_arrays=N,
        steps=np.arange(1, K + 1),
        rank_F=ranks,
        deficit=deficit,
        first_full_rank_step=int(full[0]) + 1 if full.size else None,
        rank_Tbar=tbar_rank(Tbar, sources, c, tol),
        rank_Lbar=suff.rank_Lbar,
        rank_MjT=suff.rank_MjT,
        violated_conditions=conditions,
        sufficiency=suff,
    )


def rank_trace(sc: Scenario, tol: float | None = None) -> RankReport:
    """Rank deficit after each step, reduced-matrix ranks and all flagged conditions."""
    return _trace(assemble(sc), sc.trajectory, sc.c, tol, detect_degenerate(sc))


def rank_report_for_state(state: StateVector, dt: float, c: float,
                          tol: float | None = None) -> RankReport:
    """Same report evaluated at an estimated state instead of ground truth."""
    return _trace(jacobian_at(state, dt, c), state.sources, c, tol)


def reduced_ranks_at(sc: Scenario, k: int, tol: float | None = None) -> dict:
    """Ranks of ``Tbar``, ``diag(Lbar_i)``, ``M_2T`` and ``diag(Lbar_3..N)`` for the first ``k`` steps."""
    red = build_Fbar_prime(sc.prefix(k))
    N = sc.n_arrays
    lb = [red.Lbar[i] for i in range(2, N + 1)]
    return {
        "rank_Tbar": tbar_rank(red.Tbar, sc.trajectory[:k], sc.c, tol),
        "rank_diag_Lbar": numerical_rank(block_diag(*lb), tol),
        "rank_M2T": numerical_rank(red.MjT[2], tol),
        "rank_diag_Lbar_without_2": numerical_rank(block_diag(*lb[1:]), tol) if N > 2 else 0,
        "rank_F": numerical_rank(red.F, tol),
        "rank_Fbar_prime": numerical_rank(red.Fbar_prime, tol),
    }
