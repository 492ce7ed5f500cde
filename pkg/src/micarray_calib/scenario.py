"""Ground-truth worlds, trajectory generators and noisy measurement synthesis."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateGeometry, InvalidConfig
from .geometry import SPEED_OF_SOUND, ArrayExtrinsics, EulerAngles, predict

# default noise levels (the TDOA/DOA/odometry magnitudes are our choice)
SIGMA_TDOA = 1e-4
SIGMA_DOA = 0.01
SIGMA_ODOM = 1e-3

# stream ids for seed splitting
_MEASUREMENT_STREAM = 0
_ODOMETRY_STREAM = 1


@dataclass(frozen=True, eq=False)
class Scenario:
    """Full ground truth: N arrays (array 1 is the reference) and K source positions.

    ``generator`` optionally records how the trajectory was produced so that a
    scenario file can be written back in the same form it was read.
    """

    arrays: tuple[ArrayExtrinsics, ...]
    trajectory: np.ndarray
    dt: float = 1.0
    c: float = SPEED_OF_SOUND
    seed: int = 0
    generator: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        arrays = tuple(a if isinstance(a, ArrayExtrinsics) else ArrayExtrinsics(**a)
                       for a in self.arrays)
        traj = np.array(self.trajectory, dtype=float)
        if traj.ndim == 1:
            traj = traj.reshape(1, -1)
        traj.setflags(write=False)
        object.__setattr__(self, "arrays", arrays)
        object.__setattr__(self, "trajectory", traj)
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "c", float(self.c))
        object.__setattr__(self, "seed", int(self.seed))
        self._validate()

    def _validate(self):
        if len(self.arrays) < 2:
            raise InvalidConfig(f"need at least 2 arrays, got {len(self.arrays)}")
        if not self.arrays[0].is_reference:
            raise InvalidConfig("array 1 is the reference and must have all-zero extrinsics")
        if self.trajectory.shape[0] < 1 or self.trajectory.shape[1] != 3:
            raise InvalidConfig(f"trajectory must be (K>=1, 3), got {self.trajectory.shape}")
        if not np.all(np.isfinite(self.trajectory)):
            raise InvalidConfig("trajectory contains non-finite values")
        if not self.c > 0:
            raise InvalidConfig(f"speed of sound must be positive, got {self.c!r}")
        if not self.dt >= 0:
            raise InvalidConfig(f"dt must be non-negative, got {self.dt!r}")
        pos = self.array_positions
        for i in range(len(pos)):
            for j in range(i + 1, len(pos)):
                if np.array_equal(pos[i], pos[j]):
                    raise InvalidConfig(f"arrays {i + 1} and {j + 1} share a position")
        for i, p in enumerate(pos):
            hit = np.flatnonzero(np.all(self.trajectory == p, axis=1))
            if hit.size:
                raise DegenerateGeometry("source coincides with array",
                                         step=int(hit[0]) + 1, array=i + 1)

    @property
    def n_arrays(self) -> int:
        return len(self.arrays)

    @property
    def n_steps(self) -> int:
        return self.trajectory.shape[0]

    @property
    def array_positions(self) -> np.ndarray:
        return np.array([a.position for a in self.arrays])

    @property
    def arr_params(self) -> np.ndarray:
        """(N-1, 8) parameter rows of the non-reference arrays."""
        return np.array([a.as_vector() for a in self.arrays[1:]]).reshape(-1, 8)

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return (self.arrays == other.arrays and np.array_equal(self.trajectory, other.trajectory)
                and (self.dt, self.c, self.seed) == (other.dt, other.c, other.seed))

    __hash__ = None

    def prefix(self, k: int) -> "Scenario":
        """The same world restricted to the first ``k`` steps."""
        if not 1 <= k <= self.n_steps:
            raise InvalidConfig(f"prefix length {k} outside 1..{self.n_steps}")
        return Scenario(self.arrays, self.trajectory[:k], self.dt, self.c, self.seed)

    def with_trajectory(self, trajectory) -> "Scenario":
        return Scenario(self.arrays, trajectory, self.dt, self.c, self.seed)


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Gaussian noise covariances.

    ``P`` is the 4(N-1) square covariance of one stacked TDOA/DOA vector and
    ``Q`` the 3x3 covariance of one relative-displacement measurement.  Both
    must be symmetric positive definite.
    """

    P: np.ndarray
    Q: np.ndarray
    sigmas: tuple[float, float, float] | None = field(default=None, compare=False)

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        Q = np.array(self.Q, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] % 4 or P.shape[0] == 0:
            raise InvalidConfig(f"P must be 4(N-1) square, got shape {P.shape}")
        if Q.shape != (3, 3):
            raise InvalidConfig(f"Q must be 3x3, got shape {Q.shape}")
        for name, M in (("P", P), ("Q", Q)):
            if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
                raise InvalidConfig(f"{name} is not symmetric")
            try:
                np.linalg.cholesky(M)
            except np.linalg.LinAlgError:
                raise InvalidConfig(f"{name} is not positive definite") from None
        for M in (P, Q):
            M.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "Q", Q)

    @classmethod
    def default(cls, n_arrays: int, sigma_tdoa: float = SIGMA_TDOA,
                sigma_doa: float = SIGMA_DOA, sigma_odom: float = SIGMA_ODOM) -> "NoiseModel":
        """Diagonal model: ``sigma_tdoa`` on TDOA rows, ``sigma_doa`` on DOA components."""
        if n_arrays < 2:
            raise InvalidConfig(f"need at least 2 arrays, got {n_arrays}")
        block = [sigma_tdoa**2] + [sigma_doa**2] * 3
        P = np.diag(block * (n_arrays - 1))
        Q = sigma_odom**2 * np.eye(3)
        return cls(P, Q, sigmas=(float(sigma_tdoa), float(sigma_doa), float(sigma_odom)))

    @property
    def n_arrays(self) -> int:
        return self.P.shape[0] // 4 + 1

    def __eq__(self, other):
        if not isinstance(other, NoiseModel):
            return NotImplemented
        return np.array_equal(self.P, other.P) and np.array_equal(self.Q, other.Q)

    __hash__ = None

    def scaled(self, alpha: float) -> "NoiseModel":
        return NoiseModel(alpha * self.P, alpha * self.Q)


@dataclass(frozen=True)
class MeasurementSet:
    """Stacked noisy measurements.

    Attributes
    ----------
    y : (K, 4(N-1)) ndarray
        Row ``k`` is ``[T_21; d_21; ...; T_N1; d_N1]`` at step ``k``.
    odometry : (K-1, 3) ndarray
        Measured displacements ``s^{k+1} - s^k``.
    """

    y: np.ndarray
    odometry: np.ndarray

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        if y.ndim == 1:
            y = y.reshape(1, -1)
        odo = np.array(self.odometry, dtype=float).reshape(-1, 3)
        if y.shape[1] % 4 or y.shape[1] == 0:
            raise InvalidConfig(f"measurement rows must have 4(N-1) entries, got {y.shape[1]}")
        if odo.shape[0] != y.shape[0] - 1:
            raise InvalidConfig(
                f"expected {y.shape[0] - 1} displacement rows for K={y.shape[0]}, got {odo.shape[0]}"
            )
        y.setflags(write=False)
        odo.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "odometry", odo)

    @property
    def n_arrays(self) -> int:
        return self.y.shape[1] // 4 + 1

    @property
    def n_steps(self) -> int:
        return self.y.shape[0]

    def stacked(self) -> np.ndarray:
        """The combined vector ``m = [y1; sD1; y2; sD2; ...; yK]``."""
        return stack_observations(self.y, self.odometry)

    def __eq__(self, other):
        if not isinstance(other, MeasurementSet):
            return NotImplemented
        return np.array_equal(self.y, other.y) and np.array_equal(self.odometry, other.odometry)


def stack_observations(y: np.ndarray, odometry: np.ndarray) -> np.ndarray:
    n_steps, width = y.shape
    out = np.empty(n_steps * width + 3 * (n_steps - 1))
    stride = width + 3
    for k in range(n_steps):
        out[k * stride:k * stride + width] = y[k]
        if k < n_steps - 1:
            out[k * stride + width:(k + 1) * stride] = odometry[k]
    return out


def ideal_measurements(sc: Scenario) -> np.ndarray:
    """Noise-free ``z^k`` rows, shape (K, 4(N-1))."""
    return predict(sc.arr_params, sc.trajectory, sc.dt, sc.c)


def _step_rng(seed: int, stream: int, k: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, k])


def synthesize(sc: Scenario, nm: NoiseModel | None = None, seed: int | None = None) -> MeasurementSet:
    """Generate measurements for a scenario.

    With ``nm=None`` the output is the exact noise-free model.  Noise for step
    ``k`` (and transition ``k``) comes from its own generator seeded by
    ``(seed, stream, k)``, so any step can be reproduced in isolation.
    """
    z = ideal_measurements(sc)
    traj = sc.trajectory
    odo = np.diff(traj, axis=0)
    if nm is None:
        return MeasurementSet(z, odo)
    if nm.P.shape[0] != z.shape[1]:
        raise InvalidConfig(f"P is {nm.P.shape[0]}-dimensional but measurements are {z.shape[1]}")
    seed = sc.seed if seed is None else int(seed)
    LP = np.linalg.cholesky(nm.P)
    LQ = np.linalg.cholesky(nm.Q)
    y = np.empty_like(z)
    for k in range(sc.n_steps):
        y[k] = z[k] + LP @ _step_rng(seed, _MEASUREMENT_STREAM, k + 1).standard_normal(z.shape[1])
    for k in range(sc.n_steps - 1):
        odo[k] = odo[k] + LQ @ _step_rng(seed, _ODOMETRY_STREAM, k + 1).standard_normal(3)
    return MeasurementSet(y, odo)


# ---------------------------------------------------------------------------
# trajectory generators

def gen_observable_trajectory(k: int, start=(1.2, 0.9, 0.6), speed: float = 0.1,
                              dt: float = 1.0, segment_steps: int = 1,
                              heading: float = 0.0, climb: float = 0.8) -> np.ndarray:
    """Piecewise-linear 3D zig-zag at constant speed.

    Segment ``j`` moves along the unit vector proportional to
    ``(cos(heading + 2.4 j), sin(heading + 2.4 j), +/-climb)`` with the sign of
    the vertical component alternating, for ``segment_steps`` emissions.  Any
    three consecutive directions are linearly independent, so with
    ``segment_steps=1`` four points already span 3D.
    """
    if k < 1:
        raise InvalidConfig(f"need k >= 1, got {k}")
    if not (speed > 0 and dt > 0):
        raise InvalidConfig("speed and dt must be positive")
    if segment_steps < 1:
        raise InvalidConfig("segment_steps must be >= 1")
    pts = np.empty((k, 3))
    pts[0] = start
    for n in range(1, k):
        j = (n - 1) // segment_steps
        phi = heading + 2.4 * j
        d = np.array([np.cos(phi), np.sin(phi), climb if j % 2 == 0 else -climb])
        pts[n] = pts[n - 1] + speed * dt * d / np.linalg.norm(d)
    return pts


def _nonzero_direction(direction) -> np.ndarray:
    d = np.asarray(direction, dtype=float).reshape(3)
    if not np.any(d) or not np.all(np.isfinite(d)):
        raise InvalidConfig(f"direction must be a nonzero finite 3-vector, got {d}")
    return d


def gen_collinear_origin(k: int, direction) -> np.ndarray:
    """Points ``s^k = k * direction``: collinear with the reference origin."""
    d = _nonzero_direction(direction)
    return np.arange(1, k + 1, dtype=float)[:, None] * d


_PLANES = {
    # plane name -> (index constrained, index it is proportional to)
    "x=ay": (0, 1),
    "x=bz": (0, 2),
    "y=cz": (1, 2),
}


def gen_planar(k: int, plane: str = "x=ay", coefficient: float = 1.0,
               start=(1.0, 0.6), step: float = 0.1) -> np.ndarray:
    """Zig-zag confined to the plane ``x = a*y``, ``x = b*z`` or ``y = c*z``.

    The two free coordinates follow a 2D zig-zag starting at ``start``; the
    constrained coordinate is ``coefficient`` times its partner, so every
    point satisfies the plane equation exactly.
    """
    if plane not in _PLANES:
        raise InvalidConfig(f"plane must be one of {sorted(_PLANES)}, got {plane!r}")
    dep, partner = _PLANES[plane]
    free = [i for i in range(3) if i != dep]
    uv = np.empty((k, 2))
    uv[0] = start
    for n in range(1, k):
        phi = 1.3 * n
        uv[n] = uv[n - 1] + step * np.array([np.cos(phi), np.sin(phi) + 0.3 * (-1) ** n])
    pts = np.zeros((k, 3))
    pts[:, free] = uv
    pts[:, dep] = coefficient * pts[:, partner]
    return pts


def gen_collinear_with_array(k: int, arr: ArrayExtrinsics, direction) -> np.ndarray:
    """Points on the ray ``arr.position + lambda * direction`` with ``lambda = 1..k``."""
    d = _nonzero_direction(direction)
    return arr.position + np.arange(1, k + 1, dtype=float)[:, None] * d


DEFAULT_BOUNDS = (np.array([-3.0, -3.0, 0.0]), np.array([3.0, 3.0, 2.5]))


def random_extrinsics(n: int, bounds=None, seed: int = 0, min_separation: float = 0.5,
                      gimbal_margin: float = 0.2) -> list[ArrayExtrinsics]:
    """Random array set with array 1 as the all-zero reference.

    Positions are uniform in the ``bounds`` box (low, high corners) and kept
    at least ``min_separation`` apart.  ``tau`` is uniform on [0, 0.1] s and
    ``delta`` on [0, 1e-4] s/s.  ``theta_y`` is drawn from [0, pi] but kept
    ``gimbal_margin`` away from pi/2 so that generic sets stay well
    conditioned; the singular case is built explicitly when wanted.
    """
    if n < 2:
        raise InvalidConfig(f"need n >= 2 arrays, got {n}")
    low, high = DEFAULT_BOUNDS if bounds is None else (np.asarray(b, dtype=float) for b in bounds)
    rng = np.random.default_rng(seed)
    out = [ArrayExtrinsics.reference()]
    placed = [np.zeros(3)]
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 10000 * n:
            raise InvalidConfig("cannot place arrays with the requested separation")
        p = rng.uniform(low, high)
        if min(np.linalg.norm(p - q) for q in placed) < min_separation:
            continue
        while True:
            ty = rng.uniform(0.0, np.pi)
            if abs(ty - np.pi / 2) >= gimbal_margin:
                break
        angles = EulerAngles(rng.uniform(0, 2 * np.pi), ty, rng.uniform(0, 2 * np.pi))
        out.append(ArrayExtrinsics(p, angles, rng.uniform(0.0, 0.1), rng.uniform(0.0, 1e-4)))
        placed.append(p)
    return out


def make_scenario(arrays: Sequence[ArrayExtrinsics], trajectory, dt: float = 1.0,
                  c: float = SPEED_OF_SOUND, seed: int = 0, generator: dict | None = None) -> Scenario:
    return Scenario(tuple(arrays), trajectory, dt, c, seed, generator)


GENERATORS = {
    "observable": gen_observable_trajectory,
    "collinear_origin": gen_collinear_origin,
    "planar": gen_planar,
}


def trajectory_from_spec(spec: dict, arrays: Sequence[ArrayExtrinsics]) -> np.ndarray:
    """Expand a generator spec such as ``{"kind": "planar", "k": 10, ...}``.

    ``collinear_with_array`` takes an ``array`` field holding the 1-based
    index of the array the trajectory passes through.
    """
    params = dict(spec)
    kind = params.pop("kind", None)
    if kind == "collinear_with_array":
        idx = int(params.pop("array"))
        if not 1 <= idx <= len(arrays):
            raise InvalidConfig(f"generator.array={idx} outside 1..{len(arrays)}")
        return gen_collinear_with_array(arr=arrays[idx - 1], **params)
    if kind not in GENERATORS:
        raise InvalidConfig(
            f"generator.kind must be one of {sorted(GENERATORS) + ['collinear_with_array']}, got {kind!r}"
        )
    try:
        return GENERATORS[kind](**params)
    except TypeError as exc:
        raise InvalidConfig(f"bad generator parameters for {kind!r}: {exc}") from None
