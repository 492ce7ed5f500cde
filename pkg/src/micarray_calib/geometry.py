"""Rotation conventions and the DOA/TDOA forward models.

Rotation convention
-------------------
An array's orientation is a triple of Euler angles ``(theta_x, theta_y,
theta_z)`` and its rotation matrix is composed as::

    R = R_z(theta_z) @ R_y(theta_y) @ R_x(theta_x)

so that ``R.T = R_x.T @ R_y.T @ R_z.T``.  ``R`` maps the reference frame
(array 1) to the frame of the array; a world direction ``u`` is expressed in
the array frame as ``R.T @ u``.  ``theta_y = pi/2`` is the gimbal singularity
of this convention: ``R_x`` and ``R_z`` then rotate about the same axis.

Angles are radians.  ``theta_x`` and ``theta_z`` live in ``[0, 2*pi)`` and
``theta_y`` in ``[0, pi]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometry, InvalidConfig

TWO_PI = 2.0 * np.pi
SPEED_OF_SOUND = 343.0


def _wrap(angle: float) -> float:
    wrapped = float(np.mod(angle, TWO_PI))
    # np.mod can round up to exactly 2*pi for tiny negative inputs
    return 0.0 if wrapped >= TWO_PI else wrapped


@dataclass(frozen=True)
class EulerAngles:
    """Euler angles in radians, normalized on construction.

    ``theta_x`` and ``theta_z`` are reduced modulo ``2*pi``.  ``theta_y`` is
    reduced modulo ``2*pi`` and must then land in ``[0, pi]``; a pitch in
    ``(pi, 2*pi)`` describes a rotation that has no representative with
    ``theta_y`` in ``[0, pi]`` under the ZYX composition and is rejected.
    """

    theta_x: float = 0.0
    theta_y: float = 0.0
    theta_z: float = 0.0

    def __post_init__(self):
        tx, ty, tz = (float(v) for v in (self.theta_x, self.theta_y, self.theta_z))
        if not np.all(np.isfinite([tx, ty, tz])):
            raise InvalidConfig(f"non-finite Euler angle in {(tx, ty, tz)}")
        ty_wrapped = _wrap(ty)
        if ty_wrapped > np.pi:
            # an input of exactly pi (or 3*pi ...) can drift a few ulp past pi
            if ty_wrapped - np.pi <= 8 * np.finfo(float).eps * np.pi:
                ty_wrapped = np.pi
            else:
                raise InvalidConfig(
                    f"theta_y={ty!r} reduces to {ty_wrapped!r}, outside [0, pi]"
                )
        object.__setattr__(self, "theta_x", _wrap(tx))
        object.__setattr__(self, "theta_y", ty_wrapped)
        object.__setattr__(self, "theta_z", _wrap(tz))

    def as_array(self) -> np.ndarray:
        return np.array([self.theta_x, self.theta_y, self.theta_z])

    @classmethod
    def from_array(cls, values) -> "EulerAngles":
        tx, ty, tz = np.asarray(values, dtype=float).reshape(3)
        return cls(tx, ty, tz)


def rot_x(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _drot_x(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])


def _drot_y(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def _drot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def rotation_matrix(theta_x: float, theta_y: float, theta_z: float) -> np.ndarray:
    """``R_z @ R_y @ R_x`` for raw (unnormalized) angles."""
    return rot_z(theta_z) @ rot_y(theta_y) @ rot_x(theta_x)


def rotation_from_euler(e: EulerAngles) -> np.ndarray:
    return rotation_matrix(e.theta_x, e.theta_y, e.theta_z)


def rotation_transpose_derivatives(angles) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Partial derivatives of ``R.T`` with respect to each Euler angle.

    Returns the three 3x3 matrices ``dRx.T Ry.T Rz.T``, ``Rx.T dRy.T Rz.T``
    and ``Rx.T Ry.T dRz.T``.
    """
    tx, ty, tz = np.asarray(angles, dtype=float).reshape(3)
    rxt, ryt, rzt = rot_x(tx).T, rot_y(ty).T, rot_z(tz).T
    return (
        _drot_x(tx).T @ ryt @ rzt,
        rxt @ _drot_y(ty).T @ rzt,
        rxt @ ryt @ _drot_z(tz).T,
    )


@dataclass(frozen=True)
class ArrayExtrinsics:
    """Unknown parameters of one microphone array.

    Attributes
    ----------
    position : (3,) ndarray
        Array origin in the reference frame, meters.
    euler : EulerAngles
        Orientation of the array frame.
    tau : float
        Start-time offset relative to the reference array, seconds.
    delta : float
        Clock drift relative to the reference array, seconds per second.
    """

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    euler: EulerAngles = field(default_factory=EulerAngles)
    tau: float = 0.0
    delta: float = 0.0

    def __post_init__(self):
        pos = np.array(self.position, dtype=float).reshape(3)
        pos.setflags(write=False)
        object.__setattr__(self, "position", pos)
        if not isinstance(self.euler, EulerAngles):
            object.__setattr__(self, "euler", EulerAngles.from_array(self.euler))
        object.__setattr__(self, "tau", float(self.tau))
        object.__setattr__(self, "delta", float(self.delta))

    @classmethod
    def reference(cls) -> "ArrayExtrinsics":
        return cls()

    @property
    def is_reference(self) -> bool:
        return (
            not np.any(self.position)
            and not np.any(self.euler.as_array())
            and self.tau == 0.0
            and self.delta == 0.0
        )

    @property
    def rotation(self) -> np.ndarray:
        return rotation_from_euler(self.euler)

    def as_vector(self) -> np.ndarray:
        """The 8 parameters ``[position; euler; tau; delta]``."""
        return np.concatenate([self.position, self.euler.as_array(), [self.tau, self.delta]])

    @classmethod
    def from_vector(cls, values) -> "ArrayExtrinsics":
        v = np.asarray(values, dtype=float).reshape(8)
        return cls(v[:3], EulerAngles.from_array(v[3:6]), v[6], v[7])

    def __eq__(self, other):
        if not isinstance(other, ArrayExtrinsics):
            return NotImplemented
        return bool(np.array_equal(self.as_vector(), other.as_vector()))

    def __hash__(self):
        return hash(tuple(self.as_vector()))


def distance(source, array_pos) -> float:
    """Euclidean distance between a source and an array origin."""
    diff = np.asarray(source, dtype=float) - np.asarray(array_pos, dtype=float)
    d = float(np.sqrt(diff @ diff))
    if d == 0.0:
        raise DegenerateGeometry("source coincides with array position")
    return d


def doa(arr: ArrayExtrinsics, source) -> np.ndarray:
    """Unit direction of ``source`` seen from ``arr``, in the array frame."""
    diff = np.asarray(source, dtype=float) - arr.position
    return arr.rotation.T @ diff / distance(source, arr.position)


def tdoa(arr_i: ArrayExtrinsics, ref_traj_dist: float, source, k: int, dt: float,
         c: float = SPEED_OF_SOUND) -> float:
    """Time difference of arrival between ``arr_i`` and the reference array.

    ``ref_traj_dist`` is the source distance to the reference array at step
    ``k`` (1-based); clock drift accumulates as ``k * dt * delta``.
    """
    if not c > 0:
        raise InvalidConfig(f"speed of sound must be positive, got {c!r}")
    if k < 1:
        raise InvalidConfig(f"step index is 1-based, got {k}")
    d_i = distance(source, arr_i.position)
    return d_i / c - ref_traj_dist / c + arr_i.tau + k * dt * arr_i.delta


def predict(arr_params, sources, dt: float, c: float = SPEED_OF_SOUND) -> np.ndarray:
    """Ideal stacked measurements for raw parameters.

    Parameters
    ----------
    arr_params : (N-1, 8) array
        Rows ``[x, y, z, theta_x, theta_y, theta_z, tau, delta]`` for arrays
        2..N.  Angles are used as given (no normalization), which keeps this
        function smooth for finite differencing.
    sources : (K, 3) array
        Source positions for steps 1..K.

    Returns
    -------
    (K, 4(N-1)) array whose row ``k`` is ``[T_21; d_21; ...; T_N1; d_N1]``.
    """
    arr_params = np.atleast_2d(np.asarray(arr_params, dtype=float))
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    n_other, n_steps = arr_params.shape[0], sources.shape[0]
    if c <= 0:
        raise InvalidConfig(f"speed of sound must be positive, got {c!r}")
    d1 = np.linalg.norm(sources, axis=1)
    if np.any(d1 == 0.0):
        raise DegenerateGeometry("source at reference array", step=int(np.argmin(d1)) + 1, array=1)
    steps = np.arange(1, n_steps + 1)
    z = np.empty((n_steps, 4 * n_other))
    for j, row in enumerate(arr_params):
        diff = sources - row[:3]
        d = np.linalg.norm(diff, axis=1)
        if np.any(d == 0.0):
            raise DegenerateGeometry(
                "source coincides with array", step=int(np.argmin(d)) + 1, array=j + 2
            )
        rt = rotation_matrix(*row[3:6]).T
        z[:, 4 * j] = (d - d1) / c + row[6] + steps * dt * row[7]
        z[:, 4 * j + 1:4 * j + 4] = (diff @ rt.T) / d[:, None]
    return z
