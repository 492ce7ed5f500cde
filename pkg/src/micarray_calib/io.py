"""Scenario, measurement and state files, plus CSV output.

All structured files are JSON.  Floats are written with Python's shortest
round-trip representation, so ``parse -> serialize -> parse`` is lossless.

Scenario file (``"format": "micarray-scenario/1"``)::

    {
      "format": "micarray-scenario/1",
      "N": 3, "K": 10,                 # optional, checked when present
      "dt": 1.0, "c": 343.0, "seed": 7,
      "arrays": [                      # array 1 first, all zeros
        {"position": [0, 0, 0], "euler": [0, 0, 0], "tau": 0, "delta": 0},
        {"position": [2.0, 0.5, 1.0], "euler": [0.3, 0.8, 1.2],
         "tau": 0.05, "delta": 4e-05},
        ...
      ],
      "trajectory": [[1.2, 0.9, 0.6], ...],      # or:
      "generator": {"kind": "observable", "k": 10, ...},
      "noise": {"sigma_tdoa": 1e-4, "sigma_doa": 0.01, "sigma_odom": 1e-3}
                                       # or {"P": [[...]], "Q": [[...]]}
    }

Generator kinds: ``observable``, ``collinear_origin`` (``k``,
``direction``), ``planar`` (``k``, ``plane``, ``coefficient``) and
``collinear_with_array`` (``k``, ``array``, ``direction``).
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import DegenerateGeometry, InvalidConfig
from .geometry import SPEED_OF_SOUND, ArrayExtrinsics, EulerAngles
from .jacobian import StateVector
from .scenario import MeasurementSet, NoiseModel, Scenario, trajectory_from_spec

SCENARIO_FORMAT = "micarray-scenario/1"
MEASUREMENT_FORMAT = "micarray-measurements/1"
STATE_FORMAT = "micarray-state/1"


class FileFormatError(InvalidConfig):
    """A structured file is malformed; ``field`` names the offending entry."""

    def __init__(self, message: str, path=None, field: str | None = None):
        self.path = None if path is None else str(path)
        self.field = field
        where = []
        if self.path:
            where.append(self.path)
        if field:
            where.append(f"field '{field}'")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)


def dumps(obj) -> str:
    return json.dumps(obj, indent=1) + "\n"


def _read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileFormatError(f"cannot read file ({exc.strerror})", path) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}",
                              path) from None
    if not isinstance(data, dict):
        raise FileFormatError("top level must be an object", path)
    return data


def _require(d: dict, key: str, ctx: str, path):
    if key not in d:
        raise FileFormatError("missing required field", path, f"{ctx}{key}")
    return d[key]


def _floats(value, shape, field, path) -> np.ndarray:
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise FileFormatError("expected numbers", path, field) from None
    if shape is not None and arr.shape != shape:
        raise FileFormatError(f"expected shape {shape}, got {arr.shape}", path, field)
    if not np.all(np.isfinite(arr)):
        raise FileFormatError("non-finite value", path, field)
    return arr


def _number(value, field, path) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FileFormatError(f"expected a number, got {value!r}", path, field)
    return float(value)


# ---------------------------------------------------------------------------
# scenarios

def _array_to_dict(a: ArrayExtrinsics) -> dict:
    return {"position": a.position.tolist(), "euler": a.euler.as_array().tolist(),
            "tau": a.tau, "delta": a.delta}


def _noise_to_dict(nm: NoiseModel) -> dict:
    if nm.sigmas is not None:
        st, sd, so = nm.sigmas
        return {"sigma_tdoa": st, "sigma_doa": sd, "sigma_odom": so}
    return {"P": nm.P.tolist(), "Q": nm.Q.tolist()}


def scenario_to_dict(sc: Scenario, nm: NoiseModel) -> dict:
    out = {
        "format": SCENARIO_FORMAT,
        "N": sc.n_arrays,
        "K": sc.n_steps,
        "dt": sc.dt,
        "c": sc.c,
        "seed": sc.seed,
        "arrays": [_array_to_dict(a) for a in sc.arrays],
    }
    if sc.generator is not None:
        out["generator"] = sc.generator
    else:
        out["trajectory"] = sc.trajectory.tolist()
    out["noise"] = _noise_to_dict(nm)
    return out


def scenario_from_dict(d: dict, path=None) -> tuple[Scenario, NoiseModel]:
    fmt = d.get("format", SCENARIO_FORMAT)
    if fmt != SCENARIO_FORMAT:
        raise FileFormatError(f"unsupported format {fmt!r}", path, "format")
    raw_arrays = _require(d, "arrays", "", path)
    if not isinstance(raw_arrays, list) or len(raw_arrays) < 2:
        raise FileFormatError("need a list of at least 2 arrays", path, "arrays")
    arrays = []
    for i, a in enumerate(raw_arrays):
        ctx = f"arrays[{i}]."
        if not isinstance(a, dict):
            raise FileFormatError("expected an object", path, f"arrays[{i}]")
        pos = _floats(_require(a, "position", ctx, path), (3,), ctx + "position", path)
        eul = _floats(a.get("euler", [0.0, 0.0, 0.0]), (3,), ctx + "euler", path)
        try:
            angles = EulerAngles.from_array(eul)
        except InvalidConfig as exc:
            raise FileFormatError(str(exc), path, ctx + "euler") from None
        arrays.append(ArrayExtrinsics(pos, angles, _number(a.get("tau", 0.0), ctx + "tau", path),
                                      _number(a.get("delta", 0.0), ctx + "delta", path)))
    generator = d.get("generator")
    if generator is not None:
        if not isinstance(generator, dict):
            raise FileFormatError("expected an object", path, "generator")
        try:
            traj = trajectory_from_spec(generator, arrays)
        except InvalidConfig as exc:
            raise FileFormatError(str(exc), path, "generator") from None
    else:
        traj = _floats(_require(d, "trajectory", "", path), None, "trajectory", path)
        if traj.ndim != 2 or traj.shape[1] != 3 or traj.shape[0] < 1:
            raise FileFormatError(f"expected a (K, 3) list, got shape {traj.shape}", path, "trajectory")
    for key, actual in (("N", len(arrays)), ("K", traj.shape[0])):
        if key in d and d[key] != actual:
            raise FileFormatError(f"declares {d[key]} but data has {actual}", path, key)
    seed = d.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise FileFormatError(f"expected a non-negative integer, got {seed!r}", path, "seed")
    dt = _number(d.get("dt", 1.0), "dt", path)
    c = _number(d.get("c", SPEED_OF_SOUND), "c", path)
    try:
        sc = Scenario(tuple(arrays), traj, dt, c, seed, generator)
    except (InvalidConfig, DegenerateGeometry) as exc:
        raise FileFormatError(str(exc), path) from None
    noise = d.get("noise", {})
    if not isinstance(noise, dict):
        raise FileFormatError("expected an object", path, "noise")
    try:
        if "P" in noise or "Q" in noise:
            nm = NoiseModel(_floats(_require(noise, "P", "noise.", path), None, "noise.P", path),
                            _floats(_require(noise, "Q", "noise.", path), None, "noise.Q", path))
            if nm.n_arrays != sc.n_arrays:
                raise FileFormatError(f"P is sized for {nm.n_arrays} arrays", path, "noise.P")
        else:
            kw = {k: _number(noise[k], f"noise.{k}", path)
                  for k in ("sigma_tdoa", "sigma_doa", "sigma_odom") if k in noise}
            unknown = set(noise) - {"sigma_tdoa", "sigma_doa", "sigma_odom"}
            if unknown:
                raise FileFormatError(f"unknown keys {sorted(unknown)}", path, "noise")
            nm = NoiseModel.default(sc.n_arrays, **kw)
    except FileFormatError:
        raise
    except InvalidConfig as exc:
        raise FileFormatError(str(exc), path, "noise") from None
    return sc, nm


def load_scenario(path) -> tuple[Scenario, NoiseModel]:
    return scenario_from_dict(_read_json(path), path)


def save_scenario(path, sc: Scenario, nm: NoiseModel) -> None:
    Path(path).write_text(dumps(scenario_to_dict(sc, nm)))


# ---------------------------------------------------------------------------
# measurements

def measurements_to_dict(ms: MeasurementSet) -> dict:
    return {"format": MEASUREMENT_FORMAT, "N": ms.n_arrays, "K": ms.n_steps,
            "y": ms.y.tolist(), "odometry": ms.odometry.tolist()}


def measurements_from_dict(d: dict, path=None) -> MeasurementSet:
    if d.get("format") != MEASUREMENT_FORMAT:
        raise FileFormatError(f"unsupported format {d.get('format')!r}", path, "format")
    y = _floats(_require(d, "y", "", path), None, "y", path)
    odo = _floats(_require(d, "odometry", "", path), None, "odometry", path)
    if y.ndim != 2:
        raise FileFormatError("expected a list of rows", path, "y")
    try:
        ms = MeasurementSet(y, odo.reshape(-1, 3) if odo.size else np.zeros((0, 3)))
    except (InvalidConfig, ValueError) as exc:
        raise FileFormatError(str(exc), path) from None
    for key, actual in (("N", ms.n_arrays), ("K", ms.n_steps)):
        if key in d and d[key] != actual:
            raise FileFormatError(f"declares {d[key]} but data has {actual}", path, key)
    return ms


def load_measurements(path) -> MeasurementSet:
    return measurements_from_dict(_read_json(path), path)


def save_measurements(path, ms: MeasurementSet) -> None:
    Path(path).write_text(dumps(measurements_to_dict(ms)))


# ---------------------------------------------------------------------------
# states

def state_to_dict(state: StateVector) -> dict:
    arrays = [{"index": i, "position": row[:3].tolist(), "euler": row[3:6].tolist(),
               "tau": float(row[6]), "delta": float(row[7])}
              for i, row in enumerate(state.arr_params, start=2)]
    return {"format": STATE_FORMAT, "N": state.n_arrays, "K": state.n_steps,
            "arrays": arrays, "sources": state.sources.tolist()}


def state_from_dict(d: dict, path=None) -> StateVector:
    if d.get("format") != STATE_FORMAT:
        raise FileFormatError(f"unsupported format {d.get('format')!r}", path, "format")
    rows = []
    for j, a in enumerate(_require(d, "arrays", "", path)):
        ctx = f"arrays[{j}]."
        rows.append(np.concatenate([
            _floats(_require(a, "position", ctx, path), (3,), ctx + "position", path),
            _floats(_require(a, "euler", ctx, path), (3,), ctx + "euler", path),
            [_number(_require(a, "tau", ctx, path), ctx + "tau", path),
             _number(_require(a, "delta", ctx, path), ctx + "delta", path)],
        ]))
    src = _floats(_require(d, "sources", "", path), None, "sources", path)
    if src.ndim != 2 or src.shape[1] != 3:
        raise FileFormatError(f"expected a (K, 3) list, got shape {src.shape}", path, "sources")
    state = StateVector(np.array(rows).reshape(-1, 8), src)
    for key, actual in (("N", state.n_arrays), ("K", state.n_steps)):
        if key in d and d[key] != actual:
            raise FileFormatError(f"declares {d[key]} but data has {actual}", path, key)
    return state


def load_state(path) -> StateVector:
    return state_from_dict(_read_json(path), path)


def save_state(path, state: StateVector) -> None:
    Path(path).write_text(dumps(state_to_dict(state)))


# ---------------------------------------------------------------------------
# CSV

def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def write_matrix_csv(path, M) -> None:
    """Row-major dump, one matrix row per line, no header."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    write_csv(path, None, M.tolist())


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
