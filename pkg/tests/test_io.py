import json

import numpy as np
import pytest

from helpers import random_scenario
from micarray_calib.bundled import FIGURES, bundled_names, bundled_path, load_bundled
from micarray_calib.errors import InvalidConfig
from micarray_calib.io import (
    FileFormatError,
    dumps,
    load_measurements,
    load_scenario,
    load_state,
    read_matrix_csv,
    save_measurements,
    save_scenario,
    save_state,
    scenario_from_dict,
    scenario_to_dict,
    write_matrix_csv,
)
from micarray_calib.jacobian import StateVector
from micarray_calib.scenario import NoiseModel, synthesize


def _write(tmp_path, obj, name="s.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj) if not isinstance(obj, str) else obj)
    return p


@pytest.mark.parametrize("name", bundled_names())
def test_bundled_round_trip_is_lossless(name, tmp_path):
    sc, nm = load_bundled(name)
    save_scenario(tmp_path / "a.json", sc, nm)
    sc2, nm2 = load_scenario(tmp_path / "a.json")
    assert sc2 == sc and nm2 == nm
    save_scenario(tmp_path / "b.json", sc2, nm2)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.json").read_text() == bundled_path(name).read_text()


def test_explicit_trajectory_and_full_covariance_round_trip(tmp_path):
    sc = random_scenario(3, 7, seed=5)
    rng = np.random.default_rng(0)
    B = rng.normal(size=(8, 8))
    nm = NoiseModel(B @ B.T / 7 + np.eye(8) * 1e-3, np.diag([1e-6, 2e-6, 3e-6]))
    save_scenario(tmp_path / "a.json", sc, nm)
    sc2, nm2 = load_scenario(tmp_path / "a.json")
    assert sc2 == sc
    assert nm2 == nm
    assert "trajectory" in json.loads((tmp_path / "a.json").read_text())


def test_every_figure_scenario_is_bundled():
    names = set(bundled_names())
    assert all(n in names for group in FIGURES.values() for n in group)
    with pytest.raises(InvalidConfig):
        bundled_path("nope")


def _minimal():
    return {
        "arrays": [{"position": [0, 0, 0]}, {"position": [1, 0, 0], "euler": [0, 0.5, 0],
                                              "tau": 0.01, "delta": 1e-5}],
        "trajectory": [[0.5, 1.0, 1.0], [0.6, 1.0, 1.1]],
    }


def test_minimal_file_uses_defaults(tmp_path):
    sc, nm = load_scenario(_write(tmp_path, _minimal()))
    assert (sc.n_arrays, sc.n_steps, sc.dt, sc.c, sc.seed) == (2, 2, 1.0, 343.0, 0)
    assert nm == NoiseModel.default(2)


@pytest.mark.parametrize("mutate,field", [
    (lambda d: d.pop("arrays"), "arrays"),
    (lambda d: d["arrays"][1].pop("position"), "arrays[1].position"),
    (lambda d: d["arrays"][1].update(position=[1, 2]), "arrays[1].position"),
    (lambda d: d["arrays"][1].update(euler=[0, 4.0, 0]), "arrays[1].euler"),
    (lambda d: d["arrays"][1].update(tau="x"), "arrays[1].tau"),
    (lambda d: d.update(N=3), "N"),
    (lambda d: d.update(K=5), "K"),
    (lambda d: d.update(seed=-1), "seed"),
    (lambda d: d.update(dt="one"), "dt"),
    (lambda d: d.update(noise={"sigma_tdoa": 1e-4, "sigma_x": 1}), "noise"),
    (lambda d: d.update(noise={"P": np.eye(8).tolist(), "Q": np.eye(3).tolist()}), "noise.P"),
    (lambda d: d.update(trajectory=[[1, 2]]), "trajectory"),
    (lambda d: d.update(format="other/1"), "format"),
    (lambda d: (d.pop("trajectory"), d.update(generator={"kind": "spiral", "k": 3})), "generator"),
])
def test_field_level_errors(tmp_path, mutate, field):
    d = _minimal()
    mutate(d)
    with pytest.raises(FileFormatError) as info:
        load_scenario(_write(tmp_path, d))
    assert info.value.field == field
    assert f"'{field}'" in str(info.value)


def test_json_syntax_error_reports_line(tmp_path):
    p = _write(tmp_path, '{\n "arrays": [\n  1,,\n ]\n}')
    with pytest.raises(FileFormatError, match="line 3"):
        load_scenario(p)


def test_scenario_level_invariants_surface(tmp_path):
    d = _minimal()
    d["arrays"][0]["tau"] = 0.1
    with pytest.raises(InvalidConfig, match="reference"):
        load_scenario(_write(tmp_path, d))


def test_generator_spec_is_preserved():
    sc, nm = load_bundled("collinear_array2")
    d = scenario_to_dict(sc, nm)
    assert d["generator"]["kind"] == "collinear_with_array" and "trajectory" not in d
    assert scenario_from_dict(d)[0] == sc


def test_measurement_round_trip(tmp_path):
    sc, nm = load_bundled("observable_a")
    ms = synthesize(sc, nm)
    save_measurements(tmp_path / "m.json", ms)
    assert load_measurements(tmp_path / "m.json") == ms
    rows = json.loads((tmp_path / "m.json").read_text())["y"]
    assert all(len(r) == 28 for r in rows)


def test_measurement_file_errors(tmp_path):
    with pytest.raises(FileFormatError):
        load_measurements(_write(tmp_path, {"format": "micarray-measurements/1", "y": [[1, 2, 3]],
                                            "odometry": []}))
    with pytest.raises(FileFormatError):
        load_measurements(_write(tmp_path, {"y": [[1, 2, 3, 4]], "odometry": []}))


def test_state_round_trip(tmp_path):
    x = StateVector.from_scenario(random_scenario(4, 5, seed=1))
    save_state(tmp_path / "x.json", x)
    assert load_state(tmp_path / "x.json") == x


def test_matrix_csv_is_exact(tmp_path):
    M = np.random.default_rng(0).normal(size=(5, 4)) * 10.0 ** np.arange(-6, 6, 3)
    write_matrix_csv(tmp_path / "m.csv", M)
    assert np.array_equal(read_matrix_csv(tmp_path / "m.csv"), M)


def test_dumps_is_stable():
    obj = {"b": [1.0, 0.1], "a": None}
    assert dumps(obj) == dumps(json.loads(dumps(obj)))
