"""Regenerate the scenario files shipped in src/micarray_calib/data/."""

from pathlib import Path

import numpy as np

from micarray_calib.geometry import ArrayExtrinsics, EulerAngles
from micarray_calib.io import save_scenario
from micarray_calib.scenario import NoiseModel, random_extrinsics, trajectory_from_spec, Scenario

DATA = Path(__file__).resolve().parents[1] / "src" / "micarray_calib" / "data"
K = 20


def write(name, arrays, generator, seed):
    traj = trajectory_from_spec(generator, arrays)
    sc = Scenario(tuple(arrays), traj, 1.0, 343.0, seed, generator)
    save_scenario(DATA / f"{name}.json", sc, NoiseModel.default(len(arrays)))


def main():
    DATA.mkdir(exist_ok=True)
    arrays = list(random_extrinsics(8, seed=3))
    # round to short decimals so the files stay readable
    arrays = [arrays[0]] + [
        ArrayExtrinsics(np.round(a.position, 3), EulerAngles.from_array(np.round(a.euler.as_array(), 3)),
                        round(a.tau, 4), round(a.delta, 7))
        for a in arrays[1:]
    ]
    obs_a = {"kind": "observable", "k": K}
    obs_b = {"kind": "observable", "k": K, "start": [-1.0, 1.5, 1.0], "heading": 1.0}
    write("observable_a", arrays, obs_a, 11)
    write("observable_b", arrays, obs_b, 12)
    write("collinear_origin", arrays, {"kind": "collinear_origin", "k": K, "direction": [0.08, 0.05, 0.04]}, 13)
    write("coplanar_origin", arrays, {"kind": "planar", "k": K, "plane": "x=ay", "coefficient": 2.0}, 14)
    write("collinear_array2", arrays,
          {"kind": "collinear_with_array", "k": K, "array": 2, "direction": [0.0, 0.05, 0.03]}, 15)
    gimbal = list(arrays)
    for i in (3, 6):  # arrays 4 and 7
        a = gimbal[i]
        e = a.euler
        gimbal[i] = ArrayExtrinsics(a.position, EulerAngles(e.theta_x, np.pi / 2, e.theta_z), a.tau, a.delta)
    write("gimbal_arrays4_7", gimbal, obs_a, 16)
    write("short_k4", arrays, {"kind": "observable", "k": 4}, 17)


if __name__ == "__main__":
    main()
