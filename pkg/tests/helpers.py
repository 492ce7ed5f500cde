"""Shared scenario builders for the test suite."""

import numpy as np

from micarray_calib.scenario import (
    NoiseModel,
    gen_observable_trajectory,
    make_scenario,
    random_extrinsics,
)


def random_scenario(n_arrays, n_steps, seed, dt=1.0):
    """Non-degenerate scenario with random extrinsics and a zig-zag track."""
    rng = np.random.default_rng(seed)
    arrays = random_extrinsics(n_arrays, seed=seed)
    start = rng.uniform([-1.5, -1.5, 0.3], [1.5, 1.5, 1.5])
    traj = gen_observable_trajectory(n_steps, start=start, heading=rng.uniform(0, 2 * np.pi), dt=dt)
    return make_scenario(arrays, traj, dt=dt, seed=seed)


def default_noise(sc):
    return NoiseModel.default(sc.n_arrays)
