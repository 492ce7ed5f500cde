"""Calibrate from a perturbed starting point and check we land back on the truth.

Run: python3 demos/round_trip.py
"""

import numpy as np

from micarray_calib import CalibrationProblem, StateVector, load_bundled, perturb_state, solve, synthesize

sc, nm = load_bundled("observable_a")
truth = StateVector.from_scenario(sc)

for label, noise in (("noise-free", None), ("small noise", nm.scaled(1e-6))):
    ms = synthesize(sc, noise, seed=1)
    prob = CalibrationProblem.from_scenario(sc, ms, noise or nm, perturb_state(truth, seed=3))
    res = solve(prob)
    err = np.abs(res.estimate.arr_params[:, :3] - truth.arr_params[:, :3]).max()
    print(f"{label}: {res.status} after {res.iterations} iterations, "
          f"cost {res.final_cost:.3e}, max array position error {err:.2e} m")
