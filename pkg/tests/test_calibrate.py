import numpy as np
import pytest

from helpers import random_scenario
from micarray_calib.bundled import load_bundled
from micarray_calib.calibrate import (
    CalibrationProblem,
    SolverOptions,
    covariance_from_fim,
    crlb,
    initial_guess_builder,
    normalize_angles,
    perturb_state,
    residual,
    solve,
)
from micarray_calib.errors import InvalidConfig, NonConvergence, SingularFIM, SingularNormalEquations
from micarray_calib.io import save_state
from micarray_calib.jacobian import StateVector, jacobian_at, whiten
from micarray_calib.scenario import NoiseModel, synthesize


def _problem(sc, nm=None, init=None, noisy=False, seed=0):
    nm = nm or NoiseModel.default(sc.n_arrays)
    ms = synthesize(sc, nm if noisy else None, seed)
    truth = StateVector.from_scenario(sc)
    return CalibrationProblem.from_scenario(sc, ms, nm, truth if init is None else init), truth


def _angle_error(a, b):
    return (a - b + np.pi) % (2 * np.pi) - np.pi


def _max_error(est, truth, N):
    e = est.to_vector() - truth.to_vector()
    for j in range(N - 1):
        e[8 * j + 3:8 * j + 6] = _angle_error(est.arr_params[j, 3:6], truth.arr_params[j, 3:6])
    return np.abs(e).max()


def test_zero_residual_at_truth():
    sc = random_scenario(3, 8, seed=1)
    prob, truth = _problem(sc)
    r, cost = residual(truth, prob)
    assert not np.any(r) and cost == 0.0


def test_cost_scales_inversely_with_W():
    sc = random_scenario(3, 6, seed=2)
    nm = NoiseModel.default(3)
    prob, truth = _problem(sc, nm, noisy=True)
    x = perturb_state(truth, seed=1)
    _, c1 = residual(x, prob)
    scaled = CalibrationProblem.from_scenario(sc, prob.measurements, nm.scaled(4.0), x)
    _, c4 = residual(x, scaled)
    assert c4 == pytest.approx(c1 / 4.0, rel=1e-12)


def test_problem_validation():
    sc = random_scenario(3, 6, seed=2)
    ms = synthesize(sc)
    truth = StateVector.from_scenario(sc)
    with pytest.raises(InvalidConfig):
        CalibrationProblem(ms, NoiseModel.default(4), truth)
    with pytest.raises(InvalidConfig):
        CalibrationProblem(ms, NoiseModel.default(3), StateVector.from_scenario(sc.prefix(5)))


def test_init_at_truth_is_fixed_point():
    sc = random_scenario(3, 10, seed=3)
    prob, truth = _problem(sc)
    res = solve(prob)
    assert res.converged and res.iterations <= 2
    assert res.final_cost < 1e-20


def test_round_trip_from_perturbed_start():
    sc = random_scenario(4, 12, seed=4)
    prob, truth = _problem(sc)
    prob = CalibrationProblem.from_scenario(sc, prob.measurements, prob.noise, perturb_state(truth, seed=2))
    res = solve(prob)
    assert res.converged and res.iterations <= 200
    assert _max_error(res.estimate, truth, 4) < 1e-6
    assert res.rank_report.full_column_rank
    assert res.covariance is not None


def test_gradient_is_at_roundoff_level_after_noise_free_solve():
    sc = random_scenario(3, 10, seed=5)
    prob, truth = _problem(sc)
    prob = CalibrationProblem.from_scenario(sc, prob.measurements, prob.noise, perturb_state(truth, seed=3))
    res = solve(prob)
    Jw = whiten(jacobian_at(res.estimate, sc.dt, sc.c).J, prob.noise, sc.n_steps)
    rw = whiten(residual(res.estimate, prob)[0], prob.noise, sc.n_steps)
    # scale-free gradient: |J^T W^-1 r| relative to the largest singular value of W^-1/2 J
    assert np.linalg.norm(Jw.T @ rw) / np.linalg.norm(Jw, 2) < 1e-8
    assert res.gradient_norm == pytest.approx(np.linalg.norm(Jw.T @ rw), rel=1e-6, abs=1e-12)


def test_accepted_steps_never_increase_cost():
    sc = random_scenario(3, 10, seed=6)
    prob, truth = _problem(sc, noisy=True)
    prob = CalibrationProblem.from_scenario(sc, prob.measurements, prob.noise, perturb_state(truth, seed=4))
    res = solve(prob)
    costs = [h.cost for h in res.history]
    assert all(b <= a for a, b in zip(costs, costs[1:]))
    assert res.final_cost >= 0.0


def test_degenerate_scenario_raises_with_rank_report():
    sc = load_bundled("collinear_origin")[0]
    prob, truth = _problem(sc)
    prob = CalibrationProblem.from_scenario(sc, prob.measurements, prob.noise, perturb_state(truth, seed=1))
    with pytest.raises((SingularNormalEquations, NonConvergence)) as info:
        solve(prob, SolverOptions(max_iter=30))
    rep = info.value.result.rank_report
    assert not rep.full_column_rank
    assert rep.rank_Tbar < 3


def test_iteration_limit_raises_nonconvergence():
    sc = random_scenario(3, 10, seed=7)
    prob, truth = _problem(sc)
    prob = CalibrationProblem.from_scenario(sc, prob.measurements, prob.noise, perturb_state(truth, seed=5))
    with pytest.raises(NonConvergence) as info:
        solve(prob, SolverOptions(max_iter=1))
    assert info.value.result.iterations == 1
    assert not info.value.result.converged


def test_normalize_angles():
    x = np.zeros(8 + 3)
    x[3:6] = [-0.1, 3.5, 7.0]
    normalize_angles(x, 2)
    assert x[3] == pytest.approx(2 * np.pi - 0.1)
    assert x[4] == pytest.approx(3.5 - 2 * np.pi)
    assert x[5] == pytest.approx(7.0 - 2 * np.pi)


# -- covariance ------------------------------------------------------------------

def test_covariance_observable():
    sc = random_scenario(3, 10, seed=8)
    cov = crlb(sc, NoiseModel.default(3))
    assert cov.shape == (16 + 30, 16 + 30)
    assert np.all(np.diag(cov) > 0)
    assert np.allclose(cov, cov.T)


def test_covariance_singular_for_short_trajectory():
    sc = random_scenario(3, 4, seed=8)
    with pytest.raises(SingularFIM) as info:
        crlb(sc, NoiseModel.default(3))
    exc = info.value
    assert exc.rank < exc.n_params
    J = jacobian_at(StateVector.from_scenario(sc), sc.dt, sc.c).J
    assert np.abs(J @ exc.null_space).max() < 1e-8


def test_covariance_matches_qr_inverse():
    # independent route: Jw = QR gives (Jw^T Jw)^-1 = R^-1 R^-T
    from scipy.linalg import solve_triangular

    from micarray_calib.jacobian import assemble

    sc = random_scenario(3, 10, seed=8)
    nm = NoiseModel.default(3)
    b = assemble(sc)
    R = np.linalg.qr(whiten(b.J, nm, sc.n_steps), mode="r")
    Rinv = solve_triangular(R, np.eye(R.shape[0]))
    ref = Rinv @ Rinv.T
    cov = covariance_from_fim(b, nm)
    assert np.linalg.norm(cov - ref) / np.linalg.norm(ref) < 1e-6


# -- initial guesses -------------------------------------------------------------

def test_dead_reckoning_from_origin():
    sc = random_scenario(3, 6, seed=1)
    ms = synthesize(sc, NoiseModel.default(3), seed=1)
    x0 = initial_guess_builder(ms, "dead_reckoning")
    assert np.array_equal(x0.sources[0], [0, 0, 0])
    assert np.allclose(x0.sources[1:], np.cumsum(ms.odometry, axis=0))
    assert not np.any(x0.arr_params)


def test_truth_plus_zero_noise_is_truth():
    sc = random_scenario(3, 6, seed=1)
    truth = StateVector.from_scenario(sc)
    zero = {k: 0.0 for k in ("position", "angle", "tau", "delta", "source")}
    x0 = initial_guess_builder(synthesize(sc), "truth_plus_noise", truth=truth, scales=zero)
    assert x0 == truth
    with pytest.raises(InvalidConfig):
        initial_guess_builder(synthesize(sc), "truth_plus_noise")


def test_perturbation_bounds():
    sc = random_scenario(3, 6, seed=1)
    truth = StateVector.from_scenario(sc)
    d = perturb_state(truth, seed=3).to_vector() - truth.to_vector()
    arr = d[:16].reshape(2, 8)
    assert np.abs(arr[:, :3]).max() <= 0.2 and np.abs(arr[:, 3:6]).max() <= 0.1
    assert np.abs(arr[:, 6]).max() <= 0.02 and np.abs(arr[:, 7]).max() <= 2e-5
    assert np.abs(d[16:]).max() <= 0.2


def test_state_file_strategy(tmp_path):
    sc = random_scenario(3, 6, seed=1)
    truth = StateVector.from_scenario(sc)
    save_state(tmp_path / "x0.json", truth)
    assert initial_guess_builder(synthesize(sc), "file", path=tmp_path / "x0.json") == truth
    with pytest.raises(InvalidConfig):
        initial_guess_builder(synthesize(sc.prefix(5)), "file", path=tmp_path / "x0.json")
    with pytest.raises(InvalidConfig):
        initial_guess_builder(synthesize(sc), "guess")
