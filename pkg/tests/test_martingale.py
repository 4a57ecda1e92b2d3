import io

import numpy as np
import pytest

from pathlab import cylinder as cyl
from pathlab import geometry as geo
from pathlab import martingale as mg
from pathlab import pathsim as ps
from pathlab.pathsim import RngStream, TimeGrid


def ens_for(m, T=1.0, h=1e-2, n_paths=2000, seed=0, start=None, include=()):
    g = TimeGrid.uniform(T, h, include=include)
    return ps.sample_paths(m, start or geo.start_framepoint(m), g, seed, np.arange(n_paths))


def sphere_bump(m, offset=0.3, sigma=0.7):
    center = geo.exp_map(m, geo.base_point(m), offset * geo.standard_frame(m)[:, 0])
    return cyl.GaussianBump(center, sigma)


# ---------------------------------------------------------------- F_t along paths

def test_martingale_path_linear_is_exact():
    m = geo.euclidean(2)
    ens = ens_for(m, n_paths=20)
    a = np.array([0.5, -1.0])
    proc = mg.martingale_path(cyl.one_point(cyl.Linear(a), 1.0), ens)
    assert np.allclose(proc.values, ens.points @ a)
    assert np.all(proc.stderr == 0.0)


def test_martingale_path_endpoints_nested():
    m = geo.sphere(2)
    ens = ens_for(m, T=0.5, h=0.05, n_paths=10, include=(0.25,))
    F = cyl.combination([(1.0, sphere_bump(m), 0.25), (1.0, cyl.Linear(np.array([0, 0, 1.0])), 0.5)])
    proc = mg.martingale_path(F, ens, times=[0.0, 0.25, 0.5], inner_budget=64,
                              rng=RngStream(0, ("inner",)))
    assert np.allclose(proc.values[:, -1], cyl.eval(F, ens))
    assert np.all(proc.stderr[:, -1] == 0.0) and np.all(proc.stderr[:, 0] > 0)
    # every path starts at the same point: the t = 0 estimates agree within noise
    spread = proc.values[:, 0].std(ddof=1)
    assert spread < 4 * proc.stderr[:, 0].mean()


def test_martingale_path_one_point_is_heat_flow():
    m = geo.sphere(2)
    bump = sphere_bump(m)
    ens = ens_for(m, n_paths=5, h=0.05)
    proc = mg.martingale_path(cyl.one_point(bump, 1.0), ens)
    t = ens.grid.times[7]
    X = ens.at(t)[0]
    assert np.allclose(proc.values[:, 7], bump.heat_flow(m, 1.0 - t, X)[0])


def test_process_sample_csv():
    m = geo.euclidean(2)
    ens = ens_for(m, h=0.5, n_paths=2)
    proc = mg.martingale_path(cyl.one_point(cyl.Linear(np.ones(2)), 1.0), ens)
    buf = io.StringIO()
    proc.write_csv(buf)
    lines = buf.getvalue().strip().splitlines()
    assert lines[0] == "path_id,time,value,stderr"
    assert len(lines) == 1 + 2 * 3


def test_tower_property_nested():
    m = geo.sphere(2)
    F = cyl.combination([(1.0, sphere_bump(m), 0.25), (0.5, cyl.Linear(np.array([0, 1.0, 1.0])), 0.5)])
    g = TimeGrid.uniform(0.5, 0.025, include=(0.25,))
    path = ps.sample_path(m, geo.start_framepoint(m), g, RngStream(1, ("outer",)))
    t1, t2 = 0.1, 0.35
    v1, se1 = cyl.conditional_value(F, path, t1, inner_budget=2000, rng=RngStream(2, ("a",)),
                                    method="nested")
    vals = []
    for b in range(40):
        cont = ps.continuation(m, path, t1, g.tail(t1), RngStream(3, ("cont", b)))
        v, _ = cyl.conditional_value(F, cont, t2, inner_budget=100, rng=RngStream(4, ("b", b)),
                                     method="nested")
        vals.append(v)
    vals = np.array(vals)
    se2 = vals.std(ddof=1) / np.sqrt(len(vals))
    pooled = np.hypot(se1, se2)
    print("tower:", v1, "+-", se1, "vs", vals.mean(), "+-", se2)
    assert abs(v1 - vals.mean()) < 3 * pooled


# ---------------------------------------------------------------- Ito reconstruction

def test_residual_vanishes_for_linear():
    m = geo.euclidean(2)
    ens = ens_for(m, h=1e-2, n_paths=500)
    R = mg.ito_reconstruction_residual(cyl.one_point(cyl.Linear(np.array([1.0, -2.0])), 1.0), ens)
    assert np.max(np.abs(R)) < 1e-12


def test_residual_of_quadratic_is_euler_remainder():
    # for |y|^2 the residual is sum_k (|dW_k|^2 - n h) exactly
    m = geo.euclidean(2)
    ens = ens_for(m, h=1e-2, n_paths=200)
    R = mg.ito_reconstruction_residual(cyl.one_point(cyl.Quadratic(np.zeros(2)), 1.0), ens)
    oracle = np.sum(np.sum(ens.increments ** 2, axis=-1) - 2 * 1e-2, axis=-1)
    assert np.allclose(R, oracle, atol=1e-10)


def test_residual_slope_for_quadratic():
    m = geo.euclidean(2)
    F = cyl.one_point(cyl.Quadratic(np.zeros(2)), 1.0)
    slope, table = mg.residual_slope(F, m, geo.start_framepoint(m), 1.0, [4e-3, 2e-3, 1e-3],
                                     seed=3, n_paths=2000)
    print("E[R^2] vs h:", table, "slope", slope)
    # oracle: E[R^2] = 2 n T h = 4 h
    for h, e, se in table:
        assert abs(e - 4 * h) < 4 * se
    assert 0.7 <= slope <= 1.3


def test_residual_mean_zero_on_sphere_bump():
    m = geo.sphere(2)
    F = cyl.one_point(sphere_bump(m), 1.0)
    chunks = mg.chunked_ensembles(m, geo.start_framepoint(m), TimeGrid.uniform(1.0, 1e-3), 5,
                                  10000, chunk_size=500)
    R = mg.ito_reconstruction_residual(F, chunks)
    est, se = R.mean(), R.std(ddof=1) / np.sqrt(len(R))
    print("sphere bump residual:", est, "+-", se)
    assert abs(est) < 3 * se


def test_residual_uncorrelated_with_initial_value():
    m = geo.sphere(2)
    F = cyl.one_point(sphere_bump(m, sigma=0.5), 0.5)
    rng = np.random.default_rng(0)
    g = TimeGrid.uniform(0.5, 5e-3)
    R_all, F0_all = [], []
    for j in range(20):
        p = geo.exp_map(m, geo.base_point(m), np.append(rng.normal(size=2) * 0.6, 0.0))
        start = geo.start_framepoint(m, p)
        ens = ps.sample_paths(m, start, g, 100 + j, np.arange(200))
        R_all.append(mg.ito_reconstruction_residual(F, ens))
        F0_all.append(np.full(200, F.heat_flow(m, 0.5, p)[0]))
    R, F0 = np.concatenate(R_all), np.concatenate(F0_all)
    r = np.corrcoef(R, F0)[0, 1]
    half = 2.576 / np.sqrt(len(R) - 3)
    print("corr(R, F_0) =", r, "99% half-width", half)
    assert abs(np.arctanh(r)) < half


# ---------------------------------------------------------------- quadratic variation and isometry

def test_quadratic_variation_linear():
    m = geo.euclidean(2)
    a = np.array([0.6, 0.8])
    res = mg.quadratic_variation_check(cyl.one_point(cyl.Linear(a), 1.0), ens_for(m))
    print(res)
    assert res.verdict == "pass"
    assert res.details["compensator_mean"] == pytest.approx(1.0)
    assert abs(res.details["qv_mean"] - 1.0) < 0.02


def test_quadratic_variation_constant():
    m = geo.euclidean(2)
    res = mg.quadratic_variation_check(cyl.constant(2.0), ens_for(m, n_paths=100))
    assert res.details["qv_mean"] == 0.0 and res.details["compensator_mean"] == 0.0
    assert res.verdict == "pass"


def test_quadratic_variation_quadratic_against_gaussian_moments():
    m = geo.euclidean(2)
    x0 = np.array([0.5, -0.5])
    start = geo.FramePoint(x0, np.eye(2))
    ens = ens_for(m, h=5e-3, n_paths=4000, start=start)
    res = mg.quadratic_variation_check(cyl.one_point(cyl.Quadratic(np.zeros(2)), 1.0), ens)
    oracle = 4 * (x0 @ x0 * 1.0 + 2 * 1.0 / 2)
    print(res, "oracle", oracle)
    assert res.verdict == "pass"
    # the compensator is a Riemann sum of 4|X_t|^2, unbiased up to O(h)
    assert abs(res.details["compensator_mean"] - oracle) < 0.05 * oracle


def test_isometry_linear_and_constant():
    m = geo.euclidean(2)
    a = np.array([0.6, 0.8])
    res = mg.ito_isometry_check(cyl.one_point(cyl.Linear(a), 1.0), ens_for(m))
    assert res.verdict == "pass"
    assert res.details["lhs"] == pytest.approx(1.0)
    # with the control variate the variance side is sum <a, dW_j>^2: unbiased for |a|^2 T
    lo, hi = res.details["rhs_ci"]
    assert lo <= 1.0 <= hi
    # Var sum <a, dW_j>^2 = 2 h T against Var <a, W_T>^2 = 2 T^2: ten times smaller spread
    se_cv = (hi - lo) / (2 * 2.576)
    assert se_cv < res.details["rhs_plain_se"] / 5
    assert abs(res.details["rhs_plain"] - 1.0) < 4 * res.details["rhs_plain_se"]
    res0 = mg.ito_isometry_check(cyl.constant(1.0), ens_for(m, n_paths=50))
    assert res0.details["lhs"] == 0.0 and res0.details["rhs"] == 0.0


def test_isometry_estimators_agree_on_sphere_bump():
    m = geo.sphere(2)
    F = cyl.one_point(sphere_bump(m), 1.0)
    ens = ens_for(m, h=5e-3, n_paths=4000)
    res = mg.ito_isometry_check(F, ens)
    d = res.details
    joint = np.hypot((d["lhs_ci"][1] - d["lhs_ci"][0]) / (2 * 2.576), d["rhs_plain_se"])
    print(res)
    assert res.verdict == "pass"
    assert abs(d["lhs"] - d["rhs_plain"]) < 3 * joint + res.margin


def test_identity_suite_matches_individual_checks():
    m = geo.euclidean(2)
    ens = ens_for(m, n_paths=300, h=0.02)
    F = cyl.one_point(cyl.Quadratic(np.zeros(2)), 1.0)
    suite = mg.identity_suite(F, ens)
    qv = mg.quadratic_variation_check(F, ens)
    iso = mg.ito_isometry_check(F, ens)
    R = mg.ito_reconstruction_residual(F, ens)
    assert suite["quadratic_variation"].estimate == pytest.approx(qv.estimate)
    assert suite["ito_isometry"].estimate == pytest.approx(iso.estimate)
    assert suite["ito_residual"].estimate == pytest.approx(R.mean())


def test_identity_suite_over_chunks_equals_single_ensemble_for_linear():
    m = geo.euclidean(2)
    F = cyl.one_point(cyl.Linear(np.array([1.0, 1.0])), 1.0)
    g = TimeGrid.uniform(1.0, 0.02)
    chunks = list(mg.chunked_ensembles(m, geo.start_framepoint(m), g, 2, 600, chunk_size=200))
    whole = ps.sample_paths(m, geo.start_framepoint(m), g, 2, np.arange(600))
    a = mg.identity_suite(F, chunks)
    b = mg.identity_suite(F, whole)
    for k in a:
        assert a[k].estimate == pytest.approx(b[k].estimate, abs=1e-12)


def test_margin_constant_calibration():
    # for |y|^2 from the origin RMS(R) = sqrt(h / T) RMS(F - F_0) exactly in expectation
    c = mg.calibrate_margin_constant(n_paths=20000)
    print("calibrated margin constant:", c)
    assert abs(c - 1.0) < 0.03


# ---------------------------------------------------------------- submartingale test

def _linear_process(n_paths=3000):
    m = geo.euclidean(2)
    ens = ens_for(m, h=0.05, n_paths=n_paths)
    a = np.array([0.6, 0.8])
    proc = mg.martingale_path(cyl.one_point(cyl.Linear(a), 1.0), ens)
    return proc, ens


def test_martingale_passes_submartingale_test():
    proc, ens = _linear_process()
    res = mg.submartingale_test(proc.values, proc.times, ens.grid.h)
    assert res.verdict == "pass"


def test_square_of_martingale_has_linear_drift():
    proc, ens = _linear_process()
    Y = proc.values ** 2
    res = mg.submartingale_test(Y, proc.times, ens.grid.h)
    assert res.verdict == "pass"
    j, k = 4, 16
    inc = Y[:, k] - Y[:, j]
    se = inc.std(ddof=1) / np.sqrt(len(inc))
    expected = 1.0 * (proc.times[k] - proc.times[j])
    assert abs(inc.mean() - expected) < 4 * se


def test_negated_square_fails():
    proc, ens = _linear_process()
    res = mg.submartingale_test(-proc.values ** 2, proc.times, ens.grid.h)
    print(res)
    assert res.verdict == "fail"


def test_convex_function_of_martingale_passes():
    m = geo.sphere(2)
    ens = ens_for(m, h=0.02, n_paths=3000)
    proc = mg.martingale_path(cyl.one_point(sphere_bump(m), 1.0), ens)
    for phi in (np.exp, np.square, np.abs):
        res = mg.submartingale_test(phi(proc.values - 0.3), proc.times, ens.grid.h,
                                    pairs="consecutive")
        assert res.verdict == "pass", phi


def test_submartingale_extra_groups_share_bonferroni_budget():
    proc, ens = _linear_process(500)
    base = mg.submartingale_test(proc.values, proc.times[:], ens.grid.h, pairs="consecutive")
    more = mg.submartingale_test(proc.values, proc.times, ens.grid.h, pairs="consecutive",
                                 extra=[("prefix", np.random.default_rng(0).normal(size=50))])
    assert more.details["tests"] == base.details["tests"] + 1
    assert more.details["z"] > base.details["z"]
