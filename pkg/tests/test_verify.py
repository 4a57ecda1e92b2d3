import numpy as np
import pytest

from pathlab import cylinder as cyl
from pathlab import geometry as geo
from pathlab import verify as vf
from pathlab.pathsim import ConfigurationError

E2 = geo.euclidean(2)
S2 = geo.sphere(2)


def study(m, F, h=1e-2, paths=2000, seed=0, **kw):
    b = vf.Budgets(outer_paths=paths, chunk_size=min(paths, 1000), prefix_inner=512,
                   inner_paths=kw.pop("inner", 64), root_inner=kw.pop("root_inner", 4000),
                   base_paths=kw.pop("base_paths", 4000), prefixes=kw.pop("prefixes", 4))
    return vf.make_study(m, F, h=h, budgets=b, seed=seed, **kw)


def within_ci(rep, value=0.0):
    lo, hi = rep.slack_ci
    return lo - rep.margin - 1e-12 <= value <= hi + rep.margin + 1e-12


@pytest.fixture(scope="module")
def linear_data():
    F = cyl.one_point(cyl.Linear(np.array([0.6, 0.8])), 1.0)
    return vf.collect(study(E2, F))


@pytest.fixture(scope="module")
def quadratic_data():
    F = cyl.one_point(cyl.Quadratic(np.zeros(2)), 1.0)
    return vf.collect(study(E2, F, h=5e-3, paths=4000))


def sphere_bump_function(sigma=0.7):
    center = geo.exp_map(S2, geo.base_point(S2), np.array([0.3, 0.0, 0.0]))
    return cyl.one_point(cyl.GaussianBump(center, sigma), 0.5)


# ---------------------------------------------------------------- twisted OU form

def test_twisted_ou_reduces_to_malliavin_norm():
    F = cyl.combination([(1.0, cyl.Linear(np.array([1.0, 0.0])), 0.5),
                         (2.0, cyl.Linear(np.array([0.0, 1.0])), 1.0)])
    ens = study(E2, F, paths=5).grid
    from pathlab import pathsim as ps
    e = ps.sample_paths(E2, geo.start_framepoint(E2), ens, 0, np.arange(5))
    sg = cyl.slot_gradients(F, e)
    ou = vf.TwistedOUForm(0.0, F.T, 0.0)(F.times, sg)
    assert np.allclose(ou, cyl.malliavin_norm_sq(F, e))


def test_twisted_ou_linear_closed_form():
    a = np.array([0.6, 0.8])
    sg = np.broadcast_to(a, (3, 1, 2))
    for k in (0.5, 1.0, 2.0):
        ou = vf.TwistedOUForm(0.0, 1.0, k)((1.0,), sg)
        assert np.allclose(ou, 2 / k * np.sinh(k / 2))
        # t1 < T: the far part carries the (1 - exp(-k (t1 - t0))) / 2 prefactor
        ou2 = vf.TwistedOUForm(0.0, 0.5, k)((1.0,), sg)
        far = 0.5 * (1 - np.exp(-k * 0.5)) * 2 / k * (np.exp(k / 4) - 1)
        assert np.allclose(ou2, 2 / k * np.sinh(k / 4) + far)


# ---------------------------------------------------------------- equality cases (flat, linear)

def test_equality_cases_linear_flat(linear_data):
    for tag in ("C1", "G1", "R3", "R6", "H2"):
        rep = vf.run_check(tag, linear_data, 0.0, **({"t": 0.5} if tag == "G1" else {}))
        print(tag, rep.slack, rep.slack_ci, rep.margin, rep.verdict)
        assert rep.verdict == "pass"
        assert within_ci(rep)
    c1 = vf.run_check("C1", linear_data, 0.0)
    assert np.allclose(c1.details["mean_process"], 1.0)
    h2 = vf.run_check("H2", linear_data, 0.0)
    assert h2.rhs == pytest.approx(1.0)


def test_kappa_monotonicity(linear_data):
    samples = vf.base_point_samples(linear_data.study)
    for tag in ("G1", "G2", "R2", "R3", "R6"):
        extra = {"samples": samples} if tag in ("R2", "R3") else {}
        reps = [vf.run_check(tag, linear_data, k, **extra) for k in (0.0, 0.5, 1.0, 2.0)]
        rhs = [r.rhs for r in reps]
        assert all(b >= a - 1e-12 for a, b in zip(rhs, rhs[1:])), (tag, rhs)
        seen_pass = False
        for r in reps:
            seen_pass = seen_pass or r.verdict == "pass"
            if seen_pass:
                assert r.verdict == "pass"


def test_one_point_reduction(quadratic_data):
    d = quadratic_data
    for t in d.times[1:-1:10]:
        a = d.grad_norm(t, 0.0)
        b = d.grad_norm(t, t)
        assert np.allclose(a, b)
        X = d.ens.at(t)[0]
        assert np.allclose(a, 2 * np.linalg.norm(X, axis=-1))


# ---------------------------------------------------------------- closed-form quadratic

def test_c2_isotropic_hessian_has_zero_drift(quadratic_data):
    rep = vf.run_check("C2", quadratic_data, 0.0)
    print(rep.slack, rep.slack_ci, rep.margin)
    assert rep.verdict == "pass"
    # |Hess|^2 - (tr Hess)^2 / n = 8 - 8 = 0, so C1 and C2 coincide
    c1 = vf.run_check("C1", quadratic_data, 0.0)
    assert np.allclose(rep.details["mean_process"], c1.details["mean_process"])


def test_g2_quadratic_oracle(quadratic_data):
    rep = vf.run_check("G2", quadratic_data, 0.0, t=0.5)
    # E_t|2 X_T|^2 - |2 X_t|^2 = 4 n (T - t) = 4 at t = 1/2
    slack = np.array(rep.details["prefix_slack"])
    se = np.array(rep.details["prefix_se"])
    print(slack, se)
    assert rep.verdict == "pass"
    assert np.all(np.abs(slack - 4.0) < 4 * se + 1e-3)


def test_bochner_drift_quadratic(quadratic_data):
    rep = vf.run_check("BOCHNER", quadratic_data, 0.0)
    d = rep.details
    print(d)
    assert rep.verdict == "pass"
    assert d["compensator_rate"] == pytest.approx(8.0)
    assert abs(d["drift_rate"] - 8.0) < 4 * d["drift_rate_se"]


def test_bochner_drift_linear_is_zero(linear_data):
    rep = vf.run_check("BOCHNER", linear_data, 0.0)
    assert rep.details["drift_rate"] == pytest.approx(0.0, abs=1e-12)
    assert rep.details["compensator_rate"] == 0.0


def test_pargrad_evolution_quadratic(quadratic_data):
    rep = vf.run_check("PARGRAD", quadratic_data, 0.0)
    assert rep.verdict == "pass"


def test_hessian_estimates_quadratic(quadratic_data):
    h1_0 = vf.run_check("H1", quadratic_data, 0.0)
    h2_0 = vf.run_check("H2", quadratic_data, 0.0)
    # at kappa = 0 both are equalities for |y|^2 from the origin: 8 = 8
    for rep in (h1_0, h2_0):
        print(rep.tag, rep.lhs, rep.rhs, rep.slack_ci)
        assert rep.verdict == "pass" and within_ci(rep)
    for tag in ("H1", "H2"):
        rep = vf.run_check(tag, quadratic_data, 1.0)
        assert rep.verdict == "pass" and rep.slack_ci[0] > 0


def test_h3_exponential_equality():
    a = np.array([0.6, -0.4])
    F = cyl.one_point(cyl.ExpLinear(a, 0.5), 1.0)
    d = vf.collect(study(E2, F, h=5e-3, paths=4000))
    rep = vf.run_check("H3", d, 0.0)
    s2 = a @ a
    oracle = 0.5 * s2 * np.exp(0.5 * s2)          # Ent(exp <a, X_T>) for <a, X_T> ~ N(0, |a|^2)
    print(rep.lhs, rep.rhs, rep.details, "oracle", oracle)
    assert np.isfinite(rep.lhs) and np.isfinite(rep.rhs)
    assert rep.verdict == "pass" and within_ci(rep)
    assert abs(rep.details["entropy"] - oracle) < rep.lhs_ci[1] - rep.lhs_ci[0]
    assert abs(rep.details["hessian_term"]) < 1e-10     # log of the flow is affine


def test_hessian_checks_need_closed_form():
    d = vf.collect(study(S2, cyl.combination([(1.0, cyl.Linear(np.array([0, 0, 1.0])), 0.25),
                                              (1.0, cyl.Linear(np.array([1.0, 0, 0])), 0.5)]),
                         h=0.05, paths=20, inner=8, root_inner=16))
    for tag in ("H1", "H2", "H3", "C1", "BOCHNER"):
        rep = vf.run_check(tag, d, 1.0)
        assert rep.verdict == "inconclusive", tag


def test_unknown_check_is_config_error(linear_data):
    with pytest.raises(ConfigurationError):
        vf.run_check("Z9", linear_data, 0.0)


# ---------------------------------------------------------------- curved space

@pytest.fixture(scope="module")
def sphere_bump_data():
    return vf.collect(study(S2, sphere_bump_function(), h=1e-3, paths=10000, prefixes=4))


def test_pargrad_evolution_sphere_bump(sphere_bump_data):
    rep = vf.run_check("PARGRAD", sphere_bump_data, 0.0)
    print(rep.details)
    assert rep.verdict == "pass"


def test_bochner_drift_sphere_bump(sphere_bump_data):
    rep = vf.run_check("BOCHNER", sphere_bump_data, 0.0)
    print(rep.details)
    assert rep.verdict == "pass"


def test_submartingale_families_sphere_bump(sphere_bump_data):
    kappa = vf.auto_kappa(S2)
    assert kappa == pytest.approx(1.05)
    for tag in ("C1", "C2", "C3", "C4", "C5"):
        rep = vf.run_check(tag, sphere_bump_data, 1.0)
        print(tag, rep.slack, rep.slack_ci, rep.verdict)
        assert rep.verdict == "pass"
    rep = vf.check_C(sphere_bump_data, "C5", 1.0, conditional=True)
    assert rep.verdict == "pass" and rep.details["tests"] > 3


# ---------------------------------------------------------------- Ricci recovery

def test_ricci_recovery_flat():
    for route in vf.RICCI_ROUTES:
        est = vf.recover_ricci(E2, route, n_paths=20000, tolerance=0.05)
        print(route, est.estimates, est.value, est.value_se)
        assert est.verdict == "pass"
        assert abs(est.value) < 0.05


def test_ricci_expansion_sign_on_sphere():
    one = vf.ricci_expansion_estimate(S2, "one_point", 0.1, n_paths=20000)
    two = vf.ricci_expansion_estimate(S2, "two_point", 0.1, n_paths=20000)
    print(one, two)
    assert abs(one[0] - 1.0) < 0.2 + 4 * one[1]
    assert abs(two[0] - 1.0) < 0.2 + 4 * two[1]


def test_ricci_on_warped_chart():
    # conformal metric exp(2 phi) |dx|^2 with phi = 0.2 x1 + 0.3 |x|^2: curvature varies in space
    phi = lambda p: 0.2 * p[..., 0] + 0.3 * np.sum(p * p, axis=-1)
    dphi = lambda p: np.stack([0.2 + 0.6 * p[..., 0], 0.6 * p[..., 1]], axis=-1)
    C = geo.conformal_chart(2, phi, dphi, name="warped")
    base = np.array([0.1, -0.1])
    exact = vf.exact_ricci(C, base=base)
    print("exact Ric(v, v) at base:", exact)
    # Gaussian curvature of exp(2 phi) |dx|^2 is -exp(-2 phi) Lap(phi), Lap(phi) = 1.2
    assert exact == pytest.approx(-1.2 * np.exp(-2 * phi(base)), rel=1e-4)
    est = vf.recover_ricci(C, "two_point", n_paths=2000, tolerance=0.15 * abs(exact),
                           base=base, chunk_size=2000)
    print(est.estimates, est.extrapolants, est.value, est.value_se, est.flags)
    assert est.verdict == "pass"
    assert abs(est.value - exact) < 0.15 * abs(exact)


def test_ricci_eps_must_decrease():
    with pytest.raises(ConfigurationError):
        vf.recover_ricci(E2, eps_list=(0.05, 0.1), n_paths=10)


# ---------------------------------------------------------------- reports

def test_report_serialization(linear_data):
    rep = vf.run_check("R6", linear_data, 1.0)
    d = rep.to_dict()
    assert "runtime" not in d and d["tag"] == "R6" and d["key"] == rep.key
    assert "runtime" in rep.to_dict(include_runtime=True)
    assert rep.key.startswith("R6|euclidean2|")
