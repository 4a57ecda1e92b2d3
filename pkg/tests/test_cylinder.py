import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pathlab import cylinder as cyl
from pathlab import geometry as geo
from pathlab import pathsim as ps
from pathlab.pathsim import RngStream, TimeGrid


def ensemble(m, T=1.0, h=1e-2, n_paths=50, seed=0, include=(), start=None):
    g = TimeGrid.uniform(T, h, include=include)
    start = start or geo.start_framepoint(m)
    return ps.sample_paths(m, start, g, seed, np.arange(n_paths))


def one_path(m, T=1.0, h=1e-2, seed=0, include=()):
    g = TimeGrid.uniform(T, h, include=include)
    return ps.sample_path(m, geo.start_framepoint(m), g, RngStream(seed, ("single",)))


# ---------------------------------------------------------------- eval

def test_eval_examples():
    m = geo.euclidean(2)
    ens = ensemble(m)
    assert np.all(cyl.eval(cyl.constant(3.5), ens) == 3.5)
    a = np.array([0.4, -1.2])
    F = cyl.one_point(cyl.Linear(a), 1.0)
    assert np.allclose(cyl.eval(F, ens), ens.points[:, -1] @ a)


def test_eval_two_point_ricci_function():
    m = geo.sphere(2)
    eps = 0.05
    ens = ensemble(m, T=eps, h=1e-3, n_paths=20)
    F = cyl.two_point_ricci(m, np.array([1.0, 0.0, 0.0]), eps)
    f1 = F.terms[0][1]
    expected = 2 * f1.value(m, ens.points[:, 0]) - f1.value(m, ens.points[:, -1])
    assert np.allclose(cyl.eval(F, ens), expected)


def test_eval_missing_partition_time_is_config_error():
    m = geo.euclidean(2)
    ens = ensemble(m, h=0.1)
    F = cyl.one_point(cyl.Linear(np.ones(2)), 0.55)
    with pytest.raises(ps.ConfigurationError):
        cyl.eval(F, ens)


def test_partition_times_must_increase():
    with pytest.raises(ps.ConfigurationError):
        cyl.CylinderFunction((0.5, 0.5), ())
    with pytest.raises(ps.ConfigurationError):
        cyl.CylinderFunction((0.5, 0.2), ())


# ---------------------------------------------------------------- point-function derivatives

def _fd_cases():
    S, H, E = geo.sphere(2), geo.hyperbolic(2), geo.euclidean(2)
    C = geo.stereographic_sphere_chart(2)
    off = lambda m: geo.exp_map(m, geo.base_point(m), 0.4 * geo.standard_frame(m)[:, 0])
    return [
        (E, cyl.Linear(np.array([0.3, -0.8]))),
        (E, cyl.Quadratic(np.array([0.1, 0.2]))),
        (E, cyl.ExpLinear(np.array([0.6, -0.4]))),
        (E, cyl.GaussianBump(np.array([0.2, -0.1]), 0.7)),
        (S, cyl.Linear(np.array([0.2, -0.5, 0.9]))),
        (S, cyl.GaussianBump(off(S), 0.7)),
        (H, cyl.Linear(np.array([0.2, -0.5, 0.9]))),
        (H, cyl.GaussianBump(off(H), 0.7)),
        (S, cyl.NormalLinear(geo.base_point(S), np.array([1.0, 0.0, 0.0]), 1.5, 2.5)),
        (H, cyl.NormalLinear(geo.base_point(H), np.array([0.0, 1.0, 0.0]), 1.5, 2.5)),
        (E, cyl.NormalLinear(np.zeros(2), np.array([0.6, 0.8]), 1.5, 2.5)),
        (C, cyl.NormalLinear(np.zeros(2), np.array([1.0, 0.0]), 0.5, 1.0)),
    ]


@pytest.mark.parametrize("m,phi", _fd_cases(), ids=lambda x: getattr(x, "label", None)
                         or getattr(x, "name", None))
def test_gradient_matches_finite_differences(m, phi):
    rng = np.random.default_rng(12)
    base = geo.start_framepoint(m)
    worst = 0.0
    for _ in range(10):
        p = geo.exp_map(m, base.point, base.frame @ rng.normal(size=m.n) * 0.5) \
            if m.kind != "chart" else rng.normal(size=2) * 0.3
        u = geo.standard_frame(m, p)
        v = u @ rng.normal(size=m.n)
        d = 1e-5
        fd = (phi.value(m, geo.geodesic_step(m, p, v, d))
              - phi.value(m, geo.geodesic_step(m, p, -v, d))) / (2 * d)
        exact = geo.metric_eval(m, p, phi.grad(m, p), v)
        scale = max(abs(exact), float(geo.norm(m, p, phi.grad(m, p))) * float(geo.norm(m, p, v)),
                    1e-8)
        worst = max(worst, abs(fd - exact) / scale)
    print(phi.name, m.label, "worst relative error", worst)
    assert worst < 1e-5


def test_normal_linear_has_gradient_v_at_base():
    for m in (geo.sphere(2), geo.hyperbolic(3), geo.stereographic_sphere_chart(2)):
        base = geo.base_point(m)
        u = geo.standard_frame(m, base)
        v = u[:, 0]
        f1 = cyl.NormalLinear(base, v, 0.5, 1.0)
        assert abs(f1.value(m, base)) < 1e-14
        assert np.allclose(f1.grad(m, base), v, atol=1e-10)


# ---------------------------------------------------------------- parallel gradient

def test_parallel_gradient_of_linear_is_constant_vector():
    m = geo.euclidean(2)
    ens = ensemble(m)
    a = np.array([0.4, -1.2])
    F = cyl.one_point(cyl.Linear(a), 1.0)
    for s in (0.0, 0.3, 1.0):
        assert np.allclose(cyl.parallel_gradient(F, ens, s), a)
    assert np.all(cyl.parallel_gradient(F, ens, 1.2) == 0.0)


def test_parallel_gradient_norm_is_metric_norm_on_sphere():
    m = geo.sphere(2)
    ens = ensemble(m, n_paths=30)
    phi = cyl.GaussianBump(geo.exp_map(m, geo.base_point(m), np.array([0.3, 0.0, 0.0])), 0.7)
    F = cyl.one_point(phi, 1.0)
    g = cyl.parallel_gradient(F, ens, 0.2)
    XT = ens.points[:, -1]
    oracle = geo.norm(m, XT, phi.grad(m, XT))
    assert np.allclose(np.linalg.norm(g, axis=-1), oracle, atol=1e-10)


def test_parallel_gradient_piecewise_constant_with_jumps():
    m = geo.sphere(2)
    times = (0.25, 0.5, 1.0)
    ens = ensemble(m, include=times, n_paths=10)
    lin = cyl.Linear(np.array([0.3, 0.5, -0.2]))
    F = cyl.combination([(1.0, lin, 0.25), (-2.0, lin, 0.5), (0.5, lin, 1.0)])
    for lo, hi in [(0.0, 0.25), (0.25, 0.5), (0.5, 1.0)]:
        ss = np.linspace(lo, hi, 6)[1:]
        vals = [cyl.parallel_gradient(F, ens, s) for s in ss]
        for v in vals[1:]:
            assert np.array_equal(v, vals[0])
    # the jump at 0.25 is the transported slot gradient of the first slot
    jump = cyl.parallel_gradient(F, ens, 0.25) - cyl.parallel_gradient(F, ens, 0.26)
    p, u = ens.at(0.25)
    assert np.allclose(jump, geo.frame_components(m, p, u, lin.grad(m, p)))


@settings(max_examples=25, deadline=None)
@given(s=st.floats(0.0, 1.2), seed=st.integers(0, 1000))
def test_parallel_gradient_is_additive(s, seed):
    m = geo.sphere(2)
    ens = ensemble(m, include=(0.5,), n_paths=5, seed=seed, h=0.05)
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=3), rng.normal(size=3)
    Fa = cyl.combination([(1.0, cyl.Linear(a), 0.5)])
    Fb = cyl.combination([(1.0, cyl.Linear(b), 1.0)])
    Fab = cyl.combination([(1.0, cyl.Linear(a), 0.5), (1.0, cyl.Linear(b), 1.0)])
    lhs = cyl.parallel_gradient(Fab, ens, s)
    rhs = cyl.parallel_gradient(Fa, ens, s) + cyl.parallel_gradient(Fb, ens, s)
    assert np.allclose(lhs, rhs, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(angle=st.floats(0.0, 2 * np.pi), seed=st.integers(0, 1000))
def test_rotated_initial_frame_rotates_gradient(angle, seed):
    m = geo.sphere(2)
    g = TimeGrid.uniform(1.0, 0.02, include=(0.5,))
    fp = geo.start_framepoint(m)
    R = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    dw = np.random.default_rng(seed).normal(size=(4, g.K, 2)) * np.sqrt(g.h)
    # same geometric path: the rotated frame is driven by the counter-rotated noise
    p1, u1, _ = ps.walk(m, fp.point, fp.frame, dw)
    p2, u2, _ = ps.walk(m, fp.point, fp.frame @ R, dw @ R)
    rec = np.arange(g.K + 1)
    e1 = ps.PathEnsemble(m, g, rec, p1, u1, dw, np.arange(4))
    e2 = ps.PathEnsemble(m, g, rec, p2, u2, dw @ R, np.arange(4))
    bump = cyl.GaussianBump(np.array([0.0, 0.6, 0.8]), 0.6)
    F = cyl.combination([(1.0, bump, 0.5), (0.7, cyl.Linear(np.array([1.0, 0, 0])), 1.0)])
    for s in (0.0, 0.6):
        g1 = cyl.parallel_gradient(F, e1, s)
        g2 = cyl.parallel_gradient(F, e2, s)
        assert np.allclose(g2, g1 @ R, atol=1e-10)


# ---------------------------------------------------------------- Malliavin norm

def test_malliavin_norm_examples():
    m = geo.euclidean(2)
    T = 1.0
    ens = ensemble(m, include=(0.5,))
    a, b = np.array([1.0, 2.0]), np.array([-0.5, 0.3])
    assert np.allclose(cyl.malliavin_norm_sq(cyl.one_point(cyl.Linear(a), T), ens), T * a @ a)
    assert np.all(cyl.malliavin_norm_sq(cyl.constant(2.0), ens) == 0.0)
    F = cyl.combination([(1.0, cyl.Linear(a), 0.5), (1.0, cyl.Linear(b), 1.0)])
    expected = 0.5 * (a + b) @ (a + b) + 0.5 * b @ b
    assert np.allclose(cyl.malliavin_norm_sq(F, ens), expected)


def test_malliavin_norm_equals_fine_riemann_sum():
    m = geo.sphere(2)
    times = (0.2, 0.45, 1.0)
    ens = ensemble(m, include=times, n_paths=8)
    bump = cyl.GaussianBump(np.array([0.0, 0.6, 0.8]), 0.6)
    lin = cyl.Linear(np.array([0.3, 0.5, -0.2]))
    F = cyl.combination([(1.0, bump, 0.2), (-1.0, lin, 0.45), (2.0, bump, 1.0)])
    # midpoint sum on a grid that has the partition times as cell boundaries
    edges = np.unique(np.concatenate([np.linspace(0, 1.0, 2001), times]))
    mids = 0.5 * (edges[1:] + edges[:-1])
    total = sum(w * np.sum(cyl.parallel_gradient(F, ens, s) ** 2, axis=-1)
                for s, w in zip(mids, np.diff(edges)))
    assert np.allclose(cyl.malliavin_norm_sq(F, ens), total, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------- closed-form heat flows

def test_euclidean_heat_flows_against_gauss_hermite():
    nodes, weights = np.polynomial.hermite_e.hermegauss(60)
    Z = np.stack(np.meshgrid(nodes, nodes, indexing="ij"), -1).reshape(-1, 2)
    w = np.outer(weights, weights).reshape(-1) / (2 * np.pi)
    y = np.array([0.3, -0.7])
    tau = 0.4
    for phi in (cyl.Quadratic(np.array([0.1, 0.2])), cyl.ExpLinear(np.array([0.6, -0.4])),
                cyl.GaussianBump(np.array([0.2, -0.1]), 0.7)):
        val, grad, hess = phi.semigroup(tau, y)
        pts = y + np.sqrt(tau) * Z
        assert np.isclose(val, np.sum(w * phi.value(geo.euclidean(2), pts)), rtol=1e-10)
        # the gradient commutes with the flat heat flow
        g = np.sum(w[:, None] * phi.grad(geo.euclidean(2), pts), axis=0)
        assert np.allclose(grad, g, rtol=1e-9, atol=1e-12)


def test_quadratic_flow_values():
    val, grad, hess = cyl.Quadratic(np.zeros(3)).semigroup(0.5, np.array([1.0, 0.0, 2.0]))
    assert np.isclose(val, 5.0 + 1.5)
    assert np.allclose(grad, [2.0, 0.0, 4.0])
    assert np.allclose(hess, 2 * np.eye(3))


def test_sphere_bump_flow_reproduces_function_at_zero():
    m = geo.sphere(2)
    center = geo.exp_map(m, geo.base_point(m), np.array([0.3, 0.0, 0.0]))
    bump = cyl.GaussianBump(center, 0.7)
    rng = np.random.default_rng(1)
    ang = rng.uniform(0, 2 * np.pi, 40)
    dist = rng.uniform(0.0, 2.0, 40)
    v = (geo.standard_frame(m, center) @ np.stack([np.cos(ang), np.sin(ang)])).T * dist[:, None]
    pts = geo.exp_map(m, np.broadcast_to(center, v.shape), v)
    val, grad, _ = bump.heat_flow(m, 0.0, pts)
    # the bump has a conical kink of height exp(-pi^2 / (2 sigma^2)) ~ 4e-5 at the
    # antipode of its center, so the Legendre series converges only algebraically:
    # at degree 64 the truncation error is a few 1e-8 in value and ~1e-7 in gradient
    err = np.max(np.abs(val - bump.value(m, pts)))
    gerr = np.max(np.abs(grad - bump.grad(m, pts)))
    print("degree-64 truncation error:", err, gerr)
    assert err < 1e-7 and gerr < 1e-6


def test_sphere_bump_flow_against_walk():
    m = geo.sphere(2)
    bump = cyl.GaussianBump(geo.exp_map(m, geo.base_point(m), np.array([0.3, 0.0, 0.0])), 0.7)
    tau = 0.4
    ens = ps.sample_paths(m, geo.start_framepoint(m), TimeGrid.uniform(tau, 1e-3), 8,
                          np.arange(20000), record=[400], keep_increments=False)
    v = bump.value(m, ens.points[:, -1])
    se = v.std() / np.sqrt(len(v))
    closed = bump.heat_flow(m, tau, geo.base_point(m))[0]
    print("bump heat flow:", closed, "walk", v.mean(), "+-", se)
    assert abs(v.mean() - closed) < 4 * se + 1e-3 * tau


def test_sphere_bump_flow_solves_heat_equation():
    # d/dtau H f = 1/2 Laplacian H f, with the Laplacian as the trace of the tangent Hessian
    m = geo.sphere(2)
    bump = cyl.GaussianBump(np.array([0.0, 0.6, 0.8]), 0.7)
    p = geo.exp_map(m, geo.base_point(m), np.array([0.2, -0.4, 0.0]))
    u = geo.standard_frame(m, p)
    tau, d = 0.3, 1e-5
    dt = (bump.heat_flow(m, tau + d, p)[0] - bump.heat_flow(m, tau - d, p)[0]) / (2 * d)
    H = bump.heat_flow(m, tau, p)[2]
    lap = np.trace(u.T @ H @ u)
    assert np.isclose(dt, 0.5 * lap, rtol=1e-6)


def test_sphere_linear_flow_decays():
    m = geo.sphere(3, radius=2.0)
    a = np.array([0.1, 0.2, 0.3, 0.4])
    y = geo.base_point(m)
    val, _, _ = cyl.Linear(a).heat_flow(m, 0.8, y)
    assert np.isclose(val, np.exp(-0.5 * 3 * 0.8 / 4.0) * a @ y)


def test_squared_function_for_exponential():
    F = cyl.one_point(cyl.ExpLinear(np.array([0.6, -0.4])), 1.0)
    F2 = F.squared()
    ens = ensemble(geo.euclidean(2))
    assert np.allclose(cyl.eval(F2, ens), cyl.eval(F, ens) ** 2)
    assert cyl.one_point(cyl.Quadratic(np.zeros(2)), 1.0).squared() is None


# ---------------------------------------------------------------- conditional estimates

def test_conditional_value_terminal_is_exact():
    m = geo.sphere(2)
    path = one_path(m)
    F = cyl.one_point(cyl.Linear(np.array([0.2, 0.3, 0.9])), 1.0)
    val, se = cyl.conditional_value(F, path, 1.0, rng=RngStream(0, ("c",)), method="nested")
    assert val == cyl.eval(F, path) and se == 0.0


def test_conditional_value_quadratic_closed_form_and_nested():
    m = geo.euclidean(2)
    path = one_path(m, seed=3)
    F = cyl.one_point(cyl.Quadratic(np.zeros(2)), 1.0)
    t = 0.4
    X = path.at(t)[0]
    exact = X @ X + 2 * (1.0 - t)
    val, se = cyl.conditional_value(F, path, t)
    assert np.isclose(val, exact) and se == 0.0
    val, se = cyl.conditional_value(F, path, t, inner_budget=4000, rng=RngStream(1, ("c",)),
                                    method="nested")
    print("nested F_t:", val, "+-", se, "exact", exact)
    assert abs(val - exact) < 4 * se


def test_conditional_value_mean_at_zero_matches_expectation():
    m = geo.sphere(2)
    bump = cyl.GaussianBump(geo.exp_map(m, geo.base_point(m), np.array([0.3, 0.0, 0.0])), 0.7)
    F = cyl.one_point(bump, 0.5)
    ens = ensemble(m, T=0.5, h=5e-3, n_paths=40)
    snap = cyl.nested_snapshot(F, ens, 0.0, 200, 1e-3, RngStream(2, ("inner",)))
    est = snap.value()
    se = est.std(ddof=1) / np.sqrt(len(est))
    exact = bump.heat_flow(m, 0.5, geo.base_point(m))[0]
    print("E F from nested values:", est.mean(), "+-", se, "closed form", exact)
    assert abs(est.mean() - exact) < 3 * se + 2e-3


def test_conditional_gradient_examples():
    m = geo.euclidean(2)
    path = one_path(m, seed=5)
    a = np.array([0.4, -1.2])
    F = cyl.one_point(cyl.Linear(a), 1.0)
    est, se = cyl.conditional_parallel_gradient(F, path, 0.0, 0.5, inner_budget=64,
                                                rng=RngStream(0, ("g",)), method="nested")
    assert np.allclose(est, a, atol=1e-12) and np.all(se < 1e-10)
    est, _ = cyl.conditional_parallel_gradient(F, path, 0.2, 1.0, rng=RngStream(0, ("g",)),
                                               method="nested")
    assert np.array_equal(est, cyl.parallel_gradient(F, path, 0.2))


def test_conditional_gradient_of_quadratic():
    m = geo.euclidean(2)
    path = one_path(m, seed=6)
    F = cyl.one_point(cyl.Quadratic(np.zeros(2)), 1.0)
    t = 0.5
    est, se = cyl.conditional_parallel_gradient(F, path, 0.0, t, inner_budget=4000,
                                                rng=RngStream(3, ("g",)), method="nested")
    exact = 2 * path.at(t)[0]
    print("nested gradient:", est, "+-", se, "exact", exact)
    assert np.all(np.abs(est - exact) < 4 * se + 1e-5)


def test_chain_rule_for_square():
    # E_t[<a, X_T>^2] has gradient 2 <a, X_t> a = phi'(F_t) grad F_t for phi(x) = x^2
    m = geo.euclidean(2)
    path = one_path(m, seed=7)
    a = np.array([0.8, 0.3])
    lin = cyl.Linear(a)
    Fsq = cyl.CylinderFunction((1.0,), ((1.0, lin, 0), (1.0, lin, 0)), mode="product", const=1.0)
    t = 0.3
    est, se = cyl.conditional_parallel_gradient(Fsq, path, 0.0, t, inner_budget=4000,
                                                rng=RngStream(4, ("g",)), method="nested")
    Ft = path.at(t)[0] @ a
    chain = 2 * Ft * a
    print("chain rule:", est, "+-", se, "phi'(F_t) grad F_t", chain)
    assert np.all(np.abs(est - chain) < 4 * se + 1e-5)
    # at the terminal time the chain rule is exact
    g = cyl.parallel_gradient(Fsq, path, 0.0)
    assert np.allclose(g, 2 * cyl.eval(cyl.one_point(lin, 1.0), path) * a)


def test_fd_bias_check_warns_only_when_bias_dominates():
    m = geo.euclidean(2)
    path = one_path(m, seed=8)
    F = cyl.one_point(cyl.Linear(np.array([1.0, 0.0])), 1.0)
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        cyl.conditional_parallel_gradient(F, path, 0.0, 0.5, inner_budget=32,
                                          rng=RngStream(0, ("g",)), method="nested",
                                          check_bias=True)


def test_second_parallel_gradient_examples():
    m = geo.euclidean(2)
    path = one_path(m, seed=9)
    Fq = cyl.one_point(cyl.Quadratic(np.zeros(2)), 1.0)
    H = cyl.second_parallel_gradient(Fq, path, 0.0, 0.5)
    assert np.allclose(H, 2 * np.eye(2))
    assert np.isclose(cyl.parallel_laplacian(H), 4.0)
    Fl = cyl.one_point(cyl.Linear(np.array([1.0, 2.0])), 1.0)
    assert np.allclose(cyl.second_parallel_gradient(Fl, path, 0.0, 0.5), 0.0)
    Hn = cyl.second_parallel_gradient(Fq, path, 0.0, 0.5, method="nested_fd",
                                      inner_budget=64, fd_step=1e-2, rng=RngStream(5, ("h",)))
    print("nested second gradient:", Hn)
    assert np.allclose(Hn, 2 * np.eye(2), atol=1e-8)


def test_second_parallel_gradient_transports_hessian():
    m = geo.euclidean(2)
    path = one_path(m, seed=10)
    bump = cyl.GaussianBump(np.array([0.3, -0.2]), 0.8)
    F = cyl.one_point(bump, 1.0)
    t = 0.4
    H = cyl.second_parallel_gradient(F, path, 0.0, t)
    assert np.allclose(H, bump.semigroup(1.0 - t, path.at(t)[0])[2])
