import numpy as np
import pytest

import corpus
from charform.charsolve import (
    CharacteristicManifoldError,
    InconsistentInitialStripError,
    InitialData,
    NoSurvivingRaysError,
    PdeProblem,
    ProblemError,
    StripSet,
    canonical_system,
    derive_characteristic_system,
    detect_caustics,
    group_caustics,
    initialize_strips,
    integrate,
    solve,
    system_for,
)
from charform.expr import parse

X = np.array([[0.3, -1.0], [0.7, 2.0]])  # two sample points, coordinates first
U = np.array([0.0, 0.5])


def test_advection_system():
    sys_ = derive_characteristic_system(corpus.advection())
    P = np.array([[-0.4, 1.0], [0.4, -1.0]])
    dx, du, dp = sys_.rhs(X, U, P)
    np.testing.assert_array_equal(dx, [[1, 1], [1, 1]])
    np.testing.assert_array_equal(dp, 0)
    np.testing.assert_array_equal(du, [0, 0])


def test_eikonal_system():
    sys_ = derive_characteristic_system(corpus.eikonal())
    P = np.array([[0.6, 0.0], [0.8, 1.0]])
    dx, du, dp = sys_.rhs(X, U, P)
    np.testing.assert_allclose(dx, 2 * P)
    np.testing.assert_array_equal(dp, 0)
    np.testing.assert_allclose(du, [2.0, 2.0])


def test_u_dependence_enters_momentum_equation():
    prob = PdeProblem(2, parse("p1 + u"), corpus.line_t0("r", -1, 1, 5))
    _, _, dp = derive_characteristic_system(prob).rhs(X, U, np.array([[1.5, -2.0], [0.0, 0.0]]))
    np.testing.assert_array_equal(dp[0], [-1.5, 2.0])


def test_equation_without_momenta_is_degenerate():
    prob = PdeProblem(2, parse("u - x1"), corpus.line_t0("r", -1, 1, 5))
    with pytest.raises(ProblemError, match="p_i"):
        derive_characteristic_system(prob)


@pytest.mark.parametrize(
    "E, dx2, dp2",
    [
        ("p^2/2", lambda x, p: p, lambda x, p: 0 * p),
        ("(p^2 + x^2)/2", lambda x, p: p, lambda x, p: -x),
        ("p", lambda x, p: 1 + 0 * p, lambda x, p: 0 * p),
    ],
)
def test_canonical_systems(E, dx2, dp2):
    sys_ = canonical_system(corpus.hamiltonian(E), 1)
    x = np.array([[0.0, 0.1], [0.5, -1.2]])
    p = np.array([[0.0, 0.0], [2.0, 0.3]])
    dx, du, dp = sys_.rhs(x, np.zeros(2), p)
    np.testing.assert_array_equal(dx[0], 1.0)
    np.testing.assert_allclose(dx[1], dx2(x[1], p[1]))
    np.testing.assert_allclose(dp[1], dp2(x[1], p[1]))
    np.testing.assert_array_equal(dp[0], 0.0)  # autonomous E


def test_hamiltonian_with_p1_is_rejected():
    with pytest.raises(ProblemError, match="p1"):
        canonical_system(parse("p1 + p2^2"), 1)


def test_hj_initial_strips():
    (strips,) = initialize_strips(corpus.quadratic(rays=11))
    x0 = strips.x[1]
    np.testing.assert_allclose(strips.p[1], -2 * x0, atol=1e-14)
    np.testing.assert_allclose(strips.p[0], -2 * x0**2, atol=1e-14)


def test_eikonal_two_branches():
    sets = initialize_strips(corpus.eikonal(rays=11))
    assert [s.branch for s in sets] == [0, 1]
    for s, sign in zip(sets, (-1, 1)):
        np.testing.assert_allclose(s.p[0], 0.0, atol=1e-12)
        np.testing.assert_allclose(s.p[1], sign, atol=1e-12)
    (only,) = initialize_strips(corpus.eikonal(rays=11, branch=1))
    np.testing.assert_allclose(only.p[1], 1.0, atol=1e-12)


def test_eikonal_roots_meet_tolerance():
    init = InitialData((parse("r1"), parse("0.3*r1^2")), parse("0.5*sin(r1)"), [(-1, 1)], [33])
    prob = PdeProblem(2, parse("p1^2 + p2^2 - 1"), init)
    sys_ = system_for(prob)
    for s in initialize_strips(prob):
        assert np.max(np.abs(sys_.residual(s.x, s.u, s.p))) < 1e-12
        # tangential condition du0/dr = p . dx/dr
        r = s.params[:, 0]
        np.testing.assert_allclose(s.p[0] + s.p[1] * 0.6 * r, 0.5 * np.cos(r), atol=1e-12)


def test_inconsistent_initial_strip():
    init = InitialData((parse("r1"), parse("0")), parse("2*r1"), [(-1, 1)], [11])
    with pytest.raises(InconsistentInitialStripError, match="initial strip inconsistent"):
        initialize_strips(PdeProblem(2, parse("p1^2 + p2^2 - 1"), init))


def test_characteristic_initial_manifold():
    # advection rays run along the line x2 = x1, which is the data curve itself
    init = InitialData((parse("r1"), parse("r1")), parse("0"), [(0, 1)], [5])
    with pytest.raises(CharacteristicManifoldError, match="characteristic initial manifold"):
        initialize_strips(PdeProblem(2, parse("p1 + p2"), init))


def test_explicit_momenta_are_checked():
    init = corpus.line_t0("0", -1, 1, 3, momenta=("0", "1"))
    prob = PdeProblem.from_hamiltonian(corpus.hamiltonian("p^2/2"), 2, init)
    with pytest.raises(InconsistentInitialStripError):
        initialize_strips(prob)


# -- integration against closed forms ---------------------------------------


def test_advection_matches_exact_solution():
    fan = corpus.fan_of(corpus.advection())
    t, x = fan.x[..., 0], fan.x[..., 1]
    assert np.max(np.abs(fan.u - np.sin(x - t))) < 1e-8
    assert fan.s[-1] == pytest.approx(1.0)


def test_zero_hamiltonian_keeps_state_constant():
    init = corpus.line_t0("sin(r)", -1, 1, 9)
    fan = corpus.fan_of(PdeProblem.from_hamiltonian(parse("0"), 2, init, h=0.1, s_max=1.0))
    assert np.array_equal(fan.x[:, :, 1], np.repeat(fan.x[:, :1, 1], fan.s.size, axis=1))
    assert np.array_equal(fan.u, np.repeat(fan.u[:, :1], fan.s.size, axis=1))
    assert np.array_equal(fan.p, np.repeat(fan.p[:, :1], fan.s.size, axis=1))


def oscillator_energy(fan):
    x, p = fan.x[..., 1], fan.p[..., 1]
    return 0.5 * (p**2 + x**2)


def test_oscillator_energy_drift_per_unit_time():
    fan = corpus.fan_of(corpus.oscillator(h=0.01, periods=1.0, x0=1.0, rays=3, dr=1e-3))
    H = oscillator_energy(fan)
    drift = np.max(np.abs(H - H[:, :1]))
    assert drift / fan.s[-1] < 1e-10


def test_autonomy_bound():
    fan = corpus.fan_of(corpus.oscillator(h=0.01, periods=2.0))
    H = oscillator_energy(fan)
    assert np.max(np.abs(H - H[:, :1]) / np.maximum(fan.s, 1e-300)) < 1e-8


def test_residual_small_on_corpus():
    for name, prob in corpus.corpus().items():
        for fan in solve(prob):
            assert fan.max_residual() < 1e-8, name


def fully_nonlinear(h):
    """F = p1 p2 - u: momenta and u feed back, so F is conserved only to integration accuracy."""
    init = corpus.line_t0("0.5*sin(r)", -1, 1, 21)
    return PdeProblem(2, parse("p1*p2 - u"), init, h=h, s_max=0.8)


@pytest.mark.parametrize("make", [lambda h: corpus.oscillator(h=h), fully_nonlinear])
def test_residual_decays_fourth_order(make):
    coarse = corpus.fan_of(make(0.02)).max_residual()
    fine = corpus.fan_of(make(0.01)).max_residual()
    assert coarse > 1e-13  # above roundoff, so the ratio is meaningful
    assert coarse / fine >= 12


def test_strip_consistency():
    for prob in [corpus.advection(), corpus.eikonal(), fully_nonlinear(0.01)]:
        system = system_for(prob)
        for fan in solve(prob):
            x = np.moveaxis(fan.x, -1, 0)
            p = np.moveaxis(fan.p, -1, 0)
            dx, du, _ = system.rhs(x, fan.u, p)
            assert np.max(np.abs(du - np.sum(p * dx, axis=0))) < 1e-10


def test_symplectic_area_conserved_over_one_period():
    E = corpus.hamiltonian("(p^2 + x^2)/2")
    system = canonical_system(E, 1)
    dr = 1e-3
    q = np.array([1.0, 1.0 + dr, 1.0])
    p2 = np.array([0.0, 0.0, dr])
    x = np.vstack([np.zeros(3), q])
    p = np.vstack([-(p2**2 + q**2) / 2, p2])
    strips = StripSet(np.arange(3.0)[:, None], (3,), x, np.zeros(3), p)
    fan = integrate(system, strips, 0.01, 2 * np.pi)

    def area(k):
        dq = fan.x[1:, k, 1] - fan.x[0, k, 1]
        dp = fan.p[1:, k, 1] - fan.p[0, k, 1]
        return dp[0] * dq[1] - dq[0] * dp[1]

    a0 = area(0)
    assert abs(a0) == pytest.approx(dr**2)
    assert max(abs(area(k) - a0) for k in range(fan.s.size)) / abs(a0) < 1e-5


def test_runs_are_bitwise_deterministic():
    a = corpus.fan_of(corpus.advection(rays=601))
    b = corpus.fan_of(corpus.advection(rays=601))
    c = corpus.fan_of(corpus.advection(rays=601), threads=4)
    for f in ("x", "u", "p", "jacobian", "residual"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
        assert getattr(a, f).tobytes() == getattr(c, f).tobytes()


def test_checkpoints_are_uniform():
    fan = corpus.fan_of(corpus.advection(rays=11, h=0.3, s_max=1.0))
    np.testing.assert_allclose(fan.s, [0.0, 0.3, 0.6, 0.9, 1.2])
    assert fan.x.shape == (11, 5, 2)


def test_fan_strip_accessor():
    fan = corpus.fan_of(corpus.quadratic(rays=11))
    strip = fan.strip(3, 10)
    assert strip.s == pytest.approx(0.1)
    assert strip.x[1] == fan.x[3, 10, 1]
    assert strip.jacobian == pytest.approx(1 - 2 * 0.1, abs=1e-12)


# -- NaN handling ------------------------------------------------------------


def test_nan_truncates_only_the_affected_rays():
    init = corpus.line_t0("0", 0.0, 1.0, 10)
    prob = PdeProblem.from_hamiltonian(corpus.hamiltonian("p + 0*sqrt(1.5 - x)"), 2, init, h=0.01, s_max=1.0)
    fan = corpus.fan_of(prob)
    x0 = fan.x[:, 0, 1]
    dead = fan.truncated_at >= 0
    np.testing.assert_array_equal(dead, x0 > 0.5)
    assert np.all(np.isfinite(fan.x[~dead]))
    for i in np.flatnonzero(dead):
        k = fan.truncated_at[i]
        assert np.all(np.isnan(fan.x[i, k:])) and np.all(np.isfinite(fan.x[i, :k]))
        assert fan.x[i, k - 1, 1] <= 1.5


def test_no_surviving_rays():
    init = corpus.line_t0("0", 1.6, 2.0, 5)
    prob = PdeProblem.from_hamiltonian(corpus.hamiltonian("p + 0*sqrt(1.5 - x)"), 2, init)
    with pytest.raises(NoSurvivingRaysError):
        solve(prob)


# -- caustics ----------------------------------------------------------------


def test_quadratic_fan_jacobian_matches_analytic():
    fan = corpus.fan_of(corpus.quadratic())
    np.testing.assert_allclose(fan.jacobian, np.broadcast_to(1 - 2 * fan.s, fan.jacobian.shape), atol=1e-10)


def test_quadratic_caustic_location():
    fan = corpus.fan_of(corpus.quadratic())
    records = detect_caustics(fan)
    assert {r.ray for r in records} == set(range(fan.n_rays))
    for r in records:
        assert r.s_lo <= r.s_star <= r.s_hi
        assert abs(r.s_star - 0.5) <= 0.005
    (group,) = group_caustics(records, fan.h)
    assert group["rays"] == [0, 100] and group["count"] == 101
    assert abs(group["s_star"] - 0.5) <= 0.005


@pytest.mark.parametrize("prob", [corpus.advection(), corpus.quadratic(sign=+1)], ids=["advection", "convex"])
def test_controls_have_no_caustics(prob):
    assert detect_caustics(corpus.fan_of(prob)) == []


def test_caustics_need_three_rays():
    fan = corpus.fan_of(corpus.quadratic(rays=11)).subset([0, 1])
    with pytest.raises(ValueError):
        detect_caustics(fan)


def test_tangential_collapse_is_reported():
    """J touching zero without a sign change is caught by the magnitude floor."""
    fan = corpus.fan_of(corpus.quadratic(rays=11))
    J = np.abs(fan.jacobian)  # |1 - 2t| touches 0 at t = 0.5 without changing sign
    touched = type(fan)(**{**fan.__dict__, "jacobian": J})
    records = detect_caustics(touched)
    assert records and all(abs(r.s_star - 0.5) < 1e-9 for r in records)
