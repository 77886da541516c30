import numpy as np
import pytest

from rpcbf.dynamics import DisturbanceBox, cwh_model, integrator_model
from rpcbf.geometry import Ellipsoid, Polytope, contains, tighten
from rpcbf.synthesis import (
    RpiTube,
    SynthesisError,
    TerminalCbf,
    compute_gamma_f,
    disturbance_generator,
    jacobian_vertices,
    rpi_lmi_margin,
    sample_ellipsoid,
    synth_rpi,
    synth_terminal_cbf,
    verify_rpi,
    verify_sf_containment,
    verify_terminal,
)

ONE = np.eye(1)
UNIT = Polytope.box([-1], [1])
W01 = DisturbanceBox.symmetric([0.1])


def test_scalar_rpi_deadbeat():
    tube = synth_rpi(ONE, ONE, W01, UNIT, UNIT)
    assert np.sqrt(tube.E.shape[0, 0]) <= 0.101
    assert tube.K[0, 0] == pytest.approx(-1.0, abs=0.01)
    assert 0 < tube.contraction < 1


def test_scalar_rpi_autonomous():
    tube = synth_rpi(0.5 * ONE, np.zeros((1, 1)), W01, UNIT, UNIT)
    assert np.sqrt(tube.E.shape[0, 0]) == pytest.approx(0.2, rel=1e-3)


def test_rpi_degenerate_disturbance():
    tube = synth_rpi(ONE, ONE, DisturbanceBox.symmetric([0.0]), UNIT, UNIT)
    assert tube.is_degenerate and tube.input_set.is_degenerate


def test_rpi_infeasible_reports():
    # unstable and uncontrollable: no ellipsoid is invariant
    with pytest.raises(SynthesisError, match="lambda"):
        synth_rpi(2.0 * ONE, np.zeros((1, 1)), W01, UNIT, UNIT, lambdas=[0.5, 0.9])


def test_rpi_lmi_certificate_and_monte_carlo():
    m = cwh_model(0.00113, 1.0)
    W = DisturbanceBox([0, 0, 0, -0.5, -0.5, -0.5], [0, 0, 0, 0.5, 0.5, 0.5])
    X = Polytope.box(-np.array([10.0] * 3 + [20.0] * 3), np.array([10.0] * 3 + [20.0] * 3))
    U = Polytope.box(-20 * np.ones(3), 20 * np.ones(3))
    tube = synth_rpi(m.A, m.B, W, X, U)
    G = disturbance_generator(W)
    assert rpi_lmi_margin(m.A, m.B, tube.K, tube.E.shape, G, tube.contraction) >= -1e-8
    ok, total = verify_rpi(tube, m.A, m.B, W, n_initial=50, n_steps=1000, seed=3)
    assert ok == total


def test_disturbance_generator_covers_vertices():
    W = DisturbanceBox([-0.5, 0, -0.2], [0.5, 0, 0.2])
    G = disturbance_generator(W)
    Q = G @ G.T
    for w in W.vertices():
        assert contains(Ellipsoid(Q), w, 1e-9)


def scalar_terminal(xt=0.799, ut=0.9):
    return synth_terminal_cbf(ONE, ONE, Polytope.box([-xt], [xt]), Polytope.box([-ut], [ut]))


def test_scalar_terminal_state_limited():
    cbf = scalar_terminal()
    # state rows bind, so S_f is rescaled by 0.99 before gamma_f is set
    assert cbf.P[0, 0] * 0.99 == pytest.approx(1 / 0.799**2, rel=1e-4)
    assert cbf.gamma_f == pytest.approx(1 / 0.99 - 1, rel=1e-4)
    assert cbf.rho < 1


def test_terminal_shrinks_with_constraints():
    r_full = 1 / np.sqrt(scalar_terminal(0.799).P[0, 0])
    r_half = 1 / np.sqrt(scalar_terminal(0.3995).P[0, 0])
    assert r_half <= 0.5 * r_full * (1 + 1e-4)


def test_terminal_lmi_residuals():
    m = cwh_model(0.00113, 1.0)
    X = Polytope.box(-np.array([9.0] * 3 + [19.0] * 3), np.array([9.0] * 3 + [19.0] * 3))
    U = Polytope.box(-19 * np.ones(3), 19 * np.ones(3))
    cbf = synth_terminal_cbf(m.A, m.B, X, U, contraction=0.99)
    E = np.linalg.inv(cbf.P)
    AK = (m.A + m.B @ cbf.K) @ E
    M = np.block([[E, AK.T], [AK, E]])
    assert np.linalg.eigvalsh(0.5 * (M + M.T)).min() >= -1e-8 * np.abs(M).max()
    rep = verify_terminal(cbf, m, U, n_samples=20_000)
    assert rep.passed and rep.n_safe > 0 and rep.n_domain > 0
    assert verify_sf_containment(cbf, X)


def test_terminal_contraction_property():
    m = cwh_model(0.00113, 1.0)
    X = Polytope.box(-np.array([9.0] * 3 + [19.0] * 3), np.array([9.0] * 3 + [19.0] * 3))
    U = Polytope.box(-19 * np.ones(3), 19 * np.ones(3))
    cbf = synth_terminal_cbf(m.A, m.B, X, U, contraction=0.99)
    AK = m.A + m.B @ cbf.K
    rng = np.random.default_rng(0)
    for z in sample_ellipsoid(cbf.P, 1 + cbf.gamma_f, 5000, rng):
        assert cbf.h(AK @ z) + 1 <= cbf.rho * (cbf.h(z) + 1) * (1 + 1e-9) + 1e-12


def test_verify_terminal_negative_control():
    m = integrator_model()
    cbf = scalar_terminal()
    U = Polytope.box([-0.9], [0.9])
    assert verify_terminal(cbf, m, U, n_samples=5000).passed
    flipped = TerminalCbf(cbf.P, cbf.gamma_f, -cbf.K, cbf.rho)
    rep = verify_terminal(flipped, m, U, n_samples=5000)
    assert not rep.passed and rep.witnesses
    with pytest.raises(SynthesisError, match="witness"):
        rep.raise_if_failed()


def test_gamma_examples():
    X = Polytope.box([-0.799], [0.799])
    U = Polytope.box([-0.9], [0.9])
    P = 1 / 0.799**2
    cbf = TerminalCbf([[P / 0.99]], 0.0, [[-1.0]], 0.0)
    g = compute_gamma_f(cbf, X, U)
    assert g == pytest.approx(1 / 0.99 - 1, rel=1e-9)
    g4 = compute_gamma_f(TerminalCbf([[4 * P / 0.99]], 0.0, [[-1.0]], 0.0), X, U)
    assert g4 > g
    with pytest.raises(SynthesisError):
        compute_gamma_f(TerminalCbf([[P]], 0.0, [[-1.0]], 0.0), X, U)


def test_gamma_isotropic_bisection():
    X = Polytope.box([-1, -2], [1, 0.5])
    U = Polytope.box([-10, -10], [10, 10])
    cbf = TerminalCbf(np.eye(2) * 16.0, 0.0, np.zeros((2, 2)), 0.0)
    g = compute_gamma_f(cbf, X, U)
    lo, hi = 0.0, 100.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        r = np.sqrt((1 + mid) / 16.0)
        if r <= 0.5:  # the nearest face
            lo = mid
        else:
            hi = mid
    assert g == pytest.approx(lo, abs=1e-9)


def test_gamma_keeps_policy_admissible():
    X = Polytope.box([-0.799], [0.799])
    U = Polytope.box([-0.9], [0.9])
    cbf = scalar_terminal()
    rng = np.random.default_rng(1)
    for z in sample_ellipsoid(cbf.P, 1 + cbf.gamma_f, 10_000, rng):
        assert U.contains(cbf.policy(z), 1e-12)
        assert X.contains(z, 1e-12)


def test_sf_containment():
    X = Polytope.box([-0.799], [0.799])
    assert verify_sf_containment(TerminalCbf([[1 / 0.79**2]], 0.0, [[0.0]], 0.0), X)
    assert not verify_sf_containment(TerminalCbf([[1 / 0.8**2]], 0.0, [[0.0]], 0.0), X)


def test_sf_containment_matches_sampling():
    rng = np.random.default_rng(4)
    X = Polytope.box([-1, -1], [1, 1])
    for _ in range(10):
        th = rng.uniform(0, np.pi)
        R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        axes = rng.uniform(0.5, 1.3, 2)
        P = R @ np.diag(1 / axes**2) @ R.T
        cbf = TerminalCbf(P, 0.0, np.zeros((2, 2)), 0.0)
        # boundary samples: S_f leaves X exactly when some boundary point does
        g = rng.standard_normal((100_000, 2))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        pts = g @ np.linalg.cholesky(np.linalg.inv(P)).T
        sampled_inside = bool(np.all(np.abs(pts) <= 1 + 1e-9))
        exact = verify_sf_containment(cbf, X)
        if sampled_inside != exact:
            # only a sliver thinner than the sampling resolution may disagree
            margin = min(1 - np.sqrt(a @ np.linalg.inv(P) @ a) for a in X.A)
            assert abs(margin) < 1e-4


def test_jacobian_vertices_contains_linear_case():
    verts = jacobian_vertices(cwh_model(0.00113, 1.0), -np.ones(6), np.ones(6))
    assert len(verts) == 1


def test_degenerate_tube():
    t = RpiTube.degenerate(3, 2)
    assert t.is_degenerate and t.K.shape == (2, 3)
    ok, total = verify_rpi(t, np.eye(3), np.zeros((3, 2)), DisturbanceBox.symmetric([0, 0, 0]),
                           n_initial=5, n_steps=10)
    assert ok == total


def test_tightened_toy_sets():
    tube = RpiTube(Ellipsoid([[0.01]]), [[-1.0]])
    np.testing.assert_allclose(tighten(UNIT, tube.E).b, [0.9, 0.9])
    np.testing.assert_allclose(tighten(UNIT, tube.input_set).b, [0.9, 0.9])
