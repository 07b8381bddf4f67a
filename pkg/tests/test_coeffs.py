import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smallmass import coeffs
from smallmass.coeffs import ModelSpec
from smallmass.errors import DegenerateDragError, EvaluationError, WrongSpecializationError
from smallmass.models import build_model


def q1(x):
    return np.array([float(x)])


def test_tilde_gamma_without_psi_is_gamma(scalar_sin):
    q = q1(0.7)
    assert np.array_equal(coeffs.tilde_gamma(scalar_sin, 0.0, q), scalar_sin.gamma(0.0, q))


def test_tilde_gamma_magnetic():
    B = 1.7
    model = build_model("ou-const", dict(n=2, gamma=1.0, B=B))
    gt = coeffs.tilde_gamma(model, 0.0, np.array([0.3, -0.4]))
    assert np.allclose(gt, [[1.0, -B], [B, 1.0]], atol=1e-15)
    b = coeffs.eval_tilde_gamma(model, 0.0, np.array([0.3, -0.4]))
    assert np.allclose(b.gti @ b.gt, np.eye(2), atol=1e-10)
    assert np.allclose(0.5 * (b.gt + b.gt.T), np.eye(2), atol=1e-15)


def test_inverse_derivative_construction(scalar_sin):
    b = coeffs.eval_tilde_gamma(scalar_sin, 0.0, q1(0.4))
    expected = -b.gti @ b.dgt[..., 0] @ b.gti
    assert np.array_equal(b.dgti[..., 0], expected)


def test_total_force():
    model = build_model("scalar-sin")
    assert coeffs.total_force(model, 0.0, q1(3.0))[0] == pytest.approx(-3.0)
    zero = ModelSpec(1, 1, 1.0, gamma=lambda t, q: np.ones(q.shape[:-1] + (1, 1)), sigma=lambda t, q: 0.0)
    assert coeffs.total_force(zero, 0.0, q1(2.0))[0] == 0.0


def test_noise_induced_drift_examples():
    assert coeffs.noise_induced_drift(build_model("scalar-sin"), 0.0, q1(0.0))[0] == pytest.approx(-0.125, abs=1e-12)
    model = build_model("scalar-exp", dict(beta=1.0, gamma0=1.0))
    assert coeffs.noise_induced_drift(model, 0.0, q1(0.0))[0] == pytest.approx(-1.0, abs=1e-12)
    const = build_model("ou-const", dict(n=2, B=0.5))
    assert np.allclose(coeffs.noise_induced_drift(const, 0.0, np.array([1.0, 2.0])), 0.0)


def scalar_drift_oracle(q, g0=2.0, g1=1.0, Sigma=2.0):
    # S = Q J with J = Sigma / (2 gamma), Q = -gamma' / gamma^2
    g = g0 + g1 * np.sin(q)
    return -g1 * np.cos(q) / g**2 * Sigma / (2 * g)


@settings(max_examples=60, deadline=None)
@given(st.floats(min_value=-6.0, max_value=6.0))
def test_scalar_drift_matches_calculus(x):
    model = build_model("scalar-sin")
    S = coeffs.noise_induced_drift(model, 0.0, q1(x))[0]
    assert S == pytest.approx(scalar_drift_oracle(x), rel=1e-12, abs=1e-14)


def test_qg_tensor_examples(scalar_sin):
    T = coeffs.qg_tensor(scalar_sin, 0.0, q1(0.0))
    assert T.T[0, 0, 0] == pytest.approx(-0.0625, abs=1e-14)
    const = build_model("ou-const", dict(n=2, B=0.3))
    Tc = coeffs.qg_tensor(const, 0.0, np.array([0.5, 0.1]))
    assert np.all(Tc.T == 0.0) and np.all(Tc.dT_dq == 0.0) and np.all(Tc.dT_dt == 0.0)


def test_qg_tensor_derivatives_vs_fd():
    model = build_model("magnetic-2d", dict(Bt=0.4))
    t, q = 0.3, np.array([0.4, -0.9])
    T = coeffs.qg_tensor(model, t, q)
    h = 1e-5
    for c in range(2):
        e = np.zeros(2)
        e[c] = h
        fd = (coeffs.qg_tensor(model, t, q + e).T - coeffs.qg_tensor(model, t, q - e).T) / (2 * h)
        assert np.max(np.abs(T.dT_dq[..., c] - fd)) <= 1e-4
    model_t = build_model("scalar-sin", dict(eps_t=0.3))
    T = coeffs.qg_tensor(model_t, 0.2, q1(0.5))
    fd = (coeffs.qg_tensor(model_t, 0.2 + h, q1(0.5)).T - coeffs.qg_tensor(model_t, 0.2 - h, q1(0.5)).T) / (2 * h)
    assert np.max(np.abs(T.dT_dt - fd)) <= 1e-4


def test_qg_tensor_contracts_lyapunov_solutions():
    model = build_model("magnetic-2d")
    t, q = 0.0, np.array([0.2, 1.1])
    b = coeffs.eval_tilde_gamma(model, t, q)
    T = coeffs.qg_tensor(model, t, q, b).T
    from smallmass.tensorops import solve_lyapunov

    A = np.array([[1.0, 0.3], [0.3, -2.0]])
    direct = np.einsum("ikl,kl->i", b.dgti, solve_lyapunov(b.gt, A))
    assert np.allclose(np.einsum("iab,ab->i", T, A), direct, atol=1e-13)


def test_degenerate_drag_and_non_finite():
    weak = ModelSpec(1, 1, 1.0, gamma=lambda t, q: np.full(q.shape[:-1] + (1, 1), 0.2), sigma=lambda t, q: 1.0)
    with pytest.raises(DegenerateDragError):
        coeffs.eval_tilde_gamma(weak, 0.0, q1(0.0))
    bad = ModelSpec(1, 1, 1.0, gamma=lambda t, q: np.ones(q.shape[:-1] + (1, 1)), sigma=lambda t, q: 1.0,
                    V=lambda t, q: 0.5 * q[..., 0] ** 2, gradV=lambda t, q: np.full(q.shape, np.nan))
    with pytest.raises(EvaluationError):
        coeffs.total_force(bad, 0.0, q1(1.0))


def test_cutoff_inside_and_outside():
    base = build_model("double-well")
    r = 2.0
    cut = coeffs.cutoff_model(base, r)
    for x in (-2.0, -0.3, 0.0, 1.5, 2.0):
        q = q1(x)
        assert np.array_equal(cut.gamma(0.0, q), base.gamma(0.0, q))
        assert np.array_equal(cut.deriv("gradV", 0.0, q), base.deriv("gradV", 0.0, q))
        assert np.array_equal(cut.V(0.0, q), base.V(0.0, q))
    for x in (4.0, -4.5, 10.0):
        q = q1(x)
        assert np.array_equal(cut.gamma(0.0, q), np.array([[base.lam]]))
        assert cut.V(0.0, q) == 0.0
        assert np.all(cut.deriv("gradV", 0.0, q) == 0.0)


def test_cutoff_magnetic_outside():
    base = build_model("magnetic-2d")
    cut = coeffs.cutoff_model(base, 1.0)
    q = np.array([2.5, 0.5])
    assert np.allclose(coeffs.tilde_gamma(cut, 0.0, q), base.lam * np.eye(2), atol=0)
    assert np.all(cut.psi(0.0, q) == 0.0)
    assert coeffs.validate_model(cut, coeffs.random_probes(cut, 20, radius=2.5)).ok


def test_bump_derivatives_vs_fd():
    h = 1e-6
    for s in (1.3, 2.0, 3.1):
        v = coeffs.bump_profile(np.array([s]))
        vp = coeffs.bump_profile(np.array([s + h]))
        vm = coeffs.bump_profile(np.array([s - h]))
        for k in range(3):
            fd = (vp[k] - vm[k]) / (2 * h)
            assert fd[0] == pytest.approx(v[k + 1][0], rel=1e-5, abs=1e-6)


def test_validation_constant_model():
    model = build_model("ou-const", dict(n=2))
    rep = coeffs.validate_model(model, coeffs.random_probes(model, 10))
    assert rep.ok
    assert all(c.value <= 1e-12 for c in rep.checks if "finite differences" not in c.name)


def test_validation_flags_wrong_gradient():
    base = build_model("scalar-sin")
    wrong = ModelSpec(
        1, 1, base.lam,
        gamma=base.supplier("gamma"), sigma=base.supplier("sigma"),
        V=base.supplier("V"),
        gradV=lambda t, q: 1.1 * q,
        dgamma_dq=base.supplier("dgamma_dq"),
    )
    rep = coeffs.validate_model(wrong, coeffs.random_probes(wrong, 20))
    assert not rep.ok
    assert any(c.name.startswith("gradV") for c in rep.failures)


def test_validation_scalar_sin_passes(scalar_sin):
    rep = coeffs.validate_model(scalar_sin, coeffs.random_probes(scalar_sin, 100))
    assert rep.ok, rep.failures


def test_finite_difference_fallback_provenance():
    model = ModelSpec(
        1, 1, 1.0,
        gamma=lambda t, q: (2.0 + np.sin(q[..., 0]))[..., None, None],
        sigma=lambda t, q: np.sqrt(2.0),
    )
    b = coeffs.eval_tilde_gamma(model, 0.0, q1(0.0))
    assert b.provenance == "finite-difference"
    assert coeffs.noise_induced_drift(model, 0.0, q1(0.0))[0] == pytest.approx(-0.125, abs=1e-7)


def random_fd_model(rng, n):
    """Diagonal drag with Sigma = 2 kT gamma, analytic first derivatives."""
    a = rng.uniform(1.5, 3.0, n)
    b = rng.uniform(-1.0, 1.0, n)
    c = rng.uniform(0.5, 2.0, n)
    kT = rng.uniform(0.2, 2.0)

    def g(q):
        return a + b * np.sin(c * q)

    def gamma(t, q):
        return g(q)[..., :, None] * np.eye(n)

    def dgamma(t, q):
        d = np.zeros(q.shape[:-1] + (n, n, n))
        for i in range(n):
            d[..., i, i, i] = b[i] * c[i] * np.cos(c[i] * q[..., i])
        return d

    def sigma(t, q):
        return np.sqrt(2 * kT * g(q))[..., :, None] * np.eye(n)

    return ModelSpec(n, n, float(np.min(a - np.abs(b))), gamma=gamma, sigma=sigma, dgamma_dq=dgamma)


def test_fluct_diss_matches_general_drift():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(100):
        n = 1 if trial < 70 else int(rng.integers(2, 4))
        model = random_fd_model(rng, n)
        q = rng.uniform(-3, 3, n)
        S = coeffs.noise_induced_drift(model, 0.0, q)
        Sf = coeffs.noise_induced_drift(model, 0.0, q, shortcut=True)
        worst = max(worst, np.max(np.abs(S - Sf)) / max(np.max(np.abs(S)), 1e-300))
    assert worst <= 1e-8


def test_fluct_diss_rejects_mismatch():
    with pytest.raises(WrongSpecializationError):
        coeffs.noise_induced_drift(build_model("magnetic-2d"), 0.0, np.zeros(2), shortcut=True)
    model = build_model("ou-const", dict(n=2, sigma=1.0, sigma2=2.0))
    with pytest.raises(WrongSpecializationError):
        coeffs.noise_induced_drift(model, 0.0, np.zeros(2), shortcut=True)
