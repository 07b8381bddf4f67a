import numpy as np
import pytest
import scipy.integrate
import scipy.linalg

from smallmass.dynamics import simulate_homogenized
from smallmass.errors import FastProcessDivergence, WrongSpecializationError
from smallmass.hierarchy import (
    LockstepEngine,
    drive_remainder,
    remainder_increment,
    run_level,
    run_level_special,
    step_z,
)
from smallmass.models import build_model
from smallmass.noisegrid import generate_path, path_batch
from smallmass.routes import check_z, make_route, route_for, z_update
from smallmass.tensorops import solve_lyapunov

GT_MAG = np.array([[1.0, -0.7], [0.7, 1.0]])


def magnetic_ou(**kw):
    params = dict(n=2, B=0.7, sigma=0.8, sigma2=1.3)
    params.update(kw)
    return build_model("ou-const", params)


def test_step_z_free_decay():
    model = magnetic_ou(kappa=0.0, sigma=0.0, sigma2=0.0)
    m, dt = 0.1, 0.003
    z = np.array([0.4, -1.1])
    out = step_z(model, m, z, np.array([0.3, 0.2]), 0.0, np.array([0.5, -0.2]), dt)
    assert np.allclose(out, scipy.linalg.expm(-GT_MAG * dt / m) @ z, atol=1e-15)


def test_step_z_fixed_point():
    model = magnetic_ou(sigma=0.0, sigma2=0.0)
    m, y = 0.05, np.array([0.8, -0.4])
    z_star = np.sqrt(m) * np.linalg.solve(GT_MAG, -y)
    out = step_z(model, m, z_star, y, 0.0, np.zeros(2), 0.001)
    assert np.allclose(out, z_star, atol=1e-14)


def test_step_z_noise_covariance():
    model = magnetic_ou(kappa=0.0)
    m, dt = 0.1, 0.001
    Sigma = np.diag([0.8, 1.3]) ** 2
    J = solve_lyapunov(GT_MAG, Sigma)
    E = scipy.linalg.expm(-GT_MAG * dt / m)
    target = J - E @ J @ E.T

    def integrand(s):
        P = scipy.linalg.expm(-GT_MAG * s / m)
        return P @ Sigma @ P.T / m

    quad, _ = scipy.integrate.quad_vec(integrand, 0.0, dt, epsabs=1e-15)
    assert np.allclose(target, quad, rtol=1e-9, atol=1e-14)
    # the scheme's increment is linear in dW; recover its matrix column by column
    N = np.stack([step_z(model, m, np.zeros(2), np.zeros(2), 0.0, e, dt) for e in np.eye(2)], axis=1)
    cov = N @ N.T * dt
    # midpoint treatment of the convolution kernel: O((dt/m)^2) relative error
    assert np.max(np.abs(cov - target)) <= 1e-4 * np.max(np.abs(target))


def test_zero_z_gives_zero_remainder(scalar_sin):
    dR = remainder_increment(
        scalar_sin, 0.05, 0.0, np.array([0.3]), np.array([0.35]), np.zeros(1), np.zeros(1), np.array([0.04]), 0.001
    )
    assert np.all(dR == 0.0)


def test_constant_drag_remainder():
    model = magnetic_ou()
    rng = np.random.default_rng(1)
    z, z_new, y, y_new = rng.normal(size=(4, 5, 2))
    dR = remainder_increment(model, 0.1, 0.0, y, y_new, z, z_new, rng.normal(size=(5, 2)), 0.001)
    expected = -np.linalg.solve(GT_MAG, (z_new - z).T).T
    assert np.allclose(dR, expected, atol=1e-14)


def test_generic_matches_scalar_route(scalar_sin):
    rng = np.random.default_rng(5)
    P, m, dt = 64, 0.03, 0.0003
    y = rng.uniform(-2, 2, (P, 1))
    y_new = y + 0.05 * rng.normal(size=(P, 1))
    z, z_new = rng.normal(size=(2, P, 1))
    dW = rng.normal(0, np.sqrt(dt), (P, 1))
    for milstein in (False, True):
        a = remainder_increment(scalar_sin, m, 0.2, y, y_new, z, z_new, dW, dt, route=make_route(scalar_sin, "generic"), milstein=milstein)
        b = remainder_increment(scalar_sin, m, 0.2, y, y_new, z, z_new, dW, dt, route=make_route(scalar_sin, "scalar"), milstein=milstein)
        assert np.max(np.abs(a - b)) <= 1e-10
    za = step_z(scalar_sin, m, z, y, 0.2, dW, dt, route=make_route(scalar_sin, "generic"))
    zb = step_z(scalar_sin, m, z, y, 0.2, dW, dt, route=make_route(scalar_sin, "scalar"))
    assert np.max(np.abs(za - zb)) <= 1e-12


def test_level_one_is_homogenized(scalar_sin):
    path = generate_path(3, 0, 500, 1, 0.001)
    run = run_level(scalar_sin, 0.1, 1, path, np.array([0.2]))
    hom = simulate_homogenized(scalar_sin, path, np.array([0.2]))
    assert np.array_equal(run.output.q, hom.q)
    assert np.all(run.R == 0.0)


def test_trivial_constant_run():
    model = magnetic_ou(kappa=0.0, sigma=0.0, sigma2=0.0)
    path = generate_path(1, 0, 200, 2, 0.001)
    q0 = np.array([0.5, -0.25])
    run = run_level(model, 0.1, 3, path, q0, z0=np.zeros(2))
    assert np.all(run.output.q == q0) and np.all(run.driving.q == q0)


def test_remainder_starts_at_zero(scalar_sin):
    run = run_level(scalar_sin, 0.05, 2, generate_path(2, 0, 100, 1, 0.0005), np.array([0.0]))
    assert np.all(run.R[0] == 0.0)
    assert run.driving.z.shape == run.driving.q.shape
    assert run.diagnostics["route"] in ("scalar", "generic")


def test_level_two_beats_level_one_on_ou():
    model = build_model("ou-const")
    m, hbar, paths = 1 / 64, 0.01, 2000
    dt = hbar * m
    steps = int(round(1.0 / dt))
    inc = path_batch(77, range(paths), steps, 1, dt)
    err = np.zeros((2, steps + 1))

    def track(i, t, eng):
        for l in range(2):
            err[l, i] = np.mean(np.sum((eng.q[l] - eng.q_ref) ** 2, axis=-1))

    LockstepEngine(model, m, 2, route_for(model, "auto"), np.zeros(1), ref_scheme="exp").run(inc, dt, track)
    e1, e2 = np.sqrt(err.max(axis=1))
    assert e2 < e1
    assert e2 < 0.5 * e1


def test_remainder_telescopes_for_constant_drag():
    model = magnetic_ou()
    m, dt = 0.05, 0.0005
    path = generate_path(6, 0, 400, 2, dt)
    y = simulate_homogenized(model, path, np.array([0.1, 0.4]))
    z0 = np.array([0.3, -0.2])
    z, R = drive_remainder(model, m, y, path, z0)
    assert np.allclose(R[-1], -np.linalg.solve(GT_MAG, z[-1] - z0), atol=1e-13)
    assert np.allclose(R, -np.linalg.solve(GT_MAG, (z - z0).T).T, atol=1e-13)


def test_const_gamma_route_remainder_path():
    model = magnetic_ou(B=0.0)
    path = generate_path(6, 1, 300, 2, 0.0005)
    run = run_level_special("const-gamma", model, 0.05, 2, path, np.zeros(2), z0=np.array([0.1, 0.2]))
    z = run.driving.z
    assert np.allclose(run.R, -(z - z[0]), atol=1e-13)


def test_z_stationary_covariance():
    model = magnetic_ou(kappa=0.0)
    m, dt, P = 0.1, 0.001, 10000
    J = solve_lyapunov(GT_MAG, np.diag([0.8, 1.3]) ** 2)
    pd = make_route(model, "generic").point(0.0, np.zeros((1, 2)))
    E, Eh = make_route(model, "generic").propagators(pd, dt, m)
    rng = np.random.default_rng(9)
    z = np.zeros((P, 2))
    for _ in range(1500):  # 15 relaxation times
        z = z_update(E, Eh, pd.gti, pd.F, pd.sigma, z, rng.normal(0, np.sqrt(dt), (P, 2)), m)
    C = np.cov(z.T)
    se = np.sqrt((np.outer(np.diag(J), np.diag(J)) + J**2) / (P - 1))
    assert np.all(np.abs(C - J) <= 3 * se)


def test_fluct_diss_drift_matches_general(scalar_sin):
    q = np.linspace(-3, 3, 41)[:, None]
    a = make_route(scalar_sin, "fluct-diss").point(0.0, q).drift
    b = make_route(scalar_sin, "generic").point(0.0, q).drift
    assert np.max(np.abs(a - b)) <= 1e-10


def test_wrong_specialization():
    with pytest.raises(WrongSpecializationError):
        make_route(build_model("magnetic-2d"), "scalar")
    with pytest.raises(WrongSpecializationError):
        make_route(build_model("scalar-sin"), "const-gamma")
    with pytest.raises(WrongSpecializationError):
        run_level_special("fluct-diss", magnetic_ou(sigma2=2.0, B=0.0), 0.1, 2, generate_path(0, 0, 10, 2, 0.01), np.zeros(2))


def test_divergence_reports_paths():
    with pytest.raises(FastProcessDivergence) as info:
        check_z(np.array([[0.0], [np.nan], [1.0]]))
    assert list(info.value.path_ids) == [1]


def convolution_gap(gamma, sigma, m, dW, dt):
    # unscaled form: Phi_t int Phi_s^-1 sigma dW = Phi_t sigma W_t + (1/m) Phi_t int Phi_s^-1 gamma (int_s^t sigma dW) ds
    steps = dW.shape[0]
    s = dt * np.arange(steps)
    W = np.concatenate([np.zeros((1,) + dW.shape[1:]), np.cumsum(dW, axis=0)])
    gaps = []
    for n in range(1, steps + 1):
        t = dt * n
        kern = np.exp(-gamma * (t - s[:n]) / m)[:, None]
        lhs = np.sum(kern * sigma * dW[:n], axis=0)
        rhs = np.exp(-gamma * t / m) * sigma * W[n] + np.sum(kern * gamma * sigma * (W[n] - W[:n]), axis=0) * dt / m
        gaps.append(np.abs(lhs - rhs))
    return np.max(gaps, axis=0)


def test_stochastic_convolution_identity_first_order():
    m, gamma, sigma = 0.1, 1.5, 0.9
    fine_dt = 0.0025
    steps = int(round(0.5 / fine_dt))
    dW = path_batch(12, range(40), steps, 1, fine_dt)[:, :, 0]
    g1 = convolution_gap(gamma, sigma, m, dW.reshape(steps // 2, 2, -1).sum(axis=1), 2 * fine_dt)
    g2 = convolution_gap(gamma, sigma, m, dW, fine_dt)
    ratio = np.sqrt(np.mean(g1**2)) / np.sqrt(np.mean(g2**2))
    assert 1.6 <= ratio <= 2.4
