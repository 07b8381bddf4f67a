"""Builtin model gallery, selected by name plus a flat parameter map."""

from __future__ import annotations

import math

import numpy as np

from .coeffs import ModelSpec


def _scalar(x):
    """Lift a batch-shaped scalar field to a 1x1 matrix field."""
    return np.asarray(x, dtype=float)[..., None, None]


def _vec1(x):
    return np.asarray(x, dtype=float)[..., None]


def _scalar_drag_model(name, params, g, g1, g2, gt, gt1, *, V, dV, sigma, lam):
    """One-dimensional model with drag ``g(t, q)`` and constant noise."""
    s = float(sigma)
    return ModelSpec(
        1,
        1,
        lam,
        gamma=lambda t, q: _scalar(g(t, q[..., 0])),
        sigma=lambda t, q: np.full(q.shape[:-1] + (1, 1), s),
        V=lambda t, q: V(q[..., 0]),
        gradV=lambda t, q: _vec1(dV(q[..., 0])),
        dgamma_dq=lambda t, q: _scalar(g1(t, q[..., 0]))[..., None],
        d2gamma_dq2=lambda t, q: _scalar(g2(t, q[..., 0]))[..., None, None],
        dgamma_dt=lambda t, q: _scalar(gt(t, q[..., 0])),
        d2gamma_dtdq=lambda t, q: _scalar(gt1(t, q[..., 0]))[..., None],
        dsigma_dq=lambda t, q: np.zeros(q.shape[:-1] + (1, 1, 1)),
        name=name,
        params=params,
    )


def scalar_sin(gamma0=2.0, gamma1=1.0, sigma=math.sqrt(2.0), kappa=1.0, eps_t=0.0, omega=1.0):
    """``gamma = gamma0 + gamma1 sin q + eps_t sin(omega t)``, ``V = kappa q^2 / 2``."""
    lam = gamma0 - abs(gamma1) - abs(eps_t)
    if lam <= 0:
        raise ValueError("scalar-sin needs gamma0 > |gamma1| + |eps_t|")
    return _scalar_drag_model(
        "scalar-sin",
        dict(gamma0=gamma0, gamma1=gamma1, sigma=sigma, kappa=kappa, eps_t=eps_t, omega=omega),
        lambda t, x: gamma0 + gamma1 * np.sin(x) + eps_t * math.sin(omega * t),
        lambda t, x: gamma1 * np.cos(x),
        lambda t, x: -gamma1 * np.sin(x),
        lambda t, x: np.full(np.shape(x), eps_t * omega * math.cos(omega * t)),
        lambda t, x: np.zeros(np.shape(x)),
        V=lambda x: 0.5 * kappa * x * x,
        dV=lambda x: kappa * x,
        sigma=sigma,
        lam=lam,
    )


def scalar_exp(beta=1.0, gamma0=1.0, sigma=math.sqrt(2.0), kappa=1.0, lam=0.05):
    """``gamma = gamma0 exp(beta q)``; the floor ``lam`` only holds on a bounded region."""
    return _scalar_drag_model(
        "scalar-exp",
        dict(beta=beta, gamma0=gamma0, sigma=sigma, kappa=kappa, lam=lam),
        lambda t, x: gamma0 * np.exp(beta * x),
        lambda t, x: gamma0 * beta * np.exp(beta * x),
        lambda t, x: gamma0 * beta * beta * np.exp(beta * x),
        lambda t, x: np.zeros(np.shape(x)),
        lambda t, x: np.zeros(np.shape(x)),
        V=lambda x: 0.5 * kappa * x * x,
        dV=lambda x: kappa * x,
        sigma=sigma,
        lam=lam,
    )


def double_well(gamma0=2.0, gamma1=0.5, sigma=math.sqrt(2.0), quartic=0.25, quadratic=0.5):
    """``V = quartic q^4 - quadratic q^2`` with sinusoidal drag; V is unbounded below nowhere but F is unbounded."""
    lam = gamma0 - abs(gamma1)
    if lam <= 0:
        raise ValueError("double-well needs gamma0 > |gamma1|")
    return _scalar_drag_model(
        "double-well",
        dict(gamma0=gamma0, gamma1=gamma1, sigma=sigma, quartic=quartic, quadratic=quadratic),
        lambda t, x: gamma0 + gamma1 * np.sin(x),
        lambda t, x: gamma1 * np.cos(x),
        lambda t, x: -gamma1 * np.sin(x),
        lambda t, x: np.zeros(np.shape(x)),
        lambda t, x: np.zeros(np.shape(x)),
        V=lambda x: quartic * x**4 - quadratic * x * x,
        dV=lambda x: 4.0 * quartic * x**3 - 2.0 * quadratic * x,
        sigma=sigma,
        lam=lam,
    )


def _magnetic_psi(B, Bt, omega):
    """Vector potential ``b(t) (-q2, q1) / 2`` with ``b(t) = B + Bt sin(omega t)``: constant field b(t)."""

    def b(t):
        return B + Bt * math.sin(omega * t)

    def db(t):
        return Bt * omega * math.cos(omega * t)

    rot = np.array([[0.0, -1.0], [1.0, 0.0]])  # psi = b/2 * rot @ q

    def psi(t, q):
        return 0.5 * b(t) * q @ rot.T

    def dpsi_dt(t, q):
        return 0.5 * db(t) * q @ rot.T

    def dpsi_dq(t, q):
        return np.broadcast_to(0.5 * b(t) * rot, q.shape[:-1] + (2, 2))

    def d2psi_dtdq(t, q):
        return np.broadcast_to(0.5 * db(t) * rot, q.shape[:-1] + (2, 2))

    def zeros(*shape):
        return lambda t, q: np.zeros(q.shape[:-1] + shape)

    return dict(
        psi=psi,
        dpsi_dt=dpsi_dt,
        dpsi_dq=dpsi_dq,
        d2psi_dtdq=d2psi_dtdq,
        d2psi_dq2=zeros(2, 2, 2),
        d3psi_dq3=zeros(2, 2, 2, 2),
        d3psi_dtdq2=zeros(2, 2, 2),
    )


def magnetic_2d(gamma0=2.0, gamma1=0.5, B=1.0, Bt=0.0, omega=1.0, kappa=1.0, sigma=1.0):
    """Two-dimensional model: ``gamma = gamma0 I + gamma1 diag(sin q1, sin q2)`` plus a uniform magnetic part."""
    lam = gamma0 - abs(gamma1)
    if lam <= 0:
        raise ValueError("magnetic-2d needs gamma0 > |gamma1|")
    eye = np.eye(2)

    def gamma(t, q):
        return gamma0 * eye + gamma1 * np.sin(q)[..., :, None] * eye

    def dgamma_dq(t, q):
        # d/dq_c of gamma1 sin(q_i) delta_ik
        d = np.zeros(q.shape[:-1] + (2, 2, 2))
        for i in range(2):
            d[..., i, i, i] = gamma1 * np.cos(q[..., i])
        return d

    def d2gamma_dq2(t, q):
        d = np.zeros(q.shape[:-1] + (2, 2, 2, 2))
        for i in range(2):
            d[..., i, i, i, i] = -gamma1 * np.sin(q[..., i])
        return d

    return ModelSpec(
        2,
        2,
        lam,
        gamma=gamma,
        sigma=lambda t, q: np.broadcast_to(sigma * eye, q.shape[:-1] + (2, 2)),
        V=lambda t, q: 0.5 * kappa * np.sum(q * q, axis=-1),
        gradV=lambda t, q: kappa * q,
        dgamma_dq=dgamma_dq,
        d2gamma_dq2=d2gamma_dq2,
        dgamma_dt=lambda t, q: np.zeros(q.shape[:-1] + (2, 2)),
        d2gamma_dtdq=lambda t, q: np.zeros(q.shape[:-1] + (2, 2, 2)),
        dsigma_dq=lambda t, q: np.zeros(q.shape[:-1] + (2, 2, 2)),
        name="magnetic-2d",
        params=dict(gamma0=gamma0, gamma1=gamma1, B=B, Bt=Bt, omega=omega, kappa=kappa, sigma=sigma),
        **_magnetic_psi(B, Bt, omega),
    )


def ou_const(n=1, gamma=1.0, sigma=1.0, sigma2=None, kappa=1.0, B=0.0):
    """Constant drag and noise with linear force ``-kappa q``; ``n = 2`` allows a magnetic part ``B``."""
    n = int(n)
    if n not in (1, 2):
        raise ValueError("ou-const supports n = 1 or 2")
    if n == 1 and B:
        raise ValueError("magnetic part needs n = 2")
    sig = np.diag([sigma] + ([sigma if sigma2 is None else sigma2] if n == 2 else []))
    g = gamma * np.eye(n)
    kwargs = {}
    if B:
        kwargs = _magnetic_psi(B, 0.0, 1.0)
    return ModelSpec(
        n,
        n,
        gamma,
        gamma=lambda t, q: np.broadcast_to(g, q.shape[:-1] + (n, n)),
        sigma=lambda t, q: np.broadcast_to(sig, q.shape[:-1] + (n, n)),
        V=lambda t, q: 0.5 * kappa * np.sum(q * q, axis=-1),
        gradV=lambda t, q: kappa * q,
        dgamma_dq=lambda t, q: np.zeros(q.shape[:-1] + (n, n, n)),
        d2gamma_dq2=lambda t, q: np.zeros(q.shape[:-1] + (n, n, n, n)),
        dgamma_dt=lambda t, q: np.zeros(q.shape[:-1] + (n, n)),
        d2gamma_dtdq=lambda t, q: np.zeros(q.shape[:-1] + (n, n, n)),
        dsigma_dq=lambda t, q: np.zeros(q.shape[:-1] + (n, n, n)),
        name="ou-const",
        params=dict(n=n, gamma=gamma, sigma=sigma, sigma2=sigma2, kappa=kappa, B=B),
        **kwargs,
    )


GALLERY = {
    "scalar-sin": scalar_sin,
    "scalar-exp": scalar_exp,
    "ou-const": ou_const,
    "magnetic-2d": magnetic_2d,
    "double-well": double_well,
}


def build_model(name: str, params: dict | None = None) -> ModelSpec:
    try:
        factory = GALLERY[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; choose from {sorted(GALLERY)}") from None
    return factory(**(params or {}))
