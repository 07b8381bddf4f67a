"""Time stepping for the underdamped system and the homogenized SDE.

States are batched: positions have shape ``(P, n)`` (one row per path) or
``(n,)`` for a single path.  Paths whose position leaves the guard ball or
whose coefficients become invalid are flagged as exploded and frozen at
their last good state; statistics exclude them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import coeffs, tensorops
from .noisegrid import WienerGrid
from .routes import _mv, route_for, screen

R_GUARD = 1e6
UNDERDAMPED_SCHEMES = ("exp", "exp-mid", "em")
LEVEL_SCHEMES = ("em", "milstein")


@dataclass
class PhaseState:
    t: float
    q: np.ndarray
    u: np.ndarray
    exploded: np.ndarray | bool = False


@dataclass
class Trajectory:
    """Positions on a uniform grid; leading axis is time."""

    times: np.ndarray
    q: np.ndarray
    u: np.ndarray | None = None
    z: np.ndarray | None = None
    R: np.ndarray | None = None
    exploded: np.ndarray | bool = False

    @property
    def dt(self):
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    @property
    def steps(self):
        return len(self.times) - 1

    def __post_init__(self):
        for name in ("q", "u", "z", "R"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != len(self.times):
                raise ValueError(f"{name} has {len(arr)} rows for {len(self.times)} grid times")


def as_increments(path, dt=None):
    """Normalize a WienerGrid or an increment array to ``(increments (steps, P, k), dt, single)``."""
    if isinstance(path, WienerGrid):
        return path.increments[:, None, :], path.dt, True
    inc = np.asarray(path, dtype=float)
    if dt is None:
        raise ValueError("dt is required with a raw increment array")
    if inc.ndim == 2:
        return inc[:, None, :], float(dt), True
    if inc.ndim != 3:
        raise ValueError("increments must have shape (steps, k) or (steps, paths, k)")
    return inc, float(dt), False


def batch_start(x, P, n):
    """Broadcast an initial value to ``(P, n)``."""
    x = np.zeros(n) if x is None else np.asarray(x, dtype=float)
    return np.array(np.broadcast_to(x, (P, n)))


def guard_update(new, old, flagged, guard=R_GUARD):
    """Freeze entries that are flagged, non-finite or outside the guard ball; return (state, flags)."""
    with np.errstate(invalid="ignore", over="ignore"):
        out = flagged | ~np.all(np.isfinite(new), axis=-1) | ~(np.linalg.norm(new, axis=-1) <= guard)
    if out.any():
        new = np.where(out[..., None], old, new)
    return new, out


def frozen_coefficients(model, t, q):
    """``(gt, inv(gt), F, sigma, bad)`` at a batch of positions."""
    q, bad = screen(model, t, q)
    gt = coeffs.tilde_gamma(model, t, q)
    return gt, tensorops.safe_inv(gt), coeffs.total_force(model, t, q), model.sigma(t, q), bad


def step_underdamped(model, m, s: PhaseState, dW, dt, scheme="exp", guard=R_GUARD) -> PhaseState:
    """One step of ``dq = u/m dt``, ``du = (-gt u/m + F) dt + sigma dW`` with coefficients frozen at (t, q).

    ``exp`` integrates the frozen linear system exactly in its deterministic
    part and applies the noise impulse at the step midpoint; ``em`` is plain
    Euler-Maruyama.
    """
    q = np.asarray(s.q, dtype=float)
    u = np.asarray(s.u, dtype=float)
    dW = np.asarray(dW, dtype=float)
    if scheme == "exp-mid":
        # coefficients frozen at a predicted midpoint instead of the left point
        gt, gti, F, sigma, bad = frozen_coefficients(model, s.t + 0.5 * dt, q + u * (0.5 * dt / m))
    else:
        gt, gti, F, sigma, bad = frozen_coefficients(model, s.t, q)
    noise = np.einsum("...ik,...k->...i", sigma, dW)
    if scheme in ("exp", "exp-mid"):
        E = tensorops.mat_exp(gt, -dt / m)
        Eh = tensorops.mat_exp(gt, -0.5 * dt / m)
        f = _mv(gti, F)
        mf = m * f
        u_new = _mv(E, u - mf) + mf + _mv(Eh, noise)
        # exact integral of u/m for the frozen deterministic flow, noise from the midpoint
        q_new = q + _mv(gti, u - mf - _mv(E, u - mf)) + f * dt + _mv(gti, noise - _mv(Eh, noise))
    elif scheme == "em":
        q_new = q + u * (dt / m)
        u_new = u + (-_mv(gt, u) / m + F) * dt + noise
    else:
        raise ValueError(f"unknown underdamped scheme {scheme!r}; choose from {UNDERDAMPED_SCHEMES}")
    flagged = np.asarray(s.exploded, dtype=bool) | bad
    q_new, out = guard_update(q_new, q, flagged, guard)
    u_new = np.where(out[..., None], u, u_new)
    with np.errstate(invalid="ignore"):
        out |= ~np.all(np.isfinite(u_new), axis=-1)
    u_new = np.where(out[..., None], u, u_new)
    if out.ndim == 0:
        out = bool(out)
    return PhaseState(t=s.t + dt, q=q_new, u=u_new, exploded=out)


def simulate_underdamped(model, m, path, q0, u0=None, *, dt=None, scheme="exp", t0=0.0, guard=R_GUARD):
    """Underdamped trajectory on the grid of ``path``; returns positions and momenta."""
    inc, dt, single = as_increments(path, dt)
    steps, P, _ = inc.shape
    n = model.n
    s = PhaseState(t0, batch_start(q0, P, n), batch_start(u0, P, n), np.zeros(P, dtype=bool))
    qs = np.empty((steps + 1, P, n))
    us = np.empty((steps + 1, P, n))
    qs[0], us[0] = s.q, s.u
    for i in range(steps):
        s = step_underdamped(model, m, s, inc[i], dt, scheme, guard)
        qs[i + 1], us[i + 1] = s.q, s.u
    times = t0 + dt * np.arange(steps + 1)
    if single:
        return Trajectory(times, qs[:, 0], u=us[:, 0], exploded=bool(s.exploded[0]))
    return Trajectory(times, qs, u=us, exploded=s.exploded)


def level_step(pd, q, dW, dt, milstein=False, extra=None, b_drive=None):
    """Euler-Maruyama (or scalar Milstein) step of ``dq = drift dt + b dW [+ extra]``.

    With ``b_drive`` the Milstein correction uses the net diffusion
    ``b(q) - b_drive`` that remains after the remainder's own noise.
    """
    q_new = q + pd.drift * dt + np.einsum("...ik,...k->...i", pd.b, dW)
    if milstein:
        b = pd.b[..., 0, 0]
        net = b if b_drive is None else b - b_drive
        q_new = q_new + (0.5 * pd.db * net * (dW[..., 0] ** 2 - dt))[..., None]
    if extra is not None:
        q_new = q_new + extra
    return q_new


def simulate_homogenized(
    model, path, q0, *, dt=None, scheme="em", fast_path="off", route=None, t0=0.0, guard=R_GUARD
) -> Trajectory:
    """Homogenized SDE ``dq = (inv(gt) F + S) dt + inv(gt) sigma dW`` on the grid of ``path``."""
    if scheme not in LEVEL_SCHEMES:
        raise ValueError(f"unknown homogenized scheme {scheme!r}; choose from {LEVEL_SCHEMES}")
    milstein = scheme == "milstein"
    inc, dt, single = as_increments(path, dt)
    steps, P, _ = inc.shape
    if route is None:
        route = route_for(model, fast_path, q_hint=q0 if np.ndim(q0) == 1 else None)
    q = batch_start(q0, P, model.n)
    exploded = np.zeros(P, dtype=bool)
    qs = np.empty((steps + 1, P, model.n))
    qs[0] = q
    t = t0
    for i in range(steps):
        pd = route.point(t, q, milstein=milstein)
        q, exploded = guard_update(level_step(pd, q, inc[i], dt, milstein), q, exploded | pd.bad, guard)
        t = t0 + (i + 1) * dt
        qs[i + 1] = q
    times = t0 + dt * np.arange(steps + 1)
    if single:
        return Trajectory(times, qs[:, 0], R=np.zeros((steps + 1, model.n)), exploded=bool(exploded[0]))
    return Trajectory(times, qs, R=np.zeros_like(qs), exploded=exploded)


def propagator_product_norms(model, m, traj: Trajectory, t0_index=0):
    """Operator norms of ``E_{j-1} ... E_{t0}`` along a position trajectory, one per later grid point.

    ``E_j = exp(-gt(t_j, q_j) dt / m)``; a single-path trajectory is expected.
    """
    dt = traj.dt
    n = model.n
    prod = np.eye(n)
    out = [1.0]
    for j in range(t0_index, traj.steps):
        gt = coeffs.tilde_gamma(model, traj.times[j], traj.q[j])
        prod = tensorops.mat_exp(gt, -dt / m) @ prod
        out.append(float(np.linalg.norm(prod, 2)))
    return np.array(out)
