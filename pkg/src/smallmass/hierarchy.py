"""Fast process, remainder increments and the hierarchy of corrected SDEs.

Level 1 is the homogenized SDE.  Level ``l`` adds ``sqrt(m) dR`` where the
remainder ``R`` is assembled from level ``l - 1`` and its fast process
``z``.  All processes of one mass advance in lockstep on the same fine
grid and the same Brownian increments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    R_GUARD,
    LEVEL_SCHEMES,
    UNDERDAMPED_SCHEMES,
    PhaseState,
    Trajectory,
    as_increments,
    batch_start,
    guard_update,
    level_step,
    simulate_homogenized,
    step_underdamped,
)
from .errors import FastProcessDivergence
from .routes import check_z, make_route, route_for


@dataclass
class RemainderState:
    """Fast process and accumulated remainder along one driving path.

    ``gz`` and ``tzz`` cache ``inv(gt) z`` and ``sqrt(m) T:zz`` at the current
    point so the exact-differential terms are plain endpoint differences.
    """

    t: float
    z: np.ndarray
    R_accum: np.ndarray
    gz: np.ndarray | None = None
    tzz: np.ndarray | None = None


@dataclass
class HierarchyRun:
    m: float
    level: int
    driving: Trajectory | None
    output: Trajectory
    R: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def _route(model, route, fast_path="off"):
    return route if route is not None else route_for(model, fast_path)


def step_z(model, m, z, y, t, dW, dt, route=None):
    """Exponential step of ``dz = -(gt/m) z dt + F/sqrt(m) dt + sigma/sqrt(m) dW`` with coefficients at (t, y)."""
    route = _route(model, route)
    z = np.asarray(z, dtype=float)
    pd = route.point(t, y)
    z_new = route.z_step(pd, z, np.asarray(dW, dtype=float), dt, m)
    check_z(np.atleast_2d(z_new))
    return z_new


def remainder_increment(model, m, t, y, y_new, z, z_new, dW, dt, route=None, milstein=False):
    """Remainder increment over one step: dt and dW terms at the left point, exact differentials as endpoint differences."""
    route = _route(model, route)
    left = route.point(t, y, with_R=True)
    right = route.point(t + dt, y_new, with_R=True)
    z, z_new, dW = (np.asarray(a, dtype=float) for a in (z, z_new, dW))
    return route.remainder_increment(m, dt, left, right, z, z_new, dW, milstein)


def drive_remainder(model, m, y: Trajectory, path, z0=None, *, dt=None, route=None, milstein=False):
    """Fast process and remainder along a given driving trajectory; returns ``(z, R)`` arrays."""
    route = _route(model, route)
    inc, dt, single = as_increments(path, dt)
    steps, P, _ = inc.shape
    ys = y.q[:, None, :] if single else y.q
    if len(ys) != steps + 1:
        raise ValueError("driving trajectory and noise grid differ in length")
    t0 = float(y.times[0])
    st = RemainderState(t0, batch_start(z0, P, model.n), np.zeros((P, model.n)))
    zs = np.empty((steps + 1, P, model.n))
    Rs = np.zeros((steps + 1, P, model.n))
    zs[0] = st.z
    left = route.point(t0, ys[0], with_R=True)
    for i in range(steps):
        t_new = t0 + (i + 1) * dt
        z_new = route.z_step(left, st.z, inc[i], dt, m)
        check_z(z_new)
        right = route.point(t_new, ys[i + 1], with_R=True)
        st.R_accum = st.R_accum + route.remainder_increment(m, dt, left, right, st.z, z_new, inc[i], milstein)
        st.t, st.z, left = t_new, z_new, right
        zs[i + 1], Rs[i + 1] = st.z, st.R_accum
    if single:
        return zs[:, 0], Rs[:, 0]
    return zs, Rs


class LockstepEngine:
    """Advance the underdamped reference and hierarchy levels 1..L on shared increments.

    After every step the optional callback receives ``(step_index, t, engine)``;
    the engine exposes ``q_ref``, ``u_ref``, ``q`` (list by level), ``z``,
    ``R`` and ``exploded``.
    """

    def __init__(
        self,
        model,
        m,
        levels,
        route,
        q0,
        z0=None,
        *,
        level_scheme="em",
        ref_scheme="exp",
        t0=0.0,
        guard=R_GUARD,
        path_ids=None,
    ):
        if levels < 1:
            raise ValueError("levels must be >= 1")
        if level_scheme not in LEVEL_SCHEMES:
            raise ValueError(f"unknown level scheme {level_scheme!r}")
        if ref_scheme is not None and ref_scheme not in UNDERDAMPED_SCHEMES:
            raise ValueError(f"unknown reference scheme {ref_scheme!r}")
        self.model, self.m, self.L, self.route = model, float(m), int(levels), route
        self.q0, self.z0 = q0, z0
        self.milstein = level_scheme == "milstein"
        self.ref_scheme = ref_scheme
        self.t0, self.guard = float(t0), guard
        self.path_ids = path_ids

    def _reset(self, P):
        n = self.model.n
        self.t = self.t0
        self.exploded = np.zeros(P, dtype=bool)
        q = batch_start(self.q0, P, n)
        z = batch_start(self.z0, P, n)
        self.q = [q.copy() for _ in range(self.L)]
        self.z = [z.copy() for _ in range(self.L - 1)]
        self.R = [np.zeros((P, n)) for _ in range(self.L - 1)]
        self.pd = [self._point(l, self.t, self.q[l]) for l in range(self.L)]
        self.ref = None
        if self.ref_scheme is not None:
            self.ref = PhaseState(self.t, q.copy(), np.sqrt(self.m) * z, np.zeros(P, dtype=bool))
        self.max_z = np.zeros(self.L - 1)

    def _point(self, l, t, q):
        pd = self.route.point(t, q, with_R=l < self.L - 1, milstein=self.milstein)
        self.exploded |= pd.bad
        return pd

    @property
    def q_ref(self):
        return self.ref.q

    @property
    def u_ref(self):
        return self.ref.u

    def step(self, i, dW, dt):
        m, route = self.m, self.route
        t_new = self.t0 + (i + 1) * dt
        sq = np.sqrt(m)
        if self.ref is not None:
            self.ref = step_underdamped(self.model, m, self.ref, dW, dt, self.ref_scheme, self.guard)
            self.exploded |= self.ref.exploded
        new_pd, new_z = [], []
        for l in range(self.L):
            pd = self.pd[l]
            extra = b_drive = None
            if l > 0:
                dR = route.remainder_increment(
                    m, dt, self.pd[l - 1], new_pd[l - 1], self.z[l - 1], new_z[l - 1], dW, self.milstein
                )
                self.R[l - 1] = self.R[l - 1] + dR
                extra = sq * dR
                if self.milstein:
                    b_drive = self.pd[l - 1].b[..., 0, 0]
            q_new = level_step(pd, self.q[l], dW, dt, self.milstein, extra, b_drive)
            q_new, self.exploded = guard_update(q_new, self.q[l], self.exploded, self.guard)
            if l < self.L - 1:
                z_new = route.z_step(pd, self.z[l], dW, dt, m)
                try:
                    check_z(z_new, self.exploded)
                except FastProcessDivergence as exc:
                    ids = exc.path_ids if self.path_ids is None else [self.path_ids[j] for j in exc.path_ids]
                    raise FastProcessDivergence(f"fast process of level {l + 1} diverged on paths {ids}", ids) from None
                z_new = np.where(self.exploded[:, None], 0.0, z_new)
                self.max_z[l] = max(self.max_z[l], float(np.max(np.linalg.norm(z_new, axis=-1), initial=0.0)))
                new_z.append(z_new)
            self.q[l] = q_new
            new_pd.append(self._point(l, t_new, q_new))
        self.pd, self.z, self.t = new_pd, new_z, t_new

    def run(self, increments, dt, callback=None):
        steps, P, _ = increments.shape
        self._reset(P)
        if callback is not None:
            callback(0, self.t, self)
        for i in range(steps):
            self.step(i, increments[i], dt)
            if callback is not None:
                callback(i + 1, self.t, self)
        return self


def run_level(
    model,
    m,
    level,
    path,
    q0,
    *,
    dt=None,
    z0=None,
    scheme="em",
    fast_path="off",
    route=None,
    t0=0.0,
    guard=R_GUARD,
) -> HierarchyRun:
    """Integrate hierarchy level ``level`` together with the levels below it on one noise grid."""
    if level < 1:
        raise ValueError("level must be >= 1")
    route = route if route is not None else route_for(model, fast_path, q_hint=q0 if np.ndim(q0) == 1 else None)
    inc, dt, single = as_increments(path, dt)
    steps, P, _ = inc.shape
    times = t0 + dt * np.arange(steps + 1)
    if level == 1:
        out = simulate_homogenized(model, path, q0, dt=dt, scheme=scheme, route=route, t0=t0, guard=guard)
        return HierarchyRun(m, 1, None, out, out.R, dict(route=route.kind, exploded=int(np.sum(out.exploded))))
    n = model.n
    rec = {k: np.empty((steps + 1, P, n)) for k in ("drv", "out", "z", "R")}

    def record(i, t, eng):
        rec["drv"][i] = eng.q[level - 2]
        rec["out"][i] = eng.q[level - 1]
        rec["z"][i] = eng.z[level - 2]
        rec["R"][i] = eng.R[level - 2]

    eng = LockstepEngine(model, m, level, route, q0, z0, level_scheme=scheme, ref_scheme=None, t0=t0, guard=guard)
    eng.run(inc, dt, record)
    exploded = eng.exploded
    if single:
        rec = {k: v[:, 0] for k, v in rec.items()}
        exploded = bool(exploded[0])
    driving = Trajectory(times, rec["drv"], z=rec["z"], R=rec["R"], exploded=exploded)
    output = Trajectory(times, rec["out"], exploded=exploded)
    diag = dict(route=route.kind, max_z=eng.max_z.tolist(), exploded=int(np.sum(eng.exploded)))
    return HierarchyRun(m, level, driving, output, rec["R"], diag)


def run_level_special(kind, model, m, level, path, q0, **kwargs) -> HierarchyRun:
    """``run_level`` through a special-case route; the model structure is checked first."""
    route = make_route(model, kind, q_hint=q0 if np.ndim(q0) == 1 else None)
    return run_level(model, m, level, path, q0, route=route, **kwargs)
