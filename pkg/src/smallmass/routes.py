"""Point evaluations, fast-process steps and remainder increments.

A route bundles everything the time steppers need at one (t, q) batch.  The
generic route works from the full drag matrix through Lyapunov solves; the
special-case routes implement the simplified formulas that hold for scalar
drag and noise, for position-independent drag, and for a
fluctuation-dissipation relation.  They share one interface so the
steppers never branch on the model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import coeffs, tensorops
from .errors import FastProcessDivergence, WrongSpecializationError

ROUTE_KINDS = ("generic", "scalar", "const-gamma", "fluct-diss")


@dataclass
class PointData:
    t: float
    q: np.ndarray
    gt: np.ndarray  # batch + (n, n) full drag
    gti: np.ndarray
    F: np.ndarray  # batch + (n,)
    sigma: np.ndarray  # batch + (n, k)
    drift: np.ndarray  # inv(gt) F + S
    b: np.ndarray  # inv(gt) sigma
    bad: np.ndarray  # batch bool: non-finite or degenerate drag
    db: np.ndarray | None = None  # n = k = 1 only: d b / d q
    rdata: dict = field(default_factory=dict)  # remainder ingredients


def _mv(A, x):
    return np.einsum("...ij,...j->...i", A, x)


def _bad_mask(model, gamma, *arrays):
    batch = gamma.shape[:-2]
    bad = np.zeros(batch, dtype=bool)
    for a in (gamma,) + arrays:
        fin = np.isfinite(a)
        if a.ndim > len(batch):
            fin = fin.reshape(batch + (-1,)).all(axis=-1)
        bad |= ~fin
    g = np.where(bad[..., None, None], np.eye(gamma.shape[-1]) * model.lam, gamma)
    bad |= ~(coeffs.spectral_floor(g) >= 0.5 * model.lam)
    return bad


def screen(model, t, q):
    """Flag batch entries with non-finite coefficients or a violated drag floor.

    Flagged positions are replaced by the origin so the batch can still be
    evaluated; callers discard those entries.
    """
    q = np.asarray(q, dtype=float)
    with np.errstate(all="ignore"):
        g = model.gamma(t, q)
        F = model.F_ext(t, q) - model.deriv("gradV", t, q)
        s = model.sigma(t, q)
        bad = _bad_mask(model, g, F, s, q)
    if bad.any():
        q = np.array(q)
        q[bad] = 0.0
    return q, bad


def _require_scalar_noise(model):
    if model.n != 1 or model.k != 1:
        raise ValueError("the Milstein option is available for n = k = 1 only")


def _sym_contract(T, x, y):
    """``T[i,a,b] (x_a y_b + y_a x_b) / 2``."""
    return 0.5 * (
        np.einsum("...iab,...a,...b->...i", T, x, y) + np.einsum("...iab,...a,...b->...i", T, y, x)
    )


def z_update(E, Eh, gti, F, sigma, z, dW, m):
    """Frozen-coefficient exponential step of the fast process.

    ``z+ = E z + (I - E) sqrt(m) inv(gt) F + Eh sigma dW / sqrt(m)``.
    """
    sq = np.sqrt(m)
    forced = sq * _mv(gti, F)
    noise = _mv(Eh, np.einsum("...ik,...k->...i", sigma, dW)) / sq
    return _mv(E, z - forced) + forced + noise


class GenericRoute:
    """Full matrix route: Lyapunov solves for the drift and the QG tensor for remainders."""

    kind = "generic"

    def __init__(self, model: coeffs.ModelSpec, drift_shortcut: bool = False):
        self.model = model
        self.drift_shortcut = drift_shortcut

    def point(self, t, q, with_R=False, milstein=False) -> PointData:
        model = self.model
        q, bad = screen(model, t, q)
        bundle = coeffs.eval_tilde_gamma(model, t, q, order=2 if with_R else 1, check=False)
        F = coeffs.total_force(model, t, q)
        sigma = model.sigma(t, q)
        gti = bundle.gti
        S = coeffs.noise_induced_drift(model, t, q, bundle=bundle, sigma=sigma, shortcut=self.drift_shortcut)
        pd = PointData(
            t=t, q=q, gt=bundle.gt, gti=gti, F=F, sigma=sigma, drift=_mv(gti, F) + S, b=gti @ sigma, bad=bad
        )
        if milstein:
            _require_scalar_noise(model)
            ds = model.deriv("dsigma_dq", t, q)
            pd.db = bundle.dgti[..., 0, 0, 0] * sigma[..., 0, 0] + gti[..., 0, 0] * ds[..., 0, 0, 0]
        if with_R:
            qg = coeffs.qg_tensor(model, t, q, bundle=bundle)
            pd.rdata = dict(dgti_dt=bundle.dgti_dt, T=qg.T, dT=qg.dT_dq, dTt=qg.dT_dt)
        return pd

    def propagators(self, pd, dt, m):
        return tensorops.mat_exp(pd.gt, -dt / m), tensorops.mat_exp(pd.gt, -0.5 * dt / m)

    def z_step(self, pd, z, dW, dt, m):
        E, Eh = self.propagators(pd, dt, m)
        return z_update(E, Eh, pd.gti, pd.F, pd.sigma, z, dW, m)

    def zz_term(self, pd, z):
        return np.einsum("...iab,...a,...b->...i", pd.rdata["T"], z, z)

    def remainder_increment(self, m, dt, left, right, z, z_new, dW, milstein=False):
        r = left.rdata
        T = r["T"]
        w = np.einsum("...ik,...k->...i", left.sigma, dW)
        sq = np.sqrt(m)
        d = -(_mv(right.gti, z_new) - _mv(left.gti, z))  # (a)
        d = d + _mv(r["dgti_dt"], z) * dt  # (b)
        d = d + 2.0 * _sym_contract(T, z, left.F) * dt  # (c)
        d = d + np.einsum("...iabc,...a,...b,...c->...i", r["dT"], z, z, z) * dt  # (d)
        d = d + 2.0 * _sym_contract(T, z, w)  # (e)
        d = d - sq * (self.zz_term(right, z_new) - self.zz_term(left, z))  # (f)
        d = d + sq * np.einsum("...iab,...a,...b->...i", r["dTt"], z, z) * dt  # (g)
        if milstein:
            # iterated-integral part of (e): z moves by sigma dW / sqrt(m) within the step
            Sigma_dt = left.sigma @ np.swapaxes(left.sigma, -1, -2) * dt
            d = d + (np.einsum("...iab,...a,...b->...i", T, w, w) - np.einsum("...iab,...ab->...i", T, Sigma_dt)) / sq
        return d


class FluctDissRoute(GenericRoute):
    """Generic remainders; drift uses the temperature-weighted divergence of inv(gamma)."""

    kind = "fluct-diss"

    def __init__(self, model):
        super().__init__(model, drift_shortcut=True)


class ConstGammaRoute(GenericRoute):
    """``psi = 0`` and gamma independent of q: no noise-induced drift, remainder only from z."""

    kind = "const-gamma"

    def __init__(self, model):
        super().__init__(model)
        self._cache = {}

    def _gamma0(self, t):
        g0 = self.model.gamma(t, np.zeros(self.model.n))
        return g0, tensorops.safe_inv(g0)

    def point(self, t, q, with_R=False, milstein=False):
        model = self.model
        q, bad = screen(model, t, q)
        batch = q.shape[:-1]
        g0, gti0 = self._gamma0(t)
        gt = np.broadcast_to(g0, batch + g0.shape)
        gti = np.broadcast_to(gti0, gt.shape)
        F = model.F_ext(t, q) - model.deriv("gradV", t, q)
        sigma = model.sigma(t, q)
        pd = PointData(t=t, q=q, gt=gt, gti=gti, F=F, sigma=sigma, drift=_mv(gti, F), b=gti @ sigma, bad=bad)
        if milstein:
            _require_scalar_noise(model)
            ds = model.deriv("dsigma_dq", t, q)
            pd.db = gti[..., 0, 0] * ds[..., 0, 0, 0]
        if with_R:
            g0t = model.deriv("dgamma_dt", t, np.zeros(model.n))
            pd.rdata = dict(dgti_dt=np.broadcast_to(tensorops.inv_derivative(g0, g0t, gti0), gt.shape))
        return pd

    def propagators(self, pd, dt, m):
        key = (pd.t, dt, m)
        if key not in self._cache:
            g0 = pd.gt[(0,) * (pd.gt.ndim - 2)]
            self._cache = {key: (tensorops.mat_exp(g0, -dt / m), tensorops.mat_exp(g0, -0.5 * dt / m))}
        return self._cache[key]

    def remainder_increment(self, m, dt, left, right, z, z_new, dW, milstein=False):
        return _mv(left.rdata["dgti_dt"], z) * dt - (_mv(right.gti, z_new) - _mv(left.gti, z))


class ScalarRoute:
    """Scalar drag ``g(t, q) I`` and scalar noise ``s(t, q) I`` with ``psi = 0``.

    Works directly with ``1/g`` and its partials instead of matrices; the
    remainder uses ``Y[i,k,l] = inv(g) d_l inv(g) delta_ik / 2``.
    """

    kind = "scalar"

    def __init__(self, model):
        self.model = model

    def point(self, t, q, with_R=False, milstein=False):
        model = self.model
        q, bad = screen(model, t, q)
        g = model.gamma(t, q)[..., 0, 0]
        s = model.sigma(t, q)[..., 0, 0]
        dg = model.deriv("dgamma_dq", t, q)[..., 0, 0, :]
        F = model.F_ext(t, q) - model.deriv("gradV", t, q)
        ginv = 1.0 / g
        dginv = -dg * (ginv * ginv)[..., None]
        kT = 0.5 * s * s * ginv
        eye = np.eye(model.n)
        pd = PointData(
            t=t,
            q=q,
            gt=g[..., None, None] * eye,
            gti=ginv[..., None, None] * eye,
            F=F,
            sigma=s[..., None, None] * eye,
            drift=ginv[..., None] * F + kT[..., None] * dginv,
            b=(ginv * s)[..., None, None] * eye,
            bad=bad,
        )
        pd.rdata = dict(g=g, ginv=ginv, s=s, dginv=dginv)
        if milstein:
            _require_scalar_noise(model)
            ds = model.deriv("dsigma_dq", t, q)[..., 0, 0, 0]
            pd.db = (ds * g - s * dg[..., 0]) * ginv * ginv
        if with_R:
            H = model.deriv("d2gamma_dq2", t, q)[..., 0, 0, :, :]
            g_t = model.deriv("dgamma_dt", t, q)[..., 0, 0]
            dg_t = model.deriv("d2gamma_dtdq", t, q)[..., 0, 0, :]
            ginv2 = ginv * ginv
            ginv3 = ginv2 * ginv
            pd.rdata.update(
                Hinv=-H * ginv2[..., None, None] + 2.0 * ginv3[..., None, None] * dg[..., :, None] * dg[..., None, :],
                ginv_t=-g_t * ginv2,
                dginv_t=-dg_t * ginv2[..., None] + 2.0 * (g_t * ginv3)[..., None] * dg,
            )
        return pd

    def z_step(self, pd, z, dW, dt, m):
        g, s = pd.rdata["g"], pd.rdata["s"]
        E = np.exp(-g * dt / m)[..., None]
        Eh = np.exp(-0.5 * g * dt / m)[..., None]
        sq = np.sqrt(m)
        forced = sq * pd.rdata["ginv"][..., None] * pd.F
        return E * (z - forced) + forced + Eh * s[..., None] * dW / sq

    def zz_term(self, pd, z):
        r = pd.rdata
        return 0.5 * (r["ginv"] * np.sum(z * r["dginv"], axis=-1))[..., None] * z

    def remainder_increment(self, m, dt, left, right, z, z_new, dW, milstein=False):
        L = left.rdata
        ginv, dginv = L["ginv"][..., None], L["dginv"]
        zd = np.sum(z * dginv, axis=-1)[..., None]
        F = left.F
        w = L["s"][..., None] * dW
        sq = np.sqrt(m)
        d = -(right.rdata["ginv"][..., None] * z_new - ginv * z)
        d = d + L["ginv_t"][..., None] * z * dt
        d = d + 0.5 * ginv * (z * np.sum(F * dginv, axis=-1)[..., None] + F * zd) * dt
        zHz = np.einsum("...a,...ab,...b->...", z, L["Hinv"], z)[..., None]
        d = d + 0.5 * z * (zd * zd + ginv * zHz) * dt
        d = d + 0.5 * ginv * (z * np.sum(w * dginv, axis=-1)[..., None] + w * zd)
        d = d - sq * (self.zz_term(right, z_new) - self.zz_term(left, z))
        zdt = np.sum(z * L["dginv_t"], axis=-1)[..., None]
        d = d + sq * 0.5 * z * (L["ginv_t"][..., None] * zd + ginv * zdt) * dt
        if milstein:
            wd = np.sum(w * dginv, axis=-1)[..., None]
            d = d + 0.5 * ginv * (w * wd - (L["s"] ** 2)[..., None] * dginv * dt) / sq
        return d


# ---------------------------------------------------------------------------
# structure checks


def _probe_points(model, probes, q_hint=None):
    base = np.zeros(model.n) if q_hint is None else np.asarray(q_hint, dtype=float).reshape(model.n)
    pts = [(0.0, base)]
    if probes is not None:
        return pts + list(probes)
    rng = np.random.default_rng(12345)
    for _ in range(8):
        pts.append((float(rng.uniform(0.0, 1.0)), base + rng.uniform(-2.0, 2.0, model.n)))
    return pts


def supports(model, kind, probes=None, q_hint=None, rtol=1e-12):
    """Whether the model has the structure required by a special-case route (checked on probes)."""
    if kind not in ROUTE_KINDS:
        raise ValueError(f"unknown route kind {kind!r}; choose from {ROUTE_KINDS}")
    if kind == "generic":
        return True
    if model.has_psi:
        return False
    eye = np.eye(model.n)
    for t, q in _probe_points(model, probes, q_hint):
        g = model.gamma(t, q)
        s = model.sigma(t, q)
        gscale = max(float(np.max(np.abs(g))), 1e-300)
        if kind == "scalar":
            sscale = max(float(np.max(np.abs(s))), 1e-300)
            if model.k != model.n:
                return False
            if np.max(np.abs(g - g[0, 0] * eye)) > rtol * gscale:
                return False
            if np.max(np.abs(s - s[0, 0] * eye)) > rtol * sscale:
                return False
        elif kind == "const-gamma":
            if np.max(np.abs(model.deriv("dgamma_dq", t, q))) > 1e-9 * gscale:
                return False
            if np.max(np.abs(g - model.gamma(t, np.zeros(model.n)))) > rtol * gscale:
                return False
        elif coeffs.fluct_diss_temperature(g, coeffs.diffusion_matrix(s)) is None:
            return False
    return True


_CLASSES = {
    "generic": GenericRoute,
    "scalar": ScalarRoute,
    "const-gamma": ConstGammaRoute,
    "fluct-diss": FluctDissRoute,
}


def make_route(model, kind="generic", probes=None, q_hint=None):
    """Build a route, checking the structural requirement of special cases."""
    if not supports(model, kind, probes, q_hint):
        raise WrongSpecializationError(f"model {model.name!r} lacks the structure for the {kind!r} route")
    return _CLASSES[kind](model)


def route_for(model, fast_path="off", q_hint=None):
    """Route selected by the ``fast_path`` policy: auto, off, or a named special case."""
    if fast_path in ("off", None, "generic"):
        return GenericRoute(model)
    if fast_path == "auto":
        for kind in ("scalar", "const-gamma"):
            if supports(model, kind, q_hint=q_hint):
                return _CLASSES[kind](model)
        return GenericRoute(model)
    return make_route(model, fast_path, q_hint=q_hint)


def check_z(z, exploded=None):
    """Raise a fast-process divergence naming the offending batch entries."""
    fin = np.all(np.isfinite(z), axis=-1)
    if exploded is not None:
        fin |= exploded
    if not np.all(fin):
        ids = np.flatnonzero(~fin).tolist()
        raise FastProcessDivergence(f"fast process diverged on paths {ids}", ids)
