"""Coefficient fields of the Langevin system and the quantities derived from them.

Conventions
-----------
All evaluators are vectorised: ``q`` has shape ``batch + (n,)`` and ``t`` is a
scalar.  Partial derivatives in q append one trailing axis per derivative, so
``dgamma_dq[..., i, k, c]`` is the derivative of ``gamma[..., i, k]`` along
``q[c]``.  Indices are Euclidean; the raised/lowered placement of the
continuum formulas becomes plain matrix inversion and delta contractions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensorops
from .errors import DegenerateDragError, EvaluationError, WrongSpecializationError

# derivative name -> (base supplier, variable)
DERIVATIVES = {
    "dgamma_dt": ("gamma", "t"),
    "dgamma_dq": ("gamma", "q"),
    "d2gamma_dq2": ("dgamma_dq", "q"),
    "d2gamma_dtdq": ("dgamma_dq", "t"),
    "dpsi_dt": ("psi", "t"),
    "dpsi_dq": ("psi", "q"),
    "d2psi_dq2": ("dpsi_dq", "q"),
    "d3psi_dq3": ("d2psi_dq2", "q"),
    "d2psi_dtdq": ("dpsi_dq", "t"),
    "d3psi_dtdq2": ("d2psi_dq2", "t"),
    "dsigma_dq": ("sigma", "q"),
    "gradV": ("V", "q"),
}

FD_REL_STEP = 1e-5


def fd_step_q(q, depth=0):
    """Central-difference step per point: ``max(1e-5, 1e-5 |q|)``, widened by 10x per nesting level."""
    return np.maximum(FD_REL_STEP, FD_REL_STEP * np.linalg.norm(q, axis=-1)) * 10.0**depth


def fd_step_t(t, depth=0):
    return max(FD_REL_STEP, FD_REL_STEP * abs(t)) * 10.0**depth


def fd_q(f, depth=0):
    """Central-difference q-gradient of ``f``; the derivative axis is appended last."""

    def deriv(t, q):
        q = np.asarray(q, dtype=float)
        h = fd_step_q(q, depth)
        cols = []
        for c in range(q.shape[-1]):
            dq = np.zeros(q.shape)
            dq[..., c] = h
            fp = np.asarray(f(t, q + dq))
            fm = np.asarray(f(t, q - dq))
            hh = h.reshape(h.shape + (1,) * (fp.ndim - h.ndim))
            cols.append((fp - fm) / (2.0 * hh))
        return np.stack(cols, axis=-1)

    return deriv


def fd5_q(f, rel=3e-5):
    """Five-point (fourth-order) q-gradient of a scalar field; the accurate oracle for analytic gradients."""

    def deriv(t, q):
        q = np.asarray(q, dtype=float)
        h = rel * np.maximum(1.0, np.linalg.norm(q, axis=-1))
        cols = []
        for c in range(q.shape[-1]):
            e = np.zeros(q.shape)
            e[..., c] = 1.0
            hv = h[..., None] * e
            f2p, f1p = np.asarray(f(t, q + 2 * hv)), np.asarray(f(t, q + hv))
            f1m, f2m = np.asarray(f(t, q - hv)), np.asarray(f(t, q - 2 * hv))
            cols.append((-f2p + 8 * f1p - 8 * f1m + f2m) / (12.0 * h))
        return np.stack(cols, axis=-1)

    return deriv


def fd_t(f, depth=0):
    def deriv(t, q):
        h = fd_step_t(t, depth)
        return (np.asarray(f(t + h, q)) - np.asarray(f(t - h, q))) / (2.0 * h)

    return deriv


class ModelSpec:
    """Coefficient fields ``gamma, psi, V, F_ext, sigma`` plus derivative suppliers.

    Any derivative left as ``None`` falls back to central finite differences of
    the next-lower supplier.  ``psi=None`` and ``V=None`` mean identically zero.
    Instances are immutable after construction and safe to share between workers.
    """

    def __init__(
        self,
        n: int,
        k: int,
        lam: float,
        gamma: Callable,
        sigma: Callable,
        *,
        V: Callable | None = None,
        F_ext: Callable | None = None,
        psi: Callable | None = None,
        name: str = "custom",
        params: dict | None = None,
        **derivatives: Callable | None,
    ):
        unknown = set(derivatives) - set(DERIVATIVES)
        if unknown:
            raise TypeError(f"unknown derivative suppliers: {sorted(unknown)}")
        if n < 1 or k < 1:
            raise ValueError("n and k must be positive")
        if not lam > 0:
            raise ValueError("lam must be positive")
        self.n = int(n)
        self.k = int(k)
        self.lam = float(lam)
        self.name = name
        self.params = dict(params or {})
        self.has_psi = psi is not None
        self.has_V = V is not None
        self.has_F_ext = F_ext is not None

        n_, k_ = self.n, self.k
        shapes = {
            "gamma": (n_, n_),
            "sigma": (n_, k_),
            "psi": (n_,),
            "V": (),
            "F_ext": (n_,),
        }
        base = {"gamma": gamma, "sigma": sigma, "psi": psi, "V": V, "F_ext": F_ext}
        self._fn: dict[str, Callable] = {}
        self._depth: dict[str, int] = {}
        for key, fn in base.items():
            if fn is None:
                fn = _zeros(shapes[key])
            self._fn[key] = _shaped(fn, shapes[key])
            self._depth[key] = 0
        for key, (parent, var) in DERIVATIVES.items():
            shapes[key] = shapes[parent] + ((n_,) if var == "q" else ())
        self._shapes = shapes
        self._analytic = {key: derivatives.get(key) is not None for key in DERIVATIVES}
        for key in DERIVATIVES:
            self._resolve(key, derivatives)

    def _resolve(self, key, supplied):
        if key in self._fn:
            return
        parent, var = DERIVATIVES[key]
        fn = supplied.get(key)
        psi_family = key.startswith(("dpsi", "d2psi", "d3psi"))
        if fn is None and ((psi_family and not self.has_psi) or (key == "gradV" and not self.has_V)):
            fn = _zeros(self._shapes[key])
            self._analytic[key] = True
        if fn is not None:
            self._fn[key] = _shaped(fn, self._shapes[key])
            self._depth[key] = 0
            return
        self._resolve(parent, supplied)
        depth = self._depth[parent]
        maker = fd_q if var == "q" else fd_t
        self._fn[key] = _shaped(maker(self._fn[parent], depth), self._shapes[key])
        self._depth[key] = depth + 1

    # field evaluators -------------------------------------------------
    def gamma(self, t, q):
        return self._fn["gamma"](t, q)

    def sigma(self, t, q):
        return self._fn["sigma"](t, q)

    def psi(self, t, q):
        return self._fn["psi"](t, q)

    def V(self, t, q):
        return self._fn["V"](t, q)

    def F_ext(self, t, q):
        return self._fn["F_ext"](t, q)

    def deriv(self, key, t, q):
        return self._fn[key](t, q)

    def supplier(self, key):
        return self._fn[key]

    def is_analytic(self, key):
        return self._analytic.get(key, True)

    def provenance(self, keys=None):
        keys = DERIVATIVES if keys is None else keys
        return "analytic" if all(self._analytic[k] for k in keys) else "finite-difference"

    def __repr__(self):
        return f"ModelSpec(name={self.name!r}, n={self.n}, k={self.k}, lam={self.lam})"


def _zeros(shape):
    def fn(t, q):
        return np.zeros(np.shape(q)[:-1] + shape)

    return fn


def _shaped(fn, shape):
    def wrapped(t, q):
        out = np.asarray(fn(t, q), dtype=float)
        batch = np.shape(q)[:-1]
        if out.shape != batch + shape:
            out = np.broadcast_to(out, batch + shape)
        return out

    wrapped.__wrapped__ = fn
    return wrapped


# ---------------------------------------------------------------------------
# drag matrix with magnetic part


@dataclass
class DerivativeBundle:
    """Value and partials of the full drag matrix and of its inverse at (t, q)."""

    gt: np.ndarray
    gti: np.ndarray
    dgt: np.ndarray
    dgti: np.ndarray
    dgt_dt: np.ndarray | None = None
    dgti_dt: np.ndarray | None = None
    d2gt: np.ndarray | None = None
    d2gti: np.ndarray | None = None
    d2gt_dtdq: np.ndarray | None = None
    d2gti_dtdq: np.ndarray | None = None
    provenance: str = "analytic"

    @property
    def Q(self):
        """``Q[i, k, l]`` = derivative of ``inv(gt)[i, k]`` along ``q[l]``."""
        return self.dgti


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise EvaluationError(f"non-finite value in {what}")
    return arr


def spectral_floor(gamma):
    sym = 0.5 * (gamma + np.swapaxes(gamma, -1, -2))
    if gamma.shape[-1] == 1:
        return sym[..., 0, 0]
    return np.linalg.eigvalsh(sym)[..., 0]


def check_drag(model, gamma):
    floor = spectral_floor(gamma)
    if np.any(floor < 0.5 * model.lam):
        raise DegenerateDragError(
            f"drag eigenvalue {float(np.min(floor)):.3g} below lam/2 = {0.5 * model.lam:.3g}"
        )


def _antisym(dpsi):
    return dpsi - np.swapaxes(dpsi, -1, -2)


def tilde_gamma(model, t, q):
    """Drag plus magnetic part: ``gamma_ik + d_k psi_i - d_i psi_k``."""
    g = model.gamma(t, q)
    if model.has_psi:
        g = g + _antisym(model.deriv("dpsi_dq", t, q))
    return g


def eval_tilde_gamma(model: ModelSpec, t, q, order: int = 2, check: bool = True) -> DerivativeBundle:
    """Evaluate the full drag matrix, its inverse and their partials.

    ``order=1`` stops at first q- and t-partials; ``order=2`` adds the second
    q-partials and the mixed t-q partials.
    """
    q = np.asarray(q, dtype=float)
    n = model.n
    gamma = _check_finite(model.gamma(t, q), "gamma")
    if check:
        check_drag(model, gamma)
    gt = gamma
    dgt = model.deriv("dgamma_dq", t, q)
    dgt_dt = model.deriv("dgamma_dt", t, q)
    keys = ["dgamma_dq", "dgamma_dt"]
    if model.has_psi:
        gt = gt + _antisym(model.deriv("dpsi_dq", t, q))
        d2psi = model.deriv("d2psi_dq2", t, q)
        dgt = dgt + d2psi - np.swapaxes(d2psi, -2, -3)
        dgt_dt = dgt_dt + _antisym(model.deriv("d2psi_dtdq", t, q))
        keys += ["dpsi_dq", "d2psi_dq2", "d2psi_dtdq"]
    gti = tensorops.safe_inv(gt)
    dgti = np.stack(
        [tensorops.inv_derivative(gt, dgt[..., c], gti) for c in range(n)], axis=-1
    )
    dgti_dt = tensorops.inv_derivative(gt, dgt_dt, gti)
    out = DerivativeBundle(gt=gt, gti=gti, dgt=dgt, dgti=dgti, dgt_dt=dgt_dt, dgti_dt=dgti_dt)
    if order >= 2:
        d2gt = model.deriv("d2gamma_dq2", t, q)
        d2gt_dtdq = model.deriv("d2gamma_dtdq", t, q)
        keys += ["d2gamma_dq2", "d2gamma_dtdq"]
        if model.has_psi:
            d3 = model.deriv("d3psi_dq3", t, q)
            d2gt = d2gt + d3 - np.swapaxes(d3, -3, -4)
            d3t = model.deriv("d3psi_dtdq2", t, q)
            d2gt_dtdq = d2gt_dtdq + d3t - np.swapaxes(d3t, -2, -3)
            keys += ["d3psi_dq3", "d3psi_dtdq2"]
        # P[..., i, k, c] = (gti @ d_c gt)[i, k]
        P = np.einsum("...ij,...jkc->...ikc", gti, dgt)
        Pt = gti @ dgt_dt
        d2gti = (
            np.einsum("...ijc,...jkd,...kl->...ilcd", P, P, gti)
            + np.einsum("...ijd,...jkc,...kl->...ilcd", P, P, gti)
            - np.einsum("...ij,...jkcd,...kl->...ilcd", gti, d2gt, gti)
        )
        d2gti_dtdq = (
            np.einsum("...ij,...jkc,...kl->...ilc", Pt, P, gti)
            + np.einsum("...ijc,...jk,...kl->...ilc", P, Pt, gti)
            - np.einsum("...ij,...jkc,...kl->...ilc", gti, d2gt_dtdq, gti)
        )
        out.d2gt, out.d2gti = d2gt, d2gti
        out.d2gt_dtdq, out.d2gti_dtdq = d2gt_dtdq, d2gti_dtdq
    out.provenance = model.provenance(keys)
    _check_finite(out.gti, "inverse drag")
    return out


def total_force(model: ModelSpec, t, q):
    """``-d_t psi - grad V + F_ext``."""
    q = np.asarray(q, dtype=float)
    F = model.F_ext(t, q) - model.deriv("gradV", t, q)
    if model.has_psi:
        F = F - model.deriv("dpsi_dt", t, q)
    return _check_finite(F, "total force")


def diffusion_matrix(sigma):
    """``Sigma = sigma sigma^T``."""
    return sigma @ np.swapaxes(sigma, -1, -2)


def fluct_diss_temperature(gamma, Sigma, rtol=1e-10):
    """Return ``k_B T`` with ``Sigma = 2 k_B T gamma``, or None if no such scalar exists."""
    n = gamma.shape[-1]
    kT = np.trace(Sigma, axis1=-2, axis2=-1) / (2.0 * np.trace(gamma, axis1=-2, axis2=-1))
    resid = Sigma - 2.0 * kT[..., None, None] * gamma
    scale = np.max(np.abs(Sigma), axis=(-2, -1)) + 1e-300
    if n and np.all(np.max(np.abs(resid), axis=(-2, -1)) <= rtol * scale):
        return kT
    return None


def noise_induced_drift(model: ModelSpec, t, q, bundle=None, sigma=None, shortcut=False):
    """Noise-induced drift ``S^i = Q^{ikl} J_kl`` with ``J`` the Lyapunov solution for Sigma.

    With ``shortcut=True`` the fluctuation-dissipation form
    ``k_B T * sum_j d_j (gamma^-1)^{ij}`` is used instead; it requires ``psi = 0``
    and ``Sigma`` proportional to ``gamma`` at every evaluation point.
    """
    if bundle is None:
        bundle = eval_tilde_gamma(model, t, q, order=1)
    if sigma is None:
        sigma = model.sigma(t, q)
    Sigma = diffusion_matrix(sigma)
    if shortcut:
        if model.has_psi:
            raise WrongSpecializationError("fluctuation-dissipation drift requires psi = 0")
        kT = fluct_diss_temperature(bundle.gt, Sigma)
        if kT is None:
            raise WrongSpecializationError("Sigma is not proportional to gamma")
        return kT[..., None] * np.einsum("...ijj->...i", bundle.dgti)
    J = tensorops.solve_lyapunov(bundle.gt, Sigma, check=False)
    return np.einsum("...ikl,...kl->...i", bundle.dgti, J)


@dataclass
class QGTensor:
    """``T[i, a, b] = Q^{ikl} G_kl^{ab}`` (symmetrised in a, b) with its partials."""

    T: np.ndarray
    dT_dq: np.ndarray
    dT_dt: np.ndarray
    provenance: str = "analytic"


def qg_tensor(model: ModelSpec, t, q, bundle=None) -> QGTensor:
    """The three-index tensor contracting symmetric matrices in the remainder terms.

    ``G`` is never formed; each basis matrix is pushed through one Lyapunov
    solve and the partials come from differentiated Lyapunov solves.  Only the
    part symmetric in (a, b) is returned, which is all that ever gets
    contracted.
    """
    if bundle is None:
        bundle = eval_tilde_gamma(model, t, q, order=2)
    n = model.n
    iu, basis = tensorops._sym_basis(n)
    N = len(iu[0])
    gt = bundle.gt
    B = np.broadcast_to(basis, gt.shape[:-2] + basis.shape)
    M = tensorops.solve_lyapunov_many(gt, B, check=False)  # batch + (N, n, n)
    Q = bundle.dgti
    Tp = np.einsum("...ikl,...pkl->...pi", Q, M)

    def dM_along(dG):
        rhs = -(dG[..., None, :, :] @ M + M @ np.swapaxes(dG, -1, -2)[..., None, :, :])
        return tensorops.solve_lyapunov_many(gt, rhs, check=False)

    dTp = []
    for c in range(n):
        dM = dM_along(bundle.dgt[..., c])
        dTp.append(
            np.einsum("...ikl,...pkl->...pi", bundle.d2gti[..., c], M)
            + np.einsum("...ikl,...pkl->...pi", Q, dM)
        )
    dTp = np.stack(dTp, axis=-1)  # batch + (N, n, c)
    dM_t = dM_along(bundle.dgt_dt)
    dTp_t = np.einsum("...ikl,...pkl->...pi", bundle.d2gti_dtdq, M) + np.einsum(
        "...ikl,...pkl->...pi", Q, dM_t
    )
    batch = gt.shape[:-2]
    T = np.zeros(batch + (n, n, n))
    dT = np.zeros(batch + (n, n, n, n))
    dTt = np.zeros(batch + (n, n, n))
    for p, (a, b) in enumerate(zip(*iu)):
        w = 1.0 if a == b else 0.5
        for x, y in ((a, b), (b, a)):
            T[..., :, x, y] = w * Tp[..., p, :]
            dT[..., :, x, y, :] = w * dTp[..., p, :, :]
            dTt[..., :, x, y] = w * dTp_t[..., p, :]
    return QGTensor(T=T, dT_dq=dT, dT_dt=dTt, provenance=bundle.provenance)


# ---------------------------------------------------------------------------
# cutoff construction


def _logistic_derivs(x):
    """``L(x) = 1 / (1 + e^x)`` and its first three derivatives."""
    L = 0.5 * (1.0 - np.tanh(0.5 * x))
    L1 = -L * (1.0 - L)
    L2 = -L1 * (1.0 - 2.0 * L)
    L3 = -L2 * (1.0 - 2.0 * L) + 2.0 * L1 * L1
    return L, L1, L2, L3


def bump_profile(s):
    """Smooth step in ``s = |x|^2``: 1 for ``s <= 1``, 0 for ``s >= 4``; returns value and 3 derivatives."""
    s = np.asarray(s, dtype=float)
    inner = (s > 1.0) & (s < 4.0)
    h = np.where(s <= 1.0, 1.0, 0.0)
    h1 = np.zeros_like(s)
    h2 = np.zeros_like(s)
    h3 = np.zeros_like(s)
    if np.any(inner):
        si = s[inner]
        a, b = si - 1.0, 4.0 - si
        g = -1.0 / a + 1.0 / b
        g1 = 1.0 / a**2 + 1.0 / b**2
        g2 = -2.0 / a**3 + 2.0 / b**3
        g3 = 6.0 / a**4 + 6.0 / b**4
        L, L1, L2, L3 = _logistic_derivs(g)
        h[inner] = L
        h1[inner] = L1 * g1
        h2[inner] = L2 * g1**2 + L1 * g2
        h3[inner] = L3 * g1**3 + 3.0 * L2 * g1 * g2 + L1 * g3
    return h, h1, h2, h3


def bump(q, r, order=3):
    """``chi_r(q) = chi(q / r)`` and its q-derivative tensors up to ``order``."""
    q = np.asarray(q, dtype=float)
    n = q.shape[-1]
    s = np.sum(q * q, axis=-1) / r**2
    h, h1, h2, h3 = bump_profile(s)
    ds = 2.0 * q / r**2
    dds = 2.0 * np.eye(n) / r**2
    chi = h
    d1 = h1[..., None] * ds
    if order == 1:
        return chi, d1
    d2 = h2[..., None, None] * ds[..., :, None] * ds[..., None, :] + h1[..., None, None] * dds
    if order == 2:
        return chi, d1, d2
    d3 = h3[..., None, None, None] * np.einsum("...i,...j,...k->...ijk", ds, ds, ds) + h2[
        ..., None, None, None
    ] * (
        np.einsum("ij,...k->...ijk", dds, ds)
        + np.einsum("ik,...j->...ijk", dds, ds)
        + np.einsum("jk,...i->...ijk", dds, ds)
    )
    return chi, d1, d2, d3


class _BumpCache:
    """``bump(q, r, order)`` remembering the last batch; the cutoff fields query one point many times."""

    def __init__(self, r):
        self.r = r
        self._last = None

    def __call__(self, q, order):
        q = np.asarray(q, dtype=float)
        last = self._last
        if last is not None and last[1] >= order and last[0].shape == q.shape and np.array_equal(last[0], q):
            return last[2][: order + 1]
        out = bump(q, self.r, order)
        self._last = (q.copy(), order, out)
        return out


def _x(a, b):
    """Outer product of a field (any trailing shape) with a q-gradient, derivative axis last."""
    return a[..., None] * b.reshape(b.shape[:-1] + (1,) * (a.ndim - b.ndim + 1) + b.shape[-1:])


def cutoff_model(model: ModelSpec, r: float) -> ModelSpec:
    """Cutoff system: V, F_ext, psi multiplied by chi_r and gamma blended to ``lam * I`` outside radius 2r."""
    if not r > 0:
        raise ValueError("cutoff radius must be positive")
    n = model.n
    lam = model.lam
    I = np.eye(n)
    chi_r = _BumpCache(r)

    def chi(q):
        return chi_r(q, 1)[0]

    def expand(c, nd):
        return c.reshape(c.shape + (1,) * nd)

    def gamma(t, q):
        c = chi_r(q, 1)[0]
        return expand(c, 2) * model.gamma(t, q) + expand(1.0 - c, 2) * lam * I

    def dgamma_dq(t, q):
        c, c1 = chi_r(q, 1)
        g = model.gamma(t, q)
        return expand(c, 3) * model.deriv("dgamma_dq", t, q) + _x(g - lam * I, c1)

    def d2gamma_dq2(t, q):
        c, c1, c2 = chi_r(q, 2)
        g = model.gamma(t, q)
        dg = model.deriv("dgamma_dq", t, q)
        cross = dg[..., :, :, :, None] * c1[..., None, None, None, :]
        return (
            expand(c, 4) * model.deriv("d2gamma_dq2", t, q)
            + cross
            + np.swapaxes(cross, -1, -2)
            + (g - lam * I)[..., None, None] * c2[..., None, None, :, :]
        )

    def dgamma_dt(t, q):
        return expand(chi(q), 2) * model.deriv("dgamma_dt", t, q)

    def d2gamma_dtdq(t, q):
        c, c1 = chi_r(q, 1)
        return expand(c, 3) * model.deriv("d2gamma_dtdq", t, q) + _x(
            model.deriv("dgamma_dt", t, q), c1
        )

    def V(t, q):
        return chi(q) * model.V(t, q)

    def gradV(t, q):
        c, c1 = chi_r(q, 1)
        return expand(c, 1) * model.deriv("gradV", t, q) + model.V(t, q)[..., None] * c1

    def F_ext(t, q):
        return expand(chi(q), 1) * model.F_ext(t, q)

    kwargs = dict(
        gamma=gamma,
        sigma=model.supplier("sigma"),
        dsigma_dq=model.supplier("dsigma_dq"),
        dgamma_dq=dgamma_dq,
        d2gamma_dq2=d2gamma_dq2,
        dgamma_dt=dgamma_dt,
        d2gamma_dtdq=d2gamma_dtdq,
    )
    if model.has_V:
        kwargs.update(V=V, gradV=gradV)
    if model.has_F_ext:
        kwargs["F_ext"] = F_ext
    if model.has_psi:
        kwargs.update(_cutoff_psi(model, chi_r))
    out = ModelSpec(
        n,
        model.k,
        lam,
        name=f"{model.name}|cutoff(r={r:g})",
        params={**model.params, "cutoff_r": r},
        **kwargs,
    )
    # analytic flags follow the base model
    for key in DERIVATIVES:
        out._analytic[key] = model.is_analytic(key)
    return out


def _cutoff_psi(model, chi_r):
    def expand(c, nd):
        return c.reshape(c.shape + (1,) * nd)

    def psi(t, q):
        return expand(chi_r(q, 1)[0], 1) * model.psi(t, q)

    def dpsi_dt(t, q):
        return expand(chi_r(q, 1)[0], 1) * model.deriv("dpsi_dt", t, q)

    def dpsi_dq(t, q):
        c, c1 = chi_r(q, 1)
        return expand(c, 2) * model.deriv("dpsi_dq", t, q) + _x(model.psi(t, q), c1)

    def d2psi_dq2(t, q):
        c, c1, c2 = chi_r(q, 2)
        p = model.psi(t, q)
        dp = model.deriv("dpsi_dq", t, q)  # [i, a]
        cross = dp[..., :, :, None] * c1[..., None, None, :]
        return (
            expand(c, 3) * model.deriv("d2psi_dq2", t, q)
            + cross
            + np.swapaxes(cross, -1, -2)
            + p[..., :, None, None] * c2[..., None, :, :]
        )

    def d3psi_dq3(t, q):
        c, c1, c2, c3 = chi_r(q, 3)
        p = model.psi(t, q)
        dp = model.deriv("dpsi_dq", t, q)
        ddp = model.deriv("d2psi_dq2", t, q)
        out = expand(c, 4) * model.deriv("d3psi_dq3", t, q)
        # one derivative on chi, two on psi
        out = out + np.einsum("...iab,...c->...iabc", ddp, c1)
        out = out + np.einsum("...iac,...b->...iabc", ddp, c1)
        out = out + np.einsum("...ibc,...a->...iabc", ddp, c1)
        # two on chi, one on psi
        out = out + np.einsum("...ia,...bc->...iabc", dp, c2)
        out = out + np.einsum("...ib,...ac->...iabc", dp, c2)
        out = out + np.einsum("...ic,...ab->...iabc", dp, c2)
        return out + np.einsum("...i,...abc->...iabc", p, c3)

    def d2psi_dtdq(t, q):
        c, c1 = chi_r(q, 1)
        return expand(c, 2) * model.deriv("d2psi_dtdq", t, q) + _x(model.deriv("dpsi_dt", t, q), c1)

    def d3psi_dtdq2(t, q):
        c, c1, c2 = chi_r(q, 2)
        pt = model.deriv("dpsi_dt", t, q)
        dpt = model.deriv("d2psi_dtdq", t, q)
        cross = dpt[..., :, :, None] * c1[..., None, None, :]
        return (
            expand(c, 3) * model.deriv("d3psi_dtdq2", t, q)
            + cross
            + np.swapaxes(cross, -1, -2)
            + pt[..., :, None, None] * c2[..., None, :, :]
        )

    return dict(
        psi=psi,
        dpsi_dt=dpsi_dt,
        dpsi_dq=dpsi_dq,
        d2psi_dq2=d2psi_dq2,
        d3psi_dq3=d3psi_dq3,
        d2psi_dtdq=d2psi_dtdq,
        d3psi_dtdq2=d3psi_dtdq2,
    )


# ---------------------------------------------------------------------------
# validation


@dataclass
class Check:
    name: str
    value: float
    tol: float

    @property
    def passed(self):
        return bool(np.isfinite(self.value) and self.value <= self.tol)


@dataclass
class ValidationReport:
    model: str
    n_probes: int
    checks: list = field(default_factory=list)
    bounds: dict = field(default_factory=dict)

    @property
    def ok(self):
        return all(c.passed for c in self.checks)

    @property
    def failures(self):
        return [c for c in self.checks if not c.passed]

    def to_dict(self):
        return {
            "model": self.model,
            "n_probes": self.n_probes,
            "ok": self.ok,
            "checks": [
                {"name": c.name, "value": c.value, "tol": c.tol, "passed": c.passed}
                for c in self.checks
            ],
            "bounds": self.bounds,
        }


DERIV_TOL = 1e-5
GRADV_TOL_ANALYTIC = 1e-8


def _rel_err(a, b):
    scale = max(float(np.max(np.abs(b))), 1.0)
    return float(np.max(np.abs(a - b))) / scale


def validate_model(model: ModelSpec, probes) -> ValidationReport:
    """Probe-based checks of the structural assumptions and supplied derivatives.

    Never raises for a failing check; failures are recorded in the report.
    """
    probes = list(probes)
    if not probes:
        raise ValueError("probe list must be non-empty")
    rep = ValidationReport(model=model.name, n_probes=len(probes))
    worst = {}
    bounds = {"gamma": 0.0, "sigma": 0.0, "force": 0.0}

    def record(name, val):
        worst[name] = max(worst.get(name, 0.0), val)

    for t, q in probes:
        q = np.asarray(q, dtype=float).reshape(model.n)
        try:
            g = model.gamma(t, q)
            record("gamma symmetry", float(np.max(np.abs(g - g.T))))
            record("spectral floor deficit", max(0.0, model.lam - float(spectral_floor(g))))
            bundle = eval_tilde_gamma(model, t, q, order=2, check=False)
            record(
                "inverse drag residual",
                float(np.max(np.abs(bundle.gti @ bundle.gt - np.eye(model.n)))),
            )
            sym = 0.5 * (bundle.gt + bundle.gt.T)
            record("symmetric part equals gamma", float(np.max(np.abs(sym - g))))
            F = total_force(model, t, q)
            bounds["gamma"] = max(bounds["gamma"], float(np.linalg.norm(g, 2)))
            bounds["sigma"] = max(bounds["sigma"], float(np.linalg.norm(model.sigma(t, q), 2)))
            bounds["force"] = max(bounds["force"], float(np.linalg.norm(F)))
            if model.has_V:
                fd = fd5_q if model.is_analytic("gradV") else fd_q
                fdV = fd(model.supplier("V"))(t, q)
                record("gradV vs finite differences", _rel_err(model.deriv("gradV", t, q), fdV))
            for key, (parent, var) in DERIVATIVES.items():
                if key == "gradV" or not model.is_analytic(key):
                    continue
                if parent == "psi" and not model.has_psi:
                    continue
                if key.startswith(("dpsi", "d2psi", "d3psi")) and not model.has_psi:
                    continue
                maker = fd_q if var == "q" else fd_t
                fd = maker(model.supplier(parent))(t, q)
                record(f"{key} vs finite differences", _rel_err(model.deriv(key, t, q), fd))
        except Exception as exc:  # noqa: BLE001 - a report, never an abort
            record(f"evaluation error ({type(exc).__name__})", math.inf)
    tols = {
        "gamma symmetry": 1e-12,
        "spectral floor deficit": 1e-10,
        "inverse drag residual": 1e-10,
        "symmetric part equals gamma": 1e-12,
        "gradV vs finite differences": GRADV_TOL_ANALYTIC if model.is_analytic("gradV") else DERIV_TOL,
    }
    for name, val in worst.items():
        rep.checks.append(Check(name, val, tols.get(name, DERIV_TOL)))
    rep.bounds = bounds
    return rep


def random_probes(model: ModelSpec, count: int, radius: float = 3.0, T: float = 1.0, seed: int = 0):
    rng = np.random.default_rng(seed)
    return [
        (float(rng.uniform(0.0, T)), rng.uniform(-radius, radius, size=model.n))
        for _ in range(count)
    ]
