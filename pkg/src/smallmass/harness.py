"""Monte Carlo studies: coupled mass sweeps, strong errors, slope fits and exceedance tables.

Paths are split into fixed-size chunks.  A chunk generates its Brownian
increments once on the finest grid (the dt-halving control grid at the
smallest mass) and block-sums them for every other mass, so all masses and
levels see the same noise.  Chunk results are combined in chunk order, which
makes every report independent of the number of worker processes.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import coeffs
from .config import RunConfig
from .dynamics import Trajectory
from .errors import GridMismatchError, InsufficientDataError
from .hierarchy import LockstepEngine
from .models import build_model
from .noisegrid import block_sum, path_batch
from .routes import route_for

UNRELIABLE_FRACTION = 0.01
CONTROL_SHIFT_LIMIT = 0.20
FLOOR_ABS = 1e-12


# ---------------------------------------------------------------------------
# strong errors


@dataclass
class StrongError:
    err_supE: float
    err_Esup: float
    stderr_supE: float
    stderr_Esup: float
    sentinels: int = 0
    paths: int = 0


def _root_stderr(s1, s2, count, p):
    """Estimate ``mean^(1/p)`` and its delta-method standard error from power sums."""
    if count == 0:
        return math.nan, math.nan
    mean = s1 / count
    var = max(s2 / count - mean * mean, 0.0)
    est = mean ** (1.0 / p)
    if count < 2 or mean <= 0:
        return est, 0.0
    se_mean = math.sqrt(var / (count - 1))
    return est, (1.0 / p) * mean ** (1.0 / p - 1.0) * se_mean


class ErrorAccumulator:
    """Streaming power sums of ``|a - b|`` over paths, per grid time and per path maximum."""

    def __init__(self, p=2.0):
        self.p = float(p)
        self.s1 = []
        self.s2 = []
        self.pathmax = None

    def add(self, a, b, include):
        d = np.linalg.norm(a - b, axis=-1) ** self.p
        d = np.where(include, d, 0.0)
        self.s1.append(float(np.sum(d)))
        self.s2.append(float(np.sum(d * d)))
        self.pathmax = d if self.pathmax is None else np.maximum(self.pathmax, d)

    def state(self, include):
        mx = np.where(include, self.pathmax, 0.0)
        return dict(s1=np.array(self.s1), s2=np.array(self.s2), m1=float(np.sum(mx)), m2=float(np.sum(mx * mx)))


def combine_error_states(states, count, p, sentinels=0) -> StrongError:
    """Merge chunk power sums (in the given order) into strong-error estimates."""
    s1 = np.sum([s["s1"] for s in states], axis=0)
    s2 = np.sum([s["s2"] for s in states], axis=0)
    m1 = math.fsum(s["m1"] for s in states)
    m2 = math.fsum(s["m2"] for s in states)
    j = int(np.argmax(s1))
    e1, se1 = _root_stderr(float(s1[j]), float(s2[j]), count, p)
    e2, se2 = _root_stderr(m1, m2, count, p)
    return StrongError(e1, e2, se1, se2, sentinels, count)


def _stack(ens):
    if isinstance(ens, Trajectory):
        q = ens.q
        exploded = np.atleast_1d(np.asarray(ens.exploded, dtype=bool))
        if q.ndim == 2:
            q = q[:, None, :]
        return ens.times, q, exploded
    trajs = list(ens)
    times = trajs[0].times
    for tr in trajs:
        if len(tr.times) != len(times) or not np.allclose(tr.times, times, rtol=0, atol=1e-12):
            raise GridMismatchError("ensemble members live on different grids")
    q = np.stack([tr.q for tr in trajs], axis=1)
    exploded = np.array([bool(np.any(tr.exploded)) for tr in trajs])
    return times, q, exploded


def strong_error(reference, approx, p=2.0) -> StrongError:
    """Both strong-error norms between coupled ensembles.

    ``err_supE = max_t E[|d_t|^p]^(1/p)`` and ``err_Esup = E[max_t |d_t|^p]^(1/p)``;
    paths flagged in either ensemble are excluded and counted.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    t1, q1, x1 = _stack(reference)
    t2, q2, x2 = _stack(approx)
    if q1.shape != q2.shape or len(t1) != len(t2) or not np.allclose(t1, t2, rtol=0, atol=1e-12):
        raise GridMismatchError(f"ensembles differ: shapes {q1.shape} and {q2.shape}")
    include = ~(x1 | x2)
    acc = ErrorAccumulator(p)
    for i in range(len(t1)):
        acc.add(q2[i], q1[i], include)
    n = int(np.sum(include))
    return combine_error_states([acc.state(include)], n, p, sentinels=int(np.sum(~include)))


# ---------------------------------------------------------------------------
# slope fit


def fit_slope(masses, errors):
    """OLS fit of ``log err = slope * log m + intercept``; returns ``(slope, intercept, ci95)``.

    ``ci95`` is the half-width of the 95% t-interval of the slope.
    """
    m = np.asarray(masses, dtype=float)
    e = np.asarray(errors, dtype=float)
    keep = (e > 0) & np.isfinite(e) & (m > 0)
    if not np.all(keep):
        warnings.warn(f"dropping {int(np.sum(~keep))} non-positive error value(s) from the slope fit", stacklevel=2)
    m, e = m[keep], e[keep]
    if len(m) < 3:
        raise InsufficientDataError(f"slope fit needs >= 3 positive points, got {len(m)}")
    x, y = np.log(m), np.log(e)
    res = stats.linregress(x, y)
    dof = len(x) - 2
    ci = float(stats.t.ppf(0.975, dof) * res.stderr) if dof > 0 else math.inf
    return float(res.slope), float(res.intercept), ci


def wilson_interval(k, n, z=1.959963984540054):
    if n == 0:
        return 0.0, 1.0
    ph = k / n
    den = 1 + z * z / n
    centre = (ph + z * z / (2 * n)) / den
    half = z * math.sqrt(ph * (1 - ph) / n + z * z / (4 * n * n)) / den
    return max(0.0, centre - half), min(1.0, centre + half)


# ---------------------------------------------------------------------------
# chunked mass sweep


def study_model(cfg: RunConfig):
    model = build_model(cfg.model, cfg.model_params)
    if cfg.cutoff_r is not None:
        model = coeffs.cutoff_model(model, cfg.cutoff_r)
    return model


def _grid_plan(cfg: RunConfig):
    """Fine step, fine step count and per-mass coarsening factors (including the control run)."""
    masses = cfg.masses
    dt_fine = 0.5 * cfg.hbar * masses[-1]
    steps_fine = int(round(cfg.T / dt_fine))
    factors = [int(round(2 * m / masses[-1])) for m in masses]
    return dt_fine, steps_fine, factors


def chunk_ranges(paths, chunk):
    return [(s, min(s + chunk, paths)) for s in range(0, paths, chunk)]


def _q0(cfg, model):
    return np.zeros(model.n) if cfg.q0 is None else np.asarray(cfg.q0, dtype=float).reshape(model.n)


class _SweepCollector:
    """Callback accumulating level errors, momentum moments and sup deviations for one mass."""

    def __init__(self, levels, p, include, want_sup=False, r=None):
        self.levels = levels
        self.include = include
        self.acc = [ErrorAccumulator(p) for _ in range(levels)]
        self.u2 = []
        self.want_sup = want_sup
        self.r = r
        self.sup = None
        self.exit = None

    def __call__(self, i, t, eng):
        ref = eng.q_ref
        for l in range(self.levels):
            self.acc[l].add(eng.q[l], ref, self.include)
        u2 = np.sum(eng.u_ref**2, axis=-1)
        self.u2.append(float(np.sum(np.where(self.include, u2, 0.0))))
        if self.want_sup:
            d = np.stack([np.linalg.norm(q - ref, axis=-1) for q in eng.q])
            self.sup = d if self.sup is None else np.maximum(self.sup, d)
            if self.r is not None:
                norms = [np.linalg.norm(ref, axis=-1)] + [np.linalg.norm(q, axis=-1) for q in eng.q]
                out = np.any(np.stack(norms) > self.r, axis=0)
                self.exit = out if self.exit is None else self.exit | out


def _run_mass(cfg, model, route, m, inc, dt, include, path_ids, want_sup=False):
    eng = LockstepEngine(
        model,
        m,
        cfg.levels,
        route,
        _q0(cfg, model),
        cfg.z0,
        level_scheme=cfg.level_scheme,
        ref_scheme=cfg.ref_scheme,
        path_ids=path_ids,
    )
    col = _SweepCollector(cfg.levels, cfg.p, include, want_sup, cfg.cutoff_r)
    eng.run(inc, dt, col)
    return col, eng.exploded.copy()


def run_chunk(cfg_dict, start, stop, want_sup=False, control=True):
    """All masses (plus the dt-halving control run unless disabled) for paths ``start .. stop - 1``."""
    cfg = RunConfig.from_dict(cfg_dict)
    model = study_model(cfg)
    route = route_for(model, cfg.fast_path, q_hint=_q0(cfg, model))
    dt_fine, steps_fine, factors = _grid_plan(cfg)
    ids = list(range(start, stop))
    fine = path_batch(cfg.seed, ids, steps_fine, model.k, dt_fine)
    fine_paths = np.moveaxis(fine, 1, 0)  # (P, steps, k) for block sums
    del fine
    runs = [(m, f) for m, f in zip(cfg.masses, factors)] + ([(cfg.masses[-1], 1)] if control else [])
    P = len(ids)
    include = np.ones(P, dtype=bool)
    results = [None] * len(runs)
    exploded = [np.zeros(P, dtype=bool)] * len(runs)
    used = [None] * len(runs)
    # paths exploding at any mass are excluded everywhere; rerun masses accumulated with a stale mask
    while True:
        for j, (m, f) in enumerate(runs):
            if used[j] is not None and np.array_equal(used[j], include):
                continue
            inc = np.ascontiguousarray(np.moveaxis(block_sum(fine_paths, f), 0, 1))
            results[j], exploded[j] = _run_mass(cfg, model, route, m, inc, dt_fine * f, include, ids, want_sup)
            used[j] = include
        union = np.any(np.stack(exploded), axis=0)
        if not np.any(union & include):
            break
        include = include & ~union
    out = []
    for col in results:
        entry = dict(
            errors=[a.state(include) for a in col.acc],
            u2=np.array(col.u2),
        )
        if want_sup:
            entry["sup"] = np.where(include, col.sup, np.nan)
            entry["exit"] = np.zeros(P, dtype=bool) if col.exit is None else (col.exit & include)
        out.append(entry)
    return dict(runs=out, include=include, start=start, stop=stop)


def run_chunks(cfg: RunConfig, threads=1, want_sup=False, control=True):
    ranges = chunk_ranges(cfg.paths, cfg.chunk)
    d = cfg.to_dict()
    if threads <= 1 or len(ranges) == 1:
        return [run_chunk(d, a, b, want_sup, control) for a, b in ranges]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(run_chunk, d, a, b, want_sup, control) for a, b in ranges]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# convergence study


@dataclass
class LevelPoint:
    m: float
    err_supE: float
    stderr_supE: float
    err_Esup: float
    stderr_Esup: float
    sentinels: int
    floor_limited: bool = False


@dataclass
class LevelResult:
    level: int
    points: list
    slope_supE: float | None = None
    intercept_supE: float | None = None
    ci95: float | None = None
    slope_Esup: float | None = None
    ci95_Esup: float | None = None
    note: str = ""


@dataclass
class ConvergenceReport:
    config: dict
    per_level: list
    momentum: dict
    control: dict
    sentinels: int
    paths: int
    unreliable: bool
    flags: list = field(default_factory=list)

    def level(self, level):
        return self.per_level[level - 1]

    def to_dict(self):
        return dict(
            config=self.config,
            per_level=[
                dict(
                    level=lr.level,
                    slope_supE=lr.slope_supE,
                    intercept_supE=lr.intercept_supE,
                    ci95=lr.ci95,
                    slope_Esup=lr.slope_Esup,
                    ci95_Esup=lr.ci95_Esup,
                    note=lr.note,
                    points=[vars(pt).copy() for pt in lr.points],
                )
                for lr in self.per_level
            ],
            momentum=self.momentum,
            control=self.control,
            sentinels=self.sentinels,
            paths=self.paths,
            unreliable=self.unreliable,
            flags=list(self.flags),
        )


def _fit_or_note(masses, errors):
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return fit_slope(masses, errors), ""
    except InsufficientDataError as exc:
        return (None, None, None), f"slope unavailable: {exc}"


def convergence_study(cfg: RunConfig, threads=1) -> ConvergenceReport:
    """Coupled sweep over the mass family: reference, hierarchy levels 1..L and a dt-halving control."""
    chunks = run_chunks(cfg, threads)
    include = np.concatenate([c["include"] for c in chunks])
    n_ok = int(np.sum(include))
    sentinels = int(np.sum(~include))
    masses = cfg.masses
    nruns = len(masses) + 1

    def merged(j, l):
        return combine_error_states([c["runs"][j]["errors"][l] for c in chunks], n_ok, cfg.p, sentinels)

    ctrl = {}
    per_level = []
    flags = []
    for l in range(cfg.levels):
        errs = [merged(j, l) for j in range(nruns)]
        main, control = errs[-2], errs[-1]
        shift = abs(control.err_supE - main.err_supE)
        rel = shift / main.err_supE if main.err_supE > 0 else 0.0
        ctrl[str(l + 1)] = dict(err_supE=main.err_supE, err_supE_half_dt=control.err_supE, relative_shift=rel)
        if rel > CONTROL_SHIFT_LIMIT:
            flags.append(f"level {l + 1}: dt-halving control shifts the error by {100 * rel:.1f}%")
        pts = []
        for m, e in zip(masses, errs[:-1]):
            floor = e.err_supE <= FLOOR_ABS or e.err_supE <= 2.0 * shift
            pts.append(LevelPoint(m, e.err_supE, e.stderr_supE, e.err_Esup, e.stderr_Esup, sentinels, bool(floor)))
        (s1, b1, c1), note = _fit_or_note(masses, [p.err_supE for p in pts])
        (s2, _, c2), _ = _fit_or_note(masses, [p.err_Esup for p in pts])
        per_level.append(LevelResult(l + 1, pts, s1, b1, c1, s2, c2, note))
    u_sup = []
    for j in range(len(masses)):
        u2 = np.sum([c["runs"][j]["u2"] for c in chunks], axis=0)
        u_sup.append(float(np.sqrt(np.max(u2) / max(n_ok, 1))))
    (su, _, cu), note = _fit_or_note(masses, u_sup)
    momentum = dict(points=[dict(m=m, sup_rms_u=u) for m, u in zip(masses, u_sup)], slope=su, ci95=cu, note=note)
    control = dict(m=masses[-1], hbar=cfg.hbar, hbar_control=0.5 * cfg.hbar, levels=ctrl)
    unreliable = sentinels > UNRELIABLE_FRACTION * cfg.paths
    if unreliable:
        flags.append(f"{sentinels} of {cfg.paths} paths hit the explosion sentinel")
    return ConvergenceReport(cfg.to_dict(), per_level, momentum, control, sentinels, cfg.paths, unreliable, flags)


# ---------------------------------------------------------------------------
# convergence in probability


@dataclass
class ExceedanceRow:
    m: float
    exceed: float
    ci_lo: float
    ci_hi: float
    exit: float
    bound: float
    paths: int


@dataclass
class ExceedanceTable:
    level: int
    delta: float
    eps: float
    r: float | None
    rows: list
    monotone: bool
    cutoff_dominated: bool
    sentinels: int
    config: dict


CUTOFF_EXIT_LIMIT = 0.05


def prob_convergence_study(cfg: RunConfig, threads=1) -> ExceedanceTable:
    """Fraction of paths with ``sup_t |q^m - q^l| / m^(l/2 - eps) > delta`` per mass, with Wilson intervals.

    ``exit`` is the fraction of paths on which any process left the cutoff
    ball; ``bound`` counts paths that exceed or exit.
    """
    level = cfg.cutoff_level or cfg.levels
    if level > cfg.levels:
        cfg = cfg.replace(levels=level)
    # no dt-halving control here: exceedance fractions are not rate fits
    chunks = run_chunks(cfg, threads, want_sup=True, control=False)
    include = np.concatenate([c["include"] for c in chunks])
    n_ok = int(np.sum(include))
    rows = []
    for j, m in enumerate(cfg.masses):
        sup = np.concatenate([c["runs"][j]["sup"][level - 1] for c in chunks])[include]
        ex = np.concatenate([c["runs"][j]["exit"] for c in chunks])[include]
        hit = sup / m ** (0.5 * level - cfg.eps) > cfg.delta
        k = int(np.sum(hit))
        lo, hi = wilson_interval(k, n_ok)
        rows.append(
            ExceedanceRow(m, k / max(n_ok, 1), lo, hi, float(np.mean(ex)) if n_ok else 0.0,
                          float(np.mean(hit | ex)) if n_ok else 0.0, n_ok)
        )
    monotone = all(b.ci_lo <= a.ci_hi for a, b in zip(rows, rows[1:]))
    dominated = cfg.cutoff_r is not None and any(r.exit > CUTOFF_EXIT_LIMIT for r in rows)
    return ExceedanceTable(level, cfg.delta, cfg.eps, cfg.cutoff_r, rows, monotone, dominated,
                           int(np.sum(~include)), cfg.to_dict())
