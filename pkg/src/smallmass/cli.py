"""Command line entry point: ``smallmass {simulate,converge,probconverge,validate,summary}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import coeffs, harness
from .config import RunConfig, load_config, parse_overrides
from .errors import ConfigError, SmallMassError
from .hierarchy import LockstepEngine
from .noisegrid import path_batch
from .routes import route_for

log = logging.getLogger("smallmass")

EXIT_OK, EXIT_FAILED_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

ERROR_COLUMNS = ("level", "m", "err_supE", "stderr_supE", "err_Esup", "stderr_Esup", "sentinels")


def _echo_lines(cfg: RunConfig):
    return [f"# seed: {cfg.seed}", "# config: " + json.dumps(cfg.to_dict(), sort_keys=True)]


def _write_csv(path, cfg, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in _echo_lines(cfg):
            fh.write(line + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _fmt(x, spec=".4g"):
    return "n/a" if x is None else format(x, spec)


def format_summary(report: dict) -> str:
    """Human-readable digest of a convergence report dictionary."""
    cfg = report["config"]
    lines = [
        f"model {cfg['model']}  T={cfg['T']}  hbar={cfg['hbar']}  p={cfg['p']}  "
        f"paths={report['paths']}  seed={cfg['seed']}  scheme={cfg['scheme']}"
    ]
    for lr in report["per_level"]:
        lines.append(
            f"level {lr['level']}: slope_supE {_fmt(lr['slope_supE'], '.3f')} +- {_fmt(lr['ci95'], '.3f')}"
            f"  slope_Esup {_fmt(lr['slope_Esup'], '.3f')}" + (f"  ({lr['note']})" if lr["note"] else "")
        )
        for pt in lr["points"]:
            mark = "  floor-limited" if pt["floor_limited"] else ""
            lines.append(
                f"  m={pt['m']:.6g}  err_supE={pt['err_supE']:.4e} ({pt['stderr_supE']:.1e})"
                f"  err_Esup={pt['err_Esup']:.4e} ({pt['stderr_Esup']:.1e}){mark}"
            )
    mom = report["momentum"]
    lines.append(f"momentum sup_t E|u|^2^(1/2): slope {_fmt(mom['slope'], '.3f')} +- {_fmt(mom['ci95'], '.3f')}")
    ctl = report["control"]
    shifts = ", ".join(f"l{k}: {100 * v['relative_shift']:.1f}%" for k, v in sorted(ctl["levels"].items()))
    lines.append(f"dt-halving control at m={ctl['m']:.6g}: {shifts}")
    lines.append(f"sentinels: {report['sentinels']}" + ("  UNRELIABLE" if report["unreliable"] else ""))
    lines.extend(f"flag: {f}" for f in report["flags"])
    return "\n".join(lines)


PLOT_SCRIPT = '''"""Log-log plot of strong errors from errors.csv (requires matplotlib)."""
import csv
import sys
from collections import defaultdict

import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "errors.csv"
with open(path) as fh:
    rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
series = defaultdict(list)
for r in rows:
    series[int(r["level"])].append((float(r["m"]), float(r["err_supE"]), float(r["stderr_supE"])))
for level, pts in sorted(series.items()):
    pts.sort()
    m, e, s = zip(*pts)
    plt.errorbar(m, e, yerr=[2 * x for x in s], marker="o", label=f"level {level}")
    plt.loglog(m, [e[-1] * (x / m[-1]) ** (level / 2) for x in m], ":", color="grey")
plt.xscale("log")
plt.yscale("log")
plt.xlabel("m")
plt.ylabel("sup_t E|q^m - q^l|^p ^(1/p)")
plt.legend()
plt.savefig(path.rsplit(".", 1)[0] + ".png", dpi=120)
'''


def cmd_converge(cfg, out: Path, threads):
    report = harness.convergence_study(cfg, threads=threads)
    d = report.to_dict()
    rows = [
        (lr["level"], pt["m"], pt["err_supE"], pt["stderr_supE"], pt["err_Esup"], pt["stderr_Esup"], pt["sentinels"])
        for lr in d["per_level"]
        for pt in lr["points"]
    ]
    _write_csv(out / "errors.csv", cfg, ERROR_COLUMNS, rows)
    _write_json(out / "report.json", d)
    (out / "plot_errors.py").write_text(PLOT_SCRIPT, encoding="utf-8")
    print(format_summary(d))
    return EXIT_OK


def format_exceedance(table) -> str:
    lines = [f"level {table.level}  delta={table.delta}  eps={table.eps}  r={table.r}"]
    for r in table.rows:
        lines.append(
            f"  m={r.m:.6g}  exceed={r.exceed:.4f} [{r.ci_lo:.4f}, {r.ci_hi:.4f}]  exit={r.exit:.4f}  bound={r.bound:.4f}"
        )
    lines.append(f"monotone: {table.monotone}  cutoff-dominated: {table.cutoff_dominated}  sentinels: {table.sentinels}")
    return "\n".join(lines)


def cmd_probconverge(cfg, out: Path, threads):
    table = harness.prob_convergence_study(cfg, threads=threads)
    rows = [(table.level, r.m, r.exceed, r.ci_lo, r.ci_hi, r.exit, r.bound, r.paths) for r in table.rows]
    _write_csv(out / "exceedance.csv", cfg, ("level", "m", "exceed", "ci_lo", "ci_hi", "exit", "bound", "paths"), rows)
    print(format_exceedance(table))
    return EXIT_OK


def cmd_validate(cfg, out: Path, threads):
    model = harness.study_model(cfg)
    probes = coeffs.random_probes(model, 32, T=cfg.T, seed=cfg.seed)
    report = coeffs.validate_model(model, probes)
    d = dict(config=cfg.to_dict(), seed=cfg.seed, ok=report.ok, report=report.to_dict())
    _write_json(out / "validation.json", d)
    print(f"validation of {model.name}: {'ok' if report.ok else 'FAILED'}")
    for f in report.failures:
        print(f"  failed: {f}")
    return EXIT_OK if report.ok else EXIT_FAILED_CHECK


def cmd_simulate(cfg, out: Path, threads, mass=None):
    model = harness.study_model(cfg)
    m = cfg.m0 if mass is None else float(mass)
    dt = cfg.hbar * m
    steps = int(round(cfg.T / dt))
    q0 = harness._q0(cfg, model)
    route = route_for(model, cfg.fast_path, q_hint=q0)
    n = model.n
    header = ["t"] + [f"ref_q{i + 1}" for i in range(n)] + [f"ref_u{i + 1}" for i in range(n)]
    header += [f"l{l + 1}_q{i + 1}" for l in range(cfg.levels) for i in range(n)]
    for a, b in harness.chunk_ranges(cfg.paths, cfg.chunk):
        ids = list(range(a, b))
        inc = path_batch(cfg.seed, ids, steps, model.k, dt)
        rec = []

        def grab(i, t, eng):
            rec.append(np.concatenate([eng.q_ref, eng.u_ref] + eng.q, axis=-1).copy())

        eng = LockstepEngine(
            model, m, cfg.levels, route, q0, cfg.z0, level_scheme=cfg.level_scheme, ref_scheme=cfg.ref_scheme
        )
        eng.run(inc, dt, grab)
        data = np.stack(rec)  # (steps + 1, P, cols)
        times = dt * np.arange(steps + 1)
        for j, pid in enumerate(ids):
            rows = [[t] + list(r) for t, r in zip(times, data[:, j])]
            path = out / f"trajectory_{pid:05d}.csv"
            _write_csv(path, cfg, header, rows)
            if eng.exploded[j]:
                with open(path, "a", encoding="utf-8") as fh:
                    fh.write("# exploded: true\n")
    print(f"wrote {cfg.paths} trajectories at m={m:g} to {out}")
    return EXIT_OK


def cmd_summary(report_path):
    d = json.loads(Path(report_path).read_text(encoding="utf-8"))
    print(format_summary(d))
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="smallmass", description="Small-mass hierarchy experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("simulate", "converge", "probconverge", "validate"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="INI run configuration")
        sp.add_argument("--out", help="output directory (overrides output.dir)")
        sp.add_argument("--threads", type=int, default=1, help="worker processes")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        if name == "simulate":
            sp.add_argument("--mass", type=float, help="mass to simulate (default: first of the family)")
    sp = sub.add_parser("summary", help="print the summary stored in a report.json")
    sp.add_argument("report")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "summary":
        return cmd_summary(args.report)
    try:
        cfg = load_config(args.config, parse_overrides(args.override))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"cannot create output directory {out}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "converge":
            return cmd_converge(cfg, out, args.threads)
        if args.command == "probconverge":
            return cmd_probconverge(cfg, out, args.threads)
        if args.command == "validate":
            return cmd_validate(cfg, out, args.threads)
        return cmd_simulate(cfg, out, args.threads, args.mass)
    except SmallMassError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
