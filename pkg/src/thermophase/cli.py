"""Command-line interface: ``thermophase {simulate, check, convergence, presets}``.

Exit codes: 0 success, 1 a monitor or order check failed, 2 usage error,
3 runtime error (one ``error: <Type>: <message>`` line on stderr).
"""

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import convergence, monitors, stepper
from .errors import ThermophaseError
from .io import archive, config as cfgmod

OUT_ENV = "THERMOPHASE_OUT"


def _write_csv(path, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    keys = list(rows[0]) if rows else []
    tmp = path + ".part"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    os.replace(tmp, path)
    return path


def _load_config(args):
    if args.preset:
        return cfgmod.preset(args.preset)
    with open(args.config, encoding="utf-8") as fh:
        return cfgmod.parse_config(fh.read())


def _out_dir(args, cfg):
    # --out beats the environment, which beats the config file
    return args.out or os.environ.get(OUT_ENV) or cfg["output"]["directory"]


def cmd_simulate(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    formats = [f.strip() for f in cfg["output"]["formats"].split(",") if f.strip()]
    t0 = time.perf_counter()

    def progress(state, report):
        if not args.quiet and (state.k % cfg["output"]["cadence"] == 0):
            print(f"step {state.k:5d} t={state.t:.4f} sweeps={report.sweeps} "
                  f"theta=[{report.theta_min:.4g}, {report.theta_max:.4g}] "
                  f"upper_active={report.active_upper}")

    traj = stepper.run(cfg.build(), callback=progress)
    manifest = archive.write_archive(traj, out, cfg, formats=formats)
    if cfg["output"]["figures"]:
        from .io import plotting

        fig = os.path.join(out, "figures")
        p = traj.scheme.p
        parts = [monitors.total_energy(st, traj.mesh, traj.model, p) for st in traj.states]
        plotting.plot_energy(traj.times, parts, os.path.join(fig, "energy.png"))
        plotting.plot_theta_range(traj, os.path.join(fig, "theta_range.png"))
        plotting.plot_damage(traj, os.path.join(fig, "damage.png"))
        plotting.plot_fields(traj.mesh, traj.states[-1], os.path.join(fig, "fields_final.png"))
    print(f"wrote {manifest['steps']} steps to {out} in {time.perf_counter() - t0:.1f} s")
    return 0


def _window_arg(text):
    if text in ("all", "steps"):
        return text
    try:
        s, t = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError("window must be 'all', 'steps' or 's:t'") from None
    return [(s, t)]


def cmd_check(args):
    traj, cfg = archive.read_archive(args.traj)
    summary = monitors.check_all(traj, windows=args.window)
    out = args.out or os.path.join(args.traj, "check")
    _write_csv(os.path.join(out, "inequalities.csv"), [r.row() for r in summary.reports])
    kinds = sorted({r.kind for r in summary.reports})
    rows = []
    for kind in kinds:
        rs = [r for r in summary.reports if r.kind == kind]
        worst = min(rs, key=lambda r: r.residual / r.scale)
        rows.append(dict(check=kind, passed=int(all(r.passed for r in rs)), count=len(rs),
                         worst=worst.residual / worst.scale))
    gap = float(np.max(summary.gaps, initial=0.0))
    rows.append(dict(check="complementarity_gap", passed=int(gap <= 1e-10), count=len(summary.gaps),
                     worst=gap))
    rows.append(dict(check="mass", passed=int(summary.mass_ok), count=len(summary.mass),
                     worst=float(np.max(np.abs(np.diff(summary.mass)), initial=0.0))))
    rows.append(dict(check="theta_min", passed=int(summary.positivity.passed),
                     count=len(traj.states), worst=float(min(s.theta.min() for s in traj.states))))
    for name, ok in summary.constraints.items():
        rows.append(dict(check=name, passed=int(ok), count=len(traj.states), worst=float("nan")))
    for name, v in summary.splitting.items():
        rows.append(dict(check=f"splitting_{name}", passed=int(v >= -1e-12), count=len(traj.states) - 1,
                         worst=v))
    _write_csv(os.path.join(out, "summary.csv"), rows)
    if not args.no_figures:
        from .io import plotting

        if summary.reports:
            plotting.plot_inequalities(summary.reports, os.path.join(out, "inequalities.png"))
    for r in rows:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['check']} (n={r['count']}, worst={r['worst']:.3e})")
    ok = summary.passed
    print("all checks passed" if ok else f"{len(summary.failures)} inequality failures")
    return 0 if ok else 1


def cmd_convergence(args):
    results = convergence.study(args.case, n_levels=args.levels)
    out = args.out or os.path.join(os.environ.get(OUT_ENV) or ".", f"convergence_{args.case}")
    rows = [row for r in results for row in r.rows()]
    _write_csv(os.path.join(out, "convergence.csv"), rows)
    from .io import plotting

    ok = True
    for r in results:
        order = r.observed_order
        target = 2.0 if r.kind == "space" else 1.0
        good = abs(order - target) <= 0.2
        ok &= good
        print(f"{args.case} {r.kind}: observed order {order:.3f} (target {target:.1f}) "
              f"{'PASS' if good else 'FAIL'}")
        plotting.plot_convergence(r.sizes, r.errors, os.path.join(out, f"{r.kind}.png"), order,
                                  xlabel="h" if r.kind == "space" else "tau")
    return 0 if ok else 1


def cmd_presets(args):
    if args.show:
        sys.stdout.write(cfgmod.preset_text(args.show))
        return 0
    for name, (desc, _) in cfgmod.PRESETS.items():
        print(f"{name}\t{desc}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="thermophase",
                                description="Thermo-viscoelastic Cahn-Hilliard damage solver")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a configuration and write an archive")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="INI configuration file")
    src.add_argument("--preset", choices=list(cfgmod.PRESETS), help="built-in scenario")
    s.add_argument("--out", help=f"archive directory (overrides ${OUT_ENV} and the config)")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("check", help="run every monitor on an archive")
    c.add_argument("--traj", required=True, help="archive directory")
    c.add_argument("--window", type=_window_arg, default="all", help="all, steps or s:t")
    c.add_argument("--out", help="report directory (default <traj>/check)")
    c.add_argument("--no-figures", action="store_true")
    c.set_defaults(func=cmd_check)

    v = sub.add_parser("convergence", help="manufactured-solution convergence study")
    v.add_argument("--case", required=True, choices=["heat", "elasticity"])
    v.add_argument("--levels", type=int, default=3)
    v.add_argument("--out", help="report directory")
    v.set_defaults(func=cmd_convergence)

    r = sub.add_parser("presets", help="list built-in scenarios")
    r.add_argument("--show", metavar="NAME", help="print the full configuration of a preset")
    r.set_defaults(func=cmd_presets)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "levels", 3) < 2:
        parser.error("--levels must be >= 2")
    try:
        return args.func(args)
    except (ThermophaseError, OSError, KeyError, ValueError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
