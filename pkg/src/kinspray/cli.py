"""Command line entry point: ``kinspray <subcommand>``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import SCHEMA_HELP, RunConfig
from .errors import ConfigError, KinsprayError

log = logging.getLogger("kinspray")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_csv(path: Path, header: list[str], rows: np.ndarray) -> None:
    np.savetxt(path, rows, delimiter=",", header=",".join(header), comments="", fmt="%.17g")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "runs", None) is not None:
        over["runs"] = args.runs
    if getattr(args, "driver", None):
        over["driver"] = args.driver
    return cfg.replace(**over) if over else cfg


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_driver_info(args) -> int:
    from .markov_driver import load_driver, minv_I

    cfg = _load_config(args)
    drv = load_driver(cfg.driver, cfg.nx)
    psi = minv_I(drv)
    ok = psi.residual <= 1e-10
    print(f"states J = {drv.n_states}, grid nx = {drv.nx}")
    print("nu =", "(" + ", ".join(f"{v:.6g}" for v in drv.stationary) + ")")
    print(f"gamma = {drv.decay_rate:.6g}")
    print(f"C* = {drv.c_star:.6g}")
    print(f"M^-1 I residual = {psi.residual:.3e}")
    P = drv.transition
    if drv.n_states == 2 and np.allclose(P, P.T) and np.allclose(drv.states[0], -drv.states[1]):
        p = P[0, 1]
        gap = float(np.max(np.abs(psi.values + drv.states / (2 * p))))
        print(f"two-state check Psi(+-n) = -+n/(2p): max error {gap:.3e}")
        ok = ok and gap <= 1e-10
    print(f"M^-1 I check {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_coeffs(args) -> int:
    from .coefficients import compute_coefficients
    from .markov_driver import load_driver

    cfg = _load_config(args)
    co = compute_coefficients(load_driver(cfg.driver, cfg.nx), cfg.energy_tol)
    out = _out_dir(args)
    x = co.x
    _write_csv(out / "coeffs.csv", ["x", "a", "k_diag"], np.column_stack([x, co.a, co.kernel.diag]))
    _write_csv(out / "kernel.csv", [f"y{i}" for i in range(x.size)], co.kernel.values)
    _write_csv(out / "basis.csv", ["x"] + [f"phi{k}" for k in range(co.basis.n_modes)],
               np.column_stack([x, co.basis.modes.T]))
    meta = co.metadata()
    meta["config_digest"] = cfg.digest()
    _write_json(out / "coeffs.json", meta)
    print(f"wrote coefficients to {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .coefficients import compute_coefficients
    from .kinetic_solver import simulate_kinetic
    from .markov_driver import load_driver
    from .spde_solver import simulate_spde

    cfg = _load_config(args)
    drv = load_driver(cfg.driver, cfg.nx)
    out = _out_dir(args)
    x = drv.x
    if args.model == "kinetic":
        r = simulate_kinetic(cfg, drv, cfg.seed, args.run_id)
        rho, u = r.rho[0], r.u[0]
        diag = {"epsilon": cfg.epsilon, "mass": r.mass[0].tolist(),
                "max_mass_drift": float(r.max_mass_drift[0]), "clipped": float(r.clipped[0]),
                "boundary_loss": float(r.boundary_loss[0]),
                "moment_ratio": float(r.moment_ratio[0]), "u_sup": float(r.u_sup[0]),
                "u_bound": float(r.u_bound), "n_steps": int(r.n_steps[0])}
    else:
        r = simulate_spde(cfg, compute_coefficients(drv, cfg.energy_tol), cfg.seed, args.run_id)
        rho, u = r.rho[0], r.u
        diag = {"mass": r.mass[0].tolist(), "min_rho": float(r.min_rho[0]),
                "max_mass_change": float(r.max_mass_change[0]), "dt": r.dt,
                "n_steps": int(r.n_steps)}
    diag.update({"model": args.model, "seed": cfg.seed, "run_id": args.run_id,
                 "config_digest": cfg.digest(), "times": r.times.tolist()})
    header = ["t"] + [f"x{i}" for i in range(x.size)]
    _write_csv(out / f"{args.model}_rho.csv", header, np.column_stack([r.times, rho]))
    _write_csv(out / f"{args.model}_u.csv", header, np.column_stack([r.times, u]))
    _write_json(out / f"{args.model}_diagnostics.json", diag)
    print(f"wrote {args.model} run to {out}")
    return EXIT_OK


def cmd_ensemble(args) -> int:
    from .harness import ensemble_from_config

    cfg = _load_config(args)
    out = _out_dir(args)
    for s in ensemble_from_config(cfg, args.model, cfg.seed):
        tag = "spde" if s.model == "spde" else f"kinetic_eps{s.epsilon:g}"
        (out / f"summary_{tag}.json").write_text(s.to_json() + "\n")
        line = ", ".join(f"{k}: {v['mean']:.4f} +- {v['se']:.4f} (var {v['var']:.4f})"
                         for k, v in sorted(s.stats.items()))
        print(f"{tag}: {line}")
    return EXIT_OK


def cmd_compare(args) -> int:
    from .harness import EnsembleSummary, compare_laws

    def load(p):
        path = Path(p)
        if not path.is_file():
            raise UsageError(f"summary file not found: {p}")
        return EnsembleSummary.from_dict(json.loads(path.read_text()))

    kin = [load(p) for p in args.kinetic]
    lim = load(args.spde)
    rep = compare_laws(kin, lim, args.tolerance)
    out = _out_dir(args)
    (out / "comparison.json").write_text(rep.to_json() + "\n")
    for t in rep.trends:
        print(f"{'PASS' if t['pass'] else 'FAIL'} {t['observable']} {t['statistic']}: "
              f"z(smallest eps) = {t['smallest_eps_z']:.2f}, slope = {t['slope']:.3g}")
    print("compare:", "PASS" if rep.passed else "FAIL")
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_verify(args) -> int:
    from .verify import run_battery

    only = [int(c) for c in args.only.split(",")] if args.only else None
    results = run_battery(quick=args.quick, seed=args.seed or 0, only=only,
                          out_dir=args.out_dir, echo=lambda s: print(s, flush=True))
    ok = all(r.passed for r in results)
    print(f"verify: {sum(r.passed for r in results)}/{len(results)} checks passed")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kinspray", description="Kinetic spray simulator and diffusion-limit harness.",
                epilog=SCHEMA_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON run configuration (see kinspray --help)")
        sp.add_argument("--seed", type=int, help="master seed (overrides config)")
        if out:
            sp.add_argument("--out-dir", default="out", help="output directory (default ./out)")

    sp = sub.add_parser("driver-info", help="validate a driver, print nu, gamma and the M^-1 I check")
    common(sp, out=False)
    sp.add_argument("--driver", help="driver preset name or file (overrides config)")
    sp.set_defaults(fn=cmd_driver_info)

    sp = sub.add_parser("coeffs", help="write a(x), k(x,y) and the noise basis")
    common(sp)
    sp.add_argument("--driver")
    sp.set_defaults(fn=cmd_coeffs)

    sp = sub.add_parser("simulate", help="one kinetic or SPDE run")
    common(sp)
    sp.add_argument("--model", choices=("kinetic", "spde"), default="kinetic")
    sp.add_argument("--run-id", type=int, default=0)
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("ensemble", help="ensemble summary JSON per epsilon (kinetic) or for the limit")
    common(sp)
    sp.add_argument("--model", choices=("kinetic", "spde"), default="kinetic")
    sp.add_argument("--runs", type=int, help="ensemble size (overrides config)")
    sp.set_defaults(fn=cmd_ensemble)

    sp = sub.add_parser("compare", help="compare stored kinetic summaries against a limit summary")
    sp.add_argument("--kinetic", nargs="+", required=True, help="kinetic summary JSON files")
    sp.add_argument("--spde", required=True, help="limit summary JSON file")
    sp.add_argument("--tolerance", type=float, default=3.0, help="z-score tolerance (default 3)")
    sp.add_argument("--out-dir", default="out")
    sp.set_defaults(fn=cmd_compare)

    sp = sub.add_parser("verify", help="run the acceptance battery")
    sp.add_argument("--quick", action="store_true", help="reduced ensemble sizes")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--only", help="comma separated check ids")
    sp.add_argument("--out-dir", default="out")
    sp.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "fn", None):
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"kinspray: error: {exc}\n", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr)
        print(SCHEMA_HELP, file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"kinspray: error: {exc}\n", file=sys.stderr)
        print(SCHEMA_HELP, file=sys.stderr)
        return EXIT_USAGE
    except KinsprayError as exc:
        print(f"kinspray: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
