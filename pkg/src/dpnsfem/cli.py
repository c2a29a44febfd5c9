"""Command-line driver for the experiment suites.

Subcommands: converge, ratio-sweep, penalty-sweep, compare-newton, wellbore.
Settings come from an INI-style config file ([run] section, key = value)
overridden by flags; defaults reproduce the manufactured-solution setup
(all-ones parameters, penalty 0.1, final time 0.5).

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

PENALTY_VALUES = (0.0, 1e-4, 1e-3, 1e-2, 1.0)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    experiment: str = "converge"
    h: tuple[int, ...] = (4, 8, 16, 32)   # mesh densities, h = 1/n
    r: int = 1
    gamma: float = 0.1
    theta: float = 0.001
    workers: int = 1
    out: str = "results"
    t_final: float = 0.5
    dt: float | None = None               # None: dt = h^2 per mesh
    pin_pressure: bool = False

    def validated(self) -> "RunConfig":
        if self.r < 1:
            raise ConfigError("r must be a positive integer")
        if self.workers not in (1, 2):
            raise ConfigError("workers must be 1 or 2")
        if any(n < 2 for n in self.h):
            raise ConfigError("mesh densities must be >= 2")
        if self.gamma < 0:
            raise ConfigError("gamma must be nonnegative")
        if self.t_final <= 0:
            raise ConfigError("t_final must be positive")
        return self


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"bad config: {exc}") from exc
    if not cp.has_section("run"):
        raise ConfigError("config needs a [run] section")
    sec = cp["run"]
    known = {f.name for f in fields(RunConfig)}
    kwargs = {}
    for key in sec:
        if key not in known:
            raise ConfigError(f"unknown config key '{key}'")
    try:
        if "experiment" in sec:
            kwargs["experiment"] = sec.get("experiment")
        if "h" in sec:
            kwargs["h"] = tuple(int(v) for v in sec.get("h").split(","))
        for name, conv in (("r", int), ("workers", int), ("gamma", float),
                           ("theta", float), ("t_final", float)):
            if name in sec:
                kwargs[name] = conv(sec.get(name))
        if "dt" in sec:
            kwargs["dt"] = float(sec.get("dt"))
        if "out" in sec:
            kwargs["out"] = sec.get("out")
        if "pin_pressure" in sec:
            kwargs["pin_pressure"] = sec.getboolean("pin_pressure")
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    return RunConfig(**kwargs).validated()


def serialize_config(cfg: RunConfig) -> str:
    lines = ["[run]"]
    lines.append(f"experiment = {cfg.experiment}")
    lines.append(f"h = {','.join(str(n) for n in cfg.h)}")
    lines.append(f"r = {cfg.r}")
    lines.append(f"gamma = {cfg.gamma!r}")
    lines.append(f"theta = {cfg.theta!r}")
    lines.append(f"workers = {cfg.workers}")
    lines.append(f"out = {cfg.out}")
    lines.append(f"t_final = {cfg.t_final!r}")
    if cfg.dt is not None:
        lines.append(f"dt = {cfg.dt!r}")
    lines.append(f"pin_pressure = {cfg.pin_pressure}")
    return "\n".join(lines) + "\n"


# -- experiment runners --------------------------------------------------------


def _mms_run(n: int, r: int, gamma: float, t_final: float,
             dt: float | None = None, workers: int = 1,
             ns_method: str = "characteristic", pin_pressure: bool = False):
    """One manufactured-solution run; returns (ErrorReport, wall seconds)."""
    from .fespace import build_spaces
    from .mesh import build_structured_rect_mesh
    from .mms import example1_problem
    from .postprocess import compute_errors
    from .stepper import Simulation, nested_grid

    problem = example1_problem(gamma=gamma, t_final=t_final)
    mesh = build_structured_rect_mesh(n)
    spaces = build_spaces(mesh)
    grids = nested_grid(t_final, dt if dt is not None else 1.0 / n**2, r)
    t0 = time.perf_counter()
    sim = Simulation(problem, grids, spaces, workers=workers,
                     ns_method=ns_method, pin_pressure=pin_pressure)
    sim.run()
    wall = time.perf_counter() - t0
    rep = compute_errors(spaces, sim.state, problem, sim.state.t, r=r,
                         wall_times={"total": wall, **sim.phase})
    return rep, wall


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(os.environ.get("DPNSFEM_OUT", cfg.out))
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_converge(cfg: RunConfig) -> int:
    from .postprocess import ERROR_FIELDS, make_rate_table

    out = _out_dir(cfg)
    reports = []
    for n in cfg.h:
        rep, wall = _mms_run(n, cfg.r, cfg.gamma, cfg.t_final, cfg.dt,
                             cfg.workers, pin_pressure=cfg.pin_pressure)
        reports.append(rep)
        log.info("h=1/%d done in %.2fs", n, wall)
    table = make_rate_table(reports)
    path = out / f"converge_r{cfg.r}.csv"
    table.to_csv(path)
    print(f"wrote {path}")
    for row in table.rows:
        cells = [f"h=1/{round(1/row['h']*np.sqrt(2)):d}"]
        for name in ERROR_FIELDS:
            rate = row["rates"][name]
            cells.append(f"{name}={row['errors'][name]:.6f}"
                         + (f" ({rate:.2f})" if rate is not None else ""))
        print("  ".join(cells))
    return EXIT_OK


def cmd_ratio_sweep(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    n = cfg.h[0]
    path = out / f"ratio_sweep_h{n}.csv"
    with open(path, "w") as f:
        f.write("r,u_c_l2,u_f_l2,u_m_l2,phi_f_l2,phi_m_l2,wall_seconds\n")
        for r in (1, 2, 4, 8):
            rep, wall = _mms_run(n, r, cfg.gamma, cfg.t_final, cfg.dt, cfg.workers)
            e = rep.errors
            f.write(f"{r},{e['u_c_l2']:.6e},{e['u_f_l2']:.6e},{e['u_m_l2']:.6e},"
                    f"{e['phi_f_l2']:.6e},{e['phi_m_l2']:.6e},{wall:.3f}\n")
            print(f"r={r}: u_c={e['u_c_l2']:.6f} wall={wall:.2f}s")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_penalty_sweep(cfg: RunConfig) -> int:
    from .postprocess import ERROR_FIELDS, make_rate_table

    out = _out_dir(cfg)
    for gamma in PENALTY_VALUES:
        reports = []
        for n in cfg.h:
            rep, _ = _mms_run(n, cfg.r, gamma, cfg.t_final, cfg.dt, cfg.workers)
            reports.append(rep)
        table = make_rate_table(reports)
        path = out / f"penalty_gamma{gamma:g}.csv"
        table.to_csv(path)
        last = table.rows[-1]
        print(f"gamma={gamma:g}: " + "  ".join(
            f"{name} rate {last['rates'][name]:.2f}"
            for name in ("u_c_l2", "u_f_l2", "phi_f_l2")
            if last["rates"][name] is not None))
        print(f"wrote {path}")
    return EXIT_OK


def cmd_compare_newton(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    dt = cfg.dt if cfg.dt is not None else 0.001
    path = out / "newton_compare.csv"
    with open(path, "w") as f:
        f.write("h,method,u_c_rel,u_c_h1_rel,u_f_rel,phi_f_rel,u_m_rel,"
                "phi_m_rel,wall_seconds\n")
        for n in cfg.h:
            for method in ("characteristic", "newton"):
                rep, wall = _mms_run(n, 1, cfg.gamma, cfg.t_final, dt,
                                     ns_method=method)
                rel = rep.relative
                f.write(f"{1.0/n},{method},{rel['u_c_l2']:.6e},"
                        f"{rel['u_c_h1']:.6e},{rel['u_f_l2']:.6e},"
                        f"{rel['phi_f_l2']:.6e},{rel['u_m_l2']:.6e},"
                        f"{rel['phi_m_l2']:.6e},{wall:.3f}\n")
                print(f"h=1/{n} {method}: u_c_rel={rel['u_c_l2']:.6f} "
                      f"wall={wall:.2f}s")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_wellbore(cfg: RunConfig) -> int:
    from .fespace import build_spaces
    from .mesh import BoundaryLabel, build_wellbore_mesh
    from .mms import WellboreScenario
    from .postprocess import boundary_flux, export_vtk
    from .stepper import Simulation, nested_grid

    out = _out_dir(cfg)
    scenario = WellboreScenario(theta=cfg.theta)
    n = cfg.h[0]
    mesh = build_wellbore_mesh(1.0 / n)
    spaces = build_spaces(mesh)
    grids = nested_grid(scenario.t_final if cfg.t_final == 0.5 else cfg.t_final,
                        cfg.dt if cfg.dt is not None else scenario.dt, cfg.r)
    sim = Simulation(scenario, grids, spaces, workers=cfg.workers)
    stride = max(1, grids.n_porous // 10)
    count = 0

    def dump(state):
        nonlocal count
        if state.k % stride == 0 or state.k == grids.n_porous:
            export_vtk(spaces, state, out / f"wellbore_{count:04d}.vtk")
            count += 1

    t0 = time.perf_counter()
    sim.run(callbacks=[dump])
    wall = time.perf_counter() - t0
    state = sim.state
    fin = boundary_flux(spaces, state, BoundaryLabel.CONDUIT_INFLOW)
    fout = boundary_flux(spaces, state, BoundaryLabel.CONDUIT_OUTFLOW)
    print(f"completed T={state.t:g} in {wall:.1f}s; "
          f"inflow flux {fin:.5f}, outflow flux {fout:.5f}; "
          f"{count} VTK files in {out}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dpnsfem",
        description="Coupled free-flow / dual-porosity solver experiments")
    ap.add_argument("--config", type=Path, help="INI config file ([run] section)")
    ap.add_argument("--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("converge", "ratio-sweep", "penalty-sweep",
                 "compare-newton", "wellbore"):
        p = sub.add_parser(name)
        p.add_argument("--h", help="comma list of mesh densities n (h = 1/n)")
        p.add_argument("--r", type=int, help="time step ratio")
        p.add_argument("--gamma", type=float, help="interface penalty")
        p.add_argument("--theta", type=float, help="matrix boundary speed")
        p.add_argument("--workers", type=int, choices=(1, 2))
        p.add_argument("--out", help="output directory")
        p.add_argument("--t-final", type=float, dest="t_final")
        p.add_argument("--dt", type=float)
    return ap


def _merge(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    updates = {}
    if args.h is not None:
        try:
            updates["h"] = tuple(int(v) for v in args.h.split(","))
        except ValueError as exc:
            raise ConfigError(f"bad --h list: {exc}") from exc
    for name in ("r", "gamma", "theta", "workers", "out", "t_final", "dt"):
        val = getattr(args, name, None)
        if val is not None:
            updates[name] = val
    updates["experiment"] = args.command
    return replace(cfg, **updates).validated()


COMMANDS = {
    "converge": cmd_converge,
    "ratio-sweep": cmd_ratio_sweep,
    "penalty-sweep": cmd_penalty_sweep,
    "compare-newton": cmd_compare_newton,
    "wellbore": cmd_wellbore,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig()
        if args.config is not None:
            cfg = parse_config(Path(args.config).read_text())
        cfg = _merge(cfg, args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg)
    except Exception as exc:  # numerical failures -> distinct exit code
        from .linalg import SolveFailed
        if isinstance(exc, SolveFailed):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERICAL
        raise


if __name__ == "__main__":
    sys.exit(main())
