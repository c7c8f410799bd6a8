"""Command-line front end.

Every flag can also be given in a JSON file passed with ``--config``; keys
are the flag names without leading dashes (``"gamma-over-T": 2``).  Flags on
the command line take precedence.  A ``manifest.json`` written by an earlier
run is accepted as config and replays that run.

Exit codes: 0 success, 2 configuration error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import (DephasingConfig, GridConfig, basis_state, state_trajectory,
                       transfer_efficiency_closed, transfer_efficiency_open)
from .ensemble import CampaignConfig, default_workers, density_crossing, run_campaign
from .entanglement import MIXED_ESTIMATOR
from .io import (_timestamp, dumps, manifest, read_histogram_csv, write_histogram_csv,
                 write_json, write_report, write_trajectory_csv)
from .model import (Hamiltonian, coupling_matrix, default_time_window,
                    hamiltonian_from_dict, load_conformation, sample_conformation)
from .optimize import (ConformationOptConfig, HamiltonianBoxConfig, RobustnessConfig,
                       dephased_evaluation, optimize_conformation, optimize_hamiltonian_box,
                       robustness_scan)

# options that never change numeric output and are left out of manifests
_RUN_ONLY = ("config", "out", "threads", "command")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# parser


def _dephasing_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--gamma", type=float, default=None, help="absolute dephasing rate")
    g.add_argument("--gamma-over-T", dest="gamma_over_T", type=float, default=None,
                   help="dephasing rate in units of 1/T (2 gives gamma = 2/T)")
    p.add_argument("--dephasing-convention", choices=("projector", "double"), default="projector")


def _window_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window-factor", type=float, default=0.1)
    p.add_argument("--window", type=float, default=None,
                   help="absolute time window; overrides --window-factor and any window in the file")


def _grid_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--grid-points", type=int, default=1024)
    p.add_argument("--refine-tol", type=float, default=1e-6, help="relative to T")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exciton-transport",
                                     description="Excitation transfer in random dipole networks.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None, help="JSON config or manifest")
        return p

    p = add("sample", "Monte Carlo campaign over random conformations")
    p.add_argument("--sites", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window-factor", type=float, default=0.1)
    _dephasing_flags(p)
    p.add_argument("--bins", type=int, default=200)
    p.add_argument("--cond-bins", type=int, default=100)
    p.add_argument("--record-entanglement", action="store_true", default=False)
    p.add_argument("--record-mixed-entanglement", action="store_true", default=False)
    p.add_argument("--record-cap", type=int, default=1_000_000)
    _grid_flags(p)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", type=Path, default=None)

    p = add("optimize-conformation", "Nelder-Mead search over site positions")
    p.add_argument("--sites", type=int, default=7)
    p.add_argument("--restarts", type=int, default=50)
    p.add_argument("--max-iters", type=int, default=4000)
    p.add_argument("--mode", choices=("project", "penalty"), default="project")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window-factor", type=float, default=0.1)
    _grid_flags(p)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", type=Path, default=None)

    p = add("optimize-hamiltonian", "box-constrained search around an empirical Hamiltonian")
    p.add_argument("--hamiltonian", type=Path, default=None)
    p.add_argument("--off-diag-margin", type=float, default=3.2e11)
    p.add_argument("--diag-margin", type=float, default=17e11)
    p.add_argument("--margin-unit", choices=("rad_per_s", "h_hz", "per_cm"), default="h_hz")
    p.add_argument("--restarts", type=int, default=200)
    p.add_argument("--max-evals", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    _window_flags(p)
    _dephasing_flags(p)
    _grid_flags(p)
    p.add_argument("--out", type=Path, default=None)

    p = add("robustness", "p_out under Gaussian perturbations of a Hamiltonian")
    p.add_argument("--hamiltonian", type=Path, default=None)
    p.add_argument("--sigma-off", type=float, default=1e11)
    p.add_argument("--sigma-diag", type=float, default=5.4e11)
    p.add_argument("--sigma-unit", choices=("rad_per_s", "h_hz", "per_cm"), default="h_hz")
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bins", type=int, default=200)
    _window_flags(p)
    _grid_flags(p)
    p.add_argument("--out", type=Path, default=None)

    p = add("evaluate", "transfer efficiency of a single network")
    p.add_argument("--hamiltonian", type=Path, default=None)
    p.add_argument("--conformation", type=Path, default=None)
    p.add_argument("--sites", type=int, default=None,
                   help="random conformation (sample --index of --seed); 2 gives the bare pair")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--index", type=int, default=0)
    _window_flags(p)
    _dephasing_flags(p)
    _grid_flags(p)
    p.add_argument("--trajectory", type=Path, default=None, help="write site populations as CSV")
    p.add_argument("--trajectory-samples", type=int, default=1024)

    p = add("crossing", "crossing level of two histogram CSV files")
    p.add_argument("--coherent", type=Path, default=None)
    p.add_argument("--dephased", type=Path, default=None)
    p.add_argument("--persistence", type=int, default=3)
    p.add_argument("--direction", choices=("rising", "falling", "any"), default="rising")
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _load_config(path: Path, command: str) -> dict:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    if "subcommand" in data and "config" in data:
        if data["subcommand"] != command:
            raise ConfigError(f"{path}: manifest is for {data['subcommand']!r}, not {command!r}")
        data = data["config"].get("options", {})
    return data


def _apply_config(sub: argparse.ArgumentParser, data: dict, source: Path) -> None:
    dests = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, value in data.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest == "gamma_over_t":
            dest = "gamma_over_T"
        if dest not in dests:
            raise ConfigError(f"{source}: unknown option {key!r}")
        action = dests[dest]
        if value is not None and action.type is not None:
            try:
                value = action.type(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{source}: bad value for {key!r}: {value!r}") from exc
        if value is not None and action.choices is not None and value not in action.choices:
            raise ConfigError(f"{source}: {key!r} must be one of {sorted(action.choices)}")
        defaults[dest] = value
    sub.set_defaults(**defaults)


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        sub = _subparser(parser, args.command)
        _apply_config(sub, _load_config(args.config, args.command), args.config)
        args = parser.parse_args(argv)
    return args


def _options(args: argparse.Namespace) -> dict:
    out = {}
    for k, v in vars(args).items():
        if k in _RUN_ONLY:
            continue
        out[k.replace("_", "-") if k != "gamma_over_T" else "gamma-over-T"] = (
            str(v) if isinstance(v, Path) else v
        )
    return out


def _require(args, *names):
    for name in names:
        if getattr(args, name.replace("-", "_")) is None:
            raise ConfigError(f"--{name} is required")


def _grid(args) -> GridConfig:
    if args.grid_points < 2:
        raise ConfigError("--grid-points must be >= 2")
    if not args.refine_tol > 0:
        raise ConfigError("--refine-tol must be positive")
    return GridConfig(args.grid_points, args.refine_tol)


def _threads(args) -> int:
    if args.threads is None:
        return default_workers()
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return args.threads


def _read_hamiltonian(path: Path) -> tuple[Hamiltonian, str, float | None]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read Hamiltonian {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    window = data.get("window")
    return hamiltonian_from_dict(data, str(path)), str(data.get("unit")), window


def _window(args, h: Hamiltonian, file_window: float | None = None) -> float:
    w = args.window if args.window is not None else file_window
    if w is None:
        return default_time_window(h, args.window_factor)
    if not w > 0:
        raise ConfigError("window must be positive")
    return float(w)


def _gamma(args, window: float) -> DephasingConfig | None:
    if args.gamma is not None:
        return DephasingConfig(args.gamma, args.dephasing_convention)
    if args.gamma_over_T is not None:
        return DephasingConfig(args.gamma_over_T / window, args.dephasing_convention)
    return None


def _out_dir(args) -> Path:
    _require(args, "out")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {args.out}: {exc}") from exc
    return args.out


def _emit(obj) -> None:
    sys.stdout.write(dumps(obj))


# --------------------------------------------------------------------------
# subcommands


def cmd_sample(args) -> int:
    _require(args, "sites", "samples", "out")
    started = _timestamp()
    cfg = CampaignConfig(
        n_sites=args.sites, n_samples=args.samples, seed=args.seed,
        window_factor=args.window_factor, gamma=args.gamma, gamma_over_window=args.gamma_over_T,
        convention=args.dephasing_convention, grid=_grid(args),
        record_entanglement=args.record_entanglement,
        record_mixed_entanglement=args.record_mixed_entanglement,
        bins=args.bins, cond_bins=args.cond_bins, record_cap=args.record_cap,
        workers=_threads(args),
    )
    out = _out_dir(args)
    result = run_campaign(cfg)
    man = manifest("sample", {"options": _options(args), "resolved": cfg.to_dict()}, cfg.seed,
                   cfg.convention if cfg.dephased else None,
                   MIXED_ESTIMATOR if cfg.record_mixed_entanglement else None, started)
    write_report(result, out, man)
    _emit({"out": str(out), "n_samples": result.n, "mean_coherent": result.mean_coherent,
           "mean_dephased": result.mean_dephased if cfg.dephased else None})
    return 0


def cmd_optimize_conformation(args) -> int:
    started = _timestamp()
    cfg = ConformationOptConfig(n_sites=args.sites, n_restarts=args.restarts, max_iters=args.max_iters,
                                mode=args.mode, seed=args.seed, window_factor=args.window_factor,
                                grid=_grid(args))
    out = _out_dir(args)
    res = optimize_conformation(cfg, workers=_threads(args))
    write_json(out / "conformation.json", res.conformation.to_dict())
    write_json(out / "hamiltonian.json", coupling_matrix(res.conformation).to_dict())
    report = res.report(cfg)
    write_json(out / "opt_report.json", report)
    write_json(out / "manifest.json",
               manifest("optimize-conformation", {"options": _options(args)}, cfg.seed, started=started))
    _emit({"out": str(out), "p_out": res.transfer.p_out, "t_star": res.transfer.t_star,
           "window": res.transfer.window, "best_restart": res.best_restart})
    return 0


def cmd_optimize_hamiltonian(args) -> int:
    _require(args, "hamiltonian", "out")
    started = _timestamp()
    base, unit, file_window = _read_hamiltonian(args.hamiltonian)
    window = _window(args, base, file_window)
    cfg = HamiltonianBoxConfig(base, args.off_diag_margin, args.diag_margin, args.margin_unit,
                               args.restarts, args.max_evals, args.seed, _grid(args))
    out = _out_dir(args)
    res = optimize_hamiltonian_box(cfg, window)
    report = res.report(cfg)
    deph = _gamma(args, window)
    if deph is not None:
        report["dephasing"] = {
            "gamma": deph.gamma, "convention": deph.convention,
            "base_p_out": dephased_evaluation(base, deph.gamma, window, deph.convention, cfg.grid).p_out,
            "best_p_out": dephased_evaluation(res.hamiltonian, deph.gamma, window, deph.convention,
                                              cfg.grid).p_out,
        }
    # the optimum is only meaningful in the window it was optimised for
    write_json(out / "hamiltonian_opt.json", {**res.hamiltonian.to_dict(unit), "window": window})
    write_json(out / "opt_report.json", report)
    write_json(out / "manifest.json",
               manifest("optimize-hamiltonian", {"options": _options(args)}, cfg.seed,
                        deph.convention if deph else None, started=started))
    _emit({"out": str(out), "base_p_out": res.base_transfer.p_out, "p_out": res.transfer.p_out,
           "t_star": res.transfer.t_star, "window": window})
    return 0


def cmd_robustness(args) -> int:
    _require(args, "hamiltonian", "out")
    started = _timestamp()
    h, _, file_window = _read_hamiltonian(args.hamiltonian)
    window = _window(args, h, file_window)
    cfg = RobustnessConfig(args.sigma_off, args.sigma_diag, args.sigma_unit, args.samples, args.seed,
                           args.bins, _grid(args))
    out = _out_dir(args)
    res = robustness_scan(h, cfg, window)
    base = transfer_efficiency_closed(h, window, cfg.grid).p_out
    write_histogram_csv(out / "hist_robustness.csv", res.histogram)
    summary = {"n_samples": cfg.n_samples, "window": window, "base_p_out": base, "mean": res.mean,
               "std": res.std, "std_over_mean": res.std / res.mean if res.mean > 0 else None}
    write_json(out / "robustness.json", summary)
    write_json(out / "manifest.json",
               manifest("robustness", {"options": _options(args)}, cfg.seed, started=started))
    _emit(summary)
    return 0


def cmd_evaluate(args) -> int:
    given = [x is not None for x in (args.hamiltonian, args.conformation, args.sites)]
    if sum(given) != 1:
        raise ConfigError("give exactly one of --hamiltonian, --conformation, --sites")
    file_window = None
    if args.hamiltonian is not None:
        h, _, file_window = _read_hamiltonian(args.hamiltonian)
    else:
        if args.conformation is not None:
            try:
                conf = load_conformation(args.conformation)
            except OSError as exc:
                raise ConfigError(f"cannot read conformation {args.conformation}: {exc}") from exc
        else:
            if args.index < 0:
                raise ConfigError("--index must be non-negative")
            conf = sample_conformation(args.sites, args.seed, args.index)
        h = coupling_matrix(conf)
    grid = _grid(args)
    window = _window(args, h, file_window)
    res = transfer_efficiency_closed(h, window, grid)
    out = {"p_out": res.p_out, "T": window, "t_star": res.t_star, "n_sites": h.dim,
           "input_site": h.input_index, "output_site": h.output_index, "time_unit": h.time_unit}
    deph = _gamma(args, window)
    if deph is not None:
        dres = transfer_efficiency_open(h, deph, window, grid)
        out["dephased"] = {"p_out": dres.p_out, "t_star": dres.t_star, "gamma": deph.gamma,
                           "convention": deph.convention}
    if args.trajectory is not None:
        if deph is None:
            init = basis_state(h.dim, h.input_index)
        else:
            init = np.zeros((h.dim, h.dim), dtype=complex)
            init[h.input_index, h.input_index] = 1.0
        traj = state_trajectory(h, init, deph, window, args.trajectory_samples)
        write_trajectory_csv(args.trajectory, traj)
        out["trajectory"] = str(args.trajectory)
    _emit(out)
    return 0


def cmd_crossing(args) -> int:
    _require(args, "coherent", "dephased")
    hists = []
    for path in (args.coherent, args.dephased):
        try:
            hists.append(read_histogram_csv(path))
        except OSError as exc:
            raise ConfigError(f"cannot read histogram {path}: {exc}") from exc
        except (KeyError, IndexError) as exc:
            raise ConfigError(f"{path}: not a histogram CSV") from exc
    cross = density_crossing(hists[0], hists[1], args.persistence, args.direction)
    _emit({"found": cross.found, "level": cross.level, "direction": args.direction})
    return 0


COMMANDS = {
    "sample": cmd_sample,
    "optimize-conformation": cmd_optimize_conformation,
    "optimize-hamiltonian": cmd_optimize_hamiltonian,
    "robustness": cmd_robustness,
    "evaluate": cmd_evaluate,
    "crossing": cmd_crossing,
}


def run_cli(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
