"""Command-line front end: config ingestion, runs, and report emission.

Commands
--------
``solve <cfg>``
    Minimize the certificate energy for the configured model and write
    ``trajectory.csv``, ``report.json``, ``history.csv`` and ``profiles.dat``
    into the configured output directory.  Exit 0 iff the zero-energy
    certificate accepts the result.
``baseline <cfg>``
    March the implicit stepping scheme and write the same artifacts (minus
    the iteration history).
``verify <cfg>``
    Run every structural-condition checker for the configured model and
    write ``conditions.json``.  Exit 0 iff all conditions pass.
``gradcheck <cfg>``
    Compare the analytic energy gradient against central finite differences
    on random trajectories; print the worst relative error.
``conjugate-table --exponent Q ...``
    Tabulate the pointwise convex conjugate as CSV ``y,psi_star,argmax``.

Configs are flat ``section.key = value`` text files ('#' and ';' start
comments).  Unknown or malformed keys abort with exit code 2 and a message
naming the key.  Exit codes: 0 success, 1 criterion not met, 2 config
error, 3 numerical failure, 4 I/O error.  Stdout carries a one-line
summary; diagnostics go to stderr.  ``BEN_THREADS`` caps worker threads.
All emitted files are UTF-8 with LF line endings and ``%.17g`` numbers.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .convex import PowerDensity, eval_conjugate
from .energy import certificate, energy_and_gradient, eval_energy
from .errors import (
    BenpdeError,
    ConfigError,
    ConjugateSolveError,
    NonFiniteInputError,
)
from .grid import (
    Field,
    SpaceGrid,
    Trajectory,
    h_inner,
    save_trajectory_csv,
    uniform_times,
)
from .models import (
    ModelSpec,
    adversarial_model,
    burgers_model,
    check_all_conditions,
    divergence_form_model,
    heat_model,
)
from .solver import (
    SolveOptions,
    compare,
    constant_initial_trajectory,
    implicit_baseline,
    minimize,
    random_initial_trajectory,
)

__all__ = ["main", "load_config", "RunConfig"]

FMT = "%.17g"

#: keys accepted per section, with parsers
_MODEL_KEYS = {"name", "q", "a", "eps", "lam", "u_max", "flux_amp", "flux_cap",
               "reaction_const", "reaction_slope", "kappa"}
_GRID_KEYS = {"dim", "n"}
_TIME_KEYS = {"T0", "M"}
_INITIAL_KEYS = {"profile", "path", "amplitude"}
_SOLVE_KEYS = {"max_iters", "grad_tol", "energy_tol", "armijo_c1", "backtrack",
               "max_line_trials", "use_lbfgs", "memory", "seed", "init",
               "noise", "tol"}
_VERIFY_KEYS = {"samples", "seed", "amplitude"}
_GRADCHECK_KEYS = {"trajectories", "directions", "step", "seed"}
_OUTPUT_KEYS = {"dir"}
_COMPARE_KEYS = {"baseline"}
_SECTIONS = {
    "model": _MODEL_KEYS,
    "grid": _GRID_KEYS,
    "time": _TIME_KEYS,
    "initial": _INITIAL_KEYS,
    "solve": _SOLVE_KEYS,
    "verify": _VERIFY_KEYS,
    "gradcheck": _GRADCHECK_KEYS,
    "outputs": _OUTPUT_KEYS,
    "compare": _COMPARE_KEYS,
}


@dataclass
class RunConfig:
    """Fully validated run configuration."""

    model: ModelSpec
    grid: SpaceGrid
    times: np.ndarray
    w0: Field
    options: SolveOptions
    tol: float
    out_dir: Path
    init_kind: str
    init_noise: float
    verify_samples: int
    verify_seed: int
    verify_amplitude: float
    gradcheck_trajectories: int
    gradcheck_directions: int
    gradcheck_step: float
    gradcheck_seed: int
    compare_baseline: bool
    raw: dict = field(repr=False, default_factory=dict)


def _parse_lines(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', "
                              f"got '{raw.strip()}'", key=raw.strip())
        key, value = (part.strip() for part in line.split("=", 1))
        if key.count(".") != 1:
            raise ConfigError(f"line {lineno}: key '{key}' is not of the form "
                              f"section.key", key=key)
        section, name = key.split(".")
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section in '{key}'", key=key)
        if name not in _SECTIONS[section]:
            raise ConfigError(f"unknown config key '{key}'", key=key)
        if key in values:
            raise ConfigError(f"duplicate config key '{key}'", key=key)
        values[key] = value
    return values


def _get(values, key, conv, default=None, check=None, describe=""):
    if key not in values:
        if default is None:
            raise ConfigError(f"missing required config key '{key}'", key=key)
        return default
    try:
        out = conv(values[key])
    except (ValueError, TypeError):
        raise ConfigError(
            f"config key '{key}': cannot parse '{values[key]}'", key=key)
    if check is not None and not check(out):
        raise ConfigError(f"config key '{key}': {describe}", key=key)
    return out


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(low)


def _build_model(values) -> ModelSpec:
    name = _get(values, "model.name", str)
    params = {
        "q": _get(values, "model.q", float, default=2.0),
        "a": _get(values, "model.a", float, default=1.0,
                  check=lambda v: v > 0, describe="must be positive"),
        "eps": (_get(values, "model.eps", float, default=-1.0)
                if "model.eps" in values else None),
        "u_max": _get(values, "model.u_max", float, default=10.0),
        "flux_amp": _get(values, "model.flux_amp", float, default=0.4),
        "flux_cap": _get(values, "model.flux_cap", float, default=2.0),
        "reaction_const": _get(values, "model.reaction_const", float,
                               default=0.5),
        "reaction_slope": _get(values, "model.reaction_slope", float,
                               default=1.0),
        "kappa": _get(values, "model.kappa", float, default=50.0),
    }
    allowed = {
        "heat": {"a"},
        "burgers": {"a", "u_max"},
        "divergence_form": {"q", "a", "eps", "flux_amp", "flux_cap",
                            "reaction_const", "reaction_slope"},
        "adversarial": {"kappa", "a"},
    }
    if name not in allowed:
        raise ConfigError(f"config key 'model.name': unknown model '{name}'",
                          key="model.name")
    for key in values:
        section, prop = key.split(".")
        if section == "model" and prop not in ("name", "lam") \
                and prop not in allowed[name]:
            raise ConfigError(
                f"config key '{key}' does not apply to model '{name}'",
                key=key)
    kwargs = {k: v for k, v in params.items() if k in allowed[name]}
    if name == "burgers":
        model = burgers_model(a=kwargs["a"], u_max=kwargs["u_max"])
    elif name == "divergence_form":
        try:
            model = divergence_form_model(**kwargs)
        except ValueError as exc:
            bad = "model.eps" if "eps" in str(exc) else "model.q"
            raise ConfigError(f"config key '{bad}': {exc}", key=bad)
    elif name == "adversarial":
        model = adversarial_model(kappa=kwargs["kappa"], a=kwargs["a"])
    else:
        model = heat_model(a=kwargs["a"])
    lam = _get(values, "model.lam", int, default=model.lam,
               check=lambda v: v in (0, 1), describe="must be 0 or 1")
    if lam != model.lam:
        model = replace(model, lam=lam)
    return model


def _initial_profile(values, grid: SpaceGrid, cfg_dir: Path) -> Field:
    profile = _get(values, "initial.profile", str, default="sin")
    amplitude = _get(values, "initial.amplitude", float, default=1.0)
    coords = grid.node_coords
    if profile == "sin":
        out = np.ones(grid.shape)
        for axis in range(grid.dim):
            out = out * np.sin(np.pi * coords[axis])
    elif profile == "bump":
        out = np.ones(grid.shape)
        for axis in range(grid.dim):
            x = coords[axis]
            out = out * (4.0 * x * (1.0 - x)) ** 2
    elif profile == "csv":
        path_text = _get(values, "initial.path", str)
        path = Path(path_text)
        if not path.is_absolute():
            path = cfg_dir / path
        if not path.exists():
            raise ConfigError(f"config key 'initial.path': file '{path}' "
                              f"does not exist", key="initial.path")
        try:
            data = np.loadtxt(path, delimiter=",", dtype=float)
        except ValueError as exc:
            raise ConfigError(f"config key 'initial.path': {exc}",
                              key="initial.path")
        if data.size != grid.n_nodes:
            raise ConfigError(
                f"config key 'initial.path': expected {grid.n_nodes} values, "
                f"found {data.size}", key="initial.path")
        out = data.reshape(grid.shape)
    else:
        raise ConfigError(f"config key 'initial.profile': unknown profile "
                          f"'{profile}'", key="initial.profile")
    try:
        return Field(grid, amplitude * out if profile != "csv" else out)
    except NonFiniteInputError as exc:
        bad = "initial.path" if profile == "csv" else "initial.amplitude"
        raise ConfigError(f"config key '{bad}': {exc}", key=bad)


def load_config(path) -> RunConfig:
    """Parse and validate a flat ``section.key = value`` config file."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    values = _parse_lines(text)

    model = _build_model(values)
    dim = _get(values, "grid.dim", int, default=1,
               check=lambda v: v in (1, 2), describe="must be 1 or 2")
    n = _get(values, "grid.n", int,
             check=lambda v: v >= 1, describe="must be at least 1")
    grid = SpaceGrid(dim=dim, n=n)
    t_end = _get(values, "time.T0", float,
                 check=lambda v: v > 0, describe="must be positive")
    n_steps = _get(values, "time.M", int,
                   check=lambda v: v >= 1, describe="must be at least 1")
    times = uniform_times(t_end, n_steps)
    w0 = _initial_profile(values, grid, path.parent)

    try:
        options = SolveOptions(
            max_iters=_get(values, "solve.max_iters", int, default=2000),
            grad_tol=_get(values, "solve.grad_tol", float, default=1e-13),
            energy_tol=_get(values, "solve.energy_tol", float, default=1e-12),
            armijo_c1=_get(values, "solve.armijo_c1", float, default=1e-4),
            backtrack=_get(values, "solve.backtrack", float, default=0.5),
            max_line_trials=_get(values, "solve.max_line_trials", int,
                                 default=40),
            use_lbfgs=_get(values, "solve.use_lbfgs", _bool, default=True),
            memory=_get(values, "solve.memory", int, default=10),
            seed=_get(values, "solve.seed", int, default=0),
        )
    except ValueError as exc:
        raise ConfigError(f"config section 'solve': {exc}", key="solve")

    init_kind = _get(values, "solve.init", str, default="random",
                     check=lambda v: v in ("random", "constant"),
                     describe="must be 'random' or 'constant'")
    out_dir = Path(_get(values, "outputs.dir", str,
                        default=f"runs/{model.name}"))
    return RunConfig(
        model=model, grid=grid, times=times, w0=w0, options=options,
        tol=_get(values, "solve.tol", float, default=1e-6,
                 check=lambda v: v > 0, describe="must be positive"),
        out_dir=out_dir,
        init_kind=init_kind,
        init_noise=_get(values, "solve.noise", float, default=0.5),
        verify_samples=_get(values, "verify.samples", int, default=1000,
                            check=lambda v: v >= 1,
                            describe="must be at least 1"),
        verify_seed=_get(values, "verify.seed", int, default=0),
        verify_amplitude=_get(values, "verify.amplitude", float, default=1.0),
        gradcheck_trajectories=_get(values, "gradcheck.trajectories", int,
                                    default=5),
        gradcheck_directions=_get(values, "gradcheck.directions", int,
                                  default=20),
        gradcheck_step=_get(values, "gradcheck.step", float, default=1e-6),
        gradcheck_seed=_get(values, "gradcheck.seed", int, default=0),
        compare_baseline=_get(values, "compare.baseline", _bool,
                              default=False),
        raw=values,
    )


# -- artifact writers --------------------------------------------------------------


def _write_history(path: Path, history: np.ndarray) -> None:
    lines = ["iter,J,grad_norm"]
    for i, (j, gn) in enumerate(history):
        lines.append(f"{i},{FMT % j},{FMT % gn}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _write_profiles(path: Path, traj: Trajectory) -> None:
    """Gnuplot-ready node traces: time column plus three probe nodes."""
    flat = traj.states.reshape(traj.states.shape[0], -1)
    n = flat.shape[1]
    picks = sorted({n // 4, n // 2, (3 * n) // 4})
    header = "# t " + " ".join(f"node_{p}" for p in picks)
    lines = [header]
    for t, row in zip(traj.times, flat):
        lines.append(" ".join([FMT % t] + [FMT % row[p] for p in picks]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _write_report(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8",
                    newline="\n")


def _trajectory_mixed_norm(traj: Trajectory) -> float:
    w = traj.tau * traj.grid.cell_volume
    return float(np.sqrt(w * np.sum(traj.states**2)))


# -- commands ----------------------------------------------------------------------


def _cmd_solve(cfg: RunConfig) -> int:
    if cfg.init_kind == "constant":
        init = constant_initial_trajectory(cfg.grid, cfg.times, cfg.w0)
    else:
        init = random_initial_trajectory(cfg.grid, cfg.times, cfg.w0,
                                         seed=cfg.options.seed,
                                         noise=cfg.init_noise)
    outcome = minimize(cfg.model, init, cfg.options)
    verdict = certificate(cfg.model, outcome.trajectory, cfg.tol)

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    save_trajectory_csv(outcome.trajectory, cfg.out_dir / "trajectory.csv")
    _write_history(cfg.out_dir / "history.csv", outcome.history)
    _write_profiles(cfg.out_dir / "profiles.dat", outcome.trajectory)
    payload = dict(outcome.report.to_json_dict())
    payload["certificate"] = verdict.to_json_dict()
    payload["iterations"] = outcome.iterations
    payload["converged"] = outcome.converged
    if cfg.compare_baseline:
        base = implicit_baseline(cfg.model, cfg.w0, cfg.times)
        result = compare(outcome.trajectory, base)
        payload["compare_baseline"] = {
            "rel_l2": result.rel_l2,
            "max_node": result.max_node,
            "baseline_energy": eval_energy(cfg.model, base).to_json_dict(),
        }
    _write_report(cfg.out_dir / "report.json", payload)

    print(f"solve {cfg.model.name}: solved={verdict.solved} "
          f"normalized={outcome.report.normalized:.3e} "
          f"defect={outcome.report.defect_norm:.3e} "
          f"iterations={outcome.iterations} -> {cfg.out_dir}")
    return 0 if verdict.solved else 1


def _cmd_baseline(cfg: RunConfig) -> int:
    traj = implicit_baseline(cfg.model, cfg.w0, cfg.times)
    report = eval_energy(cfg.model, traj)
    verdict = certificate(cfg.model, traj, cfg.tol)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    save_trajectory_csv(traj, cfg.out_dir / "trajectory.csv")
    _write_profiles(cfg.out_dir / "profiles.dat", traj)
    payload = dict(report.to_json_dict())
    payload["certificate"] = verdict.to_json_dict()
    payload["steps"] = traj.n_steps
    _write_report(cfg.out_dir / "report.json", payload)
    print(f"baseline {cfg.model.name}: steps={traj.n_steps} "
          f"J={report.total:.3e} normalized={report.normalized:.3e} "
          f"-> {cfg.out_dir}")
    return 0


def _cmd_verify(cfg: RunConfig) -> int:
    t_end = float(cfg.times[-1])
    reports = check_all_conditions(
        cfg.model, cfg.grid, samples=cfg.verify_samples, seed=cfg.verify_seed,
        amplitude=cfg.verify_amplitude, t_range=(0.0, t_end))
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    _write_report(cfg.out_dir / "conditions.json",
                  [r.to_json_dict() for r in reports])
    failed = [r for r in reports if not r.passed]
    n_pass = len(reports) - len(failed)
    if failed:
        detail = ", ".join(f"{r.condition} (worst={r.worst_margin:.3e}, "
                           f"{len(r.witnesses)} witnesses)" for r in failed)
        print(f"verify {cfg.model.name}: {n_pass}/{len(reports)} conditions "
              f"passed; FAIL {detail} -> {cfg.out_dir}")
        return 1
    worst = min(r.worst_margin for r in reports)
    print(f"verify {cfg.model.name}: {n_pass}/{len(reports)} conditions "
          f"passed (worst margin={worst:.3e}) -> {cfg.out_dir}")
    return 0


def _cmd_gradcheck(cfg: RunConfig) -> int:
    rng = np.random.default_rng(cfg.gradcheck_seed)
    grid, times = cfg.grid, cfg.times
    worst = 0.0
    for _ in range(cfg.gradcheck_trajectories):
        states = 0.5 * rng.normal(size=(times.size, 1) + grid.shape)
        traj = Trajectory(grid, times, states)
        _, grad = energy_and_gradient(cfg.model, traj)
        for _ in range(cfg.gradcheck_directions):
            s = rng.normal(size=states.shape)
            s[0] = 0.0
            e = cfg.gradcheck_step
            jp = eval_energy(cfg.model,
                             traj.with_tail(traj.states[1:] + e * s[1:])).total
            jm = eval_energy(cfg.model,
                             traj.with_tail(traj.states[1:] - e * s[1:])).total
            fd = (jp - jm) / (2.0 * e)
            an = traj.tau * float(np.sum(
                [h_inner(grid, s[j], grad[j]) for j in range(times.size)]))
            worst = max(worst, abs(an - fd) / max(1.0, abs(fd)))
    print(f"gradcheck {cfg.model.name}: worst relative error {worst:.3e} "
          f"over {cfg.gradcheck_trajectories} trajectories x "
          f"{cfg.gradcheck_directions} directions")
    return 0 if worst <= 1e-5 else 1


def _cmd_conjugate_table(args) -> int:
    if args.steps < 2:
        print("conjugate-table: --steps must be at least 2", file=sys.stderr)
        return 2
    try:
        density = PowerDensity(args.coefficient, args.exponent,
                               args.regularizer)
    except ValueError as exc:
        print(f"conjugate-table: {exc}", file=sys.stderr)
        return 2
    ys = np.linspace(args.y_min, args.y_max, args.steps)
    rows = []
    failures = 0
    for y in ys:
        try:
            result = eval_conjugate(density, abs(y))
            value = float(result.value)
            argmax = float(np.sign(y) * result.argmax)
            rows.append(f"{FMT % y},{FMT % value},{FMT % argmax}")
        except ConjugateSolveError as exc:
            failures += 1
            rows.append(f"{FMT % y},nan,nan  # solve failed: {exc}")
    out = Path(args.out)
    out.write_text("\n".join(["y,psi_star,argmax"] + rows) + "\n",
                   encoding="utf-8", newline="\n")
    print(f"conjugate-table q={args.exponent:g} a={args.coefficient:g} "
          f"eps={args.regularizer:g}: {len(rows)} rows, {failures} failures "
          f"-> {out}")
    return 3 if failures else 0


# -- entry point --------------------------------------------------------------------


def _resolve_config(path_text: str) -> Path:
    """Use the filesystem path if present, else fall back to a bundled config."""
    path = Path(path_text)
    if path.exists():
        return path
    bundled = resources.files("benpde") / "configs" / path.name
    if path_text == path.name and bundled.is_file():
        return Path(str(bundled))
    raise FileNotFoundError(f"config file '{path_text}' not found")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="benpde",
        description="Variational certificate solver for parabolic evolutions")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
            ("solve", "minimize the trajectory energy and emit artifacts"),
            ("baseline", "run the implicit stepping scheme"),
            ("verify", "run the structural condition checkers"),
            ("gradcheck", "finite-difference check of the energy gradient")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="path to a flat section.key=value "
                                      "config (bundled name also accepted)")
    table = sub.add_parser("conjugate-table",
                           help="tabulate the pointwise convex conjugate")
    table.add_argument("--exponent", type=float, default=2.0,
                       help="growth exponent q >= 2")
    table.add_argument("--coefficient", type=float, default=1.0,
                       help="leading coefficient a > 0")
    table.add_argument("--regularizer", type=float, default=0.0,
                       help="quadratic regularizer eps >= 0")
    table.add_argument("--y-min", type=float, default=-2.0)
    table.add_argument("--y-max", type=float, default=2.0)
    table.add_argument("--steps", type=int, default=41)
    table.add_argument("--out", default="conjugate_table.csv",
                       help="output CSV path")
    return parser


_CONFIG_COMMANDS = {
    "solve": _cmd_solve,
    "baseline": _cmd_baseline,
    "verify": _cmd_verify,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "conjugate-table":
        try:
            return _cmd_conjugate_table(args)
        except OSError as exc:
            print(f"conjugate-table: cannot write output: {exc}",
                  file=sys.stderr)
            return 4
    try:
        cfg = load_config(_resolve_config(args.config))
    except ConfigError as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, FileNotFoundError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 4
    try:
        return _CONFIG_COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 2
    except BenpdeError as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
