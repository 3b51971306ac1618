"""Command line: single runs, ablation sweeps, and learning-curve plots.

Configuration precedence is flags, then a ``key=value`` config file, then the
built-in defaults. Exit codes: 0 ok, 1 run failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from fractions import Fraction
from pathlib import Path

from .config import CONFIG_FIELDS, RunConfig
from .errors import ConfigError
from .scheduler import format_ratio, parse_ratio

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

SWEEP_AXES = ("n_envs", "beta_av", "beta_pv", "batch_size", "buffer_capacity", "sigma_fixed")
SWEEP_COLUMNS = (
    "axis",
    "value",
    "status",
    "elapsed_s",
    "env_steps",
    "c_a",
    "c_v",
    "c_p",
    "final_return",
    "best_return",
    "time_to_threshold_s",
)

_INTS = {"n_envs", "batch_size", "buffer_capacity", "n_step", "warm_up", "horizon", "publish_interval",
         "channel_capacity", "seed", "budget_steps", "eval_episodes"}
_FLOATS = {"gamma", "tau", "lr_actor", "lr_critic", "grad_clip", "sigma_min", "sigma_max", "sigma_fixed",
           "reward_scale", "budget_seconds", "eval_interval"}
_OPTIONAL = {"sigma_fixed", "reward_scale", "budget_seconds", "budget_steps", "out_dir"}
_RATIOS = {"beta_av", "beta_pv"}
_HELP = {
    "beta_av": "actor steps per critic update, e.g. 1:8",
    "beta_pv": "policy updates per critic update, e.g. 1:2",
    "free_running": "disable ratio control",
    "sigma_fixed": "one noise scale for every env instead of the mixed schedule",
    "hidden": "comma-separated hidden layer widths",
    "clock": "wall, or logical (vector env steps; synchronous runs only)",
}


def _to_int(text: str) -> int:
    value = float(text)
    if not value.is_integer():
        raise ValueError(f"{text!r} is not an integer")
    return int(value)


def convert(name: str, text) -> object:
    """Parse one config value from its text form."""
    if name not in CONFIG_FIELDS:
        raise ConfigError("unknown key", name)
    if not isinstance(text, str):
        return text
    text = text.strip()
    try:
        if name in _OPTIONAL and text.lower() in ("none", ""):
            return None
        if name in _INTS:
            return _to_int(text)
        if name in _FLOATS:
            return float(text)
        if name in _RATIOS:
            return parse_ratio(text)
        if name == "free_running":
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"{text!r} is not a boolean")
        if name == "hidden":
            return tuple(_to_int(t) for t in text.split(",") if t.strip())
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], name) from None
    except ValueError as exc:
        raise ConfigError(str(exc), name) from None
    return text


def render_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, Fraction):
        return format_ratio(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render(cfg: RunConfig) -> str:
    """Config file text that parses back to ``cfg``."""
    return "".join(f"{name.replace('_', '-')}={render_value(getattr(cfg, name))}\n" for name in CONFIG_FIELDS)


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value", "config")
        key, value = (s.strip() for s in line.split("=", 1))
        name = key.replace("-", "_")
        values[name] = convert(name, value)
    return values


def build_config(file_values: dict, flag_values: dict) -> RunConfig:
    merged = {**file_values, **flag_values}
    try:
        return RunConfig(**merged)
    except TypeError as exc:  # pragma: no cover - guarded by convert()
        raise ConfigError(str(exc), "config") from None


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file; flags take precedence")
    for name in CONFIG_FIELDS:
        flag = "--" + name.replace("_", "-")
        if name == "free_running":
            parser.add_argument(flag, dest=name, action="store_const", const="true", default=None, help=_HELP[name])
            continue
        parser.add_argument(flag, dest=name, default=None, metavar=name.upper(), help=_HELP.get(name))


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pql", description="Parallel off-policy actor-critic training.")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="train once and write metrics")
    _add_config_flags(run_p)
    run_p.add_argument("--plot", action="store_true", help="also render the learning curve as PNG")
    run_p.add_argument("--stop-at-return", type=float, default=None, help="end early once an evaluation reaches this")

    sweep_p = sub.add_parser("sweep", help="train once per value of one hyper-parameter")
    _add_config_flags(sweep_p)
    sweep_p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sweep_p.add_argument("--values", required=True, help="comma-separated; 'mixed' means the noise schedule")
    sweep_p.add_argument("--threshold", type=float, default=None, help="return used for time-to-threshold")
    sweep_p.add_argument("--plot", action="store_true")

    plot_p = sub.add_parser("plot", help="render return against wall clock from metrics CSVs")
    plot_p.add_argument("csv", nargs="+")
    plot_p.add_argument("-o", "--output", default="learning_curve.png")
    return parser


def parse(argv=None) -> tuple[argparse.Namespace, RunConfig | None]:
    """Parse arguments. Raises ``ConfigError`` for bad values and ``SystemExit`` for bad syntax."""
    args = make_parser().parse_args(argv)
    if args.command == "plot":
        return args, None
    file_values = {}
    if args.config:
        try:
            file_values = parse_config_text(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(str(exc), "config") from None
    flag_values = {
        name: convert(name, getattr(args, name)) for name in CONFIG_FIELDS if getattr(args, name, None) is not None
    }
    return args, build_config(file_values, flag_values)


def artifact_root(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir or os.environ.get("PQL_OUT_DIR") or "pql_out")


def run_name(cfg: RunConfig) -> str:
    return f"{cfg.algo}-{cfg.task}-seed{cfg.seed}"


def plot_curves(csv_paths, output, labels=None) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for i, path in enumerate(csv_paths):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        t = [float(r["wall_clock_s"]) for r in rows]
        mean = [float(r["eval_return_mean"]) for r in rows]
        err = [float(r["eval_return_stderr"]) for r in rows]
        label = labels[i] if labels else Path(path).parent.name
        ax.plot(t, mean, label=label)
        ax.fill_between(t, [m - e for m, e in zip(mean, err)], [m + e for m, e in zip(mean, err)], alpha=0.2)
    ax.set_xlabel("wall clock (s)")
    ax.set_ylabel("evaluation return")
    ax.legend(fontsize="small")
    fig.tight_layout()
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(output, dpi=100)
    plt.close(fig)
    return output


def _require_budget(cfg: RunConfig) -> None:
    if cfg.budget_seconds is None and cfg.budget_steps is None:
        raise ConfigError("set --budget-seconds or --budget-steps", "budget_seconds")


def run_once(cfg: RunConfig, out: Path, plot: bool = False, stop_at_return: float | None = None):
    from .runtime import run

    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(render(cfg), encoding="utf-8")
    report = run(cfg, out, stop_at_return=stop_at_return)
    if plot and report.csv_path is not None:
        plot_curves([report.csv_path], out / "learning_curve.png", [run_name(cfg)])
    return report


def sweep_value(axis: str, text: str):
    if axis == "sigma_fixed" and text.strip().lower() == "mixed":
        return None
    return convert(axis, text)


def sweep(axis: str, values, base: RunConfig, root: Path, threshold: float | None = None, plot: bool = False):
    """Run ``base`` once per value and write ``sweep_<axis>.csv``. Failed runs are recorded, not raised."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"choose from {', '.join(SWEEP_AXES)}", "axis")
    if len(values) < 2:
        raise ConfigError("a sweep needs at least two values", "values")
    labels = [render_value(v) if v is not None else "mixed" for v in values]
    root.mkdir(parents=True, exist_ok=True)
    table = root / f"sweep_{axis}.csv"
    reports, curves = [], []
    with open(table, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for label, value in zip(labels, values):
            row = dict.fromkeys(SWEEP_COLUMNS, "")
            row.update(axis=axis, value=label)
            try:
                cfg = base.with_(**{axis: value})
                report = run_once(cfg, root / f"{axis}={label.replace(':', '-')}")
            except Exception as exc:  # keep sweeping; the table records the failure
                row["status"] = f"failed: {type(exc).__name__}: {exc}".splitlines()[0]
                reports.append(None)
            else:
                c_a, c_v, c_p = report.counters
                ttt = report.time_to_threshold(threshold) if threshold is not None else None
                row.update(
                    status="ok",
                    elapsed_s=f"{report.elapsed_s:.3f}",
                    env_steps=report.env_steps,
                    c_a=c_a,
                    c_v=c_v,
                    c_p=c_p,
                    final_return=f"{report.final_return:.4f}",
                    best_return=f"{report.best_return:.4f}",
                    time_to_threshold_s="" if ttt is None else f"{ttt:.3f}",
                )
                reports.append(report)
                if report.csv_path is not None:
                    curves.append((report.csv_path, f"{axis}={label}"))
            writer.writerow(row)
            fh.flush()
    if plot and curves:
        plot_curves([c for c, _ in curves], root / f"sweep_{axis}.png", [lbl for _, lbl in curves])
    return reports, table


def main(argv=None) -> int:
    try:
        args, cfg = parse(argv)
        if args.command == "plot":
            print(plot_curves(args.csv, args.output))
            return EXIT_OK
        _require_budget(cfg)
        root = artifact_root(cfg)
        if args.command == "sweep":
            values = [sweep_value(args.axis, v) for v in args.values.split(",") if v.strip()]
            reports, table = sweep(args.axis, values, cfg, root, args.threshold, args.plot)
            for r in reports:
                if r is not None:
                    print(r.summary())
            print(f"comparison table: {table}")
            return EXIT_OK if all(r is not None for r in reports) else EXIT_FAILURE
    except ConfigError as exc:
        print(f"pql: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        report = run_once(cfg, root / run_name(cfg), plot=args.plot, stop_at_return=args.stop_at_return)
    except KeyboardInterrupt:
        print("pql: interrupted", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as exc:
        print(f"pql: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(report.summary())
    return EXIT_FAILURE if report.interrupted or not math.isfinite(report.final_return) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
