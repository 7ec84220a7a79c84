"""Command-line pipeline: synth, train, forecast, evaluate.

Configuration merges three layers with fixed precedence — command-line
flags over a line-oriented key=value config file over built-in defaults
— and every run writes the fully resolved configuration (with each
value's source) next to its outputs, so any run is reproducible from
that file alone.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric fault
(including a feasibility shortfall in `forecast`).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import forecast as fc
from . import metrics as metrics_mod
from .autodiff import NumericFaultError, UsageError
from .data import DataError
from .models import CheckpointError, default_architecture, load_params
from .training import TrainConfig, TrainingAborted, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class CliUsageError(Exception):
    pass


def _bool_key(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


# key -> (default, parser, help); None default means required
KEYS = {
    "synth": {
        "out": (None, str, "output directory for the fleet CSVs and sidecars"),
        "kind": ("wind", str, "fleet kind: wind or solar"),
        "sites": (4, int, "number of sites"),
        "days": (400, int, "days of hourly history to synthesize"),
        "seed": (7, int, "RNG seed; same seed gives byte-identical files"),
        "rho": (0.9, float, "cross-site innovation correlation"),
    },
    "train": {
        "data": (None, str, "fleet directory from `synth` or matching real CSVs"),
        "out": (None, str, "run directory for checkpoint, log, resolved config"),
        "horizon": (24, int, "window length in steps (one scenario block)"),
        "latent-dim": (32, int, "generator noise dimension"),
        "dropout-p": (0.25, float, "critic dropout probability (feeds the "
                                   "consistency term's perturbed passes)"),
        "iterations": (2000, int, "generator iterations"),
        "batch-size": (32, int, "minibatch size"),
        "n-critic": (5, int, "critic updates per generator update"),
        "lambda-gp": (10.0, float, "weight of the gradient penalty"),
        "lambda-ct": (2.0, float, "weight of the consistency term"),
        "ct-margin": (0.0, float, "consistency hinge margin"),
        "lr": (1e-4, float, "Adam learning rate"),
        "beta1": (0.5, float, "Adam first-moment decay"),
        "beta2": (0.9, float, "Adam second-moment decay"),
        "log-every": (100, int, "checkpoint/log stride in generator iterations"),
        "train-fraction": (0.8, float, "share of windows assigned to training"),
        "seed": (0, int, "RNG seed for init, batching, noise, and dropout"),
        "wall-clock": (True, _bool_key, "record wall time in the log's seconds "
                                        "column; disable for byte-identical logs"),
        "resume": (False, _bool_key, "continue from <out>/checkpoint.bin"),
    },
    "forecast": {
        "checkpoint": (None, str, "trained model checkpoint"),
        "out": (None, str, "output directory for scenario CSVs and manifest"),
        "forecast": ("", str, "point-forecast CSV (sites as rows, ISO header)"),
        "baseline": ("", str, "persistence baseline instead of a forecast "
                              "file: 'last' or 'diurnal'"),
        "history": ("", str, "fleet directory providing the baseline history"),
        "alpha": (2.0, float, "interval width factor; bounds are "
                              "[p/alpha, alpha*p] capped to [0, 1]"),
        "n": (50, int, "number of scenarios (independent restarts)"),
        "seed": (3, int, "RNG seed for restarts"),
        "eps-floor": (0.02, float, "minimum half-width forced on degenerate "
                                   "interval cells (e.g. solar night)"),
        "init-steps": (60, int, "stage-one descent steps"),
        "main-steps": (80, int, "stage-two steps per barrier stage"),
    },
    "evaluate": {
        "scenarios": (None, str, "scenario directory from `forecast`"),
        "reference": (None, str, "fleet directory with the reference data"),
        "out": (None, str, "output directory for the metric report"),
        "horizon": (24, int, "window length for reference statistics"),
        "realization": ("", str, "actual-outcome CSV for coverage (optional)"),
        "max-lag": (6, int, "autocorrelation lags to report"),
    },
}


def load_config_file(path, command: str) -> dict:
    """Parse a line-oriented key=value file; unknown keys are rejected."""
    known = KEYS[command]
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise CliUsageError(f"{path} line {lineno}: expected key=value")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in known:
            raise CliUsageError(f"{path} line {lineno}: unknown key {key!r} "
                                f"for command {command!r}")
        default, parser, _ = known[key]
        try:
            values[key] = parser(raw.strip())
        except ValueError as exc:
            raise CliUsageError(f"{path} line {lineno}: {exc}") from None
    return values


def resolve_config(command: str, flag_values: dict, config_path) -> tuple[dict, dict]:
    """Merge flags > file > defaults; returns (values, sources)."""
    file_values = load_config_file(config_path, command) if config_path else {}
    values, sources = {}, {}
    for key, (default, _parser, _help) in KEYS[command].items():
        if flag_values.get(key) is not None:
            values[key], sources[key] = flag_values[key], "flag"
        elif key in file_values:
            values[key], sources[key] = file_values[key], "file"
        else:
            values[key], sources[key] = default, "default"
        if values[key] is None:
            raise CliUsageError(f"missing required option --{key}")
    return values, sources


def write_resolved_config(values: dict, sources: dict, out_dir) -> None:
    lines = [f"{key}={values[key]}  # source: {sources[key]}"
             for key in sorted(values)]
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "resolved_config.txt").write_text("\n".join(lines) + "\n")


class _RunLock:
    """One process per run directory; stale locks abort with a clear message."""

    def __init__(self, run_dir):
        self.path = Path(run_dir) / ".lock"
        self.fd = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise DataError(
                f"{self.path.parent} is locked by another run; remove "
                f"{self.path} if that run is dead") from None
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliUsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scengen",
                     description="Train a scenario-forecasting GAN on multi-site "
                                 "generation data and produce constrained scenario "
                                 "sets from point forecasts.")
    sub = parser.add_subparsers(dest="command", required=True)
    descriptions = {
        "synth": "write a synthetic wind or solar fleet with known ground truth",
        "train": "train the generator/critic pair on windowed fleet data",
        "forecast": "optimize latent vectors into N interval-feasible scenarios",
        "evaluate": "score a scenario set against reference data",
    }
    for command, keys in KEYS.items():
        p = sub.add_parser(command, description=descriptions[command])
        p.add_argument("--config", default=None,
                       help="key=value config file (flags override it)")
        for key, (default, parser_fn, help_text) in keys.items():
            p.add_argument(f"--{key}", default=None, type=parser_fn,
                           help=f"{help_text} (default: {default})")
    return parser


def cmd_synth(cfg: dict) -> int:
    if cfg["sites"] < 1:
        raise CliUsageError("--sites must be at least 1")
    if cfg["days"] < 1:
        raise CliUsageError("--days must be at least 1")
    if cfg["kind"] not in ("wind", "solar"):
        raise CliUsageError(f"unknown kind {cfg['kind']!r}")
    fleet = data_mod.synth_fleet(cfg["kind"], cfg["sites"], cfg["days"] * 24,
                                 seed=cfg["seed"],
                                 params=data_mod.SynthParams(rho=cfg["rho"]))
    data_mod.write_fleet(fleet.series, cfg["out"], truth=fleet.truth)
    print(f"wrote {len(fleet.series)} site CSVs + sidecars to {cfg['out']}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    series = data_mod.load_fleet(cfg["data"])
    dataset = data_mod.window_dataset(series, horizon=cfg["horizon"],
                                      train_fraction=cfg["train-fraction"],
                                      seed=cfg["seed"])
    out_dir = Path(cfg["out"])
    tcfg = TrainConfig(
        lambda_gp=cfg["lambda-gp"], lambda_ct=cfg["lambda-ct"],
        ct_margin=cfg["ct-margin"], batch_size=cfg["batch-size"],
        n_critic=cfg["n-critic"], learning_rate=cfg["lr"],
        beta1=cfg["beta1"], beta2=cfg["beta2"], iterations=cfg["iterations"],
        log_every=cfg["log-every"], seed=cfg["seed"], wall_clock=cfg["wall-clock"])
    resume_from = None
    if cfg["resume"]:
        resume_from = out_dir / "checkpoint.bin"
        if not resume_from.exists():
            raise DataError(f"--resume set but {resume_from} does not exist")
        arch = None
    else:
        arch = default_architecture(sites=len(series), horizon=cfg["horizon"],
                                    latent_dim=cfg["latent-dim"],
                                    dropout_p=cfg["dropout-p"])
        # pre-flight: the windowed data must match the model block size
        sample = dataset.train_windows()
        if sample.shape[1:] != (arch.sites, arch.horizon):
            raise DataError(
                f"data windows {sample.shape[1:]} do not match the model "
                f"({arch.sites}, {arch.horizon})")
    train(dataset, tcfg, arch=arch, out_dir=out_dir, resume_from=resume_from,
          progress=print)
    print(f"training complete; checkpoint and log in {out_dir}")
    return EXIT_OK


def cmd_forecast(cfg: dict) -> int:
    if cfg["alpha"] <= 1.0:
        raise CliUsageError(f"--alpha must exceed 1 (got {cfg['alpha']})")
    if cfg["n"] < 1:
        raise CliUsageError("--n must be at least 1")
    params = load_params(cfg["checkpoint"])
    if cfg["forecast"] and cfg["baseline"]:
        raise CliUsageError("give either --forecast or --baseline, not both")
    if cfg["forecast"]:
        point = fc.read_point_forecast(cfg["forecast"])
    elif cfg["baseline"]:
        if not cfg["history"]:
            raise CliUsageError("--baseline needs --history for the source data")
        series = data_mod.load_fleet(cfg["history"])
        point = data_mod.persistence_forecast(series, params.config.horizon,
                                              method=cfg["baseline"])
    else:
        raise CliUsageError("give a --forecast file or a --baseline method")
    arch = params.config
    if point.values.shape != (arch.sites, arch.horizon):
        raise DataError(
            f"point forecast {point.values.shape} does not match the model "
            f"({arch.sites}, {arch.horizon})")
    opt_cfg = fc.LatentOptConfig(init_steps=cfg["init-steps"],
                                 main_steps=cfg["main-steps"])
    scenario_set = fc.forecast_scenarios(params, point, cfg["alpha"], cfg["n"],
                                         cfg=opt_cfg, seed=cfg["seed"],
                                         eps_floor=cfg["eps-floor"], progress=print)
    fc.write_scenario_set(scenario_set, cfg["out"], point)
    if scenario_set.shortfall:
        print(f"WARNING: {scenario_set.shortfall} of {cfg['n']} restarts never "
              f"reached the interval interior", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"wrote {cfg['n']} scenarios + manifest to {cfg['out']}")
    return EXIT_OK


def cmd_evaluate(cfg: dict) -> int:
    scenarios, manifest = fc.read_scenario_set(cfg["scenarios"])
    series = data_mod.load_fleet(cfg["reference"])
    dataset = data_mod.window_dataset(series, horizon=cfg["horizon"])
    realization = None
    if cfg["realization"]:
        realization = fc.read_point_forecast(cfg["realization"]).values
    truth_corr = None
    truth_path = Path(cfg["reference"]) / data_mod.TRUTH_SIDECAR
    if truth_path.exists():
        truth_corr = np.array(json.loads(truth_path.read_text())["correlation"])
    report = metrics_mod.evaluate_scenarios(
        scenarios, dataset.windows, site_ids=manifest["site_ids"],
        max_lag=cfg["max-lag"], realization=realization,
        reference_correlation=truth_corr)
    metrics_mod.write_report(report, cfg["out"])
    print(f"metric report in {cfg['out']}")
    return EXIT_OK


_HANDLERS = {"synth": cmd_synth, "train": cmd_train,
             "forecast": cmd_forecast, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        command = args.command
        flag_values = {key: getattr(args, key.replace("-", "_"))
                       for key in KEYS[command]}
        values, sources = resolve_config(command, flag_values, args.config)
        with _RunLock(values["out"]):
            write_resolved_config(values, sources, values["out"])
            return _HANDLERS[command](values)
    except CliUsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, UsageError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFaultError, TrainingAborted) as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
