"""Command-line harness: read an INI config, simulate data, run studies, write metrics.

Subcommands ``simulate``, ``fit`` (one-shot methods), ``update`` (updating
methods), ``evaluate`` (every configured method) and ``lanes-prep``. Exit
codes: 0 on success, 1 on a runtime failure, 2 on an invalid configuration.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import re
import sys
from importlib import metadata as importlib_metadata
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from joblib import Parallel, delayed

from . import engines, experiments, lanes, mcmc, models, sga
from .evaluate import ScoreTable, summary_markdown
from .target import ScheduleError

log = logging.getLogger("uvb")

EXPERIMENTS = ("ar3", "mixture", "schools", "dpm", "lanes-prep")
METHODS = {
    "ar3": ("svb", "uvb", "uvb-is", "mcmc"),
    "mixture": ("svb", "uvb", "uvb-is"),
    "schools": ("svb", "uvb", "uvb-is"),
    "dpm": ("uvb", "svb", "mfvb", "independent"),
}
ONE_SHOT = ("svb", "mcmc", "mfvb", "independent")
UPDATING = ("uvb", "uvb-is")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending line and field."""


class Config:
    """INI text with a record of the line each key was read from."""

    def __init__(self, text: str, source: str = "<config>"):
        self.source = source
        self.parser = configparser.ConfigParser(interpolation=None)
        try:
            self.parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(str(exc).replace("\n", " ")) from None
        self.lines: Dict[tuple, int] = {}
        section = None
        for no, line in enumerate(text.splitlines(), start=1):
            m = re.match(r"\s*\[([^\]]+)\]", line)
            if m:
                section = m.group(1).strip()
                continue
            m = re.match(r"\s*([^#;=:\s][^=:]*?)\s*[=:]", line)
            if m and section is not None:
                self.lines[(section, m.group(1).strip().lower())] = no

    @classmethod
    def read(cls, path) -> "Config":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        return cls(text, str(path))

    def where(self, section, key) -> str:
        no = self.lines.get((section, key.lower()))
        return f"{self.source}:{no}" if no else self.source

    def error(self, section, key, msg) -> ConfigError:
        return ConfigError(f"{self.where(section, key)}: [{section}] {key}: {msg}")

    def raw(self, section, key) -> Optional[str]:
        if self.parser.has_option(section, key):
            return self.parser.get(section, key)
        return None

    def get(self, section, key, kind, default):
        text = self.raw(section, key)
        if text is None:
            return default
        try:
            if kind is bool:
                return self.parser.getboolean(section, key)
            return kind(text.strip())
        except ValueError:
            raise self.error(section, key, f"expected {kind.__name__}, got {text!r}") from None

    def get_list(self, section, key, kind, default):
        text = self.raw(section, key)
        if text is None:
            return tuple(default)
        try:
            return tuple(kind(x.strip()) for x in text.split(",") if x.strip())
        except ValueError:
            raise self.error(section, key, f"expected a list of {kind.__name__}, got {text!r}") from None

    def get_schedule(self, section, key, default):
        text = self.raw(section, key)
        if text is None:
            return tuple(default)
        text = text.strip()
        try:
            if ":" in text:
                lo, hi, step = (int(x) for x in text.split(":"))
                b = tuple(range(lo, hi + 1, step))
            else:
                b = tuple(int(x) for x in text.split(",") if x.strip())
            return engines.UpdateSchedule(b).boundaries
        except (ValueError, ScheduleError) as exc:
            raise self.error(section, key, f"invalid schedule {text!r} ({exc})") from None


@dataclasses.dataclass
class ExperimentConfig:
    name: str
    methods: tuple
    replications: int
    seed: int
    out: Path
    settings: object
    workers: int = 1
    lanes: dict = dataclasses.field(default_factory=dict)

    def metadata(self, command: str) -> dict:
        def plain(x):
            if dataclasses.is_dataclass(x):
                return {k: plain(v) for k, v in dataclasses.asdict(x).items()}
            if isinstance(x, dict):
                return {str(k): plain(v) for k, v in x.items()}
            if isinstance(x, (tuple, list)):
                return [plain(v) for v in x]
            if isinstance(x, (str, int, float, bool)) or x is None:
                return x
            return str(x)

        try:
            version = importlib_metadata.version("artifact")
        except importlib_metadata.PackageNotFoundError:
            version = "unknown"
        return {
            "command": command,
            "experiment": self.name,
            "methods": list(self.methods),
            "replications": self.replications,
            "seed": self.seed,
            "settings": plain(self.settings),
            "lanes": plain(self.lanes),
            "version": version,
        }


def _stop(cfg: Config) -> sga.StopRule:
    d = sga.StopRule()
    try:
        return sga.StopRule(
            tolerance=cfg.get("sga", "tolerance", float, d.tolerance),
            smoothing_window=cfg.get("sga", "smoothing_window", int, d.smoothing_window),
            max_iterations=cfg.get("sga", "max_iterations", int, d.max_iterations),
            relative=cfg.get("sga", "relative", bool, d.relative),
            patience=cfg.get("sga", "patience", int, d.patience) or None,
        )
    except ValueError as exc:
        raise ConfigError(f"{cfg.source}: [sga]: {exc}") from None


def _chain(cfg: Config, default: mcmc.ChainConfig) -> mcmc.ChainConfig:
    try:
        return mcmc.ChainConfig(
            iterations=cfg.get("mcmc", "iterations", int, default.iterations),
            burn_in=cfg.get("mcmc", "burn_in", int, default.burn_in),
            thin=cfg.get("mcmc", "thin", int, default.thin),
        )
    except ValueError as exc:
        raise ConfigError(f"{cfg.source}: [mcmc]: {exc}") from None


def parse_config(cfg: Config, seed=None, out=None, workers=None) -> ExperimentConfig:
    """Validate ``cfg`` and fill every unset field from the study defaults."""
    E = "experiment"
    if not cfg.parser.has_section(E):
        raise ConfigError(f"{cfg.source}: missing [experiment] section")
    name = (cfg.raw(E, "name") or "").strip()
    if name not in EXPERIMENTS:
        raise cfg.error(E, "name", f"unknown experiment {name!r}; expected one of {', '.join(EXPERIMENTS)}")
    R = cfg.get(E, "replications", int, 1)
    if R < 1:
        raise cfg.error(E, "replications", "must be >= 1")
    base_seed = cfg.get(E, "seed", int, 0) if seed is None else int(seed)
    out_dir = Path(out if out is not None else cfg.get(E, "out", str, "results"))
    n_workers = cfg.get(E, "workers", int, 1) if workers is None else int(workers)
    if n_workers < 1:
        raise ConfigError("workers must be >= 1")

    if name == "lanes-prep":
        path = cfg.raw("lanes", "input")
        if path is None:
            raise ConfigError(f"{cfg.source}: [lanes] input is required for lanes-prep")
        T = cfg.get("lanes", "T", int, 100)
        if T < 1:
            raise cfg.error("lanes", "T", "must be >= 1")
        return ExperimentConfig(name, (), R, base_seed, out_dir, None, n_workers,
                                lanes={"input": path.strip(), "T": T})

    allowed = METHODS[name]
    methods = cfg.get_list(E, "methods", str, allowed)
    for m in methods:
        if m not in allowed:
            raise cfg.error(E, "methods", f"unknown method {m!r}; expected some of {', '.join(allowed)}")
    if not methods:
        raise cfg.error(E, "methods", "no methods given")
    stop = _stop(cfg)
    S = cfg.get(E, "S", int, engines.DEFAULT_S)
    S_is = cfg.get(E, "S_is", int, engines.DEFAULT_S_IS)
    for key, val in (("S", S), ("S_is", S_is)):
        if val < 2:
            raise cfg.error(E, key, "must be >= 2")
    Ks = cfg.get_list(E, "K", int, ())
    if any(k < 1 for k in Ks):
        raise cfg.error(E, "K", "components must be >= 1")
    D = "data"

    if name == "ar3":
        d = experiments.AR3Settings()
        T = cfg.get(D, "T", int, d.T)
        schedule = cfg.get_schedule(E, "schedule", d.schedule)
        if schedule[-1] > T:
            raise cfg.error(E, "schedule", f"last boundary {schedule[-1]} beyond T={T}")
        settings = experiments.AR3Settings(
            T=T, schedule=schedule, Ks=Ks or d.Ks, methods=methods, S=S, S_is=S_is,
            predictive_draws=cfg.get(D, "predictive_draws", int, d.predictive_draws),
            chain=_chain(cfg, d.chain), stop=stop)
    elif name == "mixture":
        d = experiments.MixtureSettings()
        T = cfg.get(D, "T", int, d.T)
        schedule = cfg.get_schedule(E, "schedule", d.schedule)
        if schedule[-1] > T:
            raise cfg.error(E, "schedule", f"last boundary {schedule[-1]} beyond T={T}")
        settings = experiments.MixtureSettings(
            N=cfg.get(D, "N", int, d.N), T=T, schedule=schedule, Ks=Ks or d.Ks, methods=methods,
            S=S, S_is=S_is, class_draws=cfg.get(D, "class_draws", int, d.class_draws), stop=stop)
    elif name == "schools":
        d = experiments.SchoolsSettings()
        y = cfg.get_list(D, "y", float, d.y)
        sigma = cfg.get_list(D, "sigma", float, d.sigma)
        if len(y) != len(sigma) or len(y) < 3:
            raise cfg.error(D, "sigma", "y and sigma need equal lengths of at least 3")
        if any(s <= 0 for s in sigma):
            raise cfg.error(D, "sigma", "standard errors must be positive")
        h = d.first_prior
        prior = models.SchoolsHyperprior(
            cfg.get("schools", "mu_sd", float, h.mu_sd),
            cfg.get("schools", "log_tau_mean", float, h.log_tau_mean),
            cfg.get("schools", "log_tau_sd", float, h.log_tau_sd))
        settings = experiments.SchoolsSettings(
            y=y, sigma=sigma, methods=methods, S=S, S_is=S_is,
            draws=cfg.get("schools", "draws", int, d.draws), first_prior=prior, stop=stop,
            chain=_chain(cfg, d.chain))
    else:
        d = experiments.DPMSettings()
        T = cfg.get(D, "T", int, d.T)
        horizon = cfg.get(D, "horizon", int, d.horizon)
        schedule = cfg.get_schedule(E, "schedule", d.schedule)
        if schedule[-1] + horizon > T:
            raise cfg.error(E, "schedule", f"last boundary {schedule[-1]} plus horizon {horizon} beyond T={T}")
        alpha = cfg.get("dpm", "alpha", float, d.alpha)
        if alpha <= 0:
            raise cfg.error("dpm", "alpha", "must be positive")
        settings = experiments.DPMSettings(
            N=cfg.get(D, "N", int, d.N), T=T, schedule=schedule, horizon=horizon, methods=methods,
            S=S, M=cfg.get("dpm", "M", int, d.M), alpha=alpha, stop=stop)
    return ExperimentConfig(name, methods, R, base_seed, out_dir, settings, n_workers)


# ---------------------------------------------------------------------------
# Writers


def _write_panel(path, y):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("unit", "t", "y"))
        T, N = y.shape
        for i in range(N):
            for t in range(T):
                w.writerow((i, t + 1, repr(float(y[t, i]))))


def _write_labels(path, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("unit", "label"))
        for i, k in enumerate(labels):
            w.writerow((i, int(k)))


def _write_ndjson(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True, default=float) + "\n")


def simulate(ec: ExperimentConfig) -> List[Path]:
    """Write each replication's dataset in the ``{unit, t, y}`` panel layout."""
    out = ec.out / "data"
    out.mkdir(parents=True, exist_ok=True)
    s = ec.settings
    written = []
    if ec.name == "schools":
        path = out / "schools.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("school", "y", "sigma"))
            for j, (y, sd) in enumerate(zip(s.y, s.sigma), start=1):
                w.writerow((j, repr(float(y)), repr(float(sd))))
        return [path]
    for rep in range(ec.replications):
        rng = experiments.replication_rng(ec.seed, rep, 0)
        path = out / f"{ec.name}_rep{rep}.csv"
        if ec.name == "ar3":
            params = models.ar3_draw_params(rng)
            y = models.ar3_simulate(params, s.T, experiments.replication_rng(ec.seed, rep, 1))
            _write_panel(path, y[:, None])
        elif ec.name == "mixture":
            y, labels = models.mixture_simulate(s.N, s.T, rng)
            _write_panel(path, y)
            _write_labels(out / f"{ec.name}_rep{rep}_labels.csv", labels)
        else:
            from .dpm import dpm_simulate

            y, labels = dpm_simulate(s.N, s.T, seed=rng)
            _write_panel(path, y)
            _write_labels(out / f"{ec.name}_rep{rep}_labels.csv", labels)
        written.append(path)
    return written


def _replicate(name, rep, seed, settings, oracle=None) -> ScoreTable:
    if name == "ar3":
        return experiments.ar3_replication(rep, seed, settings)
    if name == "mixture":
        return experiments.mixture_replication(rep, seed, settings)
    if name == "schools":
        return experiments.schools_ordering(rep, seed, oracle, settings)
    return experiments.dpm_replication(rep, seed, settings)


def run_experiment(ec: ExperimentConfig, command: str = "evaluate") -> ScoreTable:
    """Run every replication and write metrics, timings, traces, snapshots and metadata."""
    keep = {"fit": ONE_SHOT, "update": UPDATING}.get(command)
    methods = tuple(m for m in ec.methods if keep is None or m in keep)
    if not methods:
        raise ConfigError(f"no configured method is valid for {command!r}")
    settings = dataclasses.replace(ec.settings, methods=methods)
    oracle = None
    if ec.name == "schools":
        oracle = experiments.schools_oracle(settings.y, settings.sigma, settings.chain,
                                            experiments.replication_seed(ec.seed, 0, 99))
    jobs = (delayed(_replicate)(ec.name, rep, ec.seed, settings, oracle) for rep in range(ec.replications))
    parts = Parallel(n_jobs=ec.workers)(jobs) if ec.workers > 1 else [
        _replicate(ec.name, rep, ec.seed, settings, oracle) for rep in range(ec.replications)]
    table = ScoreTable()
    for p in parts:
        table.extend(p)
    table.check()
    ec.out.mkdir(parents=True, exist_ok=True)
    (ec.out / "metrics.csv").write_text(table.to_csv())
    (ec.out / "timing.csv").write_text(table.timing_csv())
    _write_ndjson(ec.out / "traces.ndjson", table.extras.get("traces", []))
    _write_ndjson(ec.out / "snapshots.ndjson", table.extras.get("snapshots", []))
    (ec.out / "summary.md").write_text(summary_markdown(table, f"{ec.name} ({command})"))
    meta = ec.metadata(command)
    meta["methods"] = list(methods)
    (ec.out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return table


def lanes_prep(ec: ExperimentConfig) -> dict:
    """Deviations for every trajectory point plus a ``{unit, t, y}`` panel for the DPM."""
    trajs = lanes.read_trajectories(ec.lanes["input"])
    if not trajs:
        raise ValueError("no usable trajectories")
    centres = lanes.fit_lane_centres(trajs)
    ec.out.mkdir(parents=True, exist_ok=True)
    n = lanes.write_deviations(ec.out / "deviations.csv", trajs, centres)
    panel, ids = lanes.deviation_panel(trajs, centres, ec.lanes["T"])
    _write_panel(ec.out / "panel.csv", panel)
    with open(ec.out / "panel_units.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("unit", "vehicle_id"))
        w.writerows(enumerate(ids))
    meta = ec.metadata("lanes-prep")
    meta.update(points=n, vehicles=len(ids))
    (ec.out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uvb", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (
        ("simulate", "write simulated datasets"),
        ("fit", "run the one-shot methods (svb, mcmc, mfvb, independent)"),
        ("update", "run the updating methods (uvb, uvb-is)"),
        ("evaluate", "run every configured method and write metrics"),
        ("lanes-prep", "convert trajectories to lateral deviations"),
    ):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True, help="INI configuration file")
        s.add_argument("--seed", type=int, default=None, help="override [experiment] seed")
        s.add_argument("--workers", type=int, default=None, help="parallel replications")
        s.add_argument("--out", default=None, help="override [experiment] out")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        ec = parse_config(Config.read(args.config), args.seed, args.out, args.workers)
        if (args.command == "lanes-prep") != (ec.name == "lanes-prep"):
            raise ConfigError(f"{args.config}: experiment {ec.name!r} does not match command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "simulate":
            for path in simulate(ec):
                print(path)
        elif args.command == "lanes-prep":
            lanes_prep(ec)
            print(ec.out / "panel.csv")
        else:
            run_experiment(ec, args.command)
            print(ec.out / "metrics.csv")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 1
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0
