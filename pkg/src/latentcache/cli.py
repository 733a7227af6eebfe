"""Command-line entry point: generate, fit, infer, simulate, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import harness
from .harness import ExperimentConfig, HitRateReport
from .netinfer import InferenceConfig, SolverConfig, TransmissionGraph, infer_graph, inference_schedule, valid_inference_cascades
from .powerlaw import FitError, PowerLawParams
from .scoring import METHODS, BaselineConfig, ViralnessConfig
from .synthgen import PlantedWorld, generate, random_graph
from .trace import CANONICAL, FORMATS, HOUR, TraceParseError, dump, ingest, window

log = logging.getLogger("latentcache")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def _digest(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunConfig:
    """Flat, JSON-serializable description of a simulation run.

    Durations are in hours; ``workers`` does not affect results and is left
    out of the hash.
    """

    trace: str = ""
    format: str = CANONICAL
    out_dir: str = "."
    train_hours: float = 60.0
    test_hours: float = 60.0
    period_hours: float = 1.0
    k_values: list[int] = field(default_factory=lambda: list(harness.DEFAULT_K))
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    connected_only: bool = False
    gamma: float = 0.1
    baseline_window_hours: float = 28.0
    zipf_exponent: float = 1.0
    f1: float = 0.3
    f2: float = 0.8
    f3: float = 1.0
    min_views: int = 5
    min_span_hours: float = 3.0
    min_fit_views: int = 5
    sparsity: int = 300
    history_hours: float = 60.0
    relearn_hours: float = 10.0
    min_unique_users: int = 3
    step: float = 0.1
    max_iter: int = 500
    tol: float = 1e-8
    social_window_hours: float = 16.0
    beta: float = 0.7
    eq6_mode: bool = False
    resolution: float = 1.0
    rng_seed: int = 0
    workers: int = 1

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        data = json.loads(text)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def digest(self) -> str:
        payload = dataclasses.asdict(self)
        payload.pop("workers")
        return _digest(payload)

    def inference(self, incubation: PowerLawParams | None = None) -> InferenceConfig:
        return InferenceConfig(
            sparsity=self.sparsity,
            history_width=self.history_hours * HOUR,
            relearn_period=self.relearn_hours * HOUR,
            min_unique_users=self.min_unique_users,
            incubation=incubation,
            solver=SolverConfig(self.step, self.max_iter, self.tol),
            resolution=self.resolution,
        )

    def experiment(self, origin: float) -> ExperimentConfig:
        return ExperimentConfig.split(
            origin,
            self.train_hours,
            self.test_hours,
            period=self.period_hours * HOUR,
            k_values=tuple(self.k_values),
            methods=tuple(self.methods),
            connected_only=self.connected_only,
            baseline=BaselineConfig(self.gamma, self.baseline_window_hours * HOUR, self.zipf_exponent),
            viral=ViralnessConfig(self.f1, self.f2, self.f3, self.min_views, self.min_span_hours * HOUR),
            inference=self.inference(),
            social_window=self.social_window_hours * HOUR,
            beta=self.beta,
            eq6_mode=self.eq6_mode,
            min_fit_views=self.min_fit_views,
            resolution=self.resolution,
            workers=self.workers,
        )


def _load_trace(path: str, fmt: str):
    if fmt not in FORMATS:
        raise ConfigError(f"unknown trace format {fmt!r}")
    if not Path(path).is_file():
        raise ConfigError(f"trace file not found: {path}")
    return ingest(path, fmt)


def _run_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            cfg = RunConfig.from_json(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    for f in dataclasses.fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            setattr(cfg, f.name, val)
    return cfg


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_fit(args) -> int:
    cfg = _run_config(args)
    tr = _load_trace(cfg.trace, cfg.format)
    try:
        params = harness.fit_incubation(tr, cfg.min_fit_views, cfg.resolution)
    except FitError as exc:
        raise DataError(f"no power law fitted: {exc}") from None
    payload = {"trace": Path(cfg.trace).name, "min_fit_views": cfg.min_fit_views, "resolution": cfg.resolution}
    Path(args.out).write_text(f"# config_hash={_digest(payload)}\n{params.to_record()}\n")
    print(params.to_record())
    return EXIT_OK


def _read_params(path: str) -> PowerLawParams:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ConfigError(f"empty parameter file {path}")
    return PowerLawParams.from_record(lines[0])


def cmd_infer(args) -> int:
    cfg = _run_config(args)
    tr = _load_trace(cfg.trace, cfg.format)
    pl = _read_params(args.params)
    icfg = cfg.inference(pl)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = tr.origin + (cfg.train_hours if args.start_hours is None else args.start_hours) * HOUR
    end = start + cfg.test_hours * HOUR
    digest = cfg.digest()
    for i, (instant, spec) in enumerate(inference_schedule(start, end, icfg)):
        valid = valid_inference_cascades(window(tr, spec), icfg)
        if not valid:
            log.warning("no valid cascades before t=%s; writing an empty graph", instant)
        graph = infer_graph(valid, tr.n_users, icfg, workers=cfg.workers, relearn_time=instant)
        graph.config_hash = digest
        with open(out / f"graph_{i:03d}.csv", "w") as fh:
            graph.dump(fh, tr.user_keys)
        print(f"graph_{i:03d}.csv t={instant!r} edges={graph.nnz}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _run_config(args)
    tr = _load_trace(cfg.trace, cfg.format)
    try:
        exp = cfg.experiment(tr.origin)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    report = harness.run_experiment(tr, exp)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(cfg.to_json() + "\n")
    header = [f"config_hash={cfg.digest()}"]
    if report.powerlaw is not None:
        header.append(f"powerlaw {report.powerlaw.to_record()}")
    with open(out / "periods.csv", "w") as fh:
        report.write_periods(fh, header)
    with open(out / "summary.csv", "w") as fh:
        report.write_summary(fh, header)
    if report.series:
        with open(out / "curves.dat", "w") as fh:
            report.write_curves(fh, header)
    for m, why in report.skipped.items():
        print(f"skipped {m}: {why}", file=sys.stderr)
    _print_summary(report)
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _run_config(args)
    rng = np.random.default_rng(cfg.rng_seed)
    graph = random_graph(args.n_users, args.mean_degree, (args.p_low, args.p_high), rng)
    world = PlantedWorld(graph, PowerLawParams(args.alpha, args.t_min), args.n_videos,
                         args.seed_rate, args.noise_rate, cfg.rng_seed)
    tr = generate(world, args.hours * HOUR)
    payload = {k: getattr(args, k) for k in
               ("n_users", "n_videos", "mean_degree", "p_low", "p_high", "alpha", "t_min",
                "seed_rate", "noise_rate", "hours")}
    payload["rng_seed"] = cfg.rng_seed
    digest = _digest(payload)
    with open(args.out_trace, "w") as fh:
        dump(tr, fh, [f"config_hash={digest}"])
    graph.config_hash = digest
    with open(args.out_graph, "w") as fh:
        graph.dump(fh)
    print(f"{len(tr)} requests, {graph.nnz} edges")
    return EXIT_OK


def _print_summary(report: HitRateReport) -> None:
    if not report.series:
        print("no periods with requests; empty report")
        return
    methods = report.methods
    print("k".rjust(6) + "".join(m.rjust(11) for m in methods))
    for k in report.k_values:
        print(str(k).rjust(6) + "".join(f"{report.average(m, k):11.4f}" for m in methods))
    print("mean".rjust(6) + "".join(f"{report.mean_over_k(m):11.4f}" for m in methods))
    if "baseline" in methods:
        for m in methods:
            if m != "baseline":
                print(f"improvement baseline -> {m}: {harness.improvement(report, 'baseline', m):+.2f}%")


def cmd_report(args) -> int:
    with open(args.periods) as fh:
        report = HitRateReport.read_periods(fh)
    _print_summary(report)
    for pair in args.compare or []:
        a, _, b = pair.partition(":")
        try:
            print(f"improvement {a} -> {b}: {harness.improvement(report, a, b):+.2f}%")
        except harness.ReportError as exc:
            raise DataError(str(exc)) from None
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser, names: list[str]) -> None:
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    defaults = RunConfig()
    for name in names:
        flag = "--" + name.replace("_", "-")
        kind = types[name]
        default = getattr(defaults, name)
        if isinstance(default, bool):
            p.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None)
        elif isinstance(default, list):
            elem = int if name == "k_values" else str
            p.add_argument(flag, dest=name, type=elem, nargs="+", default=None)
        else:
            p.add_argument(flag, dest=name, type=type(default), default=None, help=f"(default {default!r}; {kind})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentcache", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit inter-arrival power law from a trace")
    p.add_argument("trace")
    p.add_argument("--out", required=True)
    _add_run_flags(p, ["format", "min_fit_views", "resolution"])
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("infer", help="infer a transmission graph per relearn instant")
    p.add_argument("trace")
    p.add_argument("--params", required=True, help="power-law record written by 'fit'")
    p.add_argument("--start-hours", type=float, default=None,
                   help="first relearn instant, hours after trace origin (default: train_hours)")
    p.add_argument("--config")
    _add_run_flags(p, ["format", "out_dir", "train_hours", "test_hours", "sparsity", "history_hours",
                       "relearn_hours", "min_unique_users", "step", "max_iter", "tol", "resolution", "workers"])
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("simulate", help="run the hourly caching experiment")
    p.add_argument("trace", nargs="?")
    p.add_argument("--config")
    _add_run_flags(p, [f.name for f in dataclasses.fields(RunConfig) if f.name != "trace"])
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("generate", help="write a synthetic trace and its ground-truth graph")
    p.add_argument("--out-trace", required=True)
    p.add_argument("--out-graph", required=True)
    p.add_argument("--n-users", type=int, default=100)
    p.add_argument("--n-videos", type=int, default=500)
    p.add_argument("--mean-degree", type=float, default=1.5)
    p.add_argument("--p-low", type=float, default=0.3)
    p.add_argument("--p-high", type=float, default=0.8)
    p.add_argument("--alpha", type=float, default=2.5)
    p.add_argument("--t-min", type=float, default=1800.0, help="seconds")
    p.add_argument("--seed-rate", type=float, default=0.0)
    p.add_argument("--noise-rate", type=float, default=0.3)
    p.add_argument("--hours", type=float, default=120.0)
    _add_run_flags(p, ["rng_seed"])
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("report", help="summarize a periods.csv file")
    p.add_argument("periods")
    p.add_argument("--compare", nargs="*", metavar="A:B", help="method pairs for %% improvement")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TraceParseError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
