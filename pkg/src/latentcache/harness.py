"""Hourly train/test caching simulation.

For every test period the predictors score videos from history strictly
before the period start, the top-k videos are cached, and the hit rate is the
share of the period's requests that hit the cache.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence, TextIO

import numpy as np

from . import scoring
from .netinfer import InferenceConfig, TransmissionGraph, infer_graph, inference_schedule, valid_inference_cascades
from .powerlaw import DEFAULT_RESOLUTION, FitError, PowerLawParams, fit, mean_interarrival
from .scoring import BASELINE, COMBINED, INTER, METHODS, SOCIAL, VIRAL, BaselineConfig, CacheDecision, ViralnessConfig
from .trace import HOUR, Cascade, Trace, WindowSpec, cascades, window

log = logging.getLogger(__name__)

DEFAULT_K = (10, 25, 50, 100, 250, 500, 1000)
GRAPH_METHODS = (SOCIAL, COMBINED)
FIT_METHODS = (INTER, SOCIAL, COMBINED)


class ReportError(KeyError):
    """Raised when a report lacks a method or cache size."""


@dataclass(frozen=True)
class ExperimentConfig:
    train_span: tuple[float, float]
    test_span: tuple[float, float]
    period: float = HOUR
    k_values: tuple[int, ...] = DEFAULT_K
    methods: tuple[str, ...] = METHODS
    connected_only: bool = False
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    viral: ViralnessConfig = field(default_factory=ViralnessConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    social_window: float = 16 * HOUR
    beta: float = 0.7
    eq6_mode: bool = False
    min_fit_views: int = 5
    resolution: float = DEFAULT_RESOLUTION
    workers: int = 1

    def __post_init__(self) -> None:
        (a, b), (c, d) = self.train_span, self.test_span
        if not (a < b and c < d):
            raise ValueError("spans must be non-empty")
        if b != c:
            raise ValueError("train span must end where the test span starts")
        if not self.period > 0:
            raise ValueError("period must be positive")
        if not self.k_values or any(k <= 0 for k in self.k_values):
            raise ValueError("k_values must be non-empty and positive")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")

    @classmethod
    def split(cls, origin: float, train_hours: float = 60, test_hours: float = 60, **kw) -> "ExperimentConfig":
        mid = origin + train_hours * HOUR
        return cls((origin, mid), (mid, mid + test_hours * HOUR), **kw)


@dataclass
class HitRateReport:
    """Per-period hit rates for each (method, k).

    ``series[(method, k)]`` lists ``(period_start, hit_rate)`` for periods that
    had at least one request.  ``audit`` records, for every period and data
    source, the latest timestamp that fed the prediction.
    """

    k_values: tuple[int, ...]
    series: dict[tuple[str, int], list[tuple[float, float]]] = field(default_factory=dict)
    skipped: dict[str, str] = field(default_factory=dict)
    powerlaw: PowerLawParams | None = None
    audit: list[tuple[float, str, float]] = field(default_factory=list)
    graphs: dict[float, TransmissionGraph] = field(default_factory=dict)

    @property
    def methods(self) -> list[str]:
        seen = []
        for m, _ in self.series:
            if m not in seen:
                seen.append(m)
        return seen

    def average(self, method: str, k: int) -> float:
        try:
            rates = [h for _, h in self.series[(method, k)]]
        except KeyError:
            raise ReportError(f"no results for method {method!r} at k={k}") from None
        return math.fsum(rates) / len(rates) if rates else float("nan")

    def mean_over_k(self, method: str, k_values: Sequence[int] | None = None) -> float:
        ks = self.k_values if k_values is None else k_values
        return float(np.mean([self.average(method, k) for k in ks]))

    def write_periods(self, out: TextIO, header: Iterable[str] = ()) -> None:
        for line in header:
            out.write(f"# {line}\n")
        w = csv.writer(out, lineterminator="\n")
        w.writerow(("method", "k", "period_start", "hit_rate"))
        for (m, k), rows in self.series.items():
            for t, h in rows:
                w.writerow((m, k, repr(t), repr(h)))

    def write_summary(self, out: TextIO, header: Iterable[str] = ()) -> None:
        for line in header:
            out.write(f"# {line}\n")
        w = csv.writer(out, lineterminator="\n")
        w.writerow(("method", "k", "avg_hit_rate"))
        for m, k in self.series:
            w.writerow((m, k, repr(self.average(m, k))))

    def write_curves(self, out: TextIO, header: Iterable[str] = ()) -> None:
        """Whitespace-separated hit rate vs k, one column per method (gnuplot)."""
        for line in header:
            out.write(f"# {line}\n")
        methods = self.methods
        out.write("# k " + " ".join(methods) + "\n")
        for k in self.k_values:
            out.write(" ".join([str(k), *(f"{self.average(m, k):.6f}" for m in methods)]) + "\n")

    @classmethod
    def read_periods(cls, stream: TextIO) -> "HitRateReport":
        rows = csv.reader(line for line in stream if not line.startswith("#"))
        next(rows, None)
        series: dict[tuple[str, int], list] = {}
        ks: list[int] = []
        for m, k, t, h in rows:
            k = int(k)
            if k not in ks:
                ks.append(k)
            series.setdefault((m, k), []).append((float(t), float(h)))
        return cls(tuple(ks), series)


def hit_rate(decision: CacheDecision, actual: Trace) -> float | None:
    """Fraction of the period's requests for cached videos; ``None`` if idle."""
    if len(actual) == 0:
        return None
    cached = np.zeros(max(actual.n_videos, max(decision.videos, default=-1) + 1), dtype=bool)
    cached[list(decision.videos)] = True
    return float(np.count_nonzero(cached[actual.videos])) / len(actual)


def improvement(report: HitRateReport, method_a: str, method_b: str,
                k_values: Sequence[int] | None = None) -> float:
    """Percentage gain of ``method_b`` over ``method_a``, averaged over k.

    ``k_values`` restricts the average, e.g. to small caches.
    """
    a = report.mean_over_k(method_a, k_values)
    b = report.mean_over_k(method_b, k_values)
    return 100.0 * (b - a) / a


def connected_subset(trace: Trace, valid: Sequence[Cascade] | None = None, min_unique_users: int = 3) -> Trace:
    """Every request of the videos whose cascades reach enough distinct users."""
    if valid is None:
        valid = [c for c in cascades(trace).values() if c.n_unique_users() >= min_unique_users]
    vids = np.array(sorted({c.video for c in valid}), dtype=np.int64)
    return trace.take(np.isin(trace.videos, vids))


def fit_incubation(history: Trace, min_views: int = 5, resolution: float = DEFAULT_RESOLUTION) -> PowerLawParams:
    """Fit the power law to per-cascade mean inter-arrival times."""
    means = [mean_interarrival(c, resolution) for c in cascades(history).values() if len(c) >= min_views]
    return fit(means)


def _latest(view: Trace) -> float:
    return view.end if len(view) else -math.inf


def learn_graphs(trace: Trace, cfg: ExperimentConfig, pl: PowerLawParams) -> dict[float, TransmissionGraph | None]:
    """One graph per relearn instant, each from its own history window."""
    icfg = replace(cfg.inference, incubation=pl, resolution=cfg.resolution)
    out: dict[float, TransmissionGraph | None] = {}
    for instant, spec in inference_schedule(*cfg.test_span, icfg):
        valid = valid_inference_cascades(window(trace, spec), icfg)
        if not valid:
            log.warning("no valid cascades for inference at t=%s", instant)
            out[instant] = None
            continue
        out[instant] = infer_graph(valid, trace.n_users, icfg, workers=cfg.workers, relearn_time=instant)
    return out


def run_experiment(trace: Trace, cfg: ExperimentConfig) -> HitRateReport:
    if cfg.connected_only:
        trace = connected_subset(trace, min_unique_users=cfg.inference.min_unique_users)
    report = HitRateReport(tuple(cfg.k_values))
    test_start, test_end = cfg.test_span

    pl = None
    fit_latest = -math.inf
    if any(m in FIT_METHODS for m in cfg.methods):
        train = trace.between(*cfg.train_span)
        fit_latest = _latest(train)
        try:
            pl = fit_incubation(train, cfg.min_fit_views, cfg.resolution)
        except FitError as exc:
            for m in FIT_METHODS:
                if m in cfg.methods:
                    report.skipped[m] = f"power-law fit failed: {exc}"
        report.powerlaw = pl

    graphs: dict[float, TransmissionGraph | None] = {}
    if pl is not None and any(m in GRAPH_METHODS for m in cfg.methods):
        graphs = learn_graphs(trace, cfg, pl)
        report.graphs = {t: g for t, g in graphs.items() if g is not None}
    instants = sorted(graphs)

    active = [m for m in cfg.methods if m not in report.skipped]
    for m in active:
        for k in cfg.k_values:
            report.series[(m, k)] = []
    graph_missing = defaultdict(int)

    n_periods = math.ceil((test_end - test_start) / cfg.period - 1e-12)
    for i in range(n_periods):
        t = test_start + i * cfg.period
        actual = trace.between(t, min(t + cfg.period, test_end))
        if len(actual) == 0:
            continue
        base_view = window(trace, WindowSpec(t, cfg.baseline.window))
        social_view = window(trace, WindowSpec(t, cfg.social_window))
        base = scoring.crf_score(base_view, cfg.baseline, t)
        report.audit.append((t, "consensus_window", _latest(base_view)))
        if pl is not None:
            report.audit.append((t, "powerlaw_fit", fit_latest))

        graph = None
        if instants:
            current = max((s for s in instants if s <= t), default=None)
            graph = graphs.get(current) if current is not None else None
            report.audit.append((t, "graph_instant", current if current is not None else -math.inf))
            if graph is not None:
                spec = WindowSpec(current, cfg.inference.history_width)
                report.audit.append((t, "graph_history", _latest(window(trace, spec))))

        for m in active:
            if m == BASELINE:
                decisions = [scoring.top_k(base, k) for k in cfg.k_values]
            elif m == VIRAL:
                sv = scoring.viral_score(base_view, cfg.viral, t, cfg.resolution)
                decisions = [scoring.top_k(sv, k, fallback=base) for k in cfg.k_values]
            elif m == INTER:
                sv = scoring.interarrival_score(base_view, pl, cfg.baseline, t, cfg.resolution)
                decisions = [scoring.top_k(sv, k) for k in cfg.k_values]
            else:
                if graph is None:
                    graph_missing[m] += 1
                    continue
                report.audit.append((t, "social_window", _latest(social_view)))
                if m == SOCIAL:
                    sv = scoring.diffusion_score(social_view, graph, pl, t, cfg.resolution)
                else:
                    universe = np.unique(trace.users[: np.searchsorted(trace.times, t, side="left")])
                    sv = scoring.combined_score(
                        base_view, graph, pl, cfg.baseline, t, cfg.beta, cfg.eq6_mode,
                        social_view=social_view, universe=universe, resolution=cfg.resolution,
                    )
                decisions = [scoring.top_k(sv, k) for k in cfg.k_values]
            for k, d in zip(cfg.k_values, decisions):
                report.series[(m, k)].append((t, hit_rate(d, actual)))

    for m, n in graph_missing.items():
        report.skipped[m] = f"no transmission graph for {n} period(s)"
        if all(not report.series[(m, k)] for k in cfg.k_values):
            for k in cfg.k_values:
                del report.series[(m, k)]
    return report
