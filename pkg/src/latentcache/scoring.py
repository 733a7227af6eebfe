"""Per-video popularity scores and top-k cache selection.

Five predictors share the :class:`ScoreVector` output type:

``baseline``   combined recency/frequency (CRF) values over a history window
``viral``      views per hour scaled by a growth-trend ratio
``inter``      zipf prior from the baseline ranking times the power-law
               probability of the time elapsed since the last request
``social``     expected new viewers under SI diffusion over a learned graph
``combined``   social scores mixed with inter-arrival scores for users the
               graph cannot reach
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

from .netinfer import TransmissionGraph
from .powerlaw import DEFAULT_RESOLUTION, PowerLawParams, clamp_gap, incubation_weight, pdf
from .trace import HOUR, Trace, cascades, percentile_time, prefix

BASELINE = "baseline"
VIRAL = "viral"
INTER = "inter"
SOCIAL = "social"
COMBINED = "combined"
METHODS = (BASELINE, VIRAL, INTER, SOCIAL, COMBINED)


@dataclass
class ScoreVector:
    at: float
    scores: dict[int, float]
    method: str = ""

    def __post_init__(self) -> None:
        for v, s in self.scores.items():
            if not (math.isfinite(s) and s >= 0):
                raise ValueError(f"score for video {v} must be finite and >= 0, got {s}")

    def __getitem__(self, video: int) -> float:
        return self.scores.get(video, 0.0)

    def __len__(self) -> int:
        return len(self.scores)

    def total(self) -> float:
        return math.fsum(self.scores.values())

    def ranked(self) -> list[int]:
        """Videos by descending score, ties by ascending id."""
        return sorted(self.scores, key=lambda v: (-self.scores[v], v))

    def dump(self, out: TextIO, video_keys=None) -> None:
        for v in self.ranked():
            key = video_keys[v] if video_keys is not None else v
            out.write(f"{key},{self.scores[v]!r}\n")


@dataclass(frozen=True)
class BaselineConfig:
    gamma: float = 0.1
    window: float = 28 * HOUR
    zipf_exponent: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not self.zipf_exponent > 0:
            raise ValueError("zipf exponent must be positive")


@dataclass(frozen=True)
class ViralnessConfig:
    f1: float = 0.3
    f2: float = 0.8
    f3: float = 1.0
    min_views: int = 5
    min_span: float = 3 * HOUR

    def __post_init__(self) -> None:
        if not 0.0 <= self.f1 < self.f2 <= self.f3 <= 1.0:
            raise ValueError("need 0 <= f1 < f2 <= f3 <= 1")


@dataclass(frozen=True)
class CacheDecision:
    at: float
    k: int
    videos: tuple[int, ...] = field(default=())

    def vector(self, n_videos: int) -> np.ndarray:
        """The k-sparse 0/1 cache indicator over all video ids."""
        x = np.zeros(n_videos, dtype=np.int64)
        x[list(self.videos)] = 1
        return x


def crf_score(view: Trace, cfg: BaselineConfig, at: float) -> ScoreVector:
    """Sum of ``0.5 ** (gamma * hours_ago)`` over each video's requests."""
    if len(view) == 0:
        return ScoreVector(at, {}, BASELINE)
    weights = 0.5 ** (cfg.gamma * (at - view.times) / HOUR)
    totals = np.bincount(view.videos, weights=weights, minlength=view.n_videos)
    vids = np.unique(view.videos)
    return ScoreVector(at, dict(zip(vids.tolist(), totals[vids].tolist())), BASELINE)


def zipf_from_rank(sv: ScoreVector, s: float = 1.0) -> ScoreVector:
    """Replace scores by rank-based zipf probabilities ``r**-s / H``."""
    ranked = sv.ranked()
    w = np.arange(1, len(ranked) + 1, dtype=float) ** (-s)
    w /= w.sum()
    return ScoreVector(sv.at, dict(zip(ranked, w.tolist())), sv.method)


def viral_score(view: Trace, cfg: ViralnessConfig, at: float,
                resolution: float = DEFAULT_RESOLUTION) -> ScoreVector:
    """Growth-normalized view rate ``rho * R(f1, f3)`` in views per hour.

    Only cascades with at least ``min_views`` requests spread over at least
    ``min_span`` are scored; the rest are omitted (implicit zero).
    """

    def rate(c, fa, fb):
        span = clamp_gap(percentile_time(c, fb) - percentile_time(c, fa), resolution) / HOUR
        return (len(prefix(c, fb)) - len(prefix(c, fa))) / span

    scores = {}
    for v, c in cascades(view).items():
        if len(c) < cfg.min_views or c.times[-1] - c.times[0] < cfg.min_span:
            continue
        r13 = rate(c, cfg.f1, cfg.f3)
        r12 = rate(c, cfg.f1, cfg.f2)
        rho = r13 / r12 if r12 > 0 else 0.0
        scores[v] = rho * r13
    return ScoreVector(at, scores, VIRAL)


def interarrival_from_parts(zipf: dict[int, float], last_seen: dict[int, float], pl: PowerLawParams,
                            at: float, resolution: float = DEFAULT_RESOLUTION) -> dict[int, float]:
    """Normalize ``zipf[v] * pdf(at - last_seen[v])`` over the videos."""
    vids = sorted(zipf)
    if not vids:
        return {}
    elapsed = clamp_gap(np.array([at - last_seen[v] for v in vids]), resolution)
    num = np.array([zipf[v] for v in vids]) * pdf(pl, elapsed)
    total = num.sum()
    if not total > 0:
        # every density underflowed; fall back on the zipf prior alone
        num = np.array([zipf[v] for v in vids])
        total = num.sum()
    return dict(zip(vids, (num / total).tolist()))


def interarrival_score(view: Trace, pl: PowerLawParams, cfg: BaselineConfig, at: float,
                       resolution: float = DEFAULT_RESOLUTION) -> ScoreVector:
    base = crf_score(view, cfg, at)
    if not len(base):
        return ScoreVector(at, {}, INTER)
    zipf = zipf_from_rank(base, cfg.zipf_exponent).scores
    last_seen = {v: float(c.times[-1]) for v, c in cascades(view).items()}
    return ScoreVector(at, interarrival_from_parts(zipf, last_seen, pl, at, resolution), INTER)


def _infections(view: Trace) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Per video: (users, first request time) of everyone who requested it."""
    out = {}
    for v, c in cascades(view).items():
        first = c.first_infections()
        out[v] = (first.users, first.times)
    return out


def diffusion_score(view: Trace, graph: TransmissionGraph, pl: PowerLawParams, at: float,
                    resolution: float = DEFAULT_RESOLUTION) -> ScoreVector:
    """Expected number of graph users not yet infected who get infected.

    ``score(v) = sum_{u in S_v} [1 - prod_{j in I_v} (1 - A[j, u] * w(at - tau_j))]``
    where ``I_v`` are the users who requested ``v`` in the view and ``S_v`` is
    the graph support minus ``I_v``.
    """
    support = graph.support()
    scores: dict[int, float] = {}
    if len(view) == 0:
        return ScoreVector(at, scores, SOCIAL)
    in_support = np.zeros(max(graph.n_users, view.n_users), dtype=bool)
    in_support[support] = True
    m = graph.matrix()
    for v, (users, times) in _infections(view).items():
        users_g = users[users < graph.n_users]
        times_g = times[users < graph.n_users]
        if users_g.size == 0 or support.size == 0:
            scores[v] = 0.0
            continue
        rows = m[users_g]
        w = incubation_weight(pl, clamp_gap(at - times_g, resolution))
        chi = rows.multiply(w[:, None]).tocsr()
        chi.data = np.log1p(-chi.data)
        log_survive = np.asarray(chi.sum(axis=0)).ravel()
        susceptible = in_support[: graph.n_users].copy()
        susceptible[users_g] = False
        scores[v] = max(float(-np.expm1(log_survive[susceptible]).sum()), 0.0)
    return ScoreVector(at, scores, SOCIAL)


def combined_score(view: Trace, graph: TransmissionGraph, pl: PowerLawParams, cfg: BaselineConfig,
                   at: float, beta: float = 0.7, eq6_mode: bool = False,
                   social_view: Trace | None = None, universe: Iterable[int] | None = None,
                   resolution: float = DEFAULT_RESOLUTION) -> ScoreVector:
    """Social scores plus inter-arrival scores scaled by the unreachable users.

    ``view`` feeds the inter-arrival scorer and ``social_view`` (defaulting to
    ``view``) the diffusion scorer.  ``universe`` is the set of known users,
    defaulting to those in either view.  With ``eq6_mode`` the result is
    ``S_diffusion + |U~(v)| * S_inter``; otherwise
    ``beta * S_diffusion + (1 - beta) * |U~(v)| * S_inter``.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    social_view = view if social_view is None else social_view
    if universe is None:
        universe = np.union1d(view.distinct_users(), social_view.distinct_users())
    outside = np.setdiff1d(np.asarray(list(universe) if not isinstance(universe, np.ndarray) else universe,
                                      dtype=np.int64), graph.support())
    outside_set = set(outside.tolist())

    diff = diffusion_score(social_view, graph, pl, at, resolution)
    inter = interarrival_score(view, pl, cfg, at, resolution)
    watchers = {v: c.users for v, c in cascades(view).items()}
    scores = {}
    for v in set(diff.scores) | set(inter.scores):
        seen = watchers.get(v)
        n_seen_outside = len(outside_set.intersection(seen.tolist())) if seen is not None else 0
        n_tilde = len(outside_set) - n_seen_outside
        social_part, consensus_part = diff[v], n_tilde * inter[v]
        if eq6_mode:
            scores[v] = social_part + consensus_part
        else:
            scores[v] = beta * social_part + (1.0 - beta) * consensus_part
    return ScoreVector(at, scores, COMBINED)


def top_k(sv: ScoreVector, k: int, fallback: ScoreVector | None = None) -> CacheDecision:
    """Cache the ``k`` highest-scoring videos, ties to the lower id.

    Only positive scores are taken from ``sv`` when ``fallback`` is given;
    leftover slots are then filled in ``fallback`` ranking order.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    if fallback is None:
        return CacheDecision(sv.at, k, tuple(sv.ranked()[:k]))
    chosen = [v for v in sv.ranked() if sv[v] > 0][:k]
    if len(chosen) < k:
        taken = set(chosen)
        chosen.extend(v for v in fallback.ranked() if v not in taken)
        chosen = chosen[:k]
    return CacheDecision(sv.at, k, tuple(chosen))
