"""Synthetic request traces from a planted transmission graph.

Every video starts from one seed request at a uniform time and spreads by a
continuous-time independent cascade: each newly infected user gets one
attempt per out-neighbour, succeeding with the edge probability, and a
success schedules the neighbour's request after a power-law incubation delay.
Background requests, unrelated to diffusion, are mixed in at ``noise_rate``.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .netinfer import TransmissionGraph
from .powerlaw import PowerLawParams, sample
from .trace import HOUR, Trace


@dataclass(frozen=True)
class PlantedWorld:
    """Ground truth for a synthetic trace.

    ``seed_rate`` adds external re-seeds (per hour, over all videos) on top of
    the one primary seed every video gets.  ``noise_rate`` is the expected
    fraction of all requests that are background noise.
    """

    graph: TransmissionGraph
    incubation: PowerLawParams
    n_videos: int
    seed_rate: float = 0.0
    noise_rate: float = 0.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.seed_rate < 0:
            raise ValueError("seed_rate must be non-negative")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must lie in [0, 1]")


def _out_lists(graph: TransmissionGraph) -> list[tuple[np.ndarray, np.ndarray]]:
    m = graph.matrix()
    return [(m.indices[m.indptr[i]:m.indptr[i + 1]], m.data[m.indptr[i]:m.indptr[i + 1]])
            for i in range(graph.n_users)]


def spread(out_lists, seeds, incubation: PowerLawParams, horizon: float, rng) -> list[tuple[float, int]]:
    """Run one video's cascade from ``(time, user)`` seeds.

    Returns ``(time, user)`` infections before ``horizon`` in time order,
    one per user.
    """
    heap = list(seeds)
    heapq.heapify(heap)
    infected: dict[int, float] = {}
    order = []
    while heap:
        t, u = heapq.heappop(heap)
        if u in infected or t >= horizon:
            continue
        infected[u] = t
        order.append((t, u))
        nbrs, probs = out_lists[u]
        if nbrs.size == 0:
            continue
        hits = nbrs[rng.random(nbrs.size) < probs]
        if hits.size:
            delays = sample(incubation, hits.size, rng)
            for j, d in zip(hits.tolist(), delays.tolist()):
                if j not in infected:
                    heapq.heappush(heap, (t + d, j))
    return order


def generate(world: PlantedWorld, duration: float, start: float = 0.0) -> Trace:
    """Simulate ``duration`` seconds of requests starting at ``start``.

    Users keep their graph ids; video ``v`` is the ``v``-th video.
    Deterministic given ``world.rng_seed``.
    """
    if not duration > 0:
        raise ValueError("duration must be positive")
    n_users = world.graph.n_users
    root = np.random.SeedSequence(world.rng_seed)
    video_seq, extra_seq = root.spawn(2)
    outs = _out_lists(world.graph)

    seeds: list[list[tuple[float, int]]] = [[] for _ in range(world.n_videos)]
    extra = np.random.default_rng(extra_seq)
    n_extra = extra.poisson(world.seed_rate * duration / HOUR) if world.seed_rate > 0 else 0
    for v, u, t in zip(extra.integers(0, world.n_videos, n_extra).tolist(),
                       extra.integers(0, n_users, n_extra).tolist(),
                       (start + extra.random(n_extra) * duration).tolist()):
        seeds[v].append((t, u))

    times, users, videos = [], [], []
    for v, seq in enumerate(video_seq.spawn(world.n_videos)):
        rng = np.random.default_rng(seq)
        primary = (start + rng.random() * duration, int(rng.integers(n_users)))
        for t, u in spread(outs, [primary, *seeds[v]], world.incubation, start + duration, rng):
            times.append(t)
            users.append(u)
            videos.append(v)

    if world.noise_rate > 0 and times:
        noise = np.random.default_rng(extra_seq.spawn(1)[0])
        r = world.noise_rate
        n_noise = len(times) if r >= 1 else noise.poisson(len(times) * r / (1 - r))
        times.extend((start + noise.random(n_noise) * duration).tolist())
        users.extend(noise.integers(0, n_users, n_noise).tolist())
        videos.extend(noise.integers(0, world.n_videos, n_noise).tolist())

    return Trace.from_arrays(times, users, videos, n_users=n_users, n_videos=world.n_videos)


def random_graph(n_users: int, mean_out_degree: float, p_range=(0.3, 0.8), rng=None) -> TransmissionGraph:
    """Directed Erdos-Renyi graph with uniform edge probabilities in ``p_range``."""
    rng = np.random.default_rng(rng)
    p_edge = min(mean_out_degree / max(n_users - 1, 1), 1.0)
    mask = rng.random((n_users, n_users)) < p_edge
    np.fill_diagonal(mask, False)
    a = np.where(mask, rng.uniform(*p_range, size=(n_users, n_users)), 0.0)
    return TransmissionGraph.from_dense(a)


def planted_star(n_users: int, n_random: int, p_range=(0.3, 0.8), hub: int = 0, rng=None) -> TransmissionGraph:
    """Hub-to-every-leaf star plus ``n_random`` extra distinct directed edges."""
    rng = np.random.default_rng(rng)
    a = np.zeros((n_users, n_users))
    leaves = [u for u in range(n_users) if u != hub]
    a[hub, leaves] = rng.uniform(*p_range, size=len(leaves))
    free = [(i, j) for i in range(n_users) for j in range(n_users) if i != j and a[i, j] == 0]
    for k in rng.choice(len(free), size=min(n_random, len(free)), replace=False):
        i, j = free[k]
        a[i, j] = rng.uniform(*p_range)
    return TransmissionGraph.from_dense(a)
