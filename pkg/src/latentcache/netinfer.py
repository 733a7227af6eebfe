"""Latent transmission-graph inference from request cascades.

Each column of the adjacency matrix (all incoming edges of one target user)
is fitted independently by maximizing an independent-cascade likelihood:

* when the target is infected in a cascade at ``tau_u``, the cascade
  contributes ``log(1 - prod_j (1 - A[j, u] * w(tau_u - tau_j)))`` over the
  users ``j`` infected strictly earlier;
* when the target never appears, every infected user ``j`` contributes
  ``log(1 - A[j, u])``.

``w`` is the incubation density divided by its peak value, so each factor is a
probability.  Seeds (no earlier infected user) contribute nothing.
"""
from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np
from scipy import sparse

from .powerlaw import DEFAULT_RESOLUTION, PowerLawParams, clamp_gap, incubation_weight
from .trace import HOUR, Cascade, Trace, WindowSpec, cascades

EPS = 1e-6
UPPER = 1.0 - EPS


@dataclass(frozen=True)
class SolverConfig:
    step: float = 0.1
    max_iter: int = 500
    tol: float = 1e-8


@dataclass(frozen=True)
class InferenceConfig:
    sparsity: int = 300
    history_width: float = 60 * HOUR
    relearn_period: float = 10 * HOUR
    min_unique_users: int = 3
    incubation: PowerLawParams | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    resolution: float = DEFAULT_RESOLUTION

    def __post_init__(self) -> None:
        if self.sparsity < 1:
            raise ValueError("sparsity must be at least 1")
        if not (self.history_width > 0 and self.relearn_period > 0):
            raise ValueError("history_width and relearn_period must be positive")
        if self.min_unique_users < 1:
            raise ValueError("min_unique_users must be at least 1")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class TransmissionGraph:
    """Sparse directed user->user transmission probabilities.

    ``columns[u]`` holds ``(sources, probs)`` for the edges entering ``u``.
    """

    def __init__(self, n_users: int, columns: dict | None = None, *, relearn_time=None, config_hash=""):
        self.n_users = int(n_users)
        self.columns: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.relearn_time = relearn_time
        self.config_hash = config_hash
        for u, (src, p) in (columns or {}).items():
            self.set_column(u, src, p)
        self._matrix = None

    def set_column(self, target: int, sources, probs) -> None:
        src = np.asarray(sources, dtype=np.int64)
        p = np.asarray(probs, dtype=float)
        keep = (p > 0) & (src != target)
        if np.any((p < 0) | (p > 1)):
            raise ValueError("transmission probabilities must lie in [0, 1]")
        order = np.argsort(src[keep], kind="stable")
        self.columns[int(target)] = (src[keep][order], p[keep][order])
        self._matrix = None

    @classmethod
    def from_dense(cls, a, **kw) -> "TransmissionGraph":
        a = np.asarray(a, dtype=float)
        g = cls(a.shape[0], **kw)
        for u in range(a.shape[1]):
            src = np.flatnonzero(a[:, u])
            if src.size:
                g.set_column(u, src, a[src, u])
        return g

    def matrix(self) -> sparse.csr_matrix:
        """CSR matrix with ``A[source, target]``."""
        if self._matrix is None:
            rows, cols, vals = [], [], []
            for u, (src, p) in self.columns.items():
                rows.append(src)
                cols.append(np.full(src.size, u, dtype=np.int64))
                vals.append(p)
            if rows:
                rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
            n = self.n_users
            self._matrix = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
        return self._matrix

    def dense(self) -> np.ndarray:
        return self.matrix().toarray()

    def edges(self) -> list[tuple[int, int, float]]:
        out = []
        for u in sorted(self.columns):
            src, p = self.columns[u]
            out.extend((int(s), u, float(q)) for s, q in zip(src, p))
        return sorted(out)

    @property
    def nnz(self) -> int:
        return sum(src.size for src, _ in self.columns.values())

    def support(self) -> np.ndarray:
        """Users touching at least one edge, as a sorted id array."""
        ids = set()
        for u, (src, _) in self.columns.items():
            if src.size:
                ids.add(u)
                ids.update(src.tolist())
        return np.array(sorted(ids), dtype=np.int64)

    def dump(self, out: TextIO, user_keys: Sequence[str] | None = None) -> None:
        """Write ``source,target,probability`` lines under a ``#`` header.

        Users are written as ``user_keys[id]`` when keys are given.
        """
        name = (lambda i: user_keys[i]) if user_keys is not None else str
        out.write(f"# n_users={self.n_users}\n")
        out.write(f"# config_hash={self.config_hash}\n")
        out.write(f"# relearn_time={self.relearn_time!r}\n")
        for s, t, p in self.edges():
            out.write(f"{name(s)},{name(t)},{p!r}\n")

    @classmethod
    def load(cls, stream: TextIO, user_keys: Sequence[str] | None = None) -> "TransmissionGraph":
        """Inverse of :meth:`dump`; keys map back to ids through ``user_keys``."""
        ident = {k: i for i, k in enumerate(user_keys)}.__getitem__ if user_keys is not None else int
        meta: dict[str, str] = {}
        cols: dict[int, tuple[list, list]] = {}
        for line in stream:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key.strip()] = val.strip()
                continue
            s, t, p = line.split(",")
            src, probs = cols.setdefault(ident(t), ([], []))
            src.append(ident(s))
            probs.append(float(p))
        relearn = meta.get("relearn_time", "None")
        return cls(
            int(meta["n_users"]),
            cols,
            relearn_time=None if relearn == "None" else float(relearn),
            config_hash=meta.get("config_hash", ""),
        )


# --------------------------------------------------------------------------
# Cascade preparation and scheduling
# --------------------------------------------------------------------------


def valid_inference_cascades(view: Trace, cfg: InferenceConfig) -> list[Cascade]:
    """Cascades with >= 3 requests and enough distinct users, reduced to
    each user's first request (their infection time)."""
    out = []
    for c in cascades(view).values():
        if len(c) >= 3 and c.n_unique_users() >= cfg.min_unique_users:
            out.append(c.first_infections())
    return out


def inference_schedule(start: float, end: float, cfg: InferenceConfig) -> list[tuple[float, WindowSpec]]:
    """Relearn instants ``start, start + period, ...`` strictly before ``end``."""
    if not end > start:
        raise ValueError("test span must be non-empty")
    n = math.ceil((end - start) / cfg.relearn_period - 1e-12)
    return [
        (start + i * cfg.relearn_period, WindowSpec(start + i * cfg.relearn_period, cfg.history_width))
        for i in range(max(n, 1))
    ]


# --------------------------------------------------------------------------
# Per-column likelihood
# --------------------------------------------------------------------------


@dataclass
class ColumnProblem:
    """Likelihood data for one target user over a fixed candidate-parent list.

    Infection events are stored CSR-style: event ``e`` involves the candidates
    ``idx[ptr[e]:ptr[e+1]]`` with incubation weights ``w[ptr[e]:ptr[e+1]]``.
    ``surv[j]`` counts cascades where candidate ``j`` is infected and the
    target never is.
    """

    target: int
    candidates: np.ndarray
    ptr: np.ndarray
    idx: np.ndarray
    w: np.ndarray
    surv: np.ndarray

    @property
    def n_events(self) -> int:
        return len(self.ptr) - 1

    def restrict(self, keep: np.ndarray) -> "ColumnProblem":
        """Drop candidates outside ``keep`` (a boolean mask).

        Infection events left with no candidate parent are dropped too: their
        term would be a constant ``-inf``.
        """
        remap = np.cumsum(keep) - 1
        ptr, idx, w = [0], [], []
        for e in range(self.n_events):
            sl = slice(self.ptr[e], self.ptr[e + 1])
            sel = keep[self.idx[sl]]
            if sel.any():
                idx.append(remap[self.idx[sl][sel]])
                w.append(self.w[sl][sel])
                ptr.append(ptr[-1] + int(sel.sum()))
        return ColumnProblem(
            self.target,
            self.candidates[keep],
            np.asarray(ptr, dtype=np.int64),
            np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64),
            np.concatenate(w) if w else np.zeros(0),
            self.surv[keep],
        )

    def _event_logs(self, a: np.ndarray) -> np.ndarray:
        # per event: log prod_j (1 - a_j w_j)
        terms = np.log1p(-a[self.idx] * self.w)
        if terms.size == 0:
            return np.zeros(self.n_events)
        return np.add.reduceat(terms, self.ptr[:-1]) if self.n_events else np.zeros(0)

    def loglik(self, a: np.ndarray) -> float:
        with np.errstate(divide="ignore", invalid="ignore"):
            hazard = -np.expm1(self._event_logs(a))
            val = np.sum(np.log(hazard)) + np.sum(self.surv * np.log1p(-a))
        return float(val) if not np.isnan(val) else -math.inf

    def gradient(self, a: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            s = self._event_logs(a)
            ratio = np.exp(s) / -np.expm1(s)
            aw = a[self.idx] * self.w
            per_entry = np.repeat(ratio, np.diff(self.ptr)) * self.w / (1.0 - aw)
            g = np.bincount(self.idx, weights=per_entry, minlength=a.size).astype(float)
            g -= self.surv / (1.0 - a)
        return g


class CascadeIndex:
    """Shared lookups over a fixed cascade list for building column problems."""

    def __init__(self, cascade_list: Sequence[Cascade], n_users: int, incubation: PowerLawParams,
                 resolution: float = DEFAULT_RESOLUTION) -> None:
        self.cascades = list(cascade_list)
        self.n_users = n_users
        self.incubation = incubation
        self.resolution = resolution
        rows = np.concatenate([np.full(len(c), i) for i, c in enumerate(self.cascades)]) if self.cascades else np.zeros(0, int)
        cols = np.concatenate([c.users for c in self.cascades]) if self.cascades else np.zeros(0, int)
        member = sparse.csr_matrix(
            (np.ones(rows.size), (rows, cols)), shape=(len(self.cascades), n_users)
        )
        member.data[:] = 1.0
        self.member = member
        self.total = np.asarray(member.sum(axis=0)).ravel()
        self.containing: dict[int, list[int]] = {}
        for i, c in enumerate(self.cascades):
            for u in np.unique(c.users).tolist():
                self.containing.setdefault(u, []).append(i)

    def users(self) -> np.ndarray:
        return np.flatnonzero(self.total)

    def problem(self, target: int) -> ColumnProblem:
        inside = self.containing.get(target, [])
        surv = self.total.copy()
        if inside:
            surv -= np.asarray(self.member[inside].sum(axis=0)).ravel()
        surv[target] = 0
        events = []
        for i in inside:
            c = self.cascades[i]
            hit = np.flatnonzero(c.users == target)
            tau = c.times[hit[0]]
            earlier = (c.times < tau) & (c.users != target)
            if not earlier.any():
                continue
            gaps = clamp_gap(tau - c.times[earlier], self.resolution)
            events.append((c.users[earlier], incubation_weight(self.incubation, gaps)))
        parent_ids = np.unique(np.concatenate([e[0] for e in events])) if events else np.zeros(0, int)
        cand = np.union1d(parent_ids, np.flatnonzero(surv)).astype(np.int64)
        pos = {u: j for j, u in enumerate(cand.tolist())}
        ptr = [0]
        idx, w = [], []
        for src, wt in events:
            idx.append(np.fromiter((pos[s] for s in src.tolist()), dtype=np.int64, count=src.size))
            w.append(np.asarray(wt, dtype=float))
            ptr.append(ptr[-1] + src.size)
        return ColumnProblem(
            int(target),
            cand,
            np.asarray(ptr, dtype=np.int64),
            np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64),
            np.concatenate(w) if w else np.zeros(0),
            surv[cand].astype(float),
        )


def column_loglik(target: int, sources, probs, cascade_list: Sequence[Cascade],
                  incubation: PowerLawParams, resolution: float = DEFAULT_RESOLUTION) -> float:
    """Log-likelihood of the incoming edges ``sources -> target``.

    Returns ``-inf`` when an entry of 1 meets a survival term, or when an
    infected target has earlier infected users all carrying zero weight.
    """
    prob, a = _column_setup(target, sources, probs, cascade_list, incubation, resolution)
    return prob.loglik(a)


def column_gradient(target: int, sources, probs, cascade_list: Sequence[Cascade],
                    incubation: PowerLawParams, resolution: float = DEFAULT_RESOLUTION) -> np.ndarray:
    """Gradient of :func:`column_loglik` with respect to ``probs``."""
    prob, a = _column_setup(target, sources, probs, cascade_list, incubation, resolution)
    g = prob.gradient(a)
    pos = {u: j for j, u in enumerate(prob.candidates.tolist())}
    return np.array([g[pos[s]] if s in pos else 0.0 for s in np.asarray(sources).tolist()])


def _column_setup(target, sources, probs, cascade_list, incubation, resolution):
    sources = np.asarray(sources, dtype=np.int64)
    probs = np.asarray(probs, dtype=float)
    if np.any(sources == target):
        raise ValueError("a column may not hold a self-edge")
    n = int(max([target, *sources.tolist(), *(int(c.users.max()) for c in cascade_list if len(c))], default=0)) + 1
    prob = CascadeIndex(cascade_list, n, incubation, resolution).problem(target)
    a = np.zeros(prob.candidates.size)
    pos = {u: j for j, u in enumerate(prob.candidates.tolist())}
    for s, p in zip(sources.tolist(), probs.tolist()):
        if s in pos:
            a[pos[s]] = p
    return prob, a


# --------------------------------------------------------------------------
# Solver
# --------------------------------------------------------------------------


def maximize(prob: ColumnProblem, a0: np.ndarray, solver: SolverConfig) -> tuple[np.ndarray, float]:
    """Projected gradient ascent on ``[0, 1 - EPS]^d``.

    The step doubles after every accepted move and halves on rejection;
    iteration stops when the relative gain drops below ``solver.tol`` or no
    step size in 60 halvings improves the objective.
    """
    a = np.clip(a0, 0.0, UPPER)
    f = prob.loglik(a)
    step = solver.step
    for _ in range(solver.max_iter):
        g = prob.gradient(a)
        for _ in range(60):
            cand = np.clip(a + step * g, 0.0, UPPER)
            f_new = prob.loglik(cand)
            if f_new > f:
                break
            step *= 0.5
        else:
            break
        gain = f_new - f
        a, f = cand, f_new
        step *= 2.0
        if gain <= solver.tol * max(abs(f), 1.0):
            break
    return a, f


def solve_column(prob: ColumnProblem, cfg: InferenceConfig) -> tuple[np.ndarray, np.ndarray]:
    """Fit one column; return ``(sources, probs)`` with zeros removed."""
    d = prob.candidates.size
    if d == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    a0 = np.zeros(d)
    a0[np.unique(prob.idx)] = 0.5
    a, _ = maximize(prob, a0, cfg.solver)
    if np.count_nonzero(a) > cfg.sparsity:
        top = np.argsort(-a, kind="stable")[: cfg.sparsity]
        keep = np.zeros(d, dtype=bool)
        keep[top] = True
        prob = prob.restrict(keep)
        a, _ = maximize(prob, a[keep], cfg.solver)
    nz = a > 0
    return prob.candidates[nz], a[nz]


def infer_column(target: int, cascade_list: Sequence[Cascade], cfg: InferenceConfig,
                 n_users: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    if cfg.incubation is None:
        raise ValueError("inference needs fitted incubation parameters")
    if n_users is None:
        n_users = max([target, *(int(c.users.max()) for c in cascade_list if len(c))]) + 1
    index = CascadeIndex(cascade_list, n_users, cfg.incubation, cfg.resolution)
    return solve_column(index.problem(target), cfg)


_WORKER_INDEX: CascadeIndex | None = None
_WORKER_CFG: InferenceConfig | None = None


def _init_worker(index: CascadeIndex, cfg: InferenceConfig) -> None:
    global _WORKER_INDEX, _WORKER_CFG
    _WORKER_INDEX, _WORKER_CFG = index, cfg


def _solve_in_worker(target: int):
    return solve_column(_WORKER_INDEX.problem(target), _WORKER_CFG)


def infer_graph(cascade_list: Sequence[Cascade], n_users: int, cfg: InferenceConfig,
                targets: Iterable[int] | None = None, workers: int = 1,
                relearn_time: float | None = None) -> TransmissionGraph:
    """Infer every column independently; assembly order is fixed by target id."""
    if cfg.incubation is None:
        raise ValueError("inference needs fitted incubation parameters")
    index = CascadeIndex(cascade_list, n_users, cfg.incubation, cfg.resolution)
    targets = sorted(index.users().tolist() if targets is None else set(targets))
    if workers > 1 and len(targets) > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(index, cfg)) as ex:
            results = list(ex.map(_solve_in_worker, targets, chunksize=max(1, len(targets) // (4 * workers))))
    else:
        results = [solve_column(index.problem(u), cfg) for u in targets]
    graph = TransmissionGraph(n_users, relearn_time=relearn_time, config_hash=cfg.digest())
    for u, (src, p) in zip(targets, results):
        if src.size:
            graph.set_column(u, src, p)
    return graph
