"""Request traces, windowed views and per-video cascades.

A :class:`Trace` is an immutable, time-sorted table of ``(user, video, time)``
requests.  Users and videos carry dense integer ids assigned in order of first
appearance; the original string keys are kept alongside for reporting.
Windowed views are themselves :class:`Trace` objects that share the parent's
id universe.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, TextIO

import numpy as np

log = logging.getLogger(__name__)

HOUR = 3600.0

# Guards ceil(f*n) against float noise such as 0.3*10 == 3.0000000000000004.
_INDEX_EPS = 1e-9


class TraceParseError(ValueError):
    """Raised when a canonical trace line cannot be decoded."""

    def __init__(self, lineno: int, line: str, reason: str) -> None:
        super().__init__(f"line {lineno}: {reason}: {line!r}")
        self.lineno = lineno


class Transaction(NamedTuple):
    user: int
    video: int
    time: float


@dataclass(frozen=True)
class WindowSpec:
    """The half-open interval ``[end - width, end)``."""

    end: float
    width: float

    def __post_init__(self) -> None:
        if not self.width > 0:
            raise ValueError(f"window width must be positive, got {self.width}")

    @property
    def start(self) -> float:
        return self.end - self.width


@dataclass(frozen=True, eq=False)
class Trace:
    """Time-sorted request records over a fixed user/video id universe.

    Parameters
    ----------
    times, users, videos : np.ndarray
        Parallel arrays, sorted non-decreasing by ``times``.
    user_keys, video_keys : tuple of str
        Original keys indexed by dense id.  Their lengths define the universe
        sizes ``n_users`` and ``n_videos``.
    """

    times: np.ndarray
    users: np.ndarray
    videos: np.ndarray
    user_keys: tuple = ()
    video_keys: tuple = ()
    skipped: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        for name in ("times", "users", "videos"):
            arr = getattr(self, name)
            arr.flags.writeable = False

    @classmethod
    def from_records(cls, records: Iterable[tuple[float, str, str]]) -> "Trace":
        """Build a trace from ``(time, user_key, video_key)`` records.

        Records are stably sorted by time, then ids are assigned in order of
        first appearance in the sorted sequence.
        """
        recs = list(records)
        for t, _, _ in recs:
            if not (math.isfinite(t) and t >= 0):
                raise ValueError(f"timestamp must be finite and non-negative, got {t}")
        order = sorted(range(len(recs)), key=lambda i: recs[i][0])
        user_ids: dict[str, int] = {}
        video_ids: dict[str, int] = {}
        times = np.empty(len(recs), dtype=float)
        users = np.empty(len(recs), dtype=np.int64)
        videos = np.empty(len(recs), dtype=np.int64)
        for j, i in enumerate(order):
            t, u, v = recs[i]
            times[j] = t
            users[j] = user_ids.setdefault(u, len(user_ids))
            videos[j] = video_ids.setdefault(v, len(video_ids))
        return cls(times, users, videos, tuple(user_ids), tuple(video_ids))

    @classmethod
    def from_arrays(cls, times, users, videos, n_users=None, n_videos=None) -> "Trace":
        """Build a trace from integer-id arrays, keeping ids as given.

        Keys default to the decimal id strings.  Input is stably sorted by time.
        """
        times = np.asarray(times, dtype=float)
        users = np.asarray(users, dtype=np.int64)
        videos = np.asarray(videos, dtype=np.int64)
        order = np.argsort(times, kind="stable")
        if n_users is None:
            n_users = int(users.max()) + 1 if users.size else 0
        if n_videos is None:
            n_videos = int(videos.max()) + 1 if videos.size else 0
        return cls(
            times[order],
            users[order],
            videos[order],
            tuple(str(i) for i in range(n_users)),
            tuple(str(i) for i in range(n_videos)),
        )

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self) -> Iterator[Transaction]:
        for u, v, t in zip(self.users.tolist(), self.videos.tolist(), self.times.tolist()):
            yield Transaction(u, v, t)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return (
            np.array_equal(self.times, other.times)
            and np.array_equal(self.users, other.users)
            and np.array_equal(self.videos, other.videos)
            and self.user_keys == other.user_keys
            and self.video_keys == other.video_keys
        )

    @property
    def n_users(self) -> int:
        return len(self.user_keys)

    @property
    def n_videos(self) -> int:
        return len(self.video_keys)

    @property
    def origin(self) -> float:
        return float(self.times[0]) if len(self) else 0.0

    @property
    def end(self) -> float:
        return float(self.times[-1]) if len(self) else 0.0

    def distinct_users(self) -> np.ndarray:
        """U(t, w): sorted distinct user ids present in this trace/view."""
        return np.unique(self.users)

    def distinct_videos(self) -> np.ndarray:
        """V(t, w): sorted distinct video ids present in this trace/view."""
        return np.unique(self.videos)

    def take(self, mask_or_index) -> "Trace":
        """Sub-trace selected by a boolean mask or sorted index array."""
        return Trace(
            self.times[mask_or_index],
            self.users[mask_or_index],
            self.videos[mask_or_index],
            self.user_keys,
            self.video_keys,
        )

    def between(self, start: float, end: float) -> "Trace":
        """Requests with ``start <= time < end``."""
        lo = np.searchsorted(self.times, start, side="left")
        hi = np.searchsorted(self.times, end, side="left")
        return self.take(slice(lo, hi))

    def view_counts(self) -> np.ndarray:
        """X(t): number of requests per video id, length ``n_videos``."""
        return np.bincount(self.videos, minlength=self.n_videos)


def window(trace: Trace, spec: WindowSpec) -> Trace:
    """Return the requests falling in ``[spec.end - spec.width, spec.end)``."""
    return trace.between(spec.start, spec.end)


@dataclass(frozen=True, eq=False)
class Cascade:
    """Time-ordered requests for a single video."""

    video: int
    times: np.ndarray
    users: np.ndarray

    def __len__(self) -> int:
        return len(self.times)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Cascade):
            return NotImplemented
        return (
            self.video == other.video
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.users, other.users)
        )

    @property
    def events(self) -> list[tuple[int, float]]:
        return list(zip(self.users.tolist(), self.times.tolist()))

    def n_unique_users(self) -> int:
        return len(np.unique(self.users))

    def first_infections(self) -> "Cascade":
        """Keep only each user's earliest request."""
        _, first = np.unique(self.users, return_index=True)
        first.sort()
        return Cascade(self.video, self.times[first], self.users[first])


def _percentile_count(f: float, n: int) -> int:
    if not 0.0 <= f <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {f}")
    return min(n, max(0, math.ceil(f * n - _INDEX_EPS)))


def percentile_time(c: Cascade, f: float) -> float:
    """l_v(f): time of the f-th percentile request of a cascade.

    Uses the 1-based index ``ceil(f * n)``; ``f = 0`` maps to the first request.
    """
    n = len(c)
    if n == 0:
        raise ValueError("percentile of an empty cascade")
    idx = max(_percentile_count(f, n) - 1, 0)
    return float(c.times[idx])


def prefix(c: Cascade, f: float) -> Cascade:
    """D_v(f): the first ``ceil(f * n)`` requests of a cascade."""
    m = _percentile_count(f, len(c))
    return Cascade(c.video, c.times[:m], c.users[:m])


def cascades(view: Trace) -> dict[int, Cascade]:
    """Partition a view into one :class:`Cascade` per distinct video."""
    if len(view) == 0:
        return {}
    order = np.argsort(view.videos, kind="stable")
    vids = view.videos[order]
    bounds = np.flatnonzero(np.diff(vids)) + 1
    out: dict[int, Cascade] = {}
    for idx in np.split(order, bounds):
        v = int(view.videos[idx[0]])
        out[v] = Cascade(v, view.times[idx], view.users[idx])
    return out


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

CANONICAL = "csv"
UMASS = "umass"
FORMATS = (CANONICAL, UMASS)


def _parse_canonical(stream: TextIO) -> list[tuple[float, str, str]]:
    records = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise TraceParseError(lineno, line, "expected timestamp,user_key,video_key")
        ts, user, video = (p.strip() for p in parts)
        try:
            t = float(ts)
        except ValueError:
            raise TraceParseError(lineno, line, "bad timestamp") from None
        if not (math.isfinite(t) and t >= 0):
            raise TraceParseError(lineno, line, "timestamp must be finite and >= 0")
        if not user or not video:
            raise TraceParseError(lineno, line, "empty key")
        records.append((t, user, video))
    return records


def _parse_umass(stream: TextIO) -> tuple[list[tuple[float, str, str]], int]:
    # timestamp youtube_server_ip client_ip request video_id content_server_ip
    records = []
    skipped = 0
    for raw in stream:
        parts = raw.split()
        if not parts:
            continue
        try:
            t = float(parts[0])
            client, video = parts[2], parts[4].split("&", 1)[0]
        except (ValueError, IndexError):
            skipped += 1
            continue
        if not (math.isfinite(t) and t >= 0) or not client or not video:
            skipped += 1
            continue
        records.append((t, client, video))
    return records, skipped


def ingest(source, fmt: str = CANONICAL) -> Trace:
    """Read a trace from a text/byte stream or a path.

    Canonical CSV lines are ``timestamp,user_key,video_key``; blank lines and
    ``#`` comments are ignored.  The ``umass`` reader skips lines it cannot
    decode and records how many it dropped in ``Trace.skipped``.
    """
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, "rb") as fh:
            return ingest(fh, fmt)
    if isinstance(source, (io.RawIOBase, io.BufferedIOBase)) or "b" in getattr(source, "mode", ""):
        source = io.TextIOWrapper(source, encoding="utf-8")
    if fmt == CANONICAL:
        return Trace.from_records(_parse_canonical(source))
    if fmt == UMASS:
        records, skipped = _parse_umass(source)
        if skipped:
            log.warning("skipped %d unparseable trace lines", skipped)
        tr = Trace.from_records(records)
        return Trace(tr.times, tr.users, tr.videos, tr.user_keys, tr.video_keys, skipped)
    raise ValueError(f"unknown trace format {fmt!r}; expected one of {FORMATS}")


def dump(trace: Trace, out: TextIO, header: Iterable[str] = ()) -> None:
    """Write a trace in canonical CSV, optionally preceded by ``#`` lines."""
    for line in header:
        out.write(f"# {line}\n")
    writer = csv.writer(out, lineterminator="\n")
    for u, v, t in trace:
        writer.writerow((repr(t), trace.user_keys[u], trace.video_keys[v]))
