"""Sequence windows, per-epoch shuffling and prefetched batch assembly.

A window anchored at output start bin ``s`` with input length ``q`` reads
input bins ``[s - q, s)`` and target bins ``[s, s + 3)``.
"""
from __future__ import annotations

import hashlib
import logging
import math
import threading
from collections import OrderedDict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .grid_codec import TrafficMovie, read_movie

log = logging.getLogger(__name__)

OUTPUT_LEN = 3
MAX_Q = 12


class Strategy(str, Enum):
    NON_OVERLAPPING = "non_overlapping"
    ALL_SLOTS = "all_slots"
    LIKE_TEST = "like_test"


class SamplerError(ValueError):
    pass


class MovieLoadError(IOError):
    def __init__(self, city: str, day: int, cause: Exception | str):
        super().__init__(f"cannot load movie for city={city!r}, day={day}: {cause}")
        self.city = city
        self.day = day


@dataclass(frozen=True, order=True)
class SequenceWindow:
    day_index: int
    start: int  # first target bin s
    q: int
    output_len: int = OUTPUT_LEN

    @property
    def input_bins(self) -> range:
        return range(self.start - self.q, self.start)

    @property
    def output_bins(self) -> range:
        return range(self.start, self.start + self.output_len)

    def is_valid(self, bins_per_day: int) -> bool:
        return self.start - self.q >= 0 and self.start + self.output_len <= bins_per_day


def _check_q(q: int) -> None:
    if not 1 <= q <= MAX_Q:
        raise SamplerError(f"input length q must be in [1, {MAX_Q}], got {q}")


def count_sequences(bins_per_day: int, q: int, strategy, num_days: int,
                    starts_per_day_like_test: int = 5) -> int:
    _check_q(q)
    strategy = Strategy(strategy)
    span = q + OUTPUT_LEN
    if bins_per_day < span:
        raise SamplerError(f"a day of {bins_per_day} bins cannot hold a window of {span}")
    if strategy is Strategy.NON_OVERLAPPING:
        return num_days * (bins_per_day // span)
    if strategy is Strategy.ALL_SLOTS:
        return num_days * (bins_per_day - span + 1)
    return num_days * starts_per_day_like_test


def enumerate_windows(days: Sequence[int], bins_per_day: int, q: int, strategy,
                      test_bins: Sequence[int] | None = None) -> list[SequenceWindow]:
    _check_q(q)
    strategy = Strategy(strategy)
    span = q + OUTPUT_LEN
    if strategy is Strategy.NON_OVERLAPPING:
        if math.ceil(bins_per_day / span) != bins_per_day // span:
            log.info("dropping partial trailing window: %d bins, window length %d", bins_per_day, span)
        starts = [k * span + q for k in range(bins_per_day // span)]
    elif strategy is Strategy.ALL_SLOTS:
        starts = [b + q for b in range(bins_per_day - span + 1)]
    else:
        if test_bins is None:
            raise SamplerError("like_test sampling needs the city's test output bins")
        starts = []
        for s in test_bins:
            if s - q < 0 or s + OUTPUT_LEN > bins_per_day:
                log.warning("skipping like_test window at bin %d: does not fit q=%d in %d bins",
                            s, q, bins_per_day)
                continue
            starts.append(int(s))
    return [SequenceWindow(int(d), s, q) for d in days for s in starts]


@dataclass
class EpochIndex:
    windows: list[SequenceWindow]
    epoch: int
    seed: int

    def __len__(self):
        return len(self.windows)

    def batches(self, batch_size: int) -> list[list[SequenceWindow]]:
        """Consecutive chunks; the last one may be short."""
        return [self.windows[i:i + batch_size] for i in range(0, len(self.windows), batch_size)]


def build_epoch_index(windows: Sequence[SequenceWindow], epoch: int, seed: int) -> EpochIndex:
    if not windows:
        raise SamplerError("cannot shuffle an empty window list")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(windows))
    return EpochIndex([windows[i] for i in order], epoch, seed)


# ---------------------------------------------------------------- batches

class MovieStore:
    """Day-indexed movie source backed by files or in-memory movies, with a small LRU cache."""

    def __init__(self, paths: dict[int, Path] | None = None, movies: dict[int, TrafficMovie] | None = None,
                 city: str = "", cache_size: int = 16):
        self.paths = {int(k): Path(v) for k, v in (paths or {}).items()}
        self.movies = dict(movies or {})
        self.city = city
        self.cache_size = cache_size
        self._cache: OrderedDict[int, np.ndarray] = OrderedDict()
        self._lock = threading.Lock()

    @classmethod
    def from_movies(cls, movies: Sequence[TrafficMovie], city: str = "") -> "MovieStore":
        return cls(movies={m.day_index: m for m in movies}, city=city)

    def days(self) -> list[int]:
        return sorted(set(self.paths) | set(self.movies))

    def data(self, day: int) -> np.ndarray:
        if day in self.movies:
            return self.movies[day].data
        with self._lock:
            if day in self._cache:
                self._cache.move_to_end(day)
                return self._cache[day]
        if day not in self.paths:
            raise MovieLoadError(self.city, day, "day not in store")
        try:
            data = read_movie(self.paths[day], day_index=day).data
        except (OSError, ValueError) as exc:
            raise MovieLoadError(self.city, day, exc) from exc
        with self._lock:
            self._cache[day] = data
            if len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        return data


@dataclass
class Batch:
    inputs: np.ndarray   # (B, q, H, W, 3) float32 in [0, 1]
    targets: np.ndarray  # (B, 3, H, W, 3) float32 in [0, 1]
    exo: np.ndarray      # (B, q + 3, EXO_DIM): input frames then target frames
    window_refs: list[SequenceWindow]

    def __len__(self):
        return len(self.window_refs)

    def checksums(self) -> list[tuple[SequenceWindow, str]]:
        out = []
        for i, w in enumerate(self.window_refs):
            digest = hashlib.sha1()
            for arr in (self.inputs[i], self.targets[i], self.exo[i]):
                digest.update(np.ascontiguousarray(arr).tobytes())
            out.append((w, digest.hexdigest()))
        return out


ExoFn = Callable[[SequenceWindow], np.ndarray]


def assemble_batch(windows: Sequence[SequenceWindow], store: MovieStore, exo: ExoFn) -> Batch:
    if not windows:
        raise SamplerError("empty batch")
    inputs, targets, exos = [], [], []
    for w in windows:
        data = store.data(w.day_index)
        if not w.is_valid(data.shape[0]):
            raise SamplerError(f"{w} does not fit a day of {data.shape[0]} bins")
        inputs.append(data[w.start - w.q:w.start].astype(np.float32) / np.float32(255))
        targets.append(data[w.start:w.start + w.output_len].astype(np.float32) / np.float32(255))
        exos.append(exo(w))
    return Batch(np.stack(inputs), np.stack(targets), np.stack(exos).astype(np.float32), list(windows))


def iter_batches(index: EpochIndex, batch_size: int, store: MovieStore, exo: ExoFn,
                 workers: int = 0, depth: int = 4) -> Iterator[Batch]:
    """Yield the epoch's batches in index order.

    With ``workers > 0`` up to ``depth`` batches are assembled ahead by a thread
    pool while the caller consumes; ``workers == 0`` assembles inline.
    """
    chunks = index.batches(batch_size)
    if workers <= 0:
        for chunk in chunks:
            yield assemble_batch(chunk, store, exo)
        return
    depth = max(1, depth)
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="batch") as pool:
        pending = deque()
        it = iter(chunks)
        for chunk in it:
            pending.append(pool.submit(assemble_batch, chunk, store, exo))
            if len(pending) >= depth:
                break
        while pending:
            batch = pending.popleft().result()
            nxt = next(it, None)
            if nxt is not None:
                pending.append(pool.submit(assemble_batch, nxt, store, exo))
            yield batch
