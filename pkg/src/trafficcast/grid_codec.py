"""Traffic movie encoding: probe rasterization, channel transforms, container I/O.

A traffic movie is one city-day stored as a ``(bins, height, width, 3)`` uint8
tensor with channels ordered speed, volume, heading.  Heading takes one of
five levels: 85 (NE), 255 (SE), 170 (SW), 1 (NW) and 0 (undetermined / no data).
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPEED, VOLUME, HEADING = 0, 1, 2
CHANNEL_NAMES = ("speed", "volume", "heading")

# quadrant order NE, SE, SW, NW
QUADRANT_CODES = np.array([85, 255, 170, 1], dtype=np.uint8)
HEADING_LEVELS = np.array([0, 1, 85, 170, 255], dtype=np.uint8)

MAGIC = b"T4CM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sB3xIIII")


class CodecError(ValueError):
    """Input outside the domain of a codec operation."""


class MovieFormatError(ValueError):
    """Malformed movie container file."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class GridSpec:
    height: int = 495
    width: int = 436
    bins_per_day: int = 288
    channels: int = 3
    cell_size_m: float = 100.0
    bin_minutes: float = 5.0

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.bins_per_day < 1:
            raise CodecError(f"grid dims must be positive, got {self}")
        if self.channels != 3:
            raise CodecError("a traffic movie always has 3 channels")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.bins_per_day, self.height, self.width, self.channels)


@dataclass(frozen=True)
class CodecParams:
    volume_cap_min: int = 1
    volume_cap_max: int = 64
    speed_cap_max: float = 120.0

    def __post_init__(self):
        if not (0 < self.volume_cap_min < self.volume_cap_max):
            raise CodecError("need 0 < volume_cap_min < volume_cap_max")
        if self.speed_cap_max <= 0:
            raise CodecError("speed_cap_max must be positive")


@dataclass(frozen=True)
class ProbePoint:
    day_index: int
    time_bin: int
    row: int
    col: int
    speed_kmh: float
    heading_deg: float


@dataclass
class TrafficMovie:
    spec: GridSpec
    day_index: int
    data: np.ndarray
    city: str = ""
    params: CodecParams = field(default_factory=CodecParams)

    def __post_init__(self):
        if self.data.dtype != np.uint8:
            raise CodecError(f"movie data must be uint8, got {self.data.dtype}")
        if self.data.shape != self.spec.shape:
            raise CodecError(f"movie shape {self.data.shape} does not match grid {self.spec.shape}")

    def check_invariants(self) -> None:
        """Raise CodecError if heading levels or no-data consistency are violated."""
        check_movie_array(self.data)

    def __eq__(self, other):
        if not isinstance(other, TrafficMovie):
            return NotImplemented
        return (self.spec == other.spec and self.day_index == other.day_index
                and np.array_equal(self.data, other.data))


def check_movie_array(data: np.ndarray) -> None:
    heading = data[..., HEADING]
    bad = ~np.isin(heading, HEADING_LEVELS)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise CodecError(f"invalid heading value {heading[idx]} at {idx}")
    empty = data[..., VOLUME] == 0
    leak = empty & ((data[..., SPEED] != 0) | (heading != 0))
    if leak.any():
        idx = tuple(int(i) for i in np.argwhere(leak)[0])
        raise CodecError(f"no-data cell {idx} carries speed/heading")


def _round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# ---------------------------------------------------------------- channel codes

def heading_bin(degrees):
    """Quadrant code for heading(s) in degrees: [0,90)->85, [90,180)->255,
    [180,270)->170, [270,360)->1.  Accepts scalars or arrays."""
    deg = np.asarray(degrees, dtype=np.float64)
    if np.any(~np.isfinite(deg)) or np.any(deg < 0) or np.any(deg >= 360):
        raise CodecError(f"heading must lie in [0, 360), got {degrees!r}")
    codes = QUADRANT_CODES[(deg // 90).astype(np.int64)]
    return int(codes) if codes.ndim == 0 else codes


def heading_quadrant(degrees) -> np.ndarray:
    """Quadrant index 0..3 (NE, SE, SW, NW)."""
    deg = np.asarray(degrees, dtype=np.float64)
    if np.any(deg < 0) or np.any(deg >= 360):
        raise CodecError("heading must lie in [0, 360)")
    return (deg // 90).astype(np.int64)


def aggregate_heading(bin_counts) -> int:
    """Heading code of the dominant quadrant; 0 when the maximum is shared."""
    counts = np.asarray(bin_counts)
    if counts.shape != (4,):
        raise CodecError("expected four quadrant counts ordered NE, SE, SW, NW")
    if np.any(counts < 0) or counts.sum() == 0:
        raise CodecError("quadrant counts must be nonnegative with at least one probe")
    return int(aggregate_heading_array(counts[None])[0])


def aggregate_heading_array(counts: np.ndarray) -> np.ndarray:
    """Vectorized heading aggregation over ``(..., 4)`` counts.  All-zero rows give 0."""
    counts = np.asarray(counts)
    top = counts.max(axis=-1, keepdims=True)
    n_top = (counts == top).sum(axis=-1)
    code = QUADRANT_CODES[counts.argmax(axis=-1)]
    return np.where((n_top == 1) & (top[..., 0] > 0), code, 0).astype(np.uint8)


def encode_volume(count, params: CodecParams = CodecParams()):
    c = np.asarray(count)
    if np.any(c < 0):
        raise CodecError("probe count must be nonnegative")
    lo, hi = params.volume_cap_min, params.volume_cap_max
    scaled = 1 + 254 * (np.clip(c, lo, hi) - lo) / (hi - lo)
    out = np.where(c == 0, 0, _round_half_away(scaled)).astype(np.uint8)
    return int(out) if out.ndim == 0 else out


def encode_speed(avg_kmh, params: CodecParams = CodecParams()):
    v = np.asarray(avg_kmh, dtype=np.float64)
    if np.any(v < 0):
        raise CodecError("average speed must be nonnegative")
    cap = params.speed_cap_max
    out = _round_half_away(255 * np.minimum(v, cap) / cap).astype(np.uint8)
    return int(out) if out.ndim == 0 else out


def encode_cells(counts: np.ndarray, mean_speed: np.ndarray, quadrant_counts: np.ndarray,
                 params: CodecParams = CodecParams()) -> np.ndarray:
    """Encode per-cell aggregates into the 3-channel uint8 representation.

    ``counts`` and ``mean_speed`` share a shape ``S``; ``quadrant_counts`` is ``S + (4,)``.
    Cells with zero count come out all-zero.
    """
    counts = np.asarray(counts)
    has_data = counts > 0
    out = np.zeros(counts.shape + (3,), dtype=np.uint8)
    out[..., VOLUME] = encode_volume(counts, params)
    out[..., SPEED] = np.where(has_data, encode_speed(np.where(has_data, mean_speed, 0.0), params), 0)
    out[..., HEADING] = np.where(has_data, aggregate_heading_array(quadrant_counts), 0)
    return out


def rasterize_probes(probes: Iterable[ProbePoint], spec: GridSpec,
                     params: CodecParams = CodecParams(), day_index: int | None = None,
                     city: str = "") -> TrafficMovie:
    """Aggregate cell-indexed probe points into one day's traffic movie."""
    probes = list(probes)
    days = {p.day_index for p in probes}
    if len(days) > 1:
        raise CodecError(f"probes span several days: {sorted(days)}")
    if day_index is None:
        day_index = days.pop() if days else 0
    elif days and days != {day_index}:
        raise CodecError(f"probes belong to day {days.pop()}, expected {day_index}")
    if not probes:
        return TrafficMovie(spec, day_index, np.zeros(spec.shape, np.uint8), city, params)

    t = np.array([p.time_bin for p in probes])
    r = np.array([p.row for p in probes])
    c = np.array([p.col for p in probes])
    speed = np.array([p.speed_kmh for p in probes], dtype=np.float64)
    quad = heading_quadrant([p.heading_deg for p in probes])
    if (t.min() < 0 or t.max() >= spec.bins_per_day or r.min() < 0 or r.max() >= spec.height
            or c.min() < 0 or c.max() >= spec.width):
        raise CodecError("probe outside grid bounds")
    if speed.min() < 0:
        raise CodecError("negative probe speed")

    cells = (spec.bins_per_day, spec.height, spec.width)
    flat = np.ravel_multi_index((t, r, c), cells)
    n = int(np.prod(cells))
    counts = np.bincount(flat, minlength=n)
    speed_sum = np.bincount(flat, weights=speed, minlength=n)
    quads = np.bincount(flat * 4 + quad, minlength=n * 4).reshape(n, 4)
    mean_speed = np.divide(speed_sum, counts, out=np.zeros(n), where=counts > 0)
    data = encode_cells(counts, mean_speed, quads, params).reshape(spec.shape)
    return TrafficMovie(spec, day_index, data, city, params)


# ---------------------------------------------------------------- normalization

def normalize_movie(movie) -> np.ndarray:
    """uint8 values to float32 in [0, 1]."""
    data = movie.data if isinstance(movie, TrafficMovie) else np.asarray(movie)
    return data.astype(np.float32) / np.float32(255.0)


def denormalize_movie(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64) * 255.0
    return np.clip(_round_half_away(v), 0, 255).astype(np.uint8)


def snap_heading(value):
    """Nearest valid heading level on the [0,1] scale; ties go to the smaller level."""
    v = np.asarray(value, dtype=np.float64) * 255.0
    dist = np.abs(v[..., None] - HEADING_LEVELS.astype(np.float64))
    # argmin picks the first, i.e. smaller, level on ties
    snapped = HEADING_LEVELS[dist.argmin(axis=-1)].astype(np.float64) / 255.0
    return float(snapped) if snapped.ndim == 0 else snapped


def heading_class_ids(codes) -> np.ndarray:
    """Map heading codes {0,1,85,170,255} to class ids 0..4."""
    codes = np.asarray(codes)
    if not np.isin(codes, HEADING_LEVELS).all():
        raise CodecError("heading target outside the five valid levels")
    lut = np.zeros(256, dtype=np.int64)
    lut[HEADING_LEVELS] = np.arange(5)
    return lut[codes.astype(np.int64)]


# ---------------------------------------------------------------- container I/O

def write_movie(movie: TrafficMovie, path, meta: bool = True) -> Path:
    path = Path(path)
    data = np.ascontiguousarray(movie.data, dtype=np.uint8)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, *data.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes(order="C"))
    if meta:
        sidecar = {"city": movie.city, "day_index": movie.day_index,
                   "codec": asdict(movie.params),
                   "grid": {"cell_size_m": movie.spec.cell_size_m,
                            "bin_minutes": movie.spec.bin_minutes}}
        Path(str(path) + ".meta").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def read_movie(path, day_index: int | None = None) -> TrafficMovie:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise MovieFormatError("header", f"file is {len(raw)} bytes, header needs {_HEADER.size}")
    magic, version, t, h, w, c = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise MovieFormatError("magic", f"expected {MAGIC!r}, found {magic!r}")
    if version != FORMAT_VERSION:
        raise MovieFormatError("version", f"unsupported version {version}")
    if c != 3:
        raise MovieFormatError("channels", f"expected 3, found {c}")
    if min(t, h, w) < 1:
        raise MovieFormatError("dims", f"non-positive dimension in {(t, h, w, c)}")
    expected = t * h * w * c
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise MovieFormatError("payload", f"expected {expected} bytes for dims {(t, h, w, c)}, "
                                          f"found {len(payload)}")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(t, h, w, c).copy()

    city, params, extra = "", CodecParams(), {}
    sidecar = Path(str(path) + ".meta")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        city = meta.get("city", "")
        params = CodecParams(**meta.get("codec", {}))
        extra = meta.get("grid", {})
        if day_index is None:
            day_index = meta.get("day_index")
    spec = GridSpec(height=h, width=w, bins_per_day=t, **extra)
    return TrafficMovie(spec, int(day_index or 0), data, city, params)


def movie_from_array(data: np.ndarray, day_index: int = 0, city: str = "",
                     params: CodecParams = CodecParams(), **spec_kw) -> TrafficMovie:
    t, h, w, _ = data.shape
    return TrafficMovie(GridSpec(height=h, width=w, bins_per_day=t, **spec_kw), day_index,
                        np.asarray(data, dtype=np.uint8), city, params)


def random_movie(rng: np.random.Generator, dims: Sequence[int], density: float = 0.5) -> np.ndarray:
    """Random movie array that respects heading levels and no-data consistency."""
    t, h, w = dims
    data = rng.integers(0, 256, size=(t, h, w, 3), dtype=np.uint8)
    data[..., HEADING] = rng.choice(HEADING_LEVELS, size=(t, h, w))
    empty = rng.random((t, h, w)) > density
    data[empty] = 0
    data[..., VOLUME][~empty] = np.maximum(data[..., VOLUME][~empty], 1)
    return data
