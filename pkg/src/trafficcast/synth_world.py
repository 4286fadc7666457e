"""Synthetic cities, traffic movies and weather tables.

Traffic is a sum of corridor flows modulated by Gaussian rush-hour envelopes,
a weekday/weekend factor and congestion blobs that drift across the grid, so
that the recent past carries real information about the next few bins.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid_codec import CodecParams, GridSpec, TrafficMovie, encode_cells

WEATHER_FIELDS = ("temp_c", "precip_mm", "wind_kmh")
WEATHER_HEADER = ("day", "bin") + WEATHER_FIELDS


class WeatherDataError(LookupError):
    def __init__(self, day: int, time_bin: int, message: str = "missing weather record"):
        super().__init__(f"{message} for day={day}, bin={time_bin}")
        self.day = day
        self.time_bin = time_bin


@dataclass
class CityTemplate:
    spec: GridSpec
    road_mask: np.ndarray       # (H, W) bool
    flow_field: np.ndarray      # (H, W) degrees, NaN off-road
    base_intensity: np.ndarray  # (H, W) expected probes per bin at unit envelope
    free_speed: np.ndarray      # (H, W) km/h, 0 off-road

    def __eq__(self, other):
        if not isinstance(other, CityTemplate):
            return NotImplemented
        return (self.spec == other.spec
                and np.array_equal(self.road_mask, other.road_mask)
                and np.array_equal(self.flow_field, other.flow_field, equal_nan=True)
                and np.array_equal(self.base_intensity, other.base_intensity)
                and np.array_equal(self.free_speed, other.free_speed))


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    num_days: int = 4
    rush_hours: tuple = ((96, 18.0), (210, 24.0))  # (peak bin, width in bins)
    rush_amplitude: float = 1.5
    drift_cells_per_bin: float = 0.5
    noise_level: float = 0.1
    num_blobs: int = 3
    blob_radius: float = 3.0
    blob_strength: float = 1.0
    wave_amplitude: float = 0.0  # platoon waves travelling along the flow at the drift rate
    wave_length_cells: float = 8.0
    weekend_factor: float = 0.6
    week_offset: int = 0

    def __post_init__(self):
        if self.num_days < 1:
            raise ValueError("num_days must be >= 1")
        if self.drift_cells_per_bin < 0:
            raise ValueError("drift_cells_per_bin must be >= 0")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValueError("noise_level must lie in [0, 1]")


@dataclass(frozen=True)
class WeatherRecord:
    day_index: int
    time_bin: int
    temperature_c: float
    precipitation_mm: float
    wind_kmh: float

    def as_array(self) -> np.ndarray:
        return np.array([self.temperature_c, self.precipitation_mm, self.wind_kmh])


@dataclass
class WeatherTable:
    """Weather values for consecutive days; ``values[d, t]`` is (temp, precip, wind)."""
    first_day: int
    values: np.ndarray  # (num_days, bins_per_day, 3), NaN marks a missing record

    @property
    def num_days(self) -> int:
        return self.values.shape[0]

    @property
    def bins_per_day(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return int(np.isfinite(self.values).all(axis=-1).sum())

    def lookup(self, day: int, time_bin: int) -> np.ndarray:
        d = day - self.first_day
        if not (0 <= d < self.num_days and 0 <= time_bin < self.bins_per_day):
            raise WeatherDataError(day, time_bin, "weather record out of table range")
        row = self.values[d, time_bin]
        if not np.isfinite(row).all():
            raise WeatherDataError(day, time_bin)
        return row

    def record(self, day: int, time_bin: int) -> WeatherRecord:
        return WeatherRecord(day, time_bin, *map(float, self.lookup(day, time_bin)))

    def records(self):
        for d in range(self.num_days):
            for t in range(self.bins_per_day):
                if np.isfinite(self.values[d, t]).all():
                    yield WeatherRecord(self.first_day + d, t, *map(float, self.values[d, t]))

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(WEATHER_HEADER)
            for rec in self.records():
                writer.writerow([rec.day_index, rec.time_bin, repr(rec.temperature_c),
                                 repr(rec.precipitation_mm), repr(rec.wind_kmh)])
        return path

    @classmethod
    def read_csv(cls, path, bins_per_day: int | None = None) -> "WeatherTable":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != WEATHER_HEADER:
                raise ValueError(f"weather header must be {','.join(WEATHER_HEADER)}, got {header}")
            rows = [(int(r[0]), int(r[1]), float(r[2]), float(r[3]), float(r[4])) for r in reader if r]
        if not rows:
            raise ValueError(f"weather file {path} has no records")
        days = [r[0] for r in rows]
        first, last = min(days), max(days)
        n_bins = bins_per_day or max(r[1] for r in rows) + 1
        values = np.full((last - first + 1, n_bins, 3), np.nan)
        for day, t, *vals in rows:
            values[day - first, t] = vals
        return cls(first, values)


# ---------------------------------------------------------------- city

def generate_city(seed: int, spec: GridSpec) -> CityTemplate:
    """Grid of straight one-way corridors with a fixed heading each."""
    rng = np.random.default_rng([seed, 0xC17])
    h, w = spec.height, spec.width
    n_rows = max(1, h // 8)
    n_cols = max(1, w // 8)
    rows = np.sort(rng.choice(h, size=min(n_rows, h), replace=False))
    cols = np.sort(rng.choice(w, size=min(n_cols, w), replace=False))

    road = np.zeros((h, w), dtype=bool)
    flow = np.full((h, w), np.nan)
    intensity = np.zeros((h, w))
    speed = np.zeros((h, w))
    # heading drawn inside the quadrant interior keeps corridors away from quadrant edges
    for r in rows:
        quadrant = rng.choice([0, 1, 2, 3])
        flow[r, :] = quadrant * 90 + rng.uniform(15, 75)
        intensity[r, :] = rng.uniform(4, 12) * (1 + 0.3 * np.sin(np.arange(w) / rng.uniform(2, 6)))
        speed[r, :] = rng.uniform(40, 90)
        road[r, :] = True
    for c in cols:
        quadrant = rng.choice([0, 1, 2, 3])
        flow[:, c] = quadrant * 90 + rng.uniform(15, 75)
        intensity[:, c] = rng.uniform(4, 12) * (1 + 0.3 * np.sin(np.arange(h) / rng.uniform(2, 6)))
        speed[:, c] = rng.uniform(40, 90)
        road[:, c] = True
    return CityTemplate(spec, road, flow, intensity, speed)


# ---------------------------------------------------------------- traffic

def rush_envelope(bins: np.ndarray, config: SynthConfig) -> np.ndarray:
    env = np.ones_like(bins, dtype=np.float64)
    for peak, width in config.rush_hours:
        env += config.rush_amplitude * np.exp(-0.5 * ((bins - peak) / width) ** 2)
    return env


def day_factor(day_index: int, config: SynthConfig) -> float:
    return config.weekend_factor if (day_index + config.week_offset) % 7 >= 5 else 1.0


def _blob_field(centers: np.ndarray, strengths: np.ndarray, radius: float, h: int, w: int) -> np.ndarray:
    rr, cc = np.mgrid[0:h, 0:w]
    field_ = np.zeros((h, w))
    for (cy, cx), s in zip(centers, strengths):
        dy = np.abs(rr - cy) % h
        dy = np.minimum(dy, h - dy)
        dx = np.abs(cc - cx) % w
        dx = np.minimum(dx, w - dx)
        field_ += s * np.exp(-(dy ** 2 + dx ** 2) / (2 * radius ** 2))
    return field_


def simulate_day(template: CityTemplate, config: SynthConfig, day_index: int,
                 params: CodecParams = CodecParams(), weather: WeatherTable | None = None,
                 city: str = "synth") -> TrafficMovie:
    if not 0 <= day_index < config.num_days:
        raise ValueError(f"day_index {day_index} outside [0, {config.num_days})")
    spec = template.spec
    h, w, n_bins = spec.height, spec.width, spec.bins_per_day
    rng = np.random.default_rng([config.seed, day_index, 0xDA7])

    centers = rng.uniform([0, 0], [h, w], size=(config.num_blobs, 2))
    angles = rng.uniform(0, 2 * np.pi, size=config.num_blobs)
    velocity = config.drift_cells_per_bin * np.stack([np.sin(angles), np.cos(angles)], axis=1)
    strengths = config.blob_strength * rng.uniform(0.6, 1.0, size=config.num_blobs)
    envelope = rush_envelope(np.arange(n_bins), config) * day_factor(day_index, config)

    road = template.road_mask
    rr, cc = np.mgrid[0:h, 0:w]
    heading = np.deg2rad(np.nan_to_num(template.flow_field))
    along_flow = cc * np.sin(heading) - rr * np.cos(heading)  # rows grow southwards
    wave_phase = rng.uniform(0, 2 * np.pi)
    quadrant = np.where(road, np.nan_to_num(template.flow_field) // 90, 0).astype(np.int64)
    opposite = (quadrant + 2) % 4
    data = np.empty(spec.shape, dtype=np.uint8)
    noise = config.noise_level

    for t in range(n_bins):
        congestion = _blob_field(centers + velocity * t, strengths, config.blob_radius, h, w)
        lam = template.base_intensity * envelope[t] * (1 + congestion)
        if config.wave_amplitude:
            travel = along_flow - config.drift_cells_per_bin * t
            lam = lam * (1 + config.wave_amplitude * np.sin(2 * np.pi * travel / config.wave_length_cells
                                                            + wave_phase))
        if noise > 0:
            lam = lam * np.exp(noise * rng.standard_normal((h, w)) - 0.5 * noise ** 2)
        counts = np.where(road, np.floor(lam + 0.5), 0).astype(np.int64)

        slow = 1 - 0.6 * np.clip(congestion, 0, 1)
        if weather is not None:
            slow = slow * (1 - min(0.3, 0.03 * weather.lookup(day_index, t)[1]))
        mean_speed = template.free_speed * slow
        if noise > 0:
            mean_speed = mean_speed * np.clip(1 + 0.2 * noise * rng.standard_normal((h, w)), 0, None)

        against = rng.binomial(counts, 0.5 * noise) if noise > 0 else np.zeros_like(counts)
        quads = np.zeros((h, w, 4), dtype=np.int64)
        np.put_along_axis(quads, quadrant[..., None], (counts - against)[..., None], axis=-1)
        np.put_along_axis(quads, opposite[..., None], against[..., None], axis=-1)
        data[t] = encode_cells(counts, mean_speed, quads, params)

    return TrafficMovie(spec, day_index, data, city, params)


# ---------------------------------------------------------------- weather

def generate_weather(seed: int, num_days: int, bins_per_day: int, first_day: int = 0,
                     max_temp_step: float = 1.0) -> WeatherTable:
    """Smooth synthetic weather; consecutive temperatures differ by at most ``max_temp_step``."""
    if num_days < 1 or bins_per_day < 1:
        raise ValueError("num_days and bins_per_day must be positive")
    rng = np.random.default_rng([seed, 0x3EA])
    n = num_days * bins_per_day
    t = np.arange(n)
    phase = 2 * np.pi * (t % bins_per_day) / bins_per_day
    day_mean = np.repeat(rng.normal(12, 4, size=num_days), bins_per_day)
    kernel = np.hanning(max(3, bins_per_day // 4))
    day_mean = np.convolve(np.pad(day_mean, len(kernel), mode="edge"), kernel / kernel.sum(),
                           mode="same")[len(kernel):-len(kernel)]
    temp = day_mean - 5 * np.cos(phase - np.pi / 4) + 0.3 * rng.standard_normal(n)
    steps = np.clip(np.diff(temp), -max_temp_step, max_temp_step)
    temp = np.concatenate([[temp[0]], temp[0] + np.cumsum(steps)])

    precip = np.zeros(n)
    for _ in range(rng.poisson(1.5 * num_days)):
        center, width = rng.uniform(0, n), rng.uniform(6, 36)
        precip += rng.uniform(0.5, 6) * np.exp(-0.5 * ((t - center) / width) ** 2)

    wind = np.empty(n)
    level = rng.uniform(5, 20)
    for i in range(n):
        level += 0.05 * (12 - level) + 0.8 * rng.standard_normal()
        wind[i] = level
    wind = np.abs(wind)

    values = np.stack([temp, precip, wind], axis=-1).reshape(num_days, bins_per_day, 3)
    return WeatherTable(first_day, values)
