"""Exogenous feature vectors: time of day, weekday and weather (current + 3-bin forecast).

Layout of one vector (length 21)::

    [sin_tod, cos_tod, dow_0 .. dow_6, weather_now(3), forecast_t+1(3), forecast_t+2(3), forecast_t+3(3)]

Weather fields are temperature, precipitation and wind, min-max scaled to [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .synth_world import WeatherTable

EXO_DIM = 21
FORECAST_STEPS = 3


class ExogenousError(ValueError):
    pass


@dataclass(frozen=True)
class CalendarStamp:
    day_index: int
    time_bin: int
    day_of_week: int

    @classmethod
    def from_day(cls, day_index: int, time_bin: int, week_offset: int = 0) -> "CalendarStamp":
        return cls(day_index, time_bin, (day_index + week_offset) % 7)


@dataclass(frozen=True)
class WeatherScaling:
    lower: tuple = (-20.0, 0.0, 0.0)
    upper: tuple = (40.0, 20.0, 80.0)

    def apply(self, values: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        return np.clip((values - lo) / (hi - lo), 0.0, 1.0)


def encode_time_of_day(time_bin: int, bins_per_day: int) -> tuple[float, float]:
    if not 0 <= time_bin < bins_per_day:
        raise ExogenousError(f"time_bin {time_bin} outside [0, {bins_per_day})")
    angle = 2 * np.pi * time_bin / bins_per_day
    return float(np.sin(angle)), float(np.cos(angle))


def encode_day_of_week(dow: int) -> np.ndarray:
    if not 0 <= dow <= 6:
        raise ExogenousError(f"day of week must be in 0..6, got {dow}")
    out = np.zeros(7)
    out[dow] = 1.0
    return out


# (table, day, bin) -> raw weather row; the default reads the table directly, i.e. a perfect forecast
ForecastSource = Callable[[WeatherTable, int, int], np.ndarray]


def perfect_forecast(table: WeatherTable, day: int, time_bin: int) -> np.ndarray:
    return table.lookup(day, time_bin)


def assemble_exo(stamp: CalendarStamp, weather: WeatherTable, scaling: WeatherScaling = WeatherScaling(),
                 bins_per_day: int | None = None, forecast: ForecastSource = perfect_forecast) -> np.ndarray:
    n_bins = bins_per_day or weather.bins_per_day
    sin_t, cos_t = encode_time_of_day(stamp.time_bin, n_bins)
    now = scaling.apply(weather.lookup(stamp.day_index, stamp.time_bin))
    ahead = []
    for k in range(1, FORECAST_STEPS + 1):
        # bins past the end of the day repeat the last record
        b = min(stamp.time_bin + k, n_bins - 1)
        ahead.append(scaling.apply(forecast(weather, stamp.day_index, b)))
    vec = np.concatenate([[sin_t, cos_t], encode_day_of_week(stamp.day_of_week), now, *ahead])
    assert vec.shape == (EXO_DIM,)
    return vec


class ExoProvider:
    """Per-frame exogenous vectors for sequence windows, cached per (day, bin).

    Without a weather table the weather blocks are left at zero and only the
    calendar features carry information.
    """

    def __init__(self, weather: WeatherTable | None, bins_per_day: int, week_offset: int = 0,
                 scaling: WeatherScaling = WeatherScaling(), forecast: ForecastSource = perfect_forecast):
        self.weather = weather
        self.bins_per_day = bins_per_day
        self.week_offset = week_offset
        self.scaling = scaling
        self.forecast = forecast
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def vector(self, day: int, time_bin: int) -> np.ndarray:
        key = (day, time_bin)
        vec = self._cache.get(key)
        if vec is None:
            stamp = CalendarStamp.from_day(day, time_bin, self.week_offset)
            if self.weather is None:
                vec = np.zeros(EXO_DIM)
                vec[:2] = encode_time_of_day(time_bin, self.bins_per_day)
                vec[2:9] = encode_day_of_week(stamp.day_of_week)
            else:
                vec = assemble_exo(stamp, self.weather, self.scaling, self.bins_per_day, self.forecast)
            self._cache[key] = vec
        return vec

    def for_bins(self, day: int, bins) -> np.ndarray:
        return np.stack([self.vector(day, int(b)) for b in bins]).astype(np.float32)

    def __call__(self, window) -> np.ndarray:
        """(q + 3, EXO_DIM) vectors for the input bins followed by the target bins."""
        return self.for_bins(window.day_index, range(window.start - window.q, window.start + window.output_len))
