import os

import numpy as np
import pytest
import torch
from hypothesis import settings

from trafficcast.grid_codec import GridSpec
from trafficcast.synth_world import SynthConfig, generate_city, generate_weather, simulate_day
from trafficcast.train_eval import Dataset

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)

TINY_MODEL = dict(canvas_size=16, num_blocks=2, base_channels=4, block_multipliers=(1, 2),
                  dropout_rate=0.0, gru_encoder_units=(32, 16), gru_decoder_units=(16, 32))


def tiny_world(days=3, h=16, w=16, bins=48, seed=3, drift=1.0):
    spec = GridSpec(h, w, bins)
    cfg = SynthConfig(seed=seed, num_days=days, rush_hours=((20, 6.0),), drift_cells_per_bin=drift,
                      noise_level=0.02, num_blobs=3, blob_strength=2.0, wave_amplitude=0.5)
    city = generate_city(seed, spec)
    weather = generate_weather(seed, days, bins)
    movies = [simulate_day(city, cfg, d, weather=weather) for d in range(days)]
    return movies, weather


@pytest.fixture(scope="session")
def tiny_movies():
    return tiny_world()


@pytest.fixture
def tiny_dataset(tiny_movies):
    movies, weather = tiny_movies
    return Dataset.from_movies(movies[:-1], movies[-1:], weather, test_bins=(12, 20, 30, 40))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
