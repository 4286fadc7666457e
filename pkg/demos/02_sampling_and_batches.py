# coding: utf-8

# # Training windows and batches
#
# A window is `q` input frames followed by 3 target frames.  How many windows
# a day yields depends on the sampling strategy.

# In[1]:

import numpy as np

from trafficcast.exogenous import ExoProvider
from trafficcast.grid_codec import GridSpec
from trafficcast.sampler import (MovieStore, build_epoch_index, count_sequences, enumerate_windows,
                                 iter_batches)
from trafficcast.synth_world import SynthConfig, generate_city, generate_weather, simulate_day
from trafficcast.train_eval import CITY_PROFILES


# With a full year of 285 training days and q = 3:

# In[2]:

for strategy in ("non_overlapping", "all_slots", "like_test"):
    print(f"{strategy:16s}", count_sequences(288, 3, strategy, 285))


# `like_test` only keeps windows whose targets start at the challenge bins.

# In[3]:

for city in ("moscow", "berlin"):
    ws = enumerate_windows([0], 288, 3, "like_test", CITY_PROFILES[city])
    print(city, [w.start for w in ws])

ws = enumerate_windows([0], 12, 3, "non_overlapping")
for w in ws:
    print("inputs", list(w.input_bins), "targets", list(w.output_bins))


# ## Shuffling
#
# Each epoch gets its own permutation, fixed by (seed, epoch).

# In[4]:

windows = enumerate_windows(range(2), 96, 3, "all_slots")
e0 = build_epoch_index(windows, epoch=0, seed=7)
e1 = build_epoch_index(windows, epoch=1, seed=7)
print([w.start for w in e0.windows[:8]])
print([w.start for w in e1.windows[:8]])


# ## Batches
#
# Inputs and targets are float32 in [0, 1].  The exogenous block holds one
# 21-vector per frame: time of day, weekday, current weather and a 3-bin
# forecast.

# In[5]:

spec = GridSpec(16, 16, 96)
city = generate_city(0, spec)
weather = generate_weather(0, 2, 96)
cfg = SynthConfig(seed=0, num_days=2, rush_hours=((40, 6.0),))
store = MovieStore.from_movies([simulate_day(city, cfg, d, weather=weather) for d in range(2)])
exo = ExoProvider(weather, 96)

batch = next(iter_batches(e0, 8, store, exo))
print("inputs", batch.inputs.shape, "targets", batch.targets.shape, "exo", batch.exo.shape)
print("first exo vector:", np.round(batch.exo[0, 0], 2))


# Worker threads assemble batches ahead of the consumer without changing them.

# In[6]:

serial = [c for b in iter_batches(e0, 8, store, exo) for c in b.checksums()]
threaded = [c for b in iter_batches(e0, 8, store, exo, workers=4) for c in b.checksums()]
print("same batches:", serial == threaded)
