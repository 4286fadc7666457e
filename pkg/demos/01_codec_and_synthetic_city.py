# coding: utf-8

# # Traffic movies from probes and from a synthetic city
#
# A traffic movie is one city-day on a grid: `(bins, height, width, 3)` uint8
# with channels speed, volume and heading.  We first build one by hand from a
# few GPS probes, then let the synthetic city generate whole days.

# In[1]:

import tempfile
from pathlib import Path

import numpy as np

from trafficcast.grid_codec import (GridSpec, ProbePoint, HEADING, VOLUME, SPEED, rasterize_probes,
                                    heading_bin, normalize_movie, read_movie, write_movie)
from trafficcast.synth_world import SynthConfig, generate_city, generate_weather, simulate_day


# Headings fall into four quadrants.  0 is kept for "no data or undecided".

# In[2]:

for deg in (0, 45, 90, 135, 200, 300):
    print(deg, "->", heading_bin(deg))


# ## Rasterizing probes
#
# Three cars in one cell, two of them heading north-east, one south-east.
# The majority wins.  A cell with one car each way gets heading 0.

# In[3]:

spec = GridSpec(height=4, width=4, bins_per_day=6)
probes = [
    ProbePoint(0, 2, 1, 1, 50.0, 30.0),
    ProbePoint(0, 2, 1, 1, 70.0, 60.0),
    ProbePoint(0, 2, 1, 1, 30.0, 120.0),
    ProbePoint(0, 3, 0, 2, 80.0, 10.0),
    ProbePoint(0, 3, 0, 2, 80.0, 100.0),
]
movie = rasterize_probes(probes, spec)
print("cell (bin 2, 1, 1):", movie.data[2, 1, 1])
print("cell (bin 3, 0, 2):", movie.data[3, 0, 2])
movie.check_invariants()


# ## A synthetic city
#
# One-way corridors carry traffic whose intensity follows rush hours, drifting
# congestion blobs and platoon waves travelling along each corridor.

# In[4]:

spec = GridSpec(32, 32, 288)
city = generate_city(seed=1, spec=spec)
cfg = SynthConfig(seed=1, num_days=2, drift_cells_per_bin=1.0, noise_level=0.02, num_blobs=6,
                  blob_strength=3.0, rush_hours=((96, 8.0), (210, 10.0)), rush_amplitude=2.0,
                  wave_amplitude=0.6)
weather = generate_weather(seed=1, num_days=2, bins_per_day=288)
day = simulate_day(city, cfg, 0, weather=weather)
print("road cells:", int(city.road_mask.sum()), "of", city.road_mask.size)


# Mean volume over the day peaks at the two rush hours.

# In[5]:

volume = day.data[..., VOLUME].astype(float).mean(axis=(1, 2))
for b in range(0, 288, 24):
    print(f"{b // 12:02d}:00  {'#' * int(volume[b] / 2)}")


# Speeds drop where congestion blobs pass; headings only take the five levels.

# In[6]:

print("speed range:", day.data[..., SPEED].min(), day.data[..., SPEED].max())
print("heading levels:", np.unique(day.data[..., HEADING]))


# ## Files
#
# Movies go to a small binary container with a JSON sidecar; reading it back
# gives the identical array.  Models see values divided by 255.

# In[7]:

with tempfile.TemporaryDirectory() as tmp:
    path = write_movie(day, Path(tmp) / "day000.t4cm")
    print(path.stat().st_size, "bytes")
    back = read_movie(path)
    print("identical:", back == day)

x = normalize_movie(day)
print(x.dtype, x.min(), x.max())
