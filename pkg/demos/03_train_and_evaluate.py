# coding: utf-8

# # Training a small recurrent autoencoder
#
# Desk-scale run: a 32x32 synthetic city, 3 training days and 1 validation
# day.  We compare the autoencoder against the persistence baseline, which
# just repeats the last frame.  Takes a few minutes on one CPU.

# In[1]:

import tempfile
from pathlib import Path

import torch

from trafficcast.grid_codec import GridSpec
from trafficcast.synth_world import SynthConfig, generate_city, generate_weather, simulate_day
from trafficcast.train_eval import (Dataset, EvalProtocol, ModelPredictor, RunSummary, TrainConfig,
                                    evaluate_challenge, persistence_baseline, report_tables, train)

torch.set_num_threads(1)


# In[2]:

spec = GridSpec(32, 32, 288)
cfg = SynthConfig(seed=1, num_days=4, drift_cells_per_bin=1.0, noise_level=0.02, num_blobs=6,
                  blob_strength=3.0, rush_hours=((96, 8.0), (210, 10.0)), rush_amplitude=2.0,
                  wave_amplitude=0.6)
city = generate_city(1, spec)
weather = generate_weather(1, 4, 288)
movies = [simulate_day(city, cfg, d, weather=weather) for d in range(4)]
ds = Dataset.from_movies(movies[:3], movies[3:], weather)


# Model: three conv blocks down to a 4x4 bottleneck, a GRU stack of
# (256, 64, 32) units and a mirrored decoder.

# In[3]:

model = dict(canvas_size=32, num_blocks=3, base_channels=8, block_multipliers=(1, 2, 4), dropout_rate=0.0,
             gru_encoder_units=(256, 64, 32), gru_decoder_units=(32, 64, 256))
tc = TrainConfig(variant="rae_all", strategy="all_slots", q=3, batch_size=8, epochs=4, learning_rate=2e-3,
                 model=model)
run_dir = Path(tempfile.mkdtemp()) / "rae_all"
ckpt = train(tc, ds, run_dir, progress=lambda row: print(row))


# ## Challenge protocol
#
# Five one-hour blocks per day; the model sees the most recent 3 of the 12
# input bins and predicts 5, 10 and 15 minutes ahead.

# In[4]:

protocol = EvalProtocol.for_city("moscow")
rae = evaluate_challenge(ModelPredictor(ckpt.build_model()), ds.val, protocol, ds.exo)
base = evaluate_challenge(lambda b: persistence_baseline(b).frames, ds.val, protocol, ds.exo, q=3)
print(rae.to_table("rae_all"))
print(base.to_table("persistence"))


# In[5]:

out = report_tables([RunSummary("rae_all", "synth", rae, ckpt.epoch_notation, ckpt.history),
                     RunSummary("persistence", "synth", base, "0")], run_dir.parent / "tables")
for name, path in out.items():
    print(name, path)
print(out["table1"].read_text())
