"""Acceptance criteria 1-9, one PASS/FAIL line each.

Run under pytest (lines appear in the terminal summary) or directly with
``python3 tests/test_acceptance.py``.
"""
import itertools
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
from oracles import aggregate_oracle, heading_oracle, mse_by_channel_horizon_oracle, mse_oracle, windows_oracle  # noqa: E402

from trafficcast.exogenous import EXO_DIM, ExoProvider
from trafficcast.grid_codec import (GridSpec, aggregate_heading, denormalize_movie, heading_bin, movie_from_array,
                                    normalize_movie, random_movie, read_movie, write_movie)
from trafficcast.model_zoo import PredictionBundle, build_model, convlstm_forward, load_compatible, rae_forward
from trafficcast.objectives import TargetBundle, heading_ce_loss, mse_metric, rae_loss, training_loss
from trafficcast.sampler import (Batch, MovieStore, build_epoch_index, count_sequences, enumerate_windows,
                                 iter_batches)
from trafficcast.synth_world import SynthConfig, generate_city, generate_weather, simulate_day
from trafficcast.train_eval import (CITY_PROFILES, Checkpoint, Dataset, EvalProtocol, ModelPredictor, TrainConfig,
                                    evaluate_challenge, evaluate_windows, persistence_baseline, train)

RESULTS = {}

DESK_RAE = dict(canvas_size=32, num_blocks=3, base_channels=8, block_multipliers=(1, 2, 4), dropout_rate=0.0,
                gru_encoder_units=(256, 64, 32), gru_decoder_units=(32, 64, 256))
TINY_RAE = dict(canvas_size=16, num_blocks=2, base_channels=4, block_multipliers=(1, 2), dropout_rate=0.0,
                gru_encoder_units=(32, 16), gru_decoder_units=(16, 32), hidden_units=(4, 4))


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    RESULTS[n] = line
    print(line, flush=True)
    return ok


# ---------------------------------------------------------------- 1

def check_sampling_counts():
    t0 = time.perf_counter()
    moscow = CITY_PROFILES["moscow"]
    counts = {s: len(enumerate_windows(range(285), 288, 3, s, moscow))
              for s in ("non_overlapping", "all_slots", "like_test")}
    closed = {s: count_sequences(288, 3, s, 285) for s in counts}
    reference_ok = counts == closed == {"non_overlapping": 13680, "all_slots": 80655, "like_test": 1425}
    elapsed = time.perf_counter() - t0
    mismatches = 0
    for d in range(1, 51):
        for q in range(1, 7):
            for strategy in ("non_overlapping", "all_slots", "like_test"):
                bins = [b for b in (3, 10, 17, 30, 45) if b <= d]
                ref = windows_oracle([0], d, q, strategy, bins)
                if d < q + 3 and strategy != "like_test":
                    continue
                got = enumerate_windows([0], d, q, strategy, bins)
                mismatches += [(w.day_index, w.start) for w in got] != ref
    ok = reference_ok and mismatches == 0 and elapsed < 1.0
    return record(1, ok, f"counts {counts}, count identities {elapsed:.3f}s, "
                         f"brute-force mismatches {mismatches} over D<=50, q<=6")


# ---------------------------------------------------------------- 2

def check_codec():
    bad_heading = sum(heading_bin(d) != heading_oracle(d) for d in range(360))
    bad_agg = 0
    for c in itertools.product(range(5), repeat=4):
        if sum(c) == 0:
            continue
        got = aggregate_heading(c)
        tie = list(c).count(max(c)) > 1
        bad_agg += (got == 0) != tie or got != aggregate_oracle(c)
    values = np.arange(256, dtype=np.uint8)
    norm_ok = np.array_equal(denormalize_movie(normalize_movie(values)), values)
    rng = np.random.default_rng(2024)
    bad_files = 0
    with tempfile.TemporaryDirectory() as tmp:
        for i in range(100):
            dims = tuple(int(x) for x in rng.integers(1, 10, size=3))
            m = movie_from_array(random_movie(rng, dims, rng.random()), day_index=i)
            path = write_movie(m, Path(tmp) / f"{i}.t4cm")
            back = read_movie(path)
            bad_files += back.data.tobytes() != m.data.tobytes() or back.data.shape != m.data.shape
    ok = bad_heading == 0 and bad_agg == 0 and norm_ok and bad_files == 0
    return record(2, ok, f"heading mismatches {bad_heading}/360, aggregate mismatches {bad_agg}/624, "
                         f"normalize identity {norm_ok}, file round-trip failures {bad_files}/100")


# ---------------------------------------------------------------- 3

def check_losses():
    pred = PredictionBundle(torch.tensor([[0.2, 0.4], [0.6, 0.8]], dtype=torch.float64),
                            torch.tensor([[1.0, -1.0], [0.5, 0.0]], dtype=torch.float64))
    tgt = TargetBundle(torch.tensor([[0.0, 0.4], [1.0, 0.5]], dtype=torch.float64),
                       torch.tensor([[0.0, 0.0], [0.5, 2.0]], dtype=torch.float64))
    frame_l2 = (0.2 ** 2 + 0 + 0.4 ** 2 + 0.3 ** 2) / 4
    emb_l2 = (1 + 1 + 0 + 4) / 4
    hand = 0.5 * frame_l2 + 0.5 * emb_l2
    loss_err = abs(rae_loss(pred, tgt).item() - hand)
    ce_err = abs(heading_ce_loss(torch.zeros(4, 3, 5), torch.randint(0, 5, (4, 3))).item() - math.log(5))
    rng = np.random.default_rng(5)
    p, t = rng.random((2, 3, 4, 3, 3)), rng.random((2, 3, 4, 3, 3))
    rep = mse_metric(p, t)
    mse_err = abs(rep.mse_total - mse_oracle(p, t))
    table_err = float(np.abs(rep.mse_by_channel_and_horizon - np.array(mse_by_channel_horizon_oracle(p, t))).max())
    recombined = float((rep.mse_by_channel_and_horizon * rep.counts).sum() / rep.counts.sum())
    recombine_err = abs(recombined - rep.mse_total)
    errs = [loss_err, ce_err, mse_err, table_err, recombine_err]
    return record(3, max(errs) <= 1e-6, "abs errors: dual loss {:.1e}, uniform CE vs ln5 {:.1e}, mse {:.1e}, "
                                        "breakdown {:.1e}, recombination {:.1e}".format(*errs))


# ---------------------------------------------------------------- 4

def _batch(b, q, h, w, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return Batch(rng.random((b, q, h, w, 3)).astype(dtype), rng.random((b, 3, h, w, 3)).astype(dtype),
                 rng.random((b, q + 3, EXO_DIM)).astype(dtype), [])


def gradient_check(n_params=20, seed=5):
    torch.manual_seed(seed)
    cfg = {k: v for k, v in TINY_RAE.items() if k != "hidden_units"}
    model = build_model("rae_all", grid_h=16, grid_w=16, **cfg).double()
    batch = _batch(2, 3, 16, 16, seed=6, dtype=np.float64)
    x, y, e = map(torch.as_tensor, (batch.inputs, batch.targets, batch.exo))
    loss_fn = lambda: training_loss(model(x, e, y), y)
    model.zero_grad()
    loss_fn().backward()
    params = [(n, p) for n, p in model.named_parameters() if p.grad is not None]
    rng = np.random.default_rng(0)
    worst, checked, eps = 0.0, 0, 1e-6
    while checked < n_params:
        _, p = params[int(rng.integers(len(params)))]
        flat = p.data.view(-1)
        i = int(rng.integers(flat.numel()))
        g = p.grad.view(-1)[i].item()
        if abs(g) < 1e-7:
            continue
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
        num = (up - down) / (2 * eps)
        worst = max(worst, abs(g - num) / max(abs(g), abs(num)))
        checked += 1
    return worst, checked


def check_shapes_and_gradients():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    shapes = {}
    cases = [(32, (32, 32), 3), (64, (64, 64), 4)]
    skipped_512 = bool(os.environ.get("CI"))
    for canvas, grid, blocks in cases:
        rae = build_model("rae_all", canvas_size=canvas, grid_h=grid[0], grid_w=grid[1], num_blocks=blocks,
                          base_channels=4, block_multipliers=(1, 2, 4, 4)[:blocks], dropout_rate=0.0,
                          gru_encoder_units=(64, 16), gru_decoder_units=(16, 64))
        lstm = build_model("convlstm", grid_h=grid[0], grid_w=grid[1], hidden_units=(4, 4))
        b = _batch(2, 3, *grid)
        with torch.no_grad():
            shapes[canvas] = (tuple(rae_forward(b, rae).frames.shape), tuple(convlstm_forward(b, lstm).frames.shape))
    if not skipped_512:
        rae = build_model("rae_all").eval()
        lstm = build_model("convlstm", hidden_units=(4, 4))
        b = _batch(1, 3, 495, 436)
        with torch.no_grad():
            shapes[512] = (tuple(rae_forward(b, rae).frames.shape), tuple(convlstm_forward(b, lstm).frames.shape))
    expect = {32: (2, 3, 32, 32, 3), 64: (2, 3, 64, 64, 3), 512: (1, 3, 495, 436, 3)}
    shape_ok = all(r == l == expect[c] for c, (r, l) in shapes.items())
    worst, checked = gradient_check()
    elapsed = time.perf_counter() - t0
    ok = shape_ok and worst < 1e-3 and checked >= 20 and elapsed < 300
    return record(4, ok, f"shapes {shapes}{' (512 skipped on CI)' if skipped_512 else ''}; gradient check "
                         f"{checked} params, worst rel err {worst:.2e}; {elapsed:.1f}s")


# ---------------------------------------------------------------- 5

def learnability_world():
    spec = GridSpec(32, 32, 288)
    cfg = SynthConfig(seed=1, num_days=4, drift_cells_per_bin=1.0, noise_level=0.02, num_blobs=6,
                      blob_strength=3.0, rush_hours=((96, 8.0), (210, 10.0)), rush_amplitude=2.0,
                      wave_amplitude=0.6, wave_length_cells=8.0)
    city = generate_city(1, spec)
    weather = generate_weather(1, 4, 288)
    return Dataset.from_movies([simulate_day(city, cfg, d, weather=weather) for d in range(4)], [], weather)


def train_until(ds, windows, persistence, variant, model, bar, max_epochs, lr, tmp):
    """Train one epoch at a time (resuming from the last checkpoint) until the bar is met."""
    ckpt_path = Path(tmp) / f"{variant}.pt"
    ratios = []
    for epoch in range(max_epochs):
        tc = TrainConfig(variant=variant, strategy="all_slots", q=3, batch_size=8, epochs=1, learning_rate=lr,
                         seed=0, model=model, validate=False,
                         init_checkpoint=str(ckpt_path) if epoch else None)
        ckpt = train(tc, ds)
        ckpt.save(ckpt_path)
        mse = evaluate_windows(ModelPredictor(ckpt.build_model()), windows, ds.train, ds.exo).mse_total
        ratios.append(mse / persistence)
        if ratios[-1] < bar:
            break
    return ratios


def check_learnability(max_epochs=30):
    t0 = time.perf_counter()
    ds = learnability_world()
    windows = enumerate_windows(ds.train.days(), 288, 3, "all_slots")
    persistence = evaluate_windows(lambda b: persistence_baseline(b).frames, windows, ds.train, ds.exo).mse_total
    with tempfile.TemporaryDirectory() as tmp:
        rae = train_until(ds, windows, persistence, "rae_all", DESK_RAE, 0.5, max_epochs, 2e-3, tmp)
        lstm = train_until(ds, windows, persistence, "convlstm", {"hidden_units": (8, 16, 16)}, 1.0,
                           max_epochs, 2e-3, tmp)
    elapsed = time.perf_counter() - t0
    ok = rae[-1] < 0.5 and lstm[-1] < 1.0 and elapsed < 900
    return record(5, ok, f"persistence mse {persistence:.3e}; rae_all {rae[-1]:.3f}x after {len(rae)} epochs; "
                         f"convlstm {lstm[-1]:.3f}x after {len(lstm)} epochs; {elapsed:.0f}s")


# ---------------------------------------------------------------- 6

def check_horizons():
    spec = GridSpec(24, 24, 288)
    cfg = SynthConfig(seed=3, num_days=1, drift_cells_per_bin=1.0, noise_level=0.0, num_blobs=5,
                      blob_strength=3.0, wave_amplitude=0.5)
    movie = simulate_day(generate_city(3, spec), cfg, 0)
    ds = Dataset.from_movies([movie])
    windows = enumerate_windows([0], 288, 3, "all_slots")
    rep = evaluate_windows(lambda b: persistence_baseline(b).frames, windows, ds.train, ds.exo)
    h = rep.mse_by_horizon
    return record(6, bool(h[0] < h[1] < h[2]), f"persistence mse at +5/+10/+15 min: {h[0]:.3e} < {h[1]:.3e} < {h[2]:.3e}")


# ---------------------------------------------------------------- 7

def check_pipeline():
    spec = GridSpec(16, 16, 96)
    cfg = SynthConfig(seed=4, num_days=3, drift_cells_per_bin=1.0)
    city = generate_city(4, spec)
    weather = generate_weather(4, 3, 96)
    store = MovieStore.from_movies([simulate_day(city, cfg, d, weather=weather) for d in range(3)])
    exo = ExoProvider(weather, 96)
    windows = enumerate_windows(range(3), 96, 3, "all_slots")
    index = build_epoch_index(windows, 1, 42)
    serial = [c for b in iter_batches(index, 16, store, exo, workers=0) for c in b.checksums()]
    parallel = [c for b in iter_batches(index, 16, store, exo, workers=4) for c in b.checksums()]
    same = sorted(serial) == sorted(parallel) and len(serial) == len(windows)
    perm = all(sorted(build_epoch_index(windows, e, 42).windows) == sorted(windows) for e in range(3))
    determ = all(build_epoch_index(windows, e, 42).windows == build_epoch_index(windows, e, 42).windows
                 for e in range(3))
    differ = build_epoch_index(windows, 0, 42).windows != build_epoch_index(windows, 1, 42).windows
    ok = same and perm and determ and differ
    return record(7, ok, f"{len(serial)} windows, workers=4 multiset equal {same}; shuffles are permutations {perm}, "
                         f"deterministic {determ}, vary by epoch {differ}")


# ---------------------------------------------------------------- 8

def check_finetune():
    spec = GridSpec(16, 16, 48)
    cfg = SynthConfig(seed=5, num_days=3, rush_hours=((20, 6.0),), drift_cells_per_bin=1.0, wave_amplitude=0.5)
    city = generate_city(5, spec)
    weather = generate_weather(5, 3, 48)
    movies = [simulate_day(city, cfg, d, weather=weather) for d in range(3)]
    ds = Dataset.from_movies(movies[:2], movies[2:], weather)

    def tc(variant, epochs, init=None):
        return TrainConfig(variant=variant, strategy="non_overlapping", q=3, batch_size=4, epochs=epochs,
                           seed=11, model=dict(TINY_RAE), init_checkpoint=init)

    with tempfile.TemporaryDirectory() as tmp:
        straight = train(tc("rae_all", 3), ds)
        train(tc("rae_all", 2), ds, Path(tmp) / "two")
        resumed = train(tc("rae_all", 1, str(Path(tmp) / "two/checkpoints/last.pt")), ds)
        identical = straight.model_state.keys() == resumed.model_state.keys() and all(
            torch.equal(straight.model_state[k], resumed.model_state[k]) for k in straight.model_state)
        train(tc("rae_not_in", 2), ds, Path(tmp) / "not_in")
        warm = train(tc("rae_all", 1, str(Path(tmp) / "not_in/checkpoints/last.pt")), ds)
        fresh = build_model("rae_all", grid_h=16, grid_w=16,
                            **{k: v for k, v in TINY_RAE.items() if k != "hidden_units"})
        loaded, skipped = load_compatible(fresh, Checkpoint.load(Path(tmp) / "not_in/checkpoints/last.pt").model_state)
    warm_ok = warm.epoch_notation == "2+1" and math.isfinite(warm.history[-1]["train_loss"]) \
        and skipped == ["input_skip.weight"]
    return record(8, identical and warm_ok, f"2+1 resume bit-identical to 3 straight: {identical}; rae_not_in -> "
                                            f"rae_all warm start {warm.epoch_notation} epochs, new tensors {skipped}")


# ---------------------------------------------------------------- 9

def check_protocol():
    spec = GridSpec(8, 8, 288)
    cfg = SynthConfig(seed=6, num_days=2, drift_cells_per_bin=1.0)
    city = generate_city(6, spec)
    store = MovieStore.from_movies([simulate_day(city, cfg, d) for d in range(2)])
    exo = ExoProvider(None, 288)
    details, ok = [], True
    for name, expect in (("moscow", {57, 114, 174, 222, 258}), ("berlin", {30, 69, 126, 186, 234})):
        protocol = EvalProtocol.for_city(name)
        protocol.validate(288)
        rep = evaluate_challenge(lambda b: persistence_baseline(b).frames, store, protocol, exo, q=3)
        starts = {s for _, s in rep.blocks}
        n_blocks = len(rep.blocks)
        elements = rep.num_elements
        foot = 2 * 5 * 3 * 8 * 8 * 3
        per_cell = rep.counts.sum()
        ok &= starts == expect and n_blocks == 2 * 5 and elements == foot == per_cell \
            and rep.heading_total == foot // 3
        details.append(f"{name} bins {sorted(starts)}, {n_blocks} blocks, {elements} elements (expect {foot})")
    return record(9, ok, "; ".join(details))


CHECKS = [check_sampling_counts, check_codec, check_losses, check_shapes_and_gradients, check_learnability,
          check_horizons, check_pipeline, check_finetune, check_protocol]


@pytest.mark.parametrize("n", range(1, 10))
def test_criterion(n):
    if n == 5:
        pytest.importorskip("torch")
    assert CHECKS[n - 1](), RESULTS.get(n)


if __name__ == "__main__":
    torch.set_num_threads(1)
    results = [check() for check in CHECKS]
    print(f"{sum(results)}/{len(results)} criteria pass")
    sys.exit(0 if all(results) else 1)
