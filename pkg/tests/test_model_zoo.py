import os

import numpy as np
import pytest
import torch

from conftest import TINY_MODEL
from trafficcast.exogenous import EXO_DIM
from trafficcast.model_zoo import (ConvLSTMForecaster, FrameDecoder, FrameEncoder, ModelConfig, ModelConfigError,
                                   RecurrentAutoencoder, SkipStack, build_model, convlstm_forward,
                                   load_compatible, rae_forward)
from trafficcast.objectives import training_loss
from trafficcast.sampler import Batch


def make_batch(b, q, h, w, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return Batch(rng.random((b, q, h, w, 3)).astype(dtype), rng.random((b, 3, h, w, 3)).astype(dtype),
                 rng.random((b, q + 3, EXO_DIM)).astype(dtype), [])


@pytest.mark.parametrize("canvas,grid,blocks", [(32, (32, 32), 3), (64, (60, 52), 4)])
@pytest.mark.parametrize("variant", ["rae_all", "rae_not_in", "rae_not_exo", "rae_clf"])
def test_rae_shapes(canvas, grid, blocks, variant):
    torch.manual_seed(0)
    model = build_model(variant, canvas_size=canvas, grid_h=grid[0], grid_w=grid[1], num_blocks=blocks,
                        base_channels=4, block_multipliers=[1, 2, 4, 4][:blocks], dropout_rate=0.0,
                        gru_encoder_units=(64, 16), gru_decoder_units=(16, 64))
    batch = make_batch(2, 3, *grid)
    out = rae_forward(batch, model, with_targets=True)
    assert out.frames.shape == (2, 3, *grid, 3)
    assert out.embeddings.shape == (2, 3, 64) and out.target_embeddings.shape == (2, 3, 64)
    assert (out.frames >= 0).all()
    if variant == "rae_clf":
        assert out.aux_heading_logits.shape == (2, 3, *grid, 5)
    else:
        assert out.aux_heading_logits is None


@pytest.mark.parametrize("canvas,grid", [(32, (32, 32)), (64, (60, 52))])
@pytest.mark.parametrize("with_clf", [False, True])
def test_convlstm_shapes(canvas, grid, with_clf):
    torch.manual_seed(0)
    model = build_model("convlstm_clf" if with_clf else "convlstm", grid_h=grid[0], grid_w=grid[1],
                        hidden_units=(4, 4), canvas_size=canvas)
    out = convlstm_forward(make_batch(2, 4, *grid), model)
    assert out.frames.shape == (2, 3, *grid, 3)
    assert (out.frames >= 0).all()
    assert out.embeddings is None
    assert (out.aux_heading_logits is not None) == with_clf
    if with_clf:
        assert out.aux_heading_logits.shape == (2, 3, *grid, 5)


@pytest.mark.skipif(bool(os.environ.get("CI")), reason="full-size model is too heavy for CI")
def test_full_size_shapes():
    torch.manual_seed(0)
    cfg = ModelConfig()
    enc = FrameEncoder(cfg).eval()
    with torch.no_grad():
        _, skips = enc(torch.zeros(1, 3, 512, 512))
    assert [s.shape[-1] // 2 for s in skips] == [256, 128, 64, 32, 16, 8]
    assert [s.shape[1] for s in skips] == [16, 32, 64, 128, 128, 32]
    model = build_model("rae_all").eval()
    with torch.no_grad():
        out = rae_forward(make_batch(1, 3, 495, 436), model)
    assert out.frames.shape == (1, 3, 495, 436, 3)


def test_encoder_halving_trace():
    cfg = ModelConfig(canvas_size=64, grid_h=64, grid_w=64, num_blocks=4, base_channels=2,
                      block_multipliers=(1, 2, 4, 8), gru_encoder_units=(8,), gru_decoder_units=(8,))
    x, skips = FrameEncoder(cfg)(torch.zeros(1, 3, 64, 64))
    assert [s.shape[-1] for s in skips] == [64, 32, 16, 8]
    assert x.shape == (1, 16, 4, 4)


def tiny(variant="rae_all", **kw):
    torch.manual_seed(1)
    return build_model(variant, grid_h=16, grid_w=16, **{**TINY_MODEL, **kw})


def test_identical_frames_identical_embeddings():
    model = tiny().eval()
    frame = torch.rand(1, 16, 16, 3)
    exo = torch.rand(1, EXO_DIM)
    with torch.no_grad():
        a, _ = model.encode_frame(torch.cat([frame, frame]), torch.cat([exo, exo]))
    assert torch.equal(a[0], a[1])


def test_encode_sequence_order_matters_and_q1():
    model = tiny().eval()
    x = torch.rand(2, 3, 16, 16, 3)
    exo = torch.rand(2, 3, EXO_DIM)
    with torch.no_grad():
        s1, _, sk = model.encode_sequence(x, exo)
        s2, _, _ = model.encode_sequence(x.flip(1), exo.flip(1))
        s3, last, _ = model.encode_sequence(x[:, :1], exo[:, :1])
    assert any(not torch.allclose(a, b) for a, b in zip(s1, s2))
    assert [s.shape for s in s3] == [(2, 32), (2, 16)]
    assert sk.sizes() == [16, 8]
    assert sk.frame.shape == (2, 3, 16, 16)


def test_predict_embeddings_zero_state_zero_weights():
    model = tiny()
    with torch.no_grad():
        for p in model.rnn_decoder.parameters():
            p.zero_()
        out = model.predict_embeddings([torch.zeros(2, 32), torch.zeros(2, 16)], torch.zeros(2, 32))
    assert out.shape == (2, 3, 32)
    assert not out.any()


def test_decode_zero_inputs_gives_zero_frames():
    model = tiny().eval()
    skips = SkipStack([torch.zeros(1, 4, 16, 16), torch.zeros(1, 8, 8, 8)], torch.zeros(1, 3, 16, 16))
    with torch.no_grad():
        frames, _ = model.decode_frames(torch.zeros(1, 3, 32), skips)
    assert frames.shape == (1, 3, 16, 16, 3)
    assert not frames.any()


def test_not_exo_ignores_exo():
    model = tiny("rae_not_exo").eval()
    b1 = make_batch(2, 3, 16, 16, seed=3)
    b2 = Batch(b1.inputs, b1.targets, b1.exo + 5.0, [])
    with torch.no_grad():
        assert torch.equal(rae_forward(b1, model).frames, rae_forward(b2, model).frames)
    model = tiny("rae_all").eval()
    with torch.no_grad():
        assert not torch.equal(rae_forward(b1, model).frames, rae_forward(b2, model).frames)


def test_decoder_scale_mismatch():
    cfg = ModelConfig(canvas_size=16, grid_h=16, grid_w=16, num_blocks=2, base_channels=2,
                      block_multipliers=(1, 2), gru_encoder_units=(8,), gru_decoder_units=(8,))
    dec = FrameDecoder(cfg)
    with pytest.raises(ValueError, match="scale"):
        dec(torch.zeros(1, 4, 4, 4), [torch.zeros(1, 2, 16, 16), torch.zeros(1, 4, 4, 4)])


def test_config_validation():
    with pytest.raises(ModelConfigError):
        ModelConfig(canvas_size=100)
    with pytest.raises(ModelConfigError):
        ModelConfig(gru_decoder_units=(1, 2, 3))
    with pytest.raises(ModelConfigError):
        ModelConfig(q=13)
    with pytest.raises(ModelConfigError):
        ModelConfig.for_variant("rae_not_in", use_input_skip=True)
    with pytest.raises(ModelConfigError):
        build_model("unet")
    assert ModelConfig.for_variant("rae_clf").variant == "rae_clf"


def test_input_skip_starts_as_identity():
    # with a silent decoder head the model repeats the last frame
    model = tiny().eval()
    with torch.no_grad():
        model.head.weight.zero_()
        out = rae_forward(make_batch(2, 3, 16, 16, seed=4), model)
        batch = make_batch(2, 3, 16, 16, seed=4)
    last = torch.as_tensor(batch.inputs[:, -1:]).expand(-1, 3, -1, -1, -1)
    torch.testing.assert_close(out.frames, last)


def test_warm_start_from_not_in():
    src = tiny("rae_not_in")
    dst = tiny("rae_all")
    loaded, skipped = load_compatible(dst, src.state_dict())
    assert skipped == ["input_skip.weight"]
    assert torch.equal(dst.embed.weight, src.embed.weight)


def test_gradients_match_finite_differences():
    torch.manual_seed(5)
    model = build_model("rae_all", grid_h=16, grid_w=16, **TINY_MODEL).double()
    batch = make_batch(2, 3, 16, 16, seed=6, dtype=np.float64)
    inputs, targets, exo = map(torch.as_tensor, (batch.inputs, batch.targets, batch.exo))

    def loss_fn():
        return training_loss(model(inputs, exo, targets), targets)

    model.zero_grad()
    loss_fn().backward()
    named = [(n, p) for n, p in model.named_parameters() if p.grad is not None]
    rng = np.random.default_rng(0)
    checked, eps = 0, 1e-6
    for n, p in (named[i] for i in rng.permutation(len(named))):
        flat = p.data.view(-1)
        idx = int(rng.integers(flat.numel()))
        analytic = p.grad.view(-1)[idx].item()
        if abs(analytic) < 1e-7:
            continue
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + eps
            up = loss_fn().item()
            flat[idx] = orig - eps
            down = loss_fn().item()
            flat[idx] = orig
        numeric = (up - down) / (2 * eps)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric))
        assert rel < 1e-3, (n, idx, analytic, numeric)
        checked += 1
    assert checked >= 20
