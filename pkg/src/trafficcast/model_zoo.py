"""Recurrent autoencoder family and ConvLSTM baselines.

All public tensors are channels-last, ``(B, T, H, W, C)``, matching the movie
layout; modules convert to channels-first internally.

The recurrent autoencoder encodes every input frame with a shared
convolutional encoder, fuses the flattened bottleneck with the frame's
exogenous vector through one dense layer, accumulates the sequence with a
stacked GRU encoder and unrolls a mirrored GRU decoder for three steps in
embedding space.  A U-Net style decoder maps each predicted embedding back
to pixels, using skip activations from the last input frame.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .exogenous import EXO_DIM

OUTPUT_LEN = 3
NUM_HEADING_CLASSES = 5

RAE_VARIANTS = {
    "rae_all": dict(use_input_skip=True, use_exogenous=True, use_clf_head=False),
    "rae_not_in": dict(use_input_skip=False, use_exogenous=True, use_clf_head=False),
    "rae_not_exo": dict(use_input_skip=True, use_exogenous=False, use_clf_head=False),
    "rae_clf": dict(use_input_skip=True, use_exogenous=True, use_clf_head=True),
}
BASELINE_VARIANTS = {"convlstm": False, "convlstm_clf": True}


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    canvas_size: int = 512
    grid_h: int = 495
    grid_w: int = 436
    num_blocks: int = 6
    base_channels: int = 16
    block_multipliers: tuple = (1, 2, 4, 8, 8, 2)
    dropout_rate: float = 0.5
    gru_encoder_units: tuple = (2048, 256, 128)
    gru_decoder_units: tuple = (128, 256, 2048)
    q: int = 3
    use_input_skip: bool = True
    use_exogenous: bool = True
    use_clf_head: bool = False
    exo_dim: int = EXO_DIM
    bn_momentum: float = 0.1  # torch convention: running = 0.9 * running + 0.1 * batch

    def __post_init__(self):
        object.__setattr__(self, "block_multipliers", tuple(self.block_multipliers))
        object.__setattr__(self, "gru_encoder_units", tuple(self.gru_encoder_units))
        object.__setattr__(self, "gru_decoder_units", tuple(self.gru_decoder_units))
        if self.num_blocks < 1:
            raise ModelConfigError("num_blocks must be >= 1")
        if len(self.block_multipliers) != self.num_blocks:
            raise ModelConfigError(f"{len(self.block_multipliers)} multipliers for {self.num_blocks} blocks")
        if self.canvas_size % (2 ** self.num_blocks) != 0:
            raise ModelConfigError(f"canvas {self.canvas_size} not divisible by 2^{self.num_blocks}")
        if self.grid_h > self.canvas_size or self.grid_w > self.canvas_size:
            raise ModelConfigError("native grid larger than canvas")
        if tuple(reversed(self.gru_decoder_units)) != self.gru_encoder_units:
            raise ModelConfigError("recurrent decoder units must mirror the encoder units")
        if not 1 <= self.q <= 12:
            raise ModelConfigError(f"q must be in [1, 12], got {self.q}")

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "ModelConfig":
        if variant not in RAE_VARIANTS:
            raise ModelConfigError(f"unknown autoencoder variant {variant!r}")
        flags = RAE_VARIANTS[variant]
        clash = {k: v for k, v in overrides.items() if k in flags and v != flags[k]}
        if clash:
            raise ModelConfigError(f"variant {variant} conflicts with flags {clash}")
        return cls(**{**overrides, **flags})

    @property
    def variant(self) -> str:
        for name, flags in RAE_VARIANTS.items():
            if all(getattr(self, k) == v for k, v in flags.items()):
                return name
        return "rae_custom"

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.block_multipliers]

    @property
    def bottleneck_size(self) -> int:
        return self.canvas_size // 2 ** self.num_blocks

    @property
    def embed_dim(self) -> int:
        return self.gru_encoder_units[0]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ConvLSTMConfig:
    grid_h: int = 495
    grid_w: int = 436
    hidden_units: tuple = (32, 64, 64)
    kernel_size: int = 3
    q: int = 3
    with_clf: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_units", tuple(self.hidden_units))
        if not self.hidden_units:
            raise ModelConfigError("ConvLSTM needs at least one hidden layer")

    @property
    def variant(self) -> str:
        return "convlstm_clf" if self.with_clf else "convlstm"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PredictionBundle:
    frames: torch.Tensor                              # (B, 3, H, W, 3), non-negative
    embeddings: Optional[torch.Tensor] = None         # (B, 3, E)
    aux_heading_logits: Optional[torch.Tensor] = None  # (B, 3, H, W, 5)
    target_embeddings: Optional[torch.Tensor] = None  # (B, 3, E) when targets were given


@dataclass
class SkipStack:
    activations: list  # per block, pre-pool, (N, C_i, canvas / 2^i, canvas / 2^i)
    frame: Optional[torch.Tensor] = None  # native-resolution last frame (N, 3, H, W)

    def sizes(self) -> list[int]:
        return [a.shape[-1] for a in self.activations]


def _to_nchw(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 3, 1, 2)


def _to_nhwc(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 2, 3, 1)


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            fan_in = nn.init._calculate_correct_fan(m.weight, "fan_in")
            bound = math.sqrt(6.0 / fan_in)  # He-uniform, suits the rectifiers
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ConvBlock(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, momentum: float):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch, momentum=momentum),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch, momentum=momentum),
            nn.ReLU(inplace=True),
        )


class FrameEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = cfg.channels
        ins = [3] + chans[:-1]
        self.blocks = nn.ModuleList(ConvBlock(i, o, cfg.bn_momentum) for i, o in zip(ins, chans))
        self.pool = nn.MaxPool2d(2)
        self.drop = nn.Dropout(cfg.dropout_rate)

    def forward(self, x):
        skips = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)
            x = self.drop(self.pool(x))
        return x, skips


class FrameDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = cfg.channels
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        in_ch = chans[-1]
        for ch in reversed(chans):
            self.ups.append(nn.ConvTranspose2d(in_ch, ch, 2, stride=2))
            self.blocks.append(ConvBlock(2 * ch, ch, cfg.bn_momentum))
            in_ch = ch
        self.drop = nn.Dropout(cfg.dropout_rate)

    def forward(self, x, skips):
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips)):
            x = up(x)
            if x.shape[-2:] != skip.shape[-2:]:
                raise ValueError(f"decoder scale {tuple(x.shape[-2:])} != skip scale {tuple(skip.shape[-2:])}")
            x = self.drop(block(torch.cat([x, skip], dim=1)))
        return x


class RecurrentAutoencoder(nn.Module):
    """RAE_all / RAE_not_In / RAE_not_Exo / RAE_Clf depending on the config flags."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.channels
        s = cfg.bottleneck_size
        flat = chans[-1] * s * s
        exo = cfg.exo_dim if cfg.use_exogenous else 0

        self.encoder = FrameEncoder(cfg)
        self.embed = nn.Linear(flat + exo, cfg.embed_dim)

        enc_in = [cfg.embed_dim] + list(cfg.gru_encoder_units[:-1])
        self.rnn_encoder = nn.ModuleList(nn.GRU(i, u, batch_first=True)
                                         for i, u in zip(enc_in, cfg.gru_encoder_units))
        dec_in = [cfg.embed_dim] + list(cfg.gru_decoder_units[:-1])
        self.rnn_decoder = nn.ModuleList(nn.GRUCell(i, u) for i, u in zip(dec_in, cfg.gru_decoder_units))

        self.unembed = nn.Linear(cfg.embed_dim, flat)
        self.decoder = FrameDecoder(cfg)
        out_ch = 2 + NUM_HEADING_CLASSES if cfg.use_clf_head else 3
        self.head = nn.Conv2d(chans[0], out_ch, 3, padding=1)
        if cfg.use_input_skip:
            # convolving the concatenation [features, frame] equals the sum of two convolutions;
            # a separate module keeps warm starts from variants without the input skip shape-compatible
            self.input_skip = nn.Conv2d(3, out_ch, 3, padding=1, bias=False)
        if cfg.use_clf_head:
            self.fuse = nn.Conv2d(2 + NUM_HEADING_CLASSES, 3, 1)
        _init_weights(self)
        if cfg.use_input_skip:
            # identity taps: the raw-frame path starts as "repeat the last frame", keeping the
            # rectified output alive while the decoder learns the change (regression channels only
            # when the heading comes from the classifier)
            with torch.no_grad():
                self.input_skip.weight.zero_()
                for c in range(2 if cfg.use_clf_head else 3):
                    self.input_skip.weight[c, c, 1, 1] = 1.0

    # -- pieces -------------------------------------------------------------

    def _to_canvas(self, frames: torch.Tensor) -> torch.Tensor:
        """(N, H, W, 3) -> (N, 3, canvas, canvas) by bilinear resize."""
        x = _to_nchw(frames)
        c = self.cfg.canvas_size
        if x.shape[-2:] != (c, c):
            x = F.interpolate(x, size=(c, c), mode="bilinear", align_corners=False)
        return x

    def encode_frame(self, frames: torch.Tensor, exo: Optional[torch.Tensor] = None):
        """Embed frames ``(N, H, W, 3)`` with exo ``(N, exo_dim)``; returns (embedding, SkipStack)."""
        x = self._to_canvas(frames)
        bottleneck, skips = self.encoder(x)
        feats = bottleneck.flatten(1)
        if self.cfg.use_exogenous:
            if exo is None:
                raise ValueError("this variant needs exogenous inputs")
            feats = torch.cat([feats, exo.to(feats.dtype)], dim=1)
        return self.embed(feats), SkipStack(skips)

    def encode_sequence(self, inputs: torch.Tensor, exo: Optional[torch.Tensor] = None):
        """inputs (B, q, H, W, 3), exo (B, q, exo_dim).

        Returns the per-layer final GRU states, the last input embedding and the
        skip stack of the last frame.
        """
        b, q = inputs.shape[:2]
        flat_exo = exo.reshape(b * q, -1) if (exo is not None and self.cfg.use_exogenous) else None
        emb, skips = self.encode_frame(inputs.reshape(b * q, *inputs.shape[2:]), flat_exo)
        emb = emb.reshape(b, q, -1)
        last = SkipStack([a.reshape(b, q, *a.shape[1:])[:, -1] for a in skips.activations])
        if self.cfg.use_input_skip:
            last.frame = _to_nchw(inputs[:, -1])
        seq, states = emb, []
        for gru in self.rnn_encoder:
            seq, h = gru(seq)
            states.append(h[0])
        return states, emb[:, -1], last

    def predict_embeddings(self, states: list, first_input: torch.Tensor) -> torch.Tensor:
        """Unroll the recurrent decoder three steps; each step's output feeds the next."""
        hidden = list(reversed(states))  # decoder layer i mirrors encoder layer n-1-i
        x = first_input
        outs = []
        for _ in range(OUTPUT_LEN):
            inp = x
            for i, cell in enumerate(self.rnn_decoder):
                hidden[i] = cell(inp, hidden[i])
                inp = hidden[i]
            x = inp
            outs.append(x)
        return torch.stack(outs, dim=1)

    def decode_frames(self, embeddings: torch.Tensor, skips: SkipStack):
        """embeddings (B, 3, E) -> frames (B, 3, H, W, 3) and optional heading logits."""
        cfg = self.cfg
        b, t, _ = embeddings.shape
        s = cfg.bottleneck_size
        x = self.unembed(embeddings.reshape(b * t, -1)).reshape(b * t, cfg.channels[-1], s, s)
        rep = [a.repeat_interleave(t, dim=0) for a in skips.activations]
        x = self.decoder(x, rep)
        x = x[..., :cfg.grid_h, :cfg.grid_w]
        out = self.head(x)
        if cfg.use_input_skip:
            if skips.frame is None:
                raise ValueError("input skip enabled but the skip stack carries no frame")
            out = out + self.input_skip(skips.frame.repeat_interleave(t, dim=0))
        logits = None
        if cfg.use_clf_head:
            reg = F.relu(out[:, :2])
            logits = out[:, 2:]
            out = self.fuse(torch.cat([reg, logits.softmax(dim=1)], dim=1))
            logits = _to_nhwc(logits).reshape(b, t, cfg.grid_h, cfg.grid_w, NUM_HEADING_CLASSES)
        frames = _to_nhwc(F.relu(out)).reshape(b, t, cfg.grid_h, cfg.grid_w, 3)
        return frames, logits

    # -- full pass ----------------------------------------------------------

    def forward(self, inputs: torch.Tensor, exo: Optional[torch.Tensor] = None,
                targets: Optional[torch.Tensor] = None) -> PredictionBundle:
        """inputs (B, q, H, W, 3); exo (B, q [+ 3], exo_dim); optional targets (B, 3, H, W, 3).

        When targets are given, their embeddings under the shared encoder are
        returned as ``target_embeddings`` for the embedding loss.
        """
        b, q = inputs.shape[:2]
        use_exo = self.cfg.use_exogenous
        if use_exo and exo is None:
            raise ValueError("this variant needs exogenous inputs")
        in_exo = exo[:, :q] if use_exo else None
        states, last_emb, skips = self.encode_sequence(inputs, in_exo)
        pred_emb = self.predict_embeddings(states, last_emb)
        frames, logits = self.decode_frames(pred_emb, skips)
        target_emb = None
        if targets is not None:
            t = targets.shape[1]
            tgt_exo = None
            if use_exo:
                if exo.shape[1] < q + t:
                    raise ValueError("exo must cover input and target bins to embed targets")
                tgt_exo = exo[:, q:q + t].reshape(b * t, -1)
            target_emb, _ = self.encode_frame(targets.reshape(b * t, *targets.shape[2:]), tgt_exo)
            target_emb = target_emb.reshape(b, t, -1)
        return PredictionBundle(frames, pred_emb, logits, target_emb)


class ConvLSTMCell(nn.Module):
    def __init__(self, in_ch: int, hidden: int, kernel: int, activation):
        super().__init__()
        self.hidden = hidden
        self.act = activation
        self.conv = nn.Conv2d(in_ch + hidden, 4 * hidden, kernel, padding=kernel // 2)

    def forward(self, x, state):
        h, c = state
        i, f, o, g = self.conv(torch.cat([x, h], dim=1)).chunk(4, dim=1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * self.act(g)
        h = torch.sigmoid(o) * self.act(c)
        return h, c


class ConvLSTMForecaster(nn.Module):
    """Stacked tanh ConvLSTM layers plus a 3-unit rectified ConvLSTM output layer."""

    def __init__(self, cfg: ConvLSTMConfig):
        super().__init__()
        self.cfg = cfg
        k = cfg.kernel_size
        ins = [3] + list(cfg.hidden_units)
        self.cells = nn.ModuleList(ConvLSTMCell(i, h, k, torch.tanh) for i, h in zip(ins, cfg.hidden_units))
        self.out_cell = ConvLSTMCell(cfg.hidden_units[-1], 3, k, F.relu)
        if cfg.with_clf:
            self.clf = nn.Conv2d(cfg.hidden_units[-1], NUM_HEADING_CLASSES, 1)
        _init_weights(self)
        for cell in list(self.cells) + [self.out_cell]:
            # forget gate bias 1 eases gradient flow early in training
            nn.init.constant_(cell.conv.bias[cell.hidden:2 * cell.hidden], 1.0)

    def _step(self, x, states):
        inp = x
        new = []
        for cell, st in zip(self.cells, states[:-1]):
            h, c = cell(inp, st)
            new.append((h, c))
            inp = h
        h, c = self.out_cell(inp, states[-1])
        new.append((h, c))
        return h, inp, new

    def forward(self, inputs: torch.Tensor, exo=None, targets=None) -> PredictionBundle:
        b, q, hh, ww, _ = inputs.shape
        zeros = lambda ch: inputs.new_zeros(b, ch, hh, ww)
        states = [(zeros(u), zeros(u)) for u in self.cfg.hidden_units] + [(zeros(3), zeros(3))]
        for t in range(q):
            y, feat, states = self._step(_to_nchw(inputs[:, t]), states)
        frames = [y]
        logits = [self.clf(feat)] if self.cfg.with_clf else []
        for _ in range(OUTPUT_LEN - 1):
            y, feat, states = self._step(y, states)
            frames.append(y)
            if self.cfg.with_clf:
                logits.append(self.clf(feat))
        out = torch.stack([_to_nhwc(f) for f in frames], dim=1)
        aux = torch.stack([_to_nhwc(l) for l in logits], dim=1) if self.cfg.with_clf else None
        return PredictionBundle(out, None, aux)


# ---------------------------------------------------------------- helpers

def build_model(variant: str, **config) -> nn.Module:
    """Instantiate a model by variant name: rae_all, rae_not_in, rae_not_exo, rae_clf,
    convlstm or convlstm_clf."""
    if variant in RAE_VARIANTS:
        return RecurrentAutoencoder(ModelConfig.for_variant(variant, **config))
    if variant in BASELINE_VARIANTS:
        allowed = {f for f in ConvLSTMConfig.__dataclass_fields__}
        kw = {k: v for k, v in config.items() if k in allowed}
        kw["with_clf"] = BASELINE_VARIANTS[variant]
        return ConvLSTMForecaster(ConvLSTMConfig(**kw))
    raise ModelConfigError(f"unknown model variant {variant!r}")


def model_config_dict(model: nn.Module) -> dict:
    return model.cfg.to_dict()


def rae_forward(batch, model: RecurrentAutoencoder, with_targets: bool = False) -> PredictionBundle:
    inputs = torch.as_tensor(batch.inputs)
    exo = torch.as_tensor(batch.exo)
    targets = torch.as_tensor(batch.targets) if with_targets else None
    return model(inputs, exo, targets)


def convlstm_forward(batch, model: ConvLSTMForecaster) -> PredictionBundle:
    return model(torch.as_tensor(batch.inputs))


def load_compatible(model: nn.Module, state: dict) -> tuple[list[str], list[str]]:
    """Copy every parameter/buffer whose name and shape match; return (loaded, skipped).

    Skipped entries keep their fresh initialization, which is how a warm start
    from a variant without the input skip acquires its new parameters.
    """
    own = model.state_dict()
    loaded, skipped = [], []
    with torch.no_grad():
        for name, value in own.items():
            src = state.get(name)
            if src is not None and src.shape == value.shape:
                value.copy_(src)
                loaded.append(name)
            else:
                skipped.append(name)
    return loaded, skipped
