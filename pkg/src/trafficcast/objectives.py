"""Training losses (dual-space L2, heading cross-entropy) and evaluation metrics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .grid_codec import CHANNEL_NAMES, HEADING, HEADING_LEVELS, VOLUME, heading_class_ids, snap_heading

HORIZON_MINUTES = (5, 10, 15)


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.5
    clf_weight: float = 1.0
    detach_target_embeddings: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.clf_weight < 0:
            raise LossError("loss weights must be nonnegative")


def l2_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise LossError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def rae_loss(pred, target, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """alpha * L2(frames) + beta * L2(embeddings).

    Target embeddings come from ``target.embeddings`` or, when that is empty,
    from the encoder pass stored on the prediction (``pred.target_embeddings``).
    """
    if pred.embeddings is None:
        raise LossError("prediction carries no embeddings (baseline model?)")
    tgt_emb = target.embeddings
    if tgt_emb is None:
        tgt_emb = pred.target_embeddings
    if tgt_emb is None:
        raise LossError("no target embeddings available")
    if tgt_emb.shape != pred.embeddings.shape:
        raise LossError(f"embedding dims differ: {tuple(pred.embeddings.shape)} vs {tuple(tgt_emb.shape)}")
    if weights.detach_target_embeddings:
        tgt_emb = tgt_emb.detach()
    return weights.alpha * l2_loss(pred.frames, target.frames) + weights.beta * l2_loss(pred.embeddings, tgt_emb)


@dataclass
class TargetBundle:
    frames: torch.Tensor
    embeddings: torch.Tensor | None = None


def heading_targets(heading: torch.Tensor | np.ndarray) -> torch.Tensor:
    """Class ids 0..4 from heading codes; accepts uint8 codes or [0, 1]-scaled values."""
    arr = heading.detach().cpu().numpy() if torch.is_tensor(heading) else np.asarray(heading)
    if arr.dtype.kind == "f":
        codes = np.rint(arr.astype(np.float64) * 255.0)
        if not np.allclose(codes, arr * 255.0, atol=1e-3):
            raise LossError("heading target is not on the 255 grid")
        arr = codes
    try:
        ids = heading_class_ids(arr)
    except ValueError as exc:
        raise LossError(str(exc)) from exc
    return torch.as_tensor(ids, dtype=torch.long)


def heading_ce_loss(logits: torch.Tensor, target_heading) -> torch.Tensor:
    """Mean softmax cross-entropy over pixels; logits (..., 5)."""
    ids = target_heading if (torch.is_tensor(target_heading) and target_heading.dtype == torch.long) \
        else heading_targets(target_heading)
    ids = ids.to(logits.device)
    if ids.shape != logits.shape[:-1]:
        raise LossError(f"target shape {tuple(ids.shape)} does not match logits {tuple(logits.shape)}")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), ids.reshape(-1))


def training_loss(pred, targets: torch.Tensor, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Objective for any model in the zoo.

    Autoencoders use the dual-space loss; baselines use frame L2.  Models with a
    heading classifier add ``clf_weight`` times the heading cross-entropy.
    """
    if pred.embeddings is not None:
        loss = rae_loss(pred, TargetBundle(targets), weights)
    else:
        loss = l2_loss(pred.frames, targets)
    if pred.aux_heading_logits is not None and weights.clf_weight > 0:
        loss = loss + weights.clf_weight * heading_ce_loss(pred.aux_heading_logits, targets[..., HEADING])
    return loss


# ---------------------------------------------------------------- metrics

@dataclass
class MetricReport:
    """Sums behind the global MSE, its channel x horizon breakdown and heading accuracy.

    ``sse`` and ``counts`` are indexed ``[channel, horizon]``.  Reports merge by
    adding their sums, so evaluation can be sharded.
    """
    sse: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    counts: np.ndarray = field(default_factory=lambda: np.zeros((3, 3), dtype=np.int64))
    heading_correct: int = 0
    heading_total: int = 0
    heading_correct_data: int = 0
    heading_total_data: int = 0
    blocks: list = field(default_factory=list)

    @property
    def mse_total(self) -> float:
        return float(self.sse.sum() / self.counts.sum()) if self.counts.sum() else float("nan")

    @property
    def mse_by_channel_and_horizon(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.sse / self.counts

    @property
    def mse_by_horizon(self) -> np.ndarray:
        return self.sse.sum(axis=0) / self.counts.sum(axis=0)

    @property
    def heading_accuracy(self) -> float:
        return self.heading_correct / self.heading_total if self.heading_total else float("nan")

    @property
    def heading_accuracy_data(self) -> float:
        return self.heading_correct_data / self.heading_total_data if self.heading_total_data else float("nan")

    @property
    def num_elements(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "MetricReport") -> "MetricReport":
        return MetricReport(self.sse + other.sse, self.counts + other.counts,
                            self.heading_correct + other.heading_correct,
                            self.heading_total + other.heading_total,
                            self.heading_correct_data + other.heading_correct_data,
                            self.heading_total_data + other.heading_total_data,
                            self.blocks + other.blocks)

    def to_dict(self) -> dict:
        return {
            "mse_total": self.mse_total,
            "mse_by_channel_and_horizon": self.mse_by_channel_and_horizon.tolist(),
            "heading_accuracy": self.heading_accuracy,
            "heading_accuracy_data_pixels": self.heading_accuracy_data,
            "sse": self.sse.tolist(),
            "counts": self.counts.tolist(),
            "heading_counts": [self.heading_correct, self.heading_total,
                               self.heading_correct_data, self.heading_total_data],
            "blocks": [list(b) for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        hc = d.get("heading_counts", [0, 0, 0, 0])
        return cls(np.asarray(d["sse"], dtype=float), np.asarray(d["counts"], dtype=np.int64),
                   *map(int, hc), [tuple(b) for b in d.get("blocks", [])])

    def to_table(self, title: str = "") -> str:
        """Rows +5/+10/+15 minutes, columns speed/volume/heading."""
        lines = []
        if title:
            lines.append(f"# {title} | mse: {self.mse_total:.10g}")
        lines.append("horizon\t" + "\t".join(CHANNEL_NAMES))
        per = self.mse_by_channel_and_horizon
        for k, minutes in enumerate(HORIZON_MINUTES):
            lines.append(f"{minutes} minutes\t" + "\t".join(f"{per[c, k]:.10g}" for c in range(3)))
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def _np(x) -> np.ndarray:
    if torch.is_tensor(x):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def mse_metric(pred_frames, target_frames) -> MetricReport:
    """Squared-error sums for frames shaped (B, 3, H, W, 3) on the [0, 1] scale."""
    p = _np(pred_frames).astype(np.float64)
    t = _np(target_frames).astype(np.float64)
    if p.shape != t.shape:
        raise LossError(f"shape mismatch {p.shape} vs {t.shape}")
    if p.ndim != 5 or p.shape[-1] != 3:
        raise LossError(f"expected (B, T, H, W, 3), got {p.shape}")
    sq = (p - t) ** 2
    # [channel, horizon]
    sse = sq.sum(axis=(0, 2, 3)).T
    per_cell = p.shape[0] * p.shape[2] * p.shape[3]
    counts = np.full(sse.shape, per_cell, dtype=np.int64)
    report = MetricReport(sse, counts)
    _add_heading(report, p[..., HEADING], t[..., HEADING], t[..., VOLUME])
    return report


def _add_heading(report: MetricReport, pred_heading, target_heading, target_volume) -> None:
    snapped = np.rint(snap_heading(np.clip(pred_heading, 0.0, 1.0)) * 255.0)
    truth = np.rint(target_heading * 255.0)
    hit = snapped == truth
    data = target_volume > 0
    report.heading_correct += int(hit.sum())
    report.heading_total += int(hit.size)
    report.heading_correct_data += int(hit[data].sum())
    report.heading_total_data += int(data.sum())


def heading_accuracy(pred_heading, target_heading, data_only: bool = False, target_volume=None) -> float:
    """Fraction of pixels whose snapped prediction equals the target level ([0, 1] scale)."""
    p = _np(pred_heading).astype(np.float64)
    t = _np(target_heading).astype(np.float64)
    if not np.isin(np.rint(t * 255.0), HEADING_LEVELS).all():
        raise LossError("heading target outside the five valid levels")
    hit = np.rint(snap_heading(np.clip(p, 0.0, 1.0)) * 255.0) == np.rint(t * 255.0)
    if data_only:
        if target_volume is None:
            raise LossError("data_only accuracy needs the target volume channel")
        mask = _np(target_volume) > 0
        return float(hit[mask].mean()) if mask.any() else float("nan")
    return float(hit.mean())
