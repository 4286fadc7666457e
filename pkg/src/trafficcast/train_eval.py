"""Training loop, checkpoints, warm starts, challenge evaluation and report tables."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

from .exogenous import ExoProvider
from .grid_codec import TrafficMovie
from .model_zoo import (BASELINE_VARIANTS, RAE_VARIANTS, ConvLSTMConfig, ModelConfig, PredictionBundle,
                        build_model, load_compatible)
from .objectives import LossWeights, MetricReport, mse_metric, training_loss
from .sampler import (Batch, MovieStore, SequenceWindow, Strategy, assemble_batch, build_epoch_index,
                      enumerate_windows, iter_batches)
from .synth_world import WeatherTable

log = logging.getLogger(__name__)

CITY_PROFILES = {
    "moscow": (57, 114, 174, 222, 258),
    "istanbul": (57, 114, 174, 222, 258),
    "berlin": (30, 69, 126, 186, 234),
}
CHALLENGE_INPUT_LEN = 12


class ProtocolError(ValueError):
    pass


class NumericalAbort(RuntimeError):
    def __init__(self, epoch: int, batch: int, learning_rate: float, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}, lr {learning_rate}")
        self.epoch = epoch
        self.batch = batch
        self.learning_rate = learning_rate


# ---------------------------------------------------------------- data

@dataclass
class Dataset:
    """One city's movies split into train/validation days plus its exogenous source."""
    city: str
    bins_per_day: int
    train: MovieStore
    val: MovieStore
    exo: Callable[[SequenceWindow], np.ndarray]
    test_bins: tuple = CITY_PROFILES["moscow"]

    @classmethod
    def from_movies(cls, train: Sequence[TrafficMovie], val: Sequence[TrafficMovie] = (),
                    weather: WeatherTable | None = None, city: str = "synth", week_offset: int = 0,
                    test_bins: Sequence[int] | None = None) -> "Dataset":
        bins = train[0].spec.bins_per_day
        return cls(city, bins, MovieStore.from_movies(train, city), MovieStore.from_movies(val, city),
                   ExoProvider(weather, bins, week_offset), tuple(test_bins or CITY_PROFILES["moscow"]))

    @classmethod
    def from_manifest(cls, path, test_bins: Sequence[int] | None = None) -> "Dataset":
        man = load_manifest(path)
        root = Path(path).parent
        resolve = lambda p: p if Path(p).is_absolute() else root / p
        paths = {"train": {}, "val": {}}
        for entry in man["days"]:
            paths[entry.get("split", "train")][int(entry["day_index"])] = resolve(entry["path"])
        bins = int(man["grid"]["bins_per_day"])
        weather = None
        if man.get("weather"):
            weather = WeatherTable.read_csv(resolve(man["weather"]), bins_per_day=bins)
        city = man.get("city", "")
        return cls(city, bins, MovieStore(paths["train"], city=city), MovieStore(paths["val"], city=city),
                   ExoProvider(weather, bins, int(man.get("week_offset", 0))),
                   tuple(test_bins or CITY_PROFILES.get(city, CITY_PROFILES["moscow"])))


def write_manifest(path, city: str, grid: dict, days: Iterable[dict], weather: str | None = None,
                   week_offset: int = 0) -> Path:
    """Manifest: JSON with city, grid dims, optional weather file and a list of
    ``{"city", "day_index", "path", "split"}`` entries."""
    doc = {"city": city, "grid": grid, "weather": weather, "week_offset": week_offset,
           "days": [dict(d, city=city) for d in days]}
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2))
    return path


def load_manifest(path) -> dict:
    doc = json.loads(Path(path).read_text())
    for key in ("grid", "days"):
        if key not in doc:
            raise ValueError(f"manifest {path} lacks '{key}'")
    return doc


# ---------------------------------------------------------------- config & checkpoints

@dataclass
class TrainConfig:
    variant: str = "rae_all"
    strategy: str = "non_overlapping"
    q: int = 3
    batch_size: int = 8
    epochs: int = 1
    learning_rate: float = 1e-3
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    model: dict = field(default_factory=dict)
    init_checkpoint: Optional[str] = None
    workers: int = 0
    prefetch_depth: int = 4
    validate: bool = True

    def __post_init__(self):
        if not 1 <= self.q <= 12:
            raise ValueError(f"q must be in [1, 12], got {self.q}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.variant not in RAE_VARIANTS and self.variant not in BASELINE_VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        Strategy(self.strategy)
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Checkpoint:
    train_config: dict
    model_config: dict
    variant: str
    epoch: int
    model_state: dict
    optimizer_state: Optional[dict] = None
    history: list = field(default_factory=list)
    parent_epochs: list = field(default_factory=list)  # epochs of the checkpoints this one was warm-started from

    @property
    def epoch_notation(self) -> str:
        """Epoch count in the "10+5" style used for fine-tuned runs."""
        return "+".join(str(e) for e in self.parent_epochs + [self.epoch])

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        os.close(fd)
        try:
            torch.save(dataclasses.asdict(self), tmp)
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.remove(tmp)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls(**torch.load(path, map_location="cpu", weights_only=False))

    def build_model(self) -> torch.nn.Module:
        model = model_from_config(self.variant, self.model_config)
        model.load_state_dict(self.model_state)
        model.eval()
        return model


def model_from_config(variant: str, model_config: dict) -> torch.nn.Module:
    if variant in RAE_VARIANTS:
        flags = RAE_VARIANTS[variant]
        cfg = {k: v for k, v in model_config.items() if k not in flags}
        return build_model(variant, **cfg)
    cfg = {k: v for k, v in model_config.items() if k != "with_clf"}
    return build_model(variant, **cfg)


def _model_kwargs(config: TrainConfig, dataset: Dataset, sample: TrafficMovie | np.ndarray) -> dict:
    data = sample.data if isinstance(sample, TrafficMovie) else sample
    kw = dict(config.model)
    kw.setdefault("grid_h", data.shape[1])
    kw.setdefault("grid_w", data.shape[2])
    kw["q"] = config.q
    if config.variant in RAE_VARIANTS:
        allowed = set(ModelConfig.__dataclass_fields__)
    else:
        allowed = set(ConvLSTMConfig.__dataclass_fields__)
    return {k: v for k, v in kw.items() if k in allowed}


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, 0x7EA]).generate_state(1)[0])


# ---------------------------------------------------------------- training

def predict_batch(model: torch.nn.Module, batch: Batch) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        out = model(torch.as_tensor(batch.inputs), torch.as_tensor(batch.exo))
    return out.frames.numpy()


def evaluate_windows(predictor: Callable[[Batch], np.ndarray], windows: Sequence[SequenceWindow],
                     store: MovieStore, exo, batch_size: int = 32) -> MetricReport:
    report = MetricReport()
    for i in range(0, len(windows), batch_size):
        batch = assemble_batch(windows[i:i + batch_size], store, exo)
        report = report.merge(mse_metric(predictor(batch), batch.targets))
    return report


def _write_metrics_row(path: Path, row: dict) -> None:
    header = not path.exists()
    with open(path, "a") as fh:
        if header:
            fh.write("epoch\ttrain_loss\ttrain_mse\tval_mse\theading_acc\n")
        fh.write("{epoch}\t{train_loss:.8g}\t{train_mse:.8g}\t{val_mse:.8g}\t{heading_acc:.6g}\n".format(**row))


def train(config: TrainConfig, dataset: Dataset, run_dir=None,
          progress: Callable[[dict], None] | None = None) -> Checkpoint:
    """Run ``config.epochs`` epochs; resumes or warm-starts from ``config.init_checkpoint``.

    A checkpoint of the same variant and architecture resumes (weights,
    optimizer state, epoch counter and history).  Any other checkpoint is a warm
    start: matching parameters are copied, the rest stay freshly initialized,
    the optimizer starts fresh and epochs count from zero.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    train_days = dataset.train.days()
    if not train_days:
        raise ValueError("dataset has no training days")
    sample = dataset.train.data(train_days[0])

    torch.manual_seed(config.seed)
    model_kw = _model_kwargs(config, dataset, sample)
    model = build_model(config.variant, **model_kw)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    start_epoch, history, parents = 0, [], []

    if config.init_checkpoint:
        ckpt = Checkpoint.load(config.init_checkpoint)
        if ckpt.variant == config.variant and ckpt.model_config == model.cfg.to_dict():
            model.load_state_dict(ckpt.model_state)
            if ckpt.optimizer_state is not None:
                optimizer.load_state_dict(ckpt.optimizer_state)
            start_epoch, history, parents = ckpt.epoch, list(ckpt.history), list(ckpt.parent_epochs)
            log.info("resuming %s from epoch %d", config.variant, start_epoch)
        else:
            loaded, fresh = load_compatible(model, ckpt.model_state)
            parents = list(ckpt.parent_epochs) + [ckpt.epoch]
            log.info("fine-tuning %s from %s checkpoint (%d epochs): %d tensors loaded, %d fresh: %s",
                     config.variant, ckpt.variant, ckpt.epoch, len(loaded), len(fresh), fresh)

    windows = enumerate_windows(train_days, dataset.bins_per_day, config.q, config.strategy, dataset.test_bins)
    val_days = dataset.val.days()
    val_windows = (enumerate_windows(val_days, dataset.bins_per_day, config.q, config.strategy, dataset.test_bins)
                   if (val_days and config.validate) else [])
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "train_config.json").write_text(json.dumps(config.to_dict(), indent=2, default=str))

    ckpt = None
    for epoch in range(start_epoch, start_epoch + config.epochs):
        torch.manual_seed(_epoch_seed(config.seed, epoch))
        index = build_epoch_index(windows, epoch, config.seed)
        model.train()
        loss_sum = mse_sum = 0.0
        n_seen = 0
        for b, batch in enumerate(iter_batches(index, config.batch_size, dataset.train, dataset.exo,
                                               workers=config.workers, depth=config.prefetch_depth)):
            inputs = torch.as_tensor(batch.inputs)
            targets = torch.as_tensor(batch.targets)
            pred = model(inputs, torch.as_tensor(batch.exo), targets)
            loss = training_loss(pred, targets, config.loss)
            if not torch.isfinite(loss):
                raise NumericalAbort(epoch, b, config.learning_rate, loss.item())
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            n = len(batch)
            loss_sum += loss.item() * n
            mse_sum += float(((pred.frames.detach() - targets) ** 2).mean()) * n
            n_seen += n

        row = {"epoch": epoch + 1, "train_loss": loss_sum / n_seen, "train_mse": mse_sum / n_seen,
               "val_mse": math.nan, "heading_acc": math.nan}
        if val_windows:
            rep = evaluate_windows(lambda bt: predict_batch(model, bt), val_windows, dataset.val, dataset.exo)
            row["val_mse"], row["heading_acc"] = rep.mse_total, rep.heading_accuracy
        history.append(row)
        log.info("epoch %d: %s", epoch + 1, row)
        if progress:
            progress(row)

        ckpt = Checkpoint(config.to_dict(), model.cfg.to_dict(), config.variant, epoch + 1,
                          {k: v.clone() for k, v in model.state_dict().items()},
                          optimizer.state_dict(), list(history), list(parents))
        if run_dir is not None:
            _write_metrics_row(run_dir / "metrics.tsv", row)
            ckpt.save(run_dir / "checkpoints" / f"epoch_{epoch + 1:03d}.pt")
            ckpt.save(run_dir / "checkpoints" / "last.pt")
    return ckpt


# ---------------------------------------------------------------- challenge evaluation

@dataclass(frozen=True)
class EvalProtocol:
    block_start_bins: tuple
    input_len: int = CHALLENGE_INPUT_LEN
    output_len: int = 3

    @classmethod
    def for_city(cls, city: str) -> "EvalProtocol":
        try:
            return cls(CITY_PROFILES[city.lower()])
        except KeyError:
            raise ProtocolError(f"no challenge profile for city {city!r}") from None

    def validate(self, bins_per_day: int) -> None:
        for s in self.block_start_bins:
            if s - self.input_len < 0 or s + self.output_len > bins_per_day:
                raise ProtocolError(f"block start bin {s} does not fit {self.input_len} input and "
                                    f"{self.output_len} output bins in a {bins_per_day}-bin day")


def persistence_baseline(batch: Batch) -> PredictionBundle:
    """Repeat the last observed frame for every horizon."""
    last = batch.inputs[:, -1:]
    return PredictionBundle(np.repeat(last, 3, axis=1))


class ModelPredictor:
    """Adapter: torch model -> ``Batch -> frames`` callable."""

    def __init__(self, model: torch.nn.Module):
        self.model = model
        self.q = model.cfg.q

    def __call__(self, batch: Batch) -> np.ndarray:
        return predict_batch(self.model, batch)


def evaluate_challenge(predictor, store: MovieStore, protocol: EvalProtocol, exo, q: int | None = None,
                       days: Sequence[int] | None = None) -> MetricReport:
    """Score a predictor on the five hourly blocks of every day.

    ``predictor`` maps a Batch to frames ``(B, 3, H, W, 3)``; it sees the most
    recent ``q`` of the 12 input bins (``q`` defaults to the predictor's own or 12).
    """
    if q is None:
        q = getattr(predictor, "q", protocol.input_len)
    q = min(q, protocol.input_len)
    report = MetricReport()
    for day in (days if days is not None else store.days()):
        n_bins = store.data(day).shape[0]
        windows = []
        for s in protocol.block_start_bins:
            if s - protocol.input_len < 0 or s + protocol.output_len > n_bins:
                log.warning("day %d: block at bin %d does not fit %d bins, skipped", day, s, n_bins)
                continue
            windows.append(SequenceWindow(day, s, q, protocol.output_len))
        if not windows:
            continue
        batch = assemble_batch(windows, store, exo)
        frames = predictor(batch)
        if isinstance(frames, PredictionBundle):
            frames = frames.frames
        rep = mse_metric(frames, batch.targets)
        rep.blocks = [(day, w.start) for w in windows]
        report = report.merge(rep)
    return report


# ---------------------------------------------------------------- reporting

@dataclass
class RunSummary:
    name: str
    city: str
    report: MetricReport
    epochs: str = ""
    history: list = field(default_factory=list)


def report_tables(runs: Sequence[RunSummary], out_dir) -> dict[str, Path]:
    """Write comparison tables (model x city, variant comparison, channel x horizon) and loss plots."""
    if not runs:
        raise ValueError("need at least one run")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}

    models = list(dict.fromkeys(r.name for r in runs))
    cities = list(dict.fromkeys(r.city for r in runs))
    cell = {(r.name, r.city): r for r in runs}
    lines = ["mse (acc heading), #epochs\t" + "\t".join(models)]
    for city in cities:
        row = [city]
        for m in models:
            r = cell.get((m, city))
            row.append(f"{r.report.mse_total:.10g} ({r.report.heading_accuracy:.3f}), {r.epochs}" if r else "-")
        lines.append("\t".join(row))
    written["table1"] = out / "table1_models_by_city.tsv"
    written["table1"].write_text("\n".join(lines) + "\n")

    names = [f"{r.name}" if len(cities) == 1 else f"{r.name}@{r.city}" for r in runs]
    lines = ["\t" + "\t".join(names),
             "mse\t" + "\t".join(f"{r.report.mse_total:.10g}" for r in runs),
             "heading acc\t" + "\t".join(f"{r.report.heading_accuracy:.3f}" for r in runs),
             "epochs\t" + "\t".join(r.epochs for r in runs)]
    written["table2"] = out / "table2_variants.tsv"
    written["table2"].write_text("\n".join(lines) + "\n")

    for r, label in zip(runs, names):
        key = f"table3_{label}"
        written[key] = out / f"table3_{label.replace('@', '_')}.tsv"
        written[key].write_text(r.report.to_table(f"{r.city} {r.name}"))

    with_history = [r for r in runs if r.history]
    if with_history:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 4))
        for r in with_history:
            ax.plot([h["epoch"] for h in r.history], [h["train_loss"] for h in r.history], label=r.name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
        ax.legend()
        fig.tight_layout()
        written["loss_plot"] = out / "loss_history.png"
        fig.savefig(written["loss_plot"])
        plt.close(fig)
    return written
