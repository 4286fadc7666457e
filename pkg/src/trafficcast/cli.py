"""Command line entry point: ``trafficcast gen-data | train | eval | report``.

Experiment definitions live in a config file (YAML or JSON, see ``config.py``);
flags only carry paths, seeds, ``--force`` and ``--workers``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

from .config import ConfigError, RunConfig
from .exogenous import WeatherScaling
from .grid_codec import CodecParams, GridSpec, write_movie
from .objectives import LossWeights, MetricReport
from .sampler import MovieStore
from .synth_world import SynthConfig, generate_city, generate_weather, simulate_day
from .train_eval import (CITY_PROFILES, Checkpoint, Dataset, EvalProtocol, ModelPredictor, NumericalAbort,
                         ProtocolError, RunSummary, TrainConfig, evaluate_challenge, persistence_baseline,
                         report_tables, train, write_manifest)

log = logging.getLogger("trafficcast")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RUN_ROOT_ENV = "TRAFFICCAST_RUN_ROOT"


class DataError(RuntimeError):
    pass


def _load_config(path) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def _run_dir(arg, command: str) -> Path:
    if arg:
        return Path(arg)
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    return root / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"


def _synth_config(cfg: RunConfig, seed: int) -> SynthConfig:
    d = cfg.data
    return SynthConfig(seed=seed, num_days=d.num_days, rush_hours=tuple(tuple(r) for r in d.rush_hours),
                       rush_amplitude=d.rush_amplitude, drift_cells_per_bin=d.drift_cells_per_bin,
                       noise_level=d.noise_level, num_blobs=d.num_blobs, blob_radius=d.blob_radius,
                       blob_strength=d.blob_strength, wave_amplitude=d.wave_amplitude,
                       wave_length_cells=d.wave_length_cells, weekend_factor=d.weekend_factor,
                       week_offset=d.week_offset)


def _dataset(cfg: RunConfig, manifest) -> Dataset:
    test_bins = cfg.eval.block_start_bins or CITY_PROFILES.get(cfg.eval.city_profile.lower())
    try:
        ds = Dataset.from_manifest(manifest, test_bins=test_bins)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read manifest {manifest}: {exc}") from exc
    ds.exo.scaling = WeatherScaling(tuple(cfg.exogenous.lower), tuple(cfg.exogenous.upper))
    return ds


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg: RunConfig, out_dir, seed: int | None = None, force: bool = False) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"{out} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    seed = cfg.data.seed if seed is None else seed
    cfg.data.seed = seed
    (out / "movies").mkdir(parents=True)

    d = cfg.data
    spec = GridSpec(height=d.height, width=d.width, bins_per_day=d.bins_per_day)
    params = CodecParams(cfg.codec.volume_cap_min, cfg.codec.volume_cap_max, cfg.codec.speed_cap_max)
    synth = _synth_config(cfg, seed)
    city = generate_city(seed, spec)
    weather = generate_weather(seed, d.num_days, d.bins_per_day)
    weather.write_csv(out / "weather.csv")
    entries = []
    first_val = d.num_days - d.val_days
    for day in range(d.num_days):
        movie = simulate_day(city, synth, day, params, weather=weather, city=d.city)
        name = f"movies/{d.city}_day{day:03d}.t4cm"
        write_movie(movie, out / name)
        entries.append({"day_index": day, "path": name, "split": "val" if day >= first_val else "train"})
    write_manifest(out / "manifest.json", d.city,
                   {"height": d.height, "width": d.width, "bins_per_day": d.bins_per_day},
                   entries, weather="weather.csv", week_offset=d.week_offset)
    cfg.save(out / "config.json")
    log.info("wrote %d movies, weather and manifest to %s", d.num_days, out)
    return out


def train_config_from(cfg: RunConfig, seed: int | None = None, workers: int | None = None,
                      init_checkpoint: str | None = None) -> TrainConfig:
    return TrainConfig(
        variant=cfg.model.variant, strategy=cfg.sampler.strategy, q=cfg.sampler.q,
        batch_size=cfg.sampler.batch_size, epochs=cfg.train.epochs, learning_rate=cfg.train.learning_rate,
        seed=cfg.train.seed if seed is None else seed,
        loss=LossWeights(cfg.loss.alpha, cfg.loss.beta, cfg.loss.clf_weight, cfg.loss.detach_target_embeddings),
        model=cfg.model.model_kwargs(), init_checkpoint=init_checkpoint,
        workers=cfg.sampler.workers if workers is None else workers,
        prefetch_depth=cfg.sampler.prefetch_depth, validate=cfg.train.validate)


def cmd_train(cfg: RunConfig, manifest, run_dir, seed=None, workers=None, init_checkpoint=None) -> Checkpoint:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if init_checkpoint:
        log.info("fine-tune mode: initial weights from %s", init_checkpoint)
    tc = train_config_from(cfg, seed, workers, init_checkpoint)
    cfg.train.seed = tc.seed
    cfg.sampler.workers = tc.workers
    cfg.save(run_dir / "config.json")
    ds = _dataset(cfg, manifest)
    ckpt = train(tc, ds, run_dir)
    summary = {"variant": ckpt.variant, "city": ds.city, "epochs": ckpt.epoch_notation,
               "init_checkpoint": init_checkpoint, "history": ckpt.history}
    (run_dir / "run.json").write_text(json.dumps(summary, indent=2))
    return ckpt


def cmd_eval(cfg: RunConfig, manifest, run_dir, checkpoint=None, model: str | None = None) -> MetricReport:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")
    ds = _dataset(cfg, manifest)
    bins = cfg.eval.block_start_bins or CITY_PROFILES.get(cfg.eval.city_profile.lower())
    if bins is None:
        raise ConfigError(f"unknown city profile {cfg.eval.city_profile!r}")
    protocol = EvalProtocol(tuple(bins), input_len=cfg.eval.input_len)
    protocol.validate(ds.bins_per_day)

    stores = {"train": [ds.train], "val": [ds.val], "all": [ds.train, ds.val]}[cfg.eval.split]
    if model == "persistence":
        predictor, name, epochs, history = (lambda b: persistence_baseline(b).frames), "persistence", "0", []
    elif checkpoint:
        try:
            ckpt = Checkpoint.load(checkpoint)
        except (OSError, RuntimeError, TypeError) as exc:
            raise DataError(f"cannot load checkpoint {checkpoint}: {exc}") from exc
        predictor, name, epochs, history = ModelPredictor(ckpt.build_model()), ckpt.variant, \
            ckpt.epoch_notation, ckpt.history
    else:
        raise ConfigError("eval needs --checkpoint or --model persistence")

    report = MetricReport()
    for store in stores:
        if store.days():
            report = report.merge(evaluate_challenge(predictor, store, protocol, ds.exo,
                                                     q=getattr(predictor, "q", cfg.sampler.q)))
    if not report.num_elements:
        raise DataError(f"no days to evaluate in split {cfg.eval.split!r}")
    report.save(run_dir / "report.json")
    (run_dir / "table3.tsv").write_text(report.to_table(f"{ds.city} {name}"))
    (run_dir / "run.json").write_text(json.dumps(
        {"variant": name, "city": ds.city, "epochs": epochs, "history": history}, indent=2))
    log.info("%s on %s: mse %.6g, heading acc %.3f over %d blocks", name, ds.city, report.mse_total,
             report.heading_accuracy, len(report.blocks))
    return report


def cmd_report(run_dirs, out_dir) -> dict:
    runs = []
    for rd in map(Path, run_dirs):
        try:
            meta = json.loads((rd / "run.json").read_text())
            if (rd / "report.json").exists():
                report = MetricReport.from_dict(json.loads((rd / "report.json").read_text()))
            else:
                report = _report_from_metrics(rd / "metrics.tsv")
        except (OSError, ValueError, KeyError, IndexError) as exc:
            log.warning("skipping %s: %s", rd, exc)
            continue
        name = meta.get("variant", rd.name)
        if any(r.name == name and r.city == meta.get("city", "") for r in runs):
            name = f"{name}:{rd.name}"
        runs.append(RunSummary(name, meta.get("city", ""), report,
                               str(meta.get("epochs", "")), meta.get("history", [])))
    if not runs:
        raise DataError("no usable runs to report")
    return report_tables(runs, out_dir)


def _report_from_metrics(path: Path) -> MetricReport:
    """Minimal report carrying only the last validation mse of a training run."""
    lines = path.read_text().strip().splitlines()
    header = lines[0].split("\t")
    last = dict(zip(header, lines[-1].split("\t")))
    mse = float(last["val_mse"])
    acc = float(last["heading_acc"])
    import numpy as np
    rep = MetricReport(np.full((3, 3), mse), np.ones((3, 3), dtype=np.int64))
    if acc == acc:
        rep.heading_correct, rep.heading_total = int(round(acc * 1000)), 1000
    return rep


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trafficcast", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic city, movies, weather and manifest")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--run-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--init-checkpoint")

    p = sub.add_parser("eval", help="evaluate with the challenge protocol")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--run-dir")
    p.add_argument("--checkpoint")
    p.add_argument("--model", choices=["persistence"])
    p.add_argument("--city-profile", help="overrides eval.city_profile")

    p = sub.add_parser("report", help="merge run directories into comparison tables")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            cmd_report(args.run_dirs, args.out)
            return EXIT_OK
        cfg = _load_config(args.config)
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.out, args.seed, args.force)
        elif args.command == "train":
            cmd_train(cfg, args.manifest, _run_dir(args.run_dir, "train"), args.seed, args.workers,
                      args.init_checkpoint)
        elif args.command == "eval":
            if args.city_profile:
                cfg.eval.city_profile = args.city_profile
            cmd_eval(cfg, args.manifest, _run_dir(args.run_dir, "eval"), args.checkpoint, args.model)
    except (ConfigError, ProtocolError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except (DataError, OSError, LookupError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    return EXIT_OK


def checksum_tree(root) -> dict[str, str]:
    """sha256 of every file below ``root`` keyed by relative path."""
    root = Path(root)
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


if __name__ == "__main__":
    sys.exit(main())
