"""Command-line entry point: ``cbdae simulate | train | denoise | bench | latent``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig
from .dataio import load_series, read_sim_csv
from .errors import CbdaeError, ContractError, DimensionError, NumericalFault
from .evalbench import (
    BenchConfig,
    latent_comparison,
    run_benchmark,
    similar_trajectories,
    write_traces_csv,
)
from .model import DenoiserState
from .quadtank import Excitation, SimDataset, generate_dataset
from .training import VARIANTS, TrainLog, canonical_variant, train

log = logging.getLogger("cbdae")


def sim_filename(sigma: float) -> str:
    return f"quadtank_sigma{sigma:g}.csv"


def _load_training_data(path, schema):
    """Return (train, val) series; simulator files use their fixed chronological splits."""
    series = load_series(path, schema)
    if schema is None:
        d = read_sim_csv(path)
        ds = SimDataset(d["step"], d["u"], d["y"], d["y_noisy"], float("nan"))
        lo, hi = ds.split_bounds()["train"]
        vlo, vhi = ds.split_bounds()["val"]
        return series.slice(lo, hi), series.slice(vlo, vhi)
    return series, None


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig) -> list[Path]:
    sec = cfg.simulate
    out = Path(sec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_dataset(cfg.tank_params(), sec.sigmas, sec.duration, cfg.seed, sec.p_imp, Excitation(**sec.excitation))
    paths = []
    for sigma, ds in data.items():
        path = out / sim_filename(sigma)
        ds.to_csv(path)
        paths.append(path)
    return paths


def cmd_train(cfg: RunConfig, variant: str | None = None):
    sec = cfg.train
    if not sec.data:
        raise ContractError("train needs a data file (train.data or --data)")
    tcfg = sec.train_config(cfg.seed)
    if variant:
        tcfg = replace(tcfg, variant=canonical_variant(variant))
    train_s, val_s = _load_training_data(sec.data, sec.schema)
    model = state = None
    history = TrainLog()
    if sec.resume:
        saved = ckpt.load_checkpoint(sec.resume)
        if saved.state is None:
            raise ContractError(f"{sec.resume} carries no training state to resume from")
        model, state = saved.model, saved.state
        if Path(sec.log).exists():
            history = TrainLog.from_csv(sec.log)
    try:
        result = train(train_s, tcfg, val_s, resume=state, model=model)
    except NumericalFault as exc:
        partial = getattr(exc, "log", None)
        for rec in partial.records if partial is not None else ():
            history.append(rec)
        history.to_csv(sec.log)
        raise
    for rec in result.log.records:
        history.append(rec)
    history.to_csv(sec.log)
    meta = {"variant": tcfg.variant, "train_config": tcfg.to_dict(), "data": str(sec.data)}
    ckpt.save_checkpoint(sec.checkpoint, result.model, meta, result.state)
    return result


def _denoise_rows(model, values: np.ndarray) -> np.ndarray:
    state = DenoiserState(model)
    out = np.full(values.shape, np.nan)
    for i, row in enumerate(values):
        est = state.push(row)
        if est is not None:
            out[i] = est
    return out


def cmd_denoise(cfg: RunConfig) -> Path:
    sec = cfg.denoise
    if not sec.input:
        raise ContractError("denoise needs an input file (denoise.input or --input)")
    saved = ckpt.load_checkpoint(sec.checkpoint)
    model = saved.model
    series = load_series(sec.input, sec.schema)
    names = model.arch.channel_names
    if series.n_channels != model.arch.n_channels or (names and tuple(series.channel_names) != tuple(names)):
        raise DimensionError(f"input channels {list(series.channel_names)} do not match the checkpoint's {list(names)}")
    est = _denoise_rows(model, series.values)
    index = series.time if series.time is not None else np.arange(len(series), dtype=np.float64)
    with open(sec.output, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index"] + [f"{n}_hat" for n in series.channel_names])
        for t, row in zip(index, est):
            w.writerow([repr(float(t))] + ["" if np.isnan(v) else repr(float(v)) for v in row])
    return Path(sec.output)


def read_denoised_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) if v else np.nan for v in r[1:]] for r in rows])


def cmd_bench(cfg: RunConfig, sigmas=None):
    sec = cfg.bench
    tank = cfg.tank_params()
    if sec.data:
        datasets = {}
        for s, path in sec.data.items():
            d = read_sim_csv(path)
            datasets[float(s)] = SimDataset(d["step"], d["u"], d["y"], d["y_noisy"], float(s))
    else:
        sim = cfg.simulate
        datasets = generate_dataset(tank, sim.sigmas, sim.duration, cfg.seed, sim.p_imp, Excitation(**sim.excitation))
    if sigmas:
        datasets = {s: datasets[s] for s in datasets if any(np.isclose(s, sigmas))}
    models = {}
    for variant, per_sigma in sec.checkpoints.items():
        for s, path in per_sigma.items():
            try:
                models[(canonical_variant(variant), float(s))] = ckpt.load_checkpoint(path).model
            except (OSError, CbdaeError) as exc:
                log.error("checkpoint for %s at sigma=%s unavailable: %s", variant, s, exc)
    methods = [canonical_variant(m) if m.lower() in {v.lower() for v in VARIANTS} else m for m in sec.methods]
    bench = BenchConfig(sec.windows, 2, sec.ema_alpha, sec.kf_q, sec.particles, tank=tank)
    report = run_benchmark(datasets, methods, bench, cfg.seed, models, cfg.jobs)
    report.to_csv(sec.report)
    print(report.table())
    return report


def cmd_latent(cfg: RunConfig, sigmas=None) -> list[Path]:
    sec = cfg.latent
    if not sec.checkpoints:
        raise ContractError("latent needs at least one checkpoint (latent.checkpoints)")
    sigma = float(sigmas[0]) if sigmas else sec.sigma
    runs = similar_trajectories(cfg.tank_params(), sec.duration, sigma, cfg.seed, sec.offset)
    out = Path(sec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for variant, path in sec.checkpoints.items():
        model = ckpt.load_checkpoint(path).model
        cmp = latent_comparison(model, runs, canonical_variant(variant))
        target = out / f"latent_{cmp.label}.csv"
        write_traces_csv(target, cmp.traces)
        print(f"{cmp.label}: smoothness {cmp.smoothness:.4f}  trace distance {cmp.pair_distance:.4f}")
        paths.append(target)
    return paths


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cbdae", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--jobs", type=int, help="worker threads for bench cells")
    common.add_argument("--variant", help="model variant for train: " + ", ".join(VARIANTS))
    common.add_argument("--sigma", help="comma-separated noise levels")
    common.add_argument("--dump-config", help="write the effective configuration here")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate quadruple-tank datasets")
    p.add_argument("--out-dir")
    p.add_argument("--duration", type=int)

    p = sub.add_parser("train", parents=[common], help="train a denoiser")
    p.add_argument("--data")
    p.add_argument("--schema")
    p.add_argument("--checkpoint")
    p.add_argument("--log")
    p.add_argument("--resume")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("denoise", parents=[common], help="stream a CSV through a trained model")
    p.add_argument("--input")
    p.add_argument("--schema")
    p.add_argument("--checkpoint")
    p.add_argument("--output")

    p = sub.add_parser("bench", parents=[common], help="score methods per noise level")
    p.add_argument("--report")
    p.add_argument("--methods", help="comma-separated method names")

    p = sub.add_parser("latent", parents=[common], help="export latent PCA trajectories")
    p.add_argument("--out-dir")
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None:
        cfg.jobs = args.jobs
    sigmas = [float(s) for s in args.sigma.split(",")] if args.sigma else None
    cmd = args.command
    if cmd == "simulate":
        if sigmas:
            cfg.simulate.sigmas = tuple(sigmas)
        if args.out_dir:
            cfg.simulate.out_dir = args.out_dir
        if args.duration:
            cfg.simulate.duration = args.duration
    elif cmd == "train":
        for key in ("data", "schema", "checkpoint", "log", "resume"):
            if getattr(args, key):
                setattr(cfg.train, key, getattr(args, key))
        if args.epochs:
            cfg.train.params["epochs"] = args.epochs
        if args.variant:
            cfg.train.params["variant"] = canonical_variant(args.variant)
    elif cmd == "denoise":
        for key in ("input", "schema", "checkpoint", "output"):
            if getattr(args, key):
                setattr(cfg.denoise, key, getattr(args, key))
    elif cmd == "bench":
        if args.report:
            cfg.bench.report = args.report
        if args.methods:
            cfg.bench.methods = tuple(m.strip() for m in args.methods.split(","))
    elif cmd == "latent":
        if args.out_dir:
            cfg.latent.out_dir = args.out_dir
        if sigmas:
            cfg.latent.sigma = sigmas[0]
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        cfg = _apply_overrides(cfg, args)
        if args.dump_config:
            cfg.dump(args.dump_config)
        sigmas = [float(s) for s in args.sigma.split(",")] if args.sigma else None
        if args.command == "simulate":
            for p in cmd_simulate(cfg):
                print(p)
        elif args.command == "train":
            res = cmd_train(cfg)
            last = res.log.records[-1]
            print(f"trained {res.config.variant}: epochs {res.log.records[0].epoch}..{last.epoch}, best val {res.state.best_val:.6g}")
        elif args.command == "denoise":
            print(cmd_denoise(cfg))
        elif args.command == "bench":
            cmd_bench(cfg, sigmas)
        elif args.command == "latent":
            for p in cmd_latent(cfg, sigmas):
                print(p)
    except (CbdaeError, OSError, ValueError, KeyError) as exc:
        print(f"cbdae {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
