"""Command-line surface: synth, train, sample, eval, transfer, verify.

Every randomized command requires an explicit --seed (no wall-clock default),
and every command writes the fully resolved configuration next to its outputs
as ``resolved.cfg``. Reruns with identical flags and seed produce
byte-identical artifacts. ``--workers`` caps intra-command parallelism
(default from the SPECGEN_WORKERS environment variable); ``--workers 1`` is
bit-deterministic.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from . import metrics as M
from . import pngio, runconfig, transfer, unet
from .diffusion import (
    CheckpointError,
    DiffusionConfig,
    ScheduleError,
    TrainDivergence,
    TrainSettings,
    init_ema,
    load_checkpoint,
    make_linear_schedule,
    sample_loop,
    train,
)
from .diffusion.train import TraceRow
from .numerics import NonFiniteError, RngState, ShapeError
from .rfscene import (
    SceneConfig,
    SceneError,
    generate_dataset,
    generate_target_dataset,
    load_dataset,
)
from .runconfig import ConfigError
from .transfer import TransferError
from .unet import UNet, UNetConfigError, config_from_dict
from .verify import run_verification

SCHEMA = {
    "scene": {
        "sample_rate": (float, 1e6),
        "duration": (float, 0.016),
        "band_span": (float, 1e6),
        "noise_power": (float, 1.0),
    },
    "dataset": {
        "resolution": (int, 32),
        "nfft": (int, 64),
        "hop": (int, 64),
        "window": (str, "hann"),
        "dyn_range_db": (float, 50.0),
        "rgb": (bool, False),
    },
    "model": {
        "resolution": (int, 32),
        "in_channels": (int, 1),
        "base_channels": (int, 32),
        "channel_mult": (str, "1,2,4"),
        "res_blocks_per_level": (int, 2),
        "attention_resolutions": (str, "16,8"),
        "time_embed_dim": (int, 128),
        "num_heads": (int, 4),
        "learned_variance": (bool, False),
    },
    "diffusion": {
        "T": (int, 1000),
        "beta_start": (float, 1e-4),
        "beta_end": (float, 0.02),
        "variance_mode": (str, "fixed_small"),
        "vlb_weight": (float, 1e-3),
    },
    "train": {
        "steps": (int, 3000),
        "batch_size": (int, 16),
        "lr": (float, 1e-4),
        "lr_min": (float, 0.0),
        "weight_decay": (float, 1e-4),
        "ema_decay": (float, 0.999),
        "val_fraction": (float, 0.1),
        "val_interval": (int, 100),
    },
    "transfer": {
        "pretrain_epochs": (int, 20),
        "adapt_epochs": (int, 30),
        "pretrain_lr": (float, 1e-3),
        "criterion": (float, 0.95),
        "batch_size": (int, 32),
    },
}

_ERRORS = (
    SceneError,
    ScheduleError,
    ConfigError,
    CheckpointError,
    TransferError,
    M.MetricError,
    UNetConfigError,
    ShapeError,
    NonFiniteError,
    FileNotFoundError,
)


def _resolve(args, overrides) -> dict:
    text = runconfig.load_file(args.config) if getattr(args, "config", None) else ""
    return runconfig.resolve(SCHEMA, text, overrides)


def _write_resolved(out_dir: Path, resolved: dict, run_info: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    sections = dict(resolved)
    sections["run"] = run_info
    (out_dir / "resolved.cfg").write_text(runconfig.to_text(sections))


def _model_config_text(resolved: dict) -> str:
    return runconfig.to_text({"model": resolved["model"], "diffusion": resolved["diffusion"]})


# -- commands ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    resolved = _resolve(args, {
        ("dataset", "resolution"): args.resolution,
        ("scene", "noise_power"): args.noise_power,
    })
    scene = resolved["scene"]
    ds = resolved["dataset"]
    out = Path(args.out)
    cfg = SceneConfig(
        rng=RngState(args.seed),
        sample_rate=scene["sample_rate"],
        duration=scene["duration"],
        band_span=scene["band_span"],
        noise_power=scene["noise_power"],
    )
    gen = generate_target_dataset if args.classes == "target" else generate_dataset
    rows = gen(
        args.per_class,
        cfg,
        out,
        resolution=ds["resolution"],
        nfft=ds["nfft"],
        hop=ds["hop"],
        window=ds["window"],
        dyn_range_db=ds["dyn_range_db"],
        rgb=ds["rgb"],
    )
    _write_resolved(out, {"scene": scene, "dataset": ds}, {
        "command": "synth", "seed": args.seed, "out": str(out),
        "per_class": args.per_class, "classes": args.classes,
    })
    print(f"wrote {len(rows)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    start_step = 0
    prior_trace: list[TraceRow] = []
    resume_ckpt = None
    if args.resume:
        resume_path = out / "last.ckpt"
        if not resume_path.exists():
            raise CheckpointError(f"--resume: no checkpoint at {resume_path}")
        cfg_text, live, ema_shadow = load_checkpoint(resume_path)
        parsed = runconfig.parse_text(cfg_text)
        resolved = runconfig.resolve(
            SCHEMA,
            runconfig.to_text({k: v for k, v in parsed.items() if k in SCHEMA}),
            {("train", "steps"): args.steps, ("train", "batch_size"): args.batch},
        )
        start_step = int(parsed.get("state", {}).get("step", 0))
        resume_ckpt = (live, ema_shadow)
        trace_file = out / "trace.csv"
        if trace_file.exists():
            import csv as _csv

            with open(trace_file, newline="") as fh:
                for rec in _csv.DictReader(fh):
                    prior_trace.append(TraceRow(
                        step=int(rec["step"]), loss=float(rec["loss"]), lr=float(rec["lr"]),
                        val_loss=float(rec["val_loss"]) if rec["val_loss"] else None,
                    ))
    else:
        resolved = _resolve(args, {
            ("train", "steps"): args.steps,
            ("train", "batch_size"): args.batch,
        })

    images, labels, _ = load_dataset(args.data)
    model_cfg = config_from_dict(resolved["model"])
    if images.shape[-1] != model_cfg.resolution:
        raise UNetConfigError(
            f"dataset resolution {images.shape[-1]} != model resolution {model_cfg.resolution}"
        )
    model = UNet(model_cfg, seed=args.seed)
    if resume_ckpt is not None:
        model.load_arrays(resume_ckpt[0])
    d = resolved["diffusion"]
    diffusion_cfg = DiffusionConfig(
        T=d["T"], beta_start=d["beta_start"], beta_end=d["beta_end"],
        variance_mode=d["variance_mode"], vlb_weight=d["vlb_weight"],
    )
    tr = resolved["train"]
    settings = TrainSettings(
        steps=tr["steps"], batch_size=tr["batch_size"], lr=tr["lr"], lr_min=tr["lr_min"],
        weight_decay=tr["weight_decay"], ema_decay=tr["ema_decay"],
        val_fraction=tr["val_fraction"], val_interval=tr["val_interval"],
        workers=args.workers, seed=args.seed,
    )
    _write_resolved(out, resolved, {
        "command": "train", "seed": args.seed, "out": str(out), "data": str(args.data),
        "workers": args.workers, "resume": bool(args.resume),
    })
    result = train(
        model, images, diffusion_cfg, settings,
        out_dir=out, config_text=_model_config_text(resolved),
        start_step=start_step, prior_trace=prior_trace,
        initial_ema_shadow=resume_ckpt[1] if resume_ckpt else None,
        log=lambda msg: print(msg, file=sys.stderr),
    )
    print(
        f"trained {settings.steps} steps (total {start_step + settings.steps}); "
        f"best val {result.best_val:.5g}; checkpoints in {out}"
    )
    return 0


def cmd_sample(args) -> int:
    ckpt_path = Path(args.ckpt)
    if ckpt_path.is_dir():
        ckpt_path = ckpt_path / "best.ckpt"
    cfg_text, live, ema_shadow = load_checkpoint(ckpt_path)
    parsed = runconfig.parse_text(cfg_text)
    model_cfg = config_from_dict(parsed.get("model", {}))
    d = parsed.get("diffusion", {})
    sched = make_linear_schedule(
        int(d.get("T", 1000)), float(d.get("beta_start", 1e-4)), float(d.get("beta_end", 0.02))
    )
    variance_mode = d.get("variance_mode", "fixed_small")
    model = UNet(model_cfg, seed=0)
    weights = live if args.no_ema else ema_shadow
    model.load_arrays(weights)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_crc = f"{zlib.crc32(ckpt_path.read_bytes()) & 0xFFFFFFFF:08x}"

    shape = (args.count, model_cfg.in_channels, model_cfg.resolution, model_cfg.resolution)
    rng = RngState(args.seed)
    t0 = time.perf_counter()
    batch = sample_loop(model, shape, rng, sched, variance_mode)
    elapsed = time.perf_counter() - t0
    print(
        f"sampled {args.count} images in {elapsed:.1f}s ({elapsed / args.count:.2f}s per sample)",
        file=sys.stderr,
    )
    for i in range(args.count):
        pngio.save_gray(batch[i, 0], out / f"sample_{i:04d}.png")
    meta = {
        "checkpoint": str(ckpt_path),
        "checkpoint_crc32": ckpt_crc,
        "count": args.count,
        "seed": args.seed,
        "ema": not args.no_ema,
        "variance_mode": variance_mode,
    }
    (out / "samples.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _write_resolved(out, {"model": parsed.get("model", {}), "diffusion": d}, {
        "command": "sample", "seed": args.seed, "out": str(out),
        "ckpt": str(ckpt_path), "count": args.count, "ema": not args.no_ema,
    })
    print(f"wrote {args.count} samples to {out}")
    return 0


def _load_image_dir(path) -> np.ndarray:
    path = Path(path)
    if (path / "manifest.csv").exists():
        images, _, _ = load_dataset(path)
        return images[:, 0]
    files = sorted(path.glob("*.png")) or sorted(path.rglob("*.png"))
    if not files:
        raise M.MetricError(f"no PNG images found under {path}")
    return np.stack([pngio.load_gray(f) for f in files])


def cmd_eval(args) -> int:
    gen = _load_image_dir(args.generated)
    ref = _load_image_dir(args.reference)
    report = M.batch_compare(gen, ref)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    M.write_report_csv(report, out / "report.csv")
    summary = M.report_summary(report)
    (out / "summary.txt").write_text(summary + "\n")
    M.match_gallery(report, args.k, out)
    _write_resolved(out, {}, {
        "command": "eval", "generated": str(args.generated),
        "reference": str(args.reference), "k": args.k, "out": str(out),
    })
    print(summary)
    return 0


def cmd_transfer(args) -> int:
    resolved = _resolve(args, {
        ("transfer", "pretrain_epochs"): args.pretrain_epochs,
        ("transfer", "adapt_epochs"): args.adapt_epochs,
    })
    tcfg = resolved["transfer"]
    seeds = tuple(int(s) for s in str(args.seeds).split(",") if s != "")
    if not seeds:
        raise ConfigError("--seeds must name at least one seed")
    src_images, src_labels, _ = load_dataset(args.source)
    tgt_images, tgt_labels, _ = load_dataset(args.target)
    out = Path(args.out)
    report, per_seed = transfer.run_transfer_study(
        src_images, src_labels, tgt_images, tgt_labels,
        seeds=seeds,
        pretrain_epochs=tcfg["pretrain_epochs"],
        adapt_epochs=tcfg["adapt_epochs"],
        pretrain_lr=tcfg["pretrain_lr"],
        criterion=tcfg["criterion"],
        out_dir=out,
        scratch_only=args.scratch_only,
        log=lambda msg: print(msg, file=sys.stderr),
    )
    _write_resolved(out, {"transfer": tcfg}, {
        "command": "transfer", "seeds": ",".join(str(s) for s in seeds),
        "source": str(args.source), "target": str(args.target),
        "out": str(out), "scratch_only": args.scratch_only,
    })
    print(report.summary())
    return 0


def cmd_verify(args) -> int:
    results, report = run_verification(args.filter or "")
    print(report)
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report + "\n")
    if not results:
        print(f"no oracle checks match filter {args.filter!r}", file=sys.stderr)
        return 1
    return 0 if all(r.passed for r in results) else 1


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specgen",
        description="RF spectrogram synthesis, diffusion training/generation, and evaluation",
    )
    default_workers = int(os.environ.get("SPECGEN_WORKERS", "1"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic spectrogram dataset")
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", choices=["source", "target"], default="source")
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--noise-power", type=float, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--workers", type=int, default=default_workers)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train the diffusion model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--workers", type=int, default=default_workers)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="draw spectrograms from a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-ema", action="store_true")
    p.add_argument("--workers", type=int, default=default_workers)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="PSNR/SSIM comparison of generated vs reference images")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=default_workers)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("transfer", help="pretrained-vs-scratch convergence study")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--out", required=True)
    p.add_argument("--pretrain-epochs", type=int, default=None)
    p.add_argument("--adapt-epochs", type=int, default=None)
    p.add_argument("--scratch-only", action="store_true")
    p.add_argument("--config", default=None)
    p.add_argument("--workers", type=int, default=default_workers)
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("verify", help="run the built-in oracle suite")
    p.add_argument("--filter", default="")
    p.add_argument("--out", default=None)
    p.add_argument("--workers", type=int, default=default_workers)
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except TrainDivergence as exc:
        print(f"error: {exc} ({len(exc.trace)} steps recorded)", file=sys.stderr)
        return 1
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
