"""Training loop for the diffusion model.

Optimization follows the fine-tuning recipe: AdamW at an initial learning rate
of 1e-4 with cosine annealing, an exponential moving average of the weights,
and retention of the checkpoint with the lowest validation loss. The loss is
L_simple plus vlb_weight times the per-step bound term when the variance is
learned (the bound term's gradient reaches only the variance channels; the
mean prediction inside it is detached).

Data parallelism is expressed as k shards per step computing losses on the
shared read-only weights with independent tapes; shard gradients are combined
by ordered deterministic reduction before one optimizer step. Per-sample
draws are derived from (seed, step, purpose) so the math is identical for any
worker count, and k = 1 is bit-deterministic.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..numerics import AdamW, NonFiniteError, RngState, Tensor, backward
from ..numerics import tensor as T
from .checkpoint import save_checkpoint
from .ddpm import (
    DiffusionConfig,
    ModelFn,
    _model_log_variance,
    noise_prediction_loss,
    predicted_mean,
    q_sample,
    split_model_output,
    vlb_term,
)
from .ema import EmaState, ema_update, init_ema
from .schedule import NoiseSchedule, make_linear_schedule


class TrainDivergence(RuntimeError):
    """Loss went non-finite; carries the trace collected so far."""

    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclass
class TrainSettings:
    steps: int
    batch_size: int = 16
    lr: float = 1e-4
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    ema_decay: float = 0.999
    val_fraction: float = 0.1
    val_interval: int = 100
    workers: int = 1
    seed: int = 0


@dataclass
class TraceRow:
    step: int
    loss: float
    lr: float
    val_loss: Optional[float] = None


@dataclass
class TrainResult:
    trace: list[TraceRow] = field(default_factory=list)
    best_val: float = math.inf
    best_step: int = -1
    ema: Optional[EmaState] = None

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.trace]


def cosine_lr(step: int, total: int, lr: float, lr_min: float = 0.0) -> float:
    frac = min(max(step / max(total, 1), 0.0), 1.0)
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * frac))


def training_loss(
    model: ModelFn,
    x0: np.ndarray,
    t_vec: np.ndarray,
    eps: np.ndarray,
    sched: NoiseSchedule,
    variance_mode: str = "fixed_small",
    vlb_weight: float = 0.0,
) -> Tensor:
    """L_simple plus the weighted bound term (learned variance only)."""
    x_t = q_sample(x0, t_vec, eps, sched)
    out = model(Tensor(x_t), t_vec)
    eps_pred, v_logits = split_model_output(out, x0.shape[1])
    loss = T.mean_square_error(eps_pred, Tensor(eps.astype(eps_pred.dtype, copy=False)))
    if variance_mode == "learned_interp" and vlb_weight > 0.0:
        mean = predicted_mean(x_t, eps_pred.detach(), t_vec, sched)
        log_var = _model_log_variance(v_logits, t_vec, sched, "learned_interp", x0.shape, x0.dtype)
        term = vlb_term(mean, log_var, x0, x_t, t_vec, sched)
        weight = Tensor(np.asarray(vlb_weight, dtype=loss.dtype))
        loss = T.add(loss, T.mul(weight, T.mean_(term)))
    return loss


def _shard_bounds(n: int, workers: int) -> list[tuple[int, int]]:
    k = max(1, min(workers, n))
    base, extra = divmod(n, k)
    bounds, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        bounds.append((start, start + size))
        start += size
    return bounds


def split_validation(n: int, seed: int, val_fraction: float = 0.1):
    """Deterministic train/validation index split (val empty when n < 2)."""
    perm = RngState(seed).derive(5050).shuffle(n)
    n_val = max(1, round(val_fraction * n)) if n >= 2 and val_fraction > 0 else 0
    return perm[n_val:], perm[:n_val]


def validation_loss(
    model: ModelFn,
    x0_val: np.ndarray,
    sched: NoiseSchedule,
    seed: int,
    batch_size: int,
) -> float:
    """L_simple over the validation split with fixed draws (comparable across steps)."""
    rng = RngState(seed).derive(7777)
    total, count = 0.0, 0
    with T.no_grad():
        for start in range(0, x0_val.shape[0], batch_size):
            chunk = x0_val[start : start + batch_size]
            t_vec = rng.randint(1, sched.T + 1, (chunk.shape[0],))
            eps = rng.normal(chunk.shape, dtype=chunk.dtype)
            loss = noise_prediction_loss(model, chunk, t_vec, eps, sched)
            total += float(loss.data) * chunk.shape[0]
            count += chunk.shape[0]
    return total / max(count, 1)


def _with_state(config_text: str, step: int, best_val: float) -> str:
    text = config_text.rstrip()
    state = f"[state]\nstep = {step}\nbest_val = {best_val:.10g}\n"
    return (text + "\n\n" + state) if text else state


def write_trace(path, trace: list[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr", "val_loss"])
        for r in trace:
            writer.writerow(
                [r.step, f"{r.loss:.8g}", f"{r.lr:.8g}", "" if r.val_loss is None else f"{r.val_loss:.8g}"]
            )


def train(
    model,
    images: np.ndarray,
    diffusion_cfg: DiffusionConfig,
    settings: TrainSettings,
    out_dir=None,
    config_text: str = "",
    start_step: int = 0,
    prior_trace: Optional[list[TraceRow]] = None,
    initial_ema_shadow: Optional[dict] = None,
    log=None,
) -> TrainResult:
    """Optimize ``model`` (callable with a ``.params`` name->Tensor map).

    ``images`` are [0, 1] NCHW arrays; they are mapped to [-1, 1] internally.
    With ``out_dir`` set, writes ``best.ckpt`` (lowest validation loss),
    ``last.ckpt``, and ``trace.csv``. ``start_step``/``prior_trace``/
    ``initial_ema_shadow`` continue a resumed run contiguously; cosine
    annealing spans start_step + steps.
    """
    images = np.asarray(images)
    x0_all = (2.0 * images - 1.0).astype(np.float32)
    train_idx, val_idx = split_validation(x0_all.shape[0], settings.seed, settings.val_fraction)
    x0_train = x0_all[train_idx]
    x0_val = x0_all[val_idx] if val_idx.size else x0_all[train_idx[: settings.batch_size]]
    sched = make_linear_schedule(diffusion_cfg.T, diffusion_cfg.beta_start, diffusion_cfg.beta_end)
    vlb_weight = diffusion_cfg.vlb_weight if diffusion_cfg.variance_mode == "learned_interp" else 0.0

    opt = AdamW(model.params, lr=settings.lr, weight_decay=settings.weight_decay)
    ema = init_ema(model.params, settings.ema_decay)
    if initial_ema_shadow is not None:
        for name, arr in initial_ema_shadow.items():
            ema.shadow[name][...] = arr
    base = RngState(settings.seed)
    name_of = {id(p): name for name, p in model.params.items()}
    total_steps = start_step + settings.steps
    result = TrainResult(trace=list(prior_trace or []), ema=ema)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def shard_loss(args):
        x0s, ts, epss, weight = args
        loss = training_loss(
            model, x0s, ts, epss, sched, diffusion_cfg.variance_mode, vlb_weight
        )
        grads = backward(loss, write_leaves=False)
        named = {name_of[id(p)]: g * weight for p, g in grads.items()}
        return float(loss.data) * weight, named

    pool = ThreadPoolExecutor(max_workers=settings.workers) if settings.workers > 1 else None
    try:
        for step in range(start_step, total_steps):
            lr = cosine_lr(step, total_steps, settings.lr, settings.lr_min)
            opt.lr = lr
            picks = base.derive(step, 2).randint(0, x0_train.shape[0], (settings.batch_size,))
            x0 = x0_train[picks]
            t_vec = base.derive(step, 0).randint(1, sched.T + 1, (settings.batch_size,))
            eps = base.derive(step, 1).normal(x0.shape, dtype=x0.dtype)

            bounds = _shard_bounds(settings.batch_size, settings.workers)
            jobs = [
                (x0[a:b], t_vec[a:b], eps[a:b], (b - a) / settings.batch_size)
                for a, b in bounds
            ]
            try:
                if pool is not None and len(jobs) > 1:
                    results = list(pool.map(shard_loss, jobs))
                else:
                    results = [shard_loss(j) for j in jobs]
            except NonFiniteError as exc:
                if out_dir is not None:
                    write_trace(out_dir / "trace.csv", result.trace)
                raise TrainDivergence(f"loss diverged at step {step}: {exc}", result.trace) from exc

            # ordered reduction over shard index
            loss_val = 0.0
            grads: dict[str, np.ndarray] = {}
            for lval, named in results:
                loss_val += lval
                for name, g in named.items():
                    grads[name] = grads.get(name, 0.0) + g

            if not math.isfinite(loss_val):
                if out_dir is not None:
                    write_trace(out_dir / "trace.csv", result.trace)
                raise TrainDivergence(f"loss diverged at step {step}", result.trace)

            opt.step(grads)
            ema_update(ema, model.params)

            row = TraceRow(step=step, loss=loss_val, lr=lr)
            if settings.val_interval and (step + 1) % settings.val_interval == 0:
                row.val_loss = validation_loss(model, x0_val, sched, settings.seed, settings.batch_size)
                if row.val_loss < result.best_val:
                    result.best_val = row.val_loss
                    result.best_step = step
                    if out_dir is not None:
                        save_checkpoint(
                            out_dir / "best.ckpt",
                            _with_state(config_text, step + 1, result.best_val),
                            model.params,
                            ema.shadow,
                        )
                if log is not None:
                    log(f"step {step + 1}/{total_steps} loss {loss_val:.4f} val {row.val_loss:.4f}")
            result.trace.append(row)
    finally:
        if pool is not None:
            pool.shutdown()

    if out_dir is not None:
        save_checkpoint(
            out_dir / "last.ckpt",
            _with_state(config_text, total_steps, result.best_val),
            model.params,
            ema.shadow,
        )
        if result.best_step < 0:
            # no validation pass ran; keep best == last for downstream loaders
            save_checkpoint(
                out_dir / "best.ckpt",
                _with_state(config_text, total_steps, result.best_val),
                model.params,
                ema.shadow,
            )
        write_trace(out_dir / "trace.csv", result.trace)
    return result
