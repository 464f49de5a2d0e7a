"""Denoising diffusion probabilistic model mathematics.

Forward corruption, the noise-prediction training loss, reverse ancestral
sampling, and the variational-bound terms. A *model* here is any callable
``model(x_t: Tensor (N,C,H,W), t: int array (N,)) -> Tensor`` returning either
C channels (noise prediction) or 2C channels (noise prediction stacked with
raw variance-interpolation logits).

Variance modes for the reverse conditional:
    fixed_small     Sigma_t = posterior variance beta~_t
    fixed_large     Sigma_t = beta_t
    learned_interp  log Sigma_t = v * log beta_t + (1 - v) * log beta~_t,
                    v = clip((raw + 1) / 2, 0, 1) from the model's variance
                    channels (raw -1 -> beta~_t, raw +1 -> beta_t)

Images are modeled in [-1, 1]; ``sample_loop`` maps its output back to [0, 1].
The reconstruction term uses a discretized Gaussian over the 256-level grid
(bin half-width 1/255, edge bins extended to infinity).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..numerics import RngState, Tensor
from ..numerics import tensor as T
from .schedule import NoiseSchedule, ScheduleError

VARIANCE_MODES = ("fixed_small", "fixed_large", "learned_interp")

ModelFn = Callable[[Tensor, np.ndarray], Tensor]


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    variance_mode: str = "fixed_small"
    vlb_weight: float = 1e-3

    def __post_init__(self):
        if not self.beta_start < self.beta_end:
            raise ScheduleError(
                f"beta_start must be < beta_end, got [{self.beta_start}, {self.beta_end}]"
            )
        if self.vlb_weight < 0:
            raise ScheduleError(f"vlb_weight must be >= 0, got {self.vlb_weight}")
        if self.variance_mode not in VARIANCE_MODES:
            raise ScheduleError(
                f"unknown variance_mode {self.variance_mode!r}, expected one of {VARIANCE_MODES}"
            )


def _t_vector(t, n: int, sched: NoiseSchedule) -> np.ndarray:
    tv = np.full(n, int(t), dtype=np.int64) if np.isscalar(t) else np.asarray(t, dtype=np.int64)
    if tv.shape != (n,):
        raise ScheduleError(f"t has shape {tv.shape}, expected ({n},)")
    if tv.min() < 1 or tv.max() > sched.T:
        raise ScheduleError(f"timesteps must lie in [1, {sched.T}], got [{tv.min()}, {tv.max()}]")
    return tv


def _bcast(values: np.ndarray, ndim: int, dtype) -> np.ndarray:
    return values.reshape(values.shape + (1,) * (ndim - 1)).astype(dtype)


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form forward marginal: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.

    ``t`` is a scalar applied to the whole batch or a per-sample vector
    indexing the leading axis.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ScheduleError(f"eps shape {eps.shape} must match x0 shape {x0.shape}")
    if x0.ndim == 0:
        ab = sched.alpha_bar[sched.check_t(t) - 1]
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    tv = _t_vector(t, x0.shape[0], sched)
    ab = _bcast(sched.alpha_bar[tv - 1], x0.ndim, x0.dtype)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def gaussian_kl(mean1, var1, mean2, var2) -> Tensor:
    """Elementwise KL(N(mean1, var1) || N(mean2, var2)).

    Accepts Tensors or arrays/scalars (wrapped as constants); returns a Tensor
    so the learned-variance objective can differentiate through it.
    """
    vals = []
    for v in (mean1, var1, mean2, var2):
        vals.append(v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64)))
    mean1, var1, mean2, var2 = vals
    if np.any(var1.data <= 0) or np.any(var2.data <= 0):
        raise ScheduleError("gaussian_kl requires strictly positive variances")
    log_ratio = T.sub(T.log(var2), T.log(var1))
    diff = T.sub(mean1, mean2)
    frac = T.div(T.add(var1, T.square(diff)), var2)
    return T.mul(T.add(T.sub(log_ratio, Tensor(np.asarray(1.0, dtype=log_ratio.dtype))), frac),
                 Tensor(np.asarray(0.5, dtype=log_ratio.dtype)))


def q_posterior(x0: np.ndarray, x_t: np.ndarray, t: int, sched: NoiseSchedule):
    """Mean and variance of q(x_{t-1} | x_t, x_0) for t in [2, T].

    The t = 1 transition is handled by the reconstruction term, not here.
    """
    t = sched.check_t(t)
    if t < 2:
        raise ScheduleError("q_posterior is defined for t >= 2; t = 1 uses the reconstruction term")
    beta_t = sched.beta[t - 1]
    ab_t = sched.alpha_bar[t - 1]
    ab_prev = sched.alpha_bar_prev(t)
    alpha_t = sched.alpha[t - 1]
    c0 = np.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    ct = np.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    mean = c0 * np.asarray(x0) + ct * np.asarray(x_t)
    return mean, float(sched.posterior_var[t - 1])


def split_model_output(out: Tensor, channels: int):
    """(eps_prediction, variance_logits_or_None) from a model output Tensor."""
    c_out = out.shape[1]
    if c_out == channels:
        return out, None
    if c_out == 2 * channels:
        return out[:, :channels], out[:, channels:]
    raise ScheduleError(
        f"model produced {c_out} channels, expected {channels} or {2 * channels}"
    )


def _model_log_variance(v_logits, t_vec: np.ndarray, sched: NoiseSchedule, variance_mode: str,
                        shape, dtype):
    """Log Sigma_t per variance mode; Tensor when learned, ndarray otherwise."""
    log_beta = np.log(sched.beta[t_vec - 1])
    log_small = sched.posterior_log_var_clipped[t_vec - 1]
    if variance_mode == "fixed_small":
        return _bcast(log_small, len(shape), dtype)
    if variance_mode == "fixed_large":
        return _bcast(log_beta, len(shape), dtype)
    if variance_mode == "learned_interp":
        if v_logits is None:
            raise ScheduleError("learned_interp requires a model with variance channels")
        frac = T.clamp(
            T.mul(T.add(v_logits, Tensor(np.asarray(1.0, dtype=v_logits.dtype))),
                  Tensor(np.asarray(0.5, dtype=v_logits.dtype))),
            0.0,
            1.0,
        )
        lb = Tensor(_bcast(log_beta, len(shape), dtype))
        ls = Tensor(_bcast(log_small, len(shape), dtype))
        one = Tensor(np.asarray(1.0, dtype=dtype))
        return T.add(T.mul(frac, lb), T.mul(T.sub(one, frac), ls))
    raise ScheduleError(f"unknown variance_mode {variance_mode!r}")


def predicted_mean(x_t: np.ndarray, eps_pred, t_vec: np.ndarray, sched: NoiseSchedule):
    """Reverse-step mean mu_theta = (x_t - beta_t / sqrt(1-ab_t) * eps) / sqrt(alpha_t)."""
    dtype = x_t.dtype
    coef = _bcast(sched.beta[t_vec - 1] / np.sqrt(1.0 - sched.alpha_bar[t_vec - 1]), x_t.ndim, dtype)
    inv_sqrt_alpha = _bcast(1.0 / np.sqrt(sched.alpha[t_vec - 1]), x_t.ndim, dtype)
    if isinstance(eps_pred, Tensor):
        xt = Tensor(x_t)
        return T.mul(T.sub(xt, T.mul(Tensor(coef), eps_pred)), Tensor(inv_sqrt_alpha))
    return (x_t - coef * eps_pred) * inv_sqrt_alpha


def p_sample_step(
    model: ModelFn,
    x_t: np.ndarray,
    t: int,
    rng: RngState,
    sched: NoiseSchedule,
    variance_mode: str = "fixed_small",
) -> np.ndarray:
    """One reverse transition x_t -> x_{t-1}; deterministic (z = 0) at t = 1."""
    if variance_mode not in VARIANCE_MODES:
        raise ScheduleError(f"unknown variance_mode {variance_mode!r}")
    t = sched.check_t(t)
    x_t = np.asarray(x_t)
    n, c = x_t.shape[0], x_t.shape[1]
    t_vec = np.full(n, t, dtype=np.int64)
    with T.no_grad():
        out = model(Tensor(x_t), t_vec)
        eps_pred, v_logits = split_model_output(out, c)
        mean = predicted_mean(x_t, eps_pred, t_vec, sched)
        mean = mean.data if isinstance(mean, Tensor) else mean
        log_var = _model_log_variance(v_logits, t_vec, sched, variance_mode, x_t.shape, x_t.dtype)
        log_var = log_var.data if isinstance(log_var, Tensor) else log_var
    if t == 1:
        return mean
    z = rng.normal(x_t.shape, dtype=x_t.dtype)
    return mean + np.exp(0.5 * log_var) * z


def sample_loop(
    model: ModelFn,
    shape: tuple,
    rng: RngState,
    sched: NoiseSchedule,
    variance_mode: str = "fixed_small",
    dtype=np.float32,
) -> np.ndarray:
    """Ancestral sampling from x_T ~ N(0, I); returns images in [0, 1]."""
    x = rng.normal(shape, dtype=dtype)
    for t in range(sched.T, 0, -1):
        x = p_sample_step(model, x, t, rng, sched, variance_mode)
    x = np.clip(x, -1.0, 1.0)
    return (x + 1.0) / 2.0


def simple_loss(
    model: ModelFn,
    x0: np.ndarray,
    rng: RngState,
    sched: NoiseSchedule,
) -> Tensor:
    """Mean squared error between true and predicted noise at uniform timesteps.

    Draw order: per-sample timesteps first (one randint batch), then the noise
    (one normal batch), both from ``rng``.
    """
    x0 = np.asarray(x0)
    if x0.ndim != 4 or x0.shape[0] < 1:
        raise ScheduleError(f"x0 must be a non-empty NCHW batch, got shape {x0.shape}")
    t_vec = rng.randint(1, sched.T + 1, (x0.shape[0],))
    eps = rng.normal(x0.shape, dtype=x0.dtype)
    return noise_prediction_loss(model, x0, t_vec, eps, sched)


def noise_prediction_loss(model: ModelFn, x0, t_vec, eps, sched) -> Tensor:
    """L_simple for explicit draws (used by simple_loss and the trainer)."""
    x_t = q_sample(x0, t_vec, eps, sched)
    out = model(Tensor(x_t), t_vec)
    eps_pred, _ = split_model_output(out, x0.shape[1])
    return T.mean_square_error(eps_pred, Tensor(eps.astype(eps_pred.dtype, copy=False)))


def _standard_normal_cdf(z: Tensor) -> Tensor:
    half = Tensor(np.asarray(0.5, dtype=z.dtype))
    inv_sqrt2 = Tensor(np.asarray(1.0 / np.sqrt(2.0), dtype=z.dtype))
    return T.mul(half, T.add(Tensor(np.asarray(1.0, dtype=z.dtype)), T.erf(T.mul(z, inv_sqrt2))))


def discretized_gaussian_log_likelihood(x: np.ndarray, mean, log_var) -> Tensor:
    """log p(x) for a Gaussian discretized onto the 256-level grid in [-1, 1].

    Bins have half-width 1/255 around each level; the first and last bins
    absorb the tails. ``x`` is data (constant); mean/log_var may be Tensors.
    """
    x = np.asarray(x)
    mean = mean if isinstance(mean, Tensor) else Tensor(np.asarray(mean, dtype=x.dtype))
    log_var = log_var if isinstance(log_var, Tensor) else Tensor(np.asarray(log_var, dtype=x.dtype))
    half_bin = np.asarray(1.0 / 255.0, dtype=x.dtype)
    neg_half = Tensor(np.asarray(-0.5, dtype=x.dtype))
    inv_std = T.exp(T.mul(log_var, neg_half))
    centered = T.sub(Tensor(x), mean)
    plus = T.mul(T.add(centered, Tensor(half_bin)), inv_std)
    minus = T.mul(T.sub(centered, Tensor(half_bin)), inv_std)
    cdf_plus = _standard_normal_cdf(plus)
    cdf_minus = _standard_normal_cdf(minus)
    hi = (x > 0.999).astype(x.dtype)
    lo = (x < -0.999).astype(x.dtype)
    one = Tensor(np.ones_like(x))
    cdf_plus = T.add(T.mul(cdf_plus, Tensor(1.0 - hi)), Tensor(hi))
    cdf_minus = T.mul(cdf_minus, Tensor(1.0 - lo))
    prob = T.clamp(T.sub(cdf_plus, cdf_minus), 1e-12, 1.0)
    return T.log(prob)


def vlb_term(model_out_mean, model_log_var, x0, x_t, t_vec, sched) -> Tensor:
    """Per-element bound term at sampled timesteps: KL for t >= 2, -log p for t = 1."""
    dtype = x_t.dtype
    t_arr = np.asarray(t_vec)
    beta = sched.beta[t_arr - 1]
    ab = sched.alpha_bar[t_arr - 1]
    ab_prev = np.where(t_arr >= 2, sched.alpha_bar[np.maximum(t_arr - 2, 0)], 1.0)
    alpha = sched.alpha[t_arr - 1]
    nd = x_t.ndim
    c0 = _bcast(np.sqrt(ab_prev) * beta / (1.0 - ab), nd, dtype)
    ct = _bcast(np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab), nd, dtype)
    q_mean = c0 * np.asarray(x0) + ct * np.asarray(x_t)
    q_var = _bcast(np.maximum(sched.posterior_var[t_arr - 1], 1e-20), nd, dtype)
    model_var = T.exp(model_log_var) if isinstance(model_log_var, Tensor) else np.exp(model_log_var)
    kl = gaussian_kl(Tensor(q_mean), Tensor(q_var), model_out_mean, model_var)
    nll = T.neg(discretized_gaussian_log_likelihood(np.asarray(x0), model_out_mean, model_log_var))
    is_first = _bcast((t_arr == 1).astype(np.float64), nd, dtype)
    mask1 = Tensor(is_first)
    mask_rest = Tensor(1.0 - is_first)
    return T.add(T.mul(nll, mask1), T.mul(kl, mask_rest))


def vlb_terms(
    model: ModelFn,
    x0: np.ndarray,
    rng: RngState,
    sched: NoiseSchedule,
    variance_mode: str = "fixed_small",
) -> np.ndarray:
    """Per-term bound vector [L_0, L_1, ..., L_T], each a per-element mean in nats.

    Index 0 is the reconstruction term -log p(x0 | x1); index t-1 for t in
    [2, T] is KL(q(x_{t-1} | x_t, x0) || p_theta(x_{t-1} | x_t)); index T is
    the model-free prior term KL(q(x_T | x0) || N(0, I)). One x_t is sampled
    from q(x_t | x0) per term using ``rng``.
    """
    x0 = np.asarray(x0)
    n, c = x0.shape[0], x0.shape[1]
    terms = np.zeros(sched.T + 1)
    with T.no_grad():
        for t in range(1, sched.T + 1):
            eps = rng.normal(x0.shape, dtype=x0.dtype)
            x_t = q_sample(x0, t, eps, sched)
            t_vec = np.full(n, t, dtype=np.int64)
            out = model(Tensor(x_t), t_vec)
            eps_pred, v_logits = split_model_output(out, c)
            mean = predicted_mean(x_t, eps_pred, t_vec, sched)
            log_var = _model_log_variance(v_logits, t_vec, sched, variance_mode, x0.shape, x0.dtype)
            term = vlb_term(mean, log_var, x0, x_t, t_vec, sched)
            terms[t - 1] = float(np.mean(term.data))
        ab_T = sched.alpha_bar[-1]
        prior = gaussian_kl(np.sqrt(ab_T) * x0.astype(np.float64), 1.0 - ab_T, 0.0, 1.0)
        terms[sched.T] = float(np.mean(prior.data))
    return terms
