import math

import numpy as np
import pytest

from oracles import gaussian_kl_closed_form
from specgen.diffusion import (
    DiffusionConfig,
    ScheduleError,
    from_betas,
    gaussian_kl,
    make_linear_schedule,
    p_sample_step,
    q_posterior,
    q_sample,
    sample_loop,
    simple_loss,
    vlb_terms,
)
from specgen.numerics import RngState, Tensor


class FnModel:
    """Test stub: wraps a (x_data, t_vec) -> ndarray function as a model."""

    def __init__(self, fn):
        self.fn = fn
        self.params = {}

    def __call__(self, x, t):
        return Tensor(self.fn(x.data, np.asarray(t)))


def zero_model(channels=1):
    return FnModel(lambda x, t: np.zeros_like(x))


def exact_eps_model(x0, sched):
    """Recovers the eps that generated x_t from the known x0 (per-sample t)."""

    def fn(x_t, t_vec):
        ab = sched.alpha_bar[t_vec - 1].reshape(-1, *([1] * (x_t.ndim - 1)))
        return ((x_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)).astype(x_t.dtype)

    return FnModel(fn)


class ZeroRng(RngState):
    """Stands in for RngState where the test needs z = 0 draws."""

    def __init__(self):
        super().__init__(0)

    def normal(self, shape=(), dtype=np.float64):
        return np.zeros(shape, dtype=dtype)


SCHED4 = make_linear_schedule(4, 0.1, 0.4)


# -- q_sample -------------------------------------------------------------------


def test_q_sample_noiseless_limit():
    s = from_betas(np.array([1e-12]))
    x0 = np.full((2, 1, 2, 2), 3.0)
    out = q_sample(x0, 1, np.ones_like(x0), s)
    assert np.allclose(out, x0, atol=1e-5)


def test_q_sample_pure_noise_limit():
    s = from_betas(np.full(60, 0.5))  # alpha_bar_60 = 2^-60 ~ 0
    eps = np.full((1, 1, 2, 2), 2.5)
    out = q_sample(np.full((1, 1, 2, 2), 7.0), 60, eps, s)
    assert np.allclose(out, eps, atol=1e-6)


def test_q_sample_hand_value():
    # alpha_bar = 0.25: x_t = 0.5 * 2 + sqrt(0.75) * 1 = 1.8660254
    s = from_betas(np.array([0.75]))
    out = q_sample(np.asarray(2.0), 1, np.asarray(1.0), s)
    assert out == pytest.approx(1.8660254037844386, abs=1e-10)


def test_q_sample_validation():
    with pytest.raises(ScheduleError):
        q_sample(np.zeros((2, 1, 2, 2)), 5, np.zeros((2, 1, 2, 2)), SCHED4)
    with pytest.raises(ScheduleError):
        q_sample(np.zeros((2, 1, 2, 2)), 1, np.zeros((2, 1, 2, 3)), SCHED4)


def test_q_sample_marginal_statistics_5_sigma():
    s = make_linear_schedule(10, 0.02, 0.2)
    t = 7
    ab = s.alpha_bar[t - 1]
    x0 = np.full(100_000, 0.6)
    eps = RngState(71).normal((100_000,))
    xt = q_sample(x0, np.full(100_000, t), eps, s)
    n = xt.size
    mean_se = math.sqrt(1.0 - ab) / math.sqrt(n)
    var_se = (1.0 - ab) * math.sqrt(2.0 / (n - 1))
    assert abs(xt.mean() - math.sqrt(ab) * 0.6) < 5 * mean_se
    assert abs(xt.var() - (1.0 - ab)) < 5 * var_se


# -- gaussian_kl ------------------------------------------------------------------


def test_gaussian_kl_identical_is_zero():
    assert gaussian_kl(0.3, 1.2, 0.3, 1.2).item() == pytest.approx(0.0, abs=1e-15)


def test_gaussian_kl_hand_values():
    assert gaussian_kl(1.0, 1.0, 0.0, 1.0).item() == pytest.approx(0.5, abs=1e-12)
    assert gaussian_kl(0.0, 4.0, 0.0, 1.0).item() == pytest.approx(
        0.5 * (math.log(0.25) + 4.0 - 1.0), abs=1e-12
    )
    # cross-check against the independent closed-form oracle
    assert gaussian_kl(0.7, 2.0, -0.3, 0.5).item() == pytest.approx(
        gaussian_kl_closed_form(0.7, 2.0, -0.3, 0.5), abs=1e-12
    )


def test_gaussian_kl_rejects_bad_variance():
    with pytest.raises(ScheduleError):
        gaussian_kl(0.0, 0.0, 0.0, 1.0)
    with pytest.raises(ScheduleError):
        gaussian_kl(0.0, 1.0, 0.0, -2.0)


def test_gaussian_kl_nonnegative_property():
    rng = RngState(81)
    for _ in range(200):
        m1, m2 = rng.normal(()), rng.normal(())
        v1, v2 = rng.uniform(()) + 0.05, rng.uniform(()) + 0.05
        kl = gaussian_kl(m1, v1, m2, v2).item()
        assert kl >= -1e-14
        if abs(m1 - m2) > 1e-9 or abs(v1 - v2) > 1e-9:
            assert kl > 0.0


# -- q_posterior ------------------------------------------------------------------


def test_q_posterior_zero_inputs():
    mean, var = q_posterior(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)), 2, SCHED4)
    assert np.allclose(mean, 0.0)


def test_q_posterior_hand_values():
    mean, var = q_posterior(np.asarray(1.0), np.asarray(1.0), 2, SCHED4)
    expected = (math.sqrt(0.9) * 0.2 * 1 + math.sqrt(0.8) * 0.1 * 1) / 0.28
    assert float(mean) == pytest.approx(expected, abs=1e-12)
    assert var == pytest.approx(0.2 * (1 - 0.9) / (1 - 0.72), abs=1e-12)


def test_q_posterior_rejects_t1():
    with pytest.raises(ScheduleError):
        q_posterior(np.asarray(1.0), np.asarray(1.0), 1, SCHED4)


# -- p_sample_step ----------------------------------------------------------------


def test_p_sample_t1_is_deterministic():
    model = zero_model()
    x = np.full((1, 1, 2, 2), 0.4, dtype=np.float64)
    a = p_sample_step(model, x, 1, RngState(1), SCHED4)
    b = p_sample_step(model, x, 1, RngState(2), SCHED4)
    assert np.array_equal(a, b)
    assert np.allclose(a, x / math.sqrt(SCHED4.alpha[0]))


def test_p_sample_mean_hand_value_exact_eps():
    x0 = np.full((1, 1, 1, 1), 1.0)
    eps = 1.0
    t = 2
    ab = SCHED4.alpha_bar[t - 1]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    model = exact_eps_model(x0, SCHED4)
    out = p_sample_step(model, x_t, t, ZeroRng(), SCHED4, "fixed_small")
    expected = (x_t.item() - SCHED4.beta[t - 1] / math.sqrt(1 - ab) * eps) / math.sqrt(
        SCHED4.alpha[t - 1]
    )
    assert out.item() == pytest.approx(expected, abs=1e-12)


def test_learned_interp_endpoint_equals_fixed_small():
    # raw variance logits of -1 map to v = 0, i.e. the posterior variance
    def fn(x, t):
        return np.concatenate([np.zeros_like(x), -np.ones_like(x)], axis=1)

    model = FnModel(fn)
    x = RngState(5).normal((2, 1, 4, 4))
    a = p_sample_step(model, x, 3, RngState(9), SCHED4, "learned_interp")
    b = p_sample_step(zero_model(), x, 3, RngState(9), SCHED4, "fixed_small")
    assert np.allclose(a, b, atol=1e-12)


def test_unknown_variance_mode_rejected():
    with pytest.raises(ScheduleError):
        p_sample_step(zero_model(), np.zeros((1, 1, 2, 2)), 2, RngState(0), SCHED4, "bogus")
    with pytest.raises(ScheduleError):
        DiffusionConfig(variance_mode="nope")


# -- sample_loop ------------------------------------------------------------------


def test_sample_loop_deterministic():
    model = zero_model()
    a = sample_loop(model, (2, 1, 4, 4), RngState(33), SCHED4)
    b = sample_loop(model, (2, 1, 4, 4), RngState(33), SCHED4)
    assert np.array_equal(a, b)


def test_sample_loop_single_step_closed_form():
    s = from_betas(np.array([0.2]))
    model = zero_model()
    rng = RngState(44)
    out = sample_loop(model, (1, 1, 2, 2), rng.clone(), s)
    x1 = rng.clone().normal((1, 1, 2, 2), dtype=np.float32)
    expected = (np.clip(x1 / np.sqrt(s.alpha[0]), -1, 1) + 1) / 2
    assert np.allclose(out, expected, atol=1e-6)


def test_sample_loop_untrained_model_in_range():
    def fn(x, t):
        r = RngState(int(t[0])).normal(x.shape, dtype=x.dtype)
        return 0.1 * r

    out = sample_loop(FnModel(fn), (3, 1, 4, 4), RngState(7), make_linear_schedule(20, 1e-3, 0.05))
    assert np.isfinite(out).all()
    assert out.min() >= 0.0 and out.max() <= 1.0


# -- simple_loss ------------------------------------------------------------------


def test_simple_loss_zero_for_oracle_model():
    sched = make_linear_schedule(50, 1e-3, 0.05)
    x0 = RngState(3).normal((4, 1, 4, 4), dtype=np.float32)
    loss = simple_loss(exact_eps_model(x0, sched), x0, RngState(10), sched)
    assert loss.item() == pytest.approx(0.0, abs=1e-8)


def test_simple_loss_unit_for_zero_model():
    sched = make_linear_schedule(50, 1e-3, 0.05)
    x0 = np.zeros((40, 1, 16, 16), dtype=np.float32)  # 10240 elements
    loss = simple_loss(zero_model(), x0, RngState(11), sched)
    assert 0.9 < loss.item() < 1.1


def test_simple_loss_is_differentiable():
    from specgen.numerics import gradcheck

    sched = make_linear_schedule(10, 1e-2, 0.1)
    rng = RngState(12)
    w = Tensor(rng.normal((2, 1, 3, 3)) * 0.3, requires_grad=True)
    b = Tensor(rng.normal((1, 1, 1, 1)) * 0.1, requires_grad=True)
    x0 = rng.normal((2, 1, 4, 4))

    class TinyModel:
        params = {"w": w, "b": b}

        def __call__(self, x, t):
            from specgen.numerics import tensor as T

            h = T.conv2d(x, w, stride=1, padding=1)
            return T.add(T.mean_(h, axis=1, keepdims=True), b)

    def fn():
        return simple_loss(TinyModel(), x0, RngState(13), sched)

    report = gradcheck(fn, {"w": w, "b": b}, tolerance=1e-5)
    assert report.passed, report.summary()


# -- vlb ---------------------------------------------------------------------------


def exact_posterior_model(x0, sched):
    """Emits the eps that makes mu_theta equal the true posterior mean."""

    def fn(x_t, t_vec):
        out = np.zeros_like(x_t)
        for i, t in enumerate(t_vec):
            t = int(t)
            ab = sched.alpha_bar[t - 1]
            if t == 1:
                q_mean = np.asarray(x0[i], dtype=x_t.dtype)
            else:
                q_mean, _ = q_posterior(x0[i], x_t[i], t, sched)
            alpha = sched.alpha[t - 1]
            beta = sched.beta[t - 1]
            out[i] = (x_t[i] - math.sqrt(alpha) * q_mean) * math.sqrt(1.0 - ab) / beta
        return out

    return FnModel(fn)


def test_vlb_kl_terms_zero_for_exact_posterior_oracle():
    x0 = np.clip(RngState(21).normal((2, 1, 4, 4)), -1, 1)
    terms = vlb_terms(exact_posterior_model(x0, SCHED4), x0, RngState(22), SCHED4)
    assert terms.shape == (5,)
    # indices 1..T-1 are the model KL terms
    assert np.all(np.abs(terms[1 : SCHED4.T]) < 1e-10)


def test_vlb_prior_term_vanishes_when_alpha_bar_small():
    s = make_linear_schedule(1000, 1e-4, 0.02)
    x0 = np.full((1, 1, 2, 2), 0.5)
    ab = s.alpha_bar[-1]
    prior = gaussian_kl(math.sqrt(ab) * 0.5, 1 - ab, 0.0, 1.0).item()
    assert prior < 1e-4


def test_vlb_constant_offset_oracle_closed_form():
    # mean offset of 1 with matched variances: each KL term is 0.5 / beta~_t
    x0 = np.zeros((1, 1, 2, 2))
    sched = SCHED4

    def fn(x_t, t_vec):
        out = np.zeros_like(x_t)
        for i, t in enumerate(t_vec):
            t = int(t)
            ab = sched.alpha_bar[t - 1]
            if t == 1:
                q_mean = x0[i]
            else:
                q_mean, _ = q_posterior(x0[i], x_t[i], t, sched)
            target = q_mean + 1.0
            out[i] = (x_t[i] - math.sqrt(sched.alpha[t - 1]) * target) * math.sqrt(1 - ab) / sched.beta[t - 1]
        return out

    terms = vlb_terms(FnModel(fn), x0, RngState(30), sched)
    for t in range(2, sched.T + 1):
        expected = 0.5 / sched.posterior_var[t - 1]
        assert terms[t - 1] == pytest.approx(expected, rel=1e-9), f"t={t}"
