import numpy as np
import pytest

from specgen.diffusion import ScheduleError, from_betas, make_linear_schedule


def test_linear_schedule_hand_values_T4():
    s = make_linear_schedule(4, 0.1, 0.4)
    assert np.allclose(s.beta, [0.1, 0.2, 0.3, 0.4])
    # cumulative product by hand: 0.9, 0.9*0.8, 0.9*0.8*0.7, 0.9*0.8*0.7*0.6
    assert np.allclose(s.alpha_bar, [0.9, 0.72, 0.504, 0.3024], atol=1e-12)


def test_single_step_schedule():
    s = make_linear_schedule(1, 0.05, 0.9)
    assert np.allclose(s.beta, [0.05])
    assert np.allclose(s.alpha_bar, [0.95])


def test_T1000_alpha_bar_matches_brute_force_product():
    s = make_linear_schedule(1000, 1e-4, 0.02)
    betas = np.linspace(1e-4, 0.02, 1000)
    prod = 1.0
    for b in betas:
        prod *= 1.0 - b
    assert abs(s.alpha_bar[-1] - prod) / prod < 1e-12
    assert 0.9 * 4.0e-5 < prod < 1.1 * 4.0e-5  # the expected magnitude


def test_schedule_invariants():
    s = make_linear_schedule(100, 1e-4, 0.02)
    assert np.all(s.beta > 0) and np.all(s.beta < 1)
    assert np.all(np.diff(s.beta) >= 0)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] < s.alpha_bar[0]
    # posterior variance never exceeds beta (fixed_small <= fixed_large)
    assert np.all(s.posterior_var[1:] <= s.beta[1:] + 1e-18)
    assert s.posterior_var[0] == 0.0
    assert np.isfinite(s.posterior_log_var_clipped).all()


def test_posterior_variance_hand_value():
    s = make_linear_schedule(4, 0.1, 0.4)
    # beta_2 * (1 - ab_1) / (1 - ab_2) = 0.2 * 0.1 / 0.28
    assert s.posterior_var[1] == pytest.approx(0.2 * (1 - 0.9) / (1 - 0.72), abs=1e-15)


def test_schedule_bounds_rejected():
    with pytest.raises(ScheduleError):
        make_linear_schedule(0, 0.1, 0.2)
    with pytest.raises(ScheduleError):
        make_linear_schedule(10, 0.0, 0.2)
    with pytest.raises(ScheduleError):
        make_linear_schedule(10, 0.3, 0.2)
    with pytest.raises(ScheduleError):
        make_linear_schedule(10, 0.1, 1.0)
    with pytest.raises(ScheduleError):
        from_betas(np.array([0.1, 1.5]))


def test_check_t_range():
    s = make_linear_schedule(10, 0.01, 0.02)
    with pytest.raises(ScheduleError):
        s.check_t(0)
    with pytest.raises(ScheduleError):
        s.check_t(11)
    assert s.alpha_bar_prev(1) == 1.0
    assert s.alpha_bar_prev(2) == s.alpha_bar[0]
