import numpy as np
import pytest

from specgen.diffusion import EmaState, ema_update, init_ema
from specgen.numerics import RngState, Tensor


def test_decay_one_keeps_shadow():
    ema = init_ema({"w": np.zeros(3)}, decay=1.0)
    ema_update(ema, {"w": np.full(3, 9.0)})
    assert np.allclose(ema.shadow["w"], 0.0)


def test_single_step_value():
    ema = init_ema({"w": np.zeros(1)}, decay=0.999)
    ema_update(ema, {"w": np.ones(1)})
    assert ema.shadow["w"][0] == pytest.approx(0.001, abs=1e-15)


def test_two_steps_geometric():
    ema = init_ema({"w": np.ones(1)}, decay=0.9)
    ema_update(ema, {"w": np.zeros(1)})
    ema_update(ema, {"w": np.zeros(1)})
    assert ema.shadow["w"][0] == pytest.approx(0.81, abs=1e-15)


def test_shape_mismatch_rejected():
    ema = init_ema({"w": np.zeros(3)}, decay=0.9)
    with pytest.raises(ValueError):
        ema_update(ema, {"w": np.zeros(4)})
    with pytest.raises(ValueError):
        ema_update(ema, {"v": np.zeros(3)})


def test_decay_out_of_range_rejected():
    with pytest.raises(ValueError):
        EmaState(decay=0.0, shadow={})
    with pytest.raises(ValueError):
        EmaState(decay=1.5, shadow={})


def test_convergence_bound_to_constant_weights():
    rng = RngState(9)
    w = {"w": Tensor(rng.normal((4, 4)))}
    ema = init_ema({"w": np.zeros((4, 4))}, decay=0.95)
    initial_gap = np.linalg.norm(w["w"].data)
    for n in range(1, 60):
        ema_update(ema, w)
        gap = np.linalg.norm(ema.shadow["w"] - w["w"].data)
        assert gap <= 0.95 ** n * initial_gap + 1e-12


def test_accepts_tensor_weights():
    ema = init_ema({"w": Tensor(np.zeros(2))}, decay=0.5)
    ema_update(ema, {"w": Tensor(np.ones(2))})
    assert np.allclose(ema.shadow["w"], 0.5)
