"""Exponential moving average of model weights."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ..numerics import Tensor


@dataclass
class EmaState:
    decay: float
    shadow: dict

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"ema decay must be in (0, 1], got {self.decay}")


def _as_array(w) -> np.ndarray:
    return w.data if isinstance(w, Tensor) else np.asarray(w)


def init_ema(weights: Mapping[str, object], decay: float) -> EmaState:
    return EmaState(decay=decay, shadow={k: _as_array(w).copy() for k, w in weights.items()})


def ema_update(ema: EmaState, weights: Mapping[str, object]) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * weights, per parameter."""
    if set(ema.shadow) != set(weights):
        raise ValueError("ema update: parameter names do not match the shadow")
    for name, w in weights.items():
        arr = _as_array(w)
        sh = ema.shadow[name]
        if sh.shape != arr.shape:
            raise ValueError(
                f"ema update: shape mismatch for {name}: {sh.shape} vs {arr.shape}"
            )
        sh *= ema.decay
        sh += (1.0 - ema.decay) * arr
    return ema
