"""Gaussian mechanism: calibration, clamped noise injection, and review composition."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float = 1e-5
    sensitivity: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not self.sensitivity > 0:
            raise ValueError(f"sensitivity must be positive, got {self.sensitivity}")

    @property
    def sigma(self) -> float:
        return calibrate_sigma(self)


@dataclass(frozen=True)
class NoiseSpec:
    """Noise scale plus where it is injected (``"Input"`` or a layer name)."""

    sigma: float
    injection_point: str = "Input"

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")

    @classmethod
    def from_budget(cls, budget: PrivacyBudget | None, injection_point: str = "Input") -> "NoiseSpec":
        return cls(0.0 if budget is None else budget.sigma, injection_point)


def calibrate_sigma(budget: PrivacyBudget) -> float:
    """Noise scale ``sqrt(2 s^2 ln(1.25 / delta)) / epsilon`` of the classical Gaussian mechanism."""
    log_term = math.log(1.25 / budget.delta)
    if log_term <= 0:
        raise ValueError(f"delta={budget.delta} makes ln(1.25/delta) nonpositive")
    return math.sqrt(2.0 * budget.sensitivity ** 2 * log_term) / budget.epsilon


def clamp01(t: np.ndarray) -> np.ndarray:
    return np.clip(t, 0.0, 1.0)


def add_gaussian(t: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. ``N(0, sigma^2)`` noise elementwise.  ``sigma == 0`` returns ``t`` untouched."""
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if sigma == 0:
        return t
    return t + rng.normal(0.0, sigma, size=np.shape(t))


def compose_review_sigma(sigma_i: float, sigma_j: float) -> float:
    """Extra noise that turns ``N(sigma_i^2)`` into ``N(sigma_j^2)`` when added independently."""
    if sigma_i < 0:
        raise ValueError("sigma_i must be nonnegative")
    if sigma_j < sigma_i:
        raise ValueError(f"cannot review a weaker distribution: sigma_j={sigma_j} < sigma_i={sigma_i}")
    return math.sqrt(sigma_j ** 2 - sigma_i ** 2)
