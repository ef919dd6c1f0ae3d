"""Monte-Carlo analysis of converter reference-level variation.

Every trial draws an independent resistor-ladder perturbation for each input
feature, re-quantizes the test inputs against the perturbed levels and runs
inference on the resulting codes.
"""
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd

from errors import ConfigurationError, ContractViolation
from tnn import ComponentAssignment, Dataset, Split, TnnModel, accuracy, nominal_thresholds

if TYPE_CHECKING:
    from complib import ComponentLibrary

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VariationConfig:
    sigma: float = 0.10
    trials: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigurationError(f"sigma must be >= 0, got {self.sigma}")
        if self.trials < 1:
            raise ConfigurationError(f"trials must be >= 1, got {self.trials}")


def perturb_thresholds(k: int, sigma: float, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Nominal levels i/2^k scaled by independent N(1, sigma^2) factors, re-sorted.

    With ``size`` given, returns ``size`` independent ladders as rows.
    """
    nominal = nominal_thresholds(k)
    shape = nominal.shape if size is None else (size, nominal.size)
    factors = rng.normal(1.0, sigma, size=shape) if sigma > 0 else np.ones(shape)
    return np.sort(nominal * factors, axis=-1)


def requantize(x: np.ndarray, ladders: np.ndarray) -> np.ndarray:
    """Codes of ``x`` (samples, features) against one sorted ladder per feature."""
    if ladders.shape[0] != x.shape[1]:
        raise ContractViolation(f"{ladders.shape[0]} ladders for {x.shape[1]} features")
    return (x[:, :, None] >= ladders[None, :, :]).sum(axis=2).astype(np.int64)


@dataclass
class VariationReport:
    nominal: float
    trials: np.ndarray
    sigma: float

    @property
    def mean(self) -> float:
        return float(self.trials.mean())

    @property
    def std(self) -> float:
        return float(self.trials.std())

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"trial": np.arange(len(self.trials)), "accuracy": self.trials})

    def summary(self) -> dict:
        return {
            "sigma": self.sigma,
            "trials": int(len(self.trials)),
            "nominal": self.nominal,
            "mean": self.mean,
            "std": self.std,
            "min": float(self.trials.min()),
            "max": float(self.trials.max()),
        }


def mc_accuracy(model: TnnModel, dataset: Dataset, cfg: VariationConfig,
                assignment: ComponentAssignment | None = None, library: "ComponentLibrary | None" = None,
                split: str = "test") -> VariationReport:
    idx = dataset.indices(split)
    if len(idx) == 0:
        raise ContractViolation(f"split '{split}' is empty")
    x, labels = dataset.x[idx], dataset.y[idx]
    nominal = accuracy(model, dataset.split(split, model.k), assignment, library)
    rng = np.random.default_rng(cfg.seed)
    results = np.empty(cfg.trials)
    for trial in range(cfg.trials):
        ladders = perturb_thresholds(model.k, cfg.sigma, rng, size=model.n_features)
        results[trial] = accuracy(model, Split(requantize(x, ladders), labels), assignment, library)
    report = VariationReport(nominal, results, cfg.sigma)
    logger.info("[Variation] sigma=%.2f over %d trial(s): nominal %.4f, mean %.4f, std %.4f",
                cfg.sigma, cfg.trials, nominal, report.mean, report.std)
    return report
