"""Label-distribution machinery: Gaussian KDE over training labels, the
three training-time label-sampling strategies, and the density-quantile
region model with its k-NN classifier.

Region thresholds are quantiles of the density evaluated *at the training
samples*, so the 68/27/5 split is exact over the sample set (up to the
usual one-sample rounding at the quantile boundary).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

BANDWIDTH_FLOOR = 1e-3
DEFAULT_KNN = 20
REGION_FRACTIONS = (0.68, 0.27, 0.05)  # 1-sigma, 2-sigma, 3-sigma bands


class ConditioningError(Exception):
    pass


class RegionUnsampleable(ConditioningError):
    pass


class SamplingStrategy(str, Enum):
    UNIFORM_RANDOM = "uniform"
    DATASET_RESAMPLE = "dataset"
    KDE_SAMPLE = "kde"


@dataclass
class LabelKDE:
    """Gaussian product-kernel density over [M, d] training labels."""

    samples: np.ndarray
    bandwidth: np.ndarray  # per-dimension h_j > 0

    @property
    def d(self) -> int:
        return self.samples.shape[1]

    def to_json(self) -> dict:
        return {
            "samples": self.samples.tolist(),
            "bandwidth": self.bandwidth.tolist(),
            "kernel": "gaussian",
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LabelKDE":
        return cls(
            samples=np.asarray(obj["samples"], dtype=np.float64),
            bandwidth=np.asarray(obj["bandwidth"], dtype=np.float64),
        )


def fit_kde(labels: np.ndarray) -> LabelKDE:
    """Scott's-rule bandwidth per dimension with a small positive floor."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2:
        raise ConditioningError(f"labels must be [M, d], got shape {labels.shape}")
    m, d = labels.shape
    if m < 2:
        raise ConditioningError(f"need at least 2 labels to fit a KDE, got {m}")
    if not np.all(np.isfinite(labels)):
        raise ConditioningError("labels contain non-finite values")
    sigma = labels.std(axis=0, ddof=1)
    h = sigma * m ** (-1.0 / (d + 4))
    h = np.maximum(h, BANDWIDTH_FLOOR)
    return LabelKDE(samples=labels.copy(), bandwidth=h)


def kde_density(kde: LabelKDE, y: np.ndarray) -> float | np.ndarray:
    """(1/M) sum_i prod_j phi((y_j - s_ij)/h_j)/h_j with phi the standard normal pdf."""
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    q = np.atleast_2d(y)  # [Q, d]
    if not np.all(np.isfinite(q)):
        raise ConditioningError("query labels contain non-finite values")
    h = kde.bandwidth
    z = (q[:, None, :] - kde.samples[None, :, :]) / h  # [Q, M, d]
    log_k = -0.5 * (z * z).sum(axis=2) - np.log(h * math.sqrt(2 * math.pi)).sum()
    dens = np.exp(log_k).mean(axis=1)
    return float(dens[0]) if single else dens


def sample_label(
    strategy: SamplingStrategy,
    kde: LabelKDE | None,
    labels: np.ndarray | None,
    rng: np.random.Generator,
    d: int | None = None,
    clamp: bool = True,
) -> np.ndarray:
    """Draw one conditioning vector according to the configured strategy."""
    strategy = SamplingStrategy(strategy)
    if strategy is SamplingStrategy.UNIFORM_RANDOM:
        if d is None:
            d = kde.d if kde is not None else (labels.shape[1] if labels is not None else None)
        if d is None:
            raise ConditioningError("uniform sampling needs the label dimension")
        return rng.uniform(size=d)
    if strategy is SamplingStrategy.DATASET_RESAMPLE:
        if labels is None or len(labels) == 0:
            raise ConditioningError("dataset resampling needs training labels")
        return np.asarray(labels[rng.integers(len(labels))], dtype=np.float64).copy()
    if kde is None:
        raise ConditioningError("kde sampling needs a fitted KDE")
    base = kde.samples[rng.integers(len(kde.samples))]
    y = base + rng.normal(size=kde.d) * kde.bandwidth
    if clamp:
        y = np.clip(y, 0.0, 1.0)
    return y


@dataclass
class SigmaRegionModel:
    """Density thresholds plus per-sample region labels for k-NN lookup."""

    labels: np.ndarray      # [M, d] training labels
    densities: np.ndarray   # density at each training label
    regions: np.ndarray     # [M] values in {1, 2, 3}
    t1: float               # density at the 1-sigma/2-sigma boundary
    t2: float               # density at the 2-sigma/3-sigma boundary
    k: int = DEFAULT_KNN

    def region_counts(self) -> np.ndarray:
        return np.bincount(self.regions, minlength=4)[1:]

    def to_json(self) -> dict:
        return {
            "labels": self.labels.tolist(),
            "densities": self.densities.tolist(),
            "regions": self.regions.tolist(),
            "t1": self.t1,
            "t2": self.t2,
            "k": self.k,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SigmaRegionModel":
        return cls(
            labels=np.asarray(obj["labels"], dtype=np.float64),
            densities=np.asarray(obj["densities"], dtype=np.float64),
            regions=np.asarray(obj["regions"], dtype=np.int64),
            t1=float(obj["t1"]),
            t2=float(obj["t2"]),
            k=int(obj["k"]),
        )


def fit_regions(kde: LabelKDE, labels: np.ndarray, k: int = DEFAULT_KNN) -> SigmaRegionModel:
    """Split training samples 68/27/5 by density order statistics."""
    labels = np.asarray(labels, dtype=np.float64)
    m = len(labels)
    if m < k:
        raise ConditioningError(f"need at least k={k} labels, got {m}")
    dens = np.asarray(kde_density(kde, labels))
    order = np.sort(dens)
    t1 = order[int(math.floor((1.0 - REGION_FRACTIONS[0]) * m))]
    t2 = order[int(math.floor(REGION_FRACTIONS[2] * m))]
    regions = np.where(dens >= t1, 1, np.where(dens >= t2, 2, 3)).astype(np.int64)
    return SigmaRegionModel(
        labels=labels.copy(), densities=dens, regions=regions, t1=float(t1), t2=float(t2), k=k
    )


def classify_region(model: SigmaRegionModel, y: np.ndarray) -> int:
    """Majority vote of the k nearest training labels; ties go outward."""
    y = np.asarray(y, dtype=np.float64)
    d2 = ((model.labels - y) ** 2).sum(axis=1)
    k = min(model.k, len(d2))
    nearest = np.argpartition(d2, k - 1)[:k]
    votes = np.bincount(model.regions[nearest], minlength=4)[1:]
    best = votes.max()
    # argmax over regions tied at the top, taken from the outermost side
    return int(3 - np.argmax(votes[::-1] == best))


def sample_from_region(
    model: SigmaRegionModel,
    kde: LabelKDE,
    region: int,
    rng: np.random.Generator,
    max_attempts: int = 100_000,
    clamp: bool = True,
) -> np.ndarray:
    """Rejection-sample KDE draws until one classifies into ``region``."""
    if region not in (1, 2, 3):
        raise ConditioningError(f"region must be 1, 2 or 3, got {region}")
    for _ in range(max_attempts):
        y = sample_label(SamplingStrategy.KDE_SAMPLE, kde, None, rng, clamp=clamp)
        if classify_region(model, y) == region:
            return y
    raise RegionUnsampleable(f"no draw classified into region {region} after {max_attempts} attempts")


def save_region_model(path, model: SigmaRegionModel, kde: LabelKDE) -> None:
    Path(path).write_text(json.dumps({"kde": kde.to_json(), "regions": model.to_json()}))


def load_region_model(path) -> tuple[SigmaRegionModel, LabelKDE]:
    obj = json.loads(Path(path).read_text())
    return SigmaRegionModel.from_json(obj["regions"]), LabelKDE.from_json(obj["kde"])
