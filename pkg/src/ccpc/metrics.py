"""Evaluation metrics: dimension MSE, Chamfer and Earth Mover's distances,
MMD, coverage, voxel JSD, Fréchet point distance, and the FPD*MSE
checkpoint-selection score.

All metrics are pure numpy and tape-free.  The feature extractor behind
the Fréchet distance is a fixed seeded random-weight PointNet: absolute
values are not comparable across extractors, only orderings and the
zero/identity cases are meaningful at this scale.
"""

from __future__ import annotations

import csv
import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

JSD_GRID = 28
DEFAULT_FEATURE_DIM = 128


class MetricError(Exception):
    pass


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CCPC_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# conditioning adherence

def extents(points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return pts.max(axis=0) - pts.min(axis=0)


def dimension_mse(clouds_gen, y_cond) -> float:
    """100 * mean over samples and axes of (extent - target)^2."""
    if len(clouds_gen) == 0:
        raise MetricError("dimension_mse needs at least one cloud")
    y = np.asarray(y_cond, dtype=np.float64)
    if len(clouds_gen) != len(y):
        raise MetricError(f"{len(clouds_gen)} clouds vs {len(y)} targets")
    ext = np.stack([extents(c) for c in clouds_gen])
    return float(100.0 * np.mean((ext - y) ** 2))


# ---------------------------------------------------------------------------
# pairwise cloud distances

def _cross_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # direct differences: exact zeros for coincident points, unlike the
    # |a|^2+|b|^2-2ab expansion which leaves cancellation residue
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def chamfer(a, b) -> float:
    """Symmetric mean of squared nearest-neighbor distances."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise MetricError("chamfer needs nonempty clouds")
    d = _cross_sqdist(a, b)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def emd(a, b) -> float:
    """Exact earth mover's distance: optimal 1-1 matching of equal-size clouds."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) != len(b):
        raise MetricError(f"emd needs equal sizes, got {len(a)} and {len(b)}")
    if len(a) == 0:
        raise MetricError("emd needs nonempty clouds")
    cost = np.sqrt(_cross_sqdist(a, b))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def _pairwise_cloud_dists(gen_set, ref_set, dist: str) -> np.ndarray:
    if dist == "cd":
        fn = chamfer
    elif dist == "emd":
        fn = emd
    else:
        raise MetricError(f"unknown distance {dist!r}")
    gen_set = [np.asarray(c, dtype=np.float64) for c in gen_set]
    ref_set = [np.asarray(c, dtype=np.float64) for c in ref_set]
    out = np.zeros((len(gen_set), len(ref_set)))

    def fill_row(i):
        g = gen_set[i]
        for j, r in enumerate(ref_set):
            out[i, j] = fn(g, r)

    n_threads = _threads()
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as ex:
            list(ex.map(fill_row, range(len(gen_set))))
    else:
        for i in range(len(gen_set)):
            fill_row(i)
    return out


def mmd(gen_set, ref_set, dist: str = "cd") -> float:
    """For each reference cloud, distance to its nearest generated cloud."""
    if len(gen_set) == 0 or len(ref_set) == 0:
        raise MetricError("mmd needs nonempty sets")
    d = _pairwise_cloud_dists(gen_set, ref_set, dist)
    return float(d.min(axis=0).mean())


def coverage(gen_set, ref_set, dist: str = "cd") -> float:
    """Fraction of reference clouds that are the nearest reference of some generation."""
    if len(gen_set) == 0 or len(ref_set) == 0:
        raise MetricError("coverage needs nonempty sets")
    d = _pairwise_cloud_dists(gen_set, ref_set, dist)
    hit = np.unique(d.argmin(axis=1))
    return float(len(hit) / len(ref_set))


# ---------------------------------------------------------------------------
# occupancy JSD

def _occupancy(clouds, grid: int) -> np.ndarray:
    pts = np.concatenate([np.asarray(c, dtype=np.float64) for c in clouds], axis=0)
    idx = np.clip((pts * grid).astype(np.int64), 0, grid - 1)
    flat = (idx[:, 0] * grid + idx[:, 1]) * grid + idx[:, 2]
    counts = np.bincount(flat, minlength=grid**3).astype(np.float64)
    return counts / counts.sum()


def jsd(gen_set, ref_set, grid: int = JSD_GRID) -> float:
    """Jensen-Shannon divergence of pooled voxel occupancy over the unit cube."""
    if len(gen_set) == 0 or len(ref_set) == 0:
        raise MetricError("jsd needs nonempty sets")
    p = _occupancy(gen_set, grid)
    q = _occupancy(ref_set, grid)
    m = 0.5 * (p + q)

    def kl(x, y):
        mask = x > 0
        return float((x[mask] * np.log(x[mask] / y[mask])).sum())

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


# ---------------------------------------------------------------------------
# Fréchet point distance

class FeatureExtractor:
    """Fixed random-weight PointNet: per-point linears + leaky relu + max pool."""

    def __init__(self, seed: int = 0, feature_dim: int = DEFAULT_FEATURE_DIM,
                 widths: tuple = (64,)):
        self.seed = seed
        self.feature_dim = feature_dim
        rng = np.random.default_rng(seed)
        self.weights = []
        f_in = 3
        for w in list(widths) + [feature_dim]:
            a = math.sqrt(6.0 / (f_in + w))
            self.weights.append(rng.uniform(-a, a, size=(f_in, w)).astype(np.float64))
            f_in = w

    def __call__(self, clouds) -> np.ndarray:
        feats = np.zeros((len(clouds), self.feature_dim))
        for i, c in enumerate(clouds):
            h = np.asarray(c, dtype=np.float64)
            for w in self.weights:
                h = h @ w
                h = np.where(h > 0, h, 0.2 * h)
            feats[i] = h.max(axis=0)
        return feats


def _sqrt_trace_of_product(s1: np.ndarray, s2: np.ndarray) -> float:
    """Tr((S1 S2)^{1/2}) via eigendecomposition of S1^{1/2} S2 S1^{1/2}."""
    w1, v1 = np.linalg.eigh((s1 + s1.T) / 2)
    if np.any(w1 < -1e-10 * max(1.0, abs(w1).max())):
        warnings.warn("covariance has negative eigenvalues; clamping to zero")
    root1 = (v1 * np.sqrt(np.clip(w1, 0, None))) @ v1.T
    m = root1 @ ((s2 + s2.T) / 2) @ root1
    w, _ = np.linalg.eigh((m + m.T) / 2)
    if np.any(w < -1e-10 * max(1.0, abs(w).max())):
        warnings.warn("product matrix has negative eigenvalues; clamping to zero")
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def frechet_from_features(f1: np.ndarray, f2: np.ndarray) -> float:
    """||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}) from raw feature sets."""
    f1 = np.atleast_2d(np.asarray(f1, dtype=np.float64))
    f2 = np.atleast_2d(np.asarray(f2, dtype=np.float64))
    if len(f1) < 2 or len(f2) < 2:
        raise MetricError("need at least 2 samples per set to estimate covariance")
    mu1, mu2 = f1.mean(axis=0), f2.mean(axis=0)
    s1 = np.cov(f1, rowvar=False)
    s2 = np.cov(f2, rowvar=False)
    s1 = np.atleast_2d(s1)
    s2 = np.atleast_2d(s2)
    diff = float(((mu1 - mu2) ** 2).sum())
    value = diff + float(np.trace(s1) + np.trace(s2)) - 2.0 * _sqrt_trace_of_product(s1, s2)
    return max(value, 0.0)


def fpd(gen_set, ref_set, extractor: FeatureExtractor) -> float:
    if len(gen_set) < 2 or len(ref_set) < 2:
        raise MetricError("fpd needs at least 2 clouds per set")
    return frechet_from_features(extractor(gen_set), extractor(ref_set))


def selection_score(fpd_value: float, mse_percent: float) -> float:
    """Checkpoint-selection score: the product of FPD and MSE[%]."""
    if fpd_value < 0 or mse_percent < 0:
        raise MetricError("selection score needs nonnegative inputs")
    return fpd_value * mse_percent


# ---------------------------------------------------------------------------
# report

@dataclass
class MetricReport:
    mse_percent: float
    fpd: float
    mmd_cd: float
    mmd_emd: float
    cov_cd: float
    cov_emd: float
    jsd: float

    @property
    def score(self) -> float:
        return selection_score(self.fpd, self.mse_percent)

    CSV_FIELDS = ("mse_percent", "fpd", "mmd_cd", "mmd_emd", "cov_cd", "cov_emd", "jsd", "score")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.CSV_FIELDS[:-1]}
        d["score"] = self.score
        return d

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=self.CSV_FIELDS)
            writer.writeheader()
            writer.writerow(self.to_dict())


def evaluate_sets(gen_clouds, ref_clouds, y_cond=None, extractor: FeatureExtractor | None = None,
                  gen_for_mse=None) -> MetricReport:
    """Full metric sweep of a generated set against a reference set."""
    extractor = extractor or FeatureExtractor()
    mse_clouds = gen_clouds if gen_for_mse is None else gen_for_mse
    if y_cond is None:
        y = np.stack([extents(c) for c in mse_clouds])
    else:
        y = np.asarray(y_cond, dtype=np.float64)
    return MetricReport(
        mse_percent=dimension_mse(mse_clouds, y),
        fpd=fpd(gen_clouds, ref_clouds, extractor),
        mmd_cd=mmd(gen_clouds, ref_clouds, "cd"),
        mmd_emd=mmd(gen_clouds, ref_clouds, "emd"),
        cov_cd=coverage(gen_clouds, ref_clouds, "cd"),
        cov_emd=coverage(gen_clouds, ref_clouds, "emd"),
        jsd=jsd(gen_clouds, ref_clouds),
    )
