"""The two reference baselines against the conditional model:

B1 draws several latents from an unconditioned generator and keeps the
cloud whose extents are closest to the target.  B2 scales any cloud
axis-wise onto the target extents, which zeroes the dimension error by
construction at the cost of realism.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ccpc.metrics import extents
from ccpc.models import TreeGcnGenerator


class DegenerateAxisError(Exception):
    pass


@dataclass
class B1Config:
    k: int = 10

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("B1 candidate count must be >= 1")


def b1_resample(gen_uncond: TreeGcnGenerator, y_target, k: int, rng: np.random.Generator) -> np.ndarray:
    """Best-of-k unconditioned draws by squared extent error; ties keep the first."""
    if k < 1:
        raise ValueError("k must be >= 1")
    y = np.asarray(y_target, dtype=np.float64)
    z = rng.normal(size=(k, gen_uncond.config.latent_dim)).astype(np.float32)
    clouds = gen_uncond.forward(z).data
    errs = np.array([((extents(c) - y) ** 2).sum() for c in clouds])
    return clouds[int(np.argmin(errs))]


def b2_scale(cloud, y_target) -> np.ndarray:
    """Axis-wise affine map onto the target extents, about the bbox midpoint."""
    pts = np.asarray(cloud, dtype=np.float64)
    y = np.asarray(y_target, dtype=np.float64)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    ext = hi - lo
    if np.any(ext <= 0):
        axes = np.nonzero(ext <= 0)[0].tolist()
        raise DegenerateAxisError(f"cloud has zero extent on axes {axes}")
    center = (lo + hi) / 2
    out = (pts - center) * (y / ext) + center
    return out.astype(np.asarray(cloud).dtype if np.asarray(cloud).dtype.kind == "f" else np.float32)
