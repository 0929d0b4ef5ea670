"""Synthetic parametric shape families with exact continuous labels.

Each family is a union of axis-aligned box primitives whose surfaces are
sampled area-proportionally.  The stored label of a cloud is measured
from its own points, so conditioning targets are exact by construction.
Clouds live inside the unit cube and labels inside [0, 1]^d.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FAMILY_KINDS = ("box", "table", "lamp")
DATASET_MAGIC = b"CCPD"
DATASET_VERSION = 1

# part-id conventions per family (index 0 is the ratio base part)
FAMILY_PARTS = {
    "box": ("body",),
    "table": ("top", "legs"),
    "lamp": ("pole", "base", "shade"),
}


class DatasetFormatError(Exception):
    pass


class DegenerateLabelError(Exception):
    pass


@dataclass
class LabeledCloud:
    points: np.ndarray                 # [N, 3] float32
    y: np.ndarray                      # [d] conditioning label
    part_ids: np.ndarray | None = None  # [N] uint8
    family: str = "box"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.part_ids is not None:
            self.part_ids = np.asarray(self.part_ids, dtype=np.uint8)


@dataclass(frozen=True)
class ShapeFamily:
    """Parametric family; ``ranges`` are per-axis extent ranges within (0, 1]."""

    kind: str = "box"
    ranges: tuple = ((0.2, 0.95), (0.2, 0.95), (0.2, 0.95))
    leg_threshold: float = 0.5     # tables: 1 leg if x-extent below this, else 4
    extent_law: str = "longtail"   # "longtail" or "uniform"

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise ValueError(f"unknown shape family {self.kind!r}")
        for lo, hi in self.ranges:
            if not (0.0 < lo <= hi <= 1.0):
                raise ValueError(f"extent range ({lo}, {hi}) must sit inside (0, 1]")
        if self.extent_law not in ("uniform", "longtail"):
            raise ValueError(f"unknown extent law {self.extent_law!r}")

    @property
    def part_names(self) -> tuple:
        return FAMILY_PARTS[self.kind]

    def draw_extents(self, rng: np.random.Generator) -> np.ndarray:
        lo = np.array([r[0] for r in self.ranges])
        hi = np.array([r[1] for r in self.ranges])
        if self.extent_law == "uniform":
            u = rng.uniform(size=3)
        else:
            # one long-tailed overall size factor with mild per-axis aspect
            # jitter: sparse labels form a coherent tail instead of a thin
            # shell, which keeps the 3-sigma region reachable by k-NN
            s = rng.beta(1.3, 4.0)
            jit = np.clip(1.0 + 0.22 * rng.normal(size=3), 0.6, 1.4)
            u = np.clip(s * jit, 0.0, 1.0)
        return lo + (hi - lo) * u


# ---------------------------------------------------------------------------
# labels

def dimension_label(points: np.ndarray) -> np.ndarray:
    """Per-axis extent of the cloud: component-wise max minus min."""
    pts = np.asarray(points)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 2:
        raise ValueError(f"expected an [N>=2, 3] point array, got shape {pts.shape}")
    return (pts.max(axis=0).astype(np.float64) - pts.min(axis=0).astype(np.float64))


def part_ratio_label(cloud: LabeledCloud, n_parts: int | None = None) -> np.ndarray:
    """Point-count shares of the non-base parts: (n_part1, n_part2, ...) / n_total.

    The full simplex vector over all parts (base first) sums to one; only
    the non-base shares are exposed as the conditioning label.
    """
    if cloud.part_ids is None:
        raise DegenerateLabelError("cloud has no part ids")
    if n_parts is None:
        n_parts = len(FAMILY_PARTS.get(cloud.family, ())) or int(cloud.part_ids.max()) + 1
    counts = np.bincount(cloud.part_ids, minlength=n_parts).astype(np.float64)
    if counts[0] == 0:
        raise DegenerateLabelError("base part has no points")
    simplex = counts / counts.sum()
    return simplex[1:]


# ---------------------------------------------------------------------------
# surface sampling

def _box_faces(lo: np.ndarray, hi: np.ndarray) -> list:
    """Six (origin, edge_u, edge_v) rectangles of an axis-aligned box."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    d = hi - lo
    faces = []
    for axis in range(3):
        u, v = (axis + 1) % 3, (axis + 2) % 3
        eu = np.zeros(3)
        ev = np.zeros(3)
        eu[u] = d[u]
        ev[v] = d[v]
        low = lo.copy()
        high = lo.copy()
        high[axis] = hi[axis]
        faces.append((low, eu, ev))
        faces.append((high, eu, ev))
    return faces


def _primitives(family: ShapeFamily, extents: np.ndarray) -> list:
    """(lo, hi, part_id) boxes for one sampled shape, centered in the unit cube."""
    ex, ey, ez = extents
    c = np.array([0.5, 0.5, 0.5])
    lo = c - extents / 2
    hi = c + extents / 2
    if family.kind == "box":
        return [(lo, hi, 0)]

    if family.kind == "table":
        top_h = 0.15 * ez
        top_lo = np.array([lo[0], lo[1], hi[2] - top_h])
        prims = [(top_lo, hi.copy(), 0)]
        leg_w = 0.12 * min(ex, ey)
        if ex < family.leg_threshold:
            center = np.array([c[0], c[1]])
            legs = [center]
        else:
            inset = leg_w / 2
            legs = [
                np.array([lo[0] + inset, lo[1] + inset]),
                np.array([hi[0] - inset, lo[1] + inset]),
                np.array([lo[0] + inset, hi[1] - inset]),
                np.array([hi[0] - inset, hi[1] - inset]),
            ]
        for leg in legs:
            leg_lo = np.array([leg[0] - leg_w / 2, leg[1] - leg_w / 2, lo[2]])
            leg_hi = np.array([leg[0] + leg_w / 2, leg[1] + leg_w / 2, hi[2] - top_h])
            prims.append((leg_lo, leg_hi, 1))
        return prims

    # lamp: thin pole (part 0), base plate (part 1), shade on top (part 2)
    pole_w = 0.08 * min(ex, ey)
    base_h = 0.08 * ez
    shade_h = 0.3 * ez
    pole_lo = np.array([c[0] - pole_w / 2, c[1] - pole_w / 2, lo[2] + base_h])
    pole_hi = np.array([c[0] + pole_w / 2, c[1] + pole_w / 2, hi[2] - shade_h])
    base_lo = np.array([c[0] - ex / 2, c[1] - ey / 2, lo[2]])
    base_hi = np.array([c[0] + ex / 2, c[1] + ey / 2, lo[2] + base_h])
    shade_half = np.array([0.35 * ex, 0.35 * ey])
    shade_lo = np.array([c[0] - shade_half[0], c[1] - shade_half[1], hi[2] - shade_h])
    shade_hi = np.array([c[0] + shade_half[0], c[1] + shade_half[1], hi[2]])
    return [(pole_lo, pole_hi, 0), (base_lo, base_hi, 1), (shade_lo, shade_hi, 2)]


def sample_shape(family: ShapeFamily, rng: np.random.Generator, n_points: int = 256) -> LabeledCloud:
    """Sample ``n_points`` uniformly over the shape surface, label from the points."""
    extents = family.draw_extents(rng)
    prims = _primitives(family, extents)

    faces = []
    face_parts = []
    for lo, hi, part in prims:
        for f in _box_faces(lo, hi):
            faces.append(f)
            face_parts.append(part)
    areas = np.array([np.linalg.norm(eu) * np.linalg.norm(ev) for _, eu, ev in faces])
    probs = areas / areas.sum()
    counts = rng.multinomial(n_points, probs)

    pts = np.empty((n_points, 3), dtype=np.float64)
    parts = np.empty(n_points, dtype=np.uint8)
    pos = 0
    for (origin, eu, ev), part, k in zip(faces, face_parts, counts):
        if k == 0:
            continue
        uv = rng.uniform(size=(k, 2))
        pts[pos : pos + k] = origin + uv[:, :1] * eu + uv[:, 1:] * ev
        parts[pos : pos + k] = part
        pos += k
    pts32 = pts.astype(np.float32)
    return LabeledCloud(points=pts32, y=dimension_label(pts32), part_ids=parts, family=family.kind)


def generate_dataset(
    family: ShapeFamily,
    count: int,
    n_points: int,
    seed: int,
    label: str = "dims",
) -> list[LabeledCloud]:
    """Per-shape RNG streams derived from one root seed."""
    streams = np.random.SeedSequence(seed).spawn(count)
    clouds = []
    for ss in streams:
        c = sample_shape(family, np.random.default_rng(ss), n_points)
        if label == "part-ratio":
            c.y = part_ratio_label(c)
        clouds.append(c)
    return clouds


# ---------------------------------------------------------------------------
# dataset files: meta.jsonl index + raw binary blobs

def write_dataset(path, clouds: list[LabeledCloud]) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    bin_path = path / "points.bin"
    meta_path = path / "meta.jsonl"
    with open(bin_path, "wb") as fb, open(meta_path, "w") as fm:
        fb.write(DATASET_MAGIC)
        fb.write(struct.pack("<I", DATASET_VERSION))
        offset = 8
        for i, c in enumerate(clouds):
            blob = c.points.astype("<f4").tobytes()
            has_parts = c.part_ids is not None
            if has_parts:
                blob += c.part_ids.astype(np.uint8).tobytes()
            fb.write(blob)
            rec = {
                "id": i,
                "family": c.family,
                "n": int(c.points.shape[0]),
                "label": [float(v) for v in c.y],
                "part_counts": (
                    [int(v) for v in np.bincount(c.part_ids)] if has_parts else None
                ),
                "offset": offset,
                "nbytes": len(blob),
            }
            fm.write(json.dumps(rec) + "\n")
            offset += len(blob)


def read_dataset(path) -> list[LabeledCloud]:
    path = Path(path)
    bin_path = path / "points.bin"
    meta_path = path / "meta.jsonl"
    if not bin_path.exists() or not meta_path.exists():
        raise DatasetFormatError(f"{path} is not a dataset directory")
    blob = bin_path.read_bytes()
    if blob[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"{bin_path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{bin_path}: unsupported version {version}")

    clouds = []
    with open(meta_path) as fm:
        for line in fm:
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"{meta_path}: bad record: {e}") from e
            n = rec["n"]
            offset = rec["offset"]
            nbytes = rec["nbytes"]
            if offset + nbytes > len(blob):
                raise DatasetFormatError(f"{bin_path}: truncated record id={rec['id']}")
            pts = np.frombuffer(blob, dtype="<f4", count=n * 3, offset=offset).reshape(n, 3)
            part_ids = None
            if rec.get("part_counts") is not None:
                if nbytes != n * 12 + n:
                    raise DatasetFormatError(f"{bin_path}: record id={rec['id']} size mismatch")
                part_ids = np.frombuffer(blob, dtype=np.uint8, count=n, offset=offset + n * 12)
            clouds.append(
                LabeledCloud(
                    points=pts.copy(),
                    y=np.array(rec["label"], dtype=np.float64),
                    part_ids=None if part_ids is None else part_ids.copy(),
                    family=rec.get("family", "box"),
                )
            )
    return clouds


def dataset_labels(clouds: list[LabeledCloud]) -> np.ndarray:
    return np.stack([c.y for c in clouds]) if clouds else np.zeros((0, 3))


def write_ply(path, points: np.ndarray, part_ids: np.ndarray | None = None) -> None:
    """PLY-ASCII export; part membership goes out as a uchar property."""
    pts = np.asarray(points)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {pts.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if part_ids is not None:
        lines.append("property uchar part")
    lines.append("end_header")
    for i, p in enumerate(pts):
        row = f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}"
        if part_ids is not None:
            row += f" {int(part_ids[i])}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")
