"""Procedural multi-task scenes: segmentation, depth, normals and boundaries.

Every shape is a tilted plane patch, so a pixel's class, depth and normal all
come from the same primitive. Shape classes sit in different depth bands,
which makes the tasks informative about one another.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageio import to_u8, write_pgm, write_ppm

BACKGROUND, CIRCLE, RECTANGLE, TRIANGLE = 0, 1, 2, 3
CLASS_NAMES = ("background", "circle", "rectangle", "triangle")
NUM_CLASSES = 4

# per-class depth band of the plane centre (background is a frontal plane)
DEPTH_BANDS = {CIRCLE: (1.5, 3.0), RECTANGLE: (3.0, 4.8), TRIANGLE: (4.8, 6.6)}
BACKGROUND_DEPTH = 7.5
BASE_COLORS = {
    BACKGROUND: (0.55, 0.55, 0.55),
    CIRCLE: (0.85, 0.35, 0.30),
    RECTANGLE: (0.35, 0.75, 0.40),
    TRIANGLE: (0.35, 0.45, 0.85),
}
SPLIT_OFFSETS = {"train": 0, "val": 1 << 24, "test": 2 << 24}
# "class": every class has its own base colour, so colour alone reveals the class.
# "background": grey background, shapes get a random saturated hue; telling the
#     shape classes apart needs their geometry.
# "random": random albedo everywhere.
COLOR_MODES = ("class", "background", "random")


@dataclass(frozen=True)
class SceneSpec:
    height: int = 32
    width: int = 32
    min_shapes: int = 1
    max_shapes: int = 4
    depth_range: tuple[float, float] = (1.0, 8.0)
    max_tilt: float = 0.6          # largest depth gradient per normalised image unit
    color_jitter: float = 0.15
    color_mode: str = "background"   # see COLOR_MODES
    noise_sigma: float = 0.02
    light: tuple[float, float, float] = (0.35, -0.3, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ValueError("scenes need at least 2 x 2 pixels")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 0 <= min_shapes <= max_shapes")
        if self.color_mode not in COLOR_MODES:
            raise ValueError(f"unknown colour mode {self.color_mode!r}")


@dataclass
class Sample:
    image: np.ndarray      # 3 x H x W float32 in [0, 1]
    semseg: np.ndarray     # H x W int64
    depth: np.ndarray      # H x W float32
    normals: np.ndarray    # 3 x H x W float32, unit
    boundary: np.ndarray   # H x W uint8 in {0, 1}


def boundary_from_labels(labels: np.ndarray) -> np.ndarray:
    """1 where any in-frame 8-neighbour carries a different label."""
    h, w = labels.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            ys = slice(max(dy, 0), h + min(dy, 0))
            yd = slice(max(-dy, 0), h + min(-dy, 0))
            xs = slice(max(dx, 0), w + min(dx, 0))
            xd = slice(max(-dx, 0), w + min(-dx, 0))
            out[yd, xd] |= (labels[yd, xd] != labels[ys, xs]).astype(np.uint8)
    return out


def _shape_mask(kind: int, xx: np.ndarray, yy: np.ndarray, cx: float, cy: float, size: float,
                rng: np.random.Generator) -> np.ndarray:
    if kind == CIRCLE:
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= size ** 2
    if kind == RECTANGLE:
        ax, ay = size * rng.uniform(0.6, 1.0), size * rng.uniform(0.6, 1.0)
        return (np.abs(xx - cx) <= ax) & (np.abs(yy - cy) <= ay)
    theta = rng.uniform(0, 2 * np.pi)
    verts = [(cx + size * 1.2 * np.cos(theta + k * 2 * np.pi / 3),
              cy + size * 1.2 * np.sin(theta + k * 2 * np.pi / 3)) for k in range(3)]
    signs = []
    for (x0, y0), (x1, y1) in zip(verts, verts[1:] + verts[:1]):
        signs.append((x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0)
    return signs[0] & signs[1] & signs[2]


def _albedo(spec: SceneSpec, kind: int, rng: np.random.Generator) -> np.ndarray:
    if spec.color_mode == "class" or (spec.color_mode == "background" and kind == BACKGROUND):
        base = np.array(BASE_COLORS[kind])
        return np.clip(base + rng.uniform(-spec.color_jitter, spec.color_jitter, 3), 0, 1)
    if spec.color_mode == "background":
        hue, sat, val = rng.uniform(0, 1), rng.uniform(0.55, 1.0), rng.uniform(0.6, 0.95)
        return np.array(colorsys.hsv_to_rgb(hue, sat, val))
    return rng.uniform(0.15, 0.95, 3)


def generate_sample(spec: SceneSpec, index: int, split: str = "train", n_shapes: int | None = None) -> Sample:
    """Deterministic scene for (spec.seed, split, index)."""
    if split not in SPLIT_OFFSETS:
        raise ValueError(f"unknown split {split!r}")
    rng = np.random.default_rng([spec.seed, SPLIT_OFFSETS[split] + index])
    h, w = spec.height, spec.width
    ys = (np.arange(h) + 0.5) / h * 2 - 1
    xs = (np.arange(w) + 0.5) / w * 2 - 1
    yy, xx = np.meshgrid(ys, xs, indexing="ij")

    semseg = np.zeros((h, w), dtype=np.int64)
    depth = np.full((h, w), BACKGROUND_DEPTH, dtype=np.float64)
    normals = np.zeros((3, h, w))
    normals[2] = 1.0
    albedo = np.empty((3, h, w))
    bg = _albedo(spec, BACKGROUND, rng)
    albedo[:] = bg[:, None, None]

    count = int(rng.integers(spec.min_shapes, spec.max_shapes + 1)) if n_shapes is None else n_shapes
    shapes = []
    for _ in range(count):
        kind = int(rng.integers(1, NUM_CLASSES))
        z0 = rng.uniform(*DEPTH_BANDS[kind])
        size = 0.22 + 0.8 / z0 + rng.uniform(0.0, 0.08)      # nearer shapes look larger
        cx, cy = rng.uniform(-0.8, 0.8, 2)
        gx, gy = rng.uniform(-spec.max_tilt, spec.max_tilt, 2)
        # every mask point lies within 2*size (L1) of the centre; keep the plane inside the depth range
        room = min(z0 - spec.depth_range[0], spec.depth_range[1] - z0) - 0.05
        cap = room / (2.0 * size)
        if abs(gx) + abs(gy) > cap:
            gx, gy = np.array([gx, gy]) * cap / (abs(gx) + abs(gy))
        color = _albedo(spec, kind, rng)
        mask_rng = np.random.default_rng(rng.integers(1 << 62))
        shapes.append((z0, kind, cx, cy, size, gx, gy, color, mask_rng))

    for z0, kind, cx, cy, size, gx, gy, color, mask_rng in sorted(shapes, key=lambda s: -s[0]):
        mask = _shape_mask(kind, xx, yy, cx, cy, size, mask_rng)
        plane = z0 + gx * (xx - cx) + gy * (yy - cy)
        n = np.array([-gx, -gy, 1.0]) / np.sqrt(gx * gx + gy * gy + 1.0)
        semseg[mask] = kind
        depth[mask] = plane[mask]
        normals[:, mask] = n[:, None]
        albedo[:, mask] = color[:, None]

    lo, hi = spec.depth_range
    depth = np.clip(depth, lo, hi)
    light = np.asarray(spec.light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    shading = 0.35 + 0.65 * np.clip(np.einsum("c,chw->hw", light, normals), 0.0, None)
    image = albedo * shading[None] + rng.normal(0.0, spec.noise_sigma, size=(3, h, w))
    return Sample(
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        semseg=semseg,
        depth=depth.astype(np.float32),
        normals=normals.astype(np.float32),
        boundary=boundary_from_labels(semseg),
    )


def dataset(spec: SceneSpec, count: int, split: str = "train") -> list[Sample]:
    return [generate_sample(spec, i, split) for i in range(count)]


def split_index_set(spec: SceneSpec, count: int, split: str) -> set[tuple[int, int]]:
    """The (seed, stream index) pairs a split consumes."""
    return {(spec.seed, SPLIT_OFFSETS[split] + i) for i in range(count)}


def stack_samples(samples: list[Sample]) -> dict[str, np.ndarray]:
    """Batch arrays keyed by task name plus ``image``."""
    if not samples:
        raise ValueError("cannot batch zero samples")
    return {
        "image": np.stack([s.image for s in samples]),
        "semseg": np.stack([s.semseg for s in samples]),
        "depth": np.stack([s.depth for s in samples])[:, None],
        "normals": np.stack([s.normals for s in samples]),
        "boundary": np.stack([s.boundary for s in samples])[:, None].astype(np.float32),
    }


def export_sample_images(sample: Sample, out_dir: str | Path, prefix: str = "sample",
                         depth_range: tuple[float, float] = (1.0, 8.0)) -> list[Path]:
    """Write one PPM (the image) and four PGMs (one per label map).

    Scalings: semseg class c -> c * 85; depth d_min -> 0 and d_max -> 255
    linearly; normals map [-1, 1] -> [0, 255] per component with the x, y and z
    panels tiled left to right; boundary {0, 1} -> {0, 255}.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = depth_range
    img = to_u8(np.transpose(sample.image, (1, 2, 0)))
    seg = (sample.semseg * (255 // (NUM_CLASSES - 1))).astype(np.uint8)
    dep = to_u8((sample.depth.astype(np.float64) - lo) / (hi - lo))
    nrm = to_u8((np.concatenate(list(sample.normals), axis=1).astype(np.float64) + 1.0) / 2.0)
    bnd = (sample.boundary * 255).astype(np.uint8)
    return [
        write_ppm(out / f"{prefix}_image.ppm", img),
        write_pgm(out / f"{prefix}_semseg.pgm", seg),
        write_pgm(out / f"{prefix}_depth.pgm", dep),
        write_pgm(out / f"{prefix}_normals.pgm", nrm),
        write_pgm(out / f"{prefix}_boundary.pgm", bnd),
    ]
