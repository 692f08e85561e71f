"""Synthetic counting scenes: SynDot, SynPoly, ColorShape, counterfactual pairs.

Every scene is a pure function of (canvas geometry, count, radius, seed). Object
placement draws a single permutation of the patch grid and accepts patches
greedily, so a scene with fewer objects is always a prefix of one with more
objects under the same seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

RNG_ALGORITHM = "numpy.PCG64"

# RGB fill colours; none is near-black or near-white.
PALETTE: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "blue": (40, 80, 220),
    "green": (40, 170, 60),
    "yellow": (235, 205, 30),
    "orange": (245, 140, 30),
    "purple": (140, 60, 190),
    "pink": (240, 120, 190),
    "cyan": (40, 200, 210),
    "brown": (140, 90, 45),
    "gray": (128, 128, 128),
}
COLORS = tuple(PALETTE)

POLY_SIDES = {"triangle": 3, "square": 4, "pentagon": 5, "hexagon": 6}
SHAPES = ("triangle", "square", "pentagon", "hexagon", "octagon", "circle", "star", "diamond")

KINDS = ("syndot", "synpoly", "colorshape")


class CapacityError(ValueError):
    """Requested object count does not fit on the canvas."""


@dataclass(frozen=True)
class CanvasSpec:
    canvas_px: int = 64
    patch_px: int = 8

    def __post_init__(self):
        if self.canvas_px <= 0 or self.patch_px <= 0:
            raise ValueError("canvas and patch sizes must be positive")
        if self.canvas_px % self.patch_px:
            raise ValueError(f"patch_px={self.patch_px} does not divide canvas_px={self.canvas_px}")

    @property
    def grid(self) -> int:
        return self.canvas_px // self.patch_px

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    def patch_center(self, index: int) -> tuple[float, float]:
        r, c = divmod(int(index), self.grid)
        half = self.patch_px / 2.0
        return (c * self.patch_px + half, r * self.patch_px + half)


FULL_RES_CANVAS = CanvasSpec(336, 28)


@dataclass
class RenderedScene:
    """An image plus exact object ground truth.

    ``pixels`` is (H, W) grayscale for SynDot and (H, W, 3) RGB otherwise, with
    values k/255. ``centers`` are continuous (x, y) pixel coordinates where the
    top-left pixel spans [0, 1) x [0, 1).
    """

    pixels: np.ndarray
    count: int
    centers: list[tuple[float, float]]
    attributes: list[dict[str, Any]]
    seed: int
    kind: str
    spec: CanvasSpec = field(default_factory=CanvasSpec)
    radius: float = 0.0

    def __post_init__(self):
        if not (self.count == len(self.centers) == len(self.attributes)):
            raise ValueError("count, centers and attributes disagree")

    def rgb(self) -> np.ndarray:
        if self.pixels.ndim == 2:
            return np.repeat(self.pixels[:, :, None], 3, axis=2)
        return self.pixels

    def object_patches(self) -> list[set[int]]:
        """Patch indices overlapped by each object's rendered pixels."""
        return [set(np.flatnonzero(m)) for m in object_patch_masks(self)]


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64([int(seed), stream]))


def _pixel_grid(n: int) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(n) + 0.5
    return np.meshgrid(c, c)  # xs, ys


def _place(spec: CanvasSpec, count: int, radius: float, seed: int) -> list[int]:
    """Greedy non-overlapping placement on patch centres, prefix-stable in ``count``."""
    if count < 0:
        raise ValueError("count must be non-negative")
    if count > spec.n_patches:
        raise CapacityError(f"count {count} exceeds grid capacity {spec.n_patches}")
    order = _rng(seed, 0).permutation(spec.n_patches)
    # objects may not touch: centres further apart than the two radii plus a pixel
    min_dist = 2.0 * radius + 1.0
    chosen: list[int] = []
    pts: list[tuple[float, float]] = []
    for idx in order:
        if len(chosen) == count:
            break
        x, y = spec.patch_center(idx)
        if all((x - a) ** 2 + (y - b) ** 2 >= min_dist**2 for a, b in pts):
            chosen.append(int(idx))
            pts.append((x, y))
    if len(chosen) < count:
        raise CapacityError(f"only {len(chosen)} objects of radius {radius} fit, {count} requested")
    return chosen


def shape_vertices(shape: str, center, radius: float, rotation: float) -> np.ndarray:
    """Vertices (k, 2) of a named shape in pixel coordinates. Circles have none."""
    cx, cy = center
    if shape == "circle":
        return np.zeros((0, 2))
    if shape == "star":
        ang = rotation - np.pi / 2 + np.arange(10) * np.pi / 5
        rad = np.where(np.arange(10) % 2 == 0, radius, 0.45 * radius)
    elif shape == "diamond":
        ang = rotation + np.array([-np.pi / 2, 0.0, np.pi / 2, np.pi])
        rad = radius * np.array([1.0, 0.6, 1.0, 0.6])
    else:
        n = POLY_SIDES.get(shape, 8 if shape == "octagon" else None)
        if n is None:
            raise ValueError(f"unknown shape {shape!r}")
        # squares sit axis-aligned at rotation 0; other polygons point up
        base = -np.pi / 2 if n != 4 else -np.pi / 4
        ang = rotation + base + np.arange(n) * 2 * np.pi / n
        rad = np.full(n, float(radius))
    return np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)], axis=1)


def _inside_polygon(xs: np.ndarray, ys: np.ndarray, verts: np.ndarray) -> np.ndarray:
    # even-odd crossing rule
    inside = np.zeros(xs.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        if y0 == y1:
            continue
        crosses = (y0 > ys) != (y1 > ys)
        xint = x0 + (ys - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (xs < xint)
    return inside


def shape_mask(n_px: int, shape: str, center, radius: float, rotation: float = 0.0) -> np.ndarray:
    xs, ys = _pixel_grid(n_px)
    if shape == "circle":
        return (xs - center[0]) ** 2 + (ys - center[1]) ** 2 <= radius**2
    return _inside_polygon(xs, ys, shape_vertices(shape, center, radius, rotation))


def _object_mask(scene: RenderedScene, k: int) -> np.ndarray:
    a = scene.attributes[k]
    return shape_mask(scene.spec.canvas_px, a["shape"], scene.centers[k], a["radius"], a.get("rotation", 0.0))


def object_patch_masks(scene: RenderedScene) -> np.ndarray:
    """(count, n_patches) boolean: does object k cover any pixel of patch p."""
    g, p = scene.spec.grid, scene.spec.patch_px
    out = np.zeros((scene.count, g * g), dtype=bool)
    for k in range(scene.count):
        m = _object_mask(scene, k).reshape(g, p, g, p).any(axis=(1, 3))
        out[k] = m.ravel()
    return out


def gen_syndot(spec: CanvasSpec, count: int, radius_px: float | None = None, seed: int = 0) -> RenderedScene:
    """White canvas with ``count`` black disks at distinct patch centres."""
    if radius_px is None:
        radius_px = default_radius(spec, "syndot")
    if radius_px <= 0:
        raise ValueError("radius must be positive")
    cells = _place(spec, count, radius_px, seed)
    img = np.full((spec.canvas_px, spec.canvas_px), 255, dtype=np.uint8)
    centers, attrs = [], []
    for idx in cells:
        c = spec.patch_center(idx)
        img[shape_mask(spec.canvas_px, "circle", c, radius_px)] = 0
        centers.append(c)
        attrs.append({"shape": "circle", "sides": "circle", "color": "black", "radius": float(radius_px), "rotation": 0.0})
    return RenderedScene(img / 255.0, count, centers, attrs, int(seed), "syndot", spec, float(radius_px))


def gen_synpoly(spec: CanvasSpec, count: int, radius_px: float | None = None, seed: int = 0) -> RenderedScene:
    """``count`` randomly rotated regular polygons (3-6 sides) in palette colours."""
    if radius_px is None:
        radius_px = default_radius(spec, "synpoly")
    if radius_px <= 0:
        raise ValueError("radius must be positive")
    cells = _place(spec, count, radius_px, seed)
    rng = _rng(seed, 1)
    img = np.full((spec.canvas_px, spec.canvas_px, 3), 255, dtype=np.uint8)
    centers, attrs = [], []
    names = list(POLY_SIDES)
    for idx in cells:
        # three draws per object keeps attributes prefix-stable across counts
        shape = names[int(rng.integers(len(names)))]
        color = COLORS[int(rng.integers(len(COLORS)))]
        rot = float(rng.uniform(0.0, 2 * np.pi))
        c = spec.patch_center(idx)
        img[shape_mask(spec.canvas_px, shape, c, radius_px, rot)] = PALETTE[color]
        centers.append(c)
        attrs.append({"shape": shape, "sides": POLY_SIDES[shape], "color": color, "radius": float(radius_px), "rotation": rot})
    return RenderedScene(img / 255.0, count, centers, attrs, int(seed), "synpoly", spec, float(radius_px))


def gen_colorshape(spec: CanvasSpec, seed: int = 0) -> tuple[RenderedScene, str]:
    """One filled shape at a random position; returns the scene and the question task.

    Radius spans 30-80 px at 336 px and scales with the canvas. Rotation is kept
    within +-15 degrees so squares and diamonds stay distinguishable.
    """
    rng = _rng(seed, 2)
    scale = spec.canvas_px / 336.0
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    color = COLORS[int(rng.integers(len(COLORS)))]
    radius = float(rng.uniform(30.0, 80.0) * scale)
    rot = float(rng.uniform(-np.pi / 12, np.pi / 12))
    cx = float(rng.uniform(radius, spec.canvas_px - radius))
    cy = float(rng.uniform(radius, spec.canvas_px - radius))
    task = "color" if rng.random() < 0.5 else "shape"
    img = np.full((spec.canvas_px, spec.canvas_px, 3), 255, dtype=np.uint8)
    img[shape_mask(spec.canvas_px, shape, (cx, cy), radius, rot)] = PALETTE[color]
    sides = POLY_SIDES.get(shape, "circle" if shape == "circle" else None)
    attrs = [{"shape": shape, "sides": sides, "color": color, "radius": radius, "rotation": rot}]
    scene = RenderedScene(img / 255.0, 1, [(cx, cy)], attrs, int(seed), "colorshape", spec, radius)
    return scene, task


def default_radius(spec: CanvasSpec, kind: str) -> float:
    """Reference radii (4 px dots, 8 px polygons at 28 px patches) rescaled to the patch size.

    Toy patches of 8 px get a 2 px dot and a 3 px polygon so shapes stay legible.
    """
    if spec.patch_px == 28:
        return 4.0 if kind == "syndot" else 8.0
    frac = 0.25 if kind == "syndot" else 0.375
    return max(1.0, round(frac * spec.patch_px, 1))


def generate(kind: str, spec: CanvasSpec, count: int, radius_px: float | None, seed: int) -> RenderedScene:
    if kind == "syndot":
        return gen_syndot(spec, count, radius_px, seed)
    if kind == "synpoly":
        return gen_synpoly(spec, count, radius_px, seed)
    if kind == "colorshape":
        return gen_colorshape(spec, seed)[0]
    raise ValueError(f"unknown scene kind {kind!r}")


@dataclass
class CounterfactualPair:
    clean: RenderedScene
    corrupted: RenderedScene
    shared_seed: int


def make_pair(spec: CanvasSpec, clean_count: int, corrupted_count: int, seed: int,
              kind: str = "syndot", radius_px: float | None = None) -> CounterfactualPair:
    """Two scenes sharing one placement stream; the smaller is a prefix of the larger."""
    if clean_count == corrupted_count:
        raise ValueError("a counterfactual pair needs different counts")
    clean = generate(kind, spec, clean_count, radius_px, seed)
    corrupted = generate(kind, spec, corrupted_count, radius_px, seed)
    return CounterfactualPair(clean, corrupted, int(seed))


def pair_corpus(spec: CanvasSpec, n_pairs: int, counts, seed: int = 0, kind: str = "syndot",
                radius_px: float | None = None) -> list[CounterfactualPair]:
    """``n_pairs`` pairs with distinct clean/corrupted counts drawn from ``counts``."""
    counts = list(counts)
    rng = _rng(seed, 3)
    pairs = []
    for i in range(n_pairs):
        a, b = rng.choice(counts, size=2, replace=False)
        pairs.append(make_pair(spec, int(a), int(b), seed * 100003 + i, kind, radius_px))
    return pairs


def focus_prior(scene: RenderedScene, spec: CanvasSpec | None = None, sigma: float = 1.0) -> np.ndarray:
    """Gaussian soft instance prior over patches (row-major), normalised to sum 1."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    spec = spec or scene.spec
    g = spec.grid
    if scene.count == 0:
        return np.full(g * g, 1.0 / (g * g))
    rows, cols = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    u = np.zeros((g, g))
    for x, y in scene.centers:
        pr, pc = y / spec.patch_px - 0.5, x / spec.patch_px - 0.5
        u += np.exp(-((rows - pr) ** 2 + (cols - pc) ** 2) / (2 * sigma**2))
    u = u.ravel()
    return u / u.sum()
