"""Synthetic multi-modal scene generator.

Scenes mix a textured background, two shape classes ("road" strips and
"building" rectangles) that share one pixel-value distribution in the
color modality but occupy disjoint value ranges in the height modality,
and a rare small-disc class. Buildings carry a checkerboard-signed noise
texture whose marginal distribution equals the road noise exactly, so
the pair is only separable in color through spatial structure. An
optional infrared modality separates the pair weakly and highlights the
rare class.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import (
    DatasetManifest,
    ModalitySpec,
    SceneRecord,
    save_manifest,
    write_tensor_file,
)

BACKGROUND, ROAD, BUILDING, RARE, BRUSH = 0, 1, 2, 3, 4

_COLOR_BASE = {
    BACKGROUND: (0.45, 0.50, 0.42),
    RARE: (0.66, 0.44, 0.28),
    BRUSH: (0.40, 0.55, 0.35),
}
_PAIR_GRAY = 0.5
_HEIGHT_RANGE = {
    BACKGROUND: (0.02, 0.10),
    ROAD: (0.15, 0.30),
    BUILDING: (0.60, 0.90),
    RARE: (0.32, 0.50),
    BRUSH: (0.08, 0.40),
}
_IR_BASE = {BACKGROUND: 0.35, ROAD: 0.45, BUILDING: 0.58, RARE: 0.88, BRUSH: 0.70}


@dataclass(frozen=True)
class SyntheticConfig:
    scene_count: int = 30
    size: int = 256
    class_count: int = 4
    rare_fraction: float = 0.015
    include_ir: bool = False
    train_scenes: int | None = None
    val_scenes: int | None = None
    color_noise: float = 0.08
    pair_noise: float = 0.08
    texture_fraction: float = 1.0
    pair_crossover: float = 0.0
    shadow_length: int = 5
    shadow_strength: float = 0.3
    ir_noise: float = 0.07
    road_width: tuple[float, float] = (0.055, 0.09)   # fraction of scene size
    building_side: tuple[float, float] = (0.09, 0.22)  # fraction of scene size
    rare_radius: tuple[float, float] = (6.0, 9.0)      # pixels
    availability: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.class_count < 4:
            raise ValueError("need at least 4 classes (background, pair, rare)")
        if self.size < 64 or self.size % 32:
            raise ValueError("scene size must be >= 64 and divisible by 32")
        if self.scene_count < 3:
            raise ValueError("need at least 3 scenes for train/val/test")
        if not 0.0 <= self.texture_fraction <= 1.0:
            raise ValueError("texture_fraction must be in [0, 1]")
        if not 0.0 <= self.pair_crossover <= 0.5:
            raise ValueError("pair_crossover must be in [0, 0.5]")

    def split_counts(self) -> tuple[int, int, int]:
        val = self.val_scenes if self.val_scenes is not None else max(1, self.scene_count // 10)
        if self.train_scenes is not None:
            train = self.train_scenes
        else:
            train = self.scene_count - val - max(2, self.scene_count // 5)
        test = self.scene_count - train - val
        if min(train, val, test) < 1:
            raise ValueError(f"invalid split (train={train}, val={val}, test={test})")
        return train, val, test


def _disc_mask(size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.ogrid[:size, :size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2


def _paint_labels(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    s = cfg.size
    labels = np.zeros((s, s), dtype=np.uint8)

    # strips are usually roads and rectangles usually buildings; a
    # crossover fraction swaps a shape's class (and with it the height the
    # renderer assigns), so shape alone cannot fully disambiguate the pair
    rw_lo = max(6, int(cfg.road_width[0] * s))
    rw_hi = max(rw_lo + 2, int(cfg.road_width[1] * s))
    for _ in range(int(rng.integers(2, 4))):
        width = int(rng.integers(rw_lo, rw_hi))
        pos = int(rng.integers(0, s - width))
        klass = BUILDING if rng.random() < cfg.pair_crossover else ROAD
        if rng.integers(0, 2):
            labels[pos:pos + width, :] = klass
        else:
            labels[:, pos:pos + width] = klass

    lo = max(8, int(cfg.building_side[0] * s))
    hi = max(lo + 4, int(cfg.building_side[1] * s))
    for _ in range(int(rng.integers(5, 9))):
        h = int(rng.integers(lo, hi))
        w = int(rng.integers(lo, hi))
        r = int(rng.integers(0, s - h))
        c = int(rng.integers(0, s - w))
        labels[r:r + h, c:c + w] = BUILDING if rng.random() >= cfg.pair_crossover else ROAD

    if cfg.class_count >= 5:
        for klass in range(BRUSH, cfg.class_count):
            for _ in range(int(rng.integers(2, 4))):
                ay = rng.uniform(0.05 * s, 0.12 * s)
                ax = rng.uniform(0.05 * s, 0.12 * s)
                cy, cx = rng.uniform(0, s, size=2)
                yy, xx = np.ogrid[:s, :s]
                blob = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0
                labels[blob] = klass

    if cfg.rare_fraction > 0:
        target = cfg.rare_fraction * s * s
        min_area = np.pi * cfg.rare_radius[0] ** 2
        if target < min_area:
            raise ValueError("infeasible config: rare-class target below one disc")
        if cfg.rare_fraction > 0.15:
            raise ValueError("infeasible config: rare-class fraction too large for small discs")
        attempts = 0
        while attempts < 400:
            painted = int((labels == RARE).sum())
            if painted >= target - min_area / 2:
                break
            radius = rng.uniform(*cfg.rare_radius)
            cy = rng.uniform(radius, s - radius)
            cx = rng.uniform(radius, s - radius)
            disc = _disc_mask(s, cy, cx, radius)
            # keep discs apart so erosion leaves each a surviving core
            if (labels[disc] == RARE).any():
                attempts += 1
                continue
            labels[disc] = RARE
            attempts += 1
    return labels


def _render_color(cfg: SyntheticConfig, labels: np.ndarray,
                  rng: np.random.Generator) -> np.ndarray:
    s = cfg.size
    color = np.empty((3, s, s), dtype=np.float64)
    field = gaussian_filter(rng.normal(size=(s, s)), sigma=s / 20.0)
    field = field / max(field.std(), 1e-9) * 0.05

    for klass, base in _COLOR_BASE.items():
        if klass >= cfg.class_count:
            continue
        mask = labels == klass
        for ch in range(3):
            color[ch][mask] = base[ch]
    for klass in range(BRUSH + 1, cfg.class_count):
        mask = labels == klass
        base = _COLOR_BASE[BRUSH]
        for ch in range(3):
            color[ch][mask] = base[ch] * (0.8 + 0.1 * klass)

    pair = (labels == ROAD) | (labels == BUILDING)
    color[:, pair] = _PAIR_GRAY

    noise = rng.normal(scale=cfg.color_noise, size=(3, s, s))
    # same-magnitude noise on the pair; buildings get it checker-signed so
    # the marginal distribution matches roads exactly but the spatial
    # pattern does not
    pair_noise = rng.normal(scale=cfg.pair_noise, size=(3, s, s))
    yy, xx = np.indices((s, s))
    checker = np.where((yy + xx) % 2 == 0, 1.0, -1.0)
    textured = (labels == BUILDING) & (rng.random(size=(s, s)) < cfg.texture_fraction)
    building_noise = np.where(textured, np.abs(pair_noise) * checker, pair_noise)
    noise[:, labels == ROAD] = pair_noise[:, labels == ROAD]
    noise[:, labels == BUILDING] = building_noise[:, labels == BUILDING]
    if cfg.class_count >= 5:
        brush_noise = rng.normal(scale=0.16, size=(3, s, s))
        brushy = labels >= BRUSH
        noise[:, brushy] = brush_noise[:, brushy]

    color += noise
    color[:, labels == BACKGROUND] += field[labels == BACKGROUND]

    # high shapes darken the background to their south-east: a dense color
    # correlate of height; pair-class pixels themselves stay untouched, so
    # the road/building marginals remain exactly equal
    if cfg.shadow_length > 0 and cfg.shadow_strength > 0:
        high = labels == BUILDING
        shadow = np.zeros_like(high)
        for d in range(1, cfg.shadow_length + 1):
            shadow[d:, d:] |= high[:-d, :-d]
        shadow &= labels == BACKGROUND
        color[:, shadow] *= 1.0 - cfg.shadow_strength
    return np.clip(color, 0.0, 1.0).astype(np.float32)


def _render_height(cfg: SyntheticConfig, labels: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    s = cfg.size
    height = np.zeros((1, s, s), dtype=np.float64)
    u = rng.random(size=(s, s))
    for klass in range(cfg.class_count):
        lo, hi = _HEIGHT_RANGE.get(min(klass, BRUSH), _HEIGHT_RANGE[BRUSH])
        mask = labels == klass
        height[0][mask] = lo + (hi - lo) * u[mask]
    return height.astype(np.float32)


def _render_ir(cfg: SyntheticConfig, labels: np.ndarray,
               rng: np.random.Generator) -> np.ndarray:
    s = cfg.size
    ir = np.zeros((1, s, s), dtype=np.float64)
    for klass in range(cfg.class_count):
        ir[0][labels == klass] = _IR_BASE.get(min(klass, BRUSH), _IR_BASE[BRUSH])
    ir += rng.normal(scale=cfg.ir_noise, size=(1, s, s))
    return np.clip(ir, 0.0, 1.0).astype(np.float32)


def generate_scene(cfg: SyntheticConfig, rng: np.random.Generator):
    labels = _paint_labels(cfg, rng)
    rasters = {"color": _render_color(cfg, labels, rng),
               "height": _render_height(cfg, labels, rng)}
    if cfg.include_ir:
        rasters["ir"] = _render_ir(cfg, labels, rng)
    return rasters, labels


def class_names(cfg: SyntheticConfig) -> list[str]:
    names = ["ground", "road", "building", "marker"]
    names += [f"brush{i}" if i else "brush" for i in range(cfg.class_count - 4)]
    return names[:cfg.class_count]


def generate_synthetic(seed: int, cfg: SyntheticConfig, out_dir) -> DatasetManifest:
    """Materialize the dataset under out_dir and return its manifest."""
    from pathlib import Path

    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    train_n, val_n, test_n = cfg.split_counts()

    modalities = [ModalitySpec("color", 3), ModalitySpec("height", 1)]
    if cfg.include_ir:
        modalities.append(ModalitySpec("ir", 1))

    splits: dict[str, list[SceneRecord]] = {"train": [], "val": [], "test": []}
    avail_rng = np.random.default_rng([seed, 7])
    optional = [m.name for m in modalities[1:]]
    test_available = {}
    for mod in optional:
        frac = cfg.availability.get(mod, 1.0)
        k = int(round(frac * test_n))
        chosen = avail_rng.permutation(test_n)[:k]
        test_available[mod] = set(int(i) for i in chosen)

    for idx in range(cfg.scene_count):
        rng = np.random.default_rng([seed, 101, idx])
        rasters, labels = generate_scene(cfg, rng)
        scene_id = f"scene_{idx:03d}"
        scene_dir = out / "scenes" / scene_id
        scene_dir.mkdir(parents=True, exist_ok=True)
        for name, arr in rasters.items():
            write_tensor_file(scene_dir / f"{name}.mtns", arr)
        write_tensor_file(scene_dir / "labels.mtns", labels)

        if idx < train_n:
            split, avail = "train", {m: True for m in optional}
        elif idx < train_n + val_n:
            split, avail = "val", {m: True for m in optional}
        else:
            t = idx - train_n - val_n
            avail = {m: t in test_available[m] for m in optional}
            split = "test"
        splits[split].append(SceneRecord(scene_id, avail))

    manifest = DatasetManifest(
        root=out,
        class_count=cfg.class_count,
        class_names=class_names(cfg),
        modalities=modalities,
        splits=splits,
    )
    save_manifest(manifest)
    return manifest
