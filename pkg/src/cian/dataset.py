"""Deterministic synthetic multi-class shape dataset.

Each foreground class is a shape family (disc, triangle, ring) whose
appearance has two parts: a "primary" part in a saturated class hue and a
"secondary" part in a muted blend that is similar across classes. A
classifier trained on image labels keys on the primary part, so score-map
seeds cover objects only partially; recovering the secondary part needs the
dense-training machinery. Backgrounds are low-saturation with small jitter.
"""

from dataclasses import dataclass, field

import numpy as np

from . import pnm

__all__ = ["SynthImage", "generate_dataset", "save_dataset", "load_dataset",
           "PRIMARY_COLORS", "MUTE_COLOR", "SECONDARY_BLEND", "BG_COLOR"]

PRIMARY_COLORS = [
    (0.85, 0.10, 0.12),   # red
    (0.10, 0.22, 0.88),   # blue
    (0.92, 0.78, 0.08),   # yellow
    (0.12, 0.75, 0.20),   # green
    (0.80, 0.15, 0.80),   # magenta
    (0.10, 0.78, 0.80),   # cyan
]
MUTE_COLOR = np.array([0.46, 0.42, 0.50])
SECONDARY_BLEND = 0.35   # weight of the class hue inside the secondary part
BG_COLOR = np.array([0.55, 0.57, 0.54])
BG_JITTER = 0.015
BG_NOISE = 0.010
FG_JITTER = 0.03
FG_NOISE = 0.02


@dataclass
class SynthImage:
    pixels: np.ndarray            # (H,W,3) float32 in [0,1]
    gt_mask: np.ndarray           # (H,W) uint8 class ids, no IGNORE
    labels: set = field(default_factory=set)
    id: str = ""


def _secondary_color(class_id):
    p = np.array(PRIMARY_COLORS[(class_id - 1) % len(PRIMARY_COLORS)])
    return SECONDARY_BLEND * p + (1 - SECONDARY_BLEND) * MUTE_COLOR


def _primary_color(class_id):
    return np.array(PRIMARY_COLORS[(class_id - 1) % len(PRIMARY_COLORS)])


def _shape_masks(family, cx, cy, radius, size):
    """Boolean (inside, primary_part) masks for one shape instance."""
    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    if family == 0:      # disc: saturated core, muted rim
        inside = dist <= radius
        primary = dist <= 0.62 * radius
    elif family == 1:    # triangle: saturated top half, muted bottom
        top = cy - radius
        bot = cy + 0.85 * radius
        half = 0.95 * radius
        frac = np.clip((yy - top) / max(bot - top, 1e-6), 0, 1)
        inside = (yy >= top) & (yy <= bot) & (np.abs(xx - cx) <= frac * half)
        primary = inside & (yy < (top + bot) / 2)
    else:                # ring: saturated inner band, muted outer band
        inner = 0.52 * radius
        inside = (dist <= radius) & (dist >= inner)
        primary = inside & (dist <= (inner + radius) / 2)
    return inside, primary & inside


def generate_dataset(n_images, image_size, n_classes, rng_seed, split="train"):
    """Deterministic list of SynthImage; the val split consumes a disjoint
    RNG stream derived from the same seed."""
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    if image_size < 32:
        raise ValueError(f"image_size must be >= 32, got {image_size}")
    if split not in ("train", "val"):
        raise ValueError(f"unknown split {split!r}")
    split_code = 0 if split == "train" else 1
    images = []
    for idx in range(n_images):
        rng = np.random.default_rng(
            np.random.SeedSequence([int(rng_seed), split_code, idx]))
        images.append(_generate_one(rng, image_size, n_classes,
                                    f"{split}_{idx:04d}"))
    return images


def _generate_one(rng, size, n_classes, image_id):
    bg = BG_COLOR + rng.uniform(-BG_JITTER, BG_JITTER, 3)
    img = np.tile(bg, (size, size, 1))
    img += rng.normal(0.0, BG_NOISE, img.shape)
    gt = np.zeros((size, size), dtype=np.uint8)

    n_shapes = int(rng.integers(1, 4))
    placed = []  # (cx, cy, radius)
    labels = set()
    for _ in range(n_shapes):
        class_id = int(rng.integers(1, n_classes + 1))
        radius = rng.uniform(0.14, 0.20) * size
        for _attempt in range(40):
            cx = rng.uniform(radius + 2, size - radius - 2)
            cy = rng.uniform(radius + 2, size - radius - 2)
            if all(np.hypot(cx - px, cy - py) >= radius + pr + 2
                   for px, py, pr in placed):
                break
        else:
            continue  # no room left, place fewer shapes
        placed.append((cx, cy, radius))
        family = (class_id - 1) % 3
        inside, primary = _shape_masks(family, cx, cy, radius, size)
        jit = rng.uniform(-FG_JITTER, FG_JITTER, 3)
        pcol = np.clip(_primary_color(class_id) + jit, 0, 1)
        scol = np.clip(_secondary_color(class_id) + jit, 0, 1)
        img[primary] = pcol
        img[inside & ~primary] = scol
        img[inside] += rng.normal(0.0, FG_NOISE, (int(inside.sum()), 3))
        gt[inside] = class_id
        labels.add(class_id)

    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    # shrink tiny classes out rather than violating the 1% floor
    total = size * size
    for c in sorted(labels):
        if (gt == c).sum() < 0.01 * total:
            img[gt == c] = bg
            gt[gt == c] = 0
            labels.discard(c)
    if not labels:  # guarantee at least one foreground shape
        family_class = int(rng.integers(1, n_classes + 1))
        radius = 0.18 * size
        cx = cy = size / 2
        inside, primary = _shape_masks((family_class - 1) % 3, cx, cy,
                                       radius, size)
        img[primary] = _primary_color(family_class)
        img[inside & ~primary] = _secondary_color(family_class)
        gt[inside] = family_class
        labels = {family_class}
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return SynthImage(pixels=img, gt_mask=gt, labels=labels, id=image_id)


def save_dataset(images, out_dir):
    """<id>.ppm + <id>_gt.pgm per image plus a tab-separated manifest."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for im in images:
        pnm.write_ppm(out_dir / f"{im.id}.ppm", pnm.float_to_u8(im.pixels))
        pnm.write_pgm(out_dir / f"{im.id}_gt.pgm", im.gt_mask)
        lines.append(f"{im.id}\t{','.join(str(c) for c in sorted(im.labels))}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_dataset(data_dir):
    """Rebuild SynthImage records from a saved dataset directory."""
    manifest = (data_dir / "manifest.txt").read_text().splitlines()
    images = []
    for line in manifest:
        if not line.strip():
            continue
        image_id, label_str = line.split("\t")
        labels = {int(c) for c in label_str.split(",") if c}
        pixels = pnm.u8_to_float(pnm.read_ppm(data_dir / f"{image_id}.ppm"))
        gt = pnm.read_pgm(data_dir / f"{image_id}_gt.pgm")
        images.append(SynthImage(pixels=pixels, gt_mask=gt, labels=labels,
                                 id=image_id))
    return images
