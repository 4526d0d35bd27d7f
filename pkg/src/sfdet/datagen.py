"""Synthetic paired source/target detection data and YOLO-format I/O.

Scenes are disc/square/triangle shapes on a smooth textured background.
The target domain is the same scene distribution passed through
:func:`apply_shift` (fog blend, blur, colour gain, sensor noise).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

CLASS_NAMES = ("disc", "square", "triangle")
_EDGE_TOL = 1e-9


class ConfigError(ValueError):
    """Invalid generation or experiment configuration."""


class DatasetFormatError(ValueError):
    """Malformed dataset file; the message names file and line."""


@dataclass(frozen=True)
class LabeledBox:
    """Ground-truth (or hard pseudo-label) box in normalized centre format."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive size, got w={self.w}, h={self.h}")
        lo_x, hi_x = self.cx - self.w / 2, self.cx + self.w / 2
        lo_y, hi_y = self.cy - self.h / 2, self.cy + self.h / 2
        if lo_x < -_EDGE_TOL or lo_y < -_EDGE_TOL or hi_x > 1 + _EDGE_TOL or hi_y > 1 + _EDGE_TOL:
            raise ValueError(f"box ({self.cx}, {self.cy}, {self.w}, {self.h}) leaves the unit square")

    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


def boxes_to_array(boxes: Sequence[LabeledBox]) -> np.ndarray:
    """(k, 5) float64 array of ``class, cx, cy, w, h``."""
    if len(boxes) == 0:
        return np.zeros((0, 5))
    return np.array([[b.class_id, b.cx, b.cy, b.w, b.h] for b in boxes], dtype=np.float64)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    image_size: int = 64
    n_objects: int = 1
    classes: tuple[int, ...] = (0, 1, 2)

    def validate(self) -> None:
        if self.image_size < 32:
            raise ConfigError(f"image_size must be >= 32, got {self.image_size}")
        if not 1 <= self.n_objects <= 6:
            raise ConfigError(f"n_objects must be in [1, 6], got {self.n_objects}")
        if not self.classes or any(c not in range(len(CLASS_NAMES)) for c in self.classes):
            raise ConfigError(f"classes must be a non-empty subset of {list(range(len(CLASS_NAMES)))}")


@dataclass(frozen=True)
class ShiftSpec:
    fog_alpha: float = 0.0
    blur_sigma: float = 0.0
    color_gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise_std: float = 0.0
    severity_label: str = "none"

    def validate(self) -> None:
        if not 0.0 <= self.fog_alpha <= 1.0:
            raise ConfigError(f"fog_alpha must be in [0, 1], got {self.fog_alpha}")
        if self.blur_sigma < 0 or self.noise_std < 0:
            raise ConfigError("blur_sigma and noise_std must be >= 0")
        if len(self.color_gain) != 3 or min(self.color_gain) <= 0:
            raise ConfigError(f"color_gain must be 3 positive reals, got {self.color_gain}")
        if self.severity_label not in SEVERITIES:
            raise ConfigError(f"unknown severity label {self.severity_label!r}")

    @property
    def is_identity(self) -> bool:
        return (self.fog_alpha == 0 and self.blur_sigma == 0 and tuple(self.color_gain) == (1.0, 1.0, 1.0)
                and self.noise_std == 0)


SEVERITIES = ("none", "mild", "moderate", "severe")

PRESETS: dict[str, ShiftSpec] = {
    "none": ShiftSpec(),
    "mild": ShiftSpec(fog_alpha=0.3, severity_label="mild"),
    "moderate": ShiftSpec(fog_alpha=0.5, blur_sigma=1.0, severity_label="moderate"),
    "severe": ShiftSpec(fog_alpha=0.6, blur_sigma=1.5, color_gain=(1.25, 1.0, 0.7), severity_label="severe"),
}


def preset(name: str) -> ShiftSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown shift preset {name!r}; choose from {sorted(PRESETS)}") from None


_SKY = np.array([0.62, 0.70, 0.82])
_GROUND = np.array([0.38, 0.36, 0.33])


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    # shared street-like layout (sky over ground, soft horizon) plus texture
    horizon = rng.uniform(0.35, 0.55) * size
    rows = np.arange(size)[:, None] + 0.5
    blend = 1.0 / (1.0 + np.exp(-(rows - horizon) / 2.0))
    sky = _SKY + rng.normal(0.0, 0.05, size=3) - 0.1 * (rows / size)
    ground = _GROUND + rng.normal(0.0, 0.05, size=3) + 0.1 * (rows / size)
    base = (1 - blend)[..., None] * sky[:, None, :] + blend[..., None] * ground[:, None, :]
    base = np.broadcast_to(base, (size, size, 3))
    coarse = rng.normal(0.0, 0.07, size=(6, 6, 3))
    tex = ndimage.zoom(coarse, (size / 6, size / 6, 1), order=3, mode="reflect")[:size, :size]
    fine = rng.normal(0.0, 0.02, size=(size, size, 3))
    return np.clip(base + tex + fine, 0.0, 1.0)


def _shape_mask(kind: int, cx: float, cy: float, s: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == 0:
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= (s / 2) ** 2
    if kind == 1:
        return (np.abs(xx - cx) <= s / 2) & (np.abs(yy - cy) <= s / 2)
    top = cy - s / 2
    rel = (yy - top) / s
    return (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= rel * s / 2)


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, list[LabeledBox]]:
    """Render one scene; returns a float32 HxWx3 image in [0, 1] and its boxes.

    Boxes are the tight pixel bounding boxes of the rendered masks, and
    objects never overlap, so every label describes exactly what is drawn.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    img = _background(rng, size)
    lo, hi = size * 10 / 64, size * 22 / 64
    placed: list[tuple[int, int, int, int]] = []
    centers: set[tuple[int, int]] = set()
    boxes: list[LabeledBox] = []
    for _ in range(spec.n_objects):
        kind = int(rng.choice(spec.classes))
        for attempt in range(400):
            shrink = 1.0 if attempt < 200 else 0.6
            s = rng.uniform(lo, hi) * shrink
            cx = rng.uniform(s / 2 + 1, size - s / 2 - 1)
            cy = rng.uniform(s / 2 + 1, size - s / 2 - 1)
            mask = _shape_mask(kind, cx, cy, s, size)
            if mask.sum() < 4:
                continue
            ys, xs = np.nonzero(mask)
            x0, x1, y0, y1 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
            if (x0 + x1, y0 + y1) in centers:
                continue
            if any(x0 < bx1 + 2 and bx0 < x1 + 2 and y0 < by1 + 2 and by0 < y1 + 2 for bx0, by0, bx1, by1 in placed):
                continue
            break
        else:
            raise ConfigError(f"could not place {spec.n_objects} non-overlapping objects in a {size}px image")
        bg = img[mask].mean(axis=0)
        for _ in range(50):
            color = rng.uniform(0.0, 1.0, size=3)
            if np.abs(color - bg).max() > 0.35:
                break
        img[mask] = color
        placed.append((x0, y0, x1, y1))
        centers.add((x0 + x1, y0 + y1))
        boxes.append(LabeledBox(kind, (x0 + x1) / (2 * size), (y0 + y1) / (2 * size), (x1 - x0) / size,
                                (y1 - y0) / size))
    return img.astype(np.float32), boxes


def apply_shift(img: np.ndarray, shift: ShiftSpec, seed: int = 0) -> np.ndarray:
    """``clip(gain * blur(img) * (1 - fog) + fog * 0.5 + noise, 0, 1)``."""
    shift.validate()
    out = np.asarray(img, dtype=np.float64)
    if shift.blur_sigma > 0:
        out = ndimage.gaussian_filter(out, sigma=(shift.blur_sigma, shift.blur_sigma, 0), mode="reflect")
    if tuple(shift.color_gain) != (1.0, 1.0, 1.0):
        out = out * np.asarray(shift.color_gain)
    if shift.fog_alpha > 0:
        out = out * (1.0 - shift.fog_alpha) + shift.fog_alpha * 0.5
    if shift.noise_std > 0:
        out = out + np.random.default_rng(seed).normal(0.0, shift.noise_std, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.asarray(img).dtype)


def scene_seed(split_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([split_seed, index]).generate_state(1)[0])


def make_split(n: int, seed: int, shift: ShiftSpec | None = None, image_size: int = 64,
               max_objects: int = 4) -> list[tuple[np.ndarray, list[LabeledBox]]]:
    """Generate ``n`` scenes (1..max_objects objects each), optionally shifted."""
    rng = np.random.default_rng(seed)
    counts = rng.integers(1, max_objects + 1, size=n)
    pairs = []
    for i in range(n):
        sseed = scene_seed(seed, i)
        img, boxes = generate_scene(SceneSpec(seed=sseed, image_size=image_size, n_objects=int(counts[i])))
        if shift is not None and not shift.is_identity:
            img = apply_shift(img, shift, seed=sseed)
        pairs.append((img, boxes))
    return pairs


def format_label_line(box: LabeledBox) -> str:
    return f"{int(box.class_id)} {float(box.cx)!r} {float(box.cy)!r} {float(box.w)!r} {float(box.h)!r}"


def parse_label_line(line: str, where: str = "<label>") -> LabeledBox:
    parts = line.split()
    if len(parts) != 5:
        raise DatasetFormatError(f"{where}: expected 5 fields 'class cx cy w h', got {len(parts)}")
    try:
        cls = int(parts[0])
        cx, cy, w, h = (float(p) for p in parts[1:])
    except ValueError:
        raise DatasetFormatError(f"{where}: non-numeric field in {line.strip()!r}") from None
    if cls < 0:
        raise DatasetFormatError(f"{where}: negative class id {cls}")
    try:
        return LabeledBox(cls, cx, cy, w, h)
    except ValueError as exc:
        raise DatasetFormatError(f"{where}: {exc}") from None


def write_dataset(root: str | os.PathLike, split: str, pairs: Sequence[tuple[np.ndarray, Sequence[LabeledBox]]]) -> None:
    """Write ``images/{split}/NNNN.png`` and ``labels/{split}/NNNN.txt``."""
    root = Path(root)
    img_dir, lbl_dir = root / "images" / split, root / "labels" / split
    img_dir.mkdir(parents=True, exist_ok=True)
    lbl_dir.mkdir(parents=True, exist_ok=True)
    for i, (img, boxes) in enumerate(pairs):
        arr = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
        PILImage.fromarray(arr, mode="RGB").save(img_dir / f"{i:04d}.png")
        text = "".join(format_label_line(b) + "\n" for b in boxes)
        (lbl_dir / f"{i:04d}.txt").write_text(text)


def read_dataset(root: str | os.PathLike, split: str) -> list[tuple[np.ndarray, list[LabeledBox]]]:
    """Read a split written by :func:`write_dataset` (or any YOLO-format split).

    A missing label file means an image with no objects.
    """
    root = Path(root)
    img_dir = root / "images" / split
    if not img_dir.is_dir():
        raise FileNotFoundError(f"no image directory {img_dir}")
    pairs = []
    for img_path in sorted(p for p in img_dir.iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg"}):
        with PILImage.open(img_path) as im:
            img = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        lbl_path = root / "labels" / split / f"{img_path.stem}.txt"
        boxes = []
        if lbl_path.exists():
            for lineno, line in enumerate(lbl_path.read_text().splitlines(), start=1):
                if line.strip():
                    boxes.append(parse_label_line(line, f"{lbl_path}:{lineno}"))
        pairs.append((img, boxes))
    return pairs
