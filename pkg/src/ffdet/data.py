"""Dataset I/O, the synthetic face generator, random crops and resizing.

On-disk format: ``images/*.pgm`` (grayscale) or ``images/*.ppm`` (colour)
plus ``annotations.jsonl`` with one record per image::

    {"image": "images/000001.pgm", "boxes": [[x1, y1, x2, y2], ...]}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

ANNOTATIONS = "annotations.jsonl"
PAD_MULTIPLE = 128


class DataError(Exception):
    """Malformed or missing dataset content."""


@dataclass
class Sample:
    image: np.ndarray  # (C, H, W) float in [0, 1]
    boxes: np.ndarray  # (n, 4)
    source: str = ""

    @property
    def hw(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


@dataclass
class SynthConfig:
    image_size: int = 128
    n: int = 300
    faces: tuple[int, int] = (1, 5)
    face_size: tuple[float, float] = (12.0, 96.0)
    noise: float = 0.08
    occlusion: float = 0.3
    seed: int = 7
    start: int = 0
    channels: int = 1

    def __post_init__(self):
        self.faces = tuple(self.faces)
        self.face_size = tuple(float(v) for v in self.face_size)
        lo, hi = self.face_size
        if not (0 < lo <= hi <= self.image_size):
            raise ValueError(f"face size range {self.face_size} must lie within the image ({self.image_size})")
        if not (1 <= self.faces[0] <= self.faces[1]):
            raise ValueError("faces per image range must satisfy 1 <= lo <= hi")
        if not 0.0 <= self.occlusion <= 1.0:
            raise ValueError("occlusion fraction must lie in [0, 1]")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")


@dataclass
class CropConfig:
    prob: float = 0.5
    side: tuple[float, float] = (0.3, 1.0)

    def __post_init__(self):
        self.side = tuple(float(v) for v in self.side)
        lo, hi = self.side
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError("crop side fractions must lie in (0, 1]")
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError("crop probability must lie in [0, 1]")


# ------------------------------------------------------------------ synthesis


def _quarter(x: float) -> float:
    return round(x * 4.0) / 4.0


def _ellipse_mask(h: int, w: int, cx, cy, rx, ry) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return ((xx + 0.5 - cx) / rx) ** 2 + ((yy + 0.5 - cy) / ry) ** 2 <= 1.0


def synth_image(cfg: SynthConfig, index: int) -> tuple[np.ndarray, np.ndarray]:
    """One synthetic image (uint8, H x W [x 3]) and its face boxes.

    Faces are bright or dark filled ellipses with eye and mouth marks; some
    get a rectangular occluder covering one side. Backgrounds are smoothed
    noise with a few distractor rectangles.
    """
    rng = np.random.default_rng([cfg.seed, index])
    s = cfg.image_size
    bg = ndimage.gaussian_filter(rng.normal(size=(s, s)), sigma=6.0)
    bg = 0.5 + 0.2 * bg / (np.abs(bg).max() + 1e-12)
    img = bg.copy()
    for _ in range(rng.integers(0, 4)):
        x0, y0 = rng.uniform(0, s, 2)
        bw, bh = rng.uniform(4, s / 3, 2)
        img[int(y0):int(y0 + bh), int(x0):int(x0 + bw)] = rng.uniform(0.2, 0.8)

    lo, hi = cfg.face_size
    boxes: list[list[float]] = []
    for _ in range(rng.integers(cfg.faces[0], cfg.faces[1] + 1)):
        for _attempt in range(50):
            fh = _quarter(rng.uniform(lo, hi))
            fw = _quarter(rng.uniform(max(lo, fh / 1.5), fh))
            x1 = _quarter(rng.uniform(0, s - fw))
            y1 = _quarter(rng.uniform(0, s - fh))
            cand = [x1, y1, x1 + fw, y1 + fh]
            if all(cand[2] <= b[0] or b[2] <= cand[0] or cand[3] <= b[1] or b[3] <= cand[1] for b in boxes):
                break
        else:
            continue
        boxes.append(cand)
        cx, cy = x1 + fw / 2, y1 + fh / 2
        bright = rng.random() < 0.5
        face_v = rng.uniform(0.85, 1.0) if bright else rng.uniform(0.0, 0.15)
        mark_v = rng.uniform(0.0, 0.2) if bright else rng.uniform(0.8, 1.0)
        img[_ellipse_mask(s, s, cx, cy, fw / 2, fh / 2)] = face_v
        er = max(1.0, 0.1 * fw)
        for ex in (cx - 0.22 * fw, cx + 0.22 * fw):
            img[_ellipse_mask(s, s, ex, cy - 0.12 * fh, er, er * 0.8)] = mark_v
        img[_ellipse_mask(s, s, cx, cy + 0.25 * fh, 0.25 * fw, max(0.6, 0.05 * fh))] = mark_v
        if rng.random() < cfg.occlusion:
            frac = rng.uniform(0.2, 0.5)
            side = rng.integers(4)
            ox1, oy1, ox2, oy2 = x1, y1, x1 + fw, y1 + fh
            if side == 0:
                ox2 = x1 + frac * fw
            elif side == 1:
                ox1 = x1 + (1 - frac) * fw
            elif side == 2:
                oy2 = y1 + frac * fh
            else:
                oy1 = y1 + (1 - frac) * fh
            img[int(oy1):int(math.ceil(oy2)), int(ox1):int(math.ceil(ox2))] = rng.uniform(0.3, 0.7)

    img = img + cfg.noise * rng.normal(size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    if cfg.channels == 3:
        tint = rng.uniform(0.8, 1.0, size=3)
        img = img[:, :, None] * tint[None, None, :]
    return np.round(img * 255.0).astype(np.uint8), np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def synth_generate(cfg: SynthConfig, out_dir) -> Path:
    """Write ``cfg.n`` images (indices start..start+n-1) and annotations under ``out_dir``."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {out}: {e}") from e
    ext = "pgm" if cfg.channels == 1 else "ppm"
    lines = []
    for i in range(cfg.start, cfg.start + cfg.n):
        pixels, boxes = synth_image(cfg, i)
        rel = f"images/{i:06d}.{ext}"
        Image.fromarray(pixels, mode="L" if cfg.channels == 1 else "RGB").save(out / rel)
        lines.append(json.dumps({"image": rel, "boxes": boxes.tolist()}))
    (out / ANNOTATIONS).write_text("\n".join(lines) + "\n")
    return out


# -------------------------------------------------------------------- loading


def read_image(path) -> np.ndarray:
    """Raw uint8 pixels as (C, H, W)."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def load_image(path) -> np.ndarray:
    return read_image(path).astype(np.float64) / 255.0


def _parse_line(line: str, where: str, root: Path):
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as e:
        raise DataError(f"{where}: malformed JSON ({e.msg})") from e
    if not isinstance(rec, dict) or "image" not in rec or "boxes" not in rec:
        raise DataError(f"{where}: record needs 'image' and 'boxes'")
    boxes = rec["boxes"]
    if not isinstance(boxes, list) or any(not isinstance(b, list) or len(b) != 4 for b in boxes):
        raise DataError(f"{where}: 'boxes' must be a list of [x1, y1, x2, y2]")
    try:
        arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    except (TypeError, ValueError) as e:
        raise DataError(f"{where}: non-numeric box coordinate") from e
    img_path = root / rec["image"]
    if not img_path.is_file():
        raise DataError(f"{where}: missing image file {img_path}")
    return rec["image"], arr, img_path


def load_dataset(path) -> list[Sample]:
    """Samples ordered by image path. Raises DataError with file:line diagnostics."""
    root = Path(path)
    ann = root / ANNOTATIONS
    if not ann.is_file():
        raise DataError(f"missing annotation file {ann}")
    records = []
    for lineno, line in enumerate(ann.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{ann}:{lineno}"
        rel, boxes, img_path = _parse_line(line, where, root)
        for b in boxes:
            if not (b[2] > b[0] and b[3] > b[1]):
                raise DataError(f"{where}: degenerate box {b.tolist()} (need x2 > x1 and y2 > y1)")
        records.append((rel, boxes, img_path, where))
    records.sort(key=lambda r: r[0])
    samples = []
    for rel, boxes, img_path, where in records:
        image = load_image(img_path)
        h, w = image.shape[1:]
        clipped = boxes.copy()
        clipped[:, [0, 2]] = np.clip(clipped[:, [0, 2]], 0, w)
        clipped[:, [1, 3]] = np.clip(clipped[:, [1, 3]], 0, h)
        if np.any(clipped[:, 2] <= clipped[:, 0]) or np.any(clipped[:, 3] <= clipped[:, 1]):
            raise DataError(f"{where}: box lies outside the {w}x{h} image")
        samples.append(Sample(image, clipped, rel))
    return samples


# ---------------------------------------------------------------- transforms


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of (C, H, W) with half-pixel centres."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    zoom = (1.0, out_h / h, out_w / w)
    out = ndimage.zoom(image, zoom, order=1, mode="nearest", grid_mode=True)
    if out.shape != (c, out_h, out_w):
        raise AssertionError(f"resize produced {out.shape}, expected {(c, out_h, out_w)}")
    return out


def resize_shorter_side(image: np.ndarray, boxes: np.ndarray, target: int):
    """Resize so min(H, W) == target, keeping aspect. Returns (image, boxes, scale)."""
    if target <= 0:
        raise ValueError("target must be positive")
    h, w = image.shape[1:]
    scale = target / min(h, w)
    if scale == 1.0:
        return image.copy(), np.asarray(boxes, np.float64).reshape(-1, 4).copy(), 1.0
    out_h = target if h <= w else int(round(h * scale))
    out_w = target if w < h else int(round(w * scale))
    if h == w:
        out_h = out_w = target
    return resize_image(image, out_h, out_w), np.asarray(boxes, np.float64).reshape(-1, 4) * scale, scale


def pad_to_multiple(image: np.ndarray, multiple: int = PAD_MULTIPLE) -> np.ndarray:
    """Zero-pad bottom/right so both sides are multiples of ``multiple``."""
    h, w = image.shape[1:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, 0), (0, ph), (0, pw)))


def random_crop(sample: Sample, cfg: CropConfig, rng: np.random.Generator) -> Sample:
    """Square crop resized back to the shorter image side.

    Faces survive iff their centre lies inside the crop; survivors are
    clipped to the crop and rescaled with the image.
    """
    if rng.random() >= cfg.prob:
        return sample
    h, w = sample.hw
    short = min(h, w)
    side = max(1, int(round(rng.uniform(*cfg.side) * short)))
    x0 = int(rng.integers(0, w - side + 1))
    y0 = int(rng.integers(0, h - side + 1))
    return crop_and_resize(sample, x0, y0, side, short)


def crop_and_resize(sample: Sample, x0: int, y0: int, side: int, out_side: int) -> Sample:
    crop = sample.image[:, y0 : y0 + side, x0 : x0 + side]
    b = sample.boxes.reshape(-1, 4)
    cx, cy = (b[:, 0] + b[:, 2]) / 2, (b[:, 1] + b[:, 3]) / 2
    keep = (cx > x0) & (cx < x0 + side) & (cy > y0) & (cy < y0 + side)
    kept = b[keep] - np.array([x0, y0, x0, y0], dtype=np.float64)
    kept = np.clip(kept, 0, side)
    s = out_side / side
    kept = kept * s
    kept = kept[(kept[:, 2] > kept[:, 0]) & (kept[:, 3] > kept[:, 1])]
    return Sample(resize_image(crop, out_side, out_side), kept, sample.source)
