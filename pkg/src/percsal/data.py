"""Synthetic shapes dataset with exact ground-truth boxes and masks, plus
PPM image i/o and a directory container for whole datasets.

Every image is a textured-noise background with one primary object whose
class determines shape, color and fill texture; difficult samples add a
smaller distractor object of another class and keep the primary under 25% of
the image area.  Classifiers therefore have to key on object pixels, which is
what makes ground-truth saliency meaningful here.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import container
from .games import BoundingBox, bbox_of_mask
from .tensor_core import Tensor


class DatasetError(ValueError):
    """Malformed dataset directory, manifest or image file."""


@dataclass(frozen=True)
class Region:
    box: BoundingBox
    mask: np.ndarray  # bool [H, W]


@dataclass(frozen=True)
class Sample:
    sample_id: int
    image: Tensor  # [C, H, W] in [0, 1]
    label: int
    regions: dict  # class -> list of Region

    def __post_init__(self):
        c, h, w = self.image.shape
        if self.label not in self.regions or not self.regions[self.label]:
            raise DatasetError(f"sample {self.sample_id}: label {self.label} has no region")
        for cls, regs in self.regions.items():
            for reg in regs:
                if reg.mask.shape != (h, w):
                    raise DatasetError(
                        f"sample {self.sample_id}: mask shape {reg.mask.shape} != image {h}x{w}"
                    )
                if reg.box.x1 > w or reg.box.y1 > h:
                    raise DatasetError(
                        f"sample {self.sample_id}: box {reg.box} outside {h}x{w} image"
                    )

    @property
    def label_set(self) -> tuple:
        return tuple(sorted(self.regions))


# ---------------------------------------------------------------------------
# shape rasterization

_PALETTE = np.array([
    [1.00, 0.30, 0.25],
    [0.25, 0.95, 0.35],
    [0.35, 0.45, 1.00],
    [1.00, 0.90, 0.25],
    [0.95, 0.35, 0.95],
    [0.30, 0.95, 0.95],
    [1.00, 0.65, 0.25],
    [0.80, 0.85, 0.90],
])

_SHAPES = ("disk", "square", "triangle", "cross")


def _shape_mask(kind: str, size: int, cy: float, cx: float, a: float) -> np.ndarray:
    yy, xx = np.ogrid[:size, :size]
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= a * a
    if kind == "square":
        return (np.abs(dy) <= a) & (np.abs(dx) <= a)
    if kind == "triangle":
        return (dy >= -a) & (dy <= a) & (np.abs(dx) <= (dy + a) / 2.0)
    if kind == "cross":
        bar = a / 3.0
        return ((np.abs(dy) <= bar) & (np.abs(dx) <= a)) | \
               ((np.abs(dx) <= bar) & (np.abs(dy) <= a))
    raise ValueError(kind)


def _half_extent(kind: str, area_px: float) -> float:
    if kind == "disk":
        return math.sqrt(area_px / math.pi)
    if kind == "square":
        return math.sqrt(area_px / 4.0)
    if kind == "triangle":
        return math.sqrt(area_px / 2.0)
    return math.sqrt(area_px * 9.0 / 20.0)  # cross


def _texture(cls: int, size: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    pattern = cls % 8
    if pattern == 0:
        t = (yy // 2) % 2
    elif pattern == 1:
        t = (xx // 2) % 2
    elif pattern == 2:
        t = ((yy // 2) + (xx // 2)) % 2
    elif pattern == 3:
        t = ((yy + xx) // 3) % 2
    elif pattern == 4:
        t = ((yy % 4 < 2) & (xx % 4 < 2)).astype(int)
    elif pattern == 5:
        t = ((yy // 3) * (xx // 3)) % 2
    elif pattern == 6:
        t = np.ones_like(yy)
    else:
        t = (yy + xx) % 2
    return t.astype(np.float64)


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    base = 0.28 + 0.10 * rng.random()
    img = np.full((3, size, size), base)
    for grid, amp in ((4, 0.06), (8, 0.05)):
        coarse = rng.normal(size=(grid, grid))
        up = _upsample(coarse, size)
        img += amp * up[None, :, :]
    img += 0.07 * rng.normal(size=(3, size, size))
    tint = 0.04 * rng.normal(size=3)
    img += tint[:, None, None]
    return np.clip(img, 0.02, 0.55)


def _upsample(coarse: np.ndarray, size: int) -> np.ndarray:
    g = coarse.shape[0]
    sy = np.clip((np.arange(size) + 0.5) * (g / size) - 0.5, 0, g - 1)
    y0 = np.floor(sy).astype(int)
    y1 = np.minimum(y0 + 1, g - 1)
    wy = sy - y0
    rows = coarse[y0] * (1 - wy)[:, None] + coarse[y1] * wy[:, None]
    cols = rows[:, y0] * (1 - wy)[None, :] + rows[:, y1] * wy[None, :]
    return cols


def _paint(img: np.ndarray, mask: np.ndarray, cls: int) -> None:
    size = img.shape[1]
    tex = _texture(cls, size)
    fill = 0.55 + 0.45 * tex
    color = _PALETTE[cls % len(_PALETTE)]
    for ch in range(3):
        img[ch][mask] = color[ch] * fill[mask]


def _place_object(rng: np.random.Generator, kind: str, size: int,
                  area_frac: float, forbidden: np.ndarray | None,
                  max_frac: float | None) -> np.ndarray:
    """Rasterize one object mask, avoiding overlap with ``forbidden`` and an
    area cap; shrinks and retries until it fits."""
    a = _half_extent(kind, area_frac * size * size)
    for _ in range(200):
        a = min(a, (size - 4) / 2.0)
        lo, hi = a + 1.0, size - a - 2.0
        if hi <= lo:
            a *= 0.9
            continue
        cy = lo + rng.random() * (hi - lo)
        cx = lo + rng.random() * (hi - lo)
        mask = _shape_mask(kind, size, cy, cx, a)
        if mask.sum() < 9:
            a *= 1.1
            continue
        if max_frac is not None and mask.sum() >= max_frac * size * size:
            a *= 0.92
            continue
        if forbidden is not None and (mask & forbidden).any():
            a *= 0.97
            continue
        return mask
    raise RuntimeError("could not place object")  # pragma: no cover


def gen_shapes(count: int, size: int = 32, num_classes: int = 4,
               difficult_fraction: float = 0.0, seed: int = 0) -> list:
    """Deterministic synthetic dataset.  Difficult samples (drawn with the
    given probability) keep the primary object under 25% of the image and add
    a smaller distractor object of another class."""
    if size < 32:
        raise ValueError("size must be >= 32")
    if not 2 <= num_classes <= 8:
        raise ValueError("num_classes must be in 2..8")
    samples = []
    for idx in range(count):
        rng = np.random.default_rng([seed, idx])
        difficult = rng.random() < difficult_fraction
        cls = int(rng.integers(num_classes))
        img = _background(size, rng)
        if difficult:
            frac = 0.08 + 0.14 * rng.random()
            mask = _place_object(rng, _SHAPES[cls % 4], size, frac, None, 0.25)
        else:
            frac = 0.10 + 0.25 * rng.random()
            mask = _place_object(rng, _SHAPES[cls % 4], size, frac, None, None)
        _paint(img, mask, cls)
        regions = {cls: [Region(box=bbox_of_mask(mask), mask=mask)]}
        if difficult:
            other = int(rng.integers(num_classes - 1))
            if other >= cls:
                other += 1
            dfrac = 0.02 + 0.04 * rng.random()
            dmask = _place_object(rng, _SHAPES[other % 4], size, dfrac, mask, 0.10)
            _paint(img, dmask, other)
            regions[other] = [Region(box=bbox_of_mask(dmask), mask=dmask)]
        samples.append(Sample(sample_id=idx, image=Tensor(np.clip(img, 0.0, 1.0)),
                              label=cls, regions=regions))
    return samples


# ---------------------------------------------------------------------------
# PPM (P6) image files

def write_ppm(tensor, path) -> None:
    arr = tensor.array if isinstance(tensor, Tensor) else np.asarray(tensor)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DatasetError(f"write_ppm expects [3,H,W], got shape {arr.shape}")
    h, w = arr.shape[1], arr.shape[2]
    bytes8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(bytes8.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> Tensor:
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(blob):
            raise DatasetError(f"{path}: truncated PPM header")
        ch = blob[pos:pos + 1]
        if ch == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(blob) and not blob[pos:pos + 1].isspace():
                pos += 1
            tokens.append(blob[start:pos])
    if tokens[0] != b"P6":
        raise DatasetError(f"{path}: not a P6 PPM file (magic {tokens[0]!r})")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise DatasetError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise DatasetError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    payload = blob[pos:pos + 3 * w * h]
    if len(payload) != 3 * w * h:
        raise DatasetError(f"{path}: truncated PPM payload")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return Tensor(arr.transpose(2, 0, 1).astype(np.float64) / 255.0)


# ---------------------------------------------------------------------------
# dataset directory container

_MANIFEST = "manifest.json"


def save_dataset(samples, dirpath) -> None:
    os.makedirs(os.path.join(dirpath, "samples"), exist_ok=True)
    entries = []
    for s in samples:
        fname = os.path.join("samples", f"{s.sample_id:04d}.tns")
        tensors = {"image": s.image.array}
        regions_meta = {}
        for cls in sorted(s.regions):
            regions_meta[str(cls)] = []
            for k, reg in enumerate(s.regions[cls]):
                key = f"mask/{cls}/{k}"
                tensors[key] = reg.mask.astype(np.float64)
                regions_meta[str(cls)].append(
                    {"box": list(reg.box.as_tuple()), "mask_key": key})
        container.write_tensors(os.path.join(dirpath, fname), tensors,
                                {"sample_id": s.sample_id})
        entries.append({
            "id": s.sample_id, "label": int(s.label),
            "labels": [int(c) for c in s.label_set],
            "file": fname, "image_shape": list(s.image.shape),
            "regions": regions_meta,
        })
    manifest = {"format": "percsal-dataset-v1", "samples": entries}
    with open(os.path.join(dirpath, _MANIFEST), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_dataset(dirpath) -> list:
    mpath = os.path.join(dirpath, _MANIFEST)
    if not os.path.exists(mpath):
        raise DatasetError(f"{dirpath}: missing {_MANIFEST}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    samples = []
    for entry in manifest.get("samples", []):
        sid = entry["id"]
        fpath = os.path.join(dirpath, entry["file"])
        if not os.path.exists(fpath):
            raise DatasetError(f"sample {sid}: missing tensor file {entry['file']}")
        try:
            _, tensors = container.read_tensors(fpath)
        except container.ContainerError as exc:
            raise DatasetError(f"sample {sid}: {exc}") from exc
        if "image" not in tensors:
            raise DatasetError(f"sample {sid}: tensor file lacks an image")
        image = tensors["image"]
        h, w = image.shape[1], image.shape[2]
        regions = {}
        for cls_str, regs in entry["regions"].items():
            cls = int(cls_str)
            regions[cls] = []
            for reg in regs:
                x0, y0, x1, y1 = reg["box"]
                if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
                    raise DatasetError(
                        f"sample {sid}: box {reg['box']} outside {h}x{w} image")
                if reg["mask_key"] not in tensors:
                    raise DatasetError(
                        f"sample {sid}: missing mask tensor {reg['mask_key']}")
                mask = tensors[reg["mask_key"]] > 0.5
                regions[cls].append(Region(box=BoundingBox(x0, y0, x1, y1), mask=mask))
        samples.append(Sample(sample_id=sid, image=Tensor(image),
                              label=int(entry["label"]), regions=regions))
    return samples
