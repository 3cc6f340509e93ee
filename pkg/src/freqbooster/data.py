"""Datasets (image folders and a procedural shapes task) and image/CSV output helpers."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .config import DatasetSpec

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}
SHAPES = ("disk", "rectangle", "triangle", "ring", "cross")


class DatasetError(ValueError):
    pass


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, H, W, C) float32 in [-1, 1]
    labels: np.ndarray  # (N,) int64
    class_names: list[str]
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[tuple[np.ndarray, int]]:
        for img, lab in zip(self.images, self.labels):
            yield img, int(lab)

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        return torch.from_numpy(self.images), torch.from_numpy(self.labels)


def _render(shape: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    radius = rng.uniform(0.2, 0.35) * size
    cy, cx = rng.uniform(radius, size - radius, size=2)
    dy, dx = yy - cy, xx - cx
    if shape == "disk":
        mask = dy**2 + dx**2 <= radius**2
    elif shape == "rectangle":
        hy, hx = radius * rng.uniform(0.6, 1.0, size=2)
        mask = (np.abs(dy) <= hy) & (np.abs(dx) <= hx)
    elif shape == "triangle":
        mask = (dy <= radius * 0.7) & (np.abs(dx) <= (dy + radius) * 0.6)
    elif shape == "ring":
        d2 = dy**2 + dx**2
        mask = (d2 <= radius**2) & (d2 >= (0.5 * radius) ** 2)
    else:
        w = max(radius * 0.35, 0.5)
        mask = ((np.abs(dy) <= w) & (np.abs(dx) <= radius)) | ((np.abs(dx) <= w) & (np.abs(dy) <= radius))
    return mask


def synthetic_dataset(spec: DatasetSpec) -> ImageDataset:
    """Class ``k`` renders shape ``SHAPES[k % 5]`` with a class-dependent hue and jittered
    position/size, on a dark background. Labels cycle ``0, 1, ..., K-1``."""
    rng = np.random.default_rng(spec.seed)
    n, size, k = spec.num_images, spec.image_size, spec.num_classes
    palette = np.random.default_rng(spec.seed + 10_000).uniform(-0.2, 1.0, size=(k, spec.channels))
    images = np.full((n, size, size, spec.channels), -1.0, dtype=np.float32)
    labels = np.arange(n, dtype=np.int64) % k
    for i, lab in enumerate(labels):
        mask = _render(SHAPES[lab % len(SHAPES)], size, rng)
        color = np.clip(palette[lab] + rng.normal(0, 0.05, spec.channels), -1, 1)
        images[i][mask] = color
    return ImageDataset(images, labels, [f"class_{i}" for i in range(k)])


def _load_image(path: Path, size: int, channels: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        w, h = im.size
        side = min(w, h)
        left, top = (w - side) // 2, (h - side) // 2
        im = im.crop((left, top, left + side, top + side)).resize((size, size), Image.BICUBIC)
        arr = np.asarray(im, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    return np.clip(arr / 127.5 - 1.0, -1.0, 1.0)


def folder_dataset(spec: DatasetSpec) -> ImageDataset:
    """One subdirectory per class; labels follow lexicographic order of the names."""
    root = Path(spec.path)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DatasetError(f"no class subdirectories under {root}")
    images, labels, skipped = [], [], 0
    for label, name in enumerate(classes):
        count = 0
        for path in sorted((root / name).iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                images.append(_load_image(path, spec.image_size, spec.channels))
            except (OSError, UnidentifiedImageError, ValueError):
                skipped += 1
                continue
            labels.append(label)
            count += 1
        if count == 0:
            raise DatasetError(f"class {name!r} has no readable images")
    if skipped:
        log.warning("skipped %d unreadable images under %s", skipped, root)
    return ImageDataset(np.stack(images), np.asarray(labels, dtype=np.int64), classes, skipped)


def load_dataset(spec: DatasetSpec) -> ImageDataset:
    if spec.kind == "synthetic":
        return synthetic_dataset(spec)
    return folder_dataset(spec)


# -- output helpers ----------------------------------------------------------


def to_uint8(images) -> np.ndarray:
    """Linear [-1, 1] -> [0, 255] with round-half-to-even."""
    arr = images.detach().cpu().numpy() if isinstance(images, torch.Tensor) else np.asarray(images)
    arr = (np.clip(arr, -1.0, 1.0).astype(np.float64) + 1.0) * 127.5
    return np.rint(arr).astype(np.uint8)


def save_pngs(images, out_dir: str | os.PathLike, prefix: str = "sample") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, arr in enumerate(to_uint8(images)):
        path = out / f"{prefix}_{i:05d}.png"
        Image.fromarray(arr[..., 0] if arr.shape[-1] == 1 else arr).save(path, format="PNG")
        paths.append(path)
    return paths


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Sequence[Sequence]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path
