"""Manifests, image preprocessing, flips, oversampling and a synthetic toy set."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

SUPPORTED_FORMATS = {"PNG", "PPM", "JPEG", "BMP"}  # Pillow reports PGM files as "PPM"
LUMA_601 = np.array([0.299, 0.587, 0.114])


class DataError(Exception):
    """Any problem with manifests or image files."""


class ManifestParseError(DataError):
    pass


class LabelRangeError(DataError):
    pass


class EmptyManifestError(DataError):
    pass


class ImageReadError(DataError):
    pass


class UnsupportedImageError(DataError):
    pass


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    label: int


@dataclass(frozen=True)
class PreprocessSpec:
    size: int = 128
    mean: float = 0.5
    std: float = 0.5


def load_manifest(path, num_classes: int) -> list[ManifestRecord]:
    """Read ``relative_path,label`` lines (no header, LF or CRLF)."""
    path = Path(path)
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2 or not row[0].strip():
                raise ManifestParseError(f"{path}:{lineno}: expected 'path,label', got {','.join(row)!r}")
            try:
                label = int(row[1].strip())
            except ValueError:
                raise ManifestParseError(f"{path}:{lineno}: label {row[1]!r} is not an integer") from None
            if not 0 <= label < num_classes:
                raise LabelRangeError(f"{path}:{lineno}: label {label} outside [0, {num_classes})")
            records.append(ManifestRecord(row[0].strip(), label))
    if not records:
        raise EmptyManifestError(f"{path}: manifest has no records")
    return records


def load_image(path, spec: PreprocessSpec = PreprocessSpec()) -> np.ndarray:
    """Decode, convert to 601 luma, bilinear-resize and normalise to ``[1, S, S]`` in [-1, 1]."""
    try:
        with Image.open(path) as img:
            fmt = img.format
            if fmt not in SUPPORTED_FORMATS:
                raise UnsupportedImageError(f"{path}: unsupported image format {fmt}")
            img.load()
            if img.mode in ("L", "LA"):
                gray = np.asarray(img.convert("L"), dtype=np.float64)
            elif img.mode in ("RGB", "RGBA", "P", "PA", "CMYK"):
                rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
                gray = rgb @ LUMA_601
            else:
                raise UnsupportedImageError(f"{path}: unsupported pixel mode {img.mode} (need 8-bit gray or RGB)")
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageReadError(f"{path}: cannot read image ({exc})") from exc
    return preprocess_array(gray, spec)


def preprocess_array(gray: np.ndarray, spec: PreprocessSpec = PreprocessSpec()) -> np.ndarray:
    """Same pipeline as :func:`load_image` for an in-memory 0..255 grayscale array."""
    gray = np.asarray(gray, dtype=np.float32)
    if gray.shape != (spec.size, spec.size):
        resized = Image.fromarray(gray, mode="F").resize((spec.size, spec.size), Image.BILINEAR)
        gray = np.asarray(resized, dtype=np.float32)
    x = (np.clip(gray, 0.0, 255.0) / 255.0 - spec.mean) / spec.std
    return np.clip(x, -1.0, 1.0).astype(np.float32)[None]


def hflip(x: np.ndarray) -> np.ndarray:
    """Reverse the column order of ``[..., H, W]``."""
    return np.ascontiguousarray(x[..., ::-1])


def oversample_indices(labels, seed: int) -> np.ndarray:
    """One epoch of indices in which every represented class appears equally often.

    Each class is tiled up to the majority count; the leftover slots are filled
    by sampling that class without replacement.  The result is shuffled.
    """
    labels = np.asarray([r.label if isinstance(r, ManifestRecord) else r for r in labels])
    if labels.size == 0:
        raise EmptyManifestError("cannot oversample an empty manifest")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(labels, return_counts=True)
    target = counts.max()
    picks = []
    for cls, count in zip(classes, counts):
        members = np.flatnonzero(labels == cls)
        reps, rem = divmod(target, count)
        picks.append(np.tile(members, reps))
        if rem:
            picks.append(rng.choice(members, size=rem, replace=False))
    out = np.concatenate(picks)
    rng.shuffle(out)
    return out


class ImageSet:
    """Labels plus a way to fetch preprocessed image batches ``[B, 1, S, S]``."""

    def __init__(self, labels, images: np.ndarray | None = None, paths=None,
                 spec: PreprocessSpec = PreprocessSpec()):
        self.labels = np.asarray(labels, dtype=np.int64)
        self._images = None if images is None else np.asarray(images, dtype=np.float32)
        self._paths = None if paths is None else list(paths)
        self.spec = spec
        if self._images is None and self._paths is None:
            raise ValueError("ImageSet needs images or paths")

    @classmethod
    def from_manifest(cls, manifest, root, num_classes: int, preload: bool = True,
                      spec: PreprocessSpec = PreprocessSpec()) -> "ImageSet":
        records = load_manifest(manifest, num_classes)
        root = Path(root)
        paths = [root / r.image_path for r in records]
        labels = [r.label for r in records]
        if preload:
            return cls(labels, images=np.stack([load_image(p, spec) for p in paths]), spec=spec)
        return cls(labels, paths=paths, spec=spec)

    def __len__(self) -> int:
        return len(self.labels)

    def get_batch(self, indices) -> np.ndarray:
        indices = np.asarray(indices)
        if self._images is not None:
            return self._images[indices]
        return np.stack([load_image(self._paths[i], self.spec) for i in indices])


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def make_toy_images(n: int, num_classes: int, seed: int = 0, size: int = 128,
                    symmetric: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Class-conditional stripe images, ``uint8 [n, size, size]`` and labels.

    Class ``k`` is a horizontal sinusoid with ``2 (k + 1)`` periods per image,
    random phase and contrast, plus pixel noise.  Horizontal stripes survive
    a horizontal flip, so flip augmentation cannot confuse classes.  With
    ``symmetric=True`` the noise is mirrored too and every image equals its
    own flip.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    y = np.arange(size)[:, None] / size
    out = np.empty((n, size, size), dtype=np.uint8)
    for i, k in enumerate(labels):
        phase = rng.uniform(0, 2 * np.pi)
        contrast = rng.uniform(50, 90)
        noise = rng.normal(0, 12, size=(size, size))
        if symmetric:
            noise = (noise + noise[:, ::-1]) / 2
        img = 128 + contrast * np.sin(2 * np.pi * 2 * (k + 1) * y + phase) + noise
        out[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return out, labels


def write_toy_dataset(directory, n: int, num_classes: int, seed: int = 0,
                      symmetric: bool = False, fmt: str = "png") -> Path:
    """Write toy images plus ``manifest.csv`` into ``directory``; return the manifest path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    images, labels = make_toy_images(n, num_classes, seed=seed, symmetric=symmetric)
    lines = []
    for i, (img, label) in enumerate(zip(images, labels)):
        rel = f"images/{i:05d}.{fmt}"
        Image.fromarray(img, mode="L").save(directory / rel)
        lines.append(f"{rel},{label}\n")
    manifest = directory / "manifest.csv"
    manifest.write_text("".join(lines), encoding="utf-8")
    return manifest
