"""From photos on disk to training batches.

Raw images are ``uint8`` arrays of shape ``(h, w, 3)``. Model-ready pixels
are ``float32`` arrays of shape ``(3, side, side)`` in ``[0, 1]``.
"""
import logging
import math
import os
import string
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    ConfigError,
    CorruptImageError,
    ImageNotFoundError,
    ManifestError,
    ShapeError,
    UnsupportedFormatError,
)

log = logging.getLogger(__name__)

TARGET_SIDE = 200
DEFAULT_BG_THRESHOLD = 30
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
MANIFEST_HEADER = "#signglyph-manifest v1"
SPLITS = ("train", "val")

LABEL_SPACES = {
    "letters": tuple(string.ascii_uppercase),
    "digits": tuple("123456789"),
    "digits0": tuple("0123456789"),
    "letters+digits": tuple(string.ascii_uppercase) + tuple("123456789"),
}


# decoding ---------------------------------------------------------------------

def load_image(path):
    """Decode a PNG or JPEG into an ``(h, w, 3)`` uint8 RGB array."""
    path = Path(path)
    if not path.is_file():
        raise ImageNotFoundError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "JPEG"):
                raise UnsupportedFormatError(f"{path}: unsupported image format {im.format}")
            im.load()
            if im.mode in ("I;16", "I;16B", "I", "F"):
                raise UnsupportedFormatError(f"{path}: only 8-bit images are supported (mode {im.mode})")
            if im.mode != "RGB":
                # grayscale expands to three equal channels; alpha is dropped
                im = im.convert("RGB")
            return np.array(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CorruptImageError(f"{path}: cannot decode image ({exc})") from None


def save_png(img, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img, mode="RGB").save(path, format="PNG", optimize=False)


# preprocessing ----------------------------------------------------------------

def subtract_background(img, bg, threshold=DEFAULT_BG_THRESHOLD):
    """Black out pixels within ``threshold`` of a reference background frame.

    The distance is the largest per-channel absolute difference; pixels at or
    below the threshold become (0, 0, 0), the rest are kept unchanged.
    """
    if img.shape != bg.shape:
        raise ShapeError(f"image {img.shape} and background {bg.shape} differ in size")
    if not 0 <= threshold <= 255:
        raise ConfigError(f"threshold must be in [0, 255], got {threshold}")
    diff = np.abs(img.astype(np.int16) - bg.astype(np.int16)).max(axis=2)
    out = img.copy()
    out[diff <= threshold] = 0
    return out


def pad_to_square(arr):
    """Pad an ``(h, w, c)`` array with zeros to a square; odd remainder goes bottom/right."""
    h, w = arr.shape[:2]
    side = max(h, w)
    top = (side - h) // 2
    left = (side - w) // 2
    return np.pad(arr, ((top, side - h - top), (left, side - w - left), (0, 0)))


def _axis_taps(n_in, n_out):
    # half-pixel centred sample positions, clamped at the borders
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, (src - i0).astype(np.float32)


def resize_bilinear(arr, out_h, out_w):
    """Bilinear resample of an ``(h, w, c)`` float array."""
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    y0, y1, fy = _axis_taps(h, out_h)
    x0, x1, fx = _axis_taps(w, out_w)
    rows = arr[y0] * (1 - fy)[:, None, None] + arr[y1] * fy[:, None, None]
    return rows[:, x0] * (1 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]


def pad_and_resize(img, side=TARGET_SIDE):
    """Square-pad with black, resample to ``side`` x ``side``, scale to [0, 1].

    Returns ``(3, side, side)`` float32.
    """
    f = img.astype(np.float32) / np.float32(255.0)
    f = pad_to_square(f)
    f = resize_bilinear(f, side, side)
    return np.ascontiguousarray(np.clip(f, 0.0, 1.0).transpose(2, 0, 1), dtype=np.float32)


def to_uint8(pixels):
    """Inverse of the [0, 1] scaling, for writing processed images: ``(3,s,s)`` -> ``(s,s,3)``."""
    return np.rint(pixels.transpose(1, 2, 0) * 255.0).astype(np.uint8)


def prepare_image(img, side=TARGET_SIDE, background=None, threshold=DEFAULT_BG_THRESHOLD):
    """The one preprocessing path shared by ``prepare`` and ``predict``.

    Optional background subtraction, then pad/resize, quantised back to
    uint8 exactly as it is stored on disk.
    """
    if background is not None:
        img = subtract_background(img, background, threshold)
    return to_uint8(pad_and_resize(img, side))


# augmentation -----------------------------------------------------------------

@dataclass
class AugmentPolicy:
    max_rotation_deg: float = 20.0
    max_translate_frac: float = 0.20
    hflip_prob: float = 0.5
    enabled: bool = True

    def validate(self):
        if self.max_rotation_deg < 0:
            raise ConfigError("max_rotation_deg must be >= 0")
        if not 0 <= self.max_translate_frac < 1:
            raise ConfigError("max_translate_frac must be in [0, 1)")
        if not 0 <= self.hflip_prob <= 1:
            raise ConfigError("hflip_prob must be in [0, 1]")


class AugmentParams(NamedTuple):
    angle_deg: float
    dx: float
    dy: float
    flip: bool


def sample_augment_params(policy, rng, side):
    """Draw one transform. Always consumes exactly four random numbers."""
    angle = rng.uniform(-policy.max_rotation_deg, policy.max_rotation_deg)
    dx, dy = rng.uniform(-policy.max_translate_frac, policy.max_translate_frac, size=2) * side
    flip = bool(rng.random() < policy.hflip_prob)
    return AugmentParams(float(angle), float(dx), float(dy), flip)


def warp(pixels, angle_deg, dx, dy):
    """Rotate ``(c, h, w)`` pixels about the centre, then shift by (dx, dy).

    Positive angles turn the picture counter-clockwise as displayed. Bilinear
    sampling; anything mapped from outside the frame is black.
    """
    c, h, w = pixels.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = math.radians(angle_deg)
    cos, sin = math.cos(t), math.sin(t)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # invert the forward map: undo the shift, then rotate back
    u = xx - dx - cx
    v = yy - dy - cy
    sx = cos * u - sin * v + cx
    sy = sin * u + cos * v + cy
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = (sx - x0).astype(np.float32)
    fy = (sy - y0).astype(np.float32)
    out = np.zeros_like(pixels)
    for oy, ox, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + oy, x0 + ox
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = pixels[:, np.where(ok, yi, 0), np.where(ok, xi, 0)]
        out += vals * (wgt * ok)
    return out


def apply_augment(pixels, params):
    out = pixels[:, :, ::-1].copy() if params.flip else pixels
    if params.angle_deg or params.dx or params.dy:
        out = np.clip(warp(out, params.angle_deg, params.dx, params.dy), 0.0, 1.0)
    return out


@dataclass
class Sample:
    pixels: np.ndarray
    label: int
    source_path: str = ""


def augment(sample, policy, rng):
    """Randomly rotate, shift and mirror a sample; the label is untouched."""
    if policy is None or not policy.enabled:
        return sample
    params = sample_augment_params(policy, rng, sample.pixels.shape[-1])
    return replace(sample, pixels=apply_augment(sample.pixels, params))


# manifests --------------------------------------------------------------------

@dataclass
class ManifestEntry:
    path: str
    label: str
    split: str


@dataclass
class DatasetManifest:
    labels: tuple
    entries: list
    root: Path = Path(".")
    format_version: int = 1
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.labels = tuple(self.labels)
        self.root = Path(self.root)
        index = {name: i for i, name in enumerate(self.labels)}
        if len(index) != len(self.labels):
            raise ManifestError("duplicate class names in label space")
        seen = set()
        for e in self.entries:
            if e.label not in index:
                raise ManifestError(f"{e.path}: class {e.label!r} not in label space")
            if e.split not in SPLITS:
                raise ManifestError(f"{e.path}: split must be train or val, got {e.split!r}")
            if e.path in seen:
                raise ManifestError(f"duplicate manifest path {e.path}")
            seen.add(e.path)
        self._index = index

    def label_index(self, name):
        return self._index[name]

    def split(self, split):
        return [e for e in self.entries if e.split == split]

    def counts(self):
        """``{class: {"train": n, "val": n}}`` in label order."""
        out = {name: {s: 0 for s in SPLITS} for name in self.labels}
        for e in self.entries:
            out[e.label][e.split] += 1
        return out

    def check_trainable(self):
        """Raise unless both splits are populated; return per-class gap warnings."""
        for s in SPLITS:
            if not self.split(s):
                raise ConfigError(f"manifest has no {s} entries")
        gaps = []
        for name, c in self.counts().items():
            for s in SPLITS:
                if c[s] == 0:
                    gaps.append(f"class {name} has no {s} entries")
        return gaps

    def resolve(self, entry):
        return self.root / entry.path


def write_manifest(manifest, path):
    lines = [MANIFEST_HEADER, "labels: " + ",".join(manifest.labels)]
    lines += [f"{e.path}\t{e.label}\t{e.split}" for e in manifest.entries]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ImageNotFoundError(f"manifest not found: {path}") from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ManifestError(f"{path}:1: expected header {MANIFEST_HEADER!r}")
    if len(lines) < 2 or not lines[1].startswith("labels:"):
        raise ManifestError(f"{path}:2: expected 'labels: <names>'")
    labels = [s.strip() for s in lines[1][len("labels:"):].split(",") if s.strip()]
    entries = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ManifestError(f"{path}:{lineno}: expected path<TAB>class<TAB>split")
        entries.append(ManifestEntry(*parts))
    try:
        return DatasetManifest(labels, entries, root=path.parent)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from None


def list_images(directory):
    return sorted(p for p in Path(directory).iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def prepare_manifest(root, labels=None, val_fraction=0.5, seed=0):
    """Stratified train/val split of a class-per-subdirectory image tree.

    Within each class ``floor(n * val_fraction)`` images go to validation and
    the rest (so the rounding favours training) to train. Each class is
    shuffled by its own generator seeded from ``(seed, class index)``.
    Subdirectories not in ``labels`` are skipped and reported in
    ``manifest.warnings``.
    """
    root = Path(root)
    if not root.is_dir():
        raise ImageNotFoundError(f"dataset directory not found: {root}")
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in [0, 1), got {val_fraction}")
    subdirs = sorted(p.name for p in root.iterdir() if p.is_dir())
    labels = tuple(subdirs) if labels is None else tuple(labels)
    warnings = [f"ignoring directory {d!r}: not in label space" for d in subdirs if d not in labels]
    entries = []
    for idx, name in enumerate(labels):
        files = list_images(root / name) if (root / name).is_dir() else []
        if not files:
            raise ConfigError(f"class {name!r} has no images under {root / name}")
        n_val = int(math.floor(len(files) * val_fraction))
        order = np.random.default_rng([seed, idx]).permutation(len(files))
        val = set(order[:n_val].tolist())
        for k, f in enumerate(files):
            rel = f.relative_to(root).as_posix()
            entries.append(ManifestEntry(rel, name, "val" if k in val else "train"))
    manifest = DatasetManifest(labels, entries, root=root)
    manifest.warnings = warnings
    for w in warnings:
        log.warning(w)
    return manifest


# batching ---------------------------------------------------------------------

class Batch(NamedTuple):
    x: np.ndarray
    labels: np.ndarray
    paths: list


class ImageCache:
    """Memo of decoded images keyed by path, to avoid re-decoding every epoch."""

    def __init__(self):
        self._store = {}

    def __call__(self, path):
        key = str(path)
        img = self._store.get(key)
        if img is None:
            img = self._store[key] = load_image(path)
        return img

    def __len__(self):
        return len(self._store)


def load_sample(manifest, entry, side=TARGET_SIDE, loader=load_image):
    path = manifest.resolve(entry)
    return Sample(pad_and_resize(loader(path), side), manifest.label_index(entry.label), str(path))


def make_batches(manifest, split, batch_size, seed=None, policy=None, side=TARGET_SIDE,
                 loader=load_image):
    """Yield :class:`Batch` tuples covering ``split`` once.

    Train samples are shuffled by ``default_rng(seed)``, which also drives
    augmentation; ``seed=None`` keeps manifest order. The val split is
    always in manifest order and never augmented.
    """
    entries = manifest.split(split)
    if not entries:
        raise ConfigError(f"split {split!r} is empty")
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(seed)
    shuffle = seed is not None and split == "train"
    order = rng.permutation(len(entries)) if shuffle else np.arange(len(entries))
    use_aug = split == "train" and policy is not None and policy.enabled
    if use_aug:
        policy.validate()
    for start in range(0, len(order), batch_size):
        chunk = [entries[i] for i in order[start:start + batch_size]]
        samples = [load_sample(manifest, e, side, loader) for e in chunk]
        if use_aug:
            samples = [augment(s, policy, rng) for s in samples]
        yield Batch(
            np.stack([s.pixels for s in samples]),
            np.array([s.label for s in samples], dtype=np.int64),
            [s.source_path for s in samples],
        )


def epoch_seed(run_seed, epoch):
    """Per-epoch shuffle seed derived from the run seed."""
    return int(np.random.SeedSequence([run_seed, epoch]).generate_state(1, np.uint64)[0])
