"""Generated stand-in datasets: bright glyph shapes on a black background.

Used by the test suite and the ``synth`` command when no real photographs
are at hand. Every image is a pure function of (class, seed, index).
"""
import math
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .datapipe import DatasetManifest, ManifestEntry, save_png, write_manifest

GLYPHS = ("disk", "ring", "square", "frame", "triangle", "plus", "cross", "hbar", "vbar", "dots")


def _polygon(cx, cy, r, n, phase):
    return [(cx + r * math.cos(phase + 2 * math.pi * k / n),
             cy + r * math.sin(phase + 2 * math.pi * k / n)) for k in range(n)]


def render_glyph(kind, rng, side=200):
    """Draw one glyph with random size, position, colour and mild noise."""
    img = Image.new("RGB", (side, side), (0, 0, 0))
    d = ImageDraw.Draw(img)
    r = side * rng.uniform(0.18, 0.28)
    cx = side / 2 + rng.uniform(-0.08, 0.08) * side
    cy = side / 2 + rng.uniform(-0.08, 0.08) * side
    colour = tuple(int(v) for v in rng.integers(150, 256, size=3))
    t = max(2, int(r * rng.uniform(0.25, 0.35)))
    box = (cx - r, cy - r, cx + r, cy + r)
    if kind == "disk":
        d.ellipse(box, fill=colour)
    elif kind == "ring":
        d.ellipse(box, outline=colour, width=t)
    elif kind == "square":
        d.rectangle(box, fill=colour)
    elif kind == "frame":
        d.rectangle(box, outline=colour, width=t)
    elif kind == "triangle":
        d.polygon(_polygon(cx, cy, r * 1.15, 3, -math.pi / 2), fill=colour)
    elif kind == "plus":
        d.rectangle((cx - r, cy - t / 2, cx + r, cy + t / 2), fill=colour)
        d.rectangle((cx - t / 2, cy - r, cx + t / 2, cy + r), fill=colour)
    elif kind == "cross":
        k = r * 0.8
        d.line((cx - k, cy - k, cx + k, cy + k), fill=colour, width=t)
        d.line((cx - k, cy + k, cx + k, cy - k), fill=colour, width=t)
    elif kind == "hbar":
        d.rectangle((cx - 1.2 * r, cy - t, cx + 1.2 * r, cy + t), fill=colour)
    elif kind == "vbar":
        d.rectangle((cx - t, cy - 1.2 * r, cx + t, cy + 1.2 * r), fill=colour)
    elif kind == "dots":
        q = r * 0.55
        for ox, oy in ((-q, -q), (q, -q), (-q, q), (q, q)):
            d.ellipse((cx + ox - t, cy + oy - t, cx + ox + t, cy + oy + t), fill=colour)
    else:
        raise ValueError(f"unknown glyph {kind!r}")
    arr = np.asarray(img, dtype=np.int16)
    noise = rng.integers(-12, 13, size=arr.shape)
    return np.clip(arr + noise * (arr > 0), 0, 255).astype(np.uint8)


def write_glyph_dataset(root, train_per_class, val_per_class, num_classes=10, seed=0, side=200):
    """Render a class-per-directory glyph dataset and its manifest.

    Returns the :class:`DatasetManifest` (also written to ``root/manifest.tsv``).
    """
    if not 2 <= num_classes <= len(GLYPHS):
        raise ValueError(f"num_classes must be in [2, {len(GLYPHS)}]")
    root = Path(root)
    labels = GLYPHS[:num_classes]
    entries = []
    for ci, kind in enumerate(labels):
        rng = np.random.default_rng([seed, ci])
        for k in range(train_per_class + val_per_class):
            rel = f"{kind}/{kind}_{k:04d}.png"
            save_png(render_glyph(kind, rng, side), root / rel)
            entries.append(ManifestEntry(rel, kind, "train" if k < train_per_class else "val"))
    manifest = DatasetManifest(labels, entries, root=root)
    write_manifest(manifest, root / "manifest.tsv")
    return manifest
