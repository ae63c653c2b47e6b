"""Synthetic handwriting-style glyph datasets.

Each class is a fixed set of pen strokes in a unit square; every sampled
example applies a random affine warp, stroke-width jitter, a per-image
brightness factor and pixel noise before rasterizing to a 28x28 grayscale
image.  The brightness factor is deliberately aggressive: it leaves class
identity untouched while spreading raw pixel-space distances, which is the
regime where learned pair distances earn their keep over plain Euclidean
ones.

These datasets stand in for MNIST/EMNIST-style IDX files in environments
that do not have them on disk; the generator writes standard IDX via
``openworld.data.write_idx`` so the rest of the pipeline cannot tell the
difference.
"""

from __future__ import annotations

import numpy as np

from .data import LabeledDataset


def _arc(cx, cy, r, a0, a1, n=6):
    angles = np.linspace(a0, a1, n + 1)
    pts = np.stack([cx + r * np.cos(angles), cy + r * np.sin(angles)], axis=1)
    return [((pts[i][0], pts[i][1]), (pts[i + 1][0], pts[i + 1][1])) for i in range(n)]


def _seg(x1, y1, x2, y2):
    return ((x1, y1), (x2, y2))


def _circle(cx, cy, r, n=8):
    return _arc(cx, cy, r, 0, 2 * np.pi, n)


# Stroke banks, digit-like first, letter-like after.  Coordinates are
# (x right, y down) in [0,1].
GLYPHS: list[list] = [
    _circle(0.5, 0.5, 0.30),                                          # 0
    [_seg(0.5, 0.15, 0.5, 0.85), _seg(0.35, 0.3, 0.5, 0.15)],         # 1
    _arc(0.5, 0.33, 0.18, np.pi, 2.25 * np.pi, 5)
    + [_seg(0.64, 0.45, 0.3, 0.82), _seg(0.3, 0.82, 0.72, 0.82)],     # 2
    _arc(0.47, 0.32, 0.17, 0.75 * np.pi, 2.4 * np.pi, 6)
    + _arc(0.47, 0.67, 0.19, 1.6 * np.pi, 3.25 * np.pi, 6),           # 3
    [_seg(0.62, 0.85, 0.62, 0.15), _seg(0.62, 0.15, 0.3, 0.6),
     _seg(0.3, 0.6, 0.75, 0.6)],                                      # 4
    [_seg(0.68, 0.16, 0.36, 0.16), _seg(0.36, 0.16, 0.34, 0.45)]
    + _arc(0.48, 0.62, 0.21, 1.25 * np.pi, 2.85 * np.pi, 6),          # 5
    _arc(0.5, 0.63, 0.21, 0, 2 * np.pi, 7)
    + [_seg(0.62, 0.2, 0.38, 0.5)],                                   # 6
    [_seg(0.28, 0.17, 0.72, 0.17), _seg(0.72, 0.17, 0.42, 0.85)],     # 7
    _circle(0.5, 0.32, 0.17, 6) + _circle(0.5, 0.68, 0.2, 6),         # 8
    _circle(0.5, 0.35, 0.19, 7) + [_seg(0.68, 0.38, 0.6, 0.85)],      # 9
    [_seg(0.5, 0.15, 0.25, 0.85), _seg(0.5, 0.15, 0.75, 0.85),
     _seg(0.35, 0.58, 0.65, 0.58)],                                   # A
    _arc(0.55, 0.5, 0.3, 0.6 * np.pi, 1.4 * np.pi, 6),                # C
    [_seg(0.32, 0.15, 0.32, 0.85), _seg(0.32, 0.15, 0.7, 0.15),
     _seg(0.32, 0.5, 0.62, 0.5), _seg(0.32, 0.85, 0.7, 0.85)],        # E
    [_seg(0.34, 0.15, 0.34, 0.85), _seg(0.34, 0.15, 0.72, 0.15),
     _seg(0.34, 0.5, 0.64, 0.5)],                                     # F
    [_seg(0.3, 0.15, 0.3, 0.85), _seg(0.7, 0.15, 0.7, 0.85),
     _seg(0.3, 0.5, 0.7, 0.5)],                                       # H
    [_seg(0.33, 0.15, 0.33, 0.85), _seg(0.33, 0.85, 0.72, 0.85)],     # L
    [_seg(0.25, 0.15, 0.75, 0.15), _seg(0.5, 0.15, 0.5, 0.85)],       # T
    [_seg(0.3, 0.15, 0.3, 0.6), _seg(0.7, 0.15, 0.7, 0.6)]
    + _arc(0.5, 0.6, 0.2, 0, np.pi, 5),                               # U
    [_seg(0.33, 0.15, 0.33, 0.85)]
    + _arc(0.42, 0.33, 0.18, 1.5 * np.pi, 2.5 * np.pi, 5)
    + [_seg(0.42, 0.51, 0.33, 0.51), _seg(0.42, 0.15, 0.33, 0.15)],   # P
    _arc(0.5, 0.32, 0.17, 0.3 * np.pi, 1.45 * np.pi, 6)
    + _arc(0.5, 0.66, 0.17, 1.35 * np.pi, 2.6 * np.pi, 6),            # S
    [_seg(0.28, 0.15, 0.72, 0.85), _seg(0.72, 0.15, 0.28, 0.85)],     # X
    [_seg(0.28, 0.15, 0.72, 0.15), _seg(0.72, 0.15, 0.28, 0.85),
     _seg(0.28, 0.85, 0.72, 0.85)],                                   # Z
    [_seg(0.28, 0.15, 0.5, 0.85), _seg(0.72, 0.15, 0.5, 0.85)],       # V
    [_seg(0.28, 0.15, 0.5, 0.5), _seg(0.72, 0.15, 0.5, 0.5),
     _seg(0.5, 0.5, 0.5, 0.85)],                                      # Y
]


def _transform(segments, rng, max_rotate=0.22, max_shift=0.07):
    pts = np.asarray(segments, dtype=np.float64)  # [S, 2, 2]
    theta = rng.uniform(-max_rotate, max_rotate)
    sx, sy = rng.uniform(0.85, 1.15, size=2)
    shear = rng.uniform(-0.15, 0.15)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    mat = rot @ np.array([[sx, shear * sx], [0.0, sy]])
    shift = rng.uniform(-max_shift, max_shift, size=2)
    return (pts - 0.5) @ mat.T + 0.5 + shift


def _rasterize(segments, size, radius, softness=0.013):
    """Intensity from the distance field of the stroke set."""
    coords = (np.arange(size) + 0.5) / size
    px, py = np.meshgrid(coords, coords)  # py rows, px cols
    p = np.stack([px.ravel(), py.ravel()], axis=1)  # [size*size, 2]
    a = segments[:, 0]
    b = segments[:, 1]
    v = b - a
    vv = np.maximum((v * v).sum(axis=1), 1e-12)
    # distance from every pixel to every segment
    ap = p[:, None, :] - a[None, :, :]
    t = np.clip((ap * v[None, :, :]).sum(axis=2) / vv[None, :], 0.0, 1.0)
    closest = a[None, :, :] + t[:, :, None] * v[None, :, :]
    d = np.sqrt(((p[:, None, :] - closest) ** 2).sum(axis=2)).min(axis=1)
    img = 1.0 / (1.0 + np.exp((d - radius) / softness))
    return img.reshape(size, size)


def make_synthetic_dataset(glyph_ids, n_per_class, seed, split_tag="train",
                           brightness_range=(0.45, 1.0), noise=0.03,
                           image_size=28) -> LabeledDataset:
    """Render ``n_per_class`` randomized examples of each requested glyph."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for gid in glyph_ids:
        strokes = GLYPHS[gid]
        for _ in range(n_per_class):
            segs = _transform(strokes, rng)
            radius = rng.uniform(0.045, 0.065)
            img = _rasterize(segs, image_size, radius)
            img *= rng.uniform(*brightness_range)
            img += rng.normal(0.0, noise, size=img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(gid)
    order = rng.permutation(len(images))
    images = np.asarray(images, dtype=np.float32)[order]
    labels = np.asarray(labels, dtype=np.int64)[order]
    return LabeledDataset(images, labels, split_tag)
