"""Seed substreams, hashing, and small numeric helpers."""

from __future__ import annotations

import hashlib
import zlib
from pathlib import Path

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Derive an independent, reproducible RNG from a root seed and a label.

    The label is folded in through crc32 so the mapping is stable across
    runs and platforms (python's str hash is salted and unusable here).
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([seed, key]))


def substream_seed(seed: int, name: str) -> int:
    """A derived integer seed, for handing a substream to a child config."""
    return int(substream(seed, name).integers(0, 2**31 - 1))


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal draws resampled until within 2 std, as used for token inits."""
    out = rng.normal(0.0, std, size=shape)
    for _ in range(16):
        bad = np.abs(out) > 2.0 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return np.clip(out, -2.0 * std, 2.0 * std)


def sha256_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def normalize_images(images: np.ndarray) -> np.ndarray:
    """Shift [0,1] pixel data to mean 0.5 / std 0.25 normalized form."""
    return (np.asarray(images, dtype=np.float64) - 0.5) / 0.25


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a [C,H,W] image with bilinear sampling (align_corners=False).

    Returns the input untouched-but-copied when the size already matches,
    so a same-size resize is exactly the identity.
    """
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = img[:, y0[:, None], x0[None, :]] * (1 - wx) + img[:, y0[:, None], x1[None, :]] * wx
    bot = img[:, y1[:, None], x0[None, :]] * (1 - wx) + img[:, y1[:, None], x1[None, :]] * wx
    return top * (1 - wy) + bot * wy


def format_mean_std(mean: float, std: float) -> str:
    """Render a metric pair the way the result tables print them, e.g. '99.56 ± 0.3'."""
    return f"{mean:.2f} ± {std:.1f}"


def render_table(headers: list[str], rows: list[list[str]]) -> str:
    """Plain UTF-8 text table with a header rule."""
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    def fmt(cells):
        return "  ".join(c.ljust(widths[i]) for i, c in enumerate(cells)).rstrip()
    lines = [fmt(headers), "  ".join("-" * w for w in widths)]
    lines.extend(fmt(row) for row in rows)
    return "\n".join(lines) + "\n"
