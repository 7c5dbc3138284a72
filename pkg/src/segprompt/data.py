"""Synthetic stand-in for the private endoscopy dataset.

Frames are organized into "videos": per-video appearance parameters
(lighting gain, gradient, vignette, tint, blob scale) are drawn once per
video so frames within a video correlate and video-wise splits genuinely
matter. Each frame holds one foreground blob whose procedural texture is
the only class signal; the background (vignette, tissue field, noise and
distractor blobs whose texture class is drawn independently of the label)
is class-indistinguishable by construction. Masks mark the true blob only.

On disk a dataset is a CSV manifest plus binary PPM images and PGM masks,
all trivially parseable from any language.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError
from .metrics import dice
from .model import SegMap
from .util import substream

LABEL_NAMES = ("com", "cap")  # class 0, class 1


@dataclass
class Sample:
    image: np.ndarray          # [3,H,W] floats in [0,1]
    mask: SegMap | None
    label: int
    video_id: str
    frame_id: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ConfigurationError(f"label must be 0 or 1, got {self.label}")
        if self.mask is not None and self.mask.values.shape != self.image.shape[-2:]:
            raise DimensionError(
                f"mask {self.mask.values.shape} does not match image {self.image.shape}"
            )


@dataclass(frozen=True)
class GeneratorConfig:
    videos_per_class: tuple[int, int] = (3, 2)
    frames_per_video: int = 60
    image_size: int = 32
    pretext_videos: int = 8
    noise_level: float = 0.03
    distractor_rate: float = 1.0
    # per-class texture controls: (class 0 = COM, class 1 = CAP)
    spot_frequency: tuple[float, float] = (6.0, 1.6)
    granularity: tuple[float, float] = (0.50, 0.10)
    hue_band: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (0.45, 0.30, 0.18),
        (0.80, 0.72, 0.50),
    )
    seed: int = 0

    def __post_init__(self):
        if min(self.videos_per_class) < 1:
            raise ConfigurationError("each class needs at least one video")
        if self.frames_per_video < 1 or self.image_size < 8:
            raise ConfigurationError("frames_per_video and image_size must be usable")


@dataclass(frozen=True)
class FoldPlan:
    """Video-wise train/validation splits; validation pairs one video per class."""

    folds: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]

    def __len__(self) -> int:
        return len(self.folds)


# ---------------------------------------------------------------------------
# procedural rendering


def _grids(size: int) -> tuple[np.ndarray, np.ndarray]:
    ax = (np.arange(size) + 0.5) / size
    return np.meshgrid(ax, ax, indexing="ij")  # (Y, X)


def _smooth_field(rng: np.random.Generator, size: int, components: int,
                  freq_lo: float, freq_hi: float) -> np.ndarray:
    yy, xx = _grids(size)
    out = np.zeros((size, size))
    for _ in range(components):
        ang = rng.uniform(0, 2 * math.pi)
        freq = rng.uniform(freq_lo, freq_hi)
        phase = rng.uniform(0, 2 * math.pi)
        out += np.sin(2 * math.pi * freq * (math.cos(ang) * xx + math.sin(ang) * yy) + phase)
    return out / components


def _blob_mask(rng: np.random.Generator, size: int, center: tuple[float, float],
               radius: float) -> np.ndarray:
    yy, xx = _grids(size)
    dy, dx = yy - center[0], xx - center[1]
    theta = np.arctan2(dy, dx)
    rr = np.hypot(dy, dx)
    boundary = np.full_like(rr, radius)
    for harmonic in (2, 3, 5):
        amp = rng.uniform(0.0, 0.28 / harmonic) * radius
        phase = rng.uniform(0, 2 * math.pi)
        boundary = boundary + amp * np.sin(harmonic * theta + phase)
    return rr <= boundary


def _class_texture(rng: np.random.Generator, cfg: GeneratorConfig, label: int,
                   size: int) -> np.ndarray:
    """A full-frame [3,H,W] texture tile for one stone class.

    The pattern is anisotropic (a dominant grain direction close to the image
    axes), which gives the rotation pretext task texture-orientation cues
    that transfer to classification.
    """
    yy, xx = _grids(size)
    freq = cfg.spot_frequency[label]
    amp = cfg.granularity[label]
    base = np.array(cfg.hue_band[label])
    ang = rng.normal(0.0, 0.15)
    p1, p2 = rng.uniform(0, 2 * math.pi, size=2)
    u = math.cos(ang) * xx + math.sin(ang) * yy
    v = -math.sin(ang) * xx + math.cos(ang) * yy
    pattern = np.sin(2 * math.pi * freq * u + p1) * np.sin(2 * math.pi * freq * 0.35 * v + p2)
    spots = (pattern > 0.1).astype(float)
    shade = amp * (spots - 0.45) + 0.05 * _smooth_field(rng, size, 2, 1.0, 2.5)
    tile = base[:, None, None] + shade[None, :, :] * np.array([1.0, 0.9, 0.7])[:, None, None]
    return tile


def _background(rng: np.random.Generator, cfg: GeneratorConfig, size: int,
                video: dict) -> np.ndarray:
    """Tissue-like backdrop: a per-video macro pattern (fixed orientation,
    frequency and phase, the structural video signature) plus a per-frame
    residual field."""
    base = np.array([0.60, 0.35, 0.32]) + video["tint"]
    yy, xx = _grids(size)
    ang, freq, phase = video["bg_angle"], video["bg_freq"], video["bg_phase"]
    macro = 0.11 * np.sin(2 * math.pi * freq * (math.cos(ang) * xx + math.sin(ang) * yy) + phase)
    field = macro + 0.04 * _smooth_field(rng, size, 2, 0.8, 2.2)
    img = base[:, None, None] + field[None, :, :]
    return img


def _lighting(cfg: GeneratorConfig, size: int, video: dict,
              rng: np.random.Generator) -> np.ndarray:
    """Vignette plus directional gradient; the per-frame jitter here is wider
    than the per-video spread so lighting stays a nuisance, not a video id."""
    yy, xx = _grids(size)
    cy, cx = video["vignette_center"]
    cy = cy + rng.uniform(-0.06, 0.06)
    cx = cx + rng.uniform(-0.06, 0.06)
    dist = np.hypot(yy - cy, xx - cx) / math.sqrt(0.5)
    vignette = 1.0 - video["vignette_strength"] * rng.uniform(0.75, 1.25) * dist ** 2
    ang = video["light_angle"] + rng.normal(0.0, 0.12)
    grad = 1.0 + video["light_strength"] * rng.uniform(0.7, 1.3) * 2.0 * (
        math.cos(ang) * (xx - 0.5) + math.sin(ang) * (yy - 0.5)
    )
    return video["gain"] * rng.uniform(0.93, 1.07) * vignette * grad


def _video_params(rng: np.random.Generator) -> dict:
    # per-video appearance constants keep frames within a video correlated;
    # they are deliberately milder than the per-frame jitter in _lighting so
    # that video identity cannot be learned faster than the class texture
    return {
        "gain": rng.uniform(0.96, 1.04),
        "light_angle": rng.normal(1.5 * math.pi, 0.15),
        "light_strength": rng.uniform(0.09, 0.15),
        "vignette_center": (rng.uniform(0.42, 0.58), rng.uniform(0.42, 0.58)),
        "vignette_strength": rng.uniform(0.12, 0.20),
        "tint": rng.normal(0.0, 0.01, size=3),
        "bg_angle": rng.uniform(0.0, 2 * math.pi),
        "bg_freq": rng.uniform(0.8, 2.4),
        "bg_phase": rng.uniform(0.0, 2 * math.pi),
        "blob_bias": rng.uniform(-0.02, 0.02),
    }


def _render_frame(cfg: GeneratorConfig, label: int, video: dict,
                  rng: np.random.Generator, suppress_foreground: bool = False
                  ) -> tuple[np.ndarray, np.ndarray]:
    size = cfg.image_size
    img = _background(rng, cfg, size, video)

    n_distract = min(int(rng.poisson(cfg.distractor_rate)), 2)
    for _ in range(n_distract):
        d_label = int(rng.integers(0, 2))          # independent of the true label
        center = (rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85))
        radius = rng.uniform(0.08, 0.12)
        d_mask = _blob_mask(rng, size, center, radius)
        tile = _class_texture(rng, cfg, d_label, size)
        img = np.where(d_mask[None, :, :], tile, img)

    # the true blob; a wide size range makes global sum statistics an
    # unreliable class readout unless the mask supplies the area
    for _ in range(32):
        center = (rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7))
        radius = rng.uniform(0.13, 0.28) + video["blob_bias"]
        blob = _blob_mask(rng, size, center, radius)
        frac = blob.mean()
        if 0.05 <= frac <= 0.6:
            break
    else:
        raise ContractError("could not place a foreground blob within the area band")

    if suppress_foreground:
        tile = _background(rng, cfg, size, video)
    else:
        tile = _class_texture(rng, cfg, label, size)
    img = np.where(blob[None, :, :], tile, img)

    img = img * _lighting(cfg, size, video, rng)[None, :, :]
    img = img + video.get("fingerprint", 0.0)
    img = img + rng.normal(0.0, cfg.noise_level, size=img.shape)
    return np.clip(img, 0.0, 1.0), blob


def _generate_videos(cfg: GeneratorConfig, plan: list[tuple[str, int]],
                     suppress_foreground: bool = False,
                     per_frame_background: bool = False) -> list[Sample]:
    samples: list[Sample] = []
    for video_id, label in plan:
        vid_rng = substream(cfg.seed, f"video:{video_id}")
        video = _video_params(vid_rng)
        for frame_id in range(cfg.frames_per_video):
            rng = substream(cfg.seed, f"frame:{video_id}:{frame_id}")
            frame_video = video
            if per_frame_background:
                # pretext frames redraw the tissue macro pattern every frame
                # so pretraining features cannot bind to any one video
                frame_video = dict(video)
                frame_video["bg_angle"] = rng.uniform(0.0, 2 * math.pi)
                frame_video["bg_freq"] = rng.uniform(0.8, 2.4)
                frame_video["bg_phase"] = rng.uniform(0.0, 2 * math.pi)
            img, blob = _render_frame(cfg, label, frame_video, rng,
                                      suppress_foreground=suppress_foreground)
            mask = SegMap(np.where(blob, 1.0, -1.0))
            samples.append(Sample(img, mask, label, video_id, frame_id))
    return samples


def _video_plan(cfg: GeneratorConfig) -> list[tuple[str, int]]:
    plan = [(f"com_{i}", 0) for i in range(cfg.videos_per_class[0])]
    plan += [(f"cap_{i}", 1) for i in range(cfg.videos_per_class[1])]
    return plan


def generate(cfg: GeneratorConfig, suppress_foreground: bool = False) -> list[Sample]:
    """The labelled evaluation dataset: one video list per class.

    ``suppress_foreground`` re-renders the blob region with background
    texture; it exists so tests can confirm the class signal lives only
    inside the mask.
    """
    return _generate_videos(cfg, _video_plan(cfg), suppress_foreground)


def generate_pretext(cfg: GeneratorConfig) -> list[Sample]:
    """Extra videos, disjoint from the evaluation videos, for backbone
    pretraining only. They are texture-dense (more blobs per frame) and
    redraw the background pattern per frame so rotation features cannot bind
    to any single video."""
    rng = substream(cfg.seed, "pretext:labels")
    plan = [(f"pretext_{i}", int(rng.integers(0, 2))) for i in range(cfg.pretext_videos)]
    dense = replace(cfg, distractor_rate=max(cfg.distractor_rate, 2.2))
    return _generate_videos(dense, plan, per_frame_background=True)


# ---------------------------------------------------------------------------
# mask degradation


def degrade_mask(mask: SegMap, dice_target: float, seed: int) -> SegMap:
    """Erode/dilate the boundary and flip speckles until the Dice overlap
    with the original lands in dice_target +/- 0.02."""
    if not 0.5 < dice_target <= 1.0:
        raise ConfigurationError(f"dice_target must be in (0.5, 1], got {dice_target}")
    if dice_target == 1.0:
        return SegMap(mask.values.copy())
    rng = substream(seed, "degrade")
    fg = mask.foreground.copy()
    area = int(fg.sum())
    if area == 0:
        raise ContractError("cannot degrade an empty mask to a lower dice score")

    def neighbors_any(m: np.ndarray) -> np.ndarray:
        pad = np.pad(m, 1, constant_values=False)
        return pad[:-2, 1:-1] | pad[2:, 1:-1] | pad[1:-1, :-2] | pad[1:-1, 2:]

    original = SegMap(np.where(fg, 1.0, -1.0))
    k = int(round((1.0 - dice_target) * area))
    degraded = fg.copy()
    for _ in range(500):
        current = dice(original, SegMap(np.where(degraded, 1.0, -1.0)))
        if abs(current - dice_target) <= 0.02:
            return SegMap(np.where(degraded, 1.0, -1.0))
        # flip out/in in balanced pairs so the foreground size is preserved:
        # k pairs up front, then one pair at a time until inside the band
        pairs = max(1, k) if current == 1.0 else 1
        out_cand = np.argwhere(degraded & neighbors_any(~degraded) & fg)
        in_cand = np.argwhere(~degraded & neighbors_any(degraded) & ~fg)
        far_bg = np.argwhere(~degraded & ~fg & ~neighbors_any(degraded))
        if len(out_cand) == 0 or (len(in_cand) == 0 and len(far_bg) == 0):
            break
        n = min(pairs, len(out_cand))
        picked_out = out_cand[rng.choice(len(out_cand), size=n, replace=False)]
        ins = []
        n_boundary = min((n + 1) // 2, len(in_cand))
        if n_boundary:
            ins.extend(in_cand[rng.choice(len(in_cand), size=n_boundary, replace=False)])
        speckle_pool = far_bg if len(far_bg) else in_cand
        while len(ins) < n:
            ins.append(speckle_pool[int(rng.integers(0, len(speckle_pool)))])
        for (oy, ox), (iy, ix) in zip(picked_out, ins):
            degraded[oy, ox] = False
            degraded[iy, ix] = True
    raise ContractError(
        f"could not reach dice target {dice_target} within tolerance after bounded attempts"
    )


# ---------------------------------------------------------------------------
# fold planning


def plan_folds(samples: list[Sample]) -> FoldPlan:
    """All COM x CAP video pairs as validation sets, the rest training."""
    by_video: dict[str, set[int]] = {}
    for s in samples:
        by_video.setdefault(s.video_id, set()).add(s.label)
    for vid, labels in by_video.items():
        if len(labels) != 1:
            raise ContractError(f"video '{vid}' mixes class labels {sorted(labels)}")
    com = sorted(v for v, labels in by_video.items() if labels == {0})
    cap = sorted(v for v, labels in by_video.items() if labels == {1})
    if not com or not cap:
        raise ConfigurationError(
            f"fold planning needs at least one video per class, got {len(com)} COM / {len(cap)} CAP"
        )
    all_vids = sorted(by_video)
    folds = []
    for c in com:
        for p in cap:
            val = (c, p)
            train = tuple(v for v in all_vids if v not in val)
            folds.append((train, val))
    return FoldPlan(tuple(folds))


def split_fold(samples: list[Sample], fold: tuple[tuple[str, ...], tuple[str, ...]]
               ) -> tuple[list[Sample], list[Sample]]:
    train_vids, val_vids = set(fold[0]), set(fold[1])
    if train_vids & val_vids:
        raise ContractError(f"fold leaks videos {sorted(train_vids & val_vids)}")
    train = [s for s in samples if s.video_id in train_vids]
    val = [s for s in samples if s.video_id in val_vids]
    return train, val


# ---------------------------------------------------------------------------
# portable on-disk format


def _write_ppm(path: Path, image: np.ndarray) -> None:
    h, w = image.shape[-2:]
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    interleaved = np.ascontiguousarray(pixels.transpose(1, 2, 0))
    path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + interleaved.tobytes())


def _write_pgm(path: Path, mask: SegMap) -> None:
    h, w = mask.values.shape
    pixels = np.where(mask.foreground, 255, 0).astype(np.uint8)
    path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def _read_netpbm(path: Path, magic: bytes) -> tuple[np.ndarray, int, int]:
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise ConfigurationError(f"missing dataset file: {path}") from None
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != magic or fields[3] != b"255":
        raise ConfigurationError(f"{path}: not a {magic.decode()} file with maxval 255")
    w, h = int(fields[1]), int(fields[2])
    channels = 3 if magic == b"P6" else 1
    payload = np.frombuffer(raw, dtype=np.uint8, count=w * h * channels, offset=pos)
    return payload, w, h


def read_ppm(path: Path) -> np.ndarray:
    payload, w, h = _read_netpbm(Path(path), b"P6")
    return payload.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm_mask(path: Path) -> SegMap:
    payload, w, h = _read_netpbm(Path(path), b"P5")
    grid = payload.reshape(h, w)
    bad = ~np.isin(grid, (0, 255))
    if bad.any():
        raise ConfigurationError(
            f"{path}: mask pixels must be 0 or 255, found value {int(grid[bad][0])}"
        )
    return SegMap(np.where(grid == 255, 1.0, -1.0))


MANIFEST_COLUMNS = ["frame", "mask", "label", "video_id", "frame_id"]


def save_dataset(samples: list[Sample], out_dir: str | Path, kind: str = "eval") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in sorted(samples, key=lambda s: (s.video_id, s.frame_id)):
        frame_rel = f"videos/{s.video_id}/frame_{s.frame_id:04d}.ppm"
        frame_path = out / frame_rel
        frame_path.parent.mkdir(parents=True, exist_ok=True)
        _write_ppm(frame_path, s.image)
        mask_rel = ""
        if s.mask is not None:
            mask_rel = f"masks/{s.video_id}/frame_{s.frame_id:04d}.pgm"
            mask_path = out / mask_rel
            mask_path.parent.mkdir(parents=True, exist_ok=True)
            _write_pgm(mask_path, s.mask)
        rows.append([frame_rel, mask_rel, str(s.label), s.video_id, str(s.frame_id)])
    with open(out / "manifest.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    (out / "meta.txt").write_text(f"kind={kind}\n")


def load_dataset(dir_path: str | Path) -> list[Sample]:
    root = Path(dir_path)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise ConfigurationError(f"no manifest.csv in dataset directory {root}")
    samples: list[Sample] = []
    with open(manifest, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MANIFEST_COLUMNS:
            raise ConfigurationError(
                f"{manifest}: malformed header {header}, expected {MANIFEST_COLUMNS}"
            )
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_COLUMNS):
                raise ConfigurationError(f"{manifest}: malformed row at line {lineno}")
            frame_rel, mask_rel, label, video_id, frame_id = row
            image = read_ppm(root / frame_rel)
            mask = read_pgm_mask(root / mask_rel) if mask_rel else None
            if mask is not None and mask.values.shape != image.shape[-2:]:
                raise ConfigurationError(
                    f"{root / mask_rel}: mask {mask.values.shape} does not match "
                    f"image {image.shape[-2:]}"
                )
            samples.append(Sample(image, mask, int(label), video_id, int(frame_id)))
    return samples


def dataset_kind(dir_path: str | Path) -> str:
    meta = Path(dir_path) / "meta.txt"
    if not meta.exists():
        return "unknown"
    for line in meta.read_text().splitlines():
        if line.startswith("kind="):
            return line.split("=", 1)[1].strip()
    return "unknown"


def dataset_checksum(dir_path: str | Path) -> str:
    """Order-stable sha256 over the manifest and every file it lists."""
    root = Path(dir_path)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise ConfigurationError(f"no manifest.csv in dataset directory {root}")
    h = hashlib.sha256(manifest.read_bytes())
    with open(manifest, newline="") as f:
        reader = csv.reader(f)
        next(reader, None)
        for row in reader:
            for rel in row[:2]:
                if rel:
                    h.update((root / rel).read_bytes())
    return h.hexdigest()
