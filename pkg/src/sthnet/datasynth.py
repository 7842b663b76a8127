"""Synthetic video tasks, segment sampling, and dataset file I/O.

Two desk-scale tasks probe the two capabilities a video model can have:

* ``motion``: a bright square translates left/right/up/down over a static
  textured background with Gaussian pixel noise. Start positions are drawn
  so that the distribution of any single frame is identical across the four
  classes (the moving axis pools to a symmetric trapezoid over frames; the
  static axis is drawn from that same trapezoid). Only the frame ORDER
  carries the label, so per-frame models sit at chance while temporal
  models solve the task.
* ``appearance``: classes are static shapes (square, disc, bar, cross);
  every frame shows the same scene plus fresh noise, so a single frame
  suffices.

Videos are stored as (C, F, H, W) tensor files; a manifest lists
``relpath<TAB>label<TAB>frames`` entries under ``#``-prefixed header lines
echoing the generation config and the train-split channel means.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, ConfigError, DataFormatError, MissingFileError
from .tensor import Rng, read_tensor, write_tensor

MOTION_CLASSES = ("left", "right", "up", "down")
APPEARANCE_CLASSES = ("square", "disc", "bar", "cross")


@dataclass(frozen=True)
class SynthConfig:
    task: str = "motion"            # "motion" | "appearance"
    num_class: int = 4
    frames_total: int = 16
    resolution: int = 56
    object_size: int = 12
    speed: int = 2
    noise_sigma: float = 0.05
    samples_per_class: int = 200
    val_fraction: float = 0.25
    channels: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("motion", "appearance"):
            raise ConfigError(f"task must be motion|appearance, got {self.task!r}")
        if self.num_class < 2:
            raise ConfigError("num_class must be >= 2")
        if self.task == "motion" and self.num_class != len(MOTION_CLASSES):
            raise ConfigError(f"motion task has exactly {len(MOTION_CLASSES)} direction classes")
        if self.task == "appearance" and self.num_class > len(APPEARANCE_CLASSES):
            raise ConfigError(f"appearance task supports at most {len(APPEARANCE_CLASSES)} classes")
        if self.frames_total < 2 or self.resolution < 8 or self.object_size < 2:
            raise ConfigError("frames_total >= 2, resolution >= 8, object_size >= 2 required")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.samples_per_class < 2:
            raise ConfigError("samples_per_class must be >= 2")
        if self.task == "motion":
            if self.speed < 1:
                raise ConfigError("motion speed must be >= 1 px/frame")
            if self.travel_range() < 0:
                raise ConfigError(
                    "trajectory overflow: speed*(frames_total-1) + object_size exceeds resolution"
                )

    def travel_range(self) -> int:
        """Largest valid start offset along the moving axis."""
        return self.resolution - self.object_size - self.speed * (self.frames_total - 1)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "num_class": self.num_class,
            "frames_total": self.frames_total,
            "resolution": self.resolution,
            "object_size": self.object_size,
            "speed": self.speed,
            "noise_sigma": self.noise_sigma,
            "samples_per_class": self.samples_per_class,
            "val_fraction": self.val_fraction,
            "channels": self.channels,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class ManifestEntry:
    relpath: str
    label: int
    frames: int


@dataclass
class DatasetManifest:
    split: str
    entries: list[ManifestEntry]
    meta: dict = field(default_factory=dict)
    channel_means: np.ndarray | None = None

    def __len__(self):
        return len(self.entries)


def _trapezoid_position(rng: Rng, cfg: SynthConfig) -> int:
    """Draw from the pooled-over-frames distribution of the moving axis."""
    u = rng.randint(0, cfg.travel_range() + 1)
    f = rng.randint(0, cfg.frames_total)
    return u + cfg.speed * f


def _background(rng: Rng, cfg: SynthConfig) -> np.ndarray:
    """Static low-contrast block texture."""
    block = 8
    n = (cfg.resolution + block - 1) // block
    coarse = rng.uniform((n, n), 0.10, 0.40)
    tex = np.repeat(np.repeat(coarse, block, axis=0), block, axis=1)
    return tex[: cfg.resolution, : cfg.resolution]


def _render_video(canvas_per_frame, cfg: SynthConfig, rng: Rng) -> np.ndarray:
    """Stack frames, add per-channel Gaussian noise, clip to [0, 1]."""
    f = cfg.frames_total
    res = cfg.resolution
    video = np.empty((cfg.channels, f, res, res), dtype=np.float64)
    noise = rng.derive("noise").normal((cfg.channels, f, res, res), 0.0, cfg.noise_sigma)
    for t, canvas in enumerate(canvas_per_frame):
        video[:, t] = canvas
    np.clip(video + noise, 0.0, 1.0, out=video)
    return video


def _shape_mask(kind: str, size: int) -> np.ndarray:
    m = np.zeros((size, size), dtype=bool)
    if kind == "square":
        m[:, :] = True
    elif kind == "disc":
        r = size / 2.0
        yy, xx = np.mgrid[0:size, 0:size]
        m = (yy + 0.5 - r) ** 2 + (xx + 0.5 - r) ** 2 <= r * r
    elif kind == "bar":
        third = max(size // 3, 1)
        lo = (size - third) // 2
        m[lo : lo + third, :] = True
    elif kind == "cross":
        third = max(size // 3, 1)
        lo = (size - third) // 2
        m[lo : lo + third, :] = True
        m[:, lo : lo + third] = True
    else:
        raise ArgumentError(f"unknown shape {kind!r}")
    return m


def _motion_video(cfg: SynthConfig, label: int, rng: Rng) -> np.ndarray:
    bg = _background(rng.derive("bg"), cfg)
    size, speed, f = cfg.object_size, cfg.speed, cfg.frames_total
    res = cfg.resolution
    direction = MOTION_CLASSES[label]
    pos_rng = rng.derive("pos")
    u = pos_rng.randint(0, cfg.travel_range() + 1)
    static = _trapezoid_position(pos_rng, cfg)
    frames = []
    for t in range(f):
        canvas = bg.copy()
        if direction == "right":
            x, y = u + speed * t, static
        elif direction == "left":
            x, y = res - size - u - speed * t, static
        elif direction == "down":
            x, y = static, u + speed * t
        else:  # up
            x, y = static, res - size - u - speed * t
        canvas[y : y + size, x : x + size] = 0.85
        frames.append(canvas)
    return _render_video(frames, cfg, rng)


def _appearance_video(cfg: SynthConfig, label: int, rng: Rng) -> np.ndarray:
    # Shapes sit at the frame center: the task must stay solvable by a
    # single-frame linear probe, which cannot localize.
    bg = _background(rng.derive("bg"), cfg)
    size = cfg.object_size
    res = cfg.resolution
    x = y = (res - size) // 2
    mask = _shape_mask(APPEARANCE_CLASSES[label], size)
    canvas = bg.copy()
    region = canvas[y : y + size, x : x + size]
    region[mask] = 0.85
    frames = [canvas] * cfg.frames_total
    return _render_video(frames, cfg, rng)


def _generate(cfg: SynthConfig, out_dir, make_video):
    out_dir = Path(out_dir)
    (out_dir / "videos").mkdir(parents=True, exist_ok=True)
    n_val = max(1, int(round(cfg.samples_per_class * cfg.val_fraction)))
    n_train = cfg.samples_per_class - n_val
    if n_train < 1:
        raise ConfigError("val_fraction leaves no training samples")
    manifests = {}
    sum_channels = np.zeros(cfg.channels)
    count_train_px = 0
    for split, count in (("train", n_train), ("val", n_val)):
        entries = []
        for label in range(cfg.num_class):
            for idx in range(count):
                rng = Rng(cfg.seed).derive(split, label, idx)
                video = make_video(cfg, label, rng)
                rel = f"videos/{split}_{label}_{idx:04d}.bin"
                write_tensor(out_dir / rel, video)
                entries.append(ManifestEntry(rel, label, cfg.frames_total))
                if split == "train":
                    sum_channels += video.sum(axis=(1, 2, 3))
                    count_train_px += video[0].size
        manifests[split] = entries
    means = sum_channels / max(count_train_px, 1)
    result = {}
    for split, entries in manifests.items():
        manifest = DatasetManifest(split=split, entries=entries, meta=cfg.to_dict(),
                                   channel_means=means)
        write_manifest(out_dir / f"{split}.txt", manifest)
        result[split] = manifest
    return result["train"], result["val"]


def gen_motion_dataset(cfg: SynthConfig, out_dir):
    """Generate the direction-classification task. Returns (train, val) manifests."""
    if cfg.task != "motion":
        raise ConfigError(f"config task is {cfg.task!r}, expected 'motion'")
    return _generate(cfg, out_dir, _motion_video)


def gen_appearance_dataset(cfg: SynthConfig, out_dir):
    """Generate the static-shape task. Returns (train, val) manifests."""
    if cfg.task != "appearance":
        raise ConfigError(f"config task is {cfg.task!r}, expected 'appearance'")
    return _generate(cfg, out_dir, _appearance_video)


def gen_dataset(cfg: SynthConfig, out_dir):
    if cfg.task == "motion":
        return gen_motion_dataset(cfg, out_dir)
    return gen_appearance_dataset(cfg, out_dir)


def write_manifest(path, manifest: DatasetManifest) -> None:
    lines = [f"# split = {manifest.split}"]
    for key, value in manifest.meta.items():
        lines.append(f"# {key} = {value}")
    if manifest.channel_means is not None:
        means = ",".join(f"{m:.8f}" for m in manifest.channel_means)
        lines.append(f"# channel_means = {means}")
    for e in manifest.entries:
        lines.append(f"{e.relpath}\t{e.label}\t{e.frames}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest; every referenced file must exist."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"manifest not found: {path}")
    root = path.parent
    meta = {}
    split = "unknown"
    channel_means = None
    entries = []
    num_class = None
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            key, value = key.strip(), value.strip()
            if key == "split":
                split = value
            elif key == "channel_means":
                channel_means = np.array([float(v) for v in value.split(",")])
            else:
                meta[key] = value
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataFormatError(f"{path}:{lineno}: expected 'relpath<TAB>label<TAB>frames'")
        rel, label, frames = parts[0], int(parts[1]), int(parts[2])
        if not (root / rel).exists():
            raise MissingFileError(f"{path}:{lineno}: referenced file missing: {root / rel}")
        entries.append(ManifestEntry(rel, label, frames))
    if "num_class" in meta:
        num_class = int(meta["num_class"])
        for e in entries:
            if e.label < 0 or e.label >= num_class:
                raise DataFormatError(f"{path}: label {e.label} out of range [0, {num_class})")
    return DatasetManifest(split=split, entries=entries, meta=meta, channel_means=channel_means)


write_video = write_tensor


class LoadedDataset:
    """Dataset held in memory: float32 videos, labels, normalization stats."""

    def __init__(self, videos, labels, channel_means, num_class, frames_total):
        self.videos = videos
        self.labels = np.asarray(labels, dtype=np.int64)
        self.channel_means = np.asarray(channel_means, dtype=np.float64)
        self.num_class = num_class
        self.frames_total = frames_total

    def __len__(self):
        return len(self.videos)

    @classmethod
    def from_manifest(cls, manifest_path) -> "LoadedDataset":
        manifest = load_manifest(manifest_path)
        root = Path(manifest_path).parent
        videos = []
        labels = []
        for e in manifest.entries:
            arr = read_tensor(root / e.relpath).astype(np.float32)
            videos.append(arr)
            labels.append(e.label)
        if manifest.channel_means is None:
            raise DataFormatError(f"{manifest_path}: manifest lacks channel_means header")
        num_class = int(manifest.meta.get("num_class", max(labels) + 1))
        frames_total = int(manifest.meta.get("frames_total", videos[0].shape[1]))
        return cls(videos, labels, manifest.channel_means, num_class, frames_total)


def tsn_sample(video: np.ndarray, t_segments: int, mode: str, seed: int) -> np.ndarray:
    """Pick one frame per equal-duration segment.

    Segment s covers frames [floor(s*F/T), floor((s+1)*F/T)). Training mode
    draws uniformly inside each segment (seeded); test mode takes the
    segment midpoint floor((lo+hi)/2).
    """
    if mode not in ("train", "test"):
        raise ArgumentError(f"mode must be 'train' or 'test', got {mode!r}")
    c, f = video.shape[0], video.shape[1]
    if f < t_segments:
        raise ArgumentError(f"video has {f} frames, needs >= {t_segments}")
    rng = Rng(seed)
    picks = []
    for s in range(t_segments):
        lo = (s * f) // t_segments
        hi = ((s + 1) * f) // t_segments
        if mode == "train":
            picks.append(lo + rng.randint(0, hi - lo))
        else:
            picks.append((lo + hi) // 2)
    return np.ascontiguousarray(video[:, picks])
