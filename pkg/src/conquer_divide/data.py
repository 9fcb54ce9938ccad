"""Deterministic multi-source, multi-label synthetic image/text datasets.

Each sample is a tuple (image, ternary labels, source id, token sequence).
Class evidence is a geometric pattern rendered at a class-specific grid cell;
source identity shows up as a global style transform (brightness, contrast,
low-frequency amplitude tilt, noise) and as a restricted label space.  Every
sample is a pure function of (config, seed, source, split, index) through a
counter-based random stream, so regeneration is order-independent.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import (
    NO_FINDING_TOKEN,
    SEP_TOKEN,
    ConfigError,
    DatasetConfig,
    SourceProfile,
    SourceStyle,
    filler_tokens,
)

MAGIC = b"CDX1"

BACKGROUND_LEVEL = 0.25
BACKGROUND_WAVES = 2
BACKGROUND_WAVE_AMPLITUDE = 0.04
PATTERN_AMPLITUDE = 0.45
PATTERN_JITTER = 1.0
PATTERN_BORDER_MARGIN = 5.0  # keeps pattern support clear of conv padding effects
CELL = 8
STYLE_TILT_BAND = 0.25

SPLIT_CODES = {"train": 0, "val": 1, "test": 2}

PATTERN_FAMILIES = ("disk", "bar", "cross", "blob")
# Inclusive half-extents (ey, ex) of each family's support around its center.
PATTERN_EXTENTS = {"disk": (4.0, 4.0), "bar": (3.0, 4.0), "cross": (4.0, 4.0), "blob": (4.0, 4.0)}


def sample_rng(seed: int, source_id: int, split: str, index: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, source, split, index)."""
    packed = (np.uint64(source_id) << np.uint64(40)) | (np.uint64(SPLIT_CODES[split]) << np.uint64(32)) | np.uint64(index)
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), packed], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _low_band_mask(shape: tuple[int, int], band: float) -> np.ndarray:
    """Boolean mask of the centered low-frequency square covering `band` of each axis."""
    h, w = shape
    half_y = int(band * h / 2)
    half_x = int(band * w / 2)
    fy = np.minimum(np.arange(h), h - np.arange(h))
    fx = np.minimum(np.arange(w), w - np.arange(w))
    return (fy[:, None] <= half_y) & (fx[None, :] <= half_x)


def scale_low_band_amplitude(image: np.ndarray, factor: float, band: float) -> np.ndarray:
    spectrum = np.fft.fft2(image.astype(np.float64))
    amp = np.abs(spectrum)
    phase = np.angle(spectrum)
    mask = _low_band_mask(image.shape, band)
    amp = np.where(mask, amp * factor, amp)
    return np.real(np.fft.ifft2(amp * np.exp(1j * phase)))


def apply_source_style(image: np.ndarray, style: SourceStyle, noise: np.ndarray | None = None) -> np.ndarray:
    """Brightness/contrast shift plus low-frequency amplitude tilt and optional noise, clipped to [0, 1]."""
    if style.contrast_scale <= 0:
        raise ValueError(f"contrast_scale must be > 0, got {style.contrast_scale}")
    img = np.asarray(image, dtype=np.float64)
    if img.min() < -1e-9 or img.max() > 1 + 1e-9:
        raise ValueError("image values must lie in [0, 1]")
    out = style.contrast_scale * (img - 0.5) + 0.5 + style.brightness_shift
    if style.amplitude_tilt != 0.0:
        out = out + (scale_low_band_amplitude(img, 1.0 + style.amplitude_tilt, STYLE_TILT_BAND) - img)
    if noise is not None and style.noise_sigma > 0.0:
        if noise.shape != img.shape:
            raise ValueError(f"noise shape {noise.shape} does not match image shape {img.shape}")
        out = out + style.noise_sigma * noise
    return np.clip(out, 0.0, 1.0).astype(image.dtype if np.issubdtype(np.asarray(image).dtype, np.floating) else np.float64)


def fourier_amplitude_mixup(x_i: np.ndarray, x_j: np.ndarray, alpha: float, band: float = 0.1) -> np.ndarray:
    """Blend the low-band amplitude spectra of two images while keeping x_i's phase."""
    if x_i.shape != x_j.shape:
        raise ValueError(f"shape mismatch: {x_i.shape} vs {x_j.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if not 0.0 < band <= 1.0:
        raise ValueError(f"band must be in (0, 1], got {band}")
    spec_i = np.fft.fft2(np.asarray(x_i, dtype=np.float64))
    spec_j = np.fft.fft2(np.asarray(x_j, dtype=np.float64))
    amp_i = np.abs(spec_i)
    amp_j = np.abs(spec_j)
    phase_i = np.angle(spec_i)
    mask = _low_band_mask(x_i.shape, band)
    amp = np.where(mask, (1.0 - alpha) * amp_i + alpha * amp_j, amp_i)
    out = np.real(np.fft.ifft2(amp * np.exp(1j * phase_i)))
    out = np.clip(out, 0.0, 1.0)
    dtype = np.asarray(x_i).dtype
    return out.astype(dtype) if np.issubdtype(dtype, np.floating) else out


CANONICAL_CELL_LIMIT = 9


def class_cell(class_index: int, height: int, width: int) -> tuple[int, int]:
    """Grid cell assigned to a class (row, col) on the height//8 x width//8 grid.

    Only the first CANONICAL_CELL_LIMIT cells are used, so class indices wrap
    and distant classes share a canonical cell.  A source whose label space
    contains just one class of such a pair can rely on cell activity alone,
    while sources observing both must read the pattern shape; that collision
    is a deliberate driver of inter-source heterogeneity.
    """
    rows, cols = height // CELL, width // CELL
    idx = class_index % min(CANONICAL_CELL_LIMIT, rows * cols)
    return idx // cols, idx % cols


def pattern_family(class_index: int) -> str:
    return PATTERN_FAMILIES[class_index % len(PATTERN_FAMILIES)]


def _pattern_mask(family: str, height: int, width: int, cy: float, cx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dy = yy - cy
    dx = xx - cx
    if family == "disk":
        return np.clip(3.7 - np.hypot(dy, dx), 0.0, 1.0)
    if family == "bar":
        return np.clip(2.7 - np.abs(dy), 0.0, 1.0) * np.clip(3.7 - np.abs(dx), 0.0, 1.0)
    if family == "cross":
        horiz = np.clip(1.6 - np.abs(dy), 0.0, 1.0) * np.clip(3.7 - np.abs(dx), 0.0, 1.0)
        vert = np.clip(1.6 - np.abs(dx), 0.0, 1.0) * np.clip(3.7 - np.abs(dy), 0.0, 1.0)
        return np.maximum(horiz, vert)
    if family == "blob":
        return np.exp(-(dy**2 + dx**2) / (2.0 * 1.9**2))
    raise ValueError(f"unknown pattern family {family!r}")


@dataclass
class Placement:
    class_index: int
    center: tuple[float, float]
    bbox: tuple[int, int, int, int]  # y0, y1, x0, x1 inclusive


def _placement_for(class_index: int, cy: float, cx: float, height: int, width: int) -> Placement:
    ey, ex = PATTERN_EXTENTS[pattern_family(class_index)]
    y0 = max(0, int(np.floor(cy - ey)))
    y1 = min(height - 1, int(np.ceil(cy + ey)))
    x0 = max(0, int(np.floor(cx - ex)))
    x1 = min(width - 1, int(np.ceil(cx + ex)))
    return Placement(class_index=class_index, center=(cy, cx), bbox=(y0, y1, x0, x1))


@dataclass
class Sample:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    labels: np.ndarray  # (c,) uint8; 0=negative, 1=positive, 2=unobserved
    source_id: int
    tokens: list[int]


LABEL_NEGATIVE = 0
LABEL_POSITIVE = 1
LABEL_UNOBSERVED = 2


def make_text(
    positives: list[int],
    source: SourceProfile,
    class_names: list[list[int]],
    vocab_size: int,
    mode: str,
) -> list[int]:
    """Token sequence for a sample: class names joined by SEP, with per-source filler in report mode."""
    if mode not in ("report", "label_concat"):
        raise ValueError(f"mode must be 'report' or 'label_concat', got {mode!r}")
    if mode == "report" and not source.has_reports:
        raise ValueError(f"source {source.source_id} has no reports")
    if not positives:
        return [NO_FINDING_TOKEN]
    parts = [list(class_names[j]) for j in sorted(positives)]
    if mode == "report":
        pool = filler_tokens(source.source_id, vocab_size)
        with_filler = []
        for i, part in enumerate(parts):
            with_filler.append(part)
            with_filler.append([pool[i % len(pool)]])
        parts = with_filler
    tokens: list[int] = []
    for i, part in enumerate(parts):
        if i:
            tokens.append(SEP_TOKEN)
        tokens.extend(part)
    return tokens


def _draw_layout(rng: np.random.Generator, source: SourceProfile, cfg: DatasetConfig):
    """Labels, background-wave parameters, and pattern placements, in fixed draw order."""
    labels = np.full(cfg.num_classes, LABEL_UNOBSERVED, dtype=np.uint8)
    for j in sorted(source.class_subset):
        labels[j] = LABEL_POSITIVE if rng.random() < source.prevalence[j] else LABEL_NEGATIVE
    waves = [(rng.uniform(0.5, 2.5), rng.uniform(0.0, 2 * np.pi), rng.uniform(0.0, 2 * np.pi))
             for _ in range(BACKGROUND_WAVES)]
    placements = {}
    for j in np.flatnonzero(labels == LABEL_POSITIVE):
        row, col = class_cell(int(j), cfg.height, cfg.width)
        jy = rng.uniform(-PATTERN_JITTER, PATTERN_JITTER)
        jx = rng.uniform(-PATTERN_JITTER, PATTERN_JITTER)
        cy = _clamp_center(row * CELL + (CELL - 1) / 2.0, cfg.height) + jy
        cx = _clamp_center(col * CELL + (CELL - 1) / 2.0, cfg.width) + jx
        placements[int(j)] = _placement_for(int(j), cy, cx, cfg.height, cfg.width)
    return labels, waves, placements


def _clamp_center(value: float, size: int) -> float:
    return min(max(value, PATTERN_BORDER_MARGIN), size - 1 - PATTERN_BORDER_MARGIN)


def _render_base(cfg: DatasetConfig, waves, placements) -> np.ndarray:
    yy, xx = np.mgrid[0 : cfg.height, 0 : cfg.width].astype(np.float64)
    base = np.full((cfg.height, cfg.width), BACKGROUND_LEVEL, dtype=np.float64)
    for cycles, theta, phase in waves:
        proj = (yy * np.cos(theta) + xx * np.sin(theta)) / cfg.height
        base = base + BACKGROUND_WAVE_AMPLITUDE * np.cos(2 * np.pi * cycles * proj + phase)
    for placement in placements.values():
        cy, cx = placement.center
        base = base + PATTERN_AMPLITUDE * _pattern_mask(
            pattern_family(placement.class_index), cfg.height, cfg.width, cy, cx
        )
    return np.clip(base, 0.0, 1.0)


def _text_mode_for(cfg: DatasetConfig, source: SourceProfile) -> str:
    if cfg.text_mode == "label_concat":
        return "label_concat"
    return "report" if source.has_reports else "label_concat"


def generate_sample(cfg: DatasetConfig, seed: int, source: SourceProfile, split: str, index: int) -> Sample:
    rng = sample_rng(seed, source.source_id, split, index)
    labels, waves, placements = _draw_layout(rng, source, cfg)
    base = _render_base(cfg, waves, placements)
    noise = rng.standard_normal((cfg.height, cfg.width))
    image = apply_source_style(base, source.style, noise=noise).astype(np.float32)
    positives = [int(j) for j in np.flatnonzero(labels == LABEL_POSITIVE)]
    tokens = make_text(positives, source, cfg.resolved_class_names(), cfg.vocab_size, _text_mode_for(cfg, source))
    return Sample(image=image, labels=labels, source_id=source.source_id, tokens=tokens)


def sample_placements(cfg: DatasetConfig, seed: int, source: SourceProfile, split: str, index: int) -> dict[int, Placement]:
    """Recompute pattern placements for a sample without rendering it."""
    rng = sample_rng(seed, source.source_id, split, index)
    _, _, placements = _draw_layout(rng, source, cfg)
    return placements


class SynthDataset:
    """Generated samples grouped by split, each split ordered by (source, index)."""

    def __init__(self, config: DatasetConfig, seed: int, splits: dict[str, list[Sample]]):
        self.config = config
        self.seed = seed
        self.splits = splits

    @property
    def class_names(self) -> list[list[int]]:
        return self.config.resolved_class_names()

    def samples(self, split: str) -> list[Sample]:
        return self.splits[split]

    def source_by_id(self, source_id: int) -> SourceProfile:
        for source in self.config.sources:
            if source.source_id == source_id:
                return source
        raise KeyError(f"unknown source_id {source_id}")

    def locate(self, split: str, source_id: int, index: int) -> tuple[Sample, int]:
        """Sample plus its position within the split, addressed as (split, source, index)."""
        if split not in SPLIT_CODES:
            raise KeyError(f"unknown split {split!r}")
        position = 0
        for si, source in enumerate(self.config.sources):
            count = self.config.split_sizes[split][si]
            if source.source_id == source_id:
                if not 0 <= index < count:
                    raise KeyError(f"index {index} out of range for source {source_id} in {split}")
                return self.splits[split][position + index], position + index
            position += count
        raise KeyError(f"unknown source_id {source_id}")

    def arrays(self, split: str):
        """Stacked numpy views for model consumption: images, labels, source ids, tokens."""
        samples = self.splits[split]
        cfg = self.config
        images = np.stack([s.image for s in samples]) if samples else np.zeros((0, cfg.height, cfg.width), np.float32)
        labels = np.stack([s.labels for s in samples]) if samples else np.zeros((0, cfg.num_classes), np.uint8)
        source_ids = np.array([s.source_id for s in samples], dtype=np.int64)
        tokens = [s.tokens for s in samples]
        return images, labels, source_ids, tokens

    def manifest(self, offsets: dict[str, list[int]] | None = None) -> dict:
        cfg = self.config
        return {
            "seed": self.seed,
            "num_classes": cfg.num_classes,
            "height": cfg.height,
            "width": cfg.width,
            "vocab_size": cfg.vocab_size,
            "text_mode": cfg.text_mode,
            "class_names": self.class_names,
            "sources": [
                {
                    "source_id": s.source_id,
                    "class_subset": list(s.class_subset),
                    "prevalence": list(s.prevalence),
                    "style": {
                        "brightness_shift": s.style.brightness_shift,
                        "contrast_scale": s.style.contrast_scale,
                        "amplitude_tilt": s.style.amplitude_tilt,
                        "noise_sigma": s.style.noise_sigma,
                    },
                    "has_reports": s.has_reports,
                }
                for s in cfg.sources
            ],
            "split_sizes": cfg.split_sizes,
            "offsets": offsets or {},
        }

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        offsets: dict[str, list[int]] = {}
        with open(out / "samples.bin", "wb") as fh:
            fh.write(MAGIC)
            for split in DatasetConfig.SPLITS:
                offsets[split] = []
                position = 0
                for si, _ in enumerate(self.config.sources):
                    offsets[split].append(fh.tell())
                    count = self.config.split_sizes[split][si]
                    for sample in self.splits[split][position : position + count]:
                        _write_record(fh, sample)
                    position += count
        manifest = self.manifest(offsets)
        with open(out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=2)
            fh.write("\n")

    @staticmethod
    def load(in_dir: str | Path) -> "SynthDataset":
        path = Path(in_dir)
        with open(path / "manifest.json", encoding="utf-8") as fh:
            manifest = json.load(fh)
        cfg = DatasetConfig.from_dict(
            {
                "sources": manifest["sources"],
                "split_sizes": manifest["split_sizes"],
                "height": manifest["height"],
                "width": manifest["width"],
                "num_classes": manifest["num_classes"],
                "vocab_size": manifest["vocab_size"],
                "class_names": manifest["class_names"],
                "text_mode": manifest["text_mode"],
            }
        )
        splits: dict[str, list[Sample]] = {}
        with open(path / "samples.bin", "rb") as fh:
            if fh.read(4) != MAGIC:
                raise ValueError("samples.bin: bad magic")
            for split in DatasetConfig.SPLITS:
                samples = []
                for si, _ in enumerate(cfg.sources):
                    for _ in range(cfg.split_sizes[split][si]):
                        samples.append(_read_record(fh))
                splits[split] = samples
        return SynthDataset(config=cfg, seed=int(manifest["seed"]), splits=splits)


def _write_record(fh, sample: Sample) -> None:
    h, w = sample.image.shape
    fh.write(struct.pack("<III", sample.source_id, h, w))
    fh.write(sample.image.astype("<f4").tobytes())
    fh.write(struct.pack("<I", len(sample.labels)))
    fh.write(bytes(sample.labels.tolist()))
    fh.write(struct.pack("<I", len(sample.tokens)))
    fh.write(struct.pack(f"<{len(sample.tokens)}I", *sample.tokens))


def _read_record(fh) -> Sample:
    source_id, h, w = struct.unpack("<III", fh.read(12))
    image = np.frombuffer(fh.read(4 * h * w), dtype="<f4").reshape(h, w).copy()
    (c,) = struct.unpack("<I", fh.read(4))
    labels = np.frombuffer(fh.read(c), dtype=np.uint8).copy()
    (ntok,) = struct.unpack("<I", fh.read(4))
    tokens = list(struct.unpack(f"<{ntok}I", fh.read(4 * ntok)))
    return Sample(image=image, labels=labels, source_id=source_id, tokens=[int(t) for t in tokens])


def generate_dataset(config: DatasetConfig, seed: int) -> SynthDataset:
    """Generate every split of every source; pure in (config, seed)."""
    config.validate()
    splits: dict[str, list[Sample]] = {}
    for split in DatasetConfig.SPLITS:
        samples: list[Sample] = []
        for si, source in enumerate(config.sources):
            count = config.split_sizes[split][si]
            for index in range(count):
                samples.append(generate_sample(config, seed, source, split, index))
        splits[split] = samples
    return SynthDataset(config=config, seed=seed, splits=splits)


def prevalence_table(dataset: SynthDataset, split: str = "train") -> dict[int, list[float]]:
    """Empirical per-source positive rates; unobserved classes reported as NaN."""
    table: dict[int, list[float]] = {}
    cfg = dataset.config
    for si, source in enumerate(cfg.sources):
        rows = [s.labels for s in dataset.splits[split] if s.source_id == source.source_id]
        if not rows:
            table[source.source_id] = [float("nan")] * cfg.num_classes
            continue
        arr = np.stack(rows)
        rates = []
        for j in range(cfg.num_classes):
            observed = arr[:, j] != LABEL_UNOBSERVED
            rates.append(float((arr[observed, j] == LABEL_POSITIVE).mean()) if observed.any() else float("nan"))
        table[source.source_id] = rates
    return table
