"""Datasets in the public IRSTD layout (``images/`` + ``masks/``) and a
synthetic small-target generator for desk-scale experiments."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, LoadError

IMAGE_SUFFIXES = {".png", ".bmp", ".pgm", ".pbm", ".jpg", ".jpeg", ".tif", ".tiff"}
MASK_THRESHOLD = 127
AREA_CAP = 0.0015
MAX_PEAK = 0.5
BACKGROUNDS = ("flat", "smoothed-noise", "gradient")
MANIFEST = "manifest.json"


@dataclass
class SegmentationSample:
    id: str
    image: np.ndarray  # (H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    orig_shape: tuple[int, int] | None = None

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(
                f"sample {self.id!r}: image shape {self.image.shape} != mask shape {self.mask.shape}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.image.shape)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _read_gray(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except OSError as e:
        raise LoadError(f"cannot read image {path}: {e}") from None


def _list_images(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise LoadError(f"missing directory: {directory}")
    files = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES:
            files.setdefault(p.stem, p)
    return files


def load_samples(root: str | Path) -> list[SegmentationSample]:
    """Every image under ``root/images`` paired with the same-stem file in ``root/masks``."""
    root = Path(root)
    images = _list_images(root / "images")
    if not images:
        raise LoadError(f"no images found in {root / 'images'}")
    masks = _list_images(root / "masks")
    samples = []
    for stem, path in images.items():
        if stem not in masks:
            raise LoadError(f"no mask for image {path.name} (expected {root / 'masks' / stem}.*)")
        img = _read_gray(path)
        msk = _read_gray(masks[stem])
        if img.shape != msk.shape:
            raise LoadError(f"{path.name}: image {img.shape} and mask {msk.shape} differ in size")
        samples.append(
            SegmentationSample(
                id=stem,
                image=img.astype(np.float32) / 255.0,
                mask=(msk > MASK_THRESHOLD).astype(np.uint8),
            )
        )
    return samples


def split_samples(
    samples: Sequence[SegmentationSample], split_ratio: float = 0.7, seed: int = 0
) -> tuple[list[SegmentationSample], list[SegmentationSample]]:
    """Seeded shuffle, then the first ``floor(n * split_ratio)`` samples train."""
    if not 0.0 <= split_ratio <= 1.0:
        raise ValueError(f"split_ratio must be in [0, 1], got {split_ratio}")
    ordered = sorted(samples, key=lambda s: s.id)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    n_train = math.floor(len(ordered) * split_ratio + 1e-9)
    shuffled = [ordered[i] for i in perm]
    return shuffled[:n_train], shuffled[n_train:]


def load_dataset(
    root: str | Path, split_ratio: float = 0.7, seed: int = 0
) -> tuple[list[SegmentationSample], list[SegmentationSample]]:
    return split_samples(load_samples(root), split_ratio, seed)


def write_split(directory: str | Path, train, test) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, part in (("train.txt", train), ("test.txt", test)):
        (directory / name).write_text("".join(f"{s.id}\n" for s in part))


# ---------------------------------------------------------------------------
# padding
# ---------------------------------------------------------------------------

def pad_to_multiple(sample: SegmentationSample, multiple: int) -> SegmentationSample:
    """Zero-pad bottom/right so both sides are multiples of ``multiple``."""
    if multiple < 1:
        raise ValueError(f"multiple must be >= 1, got {multiple}")
    h, w = sample.shape
    ph = -h % multiple
    pw = -w % multiple
    orig = sample.orig_shape or (h, w)
    if ph == 0 and pw == 0:
        return dataclasses.replace(sample, orig_shape=orig)
    pad = ((0, ph), (0, pw))
    return SegmentationSample(
        id=sample.id,
        image=np.pad(sample.image, pad),
        mask=np.pad(sample.mask, pad),
        orig_shape=orig,
    )


def crop_to(array: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Undo :func:`pad_to_multiple` on any array whose last two axes are (H, W)."""
    h, w = shape
    return array[..., :h, :w]


def unpad(sample: SegmentationSample) -> SegmentationSample:
    if sample.orig_shape is None:
        return sample
    return SegmentationSample(
        id=sample.id,
        image=crop_to(sample.image, sample.orig_shape),
        mask=crop_to(sample.mask, sample.orig_shape),
    )


def random_flip(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator):
    """Optional augmentation: independent horizontal/vertical flips."""
    if rng.random() < 0.5:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if rng.random() < 0.5:
        image, mask = image[::-1], mask[::-1]
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    n_images: int = 20
    size: tuple[int, int] = (64, 64)
    targets_per_image: tuple[int, int] = (1, 3)
    target_sigma_px: tuple[float, float] = (0.5, 0.8)
    target_peak: tuple[float, float] = (0.25, 0.45)
    background: str = "smoothed-noise"
    background_level: float = 0.2
    noise_std: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.size = tuple(int(v) for v in self.size)
        self.targets_per_image = tuple(int(v) for v in self.targets_per_image)
        self.target_sigma_px = tuple(float(v) for v in self.target_sigma_px)
        self.target_peak = tuple(float(v) for v in self.target_peak)

    def validate(self) -> None:
        if self.n_images < 1:
            raise ConfigError(f"synth.n_images must be positive, got {self.n_images}")
        if len(self.size) != 2 or min(self.size) < 1:
            raise ConfigError(f"synth.size must be (H, W) with positive sides, got {self.size}")
        for name in ("targets_per_image", "target_sigma_px", "target_peak"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"synth.{name} range is reversed: {(lo, hi)}")
        if self.targets_per_image[0] < 0:
            raise ConfigError("synth.targets_per_image must be non-negative")
        if self.target_sigma_px[0] <= 0:
            raise ConfigError("synth.target_sigma_px must be positive")
        if self.target_peak[0] <= 0 or self.target_peak[1] >= MAX_PEAK:
            raise ConfigError(
                f"synth.target_peak must lie in (0, {MAX_PEAK}) to stay low-contrast, got {self.target_peak}"
            )
        if self.background not in BACKGROUNDS:
            raise ConfigError(f"synth.background must be one of {BACKGROUNDS}, got {self.background!r}")
        if self.noise_std < 0:
            raise ConfigError("synth.noise_std must be non-negative")
        h, w = self.size
        worst = self.targets_per_image[1] * target_area(self.target_sigma_px[1])
        cap = AREA_CAP * h * w
        if worst >= cap:
            raise ConfigError(
                f"synth.targets_per_image / synth.target_sigma_px: up to {self.targets_per_image[1]} targets of {target_area(self.target_sigma_px[1])} px "
                f"can cover {worst} px, not below the {AREA_CAP:.2%} cap of {cap:.2f} px for a {h}x{w} image"
            )
        if 2 * _margin(self.target_sigma_px[1]) >= min(h, w):
            raise ConfigError(f"synth.size {self.size} too small for sigma {self.target_sigma_px[1]}")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SynthConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


def target_area(sigma: float) -> int:
    """Mask pixels of one pixel-centred target: lattice points with ``r**2 < 2 ln2 sigma**2``."""
    r2 = 2.0 * math.log(2.0) * sigma * sigma
    n = int(math.ceil(math.sqrt(r2)))
    i, j = np.mgrid[-n : n + 1, -n : n + 1]
    return int(np.count_nonzero(i * i + j * j < r2))


def _margin(sigma: float) -> int:
    return int(math.ceil(3 * sigma)) + 1


def _background(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.size
    bg = np.full((h, w), cfg.background_level, dtype=np.float64)
    if cfg.background == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        ramp = np.cos(theta) * xx / max(w - 1, 1) + np.sin(theta) * yy / max(h - 1, 1)
        bg += 0.2 * (ramp - ramp.mean())
    elif cfg.background == "smoothed-noise":
        field_ = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 8, mode="wrap")
        field_ /= field_.std() + 1e-12
        bg += 0.05 * field_
    return bg


def _place_centres(cfg: SynthConfig, k: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    h, w = cfg.size
    m = _margin(cfg.target_sigma_px[1])
    min_sep = 2 * m + 1
    centres: list[tuple[int, int]] = []
    for _ in range(1000 * max(k, 1)):
        if len(centres) == k:
            break
        c = (int(rng.integers(m, h - m)), int(rng.integers(m, w - m)))
        if all(math.hypot(c[0] - a, c[1] - b) >= min_sep for a, b in centres):
            centres.append(c)
    return centres


def synth_sample(cfg: SynthConfig, index: int, rng: np.random.Generator) -> SegmentationSample:
    h, w = cfg.size
    image = _background(cfg, rng)
    mask = np.zeros((h, w), dtype=bool)
    k = int(rng.integers(cfg.targets_per_image[0], cfg.targets_per_image[1] + 1))
    yy, xx = np.mgrid[0:h, 0:w]
    for cy, cx in _place_centres(cfg, k, rng):
        sigma = rng.uniform(*cfg.target_sigma_px)
        peak = rng.uniform(*cfg.target_peak)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        blob = peak * np.exp(-d2 / (2 * sigma * sigma))
        image += blob
        mask |= blob > peak / 2
    if cfg.noise_std > 0:
        image += rng.normal(0.0, cfg.noise_std, size=(h, w))
    return SegmentationSample(
        id=f"synth_{index:05d}",
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        mask=mask.astype(np.uint8),
    )


def synth_generate(cfg: SynthConfig) -> list[SegmentationSample]:
    """Gaussian point targets on a low-contrast background, deterministic in ``cfg.seed``.

    Target centres sit on pixel centres; the mask of each target is the set of
    pixels where its noiseless contribution exceeds half its peak.
    """
    cfg.validate()
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_images)
    return [synth_sample(cfg, i, np.random.default_rng(s)) for i, s in enumerate(seeds)]


def write_dataset(
    samples: Sequence[SegmentationSample], root: str | Path, manifest: dict | None = None
) -> Path:
    """Write 8-bit PNGs under ``images/`` and ``masks/`` (mask values 0/255) plus ``manifest.json``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        img = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(img).save(root / "images" / f"{s.id}.png")
        Image.fromarray((s.mask > 0).astype(np.uint8) * 255).save(root / "masks" / f"{s.id}.png")
    body = {"n_images": len(samples), "ids": [s.id for s in samples]}
    body.update(manifest or {})
    (root / MANIFEST).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return root
