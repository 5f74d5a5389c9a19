"""
Synthetic class-imbalanced binary segmentation tasks plus portable image I/O.

Two geometries are available: thin random-walk "vessels" and small elliptical
"blobs". The image is the mask blurred by a Gaussian of width
ambiguity_width, scaled by contrast, with Gaussian noise on top, so pixels
near every boundary are genuinely ambiguous.

Dataset layout on disk:
    <root>/images/NNNN.pgm
    <root>/masks/NNNN.pgm
    <root>/manifest.txt      one line per sample: index split fg_fraction
"""
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.ndimage import gaussian_filter

from autodiff import ShapeError, Tensor, tensor
from errors import ConfigError

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.64, 0.16, 0.20)
BLOB_RADII = (2.0, 6.0)
VESSEL_WIDTHS = (1, 2)


class FormatError(ValueError):
    """A malformed or truncated PGM/PFM/PPM file."""


class GenerationError(RuntimeError):
    """The requested foreground fraction cannot be met with this geometry."""


class SynthKind(str, Enum):
    VESSELS = "vessels"
    BLOBS = "blobs"


@dataclass(frozen=True)
class SynthConfig:
    kind: SynthKind = SynthKind.VESSELS
    size: Tuple[int, int] = (64, 64)
    fg_fraction_target: float = 0.04
    ambiguity_width: float = 1.5
    noise_sigma: float = 0.05
    contrast: float = 1.0
    count: int = 200
    seed: int = 0
    max_retries: int = 50

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", SynthKind(self.kind))
        except ValueError:
            raise ConfigError(f"unknown synth.kind '{self.kind}'")
        object.__setattr__(self, "size", tuple(int(v) for v in self.size))
        if len(self.size) != 2 or min(self.size) < 4:
            raise ConfigError(f"synth.size must be two dims >= 4, got {self.size}")
        if not 0.0 < self.fg_fraction_target < 0.5:
            raise ConfigError(f"synth.fg_fraction_target must lie in (0, 0.5), got {self.fg_fraction_target}")
        if self.ambiguity_width < 0 or self.noise_sigma < 0 or self.contrast <= 0:
            raise ConfigError("synth.ambiguity_width and noise_sigma must be >= 0, contrast > 0")
        if self.count < 1 or self.max_retries < 1:
            raise ConfigError("synth.count and synth.max_retries must be >= 1")


@dataclass
class Sample:
    """image [1,H,W] in [0,1], mask [H,W] in {0,1}, and how they were made."""
    image: Tensor
    mask: Tensor
    meta: Dict[str, object] = field(default_factory=dict)

    @property
    def fg_fraction(self) -> float:
        return float(self.mask.mean())


#=========================================== GEOMETRY ===========================================

def _stamp(mask: np.ndarray, y: float, x: float, width: int) -> int:
    """Marks a width x width square at (y, x); returns how many pixels were new."""
    h, w = mask.shape
    r0, c0 = int(round(y)), int(round(x))
    r1, c1 = min(h, r0 + width), min(w, c0 + width)
    r0, c0 = max(0, r0), max(0, c0)
    patch = mask[r0:r1, c0:c1]
    added = int(patch.size - np.count_nonzero(patch))
    patch[...] = True
    return added


def _vessel_mask(rng: np.random.Generator, cfg: SynthConfig) -> Tuple[np.ndarray, int]:
    h, w = cfg.size
    need = cfg.fg_fraction_target * h * w
    mask = np.zeros((h, w), dtype=bool)
    filled, walks = 0, 0
    while filled < need:
        walks += 1
        y, x = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
        angle = rng.uniform(0.0, 2.0 * math.pi)
        width = int(rng.choice(VESSEL_WIDTHS))
        for _ in range(int(rng.integers(h // 4, h + 1))):
            filled += _stamp(mask, y, x, width)
            if filled >= need:
                break
            angle += rng.normal(0.0, 0.35)
            ny, nx = y + math.sin(angle), x + math.cos(angle)
            if not (0 <= ny <= h - 1 and 0 <= nx <= w - 1):
                angle += math.pi
                ny, nx = min(max(ny, 0.0), h - 1.0), min(max(nx, 0.0), w - 1.0)
            y, x = ny, nx
    return mask, walks


def max_blob_components(cfg: SynthConfig) -> int:
    """Upper bound on blobs per mask: the 1.5x fraction budget filled with the smallest ellipses."""
    h, w = cfg.size
    smallest = math.pi * BLOB_RADII[0] ** 2
    return max(1, math.ceil(1.5 * cfg.fg_fraction_target * h * w / smallest))


def _blob_mask(rng: np.random.Generator, cfg: SynthConfig) -> Tuple[np.ndarray, int]:
    h, w = cfg.size
    need = cfg.fg_fraction_target * h * w
    ceiling = 1.5 * need
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros((h, w), dtype=bool)
    filled, blobs = 0, 0
    for _ in range(cfg.max_retries * max_blob_components(cfg)):
        if filled >= need or blobs >= max_blob_components(cfg):
            break
        ry, rx = rng.uniform(*BLOB_RADII, size=2)
        cy, cx = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
        ellipse = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        added = int(np.count_nonzero(ellipse & ~mask))
        if added == 0 or filled + added > ceiling:
            continue
        mask |= ellipse
        filled += added
        blobs += 1
    return mask, blobs


def _render(mask: np.ndarray, rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    image = mask.astype(np.float64)
    if cfg.ambiguity_width > 0:
        image = gaussian_filter(image, sigma=cfg.ambiguity_width, mode="constant")
    image = cfg.contrast * image
    if cfg.noise_sigma > 0:
        image = image + rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def generate_one(cfg: SynthConfig, index: int) -> Sample:
    """
    Builds sample `index`; its random stream depends only on (cfg.seed, index),
    so samples can be produced in any order or in parallel.
    """
    rng = np.random.default_rng([cfg.seed, index])
    target = cfg.fg_fraction_target
    for attempt in range(cfg.max_retries):
        if cfg.kind == SynthKind.VESSELS:
            mask, components = _vessel_mask(rng, cfg)
        else:
            mask, components = _blob_mask(rng, cfg)
        fraction = float(mask.mean())
        if 0.5 * target <= fraction <= 1.5 * target:
            meta = {
                "kind": cfg.kind.value,
                "index": index,
                "seed": cfg.seed,
                "components": components,
                "attempts": attempt + 1,
                "ambiguity_width": cfg.ambiguity_width,
                "noise_sigma": cfg.noise_sigma,
                "contrast": cfg.contrast,
            }
            image = _render(mask, rng, cfg)
            return Sample(tensor(image[None]), tensor(mask.astype(np.float64)), meta)
    raise GenerationError(
        f"could not reach fg fraction {target} for {cfg.kind.value} on {cfg.size} after {cfg.max_retries} tries"
    )


def generate(cfg: SynthConfig) -> List[Sample]:
    """
    Generates cfg.count samples.

    Parameters:
        cfg (SynthConfig): Geometry, size, target fraction, blur, noise and seed.

    Returns:
        list: Samples in index order; equal configs give bit-identical lists.
    """
    samples = [generate_one(cfg, i) for i in range(cfg.count)]
    fractions = [s.fg_fraction for s in samples]
    logger.info(
        f"generated {len(samples)} {cfg.kind.value} samples, "
        f"fg fraction mean {np.mean(fractions):.4f} (target {cfg.fg_fraction_target})"
    )
    return samples


def split(
    samples: Sequence[Sample],
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 0,
) -> Tuple[List[Sample], List[Sample], List[Sample]]:
    """
    Seeded shuffle then contiguous train/val/test partition.

    The default fractions are an 80/20 development/test split with the
    development part split 80/20 again into train/val.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) <= 0:
        raise ConfigError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(samples)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    if n_train < 1 or n_val < 1 or n - n_train - n_val < 1:
        raise ValueError(f"{n} samples are too few for non-empty splits with fractions {tuple(fractions)}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [samples[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


#=========================================== PORTABLE IMAGES ===========================================

def _parse_header(data: bytes, n_tokens: int) -> Tuple[List[str], int]:
    """Reads n whitespace-separated header tokens (skipping # comments); returns them and the payload offset."""
    tokens: List[str] = []
    pos = 0
    while len(tokens) < n_tokens:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError(f"header ended early at byte offset {pos}")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii", errors="replace"))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(f"missing whitespace after header at byte offset {pos}")
    return tokens, pos + 1


def _parse_dims(tokens: List[str], offset: int) -> Tuple[int, int]:
    try:
        width, height = int(tokens[1]), int(tokens[2])
    except ValueError:
        raise FormatError(f"non-integer dimensions {tokens[1:3]} in header ending at byte offset {offset}")
    if width < 1 or height < 1:
        raise FormatError(f"invalid dimensions {width}x{height} in header ending at byte offset {offset}")
    return width, height


def _payload(data: bytes, offset: int, expected: int) -> bytes:
    if len(data) - offset < expected:
        raise FormatError(f"payload truncated at byte offset {len(data)}: expected {expected} bytes from offset {offset}")
    return data[offset:offset + expected]


def _as_plane(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ShapeError(f"expected an [H,W] or [1,H,W] image, got {arr.shape}")
    return arr


def read_pgm(path: str) -> Tensor:
    """Binary 8-bit PGM (P5) to an [H,W] tensor scaled by maxval into [0,1]."""
    with open(path, "rb") as f:
        data = f.read()
    tokens, offset = _parse_header(data, 4)
    if tokens[0] != "P5":
        raise FormatError(f"expected magic P5 at byte offset 0, got {tokens[0]!r}")
    width, height = _parse_dims(tokens, offset)
    try:
        maxval = int(tokens[3])
    except ValueError:
        raise FormatError(f"non-integer maxval {tokens[3]!r} before byte offset {offset}")
    if not 0 < maxval <= 255:
        raise FormatError(f"only 8-bit PGM is supported, maxval {maxval} before byte offset {offset}")
    raw = np.frombuffer(_payload(data, offset, width * height), dtype=np.uint8)
    return tensor(raw.reshape(height, width) / maxval)


def write_pgm(path: str, image) -> None:
    """[H,W] (or [1,H,W]) values in [0,1] quantised to 8 bits; masks become {0,255}."""
    plane = _as_plane(image)
    height, width = plane.shape
    raw = np.round(np.clip(plane, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(raw.tobytes())


def read_pfm(path: str) -> Tensor:
    """Grayscale PFM ("Pf") to an [H,W] tensor; rows are stored bottom-up."""
    with open(path, "rb") as f:
        data = f.read()
    tokens, offset = _parse_header(data, 4)
    if tokens[0] != "Pf":
        raise FormatError(f"expected magic Pf at byte offset 0, got {tokens[0]!r}")
    width, height = _parse_dims(tokens, offset)
    try:
        scale = float(tokens[3])
    except ValueError:
        raise FormatError(f"non-numeric scale {tokens[3]!r} before byte offset {offset}")
    dtype = "<f4" if scale < 0 else ">f4"
    raw = np.frombuffer(_payload(data, offset, 4 * width * height), dtype=dtype)
    return tensor(np.flipud(raw.reshape(height, width)))


def write_pfm(path: str, values) -> None:
    """
    [H,W] floats as little-endian grayscale PFM (scale -1.0).

    Values are rounded to float32, so reading back is exact only for values
    float32 can represent; float64 maps come back within ~6e-8 relative.
    """
    plane = _as_plane(values)
    height, width = plane.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{width} {height}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(plane).astype("<f4").tobytes())


def write_ppm(path: str, rgb) -> None:
    """[H,W,3] uint8 as binary PPM (P6)."""
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected an [H,W,3] RGB array, got {arr.shape}")
    height, width = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        f.write(arr.astype(np.uint8).tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Binary PPM (P6) to an [H,W,3] uint8 array."""
    with open(path, "rb") as f:
        data = f.read()
    tokens, offset = _parse_header(data, 4)
    if tokens[0] != "P6":
        raise FormatError(f"expected magic P6 at byte offset 0, got {tokens[0]!r}")
    width, height = _parse_dims(tokens, offset)
    raw = np.frombuffer(_payload(data, offset, 3 * width * height), dtype=np.uint8)
    return raw.reshape(height, width, 3).copy()


#=========================================== DATASET DIRECTORIES ===========================================

def write_dataset(root: str, splits: Dict[str, Sequence[Sample]]) -> str:
    """
    Writes images, masks and manifest.txt under root.

    Parameters:
        root (str): Dataset directory (created if missing).
        splits (dict): Split name -> samples.

    Returns:
        str: Path of the manifest.
    """
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    lines = []
    index = 0
    for name in SPLIT_NAMES:
        for sample in splits.get(name, ()):
            write_pgm(os.path.join(root, "images", f"{index:04d}.pgm"), sample.image)
            write_pgm(os.path.join(root, "masks", f"{index:04d}.pgm"), sample.mask)
            lines.append(f"{index:04d} {name} {sample.fg_fraction:.6f}\n")
            index += 1
    manifest = os.path.join(root, "manifest.txt")
    with open(manifest, "w", encoding="utf-8") as f:
        f.writelines(lines)
    logger.info(f"wrote {index} samples to {root}")
    return manifest


def read_dataset(root: str) -> Dict[str, List[Sample]]:
    """Loads a directory written by write_dataset (or converted real data in the same layout)."""
    manifest = os.path.join(root, "manifest.txt")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no manifest.txt in {root}")
    table = pd.read_csv(
        manifest, sep=r"\s+", header=None, names=["index", "split", "fg_fraction"], dtype={"index": str}
    )
    splits: Dict[str, List[Sample]] = {name: [] for name in SPLIT_NAMES}
    for row in table.itertuples(index=False):
        if row.split not in splits:
            raise FormatError(f"unknown split '{row.split}' in {manifest}")
        image = read_pgm(os.path.join(root, "images", f"{row.index}.pgm"))
        mask = read_pgm(os.path.join(root, "masks", f"{row.index}.pgm"))
        sample = Sample(tensor(image[None]), tensor((mask >= 0.5).astype(np.float64)), {"index": int(row.index)})
        splits[row.split].append(sample)
    return splits
