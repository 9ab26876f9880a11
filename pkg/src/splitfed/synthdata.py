"""Synthetic multi-centre segmentation data with controllable domain shift.

Each centre renders grayscale images of bright elliptical lesions (the mask)
over a background with an illumination ramp, bright elongated bars that are
*not* part of the mask, and Gaussian sensor noise. Centres differ in
background level, contrast, noise and shape statistics.

Every sample is drawn from its own RNG stream keyed by
``(seed, domain_id, split, index)``, so any single sample can be regenerated
without replaying the others.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, UnsupportedVersionError, ValidationError
from .wire import ProtocolError, decode_tensor, encode_tensor

MAX_FOREGROUND = 0.6


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    background_level: float = 0.25
    contrast: float = 1.0
    noise_std: float = 0.05
    blob_count_range: tuple[int, int] = (1, 3)
    blob_radius_range: tuple[float, float] = (3.0, 8.0)
    blob_intensity_delta: float = 0.45
    channel_gain: float = 1.0
    # distractors: bright bars that the segmenter must learn to ignore
    distractor_count_range: tuple[int, int] = (0, 0)
    distractor_intensity_delta: float = 0.45
    illumination_gradient: float = 0.0
    image_size: tuple[int, int] = (32, 32)

    def validate(self) -> None:
        lo, hi = self.blob_count_range
        if lo < 1 or hi < lo:
            raise ValidationError(f"{self.domain_id}: blob_count_range {self.blob_count_range} must satisfy 1 <= min <= max")
        rlo, rhi = self.blob_radius_range
        if rlo < 1 or rhi < rlo:
            raise ValidationError(f"{self.domain_id}: blob_radius_range {self.blob_radius_range} must satisfy 1 <= min <= max")
        dlo, dhi = self.distractor_count_range
        if dlo < 0 or dhi < dlo:
            raise ValidationError(f"{self.domain_id}: distractor_count_range {self.distractor_count_range} is invalid")
        if not 0.0 <= self.background_level <= 1.0:
            raise ValidationError(f"{self.domain_id}: background_level must lie in [0, 1]")
        if self.contrast <= 0 or self.channel_gain <= 0:
            raise ValidationError(f"{self.domain_id}: contrast and channel_gain must be positive")
        if self.noise_std < 0:
            raise ValidationError(f"{self.domain_id}: noise_std must be non-negative")
        h, w = self.image_size
        if h <= 0 or w <= 0:
            raise ValidationError(f"{self.domain_id}: image_size must be positive")


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W) float32 in [0, 1]
    mask: np.ndarray  # (1, H, W) float32 in {0, 1}

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.image.shape == other.image.shape and self.mask.shape == other.mask.shape
                and self.image.tobytes() == other.image.tobytes()
                and self.mask.tobytes() == other.mask.tobytes())


@dataclass
class DatasetSplit:
    domain_id: str
    train: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, DatasetSplit):
            return NotImplemented
        return self.domain_id == other.domain_id and self.train == other.train and self.test == other.test


def stream(seed: int, domain_id: str, split: str, index: int) -> np.random.Generator:
    """Independent generator for one sample."""
    key = [seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(domain_id.encode("utf-8")),
           {"train": 0, "test": 1}.get(split, 2), index]
    return np.random.default_rng(np.random.SeedSequence(key))


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def _bar(yy, xx, cy, cx, length, width, theta):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    along = dx * c + dy * s
    across = -dx * s + dy * c
    return (np.abs(along) <= length / 2) & (np.abs(across) <= width / 2)


def render_sample(spec: DomainSpec, rng: np.random.Generator) -> Sample:
    h, w = spec.image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(100):
        mask = np.zeros((h, w), dtype=bool)
        n_blobs = int(rng.integers(spec.blob_count_range[0], spec.blob_count_range[1] + 1))
        for _ in range(n_blobs):
            cy, cx = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
            ry, rx = rng.uniform(*spec.blob_radius_range, size=2)
            theta = rng.uniform(0, np.pi)
            # radius >= 1 keeps the pixel nearest the centre inside, so no blob is empty
            mask |= _ellipse(yy, xx, cy, cx, ry, rx, theta)
        if mask.mean() < MAX_FOREGROUND:
            break
    distract = np.zeros((h, w), dtype=bool)
    n_bars = int(rng.integers(spec.distractor_count_range[0], spec.distractor_count_range[1] + 1))
    for _ in range(n_bars):
        cy, cx = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
        length = rng.uniform(0.35, 0.7) * min(h, w)
        width = rng.uniform(1.0, 2.0)
        distract |= _bar(yy, xx, cy, cx, length, width, rng.uniform(0, np.pi))
    distract &= ~mask

    img = np.full((h, w), spec.background_level, dtype=np.float64)
    if spec.illumination_gradient:
        phi = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(phi) * (xx / max(w - 1, 1) - 0.5) + np.sin(phi) * (yy / max(h - 1, 1) - 0.5))
        img += spec.illumination_gradient * ramp
    img += spec.contrast * spec.blob_intensity_delta * mask
    img += spec.contrast * spec.distractor_intensity_delta * distract
    if spec.noise_std > 0:
        img += rng.normal(0.0, spec.noise_std, size=(h, w))
    img = np.clip(np.clip(img, 0.0, 1.0) * spec.channel_gain, 0.0, 1.0)
    return Sample(img.astype(np.float32)[None], mask.astype(np.float32)[None])


def generate_domain(spec: DomainSpec, n_train: int, n_test: int, seed: int) -> DatasetSplit:
    if n_train <= 0 or n_test <= 0:
        raise ValidationError("n_train and n_test must be positive")
    spec.validate()
    train = [render_sample(spec, stream(seed, spec.domain_id, "train", i)) for i in range(n_train)]
    test = [render_sample(spec, stream(seed, spec.domain_id, "test", i)) for i in range(n_test)]
    return DatasetSplit(spec.domain_id, train, test)


# Train/test sizes per centre; D2 is deliberately tiny.
CENTRE_SIZES = {"D1": (400, 100), "D2": (10, 10), "D3": (260, 46), "D4": (83, 15)}

DEFAULT_SPECS = (
    DomainSpec("D1", background_level=0.25, contrast=1.0, noise_std=0.05,
               blob_count_range=(1, 3), blob_radius_range=(3.0, 7.0), blob_intensity_delta=0.45,
               distractor_count_range=(0, 2), illumination_gradient=0.15),
    DomainSpec("D2", background_level=0.50, contrast=0.7, noise_std=0.08,
               blob_count_range=(1, 2), blob_radius_range=(3.5, 7.5), blob_intensity_delta=0.55,
               channel_gain=0.9, distractor_count_range=(1, 2), illumination_gradient=0.25),
    DomainSpec("D3", background_level=0.15, contrast=1.2, noise_std=0.06,
               blob_count_range=(1, 4), blob_radius_range=(2.5, 6.5), blob_intensity_delta=0.40,
               distractor_count_range=(0, 2), illumination_gradient=0.10),
    DomainSpec("D4", background_level=0.35, contrast=0.8, noise_std=0.10,
               blob_count_range=(1, 3), blob_radius_range=(3.0, 6.0), blob_intensity_delta=0.50,
               channel_gain=1.1, distractor_count_range=(1, 3), illumination_gradient=0.20),
)


def default_specs() -> tuple[DomainSpec, ...]:
    return DEFAULT_SPECS


def default_centres(seed: int, scale: float = 1.0) -> list[DatasetSplit]:
    """The four benchmark centres; D1 is the source.

    ``scale`` shrinks every split proportionally (minimum 2 images each) for
    quick runs.
    """
    out = []
    for spec in DEFAULT_SPECS:
        n_train, n_test = CENTRE_SIZES[spec.domain_id]
        if scale != 1.0:
            n_train = max(2, int(round(n_train * scale)))
            n_test = max(2, int(round(n_test * scale)))
        out.append(generate_domain(spec, n_train, n_test, seed))
    return out


# ---------------------------------------------------------------- SFDS files

SFDS_MAGIC = b"SFDS"
SFDS_VERSION = 1


def split_to_bytes(split: DatasetSplit) -> bytes:
    name = split.domain_id.encode("utf-8")
    parts = [SFDS_MAGIC, struct.pack("<BH", SFDS_VERSION, len(name)), name,
             struct.pack("<II", len(split.train), len(split.test))]
    for s in split.train + split.test:
        parts.append(encode_tensor(s.image))
        parts.append(encode_tensor(s.mask))
    return b"".join(parts)


def split_from_bytes(data: bytes) -> DatasetSplit:
    buf = memoryview(data)
    if len(buf) < 4 or bytes(buf[:4]) != SFDS_MAGIC:
        raise FormatError("bad SFDS magic", 0)
    if len(buf) < 7:
        raise FormatError("truncated SFDS header", len(buf))
    version = buf[4]
    if version != SFDS_VERSION:
        raise UnsupportedVersionError(f"unsupported SFDS version {version}", 4)
    (nlen,) = struct.unpack_from("<H", buf, 5)
    pos = 7
    if pos + nlen + 8 > len(buf):
        raise FormatError("truncated SFDS header", len(buf))
    try:
        domain_id = bytes(buf[pos:pos + nlen]).decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("domain id is not UTF-8", pos) from None
    pos += nlen
    n_train, n_test = struct.unpack_from("<II", buf, pos)
    pos += 8
    samples = []
    for i in range(n_train + n_test):
        tensors = []
        for _ in range(2):
            try:
                arr, pos_next = decode_tensor(buf, pos, last=False)
            except ProtocolError as exc:
                raise FormatError(f"sample {i}: {exc}", pos) from None
            tensors.append(arr)
            pos = pos_next
        samples.append(Sample(*tensors))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after SFDS payload", pos)
    return DatasetSplit(domain_id, samples[:n_train], samples[n_train:])


def save_split(split: DatasetSplit, path) -> None:
    Path(path).write_bytes(split_to_bytes(split))


def load_split(path) -> DatasetSplit:
    return split_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- PGM export


def export_pgm(sample: Sample, directory, stem: str = "sample") -> tuple[Path, Path]:
    """Write ``<stem>_image.pgm`` and ``<stem>_mask.pgm`` (binary P5, 8-bit)."""
    if sample.image.shape[0] != 1:
        raise ValidationError(f"PGM export needs a single-channel image, got {sample.image.shape[0]} channels")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img = np.clip(np.rint(sample.image[0].astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    msk = np.where(sample.mask[0] > 0.5, 255, 0).astype(np.uint8)
    paths = []
    for suffix, raster in (("image", img), ("mask", msk)):
        h, w = raster.shape
        p = directory / f"{stem}_{suffix}.pgm"
        p.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + raster.tobytes())
        paths.append(p)
    return paths[0], paths[1]


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 PGM written by :func:`export_pgm` as uint8 ``(H, W)``."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise FormatError("not a binary PGM (P5)", 0)
    w, h = (int(v) for v in parts[1].split())
    if int(parts[2]) != 255:
        raise FormatError("only 8-bit PGM is supported", len(parts[0]) + len(parts[1]) + 2)
    raster = parts[3]
    if len(raster) != w * h:
        raise FormatError(f"PGM raster has {len(raster)} bytes, expected {w * h}", len(data) - len(raster))
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w)
