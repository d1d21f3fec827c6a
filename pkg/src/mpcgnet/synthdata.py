"""Synthetic polyp-like scenes, augmentations and PPM/PGM dataset I/O.

Each scene is a few soft-edged ellipses over low-frequency coloured noise.
Regimes stress one difficulty each: tiny blobs, weak blurred boundaries,
or strong uneven illumination; ``mixed`` draws one of those per seed and
occasionally produces an empty (negative) scene.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage, special

REGIMES = ("small-target", "blurred-boundary", "uneven-light", "mixed")
BASE_SIZE = 64


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    size: tuple[int, int] = (64, 64)
    regime: str = "mixed"
    blob_count: int = 1
    radius: tuple[float, float] = (6.0, 16.0)
    edge_sigma: float = 1.0
    contrast: float = 0.3
    illumination: float = 0.1
    speckle: float = 0.03

    def __post_init__(self):
        h, w = self.size
        if h < 32 or w < 32 or h % 32 or w % 32:
            raise ValueError(f"scene size {h}x{w} must be at least 32 and divisible by 32")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if not 0 <= self.blob_count <= 3:
            raise ValueError("blob_count must be in 0..3")
        if self.blob_count == 0 and self.regime != "mixed":
            raise ValueError("empty scenes only occur in the mixed regime")
        if not 0.0 <= self.illumination <= 1.0:
            raise ValueError("illumination amplitude must lie in [0, 1]")
        lo, hi = self.radius
        if not 0 < lo <= hi:
            raise ValueError(f"bad radius range {self.radius}")


@dataclass
class SegSample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (1, H, W) float32 in {0, 1}
    spec: SceneSpec | None = None


def _regime_params(regime: str, rng: np.random.Generator, scale: float) -> dict:
    if regime == "small-target":
        return dict(radius=(3.0 * scale, 8.0 * scale), edge_sigma=0.8, contrast=rng.uniform(0.3, 0.45),
                    illumination=rng.uniform(0.0, 0.2), speckle=0.03)
    if regime == "blurred-boundary":
        return dict(radius=(8.0 * scale, 18.0 * scale), edge_sigma=rng.uniform(2.5, 4.0),
                    contrast=rng.uniform(0.14, 0.22), illumination=rng.uniform(0.0, 0.2), speckle=0.03)
    if regime == "uneven-light":
        return dict(radius=(6.0 * scale, 16.0 * scale), edge_sigma=1.0, contrast=rng.uniform(0.25, 0.4),
                    illumination=rng.uniform(0.6, 0.9), speckle=0.04)
    raise ValueError(f"unknown regime {regime!r}")


def make_scene(regime: str, seed: int, size: tuple[int, int] = (BASE_SIZE, BASE_SIZE)) -> SceneSpec:
    """Draw a regime's scene parameters from ``seed``."""
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    rng = np.random.default_rng([seed, 0])
    scale = min(size) / BASE_SIZE
    if regime == "mixed":
        sub = REGIMES[int(rng.integers(0, 3))]
        params = _regime_params(sub, rng, scale)
        count = 0 if rng.random() < 0.1 else int(rng.integers(1, 4))
    else:
        params = _regime_params(regime, rng, scale)
        count = int(rng.integers(1, 4))
    return SceneSpec(seed=seed, size=tuple(size), regime=regime, blob_count=count, **params)


def _smooth_noise(rng, shape, sigma) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=(0, sigma, sigma), mode="wrap")
    n -= n.mean(axis=(1, 2), keepdims=True)
    return n / (n.std(axis=(1, 2), keepdims=True) + 1e-12)


def generate(spec: SceneSpec) -> SegSample:
    h, w = spec.size
    rng = np.random.default_rng([spec.seed, 1])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    base = np.array([0.72, 0.42, 0.36]) + rng.uniform(-0.06, 0.06, size=3)
    bg = base[:, None, None] + 0.07 * _smooth_noise(rng, (3, h, w), sigma=min(h, w) / 8)
    image = bg.copy()
    mask = np.zeros((h, w), dtype=bool)
    lo, hi = spec.radius
    for _ in range(spec.blob_count):
        a = rng.uniform(lo, hi)
        b = max(lo, a * rng.uniform(0.6, 1.0))
        theta = rng.uniform(0, np.pi)
        margin = a + 1
        cy = rng.uniform(margin, h - margin) if h > 2 * margin else h / 2
        cx = rng.uniform(margin, w - margin) if w > 2 * margin else w / 2
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        inside = rho <= 1.0
        mask |= inside
        # approximate signed distance to the boundary, positive inside
        sd = (1.0 - rho) * b
        alpha = 0.5 * (1.0 + special.erf(sd / (spec.edge_sigma * np.sqrt(2.0))))
        direction = np.array([0.9, 0.35, 0.25]) * rng.choice([-1.0, 1.0]) + rng.normal(0, 0.15, size=3)
        direction /= np.linalg.norm(direction)
        local = bg[:, inside].mean(axis=1) if inside.any() else base
        colour = local + spec.contrast * direction
        texture = 0.03 * _smooth_noise(rng, (3, h, w), sigma=1.5)
        image = image * (1 - alpha) + (colour[:, None, None] + texture) * alpha

    if spec.illumination > 0:
        phi = rng.uniform(0, 2 * np.pi)
        ramp = ((xx / (w - 1)) * 2 - 1) * np.cos(phi) + ((yy / (h - 1)) * 2 - 1) * np.sin(phi)
        ramp = 1.0 - spec.illumination * 0.5 * (1.0 + ramp / np.sqrt(2))
        ry, rx = (yy - h / 2) / (h / 2), (xx - w / 2) / (w / 2)
        vignette = 1.0 - 0.5 * spec.illumination * (rx * rx + ry * ry) / 2
        image = image * (ramp * vignette)[None]
    if spec.speckle > 0:
        image = image * (1.0 + spec.speckle * rng.standard_normal(image.shape))
    image = np.clip(image, 0.0, 1.0)
    return SegSample(image=image.astype(np.float32), mask=mask[None].astype(np.float32), spec=spec)


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentParams:
    rot90: int = 0
    flip_h: bool = False
    flip_v: bool = False
    brightness: float = 1.0
    contrast: float = 1.0

    @property
    def is_identity(self) -> bool:
        return (self.rot90 % 4 == 0 and not self.flip_h and not self.flip_v
                and self.brightness == 1.0 and self.contrast == 1.0)


def draw_augment(seed: int) -> AugmentParams:
    rng = np.random.default_rng([seed, 2])
    rot = int(rng.integers(0, 4))
    fh, fv = bool(rng.random() < 0.5), bool(rng.random() < 0.5)
    if rng.random() < 0.5:
        # log-uniform over [0.8, 1.25], symmetric around 1 in log space
        b, c = np.exp(rng.uniform(np.log(0.8), np.log(1.25), size=2))
        return AugmentParams(rot, fh, fv, float(b), float(c))
    return AugmentParams(rot, fh, fv)


def apply_augment(sample: SegSample, p: AugmentParams) -> SegSample:
    img, msk = sample.image, sample.mask
    k = p.rot90 % 4
    if k:
        img = np.rot90(img, k, axes=(1, 2))
        msk = np.rot90(msk, k, axes=(1, 2))
    if p.flip_h:
        img, msk = img[:, :, ::-1], msk[:, :, ::-1]
    if p.flip_v:
        img, msk = img[:, ::-1, :], msk[:, ::-1, :]
    img = np.ascontiguousarray(img)
    if p.brightness != 1.0 or p.contrast != 1.0:
        x = img.astype(np.float64) * p.brightness
        m = x.mean()
        img = np.clip((x - m) * p.contrast + m, 0.0, 1.0).astype(np.float32)
    return SegSample(image=img, mask=np.ascontiguousarray(msk), spec=sample.spec)


def augment(sample: SegSample, seed: int) -> SegSample:
    return apply_augment(sample, draw_augment(seed))


# ---------------------------------------------------------------- PPM / PGM


class ImageFormatError(ValueError):
    """Malformed PPM/PGM header."""


class TruncatedImageError(ImageFormatError):
    """Header is fine but the pixel payload is short."""


def _write_pnm(path, magic: bytes, pixels: np.ndarray) -> None:
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != magic:
        raise ImageFormatError(f"{path}: expected {magic.decode()}, found {data[:2]!r}")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: incomplete header")
        tok = data[start:pos]
        if not tok.isdigit():
            raise ImageFormatError(f"{path}: bad header field {tok!r}")
        tokens.append(int(tok))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError(f"{path}: missing whitespace after header")
    pos += 1
    w, h, maxval = tokens
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"{path}: bad dimensions {w}x{h}")
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    need = w * h * channels
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise TruncatedImageError(f"{path}: payload has {len(payload)} of {need} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3, H, W) image in [0, 1] as binary P6."""
    q = np.rint(np.clip(image, 0, 1) * 255).astype(np.uint8)
    _write_pnm(path, b"P6", q.transpose(1, 2, 0))


def read_ppm(path) -> np.ndarray:
    return (_read_pnm(path, b"P6", 3).transpose(2, 0, 1) / 255.0).astype(np.float32)


def write_pgm(path, mask: np.ndarray) -> None:
    """Write a binary (1, H, W) or (H, W) mask as P5 with values 0/255."""
    m = np.asarray(mask).reshape(mask.shape[-2:])
    _write_pnm(path, b"P5", np.where(m > 0.5, 255, 0).astype(np.uint8))


def read_pgm(path) -> np.ndarray:
    raw = _read_pnm(path, b"P5", 1)
    if not np.all((raw == 0) | (raw == 255)):
        raise ImageFormatError(f"{path}: mask values must be 0 or 255")
    return (raw == 255)[None].astype(np.float32)


# ---------------------------------------------------------------- datasets


def _stem(index: int) -> str:
    return f"{index:05d}"


def write_sample(root, index: int, sample: SegSample) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    write_ppm(root / "images" / f"{_stem(index)}.ppm", sample.image)
    write_pgm(root / "masks" / f"{_stem(index)}.pgm", sample.mask)


def read_sample(root, index: int) -> SegSample:
    root = Path(root)
    image = read_ppm(root / "images" / f"{_stem(index)}.ppm")
    mask = read_pgm(root / "masks" / f"{_stem(index)}.pgm")
    if image.shape[1:] != mask.shape[1:]:
        raise ImageFormatError(f"sample {index}: image {image.shape[1:]} and mask {mask.shape[1:]} differ")
    return SegSample(image=image, mask=mask)


def sample_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1, dtype=np.uint64)[0])


def make_dataset(regime: str, count: int, seed: int, size=(BASE_SIZE, BASE_SIZE)) -> list[SegSample]:
    return [generate(make_scene(regime, sample_seed(seed, i), size)) for i in range(count)]


MANIFEST_COLUMNS = ("id", "regime", "seed", "blob_count")


def write_dataset(root, samples: Sequence[SegSample]) -> None:
    """Write images, masks and ``manifest.tsv`` (last, so its presence marks completion)."""
    root = Path(root)
    for i, s in enumerate(samples):
        write_sample(root, i, s)
    tmp = root / "manifest.tsv.tmp"
    with open(tmp, "w", newline="") as fh:
        wr = csv.writer(fh, delimiter="\t", lineterminator="\n")
        wr.writerow(MANIFEST_COLUMNS)
        for i, s in enumerate(samples):
            sp = s.spec
            wr.writerow([_stem(i), sp.regime if sp else "", sp.seed if sp else "", sp.blob_count if sp else ""])
    os.replace(tmp, root / "manifest.tsv")


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32
    masks: np.ndarray  # (N, 1, H, W) float32
    ids: list[str]
    regimes: list[str]

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = list(idx)
        return Dataset(self.images[idx], self.masks[idx], [self.ids[i] for i in idx], [self.regimes[i] for i in idx])

    @classmethod
    def from_samples(cls, samples: Sequence[SegSample]) -> "Dataset":
        if not samples:
            raise ValueError("dataset is empty")
        return cls(
            images=np.stack([s.image for s in samples]),
            masks=np.stack([s.mask for s in samples]),
            ids=[_stem(i) for i in range(len(samples))],
            regimes=[s.spec.regime if s.spec else "" for s in samples],
        )


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = root / "manifest.tsv"
    if not manifest.exists():
        raise FileNotFoundError(f"{root}: no manifest.tsv (not a dataset directory, or incomplete)")
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    if not rows:
        raise ValueError(f"{root}: manifest lists no samples")
    missing = set(MANIFEST_COLUMNS) - set(rows[0])
    if missing:
        raise ValueError(f"{manifest}: missing columns {sorted(missing)}")
    samples = [read_sample(root, int(r["id"])) for r in rows]
    shapes = {s.image.shape for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"{root}: images have differing shapes {sorted(shapes)}")
    return Dataset(
        images=np.stack([s.image for s in samples]),
        masks=np.stack([s.mask for s in samples]),
        ids=[r["id"] for r in rows],
        regimes=[r["regime"] for r in rows],
    )
