"""Synthetic multi-coil phantoms, dataset manifests and UMRIK1 volume files.

Phantom families stand in for three anatomies:

* ``A`` - stacked ellipses around an annular "ventricle", with fat rim, lungs,
  spine and vessels (in-distribution);
* ``B`` - oblique layered bands cut by a wedge;
* ``C`` - concentric shells with interior blobs.

Volume file layout (little-endian)::

    b"UMRIK1"
    u32 coils, u32 height, u32 width, u8 dtype (1 = complex64, 2 = complex128)
    coils * height * width interleaved (real, imag) samples, coil-major, row-major
    u32 metadata length, UTF-8 JSON metadata
"""
from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from . import physics
from .errors import ConfigError, FormatError, ShapeError

FAMILIES = ("A", "B", "C")
FAMILY_NAMES = {"A": "cardiac-like", "B": "knee-like", "C": "brain-like"}
_FAMILY_SALT = {"A": 11, "B": 23, "C": 37}


@dataclass(frozen=True)
class PhantomSpec:
    family: str
    size: int = 64
    seed: int = 0
    max_phase_slope: float = np.pi

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown phantom family {self.family!r}")
        if self.size < 8:
            raise ConfigError(f"phantom size must be >= 8, got {self.size}")


def _grid(size: int):
    c = (np.arange(size) - size // 2 + 0.5) / (size / 2)
    return np.meshgrid(c, c, indexing="ij")  # (y, x) in roughly [-1, 1]


def _ellipse(y, x, cy, cx, ry, rx, theta=0.0):
    ct, st = np.cos(theta), np.sin(theta)
    u = (x - cx) * ct + (y - cy) * st
    v = -(x - cx) * st + (y - cy) * ct
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _family_a(y, x, rng):
    img = np.zeros_like(x)
    by, bx = rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)
    ry, rx, tilt = rng.uniform(0.62, 0.8), rng.uniform(0.82, 0.94), rng.uniform(-0.15, 0.15)
    body = _ellipse(y, x, by, bx, ry, rx, tilt)
    fat = rng.uniform(0.05, 0.1)
    img[body] = rng.uniform(0.6, 0.85)  # subcutaneous fat rim
    inner = _ellipse(y, x, by, bx, ry - fat, rx - fat, tilt)
    img[inner] = rng.uniform(0.25, 0.4)
    for side in (-1, 1):  # lungs
        lung = _ellipse(y, x, by + rng.uniform(-0.15, 0.05), bx + side * rng.uniform(0.38, 0.5),
                        rng.uniform(0.3, 0.42), rng.uniform(0.18, 0.26), rng.uniform(-0.3, 0.3)) & inner
        img[lung] = rng.uniform(0.02, 0.08)
    spine_y = by + (ry - fat) * rng.uniform(0.6, 0.75)
    spine = _ellipse(y, x, spine_y, bx, rng.uniform(0.08, 0.11), rng.uniform(0.08, 0.11))
    img[spine] = rng.uniform(0.5, 0.7)
    img[_ellipse(y, x, spine_y, bx, 0.04, 0.04)] = rng.uniform(0.1, 0.2)
    for _ in range(rng.integers(2, 5)):
        organ = _ellipse(y, x, rng.uniform(-0.5, 0.5), rng.uniform(-0.55, 0.55),
                         rng.uniform(0.06, 0.18), rng.uniform(0.06, 0.2), rng.uniform(0, np.pi)) & inner
        img[organ] = rng.uniform(0.4, 0.7)
    cy, cx = rng.uniform(-0.2, 0.1), rng.uniform(-0.15, 0.15)
    r_out, th = rng.uniform(0.24, 0.34), rng.uniform(0.06, 0.1)
    ang = rng.uniform(0, np.pi)
    ecc = rng.uniform(0.8, 1.0)
    # right ventricle: bright crescent beside the left ventricle
    rv_dir = ang + rng.uniform(-0.6, 0.6)
    rv = _ellipse(y, x, cy + 0.55 * r_out * np.sin(rv_dir), cx + 0.55 * r_out * np.cos(rv_dir),
                  r_out * 0.8, r_out * 1.15, rv_dir + np.pi / 2)
    img[rv] = rng.uniform(0.75, 0.95)
    outer = _ellipse(y, x, cy, cx, r_out * ecc, r_out, ang)
    lumen = _ellipse(y, x, cy, cx, (r_out - th) * ecc, r_out - th, ang)
    img[outer] = rng.uniform(0.15, 0.25)  # myocardium
    img[lumen] = rng.uniform(0.85, 1.0)  # blood pool
    for _ in range(rng.integers(3, 8)):  # vessels
        r = rng.uniform(0.025, 0.06)
        vessel = _ellipse(y, x, rng.uniform(-0.55, 0.45), rng.uniform(-0.6, 0.6), r, r) & inner
        img[vessel] = rng.uniform(0.7, 1.0)
    return img


def _family_b(y, x, rng):
    theta = rng.uniform(np.pi / 8, 3 * np.pi / 8) * rng.choice([-1, 1])
    s = x * np.cos(theta) + y * np.sin(theta)
    period = rng.uniform(0.18, 0.3)
    levels = rng.uniform(0.2, 1.0, size=8)
    band = np.floor((s + 2) / period).astype(int) % len(levels)
    img = levels[band]
    region = _ellipse(y, x, 0, 0, rng.uniform(0.7, 0.85), rng.uniform(0.55, 0.7),
                      rng.uniform(-0.2, 0.2))
    apex = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.3, 0.3)])
    phi = rng.uniform(0, 2 * np.pi)
    width = rng.uniform(0.25, 0.5)
    ang = np.arctan2(y - apex[0], x - apex[1])
    diff = np.angle(np.exp(1j * (ang - phi)))
    wedge = (np.abs(diff) < width / 2) & (np.hypot(y - apex[0], x - apex[1]) < 0.6)
    img = np.where(wedge, rng.uniform(0.05, 0.15), img)
    return np.where(region, img, 0.0)


def _family_c(y, x, rng):
    img = np.zeros_like(x)
    cy, cx = rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)
    ry, rx = rng.uniform(0.78, 0.9), rng.uniform(0.65, 0.78)
    shells = [(1.0, rng.uniform(0.85, 1.0)), (0.9, rng.uniform(0.1, 0.2)),
              (0.82, rng.uniform(0.55, 0.7)), (0.6, rng.uniform(0.35, 0.48))]
    for scale, level in shells:
        img[_ellipse(y, x, cy, cx, ry * scale, rx * scale)] = level
    for _ in range(rng.integers(3, 7)):
        by, bx = rng.uniform(-0.4, 0.4), rng.uniform(-0.35, 0.35)
        r = rng.uniform(0.04, 0.12)
        blob = np.exp(-((y - by) ** 2 + (x - bx) ** 2) / (2 * r ** 2))
        img = img + rng.uniform(-0.3, 0.4) * blob * _ellipse(y, x, cy, cx, ry * 0.6, rx * 0.6)
    return img


_GENERATORS = {"A": _family_a, "B": _family_b, "C": _family_c}


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def generate_phantom(spec: PhantomSpec) -> np.ndarray:
    """Complex128 ``size x size`` phantom with magnitude in [0, 1] and smooth phase."""
    rng = _rng(_FAMILY_SALT[spec.family], spec.seed)
    y, x = _grid(spec.size)
    mag = _GENERATORS[spec.family](y, x, rng)
    # smooth multiplicative bias keeps regions piecewise-smooth rather than flat
    bias = 1.0 + 0.15 * (rng.uniform(-1, 1) * x + rng.uniform(-1, 1) * y)
    mag = np.clip(mag * bias, 0.0, 1.0)
    a = rng.uniform(-1, 1, size=5)
    # |grad phase| <= sum of coefficient bounds over [-1, 1]^2
    a *= spec.max_phase_slope / (abs(a[0]) + abs(a[1]) + 2 * abs(a[2]) + 2 * abs(a[3]) + 2 * abs(a[4]) + 1e-12)
    a *= rng.uniform(0.3, 1.0)
    phase = a[0] * x + a[1] * y + a[2] * x * x + a[3] * x * y + a[4] * y * y
    return mag * np.exp(1j * phase)


def simulate_coils(n: int, size: int, sigma: float = 0.65) -> np.ndarray:
    """``n`` smooth complex Gaussian-lobe profiles on the border, RSS-normalized."""
    if n < 1:
        raise ConfigError(f"coil count must be >= 1, got {n}")
    y, x = _grid(size)
    raw = np.empty((n, size, size), dtype=np.complex128)
    for i in range(n):
        ang = 2 * np.pi * i / n + np.pi / 4
        cy, cx = np.sin(ang), np.cos(ang)
        lobe = np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * sigma ** 2))
        phase = ang + 0.5 * (x * np.cos(ang) + y * np.sin(ang))
        raw[i] = lobe * np.exp(1j * phase)
    return physics.normalize_sensitivities(torch.from_numpy(raw)).numpy()


def synthesize_kspace(image, sens, noise_std: float = 0.0, seed: int = 0) -> np.ndarray:
    """Fully sampled multi-coil k-space ``FFT(S_i x) + z_i`` with complex Gaussian noise.

    ``noise_std`` is the standard deviation of the complex noise, split
    equally between real and imaginary parts.
    """
    img = torch.as_tensor(np.asarray(image, dtype=np.complex128))
    s = torch.as_tensor(np.asarray(sens, dtype=np.complex128))
    k = physics.fft2c(physics.expand(img, s)).numpy()
    if noise_std > 0:
        rng = _rng(7919, seed)
        noise = rng.standard_normal(k.shape) + 1j * rng.standard_normal(k.shape)
        k = k + noise * (noise_std / np.sqrt(2.0))
    return k


@dataclass
class ManifestEntry:
    sample_id: str
    family: str
    seed: int
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    fractions: tuple[float, float, float]

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "family", "seed", "split"])
            for e in self.entries:
                w.writerow([e.sample_id, e.family, e.seed, e.split])

    @classmethod
    def read_csv(cls, path, fractions=(0.0, 0.0, 0.0)) -> "DatasetManifest":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([ManifestEntry(r["sample_id"], r["family"], int(r["seed"]), r["split"])
                    for r in rows], tuple(fractions))


SPLITS = ("train", "val", "test")


def build_manifest(counts: Mapping[str, int], fractions: Sequence[float] = (0.7, 0.1, 0.2),
                   seed: int = 0) -> DatasetManifest:
    """Family-stratified, seeded train/val/test split.

    For each family, ``round(f * n)`` samples go to train and val and the rest
    to test, after a seeded shuffle.
    """
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three nonnegative values summing to 1, got {fractions}")
    entries = []
    for family in sorted(counts):
        if family not in FAMILIES:
            raise ConfigError(f"unknown phantom family {family!r}")
        n = int(counts[family])
        rng = _rng(seed, _FAMILY_SALT[family], 101)
        seeds = rng.choice(2 ** 31 - 1, size=n, replace=False) if n else []
        order = rng.permutation(n)
        n_train = int(np.floor(fr[0] * n + 0.5))
        n_val = min(n - n_train, int(np.floor(fr[1] * n + 0.5)))
        for rank, idx in enumerate(order):
            split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
            entries.append(ManifestEntry(f"{family}{int(idx):05d}", family, int(seeds[idx]), split))
    entries.sort(key=lambda e: (SPLITS.index(e.split), e.sample_id))
    return DatasetManifest(entries, fr)


VOLUME_MAGIC = b"UMRIK1"
_VOLUME_DTYPES = {1: np.dtype("<c8"), 2: np.dtype("<c16")}
_VOLUME_CODES = {np.dtype("complex64"): 1, np.dtype("complex128"): 2}


def dumps_volume(kspace, metadata: Optional[dict] = None) -> bytes:
    k = np.asarray(kspace)
    if k.ndim != 3:
        raise ShapeError(f"volume must be (coils, H, W), got shape {k.shape}")
    if k.dtype not in _VOLUME_CODES:
        k = k.astype(np.complex64)
    code = _VOLUME_CODES[k.dtype]
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    header = VOLUME_MAGIC + struct.pack("<IIIB", *k.shape, code)
    body = np.ascontiguousarray(k, dtype=_VOLUME_DTYPES[code]).tobytes()
    return header + body + struct.pack("<I", len(meta)) + meta


def loads_volume(data: bytes) -> tuple[np.ndarray, dict]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated volume: need {n} bytes for {what} at byte offset {pos}, "
                              f"file has {len(data)}")
        out = data[pos:pos + n]
        pos += n
        return out

    if take(len(VOLUME_MAGIC), "magic") != VOLUME_MAGIC:
        raise FormatError("not a UMRIK1 volume (bad magic) at byte offset 0")
    coils, h, w, code = struct.unpack("<IIIB", take(13, "header"))
    if code not in _VOLUME_DTYPES:
        raise FormatError(f"unknown dtype code {code} at byte offset {pos - 1}")
    if coils < 1 or h < 1 or w < 1:
        raise FormatError(f"invalid volume shape ({coils}, {h}, {w})")
    dt = _VOLUME_DTYPES[code]
    raw = take(coils * h * w * dt.itemsize, "samples")
    k = np.frombuffer(raw, dtype=dt).reshape(coils, h, w).astype(dt.newbyteorder("="))
    (mlen,) = struct.unpack("<I", take(4, "metadata length"))
    blob = take(mlen, "metadata")
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes at byte offset {pos}")
    try:
        meta = json.loads(blob.decode("utf-8")) if mlen else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata at byte offset {pos - mlen} is not UTF-8 JSON") from exc
    return k, meta


def write_volume(path, kspace, metadata: Optional[dict] = None) -> None:
    data = dumps_volume(kspace, metadata)
    tmp = f"{os.fspath(path)}.incomplete"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_volume(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        return loads_volume(fh.read())


@dataclass
class Sample:
    sample_id: str
    kspace: np.ndarray  # fully sampled (coils, H, W)
    target: np.ndarray  # RSS of the fully sampled coil images
    metadata: dict = field(default_factory=dict)


def make_sample(family: str, seed: int, size: int = 64, coils: int = 4,
                noise_std: float = 0.0, sample_id: str | None = None) -> Sample:
    """Phantom -> coils -> noisy k-space in complex64, with its RSS target."""
    image = generate_phantom(PhantomSpec(family, size, seed))
    sens = simulate_coils(coils, size)
    k = synthesize_kspace(image, sens, noise_std, seed).astype(np.complex64)
    meta = {"family": family, "seed": int(seed), "noise_std": float(noise_std)}
    return sample_from_kspace(k, meta, sample_id or f"{family}-{seed}")


def sample_from_kspace(kspace: np.ndarray, metadata: dict, sample_id: str) -> Sample:
    target = physics.rss(physics.ifft2c(torch.from_numpy(kspace))).numpy()
    return Sample(sample_id, kspace, target, dict(metadata))


def mean_radial_power(image: np.ndarray, bins: int = 16) -> np.ndarray:
    """Azimuthally averaged power spectrum of an image, ``bins`` radial bins."""
    k = np.abs(physics.fft2c(torch.as_tensor(np.asarray(image, dtype=np.complex128))).numpy()) ** 2
    h, w = k.shape
    yy, xx = np.meshgrid(np.arange(h) - h // 2, np.arange(w) - w // 2, indexing="ij")
    r = np.hypot(yy, xx) / (min(h, w) / 2)
    idx = np.minimum((r * bins).astype(int), bins - 1)
    total = np.bincount(idx.ravel(), weights=k.ravel(), minlength=bins)
    count = np.bincount(idx.ravel(), minlength=bins)
    return total / np.maximum(count, 1)
