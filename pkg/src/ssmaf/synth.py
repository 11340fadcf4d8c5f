"""Synthetic fundus-like images with bright irregular lesions.

Every random draw comes from SplitMix64, so a (seed, index) pair yields the
same sample on any platform. The HR image is rendered first; the LR input is
its exact 2x2 area average.

SplitMix64 step (all arithmetic mod 2**64)::

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

Uniform doubles take the top 53 bits: ``(z >> 11) * 2**-53``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .netpbm import read_netpbm, write_netpbm

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return mix64(self.state)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) * 2.0 ** -53)

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive."""
        return lo + self.next_u64() % (hi - lo + 1)


def sample_stream(seed: int, index: int) -> SplitMix64:
    return SplitMix64(mix64(seed ^ mix64(index * GOLDEN + 1)))


@dataclass(frozen=True)
class SynthParams:
    hr_size: tuple[int, int] = (128, 128)
    lesion_count_range: tuple[int, int] = (1, 6)
    lesion_radius_range: tuple[float, float] = (2.0, 12.0)
    lesion_intensity_range: tuple[float, float] = (0.75, 1.0)
    vessel_count: int = 4
    noise_amplitude: float = 0.06
    seed: int = 0

    def __post_init__(self):
        h, w = self.hr_size
        if h < 8 or w < 8 or h % 2 or w % 2:
            raise ValueError(f"hr_size must be even and at least 8, got {self.hr_size}")
        lo, hi = self.lesion_count_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad lesion_count_range {self.lesion_count_range}")
        rlo, rhi = self.lesion_radius_range
        if not 0 < rlo <= rhi:
            raise ValueError(f"bad lesion_radius_range {self.lesion_radius_range}")
        ilo, ihi = self.lesion_intensity_range
        if not 0 < ilo <= ihi <= 1:
            raise ValueError(f"bad lesion_intensity_range {self.lesion_intensity_range}")

    @property
    def lr_size(self) -> tuple[int, int]:
        return self.hr_size[0] // 2, self.hr_size[1] // 2

    def check_encoder_compatible(self, depth: int) -> None:
        div = 2 * 2 ** (depth - 1)
        if self.hr_size[0] % div or self.hr_size[1] % div:
            raise ValueError(f"hr_size {self.hr_size} must be divisible by {div} for depth {depth}")


@dataclass
class Lesion:
    center: tuple[float, float]  # (x, y) in HR pixel units
    radius: float
    polygon: np.ndarray  # (K, 2) vertices (x, y)


@dataclass
class Sample:
    lr_image: np.ndarray  # (3, H, W)
    hr_image: np.ndarray  # (3, 2H, 2W)
    hr_mask: np.ndarray  # (2H, 2W), {0, 1}
    lesions: list[Lesion] = field(default_factory=list)
    name: str = ""


def downsample_area(img: np.ndarray) -> np.ndarray:
    """Mean of each 2x2 block over the last two axes."""
    img = np.asarray(img, dtype=float)
    H, W = img.shape[-2:]
    if H % 2 or W % 2:
        raise ValueError(f"downsample_area needs even extents, got {H}x{W}")
    # pairwise sums in a fixed order keep the result reproducible
    top = img[..., 0::2, 0::2] + img[..., 0::2, 1::2]
    bottom = img[..., 1::2, 0::2] + img[..., 1::2, 1::2]
    return (top + bottom) / 4.0


def points_in_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd ray casting test for many points against one polygon."""
    inside = np.zeros(px.shape, dtype=bool)
    xs, ys = poly[:, 0], poly[:, 1]
    xj, yj = xs[-1], ys[-1]
    for xi, yi in zip(xs, ys):
        crosses = (yi > py) != (yj > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = (xj - xi) * (py - yi) / (yj - yi) + xi
        inside ^= crosses & (px < x_at)
        xj, yj = xi, yi
    return inside


def _smooth_noise(rng: SplitMix64, h: int, w: int, cells: int = 6) -> np.ndarray:
    grid = np.array([[rng.uniform(-1.0, 1.0) for _ in range(cells)] for _ in range(cells)])
    ys = (np.arange(h) + 0.5) / h * (cells - 1)
    xs = (np.arange(w) + 0.5) / w * (cells - 1)
    rows = np.array([np.interp(xs, np.arange(cells), g) for g in grid])
    return np.array([np.interp(ys, np.arange(cells), rows[:, j]) for j in range(w)]).T


def _lesion_polygon(rng: SplitMix64, cx: float, cy: float, r: float, vertices: int = 48) -> np.ndarray:
    aspect = rng.uniform(0.65, 1.0)
    rot = rng.uniform(0.0, 2 * math.pi)
    harmonics = [(k, rng.uniform(0.0, 0.08), rng.uniform(0.0, 2 * math.pi)) for k in (2, 3, 4)]
    norm = 1.0 + sum(a for _, a, _ in harmonics)
    a, b = r, r * aspect
    theta = np.arange(vertices) * (2 * math.pi / vertices)
    phi = theta - rot
    rho = a * b / np.sqrt((b * np.cos(phi)) ** 2 + (a * np.sin(phi)) ** 2)
    mod = 1.0 + sum(amp * np.cos(k * theta + ph) for k, amp, ph in harmonics)
    rho = rho * mod / norm
    return np.stack([cx + rho * np.cos(theta), cy + rho * np.sin(theta)], axis=1)


def generate_sample(params: SynthParams, index: int) -> Sample:
    rng = sample_stream(params.seed, index)
    H, W = params.hr_size
    ys, xs = np.mgrid[0:H, 0:W] + 0.5

    # retina disc with radial falloff and low-frequency shading
    cx = W / 2 + rng.uniform(-0.03, 0.03) * W
    cy = H / 2 + rng.uniform(-0.03, 0.03) * H
    R = 0.47 * min(H, W)
    rr = np.hypot(xs - cx, ys - cy) / R
    disc = rr <= 1.0
    base = np.array([0.78 + rng.uniform(-0.05, 0.05), 0.36 + rng.uniform(-0.04, 0.04),
                     0.15 + rng.uniform(-0.03, 0.03)])
    shade = (1.0 - 0.45 * rr ** 2) * (1.0 + params.noise_amplitude * _smooth_noise(rng, H, W))
    img = base[:, None, None] * shade[None] * disc[None]

    # dark vessel-like curves from a point left of centre
    ox, oy = cx - 0.35 * R, cy
    for _ in range(params.vessel_count):
        angle = rng.uniform(0, 2 * math.pi)
        width = rng.uniform(0.8, 1.8)
        length = int(R * rng.uniform(0.6, 1.2))
        x, y = ox, oy
        near = np.zeros((H, W), dtype=bool)
        reach = int(math.ceil(width)) + 1
        for _ in range(length):
            angle += rng.uniform(-0.08, 0.08)
            x += math.cos(angle)
            y += math.sin(angle)
            i0, i1 = max(int(y) - reach, 0), min(int(y) + reach + 1, H)
            j0, j1 = max(int(x) - reach, 0), min(int(x) + reach + 1, W)
            if i0 >= i1 or j0 >= j1:
                continue
            near[i0:i1, j0:j1] |= np.hypot(xs[i0:i1, j0:j1] - x, ys[i0:i1, j0:j1] - y) <= width
        img = np.where((near & disc)[None], img * 0.55, img)

    # lesions: the first one always has the minimum radius
    mask = np.zeros((H, W), dtype=bool)
    lesions = []
    rmin, rmax = params.lesion_radius_range
    count = rng.randint(*params.lesion_count_range)
    color = np.array([1.0, 0.93, 0.55])
    for k in range(count):
        r = rmin if k == 0 else rng.uniform(rmin, rmax)
        limit = max(R - r - 2.0, 1.0)
        while True:
            lx, ly = rng.uniform(-limit, limit), rng.uniform(-limit, limit)
            if lx * lx + ly * ly <= limit * limit:
                break
        poly = _lesion_polygon(rng, cx + lx, cy + ly, r)
        alpha = rng.uniform(*params.lesion_intensity_range)
        tint = rng.uniform(0.9, 1.0)
        i0, i1 = max(int(poly[:, 1].min()) - 1, 0), min(int(poly[:, 1].max()) + 2, H)
        j0, j1 = max(int(poly[:, 0].min()) - 1, 0), min(int(poly[:, 0].max()) + 2, W)
        inside = points_in_polygon(xs[i0:i1, j0:j1], ys[i0:i1, j0:j1], poly)
        region = img[:, i0:i1, j0:j1]
        img[:, i0:i1, j0:j1] = np.where(inside[None], (1 - alpha) * region + alpha * tint * color[:, None, None],
                                        region)
        mask[i0:i1, j0:j1] |= inside
        lesions.append(Lesion((cx + lx, cy + ly), r, poly))

    hr = np.clip(img, 0.0, 1.0)
    return Sample(lr_image=downsample_area(hr), hr_image=hr, hr_mask=mask.astype(float),
                  lesions=lesions, name=f"{index:04d}")


# -- on-disk layout --------------------------------------------------------

@dataclass
class Dataset:
    train: list[Sample]
    test: list[Sample]

    def split(self, name: str) -> list[Sample]:
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        return self.train if name == "train" else self.test


def generate_dataset(params: SynthParams, n_train: int, n_test: int) -> Dataset:
    if n_train < 1:
        raise ValueError("empty training split")
    return Dataset(
        train=[generate_sample(params, i) for i in range(n_train)],
        test=[generate_sample(params, n_train + i) for i in range(n_test)],
    )


def write_dataset(root, dataset: Dataset) -> None:
    root = Path(root)
    for sub in ("images", "hr", "masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    lines = []
    for split in ("train", "test"):
        for s in dataset.split(split):
            write_netpbm(root / "images" / f"{s.name}.ppm", s.lr_image)
            write_netpbm(root / "hr" / f"{s.name}.ppm", s.hr_image)
            write_netpbm(root / "masks" / f"{s.name}.pgm", s.hr_mask)
            lines.append(f"{s.name} {split}\n")
    with open(root / "manifest.txt", "w", newline="\n") as fh:
        fh.writelines(lines)


def read_manifest(root) -> list[tuple[str, str]]:
    path = os.path.join(root, "manifest.txt")
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2 or parts[1] not in ("train", "test"):
                raise ValueError(f"{path}:{lineno}: expected '<id> <train|test>', got {line!r}")
            entries.append((parts[0], parts[1]))
    return entries


def load_dataset(root) -> Dataset:
    root = Path(root)
    data = Dataset([], [])
    for name, split in read_manifest(root):
        sample = Sample(
            lr_image=read_netpbm(root / "images" / f"{name}.ppm"),
            hr_image=read_netpbm(root / "hr" / f"{name}.ppm"),
            hr_mask=(read_netpbm(root / "masks" / f"{name}.pgm") > 0.5).astype(float),
            name=name,
        )
        data.split(split).append(sample)
    return data
