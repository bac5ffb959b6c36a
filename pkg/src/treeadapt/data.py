"""Point annotations, ground-truth density maps, augmentation and synthetic domains."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

DEFAULT_SIGMA = 4.0
TRUNCATE = 4.0  # kernel support, in sigmas


class DataError(ValueError):
    """Rejected input to a data operation."""


class MissingAnnotationError(FileNotFoundError):
    pass


class AnnotationParseError(ValueError):
    def __init__(self, path, row, line):
        self.path = str(path)
        self.row = row
        self.line = line
        super().__init__(f"{path}: cannot parse row {row}: {line!r}")


def as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise DataError("point coordinates must be finite")
    return pts


@dataclass(frozen=True, eq=False)
class Sample:
    """One labelled image. ``image`` is HxWx3 in [0, 1], ``points`` is Nx2 (x, y)."""

    image: np.ndarray
    points: np.ndarray
    density: np.ndarray
    domain: str = "source"
    name: str = ""

    @property
    def count(self) -> int:
        return len(self.points)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]


def make_sample(image, points, domain="source", name="", sigma=DEFAULT_SIGMA) -> Sample:
    image = np.asarray(image, dtype=np.float32)
    pts = as_points(points)
    h, w = image.shape[:2]
    density = points_to_density(pts, h, w, sigma)
    for arr in (image, pts, density):
        arr.setflags(write=False)
    return Sample(image, pts, density, domain, name)


def points_to_density(points, height: int, width: int, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Sum of unit-mass Gaussian kernels, one per point.

    Each kernel is cut at ``TRUNCATE * sigma`` and at the image border, then
    rescaled so that its retained mass is exactly one.
    """
    if sigma <= 0:
        raise DataError(f"sigma must be positive, got {sigma}")
    pts = as_points(points)
    out = np.zeros((height, width), dtype=np.float64)
    if len(pts) == 0:
        return out.astype(np.float32)
    if np.any(pts[:, 0] < 0) or np.any(pts[:, 0] >= width) or np.any(pts[:, 1] < 0) or np.any(pts[:, 1] >= height):
        raise DataError(f"point outside {width}x{height} image")
    r = int(math.ceil(TRUNCATE * sigma))
    for x, y in pts:
        cx, cy = int(round(x)), int(round(y))
        x0, x1 = max(cx - r, 0), min(cx + r + 1, width)
        y0, y1 = max(cy - r, 0), min(cy + r + 1, height)
        gx = np.exp(-((np.arange(x0, x1) - x) ** 2) / (2 * sigma**2))
        gy = np.exp(-((np.arange(y0, y1) - y) ** 2) / (2 * sigma**2))
        k = np.outer(gy, gx)
        out[y0:y1, x0:x1] += k / k.sum()
    return out.astype(np.float32)


def inside_box(points, box) -> np.ndarray:
    """Boolean mask of points in the half-open box ``(x0, y0, x1, y1)``."""
    pts = as_points(points)
    x0, y0, x1, y1 = box
    return (pts[:, 0] >= x0) & (pts[:, 0] < x1) & (pts[:, 1] >= y0) & (pts[:, 1] < y1)


def sample_cutmix_box(height, width, rng: np.random.Generator, area=(0.1, 0.5), aspect=(0.5, 2.0)):
    frac = rng.uniform(*area)
    ratio = math.exp(rng.uniform(math.log(aspect[0]), math.log(aspect[1])))
    bw = min(width, max(1, int(round(math.sqrt(frac * height * width * ratio)))))
    bh = min(height, max(1, int(round(math.sqrt(frac * height * width / ratio)))))
    x0 = int(rng.integers(0, width - bw + 1))
    y0 = int(rng.integers(0, height - bh + 1))
    return (x0, y0, x0 + bw, y0 + bh)


def cutmix(a: Sample, b: Sample, box=None, seed: int = 0, sigma: float = DEFAULT_SIGMA) -> Sample:
    """Paste ``b``'s box region into ``a``. A random box is drawn from ``seed`` when ``box`` is None."""
    if a.image.shape != b.image.shape:
        raise DataError(f"cutmix size mismatch: {a.image.shape} vs {b.image.shape}")
    h, w = a.shape
    if box is None:
        box = sample_cutmix_box(h, w, np.random.default_rng(seed))
    x0, y0, x1, y1 = (int(v) for v in box)
    if not (0 <= x0 <= x1 <= w and 0 <= y0 <= y1 <= h):
        raise DataError(f"box {box} outside {w}x{h} image")
    image = a.image.copy()
    image[y0:y1, x0:x1] = b.image[y0:y1, x0:x1]
    pts = np.concatenate([a.points[~inside_box(a.points, box)], b.points[inside_box(b.points, box)]])
    return make_sample(image, pts, a.domain, a.name, sigma)


def crop_flip(sample: Sample, offset, size: int, flip: bool, sigma: float = DEFAULT_SIGMA) -> Sample:
    ox, oy = offset
    h, w = sample.shape
    if size > min(h, w):
        raise DataError(f"crop size {size} exceeds image {w}x{h}")
    image = sample.image[oy:oy + size, ox:ox + size]
    pts = sample.points - np.array([ox, oy], dtype=np.float64)
    keep = (pts[:, 0] >= 0) & (pts[:, 0] < size) & (pts[:, 1] >= 0) & (pts[:, 1] < size)
    pts = pts[keep]
    if flip:
        image = image[:, ::-1]
        pts = np.column_stack([size - 1 - pts[:, 0], pts[:, 1]])
    return make_sample(np.ascontiguousarray(image), pts, sample.domain, sample.name, sigma)


def random_crop_flip(sample: Sample, size: int, seed, flip_prob: float = 0.5, sigma: float = DEFAULT_SIGMA) -> Sample:
    h, w = sample.shape
    if size > min(h, w):
        raise DataError(f"crop size {size} exceeds image {w}x{h}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ox = int(rng.integers(0, w - size + 1))
    oy = int(rng.integers(0, h - size + 1))
    flip = bool(rng.random() < flip_prob)
    return crop_flip(sample, (ox, oy), size, flip, sigma)


# --- synthetic domains -------------------------------------------------------

@dataclass
class DomainProfile:
    """Rendering recipe for one synthetic domain of overhead tree-like blobs."""

    blob_radius_range: tuple[float, float] = (2.5, 4.0)
    blob_count_range: tuple[int, int] = (5, 25)
    background_style: str = "flat"
    chroma_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    occlusion_prob: float = 0.0
    name: str = "domain"
    background_color: tuple[float, float, float] = (0.55, 0.48, 0.35)
    crown_color: tuple[float, float, float] = (0.12, 0.35, 0.10)

    def __post_init__(self):
        self.blob_radius_range = tuple(float(v) for v in self.blob_radius_range)
        self.blob_count_range = tuple(int(v) for v in self.blob_count_range)
        self.chroma_shift = tuple(float(v) for v in self.chroma_shift)
        self.background_color = tuple(float(v) for v in self.background_color)
        self.crown_color = tuple(float(v) for v in self.crown_color)
        lo, hi = self.blob_radius_range
        if not 0 < lo <= hi:
            raise DataError(f"bad blob_radius_range {self.blob_radius_range}")
        lo, hi = self.blob_count_range
        if not 0 <= lo <= hi:
            raise DataError(f"bad blob_count_range {self.blob_count_range}")
        if self.background_style not in ("flat", "gradient", "noise"):
            raise DataError(f"unknown background_style {self.background_style!r}")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise DataError("occlusion_prob must be in [0, 1]")
        if len(self.chroma_shift) != 3:
            raise DataError("chroma_shift must have 3 components")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainProfile":
        return cls(**d)


SOURCE_PROFILE = DomainProfile(name="source")
TARGET_PROFILE = DomainProfile(
    name="target",
    blob_radius_range=(4.0, 6.0),
    blob_count_range=(15, 35),
    background_style="noise",
    chroma_shift=(0.15, -0.05, 0.25),
    occlusion_prob=0.2,
    background_color=(0.40, 0.42, 0.30),
    crown_color=(0.05, 0.22, 0.06),
)


def _background(profile: DomainProfile, size: int, rng: np.random.Generator) -> np.ndarray:
    base = np.array(profile.background_color) + rng.uniform(-0.03, 0.03, 3)
    img = np.broadcast_to(base, (size, size, 3)).copy()
    if profile.background_style == "gradient":
        ramp = np.linspace(-0.1, 0.1, size)
        angle = rng.uniform(0, 2 * np.pi)
        g = np.cos(angle) * ramp[None, :] + np.sin(angle) * ramp[:, None]
        img += g[..., None]
    elif profile.background_style == "noise":
        img += rng.normal(0.0, 0.05, (size, size, 1))
    return img


def render_sample(profile: DomainProfile, size: int, rng: np.random.Generator, domain: str, name: str = "",
                  sigma: float = DEFAULT_SIGMA) -> Sample:
    img = _background(profile, size, rng)
    n = int(rng.integers(profile.blob_count_range[0], profile.blob_count_range[1] + 1))
    pts = np.column_stack([rng.integers(0, size, n), rng.integers(0, size, n)]).astype(np.float64)
    yy, xx = np.mgrid[0:size, 0:size]
    crown = np.array(profile.crown_color)
    for x, y in pts:
        r = rng.uniform(*profile.blob_radius_range)
        d2 = (xx - x) ** 2 + (yy - y) ** 2
        # soft-edged crown, darker core
        alpha = np.clip(1.0 - (np.sqrt(d2) - r + 1.0) / 2.0, 0.0, 1.0)
        shade = crown * (0.8 + 0.4 * np.clip(np.sqrt(d2) / r, 0, 1))[..., None]
        img = img * (1 - alpha[..., None]) + shade * alpha[..., None]
        if rng.random() < profile.occlusion_prob:
            # partial occluder: a background-coloured bar over one side of the crown
            dx, dy = rng.uniform(-1, 1, 2)
            side = ((xx - x) * dx + (yy - y) * dy > 0) & (d2 <= (r + 1) ** 2)
            img[side] = 0.5 * img[side] + 0.5 * np.array(profile.background_color)
    img = np.clip(img + np.array(profile.chroma_shift), 0.0, 1.0)
    return make_sample(img.astype(np.float32), pts, domain, name, sigma)


def generate_synthetic(profile: DomainProfile, n: int, size: int, seed: int, domain: str | None = None,
                       sigma: float = DEFAULT_SIGMA) -> list[Sample]:
    if n <= 0:
        raise DataError("n must be positive")
    rng = np.random.default_rng(seed)
    domain = domain or profile.name
    return [render_sample(profile, size, rng, domain, f"{profile.name}_{i:05d}", sigma) for i in range(n)]


# --- on-disk layout ----------------------------------------------------------

def save_dataset(samples: Sequence[Sample], root, split: str, profile: DomainProfile | None = None) -> Path:
    """Write ``<root>/<split>/images/*.png`` and ``labels/*.csv``."""
    root = Path(root)
    img_dir, lab_dir = root / split / "images", root / split / "labels"
    img_dir.mkdir(parents=True, exist_ok=True)
    lab_dir.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        name = s.name or f"{i:05d}"
        arr = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, "RGB").save(img_dir / f"{name}.png")
        with open(lab_dir / f"{name}.csv", "w") as fh:
            for x, y in s.points:
                fh.write(f"{int(round(x))},{int(round(y))}\n")
    if profile is not None:
        with open(root / "profile.json", "w") as fh:
            json.dump(profile.to_dict(), fh, indent=2)
    return root / split


def read_points(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                if len(parts) != 2:
                    raise ValueError
                rows.append((float(parts[0]), float(parts[1])))
            except ValueError:
                raise AnnotationParseError(path, i, line) from None
    return np.array(rows, dtype=np.float64).reshape(-1, 2)


def load_image(path) -> np.ndarray:
    """RGB image as float32 H x W x 3 in [0, 1]."""
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def load_dataset(root, split: str = "train", sigma: float = DEFAULT_SIGMA, domain: str = "source") -> list[Sample]:
    if split not in ("train", "test"):
        raise DataError(f"unknown split {split!r}")
    img_dir = Path(root) / split / "images"
    lab_dir = Path(root) / split / "labels"
    if not img_dir.is_dir():
        raise FileNotFoundError(f"image directory not found: {img_dir}")
    samples = []
    for img_path in sorted(img_dir.glob("*.png")):
        lab_path = lab_dir / (img_path.stem + ".csv")
        if not lab_path.exists():
            raise MissingAnnotationError(f"missing annotation file {lab_path}")
        samples.append(make_sample(load_image(img_path), read_points(lab_path), domain, img_path.stem, sigma))
    return samples


def load_profile(path) -> DomainProfile:
    path = Path(path)
    if path.is_dir():
        path = path / "profile.json"
    with open(path) as fh:
        return DomainProfile.from_dict(json.load(fh))
