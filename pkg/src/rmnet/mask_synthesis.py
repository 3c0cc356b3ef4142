"""Irregular stroke masks and external mask-set loading.

Synthetic masks are random-walk polylines rasterised as holes, a stand-in for
hand-drawn stroke datasets. External mask files are expected to draw strokes
dark on a bright background; ``strokes_are_holes`` decides whether those dark
strokes become holes (the default) or the only visible region.
"""

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import cv2
import numpy as np

from .masking import hole_ratio

log = logging.getLogger(__name__)

MIN_CANVAS = 8


class BucketUnsatisfiableError(RuntimeError):
    pass


class MaskReadError(OSError):
    pass


@dataclass(frozen=True)
class HoleRatioBucket:
    lo: float
    hi: float

    def __post_init__(self):
        if not (0.0 <= self.lo < self.hi <= 1.0):
            raise ValueError(f"invalid bucket [{self.lo}, {self.hi}]: need 0 <= lo < hi <= 1")

    def contains(self, ratio: float) -> bool:
        return self.lo <= ratio <= self.hi

    def __str__(self):
        return f"[{self.lo:g},{self.hi:g}]"


FULL_RANGE = HoleRatioBucket(0.01, 0.6)


@dataclass(frozen=True)
class StrokeSpec:
    num_strokes: Union[int, Tuple[int, int]] = 4
    vertices: Tuple[int, int] = (4, 12)
    thickness: Tuple[int, int] = (5, 15)
    canvas: Tuple[int, int] = (256, 256)

    def __post_init__(self):
        lo, hi = self.stroke_range
        if not 0 <= lo <= hi:
            raise ValueError(f"num_strokes {self.num_strokes} invalid")
        lo, hi = self.vertices
        if not (2 <= lo <= hi):
            raise ValueError(f"vertex range {self.vertices} invalid (need 2 <= lo <= hi)")
        lo, hi = self.thickness
        if not (1 <= lo <= hi):
            raise ValueError(f"thickness range {self.thickness} invalid (need 1 <= lo <= hi)")

    @property
    def stroke_range(self) -> Tuple[int, int]:
        n = self.num_strokes
        return (n, n) if isinstance(n, int) else (int(n[0]), int(n[1]))


@dataclass(frozen=True)
class MaskSourceConfig:
    mode: str = "synthesize"
    directory: Optional[str] = None
    target_size: Tuple[int, int] = (256, 256)
    binarize_threshold: int = 127
    strokes_are_holes: bool = True
    seed: int = 0
    strokes: StrokeSpec = field(default_factory=StrokeSpec)

    def __post_init__(self):
        if self.mode not in ("synthesize", "load_directory"):
            raise ValueError(f"unknown mask source mode {self.mode!r}")
        if self.mode == "load_directory" and not self.directory:
            raise ValueError("load_directory mode needs a directory")
        if min(self.target_size) <= 0:
            raise ValueError(f"target_size must be positive, got {self.target_size}")
        if not 0 <= self.binarize_threshold <= 255:
            raise ValueError("binarize_threshold must lie in [0, 255]")


def synthesize_stroke_mask(spec: StrokeSpec, rng_seed: int) -> np.ndarray:
    """Draw ``spec.num_strokes`` random-walk polylines as holes.

    ``num_strokes`` is a count or an inclusive ``(lo, hi)`` range sampled per
    mask. Each stroke starts at a uniform random point, takes 4-12 (by default)
    vertices with a heading that turns by a random increment per segment, and
    gets one thickness drawn from ``spec.thickness``. Returns a uint8 H x W
    mask with 1 = visible. Same ``(spec, rng_seed)`` gives the same bytes.
    """
    h, w = spec.canvas
    if h < MIN_CANVAS or w < MIN_CANVAS:
        raise ValueError(f"canvas {h}x{w} too small (min {MIN_CANVAS}x{MIN_CANVAS})")
    rng = np.random.default_rng(rng_seed)
    canvas = np.ones((h, w), dtype=np.uint8)
    side = min(h, w)
    lo, hi = spec.stroke_range
    n_strokes = lo if lo == hi else int(rng.integers(lo, hi + 1))
    for _ in range(n_strokes):
        n_vertices = int(rng.integers(spec.vertices[0], spec.vertices[1] + 1))
        thickness = int(rng.integers(spec.thickness[0], spec.thickness[1] + 1))
        x, y = rng.uniform(0, w), rng.uniform(0, h)
        heading = rng.uniform(0, 2 * np.pi)
        points = [(x, y)]
        for _ in range(n_vertices - 1):
            heading += rng.uniform(-np.pi / 2, np.pi / 2)
            step = rng.uniform(0.04, 0.15) * side
            x = float(np.clip(x + step * np.cos(heading), 0, w - 1))
            y = float(np.clip(y + step * np.sin(heading), 0, h - 1))
            points.append((x, y))
        pts = np.round(np.array(points)).astype(np.int32).reshape(-1, 1, 2)
        cv2.polylines(canvas, [pts], isClosed=False, color=0, thickness=thickness, lineType=cv2.LINE_8)
    return canvas


def _to_gray(raw: np.ndarray) -> np.ndarray:
    if raw.ndim == 2:
        return raw
    if raw.ndim == 3 and raw.shape[2] == 1:
        return raw[..., 0]
    if raw.ndim == 3 and raw.shape[2] in (3, 4):
        warnings.warn("mask is not grayscale; converting by luminance", stacklevel=3)
        rgb = raw[..., :3].astype(np.float64)
        return rgb @ np.array([0.299, 0.587, 0.114])
    raise ValueError(f"cannot interpret array of shape {raw.shape} as a mask")


def binarize_and_resize(raw: np.ndarray, cfg: MaskSourceConfig) -> np.ndarray:
    """Area-resize a grayscale mask image and threshold it to {0, 1}.

    Pixels strictly brighter than the threshold form the bright class. With
    ``strokes_are_holes`` the bright background is visible (1); otherwise the
    mapping flips.
    """
    gray = _to_gray(np.asarray(raw)).astype(np.float32)
    th, tw = cfg.target_size
    if gray.shape != (th, tw):
        gray = cv2.resize(gray, (tw, th), interpolation=cv2.INTER_AREA)
    bright = (gray > cfg.binarize_threshold).astype(np.uint8)
    return bright if cfg.strokes_are_holes else 1 - bright


def load_mask_file(path, cfg: MaskSourceConfig) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise MaskReadError(f"cannot read mask file {path}")
    if raw.ndim == 3:
        # OpenCV loads colour as BGR(A)
        raw = raw[..., [2, 1, 0] + ([3] if raw.shape[2] == 4 else [])]
    return binarize_and_resize(raw, cfg)


def list_mask_files(directory) -> list:
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise MaskReadError(f"no PNG masks in {directory}")
    return files


def draw_mask(source: MaskSourceConfig, seed: int) -> np.ndarray:
    """One mask from ``source``; the seed selects strokes or a file."""
    if source.mode == "synthesize":
        spec = source.strokes
        if spec.canvas != tuple(source.target_size):
            spec = StrokeSpec(spec.num_strokes, spec.vertices, spec.thickness, tuple(source.target_size))
        return synthesize_stroke_mask(spec, seed)
    files = list_mask_files(source.directory)
    idx = int(np.random.default_rng(seed).integers(len(files)))
    return load_mask_file(files[idx], source)


def sample_mask_in_bucket(source: MaskSourceConfig, bucket: HoleRatioBucket,
                          max_tries: int = 100, seed: Optional[int] = None) -> np.ndarray:
    """Rejection-sample a mask whose hole ratio lies in ``bucket``.

    Attempt ``k`` draws with a seed derived from ``(seed, k)``, so the result
    depends only on the arguments.
    """
    base = source.seed if seed is None else seed
    for attempt in range(max_tries):
        draw_seed = int(np.random.SeedSequence([base, attempt]).generate_state(1)[0])
        mask = draw_mask(source, draw_seed)
        if bucket.contains(hole_ratio(mask)):
            return mask
    raise BucketUnsatisfiableError(
        f"no mask with hole ratio in {bucket} after {max_tries} tries (seed {base})"
    )
