"""Image files, dataset splits and value-range conversions."""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp")


class ImageDecodeError(OSError):
    pass


@dataclass(frozen=True)
class DatasetSplit:
    root: str
    train: Tuple[str, ...]
    test: Tuple[str, ...]
    image_size: Tuple[int, int] = (256, 256)

    def __post_init__(self):
        overlap = set(self.train) & set(self.test)
        if overlap:
            raise ValueError(f"train and test share {len(overlap)} files, e.g. {sorted(overlap)[0]}")

    def paths(self, which: str) -> List[Path]:
        return [Path(self.root) / name for name in getattr(self, which)]

    def to_manifest(self) -> dict:
        return {"root": self.root, "image_size": list(self.image_size),
                "train": list(self.train), "test": list(self.test)}


def read_image(path) -> np.ndarray:
    """Decode an image file to H x W x 3 uint8 RGB."""
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise ImageDecodeError(f"cannot decode image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def write_png(path, img: np.ndarray):
    """Write H x W x 3 RGB or H x W gray uint8 as PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        raise TypeError(f"write_png expects uint8, got {arr.dtype}")
    if arr.ndim == 3:
        arr = cv2.cvtColor(arr, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), arr):
        raise OSError(f"could not write {path}")


def to_model_range(img_u8: np.ndarray) -> np.ndarray:
    return img_u8.astype(np.float32) / 127.5 - 1.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Model range [-1, 1] back to 8-bit; the only place rounding happens."""
    return np.clip(np.rint((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def resize_area(img: np.ndarray, target: Tuple[int, int]) -> np.ndarray:
    h, w = target
    if img.shape[:2] == (h, w):
        return img
    return cv2.resize(img, (w, h), interpolation=cv2.INTER_AREA)


def preprocess(img_file, target: Tuple[int, int] = (256, 256)) -> np.ndarray:
    """Decode, area-resize to ``target`` and map to [-1, 1] as H x W x 3 float32."""
    img = read_image(img_file).astype(np.float32)
    return resize_area(img, target) / 127.5 - 1.0


def list_images(root) -> List[str]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    return sorted(p.relative_to(root).as_posix() for p in root.rglob("*")
                  if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_split(root, train_fraction: float = 0.9, seed: int = 0,
               manifest: Optional[str] = None, image_size=(256, 256),
               write_manifest: Optional[str] = None, check_readable: bool = True) -> DatasetSplit:
    """Split the images under ``root`` into train and test.

    With ``manifest`` (a JSON file holding ``train`` and ``test`` lists) the
    split is taken verbatim. Otherwise the lexicographically sorted file list
    is shuffled with ``seed`` and cut at ``train_fraction``. Unreadable files
    are skipped with a warning.
    """
    if manifest is not None:
        data = json.loads(Path(manifest).read_text())
        split = DatasetSplit(str(root), tuple(data["train"]), tuple(data["test"]), tuple(image_size))
    else:
        if not 0.0 < train_fraction <= 1.0:
            raise ValueError("train_fraction must lie in (0, 1]")
        files = list_images(root)
        if check_readable:
            good = []
            for name in files:
                if cv2.imread(str(Path(root) / name), cv2.IMREAD_REDUCED_GRAYSCALE_8) is None:
                    continue
                good.append(name)
            skipped = len(files) - len(good)
            if skipped:
                log.warning("skipped %d unreadable image(s) under %s", skipped, root)
            files = good
        if not files:
            raise ValueError(f"no readable images under {root}")
        order = np.random.default_rng(seed).permutation(len(files))
        n_train = int(round(train_fraction * len(files)))
        split = DatasetSplit(str(root), tuple(files[i] for i in sorted(order[:n_train])),
                             tuple(files[i] for i in sorted(order[n_train:])), tuple(image_size))
    if write_manifest is not None:
        Path(write_manifest).parent.mkdir(parents=True, exist_ok=True)
        Path(write_manifest).write_text(json.dumps(split.to_manifest(), indent=1) + "\n")
    return split


def load_images(paths: Sequence, target) -> np.ndarray:
    """Preprocess files into an N x 3 x H x W float32 array."""
    return np.stack([preprocess(p, target).transpose(2, 0, 1) for p in paths]).astype(np.float32)


def synthetic_images(n: int, size=(64, 64), seed: int = 0) -> np.ndarray:
    """Deterministic toy scenes (N x H x W x 3 uint8) for smoke runs.

    Smooth colour gradient background with a few flat ellipses and
    rectangles, lightly blurred.
    """
    rng = np.random.default_rng(seed)
    h, w = size
    out = np.empty((n, h, w, 3), dtype=np.uint8)
    for i in range(n):
        grid = rng.uniform(30, 225, size=(3, 3, 3)).astype(np.float32)
        img = cv2.resize(grid, (w, h), interpolation=cv2.INTER_CUBIC)
        for _ in range(int(rng.integers(2, 5))):
            color = tuple(float(c) for c in rng.uniform(0, 255, 3))
            cx, cy = int(rng.integers(0, w)), int(rng.integers(0, h))
            if rng.random() < 0.5:
                axes = (int(rng.integers(w // 10, w // 3)), int(rng.integers(h // 10, h // 3)))
                cv2.ellipse(img, (cx, cy), axes, float(rng.uniform(0, 180)), 0, 360, color, -1)
            else:
                dx, dy = int(rng.integers(w // 8, w // 3)), int(rng.integers(h // 8, h // 3))
                cv2.rectangle(img, (cx - dx, cy - dy), (cx + dx, cy + dy), color, -1)
        img = cv2.GaussianBlur(img, (3, 3), 0.8)
        out[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return out
