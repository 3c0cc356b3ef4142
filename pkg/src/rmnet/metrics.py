"""Image quality metrics and the bucketed evaluation harness.

All pixel metrics work on the 8-bit scale (model outputs are de-normalised
and rounded first). MAE is the plain per-pixel, per-channel mean.
"""

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.signal import convolve2d
from torch import nn

from .data import to_model_range, to_uint8
from .mask_synthesis import FULL_RANGE, HoleRatioBucket, MaskSourceConfig, sample_mask_in_bucket
from .masking import apply_mask, composite

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
FID_EPS = 1e-6
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WINDOW, SSIM_SIGMA = 11, 1.5
LUMA = np.array([0.299, 0.587, 0.114])


def _pair(gt, pred):
    a = np.asarray(gt, dtype=np.float64)
    b = np.asarray(pred, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mae(gt, pred) -> float:
    a, b = _pair(gt, pred)
    return float(np.mean(np.abs(a - b)))


def psnr(gt, pred, peak: float = 255.0, return_capped: bool = False):
    """10 log10(peak^2 / MSE) in dB; zero error gives ``PSNR_CAP``."""
    a, b = _pair(gt, pred)
    mse = float(np.mean((a - b) ** 2))
    capped = mse == 0.0
    value = PSNR_CAP if capped else min(PSNR_CAP, 10.0 * math.log10(peak ** 2 / mse))
    return (value, capped) if return_capped else value


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def luminance(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ LUMA
    if img.ndim == 2:
        return img
    raise ValueError(f"expected H x W or H x W x 3 image, got {img.shape}")


def ssim(gt, pred, peak: float = 255.0) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows (sigma 1.5)."""
    a, b = _pair(gt, pred)
    x, y = luminance(a), luminance(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    w = gaussian_window()
    filt = lambda z: convolve2d(z, w, mode="valid")  # noqa: E731  (window is symmetric)
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    c1, c2 = (SSIM_K1 * peak) ** 2, (SSIM_K2 * peak) ** 2
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2))
    return float(np.mean(smap))


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu1, sigma1, mu2, sigma2, eps: float = FID_EPS):
    """Frechet distance between two Gaussians; returns ``(value, regularised)``.

    The cross term uses Tr((S1^1/2 S2 S1^1/2)^1/2), which equals
    Tr((S1 S2)^1/2) but only needs symmetric square roots. Singular
    covariances get ``eps * I`` added to both and the result is flagged.
    """
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    s1, s2 = np.atleast_2d(sigma1).astype(np.float64), np.atleast_2d(sigma2).astype(np.float64)
    if mu1.shape != mu2.shape or s1.shape != s2.shape or s1.shape != (mu1.size, mu1.size):
        raise ValueError("mean / covariance shapes disagree")
    regularised = False
    tol = 1e-12 * max(1.0, float(np.abs(s1).max()), float(np.abs(s2).max()))
    if min(np.linalg.eigvalsh(s1).min(), np.linalg.eigvalsh(s2).min()) <= tol:
        eye = np.eye(mu1.size)
        s1, s2 = s1 + eps * eye, s2 + eps * eye
        regularised = True
    r1 = _sqrtm_psd(s1)
    cross = _sqrtm_psd(r1 @ s2 @ r1)
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross))
    return max(value, 0.0), regularised


def fid_from_embeddings(real: np.ndarray, fake: np.ndarray, return_flag: bool = False):
    real, fake = np.asarray(real, dtype=np.float64), np.asarray(fake, dtype=np.float64)
    if real.ndim != 2 or fake.ndim != 2 or real.shape[1] != fake.shape[1]:
        raise ValueError(f"embedding arrays must be N x D with equal D: {real.shape}, {fake.shape}")
    if len(real) < 2 or len(fake) < 2:
        raise ValueError("FID needs at least two samples per set")
    if min(len(real), len(fake)) < real.shape[1]:
        warnings.warn(f"FID with fewer samples ({min(len(real), len(fake))}) than embedding "
                      f"dimensions ({real.shape[1]}): covariance is singular and the value biased",
                      stacklevel=2)
    value, flag = frechet_distance(real.mean(0), np.cov(real, rowvar=False),
                                   fake.mean(0), np.cov(fake, rowvar=False))
    return (value, flag) if return_flag else value


@dataclass(frozen=True)
class EmbeddingExtractorSpec:
    source: str = "seeded_small_embedder"  # or "inception_checkpoint"
    seed: int = 0
    dim: int = 64
    checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.source not in ("seeded_small_embedder", "inception_checkpoint"):
            raise ValueError(f"unknown embedding source {self.source!r}")
        if self.source == "inception_checkpoint" and not self.checkpoint:
            raise ValueError("inception_checkpoint needs a checkpoint path")


class SmallEmbedder(nn.Module):
    """Fixed random conv net with global average pooling."""

    def __init__(self, dim: int, seed: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, dim, 3, stride=2, padding=1), nn.ReLU(),
        )
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.body:
                if isinstance(m, nn.Conv2d):
                    bound = math.sqrt(6.0 / m.weight[0].numel())
                    m.weight.copy_(torch.rand(m.weight.shape, generator=gen) * 2 * bound - bound)
                    m.bias.zero_()

    def forward(self, x):
        return self.body(x).mean(dim=(2, 3))


class InceptionEmbedder(nn.Module):
    """torchvision Inception-v3 pool features (2048-d) from a local state dict."""

    def __init__(self, checkpoint: str):
        super().__init__()
        from torchvision.models import inception_v3

        path = Path(checkpoint)
        if not path.is_file():
            raise FileNotFoundError(f"inception checkpoint {path} not found")
        net = inception_v3(weights=None, aux_logits=True, init_weights=False)
        net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
        net.fc = nn.Identity()
        self.net = net.eval()
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def forward(self, x):
        x = F.interpolate((x + 1) / 2, size=(299, 299), mode="bilinear", align_corners=False)
        return self.net((x - self.mean) / self.std)


def build_embedder(spec: EmbeddingExtractorSpec = EmbeddingExtractorSpec()) -> nn.Module:
    if spec.source == "inception_checkpoint":
        net = InceptionEmbedder(spec.checkpoint)
    else:
        net = SmallEmbedder(spec.dim, spec.seed)
    for p in net.parameters():
        p.requires_grad_(False)
    return net.eval()


def embed(embedder: nn.Module, images_u8: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Embed N x H x W x 3 uint8 images."""
    out = []
    with torch.no_grad():
        for i in range(0, len(images_u8), batch_size):
            x = torch.from_numpy(to_model_range(images_u8[i:i + batch_size]).transpose(0, 3, 1, 2).copy())
            out.append(embedder(x).double().numpy())
    return np.concatenate(out)


def fid(real_set: np.ndarray, fake_set: np.ndarray, embedder: nn.Module, return_flag: bool = False):
    if len(real_set) == 0 or len(fake_set) == 0:
        raise ValueError("FID needs non-empty image sets")
    return fid_from_embeddings(embed(embedder, real_set), embed(embedder, fake_set), return_flag)


@dataclass
class BucketScores:
    label: str
    n: int
    mae: float
    psnr: float
    ssim: float
    fid: float
    psnr_capped: int = 0
    fid_regularised: bool = False


@dataclass
class MetricReport:
    buckets: List[BucketScores]
    overall: BucketScores
    failures: List[dict] = field(default_factory=list)

    def rows(self):
        for s in self.buckets + [self.overall]:
            for metric in ("FID", "MAE", "PSNR", "SSIM"):
                yield {"bucket": s.label, "metric": metric, "value": getattr(s, metric.lower()), "n": s.n}

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=("bucket", "metric", "value", "n"))
            w.writeheader()
            for row in self.rows():
                w.writerow(row)
        return path


def _score(label, gts, outs, embedder) -> BucketScores:
    if not gts:
        nan = float("nan")
        return BucketScores(label, 0, nan, nan, nan, nan)
    p = [psnr(g, o, return_capped=True) for g, o in zip(gts, outs)]
    if len(gts) >= 2:
        fid_value, flag = fid(np.stack(gts), np.stack(outs), embedder, return_flag=True)
    else:
        fid_value, flag = float("nan"), False
    return BucketScores(
        label=label,
        n=len(gts),
        mae=float(np.mean([mae(g, o) for g, o in zip(gts, outs)])),
        psnr=float(np.mean([v for v, _ in p])),
        ssim=float(np.mean([ssim(g, o) for g, o in zip(gts, outs)])),
        fid=fid_value,
        psnr_capped=sum(c for _, c in p),
        fid_regularised=flag,
    )


def generator_predictor(generator) -> Callable:
    def predict(masked, masks):
        generator.eval()
        with torch.no_grad():
            return generator(masked, masks)
    return predict


def evaluate(predictor: Callable, images_u8: np.ndarray, mask_source: MaskSourceConfig,
             buckets: Sequence[HoleRatioBucket] = (), embedder: Optional[nn.Module] = None,
             seed: int = 0, max_tries: int = 200, batch_size: int = 8,
             on_sample: Optional[Callable] = None) -> MetricReport:
    """Inpaint every image once per bucket and score the composites.

    ``predictor(masked, masks)`` maps N x 3 x H x W model-range tensors and
    N x 1 x H x W masks to predictions. Only hole pixels of a prediction
    reach the scores. With no buckets, masks are drawn from [0.01, 0.6] and
    only the overall row is reported. ``on_sample(bucket, index, masked_u8,
    output_u8)`` is called for each scored sample.
    """
    images_u8 = np.asarray(images_u8)
    if images_u8.ndim != 4 or images_u8.shape[-1] != 3 or len(images_u8) == 0:
        raise ValueError("evaluate needs a non-empty N x H x W x 3 image set")
    if embedder is None:
        embedder = build_embedder()
    h, w = images_u8.shape[1:3]
    if tuple(mask_source.target_size) != (h, w):
        mask_source = replace(mask_source, target_size=(h, w))
    sampling = list(buckets) or [FULL_RANGE]
    per_bucket, failures = [], []
    all_gt, all_out = [], []
    for j, bucket in enumerate(sampling):
        gts, outs = [], []
        for start in range(0, len(images_u8), batch_size):
            idx = range(start, min(start + batch_size, len(images_u8)))
            ok, masks = [], []
            for i in idx:
                s = int(np.random.SeedSequence([seed, j, i]).generate_state(1)[0])
                try:
                    masks.append(sample_mask_in_bucket(mask_source, bucket, max_tries, seed=s))
                    ok.append(i)
                except Exception as exc:
                    failures.append({"bucket": str(bucket), "index": i, "error": repr(exc)})
            if not ok:
                continue
            gt = images_u8[ok].astype(np.float64)
            m = np.stack(masks).astype(np.float64)
            masked = torch.from_numpy(to_model_range(images_u8[ok]).transpose(0, 3, 1, 2).copy())
            mt = torch.from_numpy(m[:, None].astype(np.float32))
            masked = apply_mask(masked, mt)
            try:
                pred = predictor(masked, mt)
                pred = np.asarray(pred.detach().cpu() if hasattr(pred, "detach") else pred)
                pred_u8 = to_uint8(pred.transpose(0, 2, 3, 1)).astype(np.float64)
            except Exception as exc:
                failures.extend({"bucket": str(bucket), "index": i, "error": repr(exc)} for i in ok)
                continue
            out = composite(gt, pred_u8, m[..., None]).astype(np.uint8)
            for k, i in enumerate(ok):
                gts.append(images_u8[i])
                outs.append(out[k])
                if on_sample is not None:
                    on_sample(bucket, i, apply_mask(gt[k], m[k]).astype(np.uint8), out[k])
        if buckets:
            per_bucket.append(_score(str(bucket), gts, outs, embedder))
        all_gt.extend(gts)
        all_out.extend(outs)
    if failures:
        log.warning("%d sample(s) failed during evaluation", len(failures))
    return MetricReport(per_bucket, _score("overall", all_gt, all_out, embedder), failures)
