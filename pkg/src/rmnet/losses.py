"""Feature extractor and the generator / critic objectives.

The extractor is the VGG-19 convolutional stack cut after block3-conv3
(ReLU included). Weights come either from a converted checkpoint or from a
seeded random initialisation; either way they are frozen. Layer widths are
configurable so tests can run a narrow variant with the same interface.
"""

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from .masking import reverse_mask

# VGG-19 up to and including block3-conv3; "M" is a 2x2 max pool.
VGG19_BLOCK3_CONV3 = (64, 64, "M", 128, 128, "M", 256, 256, 256)
# Narrower stand-ins with the same depth, pooling and output width. With
# random weights, wider layers keep more pixel detail in the features.
HALF_BLOCK3_CONV3 = (32, 32, "M", 64, 64, "M", 128, 128, 256)
SMALL_BLOCK3_CONV3 = (16, 16, "M", 32, 32, "M", 32, 32, 256)

# BGR channel means of the original VGG training data, on the 0-255 scale
CAFFE_MEAN_BGR = (103.939, 116.779, 123.68)
TORCHVISION_MEAN_RGB = (0.485, 0.456, 0.406)
TORCHVISION_STD_RGB = (0.229, 0.224, 0.225)

# torchvision ``vgg19().features`` indices of the first seven convolutions
_TORCHVISION_CONV_INDICES = (0, 2, 5, 7, 10, 12, 14)


class ExtractorCheckpointError(OSError):
    pass


@dataclass(frozen=True)
class FeatureExtractorSpec:
    layers: Tuple[Union[int, str], ...] = VGG19_BLOCK3_CONV3
    weights_source: str = "seeded_random"  # or "pretrained"
    seed: int = 0
    checkpoint: Optional[str] = None
    preprocessing: str = "caffe"  # or "torchvision"

    def __post_init__(self):
        if self.weights_source not in ("seeded_random", "pretrained"):
            raise ValueError(f"unknown weights_source {self.weights_source!r}")
        if self.weights_source == "pretrained" and not self.checkpoint:
            raise ValueError("pretrained extractor needs a checkpoint path")
        if self.preprocessing not in ("caffe", "torchvision"):
            raise ValueError(f"unknown preprocessing {self.preprocessing!r}")
        if not any(isinstance(v, int) for v in self.layers):
            raise ValueError("extractor needs at least one convolution")


class FeatureExtractor(nn.Module):
    """Frozen conv stack mapping a model-range image batch to features."""

    def __init__(self, spec: FeatureExtractorSpec):
        super().__init__()
        self.spec = spec
        self.convs = nn.ModuleList()
        cin = 3
        for v in spec.layers:
            if v != "M":
                self.convs.append(nn.Conv2d(cin, int(v), 3, padding=1))
                cin = int(v)
        self.out_channels = cin
        if spec.weights_source == "pretrained":
            self._load(Path(spec.checkpoint))
        else:
            gen = torch.Generator().manual_seed(spec.seed)
            with torch.no_grad():
                for conv in self.convs:
                    fan_in = conv.weight[0].numel()
                    bound = math.sqrt(6.0 / fan_in)
                    conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen) * 2 * bound - bound)
                    conv.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        if spec.preprocessing == "caffe":
            mean = torch.tensor(CAFFE_MEAN_BGR[::-1]).view(1, 3, 1, 1)
            std = torch.ones(1, 3, 1, 1)
        else:
            mean = torch.tensor(TORCHVISION_MEAN_RGB).view(1, 3, 1, 1)
            std = torch.tensor(TORCHVISION_STD_RGB).view(1, 3, 1, 1)
        self.register_buffer("mean", mean, persistent=False)
        self.register_buffer("std", std, persistent=False)

    def _load(self, path: Path):
        if not path.is_file():
            raise ExtractorCheckpointError(f"extractor checkpoint {path} not found")
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise ExtractorCheckpointError(f"cannot read extractor checkpoint {path}: {exc}") from exc
        if "convs.0.weight" not in state:
            # torchvision vgg19 layout
            remapped = {}
            for i, idx in enumerate(_TORCHVISION_CONV_INDICES[:len(self.convs)]):
                for kind in ("weight", "bias"):
                    key = f"features.{idx}.{kind}"
                    if key not in state:
                        raise ExtractorCheckpointError(f"{path} lacks {key}")
                    remapped[f"convs.{i}.{kind}"] = state[key]
            state = remapped
        try:
            self.load_state_dict(state, strict=False)
        except RuntimeError as exc:
            raise ExtractorCheckpointError(f"checkpoint {path} does not fit the extractor: {exc}") from exc

    def preprocess(self, img):
        if self.spec.preprocessing == "caffe":
            # [-1, 1] RGB -> [0, 255] BGR minus channel means
            x = (img + 1.0) * 127.5
            return x.flip(1) - self.mean.to(x.dtype).flip(1)
        x = (img + 1.0) * 0.5
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)

    def forward(self, img):
        x = self.preprocess(img)
        convs = iter(self.convs)
        for v in self.spec.layers:
            if v == "M":
                x = F.max_pool2d(x, 2)
            else:
                x = F.relu(next(convs)(x))
        return x

    def identity(self) -> str:
        h = hashlib.sha256()
        for name, t in self.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        src = self.spec.checkpoint if self.spec.weights_source == "pretrained" else f"seed={self.spec.seed}"
        return f"{self.spec.weights_source}({src}):{h.hexdigest()[:16]}"


def build_extractor(spec: FeatureExtractorSpec = FeatureExtractorSpec()) -> FeatureExtractor:
    return FeatureExtractor(spec)


def extract_features(fx: FeatureExtractor, img):
    return fx(img)


def _target_features(fx, img):
    if img.requires_grad:
        return fx(img)
    with torch.no_grad():
        return fx(img)


def _check_pair(gt, pred):
    if tuple(gt.shape) != tuple(pred.shape):
        raise ValueError(f"ground truth {tuple(gt.shape)} and prediction {tuple(pred.shape)} differ")


def perceptual_loss(fx: FeatureExtractor, gt, pred):
    """Mean squared feature difference over every feature element in the batch."""
    _check_pair(gt, pred)
    return torch.mean((_target_features(fx, gt) - fx(pred)) ** 2)


def reverse_mask_loss(fx: FeatureExtractor, gt, pred, mask):
    """Perceptual loss between the hole regions only.

    Both images are multiplied by the reverse mask in pixel space before
    feature extraction, so visible pixels contribute nothing.
    """
    _check_pair(gt, pred)
    rm = reverse_mask(mask).to(pred.dtype)
    return torch.mean((_target_features(fx, gt * rm) - fx(pred * rm)) ** 2)


class GeneratorLoss(NamedTuple):
    total: torch.Tensor
    perceptual: torch.Tensor
    reverse_mask: torch.Tensor


def check_lambda(lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return lam


def generator_loss(fx: FeatureExtractor, gt, pred, mask, lam: float) -> GeneratorLoss:
    """(1 - lam) * perceptual + lam * reverse-mask, with both components."""
    check_lambda(lam)
    lp = perceptual_loss(fx, gt, pred)
    lrm = reverse_mask_loss(fx, gt, pred, mask)
    return GeneratorLoss((1.0 - lam) * lp + lam * lrm, lp, lrm)


def wasserstein_loss(critic_real, critic_fake):
    """mean(real scores) - mean(fake scores). The critic maximises this."""
    if critic_real.numel() == 0 or critic_fake.numel() == 0:
        raise ValueError("wasserstein_loss needs non-empty score batches")
    return critic_real.mean() - critic_fake.mean()
