"""Generator and Wasserstein critic networks.

The generator encodes the masked image plus its mask with dilated 5x5
convolutions and max pooling, then decodes with resize-convolutions
(bilinear x2, reflection padding, 4x4 stride-1 conv) and a tanh output.
Holes are never special-cased inside the network: the mask enters only as an
input channel, and the reverse mask is applied to the output afterwards.
"""

import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Tuple

import torch
import torch.nn.functional as F
from torch import nn


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    input_channels: int = 4
    base_filters: int = 64
    kernel: int = 5
    dilation: int = 2
    leaky_slope: float = 0.2
    encoder_depth: int = 4
    decoder_kernel: int = 4
    upsample: int = 2
    widths: str = "constant"  # or "doubling"
    max_filters: int = 512
    output_channels: int = 3

    def __post_init__(self):
        if self.input_channels < 1 or self.output_channels < 1 or self.base_filters < 1:
            raise ValueError("channel counts must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("encoder kernel must be a positive odd size")
        if self.dilation < 1 or self.encoder_depth < 1 or self.decoder_kernel < 1:
            raise ValueError("dilation, encoder_depth and decoder_kernel must be >= 1")
        if self.upsample != 2:
            raise ValueError("only x2 upsampling is supported (matches 2x2 pooling)")
        if self.widths not in ("constant", "doubling"):
            raise ValueError(f"widths must be 'constant' or 'doubling', not {self.widths!r}")
        if not 0 <= self.leaky_slope < 1:
            raise ValueError("leaky_slope must lie in [0, 1)")

    def encoder_widths(self) -> Tuple[int, ...]:
        if self.widths == "constant":
            return (self.base_filters,) * self.encoder_depth
        return tuple(min(self.base_filters * 2 ** i, self.max_filters) for i in range(self.encoder_depth))

    def check_input_size(self, h: int, w: int):
        f = 2 ** self.encoder_depth
        if h % f or w % f:
            raise ValueError(f"input {h}x{w} not divisible by 2**encoder_depth = {f}")
        # reflection padding in the first decoder block needs a 2x2 bottleneck at least
        if min(h, w) < 2 * f:
            raise ValueError(f"input {h}x{w} too small for encoder_depth {self.encoder_depth}; "
                             f"minimum side is {2 * f}")


@dataclass(frozen=True)
class CriticSpec:
    input_channels: int = 3
    depth: int = 4
    base_filters: int = 64
    max_filters: int = 256
    kernel: int = 4
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.depth < 1 or self.base_filters < 1 or self.kernel < 2:
            raise ValueError("invalid critic spec")

    def conv_widths(self) -> Tuple[int, ...]:
        return tuple(min(self.base_filters * 2 ** i, self.max_filters) for i in range(self.depth))


def _same_pad(kernel: int, dilation: int = 1):
    # (left, right, top, bottom) for a stride-1 conv that keeps spatial size
    total = dilation * (kernel - 1)
    lo = total // 2
    return (lo, total - lo, lo, total - lo)


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        enc = spec.encoder_widths()
        self.encoder = nn.ModuleList()
        cin = spec.input_channels
        for cout in enc:
            self.encoder.append(nn.Conv2d(cin, cout, spec.kernel, dilation=spec.dilation,
                                          padding=spec.dilation * (spec.kernel - 1) // 2))
            cin = cout
        self.decoder = nn.ModuleList()
        for cout in reversed(enc):
            self.decoder.append(nn.Conv2d(cin, cout, spec.decoder_kernel))
            cin = cout
        self.output = nn.Conv2d(cin, spec.output_channels, spec.decoder_kernel)
        self._pad = _same_pad(spec.decoder_kernel)

    def _check(self, x, where):
        if not torch.isfinite(x).all():
            raise NonFiniteError(f"non-finite activation after {where}")
        return x

    def forward(self, masked_img, mask):
        """``masked_img`` N x 3 x H x W in [-1, 1]; ``mask`` N x 1 x H x W."""
        if masked_img.ndim != 4 or mask.ndim != 4 or mask.shape[1] != 1:
            raise ValueError(f"expected NCHW image and N1HW mask, got {tuple(masked_img.shape)} "
                             f"and {tuple(mask.shape)}")
        if masked_img.shape[0] != mask.shape[0] or masked_img.shape[2:] != mask.shape[2:]:
            raise ValueError(f"image {tuple(masked_img.shape)} and mask {tuple(mask.shape)} do not align")
        self.spec.check_input_size(*masked_img.shape[2:])
        slope = self.spec.leaky_slope
        x = torch.cat([masked_img, mask.to(masked_img.dtype)], dim=1)
        layer = 0
        for conv in self.encoder:
            x = F.max_pool2d(F.leaky_relu(conv(x), slope), 2)
            x = self._check(x, f"layer {layer} (encoder)")
            layer += 1
        for conv in self.decoder:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = F.leaky_relu(conv(F.pad(x, self._pad, mode="reflect")), slope)
            x = self._check(x, f"layer {layer} (decoder)")
            layer += 1
        x = torch.tanh(self.output(F.pad(x, self._pad, mode="reflect")))
        return self._check(x, f"layer {layer} (output)")


class Critic(nn.Module):
    """Strided conv stack, global average pool, linear scalar head. No normalisation."""

    def __init__(self, spec: CriticSpec):
        super().__init__()
        self.spec = spec
        self.convs = nn.ModuleList()
        cin = spec.input_channels
        for cout in spec.conv_widths():
            self.convs.append(nn.Conv2d(cin, cout, spec.kernel, stride=2, padding=(spec.kernel - 1) // 2))
            cin = cout
        self.head = nn.Linear(cin, 1)

    def forward(self, img):
        x = img
        for conv in self.convs:
            x = F.leaky_relu(conv(x), self.spec.leaky_slope)
        out = self.head(x.mean(dim=(2, 3))).squeeze(1)
        if not torch.isfinite(out).all():
            raise NonFiniteError("critic produced a non-finite score")
        return out


def init_params(module: nn.Module, seed: int, leaky_slope: float = 0.2):
    """Fan-in scaled uniform init from a private generator (global RNG untouched)."""
    gen = torch.Generator().manual_seed(seed)
    gain = math.sqrt(2.0 / (1 + leaky_slope ** 2))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                bound = gain * math.sqrt(3.0 / fan_in)
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen) * 2 * bound - bound)
                if m.bias is not None:
                    b = 1.0 / math.sqrt(fan_in)
                    m.bias.copy_(torch.rand(m.bias.shape, generator=gen) * 2 * b - b)
    return module


def build_generator(spec: GeneratorSpec = GeneratorSpec(), seed: int = 0) -> Generator:
    # torch's default layer init draws from the global RNG; keep callers' streams intact
    with torch.random.fork_rng(devices=[]):
        return init_params(Generator(spec), seed, spec.leaky_slope)


def build_critic(spec: CriticSpec = CriticSpec(), seed: int = 0) -> Critic:
    with torch.random.fork_rng(devices=[]):
        return init_params(Critic(spec), seed, spec.leaky_slope)


def generator_forward(gen: Generator, masked_img, mask):
    return gen(masked_img, mask)


def critic_forward(critic: Critic, img):
    return critic(img)


def clip_critic_params(critic: nn.Module, c: float) -> nn.Module:
    """Clamp every critic parameter into [-c, c] in place."""
    if c <= 0:
        raise ValueError("clip constant must be positive")
    with torch.no_grad():
        for p in critic.parameters():
            p.clamp_(-c, c)
    return critic


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def param_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def spec_dict(spec) -> dict:
    return asdict(spec)
