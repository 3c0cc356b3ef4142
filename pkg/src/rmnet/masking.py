"""Element-wise masking operators.

Mask polarity is fixed: 1 marks a visible pixel, 0 marks a hole. Masks are
single channel (H x W, or N x 1 x H x W for batched tensors) and broadcast
over colour channels when applied. Every function here works on numpy arrays
and torch tensors alike.
"""

import numpy as np

UNIT_8BIT = (0.0, 255.0)
MODEL_RANGE = (-1.0, 1.0)


class ShapeMismatchError(ValueError):
    pass


class ValueRangeError(ValueError):
    pass


def _broadcast_mask(img, mask):
    ishape, mshape = tuple(img.shape), tuple(mask.shape)
    if mshape == ishape:
        return mask
    # H x W x C image, H x W mask
    if img.ndim == 3 and mshape == ishape[:2]:
        return mask[..., None]
    # channels-last image with a singleton trailing mask channel (H x W x 1, N x H x W x 1)
    if img.ndim == mask.ndim and mshape[-1] == 1 and mshape[:-1] == ishape[:-1]:
        return mask
    # N x C x H x W tensor, N x 1 x H x W (or 1 x 1 x H x W) mask
    if (img.ndim == 4 and mask.ndim == 4 and mshape[1] == 1
            and mshape[0] in (1, ishape[0]) and mshape[2:] == ishape[2:]):
        return mask
    raise ShapeMismatchError(f"mask of shape {mshape} cannot be applied to image of shape {ishape}")


def check_mask(m):
    """Raise ValueError unless every element of ``m`` is exactly 0 or 1."""
    arr = np.asarray(m.detach().cpu() if hasattr(m, "detach") else m)
    if arr.ndim < 2:
        raise ValueError(f"mask must be at least 2-D, got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("mask contains values other than 0 and 1")
    return m


def check_range(img, value_range):
    lo, hi = value_range
    arr = np.asarray(img.detach().cpu() if hasattr(img, "detach") else img)
    if arr.size and (arr.min() < lo or arr.max() > hi):
        raise ValueRangeError(
            f"image values [{arr.min()}, {arr.max()}] outside declared range [{lo}, {hi}]"
        )
    return img


def reverse_mask(m):
    """Complement of a binary mask: selects the hole pixels."""
    return 1 - m


def apply_mask(img, m):
    """Zero out the hole pixels of ``img``; visible pixels pass through."""
    return img * _broadcast_mask(img, m)


def masked_prediction(pred, m):
    """Keep only the hole pixels of ``pred``. ``m`` is the original mask."""
    return pred * _broadcast_mask(pred, reverse_mask(m))


def composite(ground, pred, m, value_range=None):
    """Visible pixels from ``ground``, hole pixels from ``pred``.

    ``ground`` may be the ground truth or the already-masked input; the two
    agree on every visible pixel. The sum is of disjoint supports, so
    ``composite(g, p, m) * m == g * m`` holds bit-exactly in float.
    """
    if tuple(ground.shape) != tuple(pred.shape):
        raise ShapeMismatchError(
            f"ground {tuple(ground.shape)} and prediction {tuple(pred.shape)} differ in shape"
        )
    if value_range is not None:
        check_range(ground, value_range)
        check_range(pred, value_range)
    return apply_mask(ground, m) + masked_prediction(pred, m)


def hole_ratio(m):
    """Fraction of pixels that are holes."""
    arr = np.asarray(m.detach().cpu() if hasattr(m, "detach") else m)
    return float(np.count_nonzero(arr == 0)) / arr.size
