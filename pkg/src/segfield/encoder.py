"""Convolutional image encoder and pixel-aligned feature lookup."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# (out_channels, stride) per 3x3 layer; input has 3 channels
STACK = ((16, 1), (32, 2), (32, 1), (64, 2))
KERNEL = 3
DOWNSCALE = int(np.prod([s for _, s in STACK]))
FEATURE_DIM = STACK[-1][0]


def init_encoder(rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    params = {}
    cin = 3
    for i, (cout, _) in enumerate(STACK):
        fan_in = cin * KERNEL * KERNEL
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, KERNEL, KERNEL))
        params[f"enc.conv{i}.w"] = Tensor(w.astype(dtype), requires_grad=True, name=f"enc.conv{i}.w")
        params[f"enc.conv{i}.b"] = Tensor(np.zeros(cout, dtype), requires_grad=True, name=f"enc.conv{i}.b")
        cin = cout
    return params


def encode(images, params: dict[str, Tensor]) -> Tensor:
    """(V, H, W, 3) images in [0, 1] -> (V, 64, ceil(H/4), ceil(W/4)) features.

    ReLU follows every layer except the last.
    """
    imgs = np.asarray(images.data if isinstance(images, Tensor) else images)
    if imgs.ndim == 3:
        imgs = imgs[None]
    if imgs.ndim != 4 or imgs.shape[-1] != 3:
        raise ValueError(f"expected (V, H, W, 3) images, got {imgs.shape}")
    dtype = params["enc.conv0.w"].dtype
    # center inputs around zero
    x = Tensor(np.ascontiguousarray(imgs.transpose(0, 3, 1, 2), dtype=dtype) - dtype.type(0.5))
    for i, (_, stride) in enumerate(STACK):
        x = ad.conv2d(x, params[f"enc.conv{i}.w"], params[f"enc.conv{i}.b"], stride=stride, padding=1)
        if i < len(STACK) - 1:
            x = ad.relu(x)
    return x


def check_extent(images, height: int, width: int) -> None:
    imgs = np.asarray(images)
    if imgs.shape[-3:-1] != (height, width):
        raise ValueError(f"image extent {imgs.shape[-3:-1]} does not match configured {(height, width)}")


def receptive_field(index: int) -> tuple[int, int]:
    """Inclusive range of input pixels that influence feature texel ``index`` along one axis."""
    lo = hi = index
    for _, stride in reversed(STACK):
        lo = lo * stride - 1
        hi = hi * stride + 1
    return lo, hi


def image_to_feature_coords(uv, downscale: int = DOWNSCALE) -> np.ndarray:
    """Continuous pixel coordinates -> feature-grid coordinates.

    Texel k is centered over pixel ``k * downscale`` whose center is at
    ``k * downscale + 0.5``.
    """
    return (np.asarray(uv) - 0.5) / downscale


@dataclass
class FeatureLookup:
    features: Tensor   # (P, C)
    out_of_view: np.ndarray


def sample_feature(fmap: Tensor, uv, out_of_view=None, downscale: int = DOWNSCALE) -> FeatureLookup:
    """Bilinear feature lookup at image pixel coordinates.

    ``fmap`` is (C, Hf, Wf). Points flagged in ``out_of_view`` get the zero
    vector; in-image points near the border are clamped to the edge texels.
    """
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    c, hf, wf = fmap.shape
    off = np.zeros(len(uv), bool) if out_of_view is None else np.asarray(out_of_view, bool)
    f = image_to_feature_coords(uv, downscale)
    f[:, 0] = np.clip(f[:, 0], 0, wf - 1)
    f[:, 1] = np.clip(f[:, 1], 0, hf - 1)
    f[off] = 0
    feats = ad.bilinear_sample_2d(fmap, f.astype(fmap.dtype), valid=~off)
    return FeatureLookup(feats, off)
