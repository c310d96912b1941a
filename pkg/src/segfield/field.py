"""Image-conditioned radiance / density / semantic field.

Per conditioning view i a query point x (with direction d) becomes

    H(cat[E(I_i) sampled at pi_i(x), posenc(local_i(x)), local_i(d)])

The per-view vectors are averaged over views and passed through the shared
trunk G with three heads: color (sigmoid), density (softplus) and semantic
logits over C+1 classes (index 0 = background).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import Intrinsics, Pose, project, rotate
from .encoder import DOWNSCALE, FEATURE_DIM, sample_feature


@dataclass(frozen=True)
class FieldConfig:
    num_classes: int = 2          # part classes C, background excluded
    hidden: int = 64
    n_frequencies: int = 6
    include_raw: bool = True
    feature_dim: int = FEATURE_DIM

    @property
    def posenc_dim(self) -> int:
        return 3 * (int(self.include_raw) + 2 * self.n_frequencies)

    @property
    def input_dim(self) -> int:
        return self.feature_dim + self.posenc_dim + 3


def posenc(x, n_frequencies: int = 6, include_raw: bool = True) -> np.ndarray:
    """[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)].

    x is (..., 3); frequency bands are laid out band-major, coordinates inner.
    """
    if n_frequencies < 1:
        raise ValueError("n_frequencies must be >= 1")
    x = np.asarray(x)
    parts = [x] if include_raw else []
    for k in range(n_frequencies):
        arg = x * x.dtype.type((2.0 ** k) * np.pi) if x.dtype.kind == "f" else (2.0 ** k) * np.pi * x
        parts += [np.sin(arg), np.cos(arg)]
    return np.concatenate(parts, axis=-1)


def _linear(rng, fan_in, fan_out, dtype, scale=1.0):
    w = rng.normal(0.0, scale * np.sqrt(2.0 / fan_in), (fan_in, fan_out)).astype(dtype)
    return w, np.zeros(fan_out, dtype)


def init_field(cfg: FieldConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    """H: in->W, W->W, W->W; G trunk: W->W, W->W; heads W->3, W->1, W->C+1.

    Residual links join every W->W layer.
    """
    w = cfg.hidden
    shapes = {
        "H0": (cfg.input_dim, w, 1.0), "H1": (w, w, 0.5), "H2": (w, w, 0.5),
        "G0": (w, w, 0.5), "G1": (w, w, 0.5),
        "head_rgb": (w, 3, 0.5), "head_sigma": (w, 1, 0.5), "head_sem": (w, cfg.num_classes + 1, 0.5),
    }
    params = {}
    for name, (fi, fo, sc) in shapes.items():
        wt, b = _linear(rng, fi, fo, dtype, sc)
        params[f"field.{name}.w"] = Tensor(wt, requires_grad=True, name=f"field.{name}.w")
        params[f"field.{name}.b"] = Tensor(b, requires_grad=True, name=f"field.{name}.b")
    return params


@dataclass
class ConditioningSet:
    """Encoded source views: features (V, C, Hf, Wf) plus the matching cameras."""

    features: Tensor
    cameras: list[tuple[Intrinsics, Pose]] = field(default_factory=list)
    downscale: int = DOWNSCALE

    def __post_init__(self):
        if len(self.cameras) != self.features.shape[0]:
            raise ValueError(f"{self.features.shape[0]} feature maps but {len(self.cameras)} cameras")

    def __len__(self) -> int:
        return len(self.cameras)

    def subset(self, idx) -> "ConditioningSet":
        idx = list(idx)
        return ConditioningSet(ad.gather(self.features, np.asarray(idx, dtype=np.int64), 0),
                               [self.cameras[i] for i in idx], self.downscale)


@dataclass
class FieldOutput:
    sigma: Tensor    # (P,)
    rgb: Tensor      # (P, 3)
    logits: Tensor   # (P, C+1)


@dataclass
class FieldSample:
    sigma: float
    rgb: np.ndarray
    logits: np.ndarray


def _dense(x: Tensor, params, name: str) -> Tensor:
    return ad.linear(x, params[f"field.{name}.w"], params[f"field.{name}.b"])


def view_inputs(cond: ConditioningSet, i: int, points: np.ndarray, dirs: np.ndarray,
                cfg: FieldConfig) -> Tensor:
    """cat[sampled feature, posenc(local coords), local direction] for view i; (P, input_dim)."""
    intr, pose = cond.cameras[i]
    proj = project(points, intr, pose)
    fmap = ad.getitem(cond.features, i) if len(cond) > 1 else ad.reshape(cond.features, cond.features.shape[1:])
    look = sample_feature(fmap, proj.uv, ~proj.in_frame, cond.downscale)
    dtype = cond.features.dtype
    local = rotate(points - pose.translation, pose.rotation).astype(dtype)
    d_local = rotate(dirs, pose.rotation).astype(dtype)
    extra = np.concatenate([posenc(local, cfg.n_frequencies, cfg.include_raw), d_local], axis=1)
    return ad.concat([look.features, Tensor(extra)], axis=1)


def per_view_feature(inputs: Tensor, params) -> Tensor:
    """The per-view MLP H with residual links on its W->W layers."""
    h = _dense(inputs, params, "H0")
    h = h + _dense(ad.relu(h), params, "H1")
    h = h + _dense(ad.relu(h), params, "H2")
    return h


def global_heads(feat: Tensor, params) -> FieldOutput:
    g = feat + _dense(ad.relu(feat), params, "G0")
    g = g + _dense(ad.relu(g), params, "G1")
    a = ad.relu(g)
    sigma = ad.softplus(_dense(a, params, "head_sigma"))
    rgb = ad.sigmoid(_dense(a, params, "head_rgb"))
    logits = _dense(a, params, "head_sem")
    return FieldOutput(ad.reshape(sigma, (sigma.shape[0],)), rgb, logits)


def field_eval_batch(cond: ConditioningSet, points, dirs, params, cfg: FieldConfig) -> FieldOutput:
    """Evaluate the field at (P, 3) points with (P, 3) directions."""
    if len(cond) == 0:
        raise ValueError("field evaluation needs at least one conditioning view")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if points.shape != dirs.shape or points.shape[1:] != (3,):
        raise ValueError(f"points {points.shape} and dirs {dirs.shape} must both be (P, 3)")
    p = len(points)
    v = len(cond)
    stacked = ad.concat([view_inputs(cond, i, points, dirs, cfg) for i in range(v)], axis=0)
    feats = per_view_feature(stacked, params)
    pooled = ad.mean(ad.reshape(feats, (v, p, cfg.hidden)), axis=0)
    return global_heads(pooled, params)


def field_eval(cond: ConditioningSet, x, d, params, cfg: FieldConfig) -> FieldSample:
    out = field_eval_batch(cond, np.reshape(x, (1, 3)), np.reshape(d, (1, 3)), params, cfg)
    return FieldSample(float(out.sigma.data[0]), out.rgb.data[0].copy(), out.logits.data[0].copy())


def field_eval_chunked(cond: ConditioningSet, points, dirs, params, cfg: FieldConfig,
                       chunk: int = 16384) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Untracked evaluation of many points; returns (sigma, rgb, logits) arrays."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    sig, rgb, lg = [], [], []
    with ad.no_trace():
        for s in range(0, len(points), chunk):
            out = field_eval_batch(cond, points[s : s + chunk], dirs[s : s + chunk], params, cfg)
            sig.append(out.sigma.data)
            rgb.append(out.rgb.data)
            lg.append(out.logits.data)
    if not sig:
        k = cfg.num_classes + 1
        return np.zeros(0), np.zeros((0, 3)), np.zeros((0, k))
    return np.concatenate(sig), np.concatenate(rgb), np.concatenate(lg)
