"""Discretized volume rendering of color and semantics.

With per-sample optical depth tau_i = sigma_i * delta_i the transmittance in
front of sample i is T_i = exp(-sum_{j<i} tau_j) and its weight is
w_i = T_i - T_{i+1}, which equals T_i * (1 - exp(-tau_i)) and makes the
weights plus the final transmittance sum to one by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .camera import Intrinsics, Pose, RayBatch, generate_rays, stratified_sample
from .field import ConditioningSet, FieldConfig, field_eval_batch

WHITE = (1.0, 1.0, 1.0)
TRAIN_SAMPLES = 64
EVAL_SAMPLES = 128


@dataclass
class RaySampleBatch:
    t: np.ndarray        # (R, N) sorted
    deltas: np.ndarray   # (R, N), last segment runs to t_far

    @classmethod
    def from_t(cls, t: np.ndarray, t_far: float) -> "RaySampleBatch":
        t = np.atleast_2d(t)
        d = np.diff(t, axis=1, append=np.full((len(t), 1), t_far))
        if np.any(d <= 0):
            raise ValueError("sample positions must be strictly increasing and below t_far")
        return cls(t, d)


@dataclass
class Compositing:
    weights: Tensor      # (R, N)
    t_final: Tensor      # (R,)


@dataclass
class RenderedRays:
    color: Tensor        # (R, 3)
    logits: Tensor       # (R, C+1), aggregated
    weights: Tensor      # (R, N)
    t_final: Tensor      # (R,)
    depth: np.ndarray    # (R,) expected termination distance

    def probabilities(self) -> np.ndarray:
        return ad.softmax(self.logits, axis=-1).data


def compositing_weights(sigma, deltas) -> Compositing:
    """Per-sample weights and the transmittance left after the last sample.

    ``sigma`` and ``deltas`` are (R, N) (or (N,) for one ray).
    """
    sigma = as_tensor(sigma)
    deltas = np.asarray(deltas, dtype=sigma.dtype)
    if np.any(sigma.data < 0) or np.any(deltas < 0):
        raise ValueError("densities and segment lengths must be non-negative")
    if sigma.shape != deltas.shape:
        raise ValueError(f"sigma {sigma.shape} and deltas {deltas.shape} differ")
    single = sigma.ndim == 1
    if single:
        sigma = ad.reshape(sigma, (1, -1))
        deltas = deltas[None]
    # accumulate in f64 so the weights telescope to 1 - T_final at f32 precision
    dtype = sigma.dtype
    tau = ad.cast(sigma, np.float64) * deltas.astype(np.float64)
    before = ad.cumsum(tau, axis=1, exclusive=True)
    trans = ad.exp(-before)
    trans_next = ad.exp(-(before + tau))
    w = ad.cast(trans - trans_next, dtype)
    last = ad.getitem(trans_next, (slice(None), slice(-1, None)))
    t_final = ad.cast(ad.reshape(last, (w.shape[0],)), dtype)
    if single:
        w = ad.reshape(w, (w.shape[1],))
        t_final = ad.reshape(t_final, ())
    return Compositing(w, t_final)


def render_color(weights, t_final, rgb, background=WHITE) -> Tensor:
    """sum_i w_i c_i + T_final * background; rgb is (R, N, 3)."""
    weights, t_final, rgb = as_tensor(weights), as_tensor(t_final), as_tensor(rgb)
    bg = np.asarray(background, dtype=rgb.dtype)
    wc = ad.sum(ad.reshape(weights, weights.shape + (1,)) * rgb, axis=-2)
    return wc + ad.reshape(t_final, t_final.shape + (1,)) * bg


def render_semantic(weights, logits) -> tuple[Tensor, np.ndarray]:
    """Aggregated logits sum_i w_i s_i and their softmax probabilities."""
    weights, logits = as_tensor(weights), as_tensor(logits)
    agg = ad.sum(ad.reshape(weights, weights.shape + (1,)) * logits, axis=-2)
    return agg, ad.softmax(agg, axis=-1).data


def surface_weights(sigma, deltas, occupancy_threshold: float = 0.5) -> np.ndarray:
    """Binary first-hit weights: 1 at the first sample whose opacity exceeds the threshold."""
    sigma = np.asarray(sigma.data if isinstance(sigma, Tensor) else sigma)
    alpha = 1.0 - np.exp(-sigma * np.asarray(deltas))
    occ = (alpha > occupancy_threshold).astype(sigma.dtype)
    free = np.cumprod(1.0 - occ, axis=-1)
    before = np.concatenate([np.ones_like(free[..., :1]), free[..., :-1]], axis=-1)
    return occ * before


def surface_render_semantic(sigma, deltas, logits, occupancy_threshold: float = 0.5) -> Tensor:
    """Semantic logits of the first occupied sample; zeros when the ray hits nothing."""
    logits = as_tensor(logits)
    w = surface_weights(sigma, deltas, occupancy_threshold).astype(logits.dtype)
    return ad.sum(ad.reshape(Tensor(w), w.shape + (1,)) * logits, axis=-2)


def sample_rays(rays: RayBatch, n_samples: int, rng: np.random.Generator) -> RaySampleBatch:
    t = stratified_sample(rays.t_near, rays.t_far, n_samples, rng, n_rays=len(rays))
    return RaySampleBatch.from_t(t, rays.t_far)


def render_rays(cond: ConditioningSet, rays: RayBatch, params, cfg: FieldConfig,
                n_samples: int, rng: np.random.Generator, background=WHITE,
                semantic_mode: str = "volume", occupancy_threshold: float = 0.5) -> RenderedRays:
    """Sample, evaluate the field and composite color and semantics for a ray batch."""
    r = len(rays)
    batch = sample_rays(rays, n_samples, rng)
    pts = rays.origins[:, None, :] + batch.t[..., None] * rays.directions[:, None, :]
    dirs = np.broadcast_to(rays.directions[:, None, :], pts.shape)
    out = field_eval_batch(cond, pts.reshape(-1, 3), dirs.reshape(-1, 3), params, cfg)
    k = out.logits.shape[1]
    sigma = ad.reshape(out.sigma, (r, n_samples))
    rgb = ad.reshape(out.rgb, (r, n_samples, 3))
    logits = ad.reshape(out.logits, (r, n_samples, k))
    comp = compositing_weights(sigma, batch.deltas)
    color = render_color(comp.weights, comp.t_final, rgb, background)
    if semantic_mode == "volume":
        agg, _ = render_semantic(comp.weights, logits)
    elif semantic_mode == "surface":
        agg = surface_render_semantic(sigma, batch.deltas, logits, occupancy_threshold)
    else:
        raise ValueError(f"unknown semantic mode {semantic_mode!r}")
    depth = (comp.weights.data * batch.t).sum(1)
    return RenderedRays(color, agg, comp.weights, comp.t_final, depth)


@dataclass
class RenderedImage:
    rgb: np.ndarray      # (H, W, 3)
    mask: np.ndarray     # (H, W) argmax label
    probs: np.ndarray    # (H, W, C+1)
    depth: np.ndarray    # (H, W)


def render_view(cond: ConditioningSet, camera: tuple[Intrinsics, Pose], params, cfg: FieldConfig,
                n_samples: int = EVAL_SAMPLES, rng: np.random.Generator | int = 0,
                chunk: int = 1024, semantic_mode: str = "volume") -> RenderedImage:
    """Render a full image; each chunk of rays draws from its own seeded stream."""
    intr, pose = camera
    rays = generate_rays(intr, pose)
    seed = rng if isinstance(rng, (int, np.integer)) else int(rng.integers(2**31))
    colors, logits, depth = [], [], []
    with ad.no_trace():
        for ci, s in enumerate(range(0, len(rays), chunk)):
            sub = rays.subset(slice(s, s + chunk))
            out = render_rays(cond, sub, params, cfg, n_samples, np.random.default_rng([seed, ci]),
                              semantic_mode=semantic_mode)
            colors.append(out.color.data)
            logits.append(out.logits.data)
            depth.append(out.depth)
    h, w = intr.height, intr.width
    lg = np.concatenate(logits)
    probs = ad.softmax(Tensor(lg), axis=-1).data
    return RenderedImage(np.concatenate(colors).reshape(h, w, 3), lg.argmax(1).reshape(h, w),
                         probs.reshape(h, w, -1), np.concatenate(depth).reshape(h, w))
