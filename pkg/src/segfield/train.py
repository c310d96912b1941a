"""Joint optimization of encoder and field from posed RGB + mask views."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .camera import generate_rays
from .encoder import encode, init_encoder
from .field import ConditioningSet, FieldConfig, init_field
from .metrics import confusion_matrix, miou, psnr
from .optim import AdamState, TrainingDiverged, adam_step, load_checkpoint, save_checkpoint
from .render import render_rays, render_view
from .scene import ObjectViews

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    objects_per_batch: int = 2
    rays_per_object: int = 512
    steps: int = 2000
    lam: float = 1.0
    n_samples: int = 64
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    min_sources: int = 1
    max_sources: int = 4
    hidden: int = 64
    n_frequencies: int = 6
    include_raw: bool = True
    semantic_mode: str = "volume"
    occupancy_threshold: float = 0.5
    eval_every: int = 0
    eval_samples: int = 64
    checkpoint_every: int = 0
    deterministic: bool = True
    # stratified target-pixel draw: fraction of rays forced onto object pixels
    foreground_fraction: float = 0.0
    # pin the conditioning views (single-scene overfitting); None = random per step
    fixed_sources: list[int] | None = None

    def __post_init__(self):
        for name in ("objects_per_batch", "rays_per_object", "steps", "n_samples",
                     "min_sources", "max_sources", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.min_sources > self.max_sources:
            raise ValueError("min_sources exceeds max_sources")
        if self.semantic_mode not in ("volume", "surface"):
            raise ValueError(f"unknown semantic_mode {self.semantic_mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def field_config(self, num_classes: int) -> FieldConfig:
        return FieldConfig(num_classes=num_classes, hidden=self.hidden,
                           n_frequencies=self.n_frequencies, include_raw=self.include_raw)


# ---------------------------------------------------------------- losses

def loss_rec(pred, target) -> Tensor:
    """Mean over rays of the squared L2 color error."""
    return ad.mse(pred, target)


def loss_sem(logits: Tensor, labels) -> Tensor:
    return ad.cross_entropy_with_logits(logits, labels)


def loss_total(rec, sem, lam: float):
    if lam < 0:
        raise ValueError("lam must be >= 0")
    return rec + sem * lam


# ---------------------------------------------------------------- ray batches

@dataclass
class RayBatchSample:
    sources: np.ndarray        # view indices used for conditioning
    target_views: np.ndarray   # (R,) view index per ray
    pixels: np.ndarray         # (R, 2) (col, row)
    colors: np.ndarray         # (R, 3)
    labels: np.ndarray         # (R,)


def sample_ray_batch(obj: ObjectViews, n_rays: int, n_sources: int, rng: np.random.Generator,
                     foreground_fraction: float = 0.0, sources=None) -> RayBatchSample:
    """Pick ``n_sources`` conditioning views and draw target pixels from the rest.

    Passing ``sources`` pins the conditioning views instead.
    """
    n_views = len(obj.views)
    if sources is not None:
        n_sources = len(sources)
    if n_views < n_sources + 1:
        raise ValueError(f"need at least {n_sources + 1} views, object has {n_views}")
    perm = rng.permutation(n_views)
    if sources is None:
        sources = np.sort(perm[:n_sources])
        targets = perm[n_sources:]
    else:
        sources = np.asarray(sources)
        targets = perm[~np.isin(perm, sources)]
    h, w = obj.views[0].mask.shape
    tv = targets[rng.integers(0, len(targets), n_rays)]
    # pixel positions without replacement, cycling through fresh permutations
    reps = -(-n_rays // (h * w))
    flat = np.concatenate([rng.permutation(h * w) for _ in range(reps)])[:n_rays]
    n_fg = int(round(foreground_fraction * n_rays))
    if n_fg:
        masks = obj.masks
        for k in range(n_fg):
            fg = np.flatnonzero(masks[tv[k]].ravel())
            if len(fg):
                flat[k] = fg[rng.integers(len(fg))]
    rows, cols = flat // w, flat % w
    imgs, masks = obj.images, obj.masks
    return RayBatchSample(sources, tv, np.stack([cols, rows], 1),
                          imgs[tv, rows, cols], masks[tv, rows, cols])


def conditioning(obj: ObjectViews, sources, params) -> ConditioningSet:
    views = [obj.views[i] for i in sources]
    feats = encode(np.stack([v.rgb for v in views]), params)
    return ConditioningSet(feats, [(v.intrinsics, v.pose) for v in views])


def batch_rays(obj: ObjectViews, sample: RayBatchSample):
    origins, dirs = [], []
    for vi in np.unique(sample.target_views):
        sel = sample.target_views == vi
        view = obj.views[vi]
        rays = generate_rays(view.intrinsics, view.pose, sample.pixels[sel])
        origins.append((np.flatnonzero(sel), rays))
    r = len(sample.labels)
    o = np.empty((r, 3))
    d = np.empty((r, 3))
    for idx, rays in origins:
        o[idx] = rays.origins
        d[idx] = rays.directions
    return type(rays)(o, d, rays.t_near, rays.t_far)


# ---------------------------------------------------------------- state

@dataclass
class TrainState:
    step: int
    params: dict[str, Tensor]
    opt: AdamState
    config: TrainConfig
    num_classes: int
    history: list[dict] = field(default_factory=list)

    @property
    def field_config(self) -> FieldConfig:
        return self.config.field_config(self.num_classes)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}


def init_state(config: TrainConfig, num_classes: int) -> TrainState:
    rng = np.random.default_rng([config.seed, 0xE2C])
    params = init_encoder(rng)
    params.update(init_field(config.field_config(num_classes), rng))
    return TrainState(0, params, AdamState(), config, num_classes)


def save_state(path, state: TrainState) -> None:
    arrays = dict(state.arrays())
    for k in state.params:
        if k in state.opt.m:
            arrays[f"adam.m/{k}"] = state.opt.m[k]
            arrays[f"adam.v/{k}"] = state.opt.v[k]
    meta = {"step": state.step, "num_classes": state.num_classes, "config": asdict(state.config),
            "optimizer": {"kind": "adam", "step": state.opt.step, "lr": state.config.lr,
                          "beta1": state.config.beta1, "beta2": state.config.beta2,
                          "eps": state.config.eps}}
    save_checkpoint(path, arrays, meta)


def load_state(path) -> TrainState:
    arrays, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items() if "/" not in k}
    opt = AdamState(meta["optimizer"]["step"],
                    {k[7:]: v for k, v in arrays.items() if k.startswith("adam.m/")},
                    {k[7:]: v for k, v in arrays.items() if k.startswith("adam.v/")})
    return TrainState(meta["step"], params, opt, cfg, meta["num_classes"])


# ---------------------------------------------------------------- loop

def slot_loss(state: TrainState, obj: ObjectViews, rng: np.random.Generator):
    """Render one object's ray batch and return (total, rec, sem) losses on the tape."""
    cfg = state.config
    hi = min(cfg.max_sources, len(obj.views) - 1)
    n_src = int(rng.integers(min(cfg.min_sources, hi), hi + 1))
    sample = sample_ray_batch(obj, cfg.rays_per_object, n_src, rng, cfg.foreground_fraction,
                              cfg.fixed_sources)
    cond = conditioning(obj, sample.sources, state.params)
    out = render_rays(cond, batch_rays(obj, sample), state.params, state.field_config, cfg.n_samples,
                      rng, semantic_mode=cfg.semantic_mode, occupancy_threshold=cfg.occupancy_threshold)
    rec = loss_rec(out.color, sample.colors.astype(out.color.dtype))
    sem = loss_sem(out.logits, sample.labels)
    return loss_total(rec, sem, cfg.lam), rec, sem


def slot_rng(config: TrainConfig, step: int, slot: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, step, slot, 0x5107])


def train_step(state: TrainState, dataset: list[ObjectViews]) -> dict:
    """One optimizer step over ``objects_per_batch`` objects.

    Randomness for slot k of step s comes from its own stream seeded by
    (seed, s, k), so the step is reproducible from the step counter alone.
    """
    cfg = state.config
    step = state.step + 1
    pick = np.random.default_rng([cfg.seed, step, 0xB47C])
    objs = pick.integers(0, len(dataset), cfg.objects_per_batch)
    stats = {"rec": 0.0, "sem": 0.0, "total": 0.0}
    with Tape() as tape:
        losses = []
        for slot, oi in enumerate(objs):
            tot, rec, sem = slot_loss(state, dataset[oi], slot_rng(cfg, step, slot))
            if not np.isfinite(tot.data):
                raise TrainingDiverged(step, f"object {int(oi)}", "non-finite loss")
            losses.append(tot)
            stats["rec"] += float(rec.data) / len(objs)
            stats["sem"] += float(sem.data) / len(objs)
        loss = losses[0]
        for extra in losses[1:]:
            loss = loss + extra
        loss = loss * (1.0 / len(losses))
    grads = tape.gradient(loss, state.params)
    new, state.opt = adam_step({k: p.data for k, p in state.params.items()}, grads, state.opt,
                               cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    for k, p in state.params.items():
        p.data = new[k]
    state.step = step
    stats["total"] = float(loss.data)
    stats["step"] = step
    return stats


def evaluate_views(state: TrainState, obj: ObjectViews, sources, targets, n_samples: int = 64,
                   seed: int = 0) -> dict:
    """Render held-out cameras conditioned on ``sources``.

    Returns mean PSNR over views and the 2D mIoU of the confusion matrix pooled
    over all of this object's views.
    """
    params, fcfg = state.params, state.field_config
    with ad.no_trace():
        cond = conditioning(obj, sources, params)
    psnrs = []
    cm = np.zeros((state.num_classes + 1,) * 2, np.int64)
    for k, view in enumerate(targets):
        img = render_view(cond, (view.intrinsics, view.pose), params, fcfg, n_samples, seed + k)
        psnrs.append(psnr(img.rgb, view.rgb))
        cm += confusion_matrix(view.mask, img.mask, state.num_classes + 1)
    return {"psnr": float(np.mean(psnrs)), "miou": float(miou(cm)["miou"])}


def train(dataset: list[ObjectViews], config: TrainConfig, out_dir=None, state: TrainState | None = None,
          eval_fn=None, until: int | None = None) -> TrainState:
    """Run (or resume) training up to ``config.steps`` (or ``until``) steps.

    Writes ``metrics.jsonl`` and periodic ``ckpt_<step>.segf`` under ``out_dir``.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    num_classes = max(o.scene.num_classes for o in dataset)
    state = state or init_state(config, num_classes)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    last = config.steps if until is None else min(until, config.steps)
    t0 = time.time()
    with ad.deterministic(config.deterministic):
        while state.step < last:
            stats = train_step(state, dataset)
            rec = {"step": state.step, "loss": stats["total"], "loss_rec": stats["rec"],
                   "loss_sem": stats["sem"]}
            if config.eval_every and state.step % config.eval_every == 0 and eval_fn is not None:
                rec.update(eval_fn(state))
            state.history.append(rec)
            if out is not None:
                with open(out / "metrics.jsonl", "a") as fh:
                    fh.write(json.dumps(rec) + "\n")
                if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                    save_state(out / f"ckpt_{state.step:06d}.segf", state)
            if state.step % 100 == 0:
                log.info("step %d loss %.5f (rec %.5f sem %.5f) %.1fs", state.step, stats["total"],
                         stats["rec"], stats["sem"], time.time() - t0)
    return state
