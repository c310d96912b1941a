"""Procedural multi-part objects and an exact ray-traced oracle.

Every part is an affinely transformed canonical primitive:

* sphere   - unit ball
* box      - cube [-1, 1]^3
* cylinder - unit-radius disc in xy, z in [-1, 1], capped

so ray intersection, inside tests and surface sampling are all analytic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import (DEFAULT_FAR, DEFAULT_NEAR, Intrinsics, Pose, RayBatch, generate_rays,
                     look_at)

KINDS = ("sphere", "box", "cylinder")
RIG_RADIUS = 2.0
AMBIENT = 0.35


@dataclass
class PrimitivePart:
    kind: str
    rotation: np.ndarray
    translation: np.ndarray
    scale: np.ndarray
    albedo: np.ndarray
    part_label: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        self.rotation = Pose(self.rotation, self.translation).rotation
        self.translation = np.asarray(self.translation, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        if np.any(self.scale <= 0):
            raise ValueError(f"scale must be positive, got {self.scale}")
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("albedo must lie in [0, 1]")
        if self.part_label < 1:
            raise ValueError("part labels start at 1 (0 is background)")

    def to_canonical(self, points) -> np.ndarray:
        return ((np.asarray(points) - self.translation) @ self.rotation) / self.scale

    def to_world(self, canon) -> np.ndarray:
        return (np.asarray(canon) * self.scale) @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {"kind": self.kind, "rotation": self.rotation.ravel().tolist(),
                "translation": self.translation.tolist(), "scale": self.scale.tolist(),
                "albedo": self.albedo.tolist(), "part_label": int(self.part_label)}

    @classmethod
    def from_dict(cls, d: dict) -> "PrimitivePart":
        return cls(d["kind"], np.reshape(d["rotation"], (3, 3)), d["translation"],
                   d["scale"], d["albedo"], int(d["part_label"]))


@dataclass
class SceneSpec:
    parts: list[PrimitivePart]
    num_classes: int
    seed: int = 0
    template: str = ""
    rig: dict = field(default_factory=lambda: {"train": 24, "eval": 25})

    def __post_init__(self):
        if not self.parts:
            raise ValueError("scene needs at least one part")
        labels = sorted({p.part_label for p in self.parts})
        if labels != list(range(1, len(labels) + 1)):
            raise ValueError(f"part labels must be dense in 1..C, got {labels}")
        if self.num_classes != labels[-1]:
            raise ValueError(f"num_classes={self.num_classes} but max label is {labels[-1]}")

    def to_json(self) -> str:
        return json.dumps({"template": self.template, "seed": self.seed,
                           "num_classes": self.num_classes, "rig": self.rig,
                           "parts": [p.to_dict() for p in self.parts]}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        d = json.loads(text)
        return cls([PrimitivePart.from_dict(p) for p in d["parts"]], d["num_classes"],
                   d.get("seed", 0), d.get("template", ""), d.get("rig", {}))

    def __eq__(self, other):
        return isinstance(other, SceneSpec) and self.to_json() == other.to_json()


# ---------------------------------------------------------------- templates

def _rot_axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


_X_TO_Z = _rot_axis_angle([0, 1, 0], np.pi / 2)  # maps canonical z onto world x


def _dumbbell(rng: np.random.Generator) -> list[PrimitivePart]:
    r_end = rng.uniform(0.28, 0.38)
    half = rng.uniform(0.45, 0.6)
    r_bar = rng.uniform(0.08, 0.13)
    tilt = _rot_axis_angle([0, 0, 1], rng.uniform(-0.3, 0.3))
    end_col = np.clip(np.array([0.85, 0.25, 0.2]) + rng.uniform(-0.08, 0.08, 3), 0, 0.9)
    bar_col = np.clip(np.array([0.2, 0.35, 0.85]) + rng.uniform(-0.08, 0.08, 3), 0, 0.9)
    axis = tilt @ np.array([1.0, 0, 0])
    return [
        PrimitivePart("sphere", np.eye(3), axis * half, [r_end] * 3, end_col, 1),
        PrimitivePart("sphere", np.eye(3), -axis * half, [r_end] * 3, end_col, 1),
        PrimitivePart("cylinder", tilt @ _X_TO_Z, np.zeros(3), [r_bar, r_bar, half], bar_col, 2),
    ]


def _chairlike(rng: np.random.Generator) -> list[PrimitivePart]:
    seat_w = rng.uniform(0.45, 0.55)
    seat_t = rng.uniform(0.05, 0.08)
    leg_h = rng.uniform(0.35, 0.45)
    leg_r = rng.uniform(0.035, 0.05)
    back_h = rng.uniform(0.4, 0.55)
    jitter = lambda base: np.clip(np.asarray(base) + rng.uniform(-0.06, 0.06, 3), 0, 0.9)  # noqa: E731
    leg_col, seat_col, back_col = jitter([0.45, 0.3, 0.15]), jitter([0.2, 0.6, 0.3]), jitter([0.6, 0.2, 0.6])
    seat_z = 0.0
    parts = []
    for sx in (-1, 1):
        for sy in (-1, 1):
            c = [sx * (seat_w - leg_r), sy * (seat_w - leg_r), seat_z - seat_t - leg_h]
            parts.append(PrimitivePart("cylinder", np.eye(3), c, [leg_r, leg_r, leg_h], leg_col, 1))
    parts.append(PrimitivePart("box", np.eye(3), [0, 0, seat_z], [seat_w, seat_w, seat_t], seat_col, 2))
    parts.append(PrimitivePart("box", np.eye(3), [-seat_w + seat_t, 0, seat_z + seat_t + back_h],
                               [seat_t, seat_w, back_h], back_col, 3))
    return parts


def _sphere(rng: np.random.Generator) -> list[PrimitivePart]:
    col = np.clip(np.array([0.8, 0.5, 0.2]) + rng.uniform(-0.05, 0.05, 3), 0, 0.9)
    return [PrimitivePart("sphere", np.eye(3), np.zeros(3), [1.0] * 3, col, 1)]


TEMPLATES = {"dumbbell": (_dumbbell, 2), "chairlike": (_chairlike, 3), "sphere": (_sphere, 1)}
FIT_RADIUS = 0.95


def bounding_radius(parts: list[PrimitivePart]) -> float:
    """Exact max distance from the origin over all parts (conservative for cylinders)."""
    r = 0.0
    for p in parts:
        if p.kind == "sphere":
            # farthest point of an ellipsoid is bounded by center norm + largest semi-axis
            r = max(r, np.linalg.norm(p.translation) + p.scale.max())
        else:
            corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float)
            r = max(r, np.linalg.norm(p.to_world(corners), axis=1).max())
    return float(r)


def generate_scene(template: str, rng: np.random.Generator | int = 0) -> SceneSpec:
    """Jittered instance of a built-in family, rescaled to fit inside the unit sphere."""
    if template not in TEMPLATES:
        raise ValueError(f"unknown template {template!r}; choose from {sorted(TEMPLATES)}")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    gen = np.random.default_rng(rng) if seed is not None else rng
    build, n_classes = TEMPLATES[template]
    parts = build(gen)
    s = FIT_RADIUS / bounding_radius(parts) if template != "sphere" else 1.0
    for p in parts:
        p.translation = p.translation * s
        p.scale = p.scale * s
    return SceneSpec(parts, n_classes, int(seed) if seed is not None else -1, template)


# ---------------------------------------------------------------- geometry

def _intersect_canonical(kind: str, o: np.ndarray, d: np.ndarray):
    """Nearest positive hit of canonical rays (o + t d, d not normalized).

    Returns (t, normal) with t = inf where missed.
    """
    n = len(o)
    t_best = np.full(n, np.inf)
    nrm = np.zeros((n, 3))
    eps = 1e-12
    if kind == "sphere":
        a = (d * d).sum(1)
        b = (o * d).sum(1)
        c = (o * o).sum(1) - 1
        disc = b * b - a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0))
        t0 = (-b - sq) / a
        t1 = (-b + sq) / a
        t = np.where(t0 > eps, t0, np.where(t1 > eps, t1, np.inf))
        t_best = np.where(hit, t, np.inf)
        p = o + np.where(np.isfinite(t_best), t_best, 0)[:, None] * d
        nrm = p
    elif kind == "box":
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (-1 - o) * inv
            tb = (1 - o) * inv
        ta = np.where(np.isnan(ta), -np.inf, ta)
        tb = np.where(np.isnan(tb), np.inf, tb)
        tmin = np.minimum(ta, tb)
        tmax = np.maximum(ta, tb)
        t_enter = tmin.max(1)
        t_exit = tmax.min(1)
        hit = (t_enter <= t_exit) & (t_exit > eps)
        t = np.where(t_enter > eps, t_enter, t_exit)
        t_best = np.where(hit, t, np.inf)
        axis = np.where(t_enter > eps, tmin.argmax(1), tmax.argmin(1))
        p = o + np.where(hit, t_best, 0)[:, None] * d
        nrm[np.arange(n), axis] = np.sign(p[np.arange(n), axis])
    else:
        # lateral surface x^2 + y^2 = 1, |z| <= 1
        a = d[:, 0] ** 2 + d[:, 1] ** 2
        b = o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1]
        c = o[:, 0] ** 2 + o[:, 1] ** 2 - 1
        disc = b * b - a * c
        ok = (disc >= 0) & (a > eps)
        sq = np.sqrt(np.where(ok, disc, 0))
        safe_a = np.where(a > eps, a, 1)
        cands = []
        for t in ((-b - sq) / safe_a, (-b + sq) / safe_a):
            z = o[:, 2] + t * d[:, 2]
            cands.append(np.where(ok & (t > eps) & (np.abs(z) <= 1), t, np.inf))
        with np.errstate(divide="ignore", invalid="ignore"):
            for zc in (-1.0, 1.0):
                t = (zc - o[:, 2]) / d[:, 2]
                x = o[:, 0] + t * d[:, 0]
                y = o[:, 1] + t * d[:, 1]
                cands.append(np.where((t > eps) & (x * x + y * y <= 1), t, np.inf))
        cands = np.stack(cands, 1)
        which = cands.argmin(1)
        t_best = cands[np.arange(n), which]
        t_best = np.where(np.isnan(t_best), np.inf, t_best)
        p = o + np.where(np.isfinite(t_best), t_best, 0)[:, None] * d
        nrm = np.zeros((n, 3))
        side = which < 2
        nrm[side, 0] = p[side, 0]
        nrm[side, 1] = p[side, 1]
        nrm[which == 2, 2] = -1
        nrm[which == 3, 2] = 1
    return t_best, nrm


def intersect(part: PrimitivePart, origins, dirs):
    """World-space nearest hit distance and unit normal for each ray."""
    o = part.to_canonical(origins)
    d = (np.asarray(dirs) @ part.rotation) / part.scale
    t, n_canon = _intersect_canonical(part.kind, o, d)
    # normals transform with the inverse-transpose of the linear map
    n = (n_canon / part.scale) @ part.rotation.T
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.where(norm > 0, n / np.where(norm > 0, norm, 1), 0)
    return t, n


def implicit(part: PrimitivePart, points) -> np.ndarray:
    """Negative strictly inside, zero on the surface (canonical-space measure)."""
    q = part.to_canonical(np.atleast_2d(points))
    if part.kind == "sphere":
        return np.linalg.norm(q, axis=1) - 1
    if part.kind == "box":
        return np.abs(q).max(1) - 1
    return np.maximum(np.hypot(q[:, 0], q[:, 1]) - 1, np.abs(q[:, 2]) - 1)


def occupancy(scene: SceneSpec, points) -> np.ndarray:
    """Label of the innermost containing part, else 0. Accepts (3,) or (P, 3)."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    vals = np.stack([implicit(p, np.atleast_2d(pts)) for p in scene.parts], 1)
    labels = np.array([p.part_label for p in scene.parts])
    inner = vals.argmin(1)
    out = np.where(vals[np.arange(len(vals)), inner] < 0, labels[inner], 0)
    return int(out[0]) if single else out


def trace(scene: SceneSpec, rays: RayBatch):
    """Nearest hit over all parts: (t, part index or -1, normal)."""
    n = len(rays)
    t_best = np.full(n, np.inf)
    idx = np.full(n, -1)
    nrm = np.zeros((n, 3))
    for k, part in enumerate(scene.parts):
        t, nk = intersect(part, rays.origins, rays.directions)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        idx = np.where(closer, k, idx)
        nrm[closer] = nk[closer]
    return t_best, idx, nrm


@dataclass
class RenderedView:
    rgb: np.ndarray        # (H, W, 3) float64 in [0, 1]
    mask: np.ndarray       # (H, W) int, 0 = background
    pose: Pose
    intrinsics: Intrinsics
    depth: np.ndarray | None = None


def raytrace_view(scene: SceneSpec, intr: Intrinsics, pose: Pose) -> RenderedView:
    """Oracle render: albedo under a camera-mounted Lambertian light, white background."""
    rays = generate_rays(intr, pose)
    t, idx, nrm = trace(scene, rays)
    hit = np.isfinite(t)
    albedo = np.array([p.albedo for p in scene.parts])
    labels = np.array([p.part_label for p in scene.parts])
    cos = np.abs((nrm * rays.directions).sum(1))
    shade = AMBIENT + (1 - AMBIENT) * cos
    rgb = np.ones((len(rays), 3))
    rgb[hit] = albedo[idx[hit]] * shade[hit, None]
    mask = np.where(hit, labels[np.maximum(idx, 0)], 0)
    h, w = intr.height, intr.width
    return RenderedView(rgb.reshape(h, w, 3), mask.reshape(h, w), pose, intr,
                        np.where(hit, t, np.inf).reshape(h, w))


# ---------------------------------------------------------------- camera rigs

def default_intrinsics(size: int = 64, fov_deg: float = 60.0) -> Intrinsics:
    return Intrinsics.from_fov(size, size, fov_deg)


def camera_rig(kind: str, count: int, rng: np.random.Generator | int | None = 0,
               intr: Intrinsics | None = None, radius: float = RIG_RADIUS):
    """Cameras on a sphere of ``radius`` looking at the origin.

    ``uniform``: isotropic random directions. ``spiral``: archimedean spiral
    over the upper hemisphere, elevation rising from 5 to 80 degrees over two
    turns of azimuth.
    """
    if count < 1:
        raise ValueError("camera count must be >= 1")
    intr = intr or default_intrinsics()
    if kind == "uniform":
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        v = gen.standard_normal((count, 3))
        dirs = v / np.linalg.norm(v, axis=1, keepdims=True)
    elif kind == "spiral":
        s = np.linspace(0.0, 1.0, count)
        elev = np.radians(5 + 75 * s)
        azim = 2 * np.pi * 2.0 * s
        dirs = np.stack([np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.sin(elev)], 1)
    else:
        raise ValueError(f"unknown rig {kind!r}")
    return [(intr, look_at(radius * d)) for d in dirs]


# ---------------------------------------------------------------- surface points

@dataclass
class LabeledPointCloud:
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.points) != len(self.labels):
            raise ValueError("points and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)


def _canonical_surface(kind: str, n: int, rng: np.random.Generator):
    """Uniform samples (by canonical area) on a canonical surface, with unit normals."""
    if kind == "sphere":
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v, v.copy()
    if kind == "box":
        face = rng.integers(0, 6, n)
        axis, sign = face // 2, np.where(face % 2 == 0, -1.0, 1.0)
        p = rng.uniform(-1, 1, (n, 3))
        p[np.arange(n), axis] = sign
        nrm = np.zeros((n, 3))
        nrm[np.arange(n), axis] = sign
        return p, nrm
    # cylinder: side area 4*pi, each cap pi
    pick = rng.random(n) * 6 * np.pi
    side = pick < 4 * np.pi
    theta = rng.uniform(0, 2 * np.pi, n)
    p = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    p[:, 0], p[:, 1] = np.cos(theta), np.sin(theta)
    p[:, 2] = rng.uniform(-1, 1, n)
    nrm[:, 0], nrm[:, 1] = p[:, 0], p[:, 1]
    cap = ~side
    rad = np.sqrt(rng.random(n))
    zc = np.where(pick < 5 * np.pi, -1.0, 1.0)
    p[cap, 0] *= rad[cap]
    p[cap, 1] *= rad[cap]
    p[cap, 2] = zc[cap]
    nrm[cap] = 0
    nrm[cap, 2] = zc[cap]
    return p, nrm


_CANON_AREA = {"sphere": 4 * np.pi, "box": 24.0, "cylinder": 6 * np.pi}


def _area_factor(part: PrimitivePart, normals: np.ndarray) -> np.ndarray:
    # surface area element scales by det(S) * |S^-1 n| for a diagonal scale S
    return np.prod(part.scale) * np.linalg.norm(normals / part.scale, axis=1)


def part_area(part: PrimitivePart, n_quad: int = 200_000) -> float:
    """World-space surface area (exact when the area factor is constant)."""
    s = part.scale
    if part.kind == "sphere" and np.allclose(s, s[0]):
        return 4 * np.pi * s[0] ** 2
    if part.kind == "box":
        return 8 * (s[0] * s[1] + s[1] * s[2] + s[0] * s[2])
    if part.kind == "cylinder" and np.isclose(s[0], s[1]):
        return 2 * np.pi * s[0] * 2 * s[2] + 2 * np.pi * s[0] ** 2
    # fixed-seed quadrature keeps the result deterministic
    _, nrm = _canonical_surface(part.kind, n_quad, np.random.default_rng(12345))
    return float(_CANON_AREA[part.kind] * _area_factor(part, nrm).mean())


def sample_surface_points(scene: SceneSpec, n: int, rng: np.random.Generator | int = 0,
                          return_stats: bool = False):
    """Area-uniform samples on the boundary of the union of parts.

    Samples landing inside another part are discarded and redrawn.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    areas = np.array([part_area(p) for p in scene.parts])
    probs = areas / areas.sum()
    pts, labs = [], []
    have = 0
    drawn = rejected = 0
    while have < n:
        m = max(2 * (n - have), 64)
        which = gen.choice(len(scene.parts), size=m, p=probs)
        batch_p, batch_l = [], []
        for k, part in enumerate(scene.parts):
            cnt = int((which == k).sum())
            if cnt == 0:
                continue
            canon, nrm = _canonical_surface(part.kind, cnt, gen)
            f = _area_factor(part, nrm)
            fmax = np.prod(part.scale) / part.scale.min()
            keep = gen.random(cnt) * fmax <= f
            world = part.to_world(canon[keep])
            others = [q for j, q in enumerate(scene.parts) if j != k]
            if others:
                inside = np.stack([implicit(q, world) for q in others], 1).min(1) < 0
                rejected += int(inside.sum())
                world = world[~inside]
            batch_p.append(world)
            batch_l.append(np.full(len(world), part.part_label))
            drawn += cnt
        if batch_p:
            bp = np.concatenate(batch_p)
            bl = np.concatenate(batch_l)
            order = gen.permutation(len(bp))
            pts.append(bp[order])
            labs.append(bl[order])
            have += len(bp)
    cloud = LabeledPointCloud(np.concatenate(pts)[:n], np.concatenate(labs)[:n])
    if return_stats:
        return cloud, {"drawn": drawn, "occluded_rejected": rejected,
                       "occluded_fraction": rejected / max(drawn, 1)}
    return cloud


# ---------------------------------------------------------------- datasets

@dataclass
class ObjectViews:
    scene: SceneSpec
    views: list[RenderedView]

    @property
    def images(self) -> np.ndarray:
        return np.stack([v.rgb for v in self.views])

    @property
    def masks(self) -> np.ndarray:
        return np.stack([v.mask for v in self.views])


def render_object(scene: SceneSpec, cameras) -> ObjectViews:
    return ObjectViews(scene, [raytrace_view(scene, intr, pose) for intr, pose in cameras])


def make_object(template: str, seed: int, n_views: int = 24, size: int = 64,
                rig: str = "uniform") -> ObjectViews:
    scene = generate_scene(template, seed)
    cams = camera_rig(rig, n_views, np.random.default_rng([seed, 1]), default_intrinsics(size))
    return render_object(scene, cams)


__all__ = [
    "PrimitivePart", "SceneSpec", "RenderedView", "LabeledPointCloud", "ObjectViews",
    "generate_scene", "raytrace_view", "camera_rig", "sample_surface_points", "occupancy",
    "trace", "intersect", "implicit", "render_object", "make_object", "default_intrinsics",
    "bounding_radius", "part_area", "TEMPLATES", "DEFAULT_NEAR", "DEFAULT_FAR", "RayBatch",
]
