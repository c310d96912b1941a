"""Point segmentation, density grids and semantic meshes from a trained field."""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from skimage import measure

from .field import ConditioningSet, FieldConfig, field_eval_chunked
from .scene import LabeledPointCloud

GRID_BOUND = 1.1
GRID_RESOLUTION = 64
ISO_THRESHOLD = 10.0


def argmax_lowest(logits) -> np.ndarray:
    """Row-wise argmax; exact ties resolve to the lowest class id."""
    return np.asarray(logits).argmax(axis=-1)


def segment_points(cond: ConditioningSet, points, params, cfg: FieldConfig,
                   chunk: int = 16384) -> LabeledPointCloud:
    """Label each point by the argmax of its semantic logits queried with a zero direction."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return LabeledPointCloud(pts, np.zeros(0, np.int64))
    _, _, logits = field_eval_chunked(cond, pts, np.zeros_like(pts), params, cfg, chunk)
    return LabeledPointCloud(pts, argmax_lowest(logits))


@dataclass
class DensityGrid:
    sigma: np.ndarray      # (R, R, R), indexed [ix, iy, iz]
    labels: np.ndarray     # (R, R, R) semantic argmax
    bound: float = GRID_BOUND

    @property
    def resolution(self) -> int:
        return self.sigma.shape[0]

    @property
    def cell(self) -> float:
        return 2 * self.bound / self.resolution

    def centers(self) -> np.ndarray:
        return grid_centers(self.resolution, self.bound)


def grid_centers(resolution: int, bound: float = GRID_BOUND) -> np.ndarray:
    """Cell centers of a cube [-bound, bound]^3 split into resolution^3 cells, ix-major."""
    step = 2 * bound / resolution
    ax = -bound + step * (np.arange(resolution) + 0.5)
    g = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)
    return g.reshape(-1, 3)


def extract_grid(cond: ConditioningSet, params, cfg: FieldConfig, resolution: int = GRID_RESOLUTION,
                 suppress_background: bool = True, bound: float = GRID_BOUND,
                 chunk: int = 16384) -> DensityGrid:
    """Query density and semantic argmax at cell centers; background cells optionally emptied."""
    if resolution < 8:
        raise ValueError("grid resolution must be >= 8")
    pts = grid_centers(resolution, bound)
    sigma, _, logits = field_eval_chunked(cond, pts, np.zeros_like(pts), params, cfg, chunk)
    labels = argmax_lowest(logits)
    if suppress_background:
        sigma = np.where(labels == 0, 0.0, sigma)
    shape = (resolution,) * 3
    return DensityGrid(sigma.reshape(shape).astype(np.float64), labels.reshape(shape), bound)


@dataclass
class SemanticMesh:
    vertices: np.ndarray   # (V, 3)
    faces: np.ndarray      # (F, 3)
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def empty(self) -> bool:
        return len(self.faces) == 0


def _drop_degenerate(verts: np.ndarray, faces: np.ndarray, min_area: float = 1e-12):
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    faces = faces[area > min_area]
    used = np.unique(faces)
    remap = np.full(len(verts), -1)
    remap[used] = np.arange(len(used))
    return verts[used], remap[faces]


def marching_cubes(grid: DensityGrid | np.ndarray, iso_threshold: float = ISO_THRESHOLD,
                   bound: float = GRID_BOUND) -> SemanticMesh:
    """Isosurface of the density grid at ``iso_threshold``, in world coordinates.

    Values are sampled at cell centers; the grid is padded with one layer of
    zeros so surfaces touching the box are closed.
    """
    if iso_threshold <= 0:
        raise ValueError("iso_threshold must be positive")
    if isinstance(grid, DensityGrid):
        vol, bound = grid.sigma, grid.bound
    else:
        vol = np.asarray(grid, dtype=np.float64)
    if not vol.max() > iso_threshold:
        return SemanticMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
    res = vol.shape[0]
    step = 2 * bound / res
    padded = np.pad(vol, 1, constant_values=0.0)
    # "ascent" winds faces so normals point away from the dense side
    verts, faces, _, _ = measure.marching_cubes(padded, level=iso_threshold, allow_degenerate=False,
                                                method="lorensen", gradient_direction="ascent")
    # padded index i corresponds to cell center of index i-1
    verts = -bound + step * (verts - 1 + 0.5)
    verts, faces = _drop_degenerate(verts, faces.astype(np.int64))
    return SemanticMesh(verts, faces)


def mesh_edges(faces: np.ndarray) -> np.ndarray:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def relabel_background(labels: np.ndarray, faces: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Give background (0) vertices the label of the nearest labeled vertex along mesh edges.

    Multi-source Dijkstra over edge lengths; components with no labeled vertex stay 0.
    """
    labels = labels.copy()
    n = len(labels)
    if n == 0 or not np.any(labels == 0):
        return labels
    edges = mesh_edges(faces)
    adj: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    lengths = np.linalg.norm(vertices[edges[:, 0]] - vertices[edges[:, 1]], axis=1)
    for (a, b), w in zip(edges.tolist(), lengths.tolist()):
        adj[a].append((b, w))
        adj[b].append((a, w))
    dist = np.full(n, np.inf)
    heap = []
    for v in np.flatnonzero(labels != 0):
        dist[v] = 0.0
        heapq.heappush(heap, (0.0, int(v), int(labels[v])))
    done = np.zeros(n, bool)
    while heap:
        d, v, lab = heapq.heappop(heap)
        if done[v]:
            continue
        done[v] = True
        labels[v] = lab
        for u, w in adj[v]:
            nd = d + w
            if nd < dist[u]:
                dist[u] = nd
                heapq.heappush(heap, (nd, u, lab))
    return labels


def label_mesh(mesh: SemanticMesh, cond: ConditioningSet, params, cfg: FieldConfig) -> SemanticMesh:
    if len(mesh.vertices) == 0:
        return SemanticMesh(mesh.vertices, mesh.faces, np.zeros(0, np.int64))
    seg = segment_points(cond, mesh.vertices, params, cfg)
    labels = relabel_background(seg.labels, mesh.faces, mesh.vertices)
    return SemanticMesh(mesh.vertices, mesh.faces, labels)


def sample_mesh_surface(mesh: SemanticMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform points on a triangle mesh."""
    v, f = mesh.vertices, mesh.faces
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    tri = rng.choice(len(f), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    return (1 - r1)[:, None] * a[tri] + (r1 * (1 - r2))[:, None] * b[tri] + (r1 * r2)[:, None] * c[tri]


__all__ = ["segment_points", "extract_grid", "marching_cubes", "label_mesh", "DensityGrid",
           "SemanticMesh", "grid_centers", "relabel_background", "sample_mesh_surface"]
