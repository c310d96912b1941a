"""PNG, PLY and raw-volume readers/writers used by the CLI."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

# label -> RGB for colored mesh / mask previews
PALETTE = np.array([
    [255, 255, 255], [228, 26, 28], [55, 126, 184], [77, 175, 74], [152, 78, 163],
    [255, 127, 0], [166, 86, 40], [247, 129, 191], [153, 153, 153],
], dtype=np.uint8)


def label_colors(labels) -> np.ndarray:
    labels = np.asarray(labels)
    return PALETTE[labels % len(PALETTE)]


def write_rgb_png(path, rgb) -> None:
    arr = np.clip(np.rint(np.asarray(rgb) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def read_rgb_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def write_mask_png(path, mask) -> None:
    """Label id stored in the red channel; green/blue left zero."""
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() > 255:
        raise ValueError("mask labels must fit in one byte")
    arr = np.zeros(mask.shape + (3,), np.uint8)
    arr[..., 0] = mask
    Image.fromarray(arr, "RGB").save(path)


def read_mask_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))[..., 0].astype(np.int64)


def write_ply(path, points, labels=None, faces=None, colors=None) -> None:
    """ASCII PLY with optional integer ``label`` and uchar RGB per vertex."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    faces = None if faces is None else np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
             "property float x", "property float y", "property float z"]
    if colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    if labels is not None:
        lines.append("property int label")
    if faces is not None:
        lines += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    for i, p in enumerate(points):
        row = [repr(float(c)) for c in p]
        if colors is not None:
            row += [str(int(c)) for c in colors[i]]
        if labels is not None:
            row.append(str(int(labels[i])))
        lines.append(" ".join(row))
    if faces is not None:
        lines += [f"3 {a} {b} {c}" for a, b, c in faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> dict:
    """Parse the ASCII PLY subset written by :func:`write_ply`."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n_vert = n_face = 0
    props: list[str] = []
    current = None
    i = 1
    while text[i].strip() != "end_header":
        tok = text[i].split()
        if tok[0] == "format" and tok[1] != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        if tok[0] == "element":
            current = tok[1]
            if current == "vertex":
                n_vert = int(tok[2])
            elif current == "face":
                n_face = int(tok[2])
        elif tok[0] == "property" and current == "vertex":
            props.append(tok[-1])
        i += 1
    body = text[i + 1 :]
    vals = np.array([list(map(float, ln.split())) for ln in body[:n_vert]]).reshape(n_vert, len(props))
    out = {"points": vals[:, [props.index(a) for a in "xyz"]]}
    if "label" in props:
        out["labels"] = vals[:, props.index("label")].astype(np.int64)
    if "red" in props:
        out["colors"] = vals[:, [props.index(c) for c in ("red", "green", "blue")]].astype(np.uint8)
    if n_face:
        out["faces"] = np.array([list(map(int, ln.split()))[1:4] for ln in body[n_vert : n_vert + n_face]])
    return out


def write_raw_volume(path, array, meta: dict | None = None) -> None:
    """Raw little-endian f32 buffer plus a ``.json`` sidecar describing its shape."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    Path(path).write_bytes(arr.tobytes())
    side = {"shape": list(arr.shape), "dtype": "f32", "byte_order": "little"}
    side.update(meta or {})
    Path(str(path) + ".json").write_text(json.dumps(side, indent=1))


def read_raw_volume(path) -> np.ndarray:
    side = json.loads(Path(str(path) + ".json").read_text())
    return np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(side["shape"])
