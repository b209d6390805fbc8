"""Image, point cloud and result document I/O.

Depth PNGs are 16-bit with ``DEPTH_SCALE`` counts per millimeter (0.1 mm
units); 0 stays the invalid sentinel.
"""

from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np

from .core import GeometryError, PointCloud, as_depth, as_gray

DEPTH_SCALE = 10.0


def read_gray_png(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise OSError(f"cannot read image {path}")
    if img.ndim == 3:
        img = cv2.cvtColor(img, cv2.COLOR_BGR2GRAY)
    if img.dtype != np.uint8:
        img = (img / 257.0).round().astype(np.uint8)
    return img


def write_gray_png(path, image) -> None:
    if not cv2.imwrite(str(path), as_gray(image)):
        raise OSError(f"cannot write image {path}")


def read_depth_png(path, scale: float = DEPTH_SCALE) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_ANYDEPTH)
    if img is None:
        raise OSError(f"cannot read depth image {path}")
    if img.dtype != np.uint16:
        raise GeometryError(f"depth PNG {path} must be 16-bit")
    return img.astype(np.float64) / scale


def write_depth_png(path, depth, scale: float = DEPTH_SCALE) -> None:
    counts = np.rint(as_depth(depth) * scale)
    if counts.max(initial=0) > 65535:
        raise GeometryError("depth exceeds the 16-bit PNG range")
    if not cv2.imwrite(str(path), counts.astype(np.uint16)):
        raise OSError(f"cannot write depth image {path}")


def write_mask_png(path, mask) -> None:
    write_gray_png(path, np.asarray(mask, dtype=np.uint8) * 255)


def write_ply(path, cloud: PointCloud) -> None:
    """ASCII PLY with ``x y z`` and, when present, ``nx ny nz``."""
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if cloud.has_normals:
        lines += ["property double nx", "property double ny", "property double nz"]
    lines.append("end_header")
    data = cloud.points if not cloud.has_normals else np.hstack([cloud.points, cloud.normals])
    body = "\n".join(" ".join(f"{x:.10g}" for x in row) for row in data)
    Path(path).write_text("\n".join(lines) + "\n" + body + ("\n" if len(data) else ""), encoding="ascii")


def read_ply(path) -> PointCloud:
    text = Path(path).read_text(encoding="ascii")
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise GeometryError(f"{path} is not a PLY file")
    count = None
    props: list[str] = []
    in_vertex = False
    for i, line in enumerate(lines[1:], start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise GeometryError("only ASCII PLY is supported")
        if parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            props.append(parts[-1])
        elif parts[0] == "end_header":
            body = lines[i + 1 : i + 1 + (count or 0)]
            break
    else:
        raise GeometryError("PLY header has no end_header")
    if count is None:
        raise GeometryError("PLY has no vertex element")
    data = np.array([[float(x) for x in row.split()[: len(props)]] for row in body], dtype=float)
    data = data.reshape(count, len(props))
    idx = {name: k for k, name in enumerate(props)}
    pts = data[:, [idx["x"], idx["y"], idx["z"]]]
    normals = None
    if all(k in idx for k in ("nx", "ny", "nz")):
        normals = data[:, [idx["nx"], idx["ny"], idx["nz"]]]
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts, normals)


def dump_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, default=_json_default), encoding="utf-8")


def load_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")
