"""Per-keypoint occlusion labels.

Self-occlusion: a segment from each keypoint to the camera centre is tested
against the posed hand mesh.  Keypoints sit inside the surface, so the
segment always exits once; two or more distinct crossings mean another part
of the hand covers the keypoint.

Object-occlusion: the projected keypoint falls outside the hand mask (or
outside the image).
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .camera import DegenerateProjectionError, project
from .hand_model import N_KEYPOINTS

LOW, MEDIUM, HIGH = "Low", "Medium", "High"
BINS = (LOW, MEDIUM, HIGH)


class MeshValidationError(ValueError):
    pass


def occlusion_bin(k):
    """Low for 0-5 occluded keypoints, Medium for 6-10, High for 11 or more."""
    k = int(k)
    if not 0 <= k <= N_KEYPOINTS:
        raise ValueError(f"occluded count {k} outside [0, {N_KEYPOINTS}]")
    if k <= 5:
        return LOW
    if k <= 10:
        return MEDIUM
    return HIGH


@dataclass(frozen=True, eq=False)
class OcclusionLabels:
    self_occluded: np.ndarray
    object_occluded: np.ndarray

    def __post_init__(self):
        for name in ("self_occluded", "object_occluded"):
            arr = np.asarray(getattr(self, name), dtype=bool).reshape(-1)
            if arr.shape != (N_KEYPOINTS,):
                raise ValueError(f"{name} must have {N_KEYPOINTS} entries")
            object.__setattr__(self, name, arr)

    @property
    def occluded(self):
        return self.self_occluded | self.object_occluded

    @property
    def visible(self):
        return ~self.occluded

    @property
    def count(self):
        return int(self.occluded.sum())

    @property
    def bin(self):
        return occlusion_bin(self.count)

    def to_dict(self):
        return {
            "self_occluded": self.self_occluded.tolist(),
            "object_occluded": self.object_occluded.tolist(),
            "count": self.count,
            "bin": self.bin,
        }

    @classmethod
    def from_dict(cls, d):
        labels = cls(d["self_occluded"], d["object_occluded"])
        if "count" in d and int(d["count"]) != labels.count:
            raise ValueError("occlusion count does not match the per-keypoint flags")
        return labels

    @classmethod
    def none(cls):
        z = np.zeros(N_KEYPOINTS, dtype=bool)
        return cls(z, z)


@dataclass(frozen=True, eq=False)
class HandMask:
    data: np.ndarray  # (height, width) bool, True = hand

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data).astype(bool))
        if self.data.ndim != 2:
            raise ValueError("mask must be 2-D")

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]


def read_pgm(path):
    """Binary 8-bit P5 graymap; nonzero pixels are hand."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM masks are supported")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos + 1)
    return HandMask(pixels.reshape(height, width) != 0)


def write_pgm(path, mask):
    data = np.where(mask.data, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def ray_triangle(origin, direction, tri):
    """Moller-Trumbore.  Returns the hit distance (> RAY_EPS) or None.

    Hits on the triangle boundary count.
    """
    origin = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("ray direction must be a unit vector")
    a, b, c = np.asarray(tri, dtype=np.float64)
    e1, e2 = b - a, c - a
    p = np.cross(d, e2)
    det = e1 @ p
    if abs(det) < kernels.PARALLEL_TOL:
        return None
    s = origin - a
    u = (s @ p) / det
    if u < -kernels.BARY_TOL or u > 1.0 + kernels.BARY_TOL:
        return None
    q = np.cross(s, e1)
    v = (d @ q) / det
    if v < -kernels.BARY_TOL or u + v > 1.0 + kernels.BARY_TOL:
        return None
    t = (e2 @ q) / det
    return float(t) if t > kernels.RAY_EPS else None


def _check_mesh(vertices, faces):
    tri = vertices[faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    scale = max(float(np.ptp(vertices, axis=0).max()), 1e-12)
    degenerate = area <= 1e-12 * scale**2
    if degenerate.mean() > 0.5:
        raise MeshValidationError(f"{int(degenerate.sum())} of {len(faces)} faces have zero area")
    return tri


def crossing_counts(vertices, faces, keypoints, cam):
    """Distinct mesh crossings on each keypoint-to-camera segment."""
    keypoints = np.asarray(keypoints, dtype=np.float64)
    depth = cam.to_camera(keypoints)[:, 2]
    bad = np.flatnonzero(~(depth > 0))
    if bad.size:
        raise DegenerateProjectionError(int(bad[0]), float(depth[bad[0]]))
    tri = _check_mesh(np.asarray(vertices, dtype=np.float64), np.asarray(faces))
    targets = np.broadcast_to(cam.center, keypoints.shape)
    return kernels.ray_crossings(keypoints, targets, tri)


def self_occlusion(vertices, faces, keypoints, cam):
    return crossing_counts(vertices, faces, keypoints, cam) >= 2


def object_occlusion(keypoints2d, mask):
    kp = np.round(np.asarray(keypoints2d, dtype=np.float64)).astype(np.int64)
    x, y = kp[:, 0], kp[:, 1]
    inside = (x >= 0) & (x < mask.width) & (y >= 0) & (y < mask.height)
    hand = np.zeros(len(kp), dtype=bool)
    hand[inside] = mask.data[y[inside], x[inside]]
    return ~hand


def occlusion_labels(vertices, faces, keypoints3d, cam, mask):
    if (mask.width, mask.height) != tuple(cam.image_size):
        raise ValueError(f"mask is {mask.width}x{mask.height} but camera image is "
                         f"{cam.image_size[0]}x{cam.image_size[1]}")
    self_occ = self_occlusion(vertices, faces, keypoints3d, cam)
    obj_occ = object_occlusion(project(cam, keypoints3d), mask)
    return OcclusionLabels(self_occ, obj_occ)


def render_depth(vertices, faces, cam, width=None, height=None):
    """z-buffer of the mesh seen through ``cam`` (inf where empty)."""
    pc = cam.to_camera(vertices)
    uv = np.stack([cam.fx * pc[:, 0] / pc[:, 2] + cam.cx, cam.fy * pc[:, 1] / pc[:, 2] + cam.cy], axis=1)
    w, h = cam.image_size if width is None else (width, height)
    return kernels.rasterize_depth(uv, pc[:, 2], faces, w, h)


def silhouette(vertices, faces, cam):
    return HandMask(np.isfinite(render_depth(vertices, faces, cam)))
