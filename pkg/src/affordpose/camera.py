"""Pinhole camera without distortion."""

from dataclasses import dataclass, field

import numpy as np

MIN_DEPTH = 1e-6  # mm


class DegenerateProjectionError(ValueError):
    def __init__(self, index, depth):
        super().__init__(f"point {index} has non-positive camera depth {depth:.6g} mm")
        self.index = index


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    image_size: tuple = (256, 256)  # (width, height)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("camera rotation must be a proper rotation matrix")

    @property
    def center(self):
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def from_camera(self, points_cam):
        return (np.asarray(points_cam, dtype=np.float64) - self.translation) @ self.rotation

    def scaled(self, factor):
        """Same view at ``factor`` times the image resolution."""
        w, h = self.image_size
        return Camera(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                      self.rotation, self.translation, (round(w * factor), round(h * factor)))

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   d.get("rotation", np.eye(3)), d.get("translation", np.zeros(3)),
                   tuple(d["image_size"]))


def _checked_camera_points(cam, points):
    pc = cam.to_camera(np.atleast_2d(points))
    bad = np.flatnonzero(~(pc[:, 2] > MIN_DEPTH))
    if bad.size:
        raise DegenerateProjectionError(int(bad[0]), float(pc[bad[0], 2]))
    return pc


def project(cam, points):
    """World points (N, 3) mm -> pixels (N, 2)."""
    pc = _checked_camera_points(cam, points)
    z = pc[:, 2]
    return np.stack([cam.fx * pc[:, 0] / z + cam.cx, cam.fy * pc[:, 1] / z + cam.cy], axis=1)


def projection_jacobian(cam, points):
    """d(u, v)/d(x, y, z) of world points, shape (N, 2, 3)."""
    pc = _checked_camera_points(cam, points)
    x, y, z = pc.T
    J_cam = np.zeros((len(pc), 2, 3))
    J_cam[:, 0, 0] = cam.fx / z
    J_cam[:, 0, 2] = -cam.fx * x / z**2
    J_cam[:, 1, 1] = cam.fy / z
    J_cam[:, 1, 2] = -cam.fy * y / z**2
    return J_cam @ cam.rotation
