"""MANO-style hand rig: linear blend skinning, 21 regressed keypoints, and
the analytic keypoint Jacobian used by reprojection guidance.

Joint order follows MANO: 0 wrist, 1-3 index, 4-6 middle, 7-9 pinky,
10-12 ring, 13-15 thumb.  Keypoints 0-15 are the joints, 16-20 the tips of
thumb, index, middle, ring, pinky.  Units are millimetres.
"""

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .rotations import canonicalize_axis_angle, left_jacobian, rodrigues, skew

N_JOINTS = 16
N_PARAMS = 15
N_KEYPOINTS = 21

FINGER_CHAINS = {
    "thumb": (13, 14, 15, 16),
    "index": (1, 2, 3, 17),
    "middle": (4, 5, 6, 18),
    "ring": (10, 11, 12, 19),
    "pinky": (7, 8, 9, 20),
}
MANO_PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 0, 10, 11, 0, 13, 14)

_DESC_PROBE_TOL = 1e-7  # mm per radian


class HandModelError(ValueError):
    pass


@dataclass(frozen=True)
class HandPose:
    theta: np.ndarray                                   # (15, 3) axis-angle, rad
    global_rot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=np.float64).reshape(N_PARAMS, 3))
        object.__setattr__(self, "global_rot", np.asarray(self.global_rot, dtype=np.float64).reshape(3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        for name in ("theta", "global_rot", "translation"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"HandPose.{name} has non-finite entries")

    @classmethod
    def zero(cls):
        return cls(np.zeros((N_PARAMS, 3)))

    def canonical(self):
        return HandPose(
            canonicalize_axis_angle(self.theta),
            canonicalize_axis_angle(self.global_rot),
            self.translation.copy(),
        )

    def with_theta(self, theta):
        return HandPose(theta, self.global_rot, self.translation)

    def to_dict(self):
        return {
            "theta": self.theta.tolist(),
            "global_rot": self.global_rot.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["theta"], d.get("global_rot", [0.0, 0.0, 0.0]), d.get("translation", [0.0, 0.0, 0.0]))


@dataclass(frozen=True, eq=False)
class HandModel:
    vertices_rest: np.ndarray       # (V, 3)
    faces: np.ndarray               # (F, 3)
    skin_weights: np.ndarray        # (V, 16)
    joints_rest: np.ndarray         # (16, 3)
    parents: tuple                  # length 16, parents[0] == -1
    keypoint_regressor: np.ndarray  # (21, V)

    def __post_init__(self):
        validate_hand_model(self)

    @property
    def n_vertices(self):
        return self.vertices_rest.shape[0]

    @cached_property
    def subtree(self):
        """(16, 16) boolean; subtree[j, b] iff bone b is j or below j."""
        sub = np.eye(N_JOINTS, dtype=bool)
        for b in range(N_JOINTS - 1, 0, -1):
            sub[self.parents[b]] |= sub[b]
        return sub

    @cached_property
    def _keypoint_bone_terms(self):
        # keypoint_k = sum_b A_b P[k, b] + m[k, b] * c_b for the affine bone
        # maps v -> A_b v + c_b; exact rewrite of regressor @ LBS(vertices).
        rw = self.keypoint_regressor[:, :, None] * self.skin_weights[None, :, :]  # (21, V, 16)
        P = np.einsum("kvb,vx->kbx", rw, self.vertices_rest)
        m = rw.sum(axis=1)
        return P, m

    @cached_property
    def descendants(self):
        """For each of the 15 articulated params, the keypoint indices it moves.

        Found by probing the analytic Jacobian at three fixed random poses, so
        a joint's own keypoint (which pivots in place) is excluded.
        """
        rng = np.random.default_rng(12345)
        influence = np.zeros((N_KEYPOINTS, N_PARAMS))
        for _ in range(3):
            theta = rng.normal(0.0, 0.3, size=(N_PARAMS, 3))
            J = _raw_keypoint_jacobian(self, theta).reshape(N_KEYPOINTS, 3, N_PARAMS, 3)
            influence = np.maximum(influence, np.abs(J).max(axis=(1, 3)))
        return tuple(
            frozenset(int(k) for k in np.flatnonzero(influence[:, j] > _DESC_PROBE_TOL))
            for j in range(N_PARAMS)
        )

    @cached_property
    def _influence_mask(self):
        mask = np.zeros((N_KEYPOINTS, N_PARAMS), dtype=bool)
        for j, ks in enumerate(self.descendants):
            mask[list(ks), j] = True
        return mask

    def rest_keypoints(self):
        return self.keypoint_regressor @ self.vertices_rest


def validate_hand_model(model):
    V = model.vertices_rest.shape[0]
    if model.vertices_rest.ndim != 2 or model.vertices_rest.shape[1] != 3:
        raise HandModelError("vertices must be V x 3")
    if model.faces.ndim != 2 or model.faces.shape[1] != 3:
        raise HandModelError("faces must be F x 3")
    if model.faces.size and (model.faces.min() < 0 or model.faces.max() >= V):
        raise HandModelError("face index out of range")
    if model.skin_weights.shape != (V, N_JOINTS):
        raise HandModelError(f"weights must be {V} x {N_JOINTS}, got {model.skin_weights.shape}")
    if model.joints_rest.shape != (N_JOINTS, 3):
        raise HandModelError("joints_rest must be 16 x 3")
    if len(model.parents) != N_JOINTS or model.parents[0] != -1:
        raise HandModelError("parents must have 16 entries with parents[0] = -1")
    for b in range(1, N_JOINTS):
        if not 0 <= model.parents[b] < b:
            raise HandModelError(f"tree-order violation: parents[{b}] = {model.parents[b]} must be in [0, {b})")
    if np.any(model.skin_weights < 0):
        row = int(np.argwhere(model.skin_weights < 0)[0, 0])
        raise HandModelError(f"negative skinning weight in row {row}")
    sums = model.skin_weights.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-4)
    if bad.size:
        raise HandModelError(f"skinning weight row {int(bad[0])} sums to {sums[bad[0]]:.6g}, expected 1")
    R = model.keypoint_regressor
    if R.shape != (N_KEYPOINTS, V):
        raise HandModelError(f"regressor must map {V} vertices to {N_KEYPOINTS} keypoints")
    if np.any(R < 0):
        raise HandModelError("negative regressor weight")
    rs = R.sum(axis=1)
    bad = np.flatnonzero(np.abs(rs - 1.0) > 1e-4)
    if bad.size:
        raise HandModelError(f"regressor row {int(bad[0])} sums to {rs[bad[0]]:.6g}, expected 1")
    for name in ("vertices_rest", "skin_weights", "joints_rest", "keypoint_regressor"):
        if not np.all(np.isfinite(getattr(model, name))):
            raise HandModelError(f"{name} has non-finite entries")


# --------------------------------------------------------------------------
# file IO
# --------------------------------------------------------------------------

def hand_model_to_dict(model):
    ks, vs = np.nonzero(model.keypoint_regressor)
    return {
        "units": "mm",
        "vertices": model.vertices_rest.tolist(),
        "faces": model.faces.tolist(),
        "weights": model.skin_weights.tolist(),
        "joints_rest": model.joints_rest.tolist(),
        "parents": [int(p) if p >= 0 else None for p in model.parents],
        "regressor": [
            {"keypoint": int(k), "vertex": int(v), "weight": float(model.keypoint_regressor[k, v])}
            for k, v in zip(ks, vs)
        ],
    }


def hand_model_from_dict(d):
    required = ("vertices", "faces", "weights", "joints_rest", "parents", "regressor")
    for key in required:
        if key not in d:
            raise HandModelError(f"hand-model file missing key '{key}'")
    if d.get("units", "mm") != "mm":
        raise HandModelError(f"unsupported units {d.get('units')!r}; expected 'mm'")
    try:
        verts = np.asarray(d["vertices"], dtype=np.float64)
        faces = np.asarray(d["faces"], dtype=np.int64).reshape(-1, 3)
        weights = np.asarray(d["weights"], dtype=np.float64)
        joints = np.asarray(d["joints_rest"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise HandModelError(f"malformed array in hand-model file: {exc}") from None
    parents = tuple(-1 if p is None else int(p) for p in d["parents"])
    R = np.zeros((N_KEYPOINTS, verts.shape[0]))
    for entry in d["regressor"]:
        k, v = int(entry["keypoint"]), int(entry["vertex"])
        if not (0 <= k < N_KEYPOINTS and 0 <= v < verts.shape[0]):
            raise HandModelError(f"regressor entry out of range: {entry}")
        R[k, v] += float(entry["weight"])
    return HandModel(verts, faces, weights, joints, parents, R)


def save_hand_model(model, path):
    Path(path).write_text(json.dumps(hand_model_to_dict(model)))


def load_hand_model(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"hand-model file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise HandModelError(f"{path}: invalid JSON ({exc})") from None
    return hand_model_from_dict(data)


# --------------------------------------------------------------------------
# kinematics
# --------------------------------------------------------------------------

def bone_transforms(model, theta):
    """World (pre-global) bone rotations A (16,3,3), joint positions g (16,3)
    and affine offsets c (16,3) such that bone b maps v -> A_b v + c_b."""
    theta = np.asarray(theta, dtype=np.float64).reshape(N_PARAMS, 3)
    J = model.joints_rest
    A = np.empty((N_JOINTS, 3, 3))
    g = np.empty((N_JOINTS, 3))
    A[0] = np.eye(3)
    g[0] = J[0]
    for b in range(1, N_JOINTS):
        p = model.parents[b]
        A[b] = A[p] @ rodrigues(theta[b - 1])
        g[b] = g[p] + A[p] @ (J[b] - J[p])
    c = g - np.einsum("bij,bj->bi", A, J)
    return A, g, c


def forward_kinematics(model, pose):
    """Pose -> (21x3 keypoints, Vx3 vertices), both in mm."""
    A, _, c = bone_transforms(model, pose.theta)
    W = model.skin_weights
    blended = np.einsum("vb,bij->vij", W, A)
    verts = np.einsum("vij,vj->vi", blended, model.vertices_rest) + W @ c
    kps = model.keypoint_regressor @ verts
    Rg = rodrigues(pose.global_rot)
    return kps @ Rg.T + pose.translation, verts @ Rg.T + pose.translation


def forward_keypoints(model, theta, global_rot=None, translation=None):
    """Keypoints only; skips skinning the full mesh."""
    A, _, c = bone_transforms(model, theta)
    P, m = model._keypoint_bone_terms
    kps = np.einsum("bij,kbj->ki", A, P) + m @ c
    if global_rot is not None:
        kps = kps @ rodrigues(global_rot).T
    if translation is not None:
        kps = kps + translation
    return kps


_LEVI_CIVITA = np.zeros((3, 3, 3))
_LEVI_CIVITA[0, 1, 2] = _LEVI_CIVITA[1, 2, 0] = _LEVI_CIVITA[2, 0, 1] = 1.0
_LEVI_CIVITA[0, 2, 1] = _LEVI_CIVITA[2, 1, 0] = _LEVI_CIVITA[1, 0, 2] = -1.0


def _raw_keypoint_jacobian(model, theta, global_rot=None, _with_keypoints=False):
    theta = np.asarray(theta, dtype=np.float64).reshape(N_PARAMS, 3)
    A, g, c = bone_transforms(model, theta)
    P, m = model._keypoint_bone_terms
    # contribution of bone b to keypoint k (before global transform)
    contrib = np.einsum("bij,kbj->kbi", A, P) + m[:, :, None] * c[None, :, :]
    kps = contrib.sum(axis=1)
    sub = model.subtree[1:].astype(np.float64)                   # (15, 16)
    S = np.einsum("jb,kbx->jkx", sub, contrib)
    mass = np.einsum("jb,kb->jk", sub, m)
    S -= mass[:, :, None] * g[1:, None, :]
    # columns of axes[j] are the world-frame rotation axes w_jc
    axes = np.stack([A[model.parents[j + 1]] @ left_jacobian(theta[j]) for j in range(N_PARAMS)])
    jac = np.einsum("iab,jac,jkb->kijc", _LEVI_CIVITA, axes, S)   # w_jc x S_jk
    if global_rot is not None:
        Rg = rodrigues(global_rot)
        jac = np.einsum("ix,kxjc->kijc", Rg, jac)
        kps = kps @ Rg.T
    jac = jac.reshape(N_KEYPOINTS * 3, N_PARAMS * 3)
    return (kps, jac) if _with_keypoints else jac


def keypoint_jacobian(model, pose):
    """d keypoints / d theta as a (63, 45) matrix in mm per radian.

    Row 3k+i is coordinate i of keypoint k; column 3j+c is component c of
    articulated param j.  Entries for keypoints outside a param's descendant
    set are exactly zero.
    """
    return keypoints_and_jacobian(model, pose)[1]


def keypoints_and_jacobian(model, pose):
    """Posed keypoints (21, 3) and keypoint_jacobian from one kinematic pass."""
    kps, jac = _raw_keypoint_jacobian(model, pose.theta, pose.global_rot, _with_keypoints=True)
    jac = jac.reshape(N_KEYPOINTS, 3, N_PARAMS, 3) * model._influence_mask[:, None, :, None]
    return kps + pose.translation, jac.reshape(N_KEYPOINTS * 3, N_PARAMS * 3)


# --------------------------------------------------------------------------
# procedural toy rig
# --------------------------------------------------------------------------

# finger layout at scale 180: (name, mcp_x, segment lengths, radius at base / tip)
_FINGERS = (
    ("index", 27.0, (40.0, 24.0, 19.0), 8.2, 6.8),
    ("middle", 9.0, (43.0, 27.0, 21.0), 8.5, 7.0),
    ("ring", -9.0, (40.0, 25.0, 20.0), 8.2, 6.8),
    ("pinky", -27.0, (31.0, 19.0, 17.0), 7.4, 6.0),
)
_THUMB = (np.array([55.0, 14.0, 0.0]), np.array([0.6, 0.8, 0.0]), (36.0, 30.0, 26.0), 10.0, 8.0)
_MCP_Y = 88.0
_PALM = (-16.0, 80.0, 42.0, 13.0)    # y0, y1, half-width x, half-thickness z
_BASE_MARGIN = 14.0
_BLEND = 5.0
_N_AROUND = 10
_N_AROUND_PALM = 16
_STEP = 9.0

# flexion axes (rest frame) per articulated param; flexion moves fingers toward -z
FLEX_AXES = np.zeros((N_PARAMS, 3))
FLEX_AXES[:12] = (-1.0, 0.0, 0.0)
FLEX_AXES[12:] = (-0.8, 0.6, 0.0)
SPREAD_AXES = np.tile(np.array([0.0, 0.0, 1.0]), (N_PARAMS, 1))


def finger_curl(theta):
    """Mean flexion angle (rad) over the 15 articulated params."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, N_PARAMS, 3)
    return np.einsum("njc,jc->n", theta, FLEX_AXES) / N_PARAMS


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _stations(keys, step):
    out = [keys[0]]
    for a, b in zip(keys[:-1], keys[1:]):
        n = max(1, int(np.ceil((b - a) / step)))
        pts = a + (b - a) * np.arange(1, n + 1) / n
        pts[-1] = b
        out.extend(pts)
    return np.asarray(out)


class _MeshBuilder:
    def __init__(self):
        self.verts, self.weights, self.faces = [], [], []
        self.regressor = {}

    def add_tube(self, origin, direction, side, up, stations, radius_x, radius_z, weight_fn, n_around):
        phase = np.pi / n_around
        angles = phase + 2.0 * np.pi * np.arange(n_around) / n_around
        first = len(self.verts)
        ring_index = {}
        for i, s in enumerate(stations):
            center = origin + s * direction
            rx, rz = radius_x(s), radius_z(s)
            w = weight_fn(s)
            ring_index[float(s)] = first + i * n_around
            for a in angles:
                self.verts.append(center + rx * np.cos(a) * side + rz * np.sin(a) * up)
                self.weights.append(w)
        n_st = len(stations)
        for i in range(n_st - 1):
            r0, r1 = first + i * n_around, first + (i + 1) * n_around
            for a in range(n_around):
                b = (a + 1) % n_around
                self.faces.append((r0 + a, r0 + b, r1 + b))
                self.faces.append((r0 + a, r1 + b, r1 + a))
        for s, flip in ((stations[0], True), (stations[-1], False)):
            c_idx = len(self.verts)
            self.verts.append(origin + s * direction)
            self.weights.append(weight_fn(s))
            r = ring_index[float(s)]
            for a in range(n_around):
                b = (a + 1) % n_around
                self.faces.append((c_idx, r + b, r + a) if flip else (c_idx, r + a, r + b))
        return ring_index

    def set_keypoint(self, k, ring_start, n_around):
        self.regressor[k] = list(range(ring_start, ring_start + n_around))


def make_toy_hand(seed=0, scale_mm=180.0):
    """Procedural five-finger rig: elliptic palm tube plus one capped tube per
    finger, each keypoint at the centroid of a vertex ring inside the mesh.

    Finger lengths and radii get a +-3% seeded jitter; all lengths scale with
    ``scale_mm / 180``.
    """
    if not scale_mm > 0:
        raise ValueError(f"scale_mm must be positive, got {scale_mm}")
    rng = np.random.default_rng(seed)
    s = scale_mm / 180.0
    mb = _MeshBuilder()
    joints = np.zeros((N_JOINTS, 3))

    # palm: bone 0 only
    y0, y1, hx, hz = _PALM
    palm_keys = [y0, 0.0, y1]
    palm_st = _stations(palm_keys, 16.0) * s
    w0 = np.zeros(N_JOINTS)
    w0[0] = 1.0
    rings = mb.add_tube(
        np.zeros(3), np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]),
        palm_st, lambda _: hx * s, lambda _: hz * s, lambda _: w0, _N_AROUND_PALM,
    )
    mb.set_keypoint(0, rings[0.0], _N_AROUND_PALM)

    def finger(chain, origin, direction, side, lengths, r0, r1):
        lengths = np.asarray(lengths) * rng.uniform(0.97, 1.03, size=3) * s
        rad = np.array([r0, r1]) * rng.uniform(0.97, 1.03) * s
        j1, j2, j3, tip_kp = chain
        s_joint = np.array([0.0, lengths[0], lengths[0] + lengths[1]])
        s_end = lengths.sum()
        s_tip = s_end - 0.8 * rad[1]
        s_base = -_BASE_MARGIN * s
        keys = [s_base, *s_joint, s_tip, s_end]
        st = _stations(keys, _STEP * s)
        bones = (0, j1, j2, j3)
        blend = _BLEND * s

        def weight_fn(x):
            w = np.zeros(N_JOINTS)
            frac = [_smoothstep((x - sj + blend) / (2 * blend)) for sj in s_joint]
            # piecewise: bone i owns the span after joint i-1
            w[bones[0]] = 1.0 - frac[0]
            w[bones[1]] = frac[0] - frac[1]
            w[bones[2]] = frac[1] - frac[2]
            w[bones[3]] = frac[2]
            return w

        def radius(x):
            t = np.clip((x - s_base) / (s_end - s_base), 0.0, 1.0)
            return rad[0] + (rad[1] - rad[0]) * t

        up = np.array([0.0, 0.0, 1.0])
        rings = mb.add_tube(origin, direction, side, up, st, radius, radius, weight_fn, _N_AROUND)
        for jnt, sj in zip((j1, j2, j3), s_joint):
            joints[jnt] = origin + sj * direction
            mb.set_keypoint(jnt, rings[float(sj)], _N_AROUND)
        mb.set_keypoint(tip_kp, rings[float(s_tip)], _N_AROUND)

    ydir = np.array([0.0, 1.0, 0.0])
    xdir = np.array([1.0, 0.0, 0.0])
    for name, x, lengths, r0, r1 in _FINGERS:
        finger(FINGER_CHAINS[name], np.array([x, _MCP_Y, 0.0]) * s, ydir, xdir, lengths, r0, r1)
    t_origin, t_dir, t_len, t_r0, t_r1 = _THUMB
    t_dir = t_dir / np.linalg.norm(t_dir)
    t_side = np.array([-t_dir[1], t_dir[0], 0.0])
    finger(FINGER_CHAINS["thumb"], t_origin * s, t_dir, t_side, t_len, t_r0, t_r1)

    verts = np.asarray(mb.verts)
    R = np.zeros((N_KEYPOINTS, len(verts)))
    for k, idx in mb.regressor.items():
        R[k, idx] = 1.0 / len(idx)
    return HandModel(
        vertices_rest=verts,
        faces=np.asarray(mb.faces, dtype=np.int64),
        skin_weights=np.asarray(mb.weights),
        joints_rest=joints,
        parents=MANO_PARENTS,
        keypoint_regressor=R,
    )


__all__ = [
    "FINGER_CHAINS", "FLEX_AXES", "HandModel", "HandModelError", "HandPose", "N_KEYPOINTS",
    "N_PARAMS", "SPREAD_AXES", "finger_curl", "forward_keypoints", "forward_kinematics",
    "keypoint_jacobian", "keypoints_and_jacobian", "load_hand_model", "make_toy_hand", "save_hand_model", "skew",
]
