"""Synthetic grasp-family benchmark.

Poses are drawn from Gaussian families indexed by (grasp taxonomy, object
size): each taxonomy fixes a per-finger curl pattern, and smaller objects
curl every finger further.  Records carry a rendered hand mask with a random
elliptical object carved out, occlusion labels, observed 2D keypoints and an
initial pose whose non-visible parameters are corrupted.
"""

import json
from pathlib import Path

import numpy as np

from .affordance import SIZES, AffordanceDescription
from .camera import Camera, project
from .dataset import DatasetRecord, write_dataset
from .hand_model import FLEX_AXES, N_PARAMS, SPREAD_AXES, HandPose, forward_kinematics, save_hand_model
from .occlusion import HandMask, occlusion_labels, silhouette, write_pgm
from .refinement import param_visibility

# category -> (shape, candidate taxonomies, intentions)
OBJECTS = {
    "mug": ("cylindrical", (0, 11), ("to drink", "to lift", "to move")),
    "bottle": ("cylindrical", (0, 2), ("to pour", "to lift", "to open")),
    "ball": ("spherical", (4, 11), ("to throw", "to lift", "to inspect")),
    "pen": ("elongated", (8, 17), ("to write", "to pick up")),
    "knife": ("elongated", (2, 17), ("to cut", "to pick up")),
    "plate": ("flat", (17, 26), ("to carry", "to move")),
    "phone": ("flat", (8, 26), ("to call", "to inspect", "to move")),
    "box": ("cuboid", (2, 4), ("to carry", "to open", "to lift")),
}
INTERACTIONS = ("holding", "grasping", "lifting", "pinching")
SIZE_CURL_SHIFT = {"small": 0.25, "medium": 0.0, "large": -0.25}
FINGER_JOINT_FACTOR = np.array([1.0, 1.2, 0.8])
POSE_STD = 0.04
SUBJECT_STD = 0.03
CAMERA = dict(fx=220.0, fy=220.0, cx=64.0, cy=64.0, image_size=(128, 128))


def family_mean(taxonomy, size):
    """Mean articulation (15, 3) for a (taxonomy, size) grasp family."""
    rng = np.random.default_rng(7919 + int(taxonomy))
    amp = rng.uniform(0.15, 0.85, size=4)
    spread = rng.uniform(-0.1, 0.1, size=4)
    thumb_flex, thumb_opp = rng.uniform(0.1, 0.6), rng.uniform(0.2, 0.8)
    shift = SIZE_CURL_SHIFT[size]
    theta = np.zeros((N_PARAMS, 3))
    # MANO param order: index, middle, pinky, ring, thumb (3 joints each)
    spread_sign = (1.0, 0.3, -1.0, -0.3)
    for f in range(4):
        flex = np.clip(amp[f] + shift, -0.1, None) * FINGER_JOINT_FACTOR
        for j in range(3):
            theta[3 * f + j] = flex[j] * FLEX_AXES[3 * f + j]
        theta[3 * f] += (spread[f] - 0.15 * shift * spread_sign[f]) * SPREAD_AXES[3 * f]
    tflex = max(thumb_flex + 0.6 * shift, 0.0)
    theta[12] = tflex * FLEX_AXES[12] + (thumb_opp + 0.5 * shift) * SPREAD_AXES[12]
    theta[13] = 0.8 * tflex * FLEX_AXES[13]
    theta[14] = 0.6 * tflex * FLEX_AXES[14]
    return theta


def sample_description(rng):
    category = sorted(OBJECTS)[rng.integers(len(OBJECTS))]
    shape, taxonomies, intentions = OBJECTS[category]
    size = SIZES[rng.integers(3)]
    tax = int(taxonomies[rng.integers(len(taxonomies))])
    interaction = INTERACTIONS[rng.integers(len(INTERACTIONS))]
    intention = intentions[rng.integers(len(intentions))]
    summary = f"A hand is {interaction} a {size} {shape} {category} {intention} using grasp type {tax}."
    return AffordanceDescription(category, shape, size, interaction, intention, tax, summary)


def _ellipse_mask(width, height, center, radii, angle):
    yy, xx = np.mgrid[0:height, 0:width]
    c, s = np.cos(angle), np.sin(angle)
    dx, dy = xx - center[0], yy - center[1]
    u = (c * dx + s * dy) / radii[0]
    v = (-s * dx + c * dy) / radii[1]
    return u * u + v * v <= 1.0


def make_record(rng, idx, model, subject, subject_offset, occluder_prob=0.85,
                corrupt_std=0.4, visible_std=0.02, pixel_std=1.0):
    desc = sample_description(rng)
    theta = family_mean(desc.grasp_taxonomy, desc.object_size) + subject_offset
    theta = theta + rng.normal(0.0, POSE_STD, size=theta.shape)
    global_rot = rng.normal(0.0, 0.25, size=3)
    translation = np.array([rng.normal(0, 12), -90.0 + rng.normal(0, 12), rng.uniform(440, 560)])
    gt = HandPose(theta, global_rot, translation)
    cam = Camera(**CAMERA)
    kps, verts = forward_kinematics(model, gt)
    hand = silhouette(verts, model.faces, cam).data
    kp2d = project(cam, kps)
    if rng.random() < occluder_prob:
        anchor = kp2d[rng.integers(len(kp2d))]
        center = anchor + rng.normal(0, 6, size=2)
        radii = rng.uniform(6, 30, size=2)
        hand = hand & ~_ellipse_mask(cam.image_size[0], cam.image_size[1], center, radii,
                                     rng.uniform(0, np.pi))
    mask = HandMask(hand)
    occ = occlusion_labels(verts, model.faces, kps, cam, mask)
    vis = np.repeat(param_visibility(occ, model), 3).reshape(N_PARAMS, 3)
    noise = np.where(vis, rng.normal(0, visible_std, size=theta.shape), rng.normal(0, corrupt_std, size=theta.shape))
    initial = HandPose(theta + noise, global_rot, translation)
    observed = kp2d + rng.normal(0, pixel_std, size=kp2d.shape)
    rec = DatasetRecord(
        id=f"syn{idx:05d}", camera=cam, description=desc, gt_pose=gt, initial_pose=initial,
        keypoints2d_observed=observed, mask_path=f"masks/syn{idx:05d}.pgm", occlusion=occ,
        subject=int(subject),
    )
    return rec, mask


def make_synthetic_dataset(out_dir, n, seed, model, n_subjects=20, **record_opts):
    """Write ``data.jsonl``, ``masks/*.pgm`` and ``hand_model.json`` into ``out_dir``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    offsets = rng.normal(0.0, SUBJECT_STD, size=(n_subjects, N_PARAMS, 3))
    records = []
    for i in range(n):
        subject = int(rng.integers(n_subjects))
        rec, mask = make_record(rng, i, model, subject, offsets[subject], **record_opts)
        write_pgm(out / rec.mask_path, mask)
        records.append(rec)
    write_dataset(out / "data.jsonl", records)
    save_hand_model(model, out / "hand_model.json")
    (out / "vocabulary.json").write_text(json.dumps(
        {c: {"shape": s, "taxonomies": list(t), "intentions": list(i)} for c, (s, t, i) in sorted(OBJECTS.items())},
        indent=1))
    return records
