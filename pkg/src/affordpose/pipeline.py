"""Record-level glue shared by the CLI and the acceptance suite."""

import logging
from dataclasses import replace

import numpy as np

from .affordance import VocabularyTable
from .camera import project
from .denoiser import NetConfig, train
from .diffusion import POSE_DIM, sample
from .evalkit import evaluate
from .hand_model import N_PARAMS, forward_keypoints, forward_kinematics
from .occlusion import occlusion_labels
from .refinement import RefinementConfig, RefinementInstance, make_denoiser, refine

log = logging.getLogger(__name__)


def pose_keypoints(model, pose):
    return forward_keypoints(model, pose.theta, pose.global_rot, pose.translation)


def training_arrays(records, vocab):
    x0 = np.stack([r.gt_pose.theta.reshape(-1) for r in records])
    idx = np.stack([vocab.indices(r.description) for r in records])
    return x0, idx


def train_prior(records, train_cfg, sched, net=NetConfig(), log_every=500):
    records = [r for r in records if r.gt_pose is not None]
    if not records:
        raise ValueError("no records with gt_pose to train on")
    vocab = VocabularyTable.build(r.description for r in records)
    x0, idx = training_arrays(records, vocab)
    return train(x0, idx, train_cfg, sched, vocab=vocab, net=net, log_every=log_every)


def record_seed(seed, index):
    """Per-record seed independent of how many records precede it in a run."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def record_occlusion(record, model, base_dir):
    """Stored labels, or labels recomputed from the initial pose and the mask."""
    if record.occlusion is not None:
        return record.occlusion
    mask = record.load_mask(base_dir)
    if mask is None:
        raise ValueError(f"record {record.id}: no occlusion labels and no mask to compute them")
    kps, verts = forward_kinematics(model, record.initial_pose)
    return occlusion_labels(verts, model.faces, kps, record.camera, mask)


def refine_record(record, index, model, weights, sched, cfg, base_dir="."):
    occ = record_occlusion(record, model, base_dir)
    init = record.initial_pose
    if record.keypoints2d_observed is not None:
        kp2d = np.asarray(record.keypoints2d_observed, dtype=np.float64)
    else:
        kp2d = project(record.camera, pose_keypoints(model, init))
    cond = weights.encode(weights.vocab.indices(record.description)[None, :])[0]
    inst = RefinementInstance(init, record.camera, kp2d, occ, cond)
    pose, n_r = refine(inst, model, weights, sched, replace(cfg, seed=record_seed(cfg.seed, index)))
    return record.with_(refined_pose=pose, n_r=n_r, occlusion=occ)


def refine_records(records, model, weights, sched, cfg=RefinementConfig(), base_dir="."):
    out = []
    for i, r in enumerate(records):
        if r.initial_pose is None:
            raise ValueError(f"record {r.id}: refine needs initial_pose")
        out.append(refine_record(r, i, model, weights, sched, cfg, base_dir))
        if (i + 1) % 50 == 0:
            log.info("refined %d/%d", i + 1, len(records))
    return out


def evaluate_records(gt_records, pred_records, model, pred_field="refined_pose", base_dir="."):
    """PA-MPJPE of ``pred_field`` poses against ``gt_pose``, matched by id."""
    gt = {r.id: r for r in gt_records}
    ids = [r.id for r in pred_records]
    unknown = [i for i in ids if i not in gt or gt[i].gt_pose is None]
    if unknown:
        raise KeyError(f"predictions without ground truth: {unknown[:5]}")
    gt_kps, pred_kps, occ = {}, {}, {}
    for r in pred_records:
        pose = getattr(r, pred_field)
        if pose is None:
            raise ValueError(f"record {r.id}: no {pred_field}")
        gt_kps[r.id] = pose_keypoints(model, gt[r.id].gt_pose)
        pred_kps[r.id] = pose_keypoints(model, pose)
        source = r if r.occlusion is not None else gt[r.id]
        occ[r.id] = record_occlusion(source, model, base_dir) if source.occlusion is None else source.occlusion
    return evaluate(ids, gt_kps, pred_kps, occ)


def sample_poses(weights, description, n, sched, seed=0, cfg_scale=1.0):
    """``n`` articulations (n, 15, 3) drawn from the prior for one description."""
    cond = weights.encode(weights.vocab.indices(description)[None, :])[0]
    x = sample(make_denoiser(weights, cfg_scale), cond, sched, seed=seed, dim=(n, POSE_DIM))
    return x.reshape(n, N_PARAMS, 3)
