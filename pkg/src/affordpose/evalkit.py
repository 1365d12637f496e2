"""Procrustes-aligned keypoint error and occlusion-binned reporting."""

import json
from dataclasses import dataclass, field

import numpy as np

from .occlusion import BINS

DEGENERATE_SV = 1e-9


class AlignmentDegenerateError(ValueError):
    pass


@dataclass(frozen=True)
class Similarity:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points):
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation


def procrustes_align(pred, gt):
    """Least-squares similarity (proper rotation, uniform scale, translation)
    taking ``pred`` onto ``gt``.  Returns (aligned pred, Similarity)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError("pred and gt must both be (N, 3)")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(gt))):
        raise ValueError("non-finite keypoints")
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    P, G = pred - mu_p, gt - mu_g
    sv_gt = np.linalg.svd(G, compute_uv=False)
    if sv_gt[1] <= DEGENERATE_SV:
        raise AlignmentDegenerateError("ground-truth keypoints are (nearly) collinear or coincident")
    U, S, Vt = np.linalg.svd(G.T @ P)
    D = np.ones(3)
    if np.linalg.det(U @ Vt) < 0:
        D[2] = -1.0
    R = U @ np.diag(D) @ Vt
    var_p = np.sum(P * P)
    s = float(np.sum(S * D) / var_p) if var_p > 0 else 0.0
    t = mu_g - s * R @ mu_p
    tf = Similarity(s, R, t)
    return tf.apply(pred), tf


def pa_mpjpe(pred, gt):
    aligned, _ = procrustes_align(pred, gt)
    return float(np.mean(np.linalg.norm(aligned - np.asarray(gt), axis=1)))


@dataclass
class EvalReport:
    ids: list
    per_instance: np.ndarray
    bins: list
    average: float = field(init=False)
    bin_average: dict = field(init=False)
    bin_count: dict = field(init=False)

    def __post_init__(self):
        self.per_instance = np.asarray(self.per_instance, dtype=np.float64)
        self.average = float(np.mean(self.per_instance)) if len(self.per_instance) else float("nan")
        self.bin_average, self.bin_count = {}, {}
        labels = np.asarray(self.bins)
        for b in BINS:
            sel = self.per_instance[labels == b] if len(labels) else np.zeros(0)
            self.bin_count[b] = int(sel.size)
            self.bin_average[b] = float(np.mean(sel)) if sel.size else float("nan")

    def to_dict(self):
        return {
            "metric": "PA-MPJPE (mm)",
            "average": self.average,
            "bins": {b: {"average": self.bin_average[b], "count": self.bin_count[b]} for b in BINS},
            "instances": [
                {"id": i, "pa_mpjpe": float(v), "bin": b}
                for i, v, b in zip(self.ids, self.per_instance, self.bins)
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)

    def table(self, method="refined"):
        head = f"{'Method':<16}| {'Avg.':>7} | {'Low':>7} {'Med.':>7} {'High':>7}"
        vals = [self.average] + [self.bin_average[b] for b in BINS]
        row = f"{method:<16}| " + f"{vals[0]:7.2f} | " + " ".join(f"{v:7.2f}" for v in vals[1:])
        counts = f"{'n':<16}| {len(self.per_instance):7d} | " + " ".join(f"{self.bin_count[b]:7d}" for b in BINS)
        rule = "-" * len(head)
        return "\n".join([head, rule, row, counts])


def evaluate(ids, gt_keypoints, pred_keypoints, occlusion):
    """Per-instance PA-MPJPE with Low/Medium/High aggregation.

    ``gt_keypoints`` / ``pred_keypoints`` map id -> (21, 3); ``occlusion``
    maps id -> OcclusionLabels.
    """
    ids = list(ids)
    missing = [i for i in ids if i not in pred_keypoints or i not in gt_keypoints or i not in occlusion]
    if missing:
        raise KeyError(f"ids without matching prediction/ground truth/occlusion: {missing[:5]}")
    values = [pa_mpjpe(pred_keypoints[i], gt_keypoints[i]) for i in ids]
    bins = [occlusion[i].bin for i in ids]
    return EvalReport(ids, values, bins)
