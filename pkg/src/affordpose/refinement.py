"""Occlusion-aware refinement of an initial pose estimate.

The initial articulation is diffused for ``n_r`` steps (more occluded
keypoints -> larger ``n_r``) and denoised back with the conditional prior.
Every x0 estimate is nudged toward the observed 2D keypoints of visible
joints and then has its visible parameters overwritten with the initial
values, so those come out unchanged.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .camera import project, projection_jacobian
from .denoiser import denoise
from .diffusion import POSE_DIM, q_sample, sample
from .hand_model import N_KEYPOINTS, N_PARAMS, HandPose, keypoints_and_jacobian
from .occlusion import OcclusionLabels
from .rotations import canonicalize_axis_angle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RefinementConfig:
    n_r_min: int = 100
    n_r_max: int = 1000
    eta: float = 1e-4              # rad per unit gradient (px^2 / rad)
    guidance_iters: int = 1
    robust: bool = False
    robust_scale_px: float = 10.0  # Geman-McClure scale
    cfg_scale: float = 1.0         # 1 = purely conditional
    seed: int = 0

    def validate(self, T):
        if not 1 <= self.n_r_min <= self.n_r_max <= T:
            raise ValueError(f"need 1 <= n_r_min <= n_r_max <= T={T}, got {self.n_r_min}, {self.n_r_max}")
        if self.eta < 0 or self.guidance_iters < 0:
            raise ValueError("eta and guidance_iters must be non-negative")


@dataclass(frozen=True, eq=False)
class RefinementInstance:
    initial: HandPose
    camera: object
    keypoints2d: np.ndarray        # (21, 2) observed pixels
    occlusion: OcclusionLabels
    condition: np.ndarray          # (128,)


def noise_level(k, cfg=RefinementConfig()):
    """Partial-diffusion depth for ``k`` occluded keypoints, linear in k."""
    if not 0 <= k <= N_KEYPOINTS:
        raise ValueError(f"occluded count {k} outside [0, {N_KEYPOINTS}]")
    n = int(np.floor(cfg.n_r_min + (cfg.n_r_max - cfg.n_r_min) * k / N_KEYPOINTS + 0.5))
    return min(max(n, cfg.n_r_min), cfg.n_r_max)


def param_visibility(occ, model):
    """A param is visible iff every keypoint it moves is visible."""
    vis = occ.visible
    return np.array([bool(np.all(vis[sorted(ks)])) if ks else True for ks in model.descendants])


def reprojection_loss(theta, instance, model, robust=False, scale_px=10.0):
    """Loss over visible keypoints and its gradient w.r.t. the 45 theta entries."""
    pose = instance.initial.with_theta(np.reshape(theta, (N_PARAMS, 3)))
    vis = instance.occlusion.visible
    kps, J_kp = keypoints_and_jacobian(model, pose)
    uv = project(instance.camera, kps[vis])
    r = uv - instance.keypoints2d[vis]
    e = np.sum(r * r, axis=1)
    if robust:
        s2 = scale_px**2
        loss = float(np.sum(s2 * e / (e + s2)))
        de = s2 * s2 / (e + s2) ** 2
    else:
        loss = float(np.sum(e))
        de = np.ones_like(e)
    J_proj = projection_jacobian(instance.camera, kps[vis])            # (n, 2, 3)
    dX = np.einsum("n,nu,nux->nx", 2.0 * de, r, J_proj)                # dL/dkeypoint
    J = J_kp.reshape(N_KEYPOINTS, 3, POSE_DIM)[vis]
    return loss, np.einsum("nx,nxp->p", dX, J)


def guidance_hook(xhat0, instance, model, cfg):
    """Gradient steps on the visible-keypoint reprojection loss."""
    if not np.any(instance.occlusion.visible):
        log.info("no visible keypoints; guidance disabled")
        return np.asarray(xhat0)
    theta = np.array(xhat0, dtype=np.float64)
    if cfg.eta == 0:
        return theta
    for _ in range(cfg.guidance_iters):
        _, grad = reprojection_loss(theta, instance, model, cfg.robust, cfg.robust_scale_px)
        theta = theta - cfg.eta * grad
    return theta


def make_denoiser(weights, cfg_scale=1.0):
    def fn(x, t, cond):
        out = denoise(weights, x, t, cond)
        if cfg_scale != 1.0:
            uncond = denoise(weights, x, t, weights.null_cond)
            out = uncond + cfg_scale * (out - uncond)
        return out
    return fn


def refine(instance, model, weights, sched, cfg=RefinementConfig()):
    """Refined HandPose; returns ``(pose, n_r)``."""
    cfg.validate(sched.T)
    cond = np.asarray(instance.condition, dtype=np.float64)
    if cond.shape != (weights.config.cond_dim,):
        raise ValueError(f"condition has shape {cond.shape}, weights expect ({weights.config.cond_dim},)")
    theta_init = instance.initial.theta.reshape(-1)
    n_r = noise_level(instance.occlusion.count, cfg)
    fixed = np.repeat(param_visibility(instance.occlusion, model), 3)
    if fixed.all():
        return instance.initial, n_r

    noise_seed, sample_seed = np.random.SeedSequence(cfg.seed).generate_state(2)
    eps = np.random.default_rng(noise_seed).standard_normal(POSE_DIM)
    x_start = q_sample(theta_init, n_r, eps, sched)

    def guide(xhat0, t):
        return guidance_hook(xhat0, instance, model, cfg)

    def inpaint(xhat0, t):
        out = np.array(xhat0)
        out[fixed] = theta_init[fixed]
        return out

    x0 = sample(make_denoiser(weights, cfg.cfg_scale), cond, sched, start=(x_start, n_r),
                guidance=guide, post_x0=inpaint, seed=int(sample_seed))
    free = canonicalize_axis_angle(x0.reshape(N_PARAMS, 3)).reshape(-1)
    theta = np.where(fixed, theta_init, free)
    return instance.initial.with_theta(theta.reshape(N_PARAMS, 3)), n_r
