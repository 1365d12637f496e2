import numpy as np
import pytest
from hypothesis import given, strategies as st

from affordpose.affordance import COND_DIM, VocabularyTable
from affordpose.camera import project
from affordpose.denoiser import NetConfig, init_weights
from affordpose.evalkit import procrustes_align
from affordpose.hand_model import N_KEYPOINTS, HandPose, forward_keypoints
from affordpose.occlusion import OcclusionLabels
from affordpose.pipeline import pose_keypoints, refine_records
from affordpose.refinement import (
    RefinementConfig, RefinementInstance, guidance_hook, noise_level, param_visibility, refine,
    reprojection_loss,
)
from affordpose.synthetic import family_mean, sample_description

# fingertip keypoint -> params of its finger chain, enumerated once from the toy rig's descendant sets
CHAIN_OF_TIP = {16: [12, 13, 14], 17: [0, 1, 2], 18: [3, 4, 5], 19: [9, 10, 11], 20: [6, 7, 8]}


@pytest.mark.parametrize("k,n", [(0, 100), (21, 1000), (10, 529)])
def test_noise_level_examples(k, n):
    assert noise_level(k) == n


@pytest.mark.parametrize("k", [-1, 22])
def test_noise_level_range(k):
    with pytest.raises(ValueError):
        noise_level(k)


@given(st.integers(0, 20))
def test_noise_level_monotone(k):
    assert noise_level(k) <= noise_level(k + 1)


def _occ(occluded=()):
    flags = np.zeros(N_KEYPOINTS, bool)
    flags[list(occluded)] = True
    return OcclusionLabels(flags, np.zeros(N_KEYPOINTS, bool))


def test_param_visibility_cases(toy):
    assert param_visibility(_occ(), toy).all()
    assert not param_visibility(_occ(range(21)), toy).any()
    for tip, chain in CHAIN_OF_TIP.items():
        # only the distal param has the tip as its whole descendant set
        assert [j for j in range(15) if toy.descendants[j] == {tip}] == [chain[-1]]
        vis = param_visibility(_occ([tip]), toy)
        assert np.flatnonzero(~vis).tolist() == chain


def _instance(toy, cam, seed, occluded=(3, 7, 11, 15, 19)):
    rng = np.random.default_rng(seed)
    theta = family_mean(int(rng.integers(28)), "medium")
    gt = HandPose(theta, rng.normal(0, 0.3, 3), np.array([0.0, -90.0, 500.0]))
    kp2d = project(cam, pose_keypoints(toy, gt)) + rng.normal(0, 3, (N_KEYPOINTS, 2))
    init = gt.with_theta(theta + rng.normal(0, 0.2, theta.shape))
    return RefinementInstance(init, cam, kp2d, _occ(occluded), np.zeros(COND_DIM))


@pytest.mark.parametrize("robust", [False, True])
def test_reprojection_gradient_matches_finite_differences(toy, cam, robust):
    h = 1e-6
    for seed in range(20):
        inst = _instance(toy, cam, seed)
        theta = inst.initial.theta.reshape(-1)
        _, g = reprojection_loss(theta, inst, toy, robust=robust)
        fd = np.empty_like(g)
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = h
            fd[i] = (reprojection_loss(theta + e, inst, toy, robust)[0]
                     - reprojection_loss(theta - e, inst, toy, robust)[0]) / (2 * h)
        assert np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1e-6) < 1e-4


def test_guidance_stationary_and_identity(toy, cam):
    inst = _instance(toy, cam, 0)
    exact = RefinementInstance(inst.initial, cam, project(cam, pose_keypoints(toy, inst.initial)),
                               inst.occlusion, inst.condition)
    theta = inst.initial.theta.reshape(-1)
    _, g = reprojection_loss(theta, exact, toy)
    assert np.abs(g).max() < 1e-6
    assert np.array_equal(guidance_hook(theta, inst, toy, RefinementConfig(eta=0.0)), theta)
    blind = RefinementInstance(inst.initial, cam, inst.keypoints2d, _occ(range(21)), inst.condition)
    assert np.array_equal(guidance_hook(theta, blind, toy, RefinementConfig()), theta)
    moved = guidance_hook(theta, inst, toy, RefinementConfig())
    assert reprojection_loss(moved, inst, toy)[0] < reprojection_loss(theta, inst, toy)[0]


@pytest.fixture(scope="module")
def random_weights():
    vocab = VocabularyTable.build([sample_description(np.random.default_rng(0))])
    w = init_weights(vocab, NetConfig(hidden=16, blocks=1), seed=0)
    w.params["out.W"] = np.random.default_rng(1).normal(0, 0.25, w.params["out.W"].shape)
    return w


def test_all_visible_returns_initial(toy, cam, sched, random_weights):
    inst = _instance(toy, cam, 1, occluded=())
    pose, n_r = refine(inst, toy, random_weights, sched)
    assert pose is inst.initial and n_r == 100


def test_visible_params_exact_and_deterministic(toy, cam, sched, random_weights):
    inst = _instance(toy, cam, 2)
    cfg = RefinementConfig(seed=5, n_r_max=200)
    a, n_r = refine(inst, toy, random_weights, sched, cfg)
    b, _ = refine(inst, toy, random_weights, sched, cfg)
    assert n_r == noise_level(5, cfg)
    assert np.array_equal(a.theta, b.theta)
    vis = param_visibility(inst.occlusion, toy)
    assert np.array_equal(a.theta[vis], inst.initial.theta[vis])
    assert not np.array_equal(a.theta[~vis], inst.initial.theta[~vis])
    assert np.array_equal(a.global_rot, inst.initial.global_rot)


def test_refine_checks_dimensions(toy, cam, sched, random_weights):
    inst = _instance(toy, cam, 3)
    bad = RefinementInstance(inst.initial, cam, inst.keypoints2d, inst.occlusion, np.zeros(64))
    with pytest.raises(ValueError):
        refine(bad, toy, random_weights, sched)
    with pytest.raises(ValueError):
        refine(inst, toy, random_weights, sched, RefinementConfig(n_r_max=1001))


def occluded_error(model, pose, gt_pose, occ):
    pred, gt = pose_keypoints(model, pose), pose_keypoints(model, gt_pose)
    aligned, _ = procrustes_align(pred, gt)
    return float(np.mean(np.linalg.norm(aligned - gt, axis=1)[occ.occluded]))


@pytest.mark.slow
def test_occluded_keypoints_improve_on_most_instances(benchmark):
    done = [r for r in benchmark.refined if r.occlusion.count >= 1][:100]
    assert len(done) == 100
    better = sum(occluded_error(benchmark.model, r.refined_pose, r.gt_pose, r.occlusion)
                 < occluded_error(benchmark.model, r.initial_pose, r.gt_pose, r.occlusion) for r in done)
    assert better >= 80


def _mean_pa(model, records):
    from affordpose.evalkit import pa_mpjpe
    return np.mean([pa_mpjpe(pose_keypoints(model, r.refined_pose), pose_keypoints(model, r.gt_pose))
                    for r in records])


@pytest.mark.slow
def test_untrained_prior_is_worse_than_trained(benchmark):
    subset = [r for r in benchmark.test if r.occlusion.count >= 1][::4]
    cfg = RefinementConfig(eta=0.0)
    untrained = init_weights(benchmark.weights.vocab, benchmark.weights.config, seed=3)
    rng = np.random.default_rng(3)
    for k in untrained.trainable():
        untrained.params[k] = untrained.params[k] + rng.normal(0, 0.1, untrained.params[k].shape)
    worse = refine_records(subset, benchmark.model, untrained, benchmark.sched, cfg, benchmark.root)
    better = refine_records(subset, benchmark.model, benchmark.weights, benchmark.sched, cfg, benchmark.root)
    assert _mean_pa(benchmark.model, worse) > _mean_pa(benchmark.model, better)


def _reproj_px(model, pose, record):
    vis = record.occlusion.visible
    uv = project(record.camera, pose_keypoints(model, pose))
    return float(np.mean(np.linalg.norm(uv[vis] - record.keypoints2d_observed[vis], axis=1)))


@pytest.mark.slow
def test_reprojection_does_not_worsen(benchmark):
    deltas = [_reproj_px(benchmark.model, r.refined_pose, r) - _reproj_px(benchmark.model, r.initial_pose, r)
              for r in benchmark.refined if r.occlusion.visible.any()]
    assert np.median(deltas) <= 1.0
