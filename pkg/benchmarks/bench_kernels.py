"""Numba vs numpy timings for the two geometric kernels.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Inputs come from the toy hand in a curled pose; both paths are checked to
agree before timing.
"""

import argparse
import time

import numpy as np

from affordpose import kernels
from affordpose.camera import Camera
from affordpose.hand_model import FLEX_AXES, HandPose, forward_kinematics, make_toy_hand


def _inputs(image_scale):
    model = make_toy_hand()
    theta = 0.9 * FLEX_AXES
    pose = HandPose(theta, np.array([0.0, 0.999 * np.pi, 0.0]), np.array([0.0, -90.0, 500.0]))
    kps, verts = forward_kinematics(model, pose)
    cam = Camera(220.0, 220.0, 64.0, 64.0, image_size=(128, 128)).scaled(image_scale)
    tris = verts[model.faces]
    targets = np.broadcast_to(cam.center, kps.shape).copy()
    pc = cam.to_camera(verts)
    uv = np.stack([cam.fx * pc[:, 0] / pc[:, 2] + cam.cx, cam.fy * pc[:, 1] / pc[:, 2] + cam.cy], axis=1)
    return (kps, targets, tris), (uv, pc[:, 2], model.faces, *cam.image_size)


def _time(fn, args, repeat):
    fn(*args)  # warm-up (compiles the numba path)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--image-scale", type=float, default=4.0)
    args = ap.parse_args()
    if not kernels.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    ray_args, raster_args = _inputs(args.image_scale)

    rays = {
        "numba": lambda *a: kernels.ray_crossings(*a, use_numba=True),
        "numpy": lambda *a: kernels.ray_crossings(*a, use_numba=False),
    }
    raster = {
        "numba": lambda *a: kernels.rasterize_depth(*a, use_numba=True),
        "numpy": lambda *a: kernels.rasterize_depth(*a, use_numba=False),
    }
    assert np.array_equal(rays["numba"](*ray_args), rays["numpy"](*ray_args))
    d_nb, d_np = raster["numba"](*raster_args), raster["numpy"](*raster_args)
    assert np.array_equal(np.isfinite(d_nb), np.isfinite(d_np))
    assert np.allclose(d_nb[np.isfinite(d_nb)], d_np[np.isfinite(d_np)], rtol=0, atol=1e-9)

    print(f"{'kernel':<22}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    w, h = raster_args[3], raster_args[4]
    for name, table, a in (("ray_crossings (21)", rays, ray_args), (f"rasterize {w}x{h}", raster, raster_args)):
        t_nb, t_np = _time(table["numba"], a, args.repeat), _time(table["numpy"], a, args.repeat)
        print(f"{name:<22}{1e3 * t_nb:10.3f}{1e3 * t_np:10.3f}{t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
