import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segfield.camera import (Intrinsics, Pose, Ray, back_project, generate_rays, load_poses,
                             look_at, project, save_poses, stratified_sample, to_local, to_world)


def random_pose(rng) -> Pose:
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return Pose(q, rng.uniform(-3, 3, 3))


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(0, 1, 0, 0, 4, 4)
    with pytest.raises(ValueError):
        Intrinsics(1, 1, 4, 0, 4, 4)
    with pytest.raises(ValueError):
        Intrinsics(1, 1, 0, -1, 4, 4)


def test_pose_validation():
    with pytest.raises(ValueError, match="orthonormal"):
        Pose(np.diag([1.0, 1.0, 2.0]), np.zeros(3))
    with pytest.raises(ValueError, match="determinant"):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_ray_validation():
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([0, 0, 2.0]))
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([0, 0, 1.0]), 2.0, 1.0)


def test_principal_point_ray_is_optical_axis():
    # the pixel whose center coincides with the principal point
    intr = Intrinsics(1.0, 1.0, 0.5, 0.5, 1, 1)
    rays = generate_rays(intr, Pose.identity(), [[0, 0]])
    np.testing.assert_array_equal(rays.origins[0], [0, 0, 0])
    np.testing.assert_allclose(rays.directions[0], [0, 0, 1], atol=1e-15)


def test_translation_shifts_origins_only(rng):
    intr = Intrinsics.from_fov(8, 6, 50)
    t = rng.standard_normal(3)
    a = generate_rays(intr, Pose.identity())
    b = generate_rays(intr, Pose(np.eye(3), t))
    np.testing.assert_array_equal(a.directions, b.directions)
    np.testing.assert_allclose(b.origins - a.origins, np.broadcast_to(t, a.origins.shape))


def test_directions_unit_norm(rng):
    intr = Intrinsics.from_fov(16, 12, 70)
    rays = generate_rays(intr, random_pose(rng))
    np.testing.assert_allclose(np.linalg.norm(rays.directions, axis=1), 1, atol=1e-12)
    assert len(rays) == 16 * 12


def test_pixel_outside_rejected():
    with pytest.raises(ValueError):
        generate_rays(Intrinsics.from_fov(4, 4, 60), Pose.identity(), [[4, 0]])


def test_ray_round_trip_1000(rng):
    intr = Intrinsics(40.0, 42.0, 15.5, 17.0, 32, 30)
    worst = 0.0
    for _ in range(1000):
        pose = random_pose(rng)
        px = np.array([[rng.integers(32), rng.integers(30)]])
        rays = generate_rays(intr, pose, px)
        t = rng.uniform(rays.t_near, rays.t_far)
        proj = project(rays.origins[0] + t * rays.directions[0], intr, pose)
        worst = max(worst, np.abs(proj.uv[0] - (px[0] + 0.5)).max())
    assert worst < 1e-4


def test_project_axis_point():
    intr = Intrinsics(10.0, 10.0, 3.0, 4.0, 8, 8)
    p = project([0, 0, 1.0], intr, Pose.identity())
    np.testing.assert_allclose(p.uv[0], [3, 4])
    assert p.depth[0] == 1.0 and not p.behind[0]


def test_project_behind_flag():
    intr = Intrinsics(10.0, 10.0, 3.0, 4.0, 8, 8)
    p = project([[0, 0, -1.0], [0, 0, 0.0], [0, 0, 1e-9]], intr, Pose.identity())
    assert p.behind.all() and not p.in_frame.any()


def test_project_back_project_1000(rng):
    intr = Intrinsics(30.0, 30.0, 16.0, 16.0, 32, 32)
    for _ in range(1000):
        pose = random_pose(rng)
        x = rng.uniform(-5, 5, 3)
        p = project(x, intr, pose)
        if p.behind[0]:
            continue
        back = back_project(p.uv, p.depth, intr, pose)
        np.testing.assert_allclose(back[0], x, atol=1e-5)


def test_to_local_cases(rng):
    x = rng.standard_normal((5, 3))
    np.testing.assert_array_equal(to_local(x, Pose.identity()), x)
    pose = random_pose(rng)
    np.testing.assert_allclose(to_local(pose.translation, pose), 0, atol=1e-15)
    for _ in range(1000):
        pose = random_pose(rng)
        x = rng.uniform(-4, 4, 3)
        np.testing.assert_allclose(to_local(to_world(x, pose), pose), x, atol=1e-6)
        np.testing.assert_allclose(to_world(to_local(x, pose), pose), x, atol=1e-6)


def test_look_at_points_at_target():
    pose = look_at([0, 2.0, 0.5])
    p = project([0, 0, 0], Intrinsics.from_fov(64, 64, 60), pose)
    np.testing.assert_allclose(p.uv[0], [32, 32], atol=1e-12)
    # image "up" (-y camera) has positive world z
    assert (-pose.rotation[:, 1])[2] > 0


def test_stratified_single_sample(rng):
    t = stratified_sample(0.5, 3.5, 1, rng)
    assert t.shape == (1,) and 0.5 <= t[0] <= 3.5


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2**32 - 1))
def test_stratified_in_bins_and_sorted(n, seed):
    t = stratified_sample(0.5, 3.5, n, np.random.default_rng(seed))
    width = 3.0 / n
    i = np.arange(n)
    assert np.all(t >= 0.5 + i * width) and np.all(t <= 0.5 + (i + 1) * width)
    assert np.all(np.diff(t) > 0)


def test_stratified_deterministic():
    a = stratified_sample(0.5, 3.5, 16, np.random.default_rng(3), n_rays=4)
    b = stratified_sample(0.5, 3.5, 16, np.random.default_rng(3), n_rays=4)
    assert a.tobytes() == b.tobytes()


def test_stratified_mean_is_midpoint():
    rng = np.random.default_rng(0)
    t = stratified_sample(0.5, 3.5, 8, rng, n_rays=20000)
    means = t.mean(1)
    se = means.std(ddof=1) / np.sqrt(len(means))
    assert abs(means.mean() - 2.0) < 3 * se


def test_stratified_rejects_zero():
    with pytest.raises(ValueError):
        stratified_sample(0.5, 3.5, 0, np.random.default_rng())


def test_pose_file_round_trip(tmp_path, rng):
    cams = [(Intrinsics.from_fov(64, 64, 60), random_pose(rng)) for _ in range(3)]
    path = tmp_path / "poses.json"
    save_poses(path, cams, ["a.png", "b.png", "c.png"])
    recs = json.loads(path.read_text())
    assert set(recs[0]) == {"intrinsics", "rotation", "translation", "image"}
    assert len(recs[0]["rotation"]) == 9
    back = load_poses(path)
    for (i0, p0), (i1, p1, name) in zip(cams, back):
        assert i0 == i1 and p0 == p1
    assert back[1][2] == "b.png"
