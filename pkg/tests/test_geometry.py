import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nvs.exceptions import DegenerateRays
from nvs.geometry import (
    CameraPose,
    Ray,
    anchor_frame,
    anchor_point_residual,
    camera_rays,
    look_at,
    plucker_encode,
    random_rotation,
    solve_anchor_point,
)


def identity_pose(w=8, h=8, f=4.0):
    return CameraPose(np.eye(3), np.zeros(3), f, f, w / 2, h / 2, w, h)


def brute_force_closest_point(rays, lo=-2.0, hi=3.0, n=41, rounds=60):
    """Grid search followed by shrinking pattern search; no linear algebra."""
    axis = np.linspace(lo, hi, n)
    best, best_val = None, np.inf
    for p in itertools.product(axis, axis, axis):
        val = anchor_point_residual(rays, p)
        if val < best_val:
            best, best_val = np.array(p), val
    step = (hi - lo) / (n - 1)
    for _ in range(rounds):
        improved = True
        while improved:
            improved = False
            for offset in itertools.product((-1, 0, 1), repeat=3):
                cand = best + step * np.array(offset)
                val = anchor_point_residual(rays, cand)
                if val < best_val - 1e-15:
                    best, best_val, improved = cand, val, True
        step *= 0.5
    return best


def ring_poses(n, target, radius=2.0, seed=0):
    rng = np.random.default_rng(seed)
    poses = []
    for k in range(n):
        az = 2 * np.pi * k / n
        el = rng.uniform(-0.3, 0.6)
        eye = target + radius * np.array([np.cos(el) * np.cos(az), np.sin(el), np.cos(el) * np.sin(az)])
        poses.append(look_at(eye, target, fx=30, fy=30, cx=16, cy=16, width=32, height=32))
    return poses


class TestCameraPose:
    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            CameraPose(2 * np.eye(3), np.zeros(3), 1, 1, 1, 1, 4, 4)
        with pytest.raises(ValueError):
            CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3), 1, 1, 1, 1, 4, 4)

    def test_rejects_bad_intrinsics(self):
        with pytest.raises(ValueError):
            CameraPose(np.eye(3), np.zeros(3), -1, 1, 1, 1, 4, 4)
        with pytest.raises(ValueError):
            CameraPose(np.eye(3), np.zeros(3), 1, 1, 4, 1, 4, 4)

    def test_json_round_trip(self):
        pose = look_at([1.0, 0.5, 2.0], fx=10, fy=11, cx=3, cy=4, width=8, height=9)
        d = pose.to_dict()
        assert set(d) == {"R", "t", "fx", "fy", "cx", "cy", "w", "h"}
        assert len(d["R"]) == 9 and len(d["t"]) == 3
        back = CameraPose.from_json(pose.to_json())
        np.testing.assert_array_equal(back.rotation, pose.rotation)
        np.testing.assert_array_equal(back.translation, pose.translation)
        assert (back.fx, back.fy, back.cx, back.cy, back.width, back.height) == (10, 11, 3, 4, 8, 9)


class TestCameraRays:
    def test_center_pixel_points_forward(self):
        pose = identity_pose(16, 16, f=12.0)
        grid = camera_rays(pose)
        d = grid.directions[8, 8]
        assert np.linalg.norm(d - [0, 0, 1]) < 1 / (2 * pose.fx) * np.sqrt(2)

    def test_origins_are_camera_center(self):
        pose = look_at([0.3, -1.0, 2.0], [0.1, 0.0, 0.0], fx=5, fy=5, cx=4, cy=4, width=8, height=8)
        grid = camera_rays(pose)
        expected = -pose.rotation.T @ pose.translation
        assert np.abs(grid.origins - expected).max() < 1e-9

    def test_matches_scalar_unprojection(self):
        pose = CameraPose(random_rotation(np.random.default_rng(3)), [0.2, -0.1, 1.5], 4, 4, 2, 2, 4, 4)
        grid = camera_rays(pose)
        for v in range(4):
            for u in range(4):
                x = (u + 0.5 - 2) / 4
                y = (v + 0.5 - 2) / 4
                cam = [x, y, 1.0]
                world = [sum(pose.rotation[k][i] * cam[k] for k in range(3)) for i in range(3)]
                norm = sum(c * c for c in world) ** 0.5
                world = [c / norm for c in world]
                np.testing.assert_allclose(grid.directions[v, u], world, rtol=0, atol=1e-15)

    def test_directions_unit(self):
        grid = camera_rays(identity_pose(5, 7, 3.0).with_intrinsics(3, 3, 2.5, 3.5, 5, 7))
        np.testing.assert_allclose(np.linalg.norm(grid.directions, axis=-1), 1, atol=1e-12)
        assert grid.shape == (7, 5)


class TestPlucker:
    def test_through_origin(self):
        p = plucker_encode(Ray([0, 0, 0], [0, 0, 1]))
        np.testing.assert_array_equal(p.direction, [0, 0, 1])
        np.testing.assert_array_equal(p.moment, [0, 0, 0])

    def test_hand_cross_product(self):
        p = plucker_encode(Ray([1, 0, 0], [0, 0, 1]))
        np.testing.assert_allclose(p.moment, [0, -1, 0])

    def test_slide_invariance(self):
        d = np.array([1.0, 2.0, -0.5])
        d /= np.linalg.norm(d)
        o = np.array([0.3, -0.7, 1.1])
        a = plucker_encode(Ray(o, d))
        b = plucker_encode(Ray(o + 2 * d, d))
        assert a.allclose(b, atol=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.floats(-5, 5), min_size=3, max_size=3),
        st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-2),
        st.floats(-10, 10),
    )
    def test_invariants(self, o, d, shift):
        d = np.asarray(d) / np.linalg.norm(d)
        p = plucker_encode(Ray(o, d))
        assert abs(p.direction @ p.moment) < 1e-9
        assert abs(np.linalg.norm(p.direction) - 1) < 1e-9
        q = plucker_encode(Ray(np.asarray(o) + shift * d, d))
        assert p.allclose(q, atol=1e-9)

    def test_injective_on_oriented_lines(self):
        base = plucker_encode(Ray([0, 1, 0], [1, 0, 0]))
        # same line, opposite orientation
        flipped = plucker_encode(Ray([0, 1, 0], [-1, 0, 0]))
        # parallel but offset line
        parallel = plucker_encode(Ray([0, 1.1, 0], [1, 0, 0]))
        # intersecting line through the same point
        other = plucker_encode(Ray.through([0, 1, 0], [1, 0.1, 0]))
        for q in (flipped, parallel, other):
            assert not base.allclose(q, atol=1e-6)
        same = plucker_encode(Ray([5, 1, 0], [1, 0, 0]))
        assert base.allclose(same)


class TestSolveAnchorPoint:
    def test_zero_residual(self):
        rng = np.random.default_rng(0)
        target = np.array([1.0, 2.0, 3.0])
        rays = []
        for _ in range(6):
            o = target + rng.normal(size=3) * 3
            rays.append(Ray.through(o, target - o))
        np.testing.assert_allclose(solve_anchor_point(rays), target, atol=1e-6)

    def test_skew_rays_match_grid_oracle(self):
        rays = [Ray([0, 0, 0], [1, 0, 0]), Ray([0, 0, 1], [0, 1, 0])]
        p = solve_anchor_point(rays)
        oracle = brute_force_closest_point(rays)
        np.testing.assert_allclose(p, oracle, atol=1e-6)
        # midpoint of the common perpendicular
        np.testing.assert_allclose(p, [0, 0, 0.5], atol=1e-9)

    def test_parallel_rays_degenerate(self):
        rays = [Ray([x, y, 0], [0, 0, 1]) for x, y in [(0, 0), (1, 0), (0, 1)]]
        with pytest.raises(DegenerateRays):
            solve_anchor_point(rays)

    def test_single_ray_degenerate(self):
        with pytest.raises(DegenerateRays):
            solve_anchor_point([Ray([0, 0, 0], [0, 0, 1])])

    def test_local_optimality_against_probes(self):
        rng = np.random.default_rng(11)
        rays = [Ray.through(rng.normal(size=3), rng.normal(size=3)) for _ in range(5)]
        p = solve_anchor_point(rays)
        best = anchor_point_residual(rays, p)
        probes = p + rng.normal(scale=0.5, size=(1000, 3))
        assert all(anchor_point_residual(rays, q) >= best - 1e-12 for q in probes)


class TestAnchorFrame:
    def test_single_identity_camera(self):
        pose = identity_pose()
        tf, (out,) = anchor_frame([pose])
        np.testing.assert_allclose(tf.apply_points([0, 0, 1]), 0, atol=1e-12)
        assert abs(np.linalg.norm(out.center) - 1) < 1e-12
        np.testing.assert_allclose(out.center, [0, 0, -1], atol=1e-12)
        np.testing.assert_allclose(out.rotation, np.eye(3), atol=1e-12)

    def test_ring_recovers_common_point(self):
        q = np.array([0.4, -0.2, 1.3])
        poses = ring_poses(6, q)
        tf, out = anchor_frame(poses)
        np.testing.assert_allclose(tf.apply_points(q), 0, atol=1e-9)
        assert abs(np.linalg.norm(out[0].center) - 1) < 1e-6
        np.testing.assert_allclose(out[0].center, [0, 0, -1], atol=1e-6)
        np.testing.assert_allclose(out[0].rotation, np.eye(3), atol=1e-9)

    def test_round_trip(self):
        poses = ring_poses(5, np.array([0.0, 0.3, -0.2]), seed=4)
        tf, out = anchor_frame(poses)
        inv = tf.inverse()
        for a, b in zip(poses, out):
            back = inv.apply_pose(b)
            np.testing.assert_allclose(back.rotation, a.rotation, atol=1e-6)
            np.testing.assert_allclose(back.translation, a.translation, atol=1e-6)
        ident = tf.compose(inv)
        assert abs(ident.scale - 1) < 1e-6
        np.testing.assert_allclose(ident.rotation, np.eye(3), atol=1e-6)
        np.testing.assert_allclose(ident.translation, 0, atol=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_world_motion_invariance(self, seed):
        rng = np.random.default_rng(seed)
        poses = ring_poses(6, rng.normal(size=3), seed=seed)
        R = random_rotation(rng)
        t = rng.normal(size=3) * 3
        moved = []
        for p in poses:
            # world points move x -> R x + t; camera sees the same image
            moved.append(CameraPose(p.rotation @ R.T, p.translation - p.rotation @ R.T @ t,
                                    p.fx, p.fy, p.cx, p.cy, p.width, p.height))
        _, a = anchor_frame(poses)
        _, b = anchor_frame(moved)
        for pa, pb in zip(a, b):
            np.testing.assert_allclose(pa.rotation, pb.rotation, atol=1e-5)
            np.testing.assert_allclose(pa.translation, pb.translation, atol=1e-5)


def test_look_at_axis_hits_target():
    target = np.array([0.2, 0.1, -0.3])
    pose = look_at([1.0, 2.0, 3.0], target, fx=1, fy=1, cx=0.5, cy=0.5, width=1, height=1)
    c = pose.center
    d = pose.optical_axis
    diff = target - c
    assert np.linalg.norm(diff - d * (d @ diff)) < 1e-9
    # world +Y appears towards the top of the image (negative camera y)
    assert (pose.rotation @ np.array([0.0, 1.0, 0.0]))[1] < 0
