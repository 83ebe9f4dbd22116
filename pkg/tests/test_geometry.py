import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import points_on_plane, quat_rotation, random_plane, random_pose, to_sensor
from planar_ba.errors import DegenerateFit, DegeneratePlane
from planar_ba.geometry import (
    PlaneCP,
    PlaneHesse,
    Pose,
    cp_to_plane,
    fit_plane,
    plane_to_cp,
    plane_to_global,
    point_to_plane_residual,
    pose_apply,
    pose_compose,
    pose_inverse,
    rotation_angle,
    rotation_from_angle_axis,
    rotations_from_angle_axis,
    transform_plane,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
vec3 = arrays(np.float64, 3, elements=finite)
Rz90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def assert_rotation(R, tol=1e-12):
    assert np.linalg.norm(R.T @ R - np.eye(3)) <= tol
    assert abs(np.linalg.det(R) - 1.0) <= tol


class TestRotation:
    def test_zero_vector_is_identity(self):
        np.testing.assert_array_equal(rotation_from_angle_axis([0, 0, 0]), np.eye(3))

    def test_quarter_turn_about_z(self):
        np.testing.assert_allclose(rotation_from_angle_axis([0, 0, np.pi / 2]), Rz90, atol=1e-15)

    def test_generic_vector_matches_quaternion_oracle(self):
        w = np.array([0.3, -0.2, 0.1])
        R = rotation_from_angle_axis(w)
        assert_rotation(R)
        np.testing.assert_allclose(R, quat_rotation(w), atol=1e-14)
        assert rotation_angle(R) == pytest.approx(np.linalg.norm(w), abs=1e-14)

    @given(vec3)
    def test_exponential_is_a_rotation_matching_oracle(self, w):
        R = rotation_from_angle_axis(w)
        assert_rotation(R, 1e-12)
        np.testing.assert_allclose(R, quat_rotation(w), atol=1e-12)

    @given(vec3)
    def test_inverse_angle_composes_to_identity(self, w):
        R = rotation_from_angle_axis(w) @ rotation_from_angle_axis(-w)
        assert np.linalg.norm(R - np.eye(3)) <= 1e-12

    @given(arrays(np.float64, (5, 3), elements=finite))
    def test_batched_matches_single(self, W):
        batch = rotations_from_angle_axis(W)
        for w, R in zip(W, batch):
            np.testing.assert_allclose(R, rotation_from_angle_axis(w), atol=1e-14)

    def test_tiny_angles_use_series(self):
        w = np.array([1e-10, -2e-10, 3e-11])
        np.testing.assert_allclose(rotation_from_angle_axis(w), quat_rotation(w), atol=1e-20)

    @pytest.mark.parametrize("angle", [0.0, 1e-9, 0.5, np.pi - 1e-7, np.pi])
    def test_rotation_angle_is_stable(self, angle):
        axis = np.array([1.0, 2.0, -2.0]) / 3.0
        assert rotation_angle(quat_rotation(axis * angle)) == pytest.approx(angle, abs=1e-7)


class TestPose:
    def test_compose_with_identity(self, rng):
        P = random_pose(rng)
        Q = pose_compose(Pose.identity(), P)
        np.testing.assert_array_equal(Q.rotation, P.rotation)
        np.testing.assert_array_equal(Q.translation, P.translation)

    def test_compose_with_inverse_is_identity(self, rng):
        for _ in range(20):
            P = random_pose(rng)
            Q = pose_compose(P, pose_inverse(P))
            assert np.abs(Q.rotation - np.eye(3)).max() <= 1e-12
            assert np.abs(Q.translation).max() <= 1e-12

    def test_apply_analytic(self):
        P = Pose(Rz90, [1.0, 0.0, 0.0])
        np.testing.assert_allclose(pose_apply(P, [0.0, 1.0, 0.0]), [0.0, 0.0, 0.0], atol=1e-15)

    def test_compose_applies_right_operand_first(self, rng):
        a, b = random_pose(rng), random_pose(rng)
        p = rng.normal(size=3)
        np.testing.assert_allclose(pose_apply(pose_compose(a, b), p), pose_apply(a, pose_apply(b, p)), atol=1e-12)

    def test_matrix_form(self, rng):
        P = random_pose(rng)
        p = rng.normal(size=3)
        np.testing.assert_allclose((P.matrix() @ np.append(p, 1.0))[:3], pose_apply(P, p), atol=1e-12)


class TestPlanes:
    def test_plane_to_cp(self):
        np.testing.assert_array_equal(plane_to_cp(PlaneHesse([0, 0, 1], -2)).cp, [0, 0, -2])

    def test_cp_to_plane(self):
        p = cp_to_plane(PlaneCP([0, 0, -2]))
        np.testing.assert_array_equal(p.normal, [0, 0, 1])
        assert p.offset == -2

    def test_plane_through_origin_has_no_cp(self):
        with pytest.raises(DegeneratePlane):
            plane_to_cp(PlaneHesse([1, 0, 0], 0))

    def test_tiny_cp_is_degenerate(self):
        with pytest.raises(DegeneratePlane):
            cp_to_plane(PlaneCP([1e-9, 0, 0]))

    @given(vec3.filter(lambda v: np.linalg.norm(v) >= 1e-3))
    def test_cp_round_trip(self, c):
        back = plane_to_cp(cp_to_plane(PlaneCP(c))).cp
        assert np.linalg.norm(back - c) <= 1e-12 * max(1.0, np.linalg.norm(c))

    def test_hesse_round_trip(self, rng):
        for _ in range(50):
            p = random_plane(rng)
            q = cp_to_plane(plane_to_cp(p))
            assert np.abs(q.normal - p.normal).max() <= 1e-12
            assert abs(q.offset - p.offset) <= 1e-12

    def test_canonical_sign(self):
        p = PlaneHesse.canonical([0, 0, -2], 4)
        np.testing.assert_array_equal(p.normal, [0, 0, 1])
        assert p.offset == -2
        q = PlaneHesse.canonical([0, -3, 4], 0)
        np.testing.assert_allclose(q.normal, [0, 0.6, -0.8])
        assert q.offset == 0

    def test_canonical_rejects_zero_normal(self):
        with pytest.raises(DegeneratePlane):
            PlaneHesse.canonical([0, 0, 0], -1)

    def test_transform_identity(self, rng):
        p = random_plane(rng)
        q = transform_plane(Pose.identity(), p)
        np.testing.assert_allclose(q.normal, p.normal, atol=1e-15)
        assert q.offset == pytest.approx(p.offset, abs=1e-15)

    def test_transform_translation_shifts_offset(self):
        q = transform_plane(Pose(np.eye(3), [0, 0, 1]), PlaneHesse([0, 0, 1], -2))
        np.testing.assert_allclose(q.normal, [0, 0, 1])
        assert q.offset == pytest.approx(-1.0)

    def test_transform_preserves_incidence(self, rng):
        for _ in range(20):
            pose, plane = random_pose(rng), random_plane(rng)
            local = transform_plane(pose, plane)
            pts = to_sensor(pose, points_on_plane(rng, plane, 10))
            assert np.abs(pts @ local.normal + local.offset).max() <= 1e-10

    def test_plane_to_global_inverts_transform(self, rng):
        for _ in range(20):
            pose, plane = random_pose(rng), random_plane(rng)
            back = plane_to_global(pose, transform_plane(pose, plane))
            np.testing.assert_allclose(back.normal, plane.normal, atol=1e-12)
            assert back.offset == pytest.approx(plane.offset, abs=1e-12)


class TestResidual:
    def test_offset_zero_plane(self):
        assert point_to_plane_residual(Pose.identity(), PlaneHesse([0, 0, 1], 0), [1, 2, 3]) == 3.0

    def test_point_on_plane(self):
        assert point_to_plane_residual(Pose.identity(), PlaneHesse([0, 0, 1], -2), [5, 7, 2]) == 0.0

    def test_rotated_pose(self):
        r = point_to_plane_residual(Pose(Rz90, [1, 0, 0]), PlaneHesse([1, 0, 0], 0), [0, 1, 0])
        assert r == pytest.approx(0.0, abs=1e-15)

    def test_magnitude_invariant_under_global_rigid_motion(self, rng):
        # canonicalizing the moved plane may flip its sign, so compare |r|
        worst = 0.0
        for _ in range(1000):
            pose, plane, G = random_pose(rng), random_plane(rng), random_pose(rng, scale=50)
            p = rng.normal(size=3) * 3
            before = point_to_plane_residual(pose, plane, p)
            after = point_to_plane_residual(pose_compose(G, pose), plane_to_global(G, plane), p)
            worst = max(worst, abs(abs(after) - abs(before)))
        assert worst <= 1e-10


class TestFitPlane:
    def test_exact_square(self):
        p = fit_plane([(0, 0, 1), (1, 0, 1), (0, 1, 1), (1, 1, 1)])
        np.testing.assert_allclose(p.normal, [0, 0, 1], atol=1e-15)
        assert p.offset == pytest.approx(-1.0)

    def test_identical_points(self):
        with pytest.raises(DegenerateFit):
            fit_plane([(1, 2, 3)] * 3)

    def test_collinear_points(self):
        with pytest.raises(DegenerateFit):
            fit_plane([(0, 0, 0), (1, 1, 1), (2, 2, 2), (3, 3, 3)])

    def test_too_few_points(self):
        with pytest.raises(DegenerateFit):
            fit_plane([(0, 0, 0), (1, 0, 0)])

    def test_noisy_fit_matches_svd_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            plane = random_plane(rng)
            pts = points_on_plane(rng, plane, 100, noise=0.01)
            fitted = fit_plane(pts)
            centered = pts - pts.mean(axis=0)
            n_svd = np.linalg.svd(centered)[2][-1]
            assert abs(abs(fitted.normal @ n_svd) - 1.0) <= 1e-12
            angle = np.degrees(np.arccos(min(1.0, abs(fitted.normal @ plane.normal))))
            assert angle < 1.0

    def test_coplanar_inputs_have_zero_residual(self, rng):
        for _ in range(20):
            plane = random_plane(rng)
            pts = points_on_plane(rng, plane, 30)
            fitted = fit_plane(pts)
            assert np.abs(pts @ fitted.normal + fitted.offset).max() <= 1e-10
