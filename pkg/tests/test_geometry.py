import numpy as np
import pytest

from posefusion.errors import InvalidArgumentError
from posefusion.geometry import (
    ModelPointCloud,
    Pose,
    Quaternion,
    add_classic,
    add_distance,
    angular_error,
    positional_error,
    quat_to_rotation,
    random_pose,
    random_quaternion,
)


def unit_cube():
    corners = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5)
                        for z in (-0.5, 0.5)])
    return ModelPointCloud("cube", corners)


class TestQuatToRotation:
    def test_identity(self):
        R = quat_to_rotation(Quaternion.identity())
        np.testing.assert_allclose(R, np.eye(3), atol=1e-12)

    def test_90deg_about_z(self):
        q = Quaternion(np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4))
        R = quat_to_rotation(q)
        np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)
        # cross-check against direct axis-angle rotation of all basis vectors
        c, s = np.cos(np.pi / 2), np.sin(np.pi / 2)
        expected = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        np.testing.assert_allclose(R, expected, atol=1e-12)

    def test_double_cover(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            q = random_quaternion(rng)
            np.testing.assert_allclose(
                quat_to_rotation(q), quat_to_rotation(-q), atol=1e-12)

    def test_orthonormal_det_one(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            R = quat_to_rotation(random_quaternion(rng))
            np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-6)
            assert abs(np.linalg.det(R) - 1.0) < 1e-6

    def test_nonfinite_rejected(self):
        with pytest.raises(InvalidArgumentError):
            quat_to_rotation(Quaternion(np.nan, 0, 0, 0))


class TestAddDistance:
    def test_identical_poses_zero(self):
        rng = np.random.default_rng(2)
        p = random_pose(rng)
        assert add_distance(p, p, unit_cube()) == 0.0

    def test_pure_translation_offset(self):
        # every summand equals ||d||^2, so the metric is ||d||^2 / 2
        a = Pose(np.array([0.1, 0.0, 0.0]), Quaternion.identity())
        b = Pose.identity()
        assert add_distance(a, b, unit_cube()) == pytest.approx(0.005, abs=1e-9)

    def test_pi_rotation_cube(self):
        # brute force over the 8 corners: each contributes 4(x^2+y^2) = 2
        est = Pose(np.zeros(3), Quaternion.from_axis_angle([0, 0, 1], np.pi))
        assert add_distance(est, Pose.identity(), unit_cube()) == pytest.approx(
            1.0, abs=1e-9)

    def test_matches_bruteforce_random(self):
        rng = np.random.default_rng(3)
        model = ModelPointCloud("m", rng.normal(size=(30, 3)))
        for _ in range(20):
            a, b = random_pose(rng), random_pose(rng)
            brute = sum(
                np.sum((a.apply(x[None])[0] - b.apply(x[None])[0]) ** 2)
                for x in model.points) / (2 * model.num_points)
            assert add_distance(a, b, model) == pytest.approx(brute, rel=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        model = ModelPointCloud("m", rng.normal(size=(25, 3)))
        for _ in range(30):
            a, b = random_pose(rng), random_pose(rng)
            assert add_distance(a, b, model) == pytest.approx(
                add_distance(b, a, model), abs=1e-9)

    def test_zero_iff_equal_for_generic_model(self):
        rng = np.random.default_rng(5)
        model = ModelPointCloud("m", rng.normal(size=(20, 3)))
        a = random_pose(rng)
        b = random_pose(rng)
        assert add_distance(a, b, model) > 0

    def test_small_model_rejected(self):
        with pytest.raises(InvalidArgumentError):
            ModelPointCloud("tiny", np.zeros((3, 3)))

    def test_classic_add_translation(self):
        a = Pose(np.array([0.0, 0.3, 0.4]), Quaternion.identity())
        assert add_classic(a, Pose.identity(), unit_cube()) == pytest.approx(0.5)


class TestAngularError:
    def test_identical(self):
        q = Quaternion.identity()
        assert angular_error(q, q) == 0.0

    def test_negated_is_zero(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            q = random_quaternion(rng)
            assert angular_error(q, -q) == pytest.approx(0.0, abs=1e-6)

    def test_90deg(self):
        q = Quaternion(np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4))
        assert angular_error(Quaternion.identity(), q) == pytest.approx(
            np.pi / 2, abs=1e-9)

    def test_matches_rotation_geodesic(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            qa, qb = random_quaternion(rng), random_quaternion(rng)
            Ra, Rb = quat_to_rotation(qa), quat_to_rotation(qb)
            cos_geo = (np.trace(Ra.T @ Rb) - 1) / 2
            geo = np.arccos(np.clip(cos_geo, -1, 1))
            assert angular_error(qa, qb) == pytest.approx(geo, abs=1e-6)

    def test_sign_invariance(self):
        rng = np.random.default_rng(8)
        for _ in range(30):
            qa, qb = random_quaternion(rng), random_quaternion(rng)
            e = angular_error(qa, qb)
            assert angular_error(-qa, qb) == pytest.approx(e, abs=1e-12)
            assert angular_error(qa, -qb) == pytest.approx(e, abs=1e-12)

    def test_range_and_no_nan_near_unit(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            qa = random_quaternion(rng).as_array() * (1 + rng.uniform(-9e-4, 9e-4))
            qb = random_quaternion(rng).as_array() * (1 + rng.uniform(-9e-4, 9e-4))
            e = angular_error(Quaternion(*qa), Quaternion(*qb))
            assert 0.0 <= e <= np.pi
            assert np.isfinite(e)

    def test_denormalized_rejected(self):
        with pytest.raises(InvalidArgumentError):
            angular_error(Quaternion(2, 0, 0, 0), Quaternion.identity())


class TestPositionalError:
    def test_identical(self):
        p = Pose(np.array([1.0, 2.0, 3.0]), Quaternion.identity())
        assert positional_error(p, p) == 0.0

    def test_3_4_5(self):
        a = Pose.identity()
        b = Pose(np.array([0.03, 0.04, 0.0]), Quaternion.identity())
        assert positional_error(a, b) == pytest.approx(0.05, abs=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(10)
        a, b = random_pose(rng), random_pose(rng)
        shift = rng.normal(size=3)
        a2 = Pose(a.translation + shift, a.orientation)
        b2 = Pose(b.translation + shift, b.orientation)
        assert positional_error(a2, b2) == pytest.approx(
            positional_error(a, b), abs=1e-12)


class TestPoseAlgebra:
    def test_compose_inverse_roundtrip(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            p = random_pose(rng)
            ident = p.compose(p.inverse())
            np.testing.assert_allclose(ident.translation, 0, atol=1e-12)
            assert angular_error(
                ident.orientation.normalized(), Quaternion.identity()) < 1e-6

    def test_apply_matches_compose(self):
        rng = np.random.default_rng(12)
        a, b = random_pose(rng), random_pose(rng)
        pts = rng.normal(size=(10, 3))
        np.testing.assert_allclose(
            a.compose(b).apply(pts), a.apply(b.apply(pts)), atol=1e-12)

    def test_nonfinite_translation_rejected(self):
        with pytest.raises(InvalidArgumentError):
            Pose(np.array([np.inf, 0, 0]), Quaternion.identity())
