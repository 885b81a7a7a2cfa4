import numpy as np
import pytest
import torch

from semsplat.scene import (
    UNASSIGNED,
    BehindCamera,
    Camera,
    Gaussians,
    IdsField,
    Scene,
    covariance3d,
    project_gaussian,
    project_gaussians_torch,
    project_scene,
    quat_to_rotmat,
)


def _cam(**kw):
    return Camera.look_at([0, 0, -4.0], [0, 0, 0], width=64, height=48, up=(0, -1, 0), **kw)


class TestRotation:
    def test_identity_quaternion(self):
        assert np.allclose(quat_to_rotmat([1, 0, 0, 0]), np.eye(3))

    def test_orthonormal_for_random_quaternions(self, rng):
        for q in rng.normal(size=(20, 4)):
            R = quat_to_rotmat(q)
            assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
            assert np.isclose(np.linalg.det(R), 1.0)

    def test_torch_matches_numpy(self, rng):
        from semsplat.scene import quat_to_rotmat_torch

        q = rng.normal(size=(5, 4))
        got = quat_to_rotmat_torch(torch.from_numpy(q)).numpy()
        want = np.stack([quat_to_rotmat(x) for x in q])
        assert np.allclose(got, want, atol=1e-12)

    def test_covariance_is_symmetric_psd(self, rng):
        S = covariance3d(rng.normal(size=4), [0.1, 0.2, 0.3])
        assert np.allclose(S, S.T)
        assert np.allclose(np.sort(np.linalg.eigvalsh(S)), [0.01, 0.04, 0.09])


class TestGaussians:
    def test_from_values_round_trip(self, rng):
        s = rng.uniform(0.05, 0.2, size=(4, 3))
        o = rng.uniform(0.1, 0.9, size=4)
        g = Gaussians.from_values(rng.normal(size=(4, 3)), rng.normal(size=(4, 4)), s, o, rng.uniform(size=(4, 3)))
        assert np.allclose(g.scales, s, rtol=1e-6)
        assert np.allclose(g.opacities, o, atol=1e-6)
        assert np.allclose(np.linalg.norm(g.quaternions, axis=1), 1.0)

    @pytest.mark.parametrize("bad", [{"s": 0.0}, {"o": 1.0}, {"o": 0.0}])
    def test_rejects_out_of_range(self, bad):
        s = np.full((1, 3), bad.get("s", 0.1))
        o = np.full(1, bad.get("o", 0.5))
        with pytest.raises(ValueError):
            Gaussians.from_values(np.zeros((1, 3)), [[1, 0, 0, 0]], s, o, np.zeros((1, 3)))

    def test_item_view(self):
        g = Gaussians.from_values([[1, 2, 3]], [[2, 0, 0, 0]], [[0.1, 0.2, 0.3]], [0.5], [[0.1, 0.2, 0.3]])
        one = g[0]
        assert np.allclose(one.rotation, [1, 0, 0, 0])
        assert one.opacity == pytest.approx(0.5)

    def test_subset_and_copy_are_independent(self, rng):
        g = Gaussians.from_values(rng.normal(size=(5, 3)), rng.normal(size=(5, 4)), np.full((5, 3), 0.1), np.full(5, 0.5), np.zeros((5, 3)))
        c = g.copy()
        c.positions[0] = 99
        assert g.positions[0, 0] != 99
        assert len(g.subset([0, 2])) == 2


class TestIdsField:
    def test_empty_is_unassigned(self):
        f = IdsField.empty(3, 8)
        assert f.dim == 8 and len(f) == 3
        assert np.all(f.ids == UNASSIGNED)
        assert f.n_groups() == 0

    def test_n_groups(self):
        f = IdsField(np.zeros((4, 2)), [0, 3, UNASSIGNED, 1])
        assert f.n_groups() == 4

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            IdsField(np.zeros((4, 2)), [0, 1])

    def test_scene_requires_matching_sizes(self):
        g = Gaussians.from_values(np.zeros((2, 3)), [[1, 0, 0, 0]] * 2, np.full((2, 3), 0.1), [0.5, 0.5], np.zeros((2, 3)))
        with pytest.raises(ValueError):
            Scene(g, IdsField.empty(3, 2))
        with pytest.raises(ValueError):
            Scene(g, IdsField.empty(2, 2), [_cam()], [])


class TestCamera:
    def test_look_at_centers_target(self):
        cam = _cam()
        uv, z = cam.project_points(np.zeros((1, 3)))
        assert np.allclose(uv[0], [cam.cx, cam.cy])
        assert z[0] == pytest.approx(4.0)
        assert np.allclose(cam.center, [0, 0, -4])

    def test_rejects_bad_rotation(self):
        with pytest.raises(ValueError):
            Camera(50, 50, 16, 16, np.ones((3, 3)), np.zeros(3), 32, 32)

    def test_rejects_tiny_resolution(self):
        with pytest.raises(ValueError):
            Camera(50, 50, 4, 4, np.eye(3), np.zeros(3), 8, 8)


class TestProjection:
    def test_behind_camera(self):
        g = Gaussians.from_values([[0, 0, -5]], [[1, 0, 0, 0]], [[0.1] * 3], [0.5], [[0, 0, 0]])
        with pytest.raises(BehindCamera):
            project_gaussian(g[0], _cam())

    def test_isotropic_footprint(self):
        cam = _cam()
        g = Gaussians.from_values([[0, 0, 0]], [[1, 0, 0, 0]], [[0.1] * 3], [0.5], [[0, 0, 0]])
        s = project_gaussian(g[0], cam)
        expected = (cam.fx * 0.1 / 4.0) ** 2 + 0.3
        assert np.allclose(s.cov2d, np.diag([expected, expected]))
        assert np.allclose(s.mean2d, [cam.cx, cam.cy])

    def test_batched_matches_single(self, rng):
        cam = _cam()
        g = Gaussians.from_values(
            rng.uniform(-1, 1, (6, 3)), rng.normal(size=(6, 4)), rng.uniform(0.05, 0.3, (6, 3)), np.full(6, 0.5), np.zeros((6, 3))
        )
        means, cov, depth, visible = project_scene(g, cam)
        assert visible.all()
        for i in range(6):
            s = project_gaussian(g[i], cam)
            assert np.allclose(means[i], s.mean2d, atol=1e-9)
            assert np.allclose(cov[i], [s.cov2d[0, 0], s.cov2d[0, 1], s.cov2d[1, 1]], atol=1e-9)
            assert depth[i] == pytest.approx(s.depth)

    def test_torch_projection_is_differentiable(self, rng):
        cam = _cam()
        p = torch.tensor(rng.uniform(-1, 1, (3, 3)), requires_grad=True)
        q = torch.tensor(rng.normal(size=(3, 4)))
        s = torch.tensor(rng.uniform(0.05, 0.3, (3, 3)))
        assert torch.autograd.gradcheck(lambda x: project_gaussians_torch(x, q, s, cam)[1], (p,))
