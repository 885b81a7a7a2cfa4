import numpy as np
import pytest
import torch

from semsplat.distill import (
    InstanceMasks,
    ProjectionHead,
    TeacherMaps,
    extract_masks,
    instance_feature_map,
    instance_term,
    load_teacher,
    multilevel_loss,
    pixel_distill_loss,
    save_teacher,
    teacher_synthetic,
)
from semsplat.raster import BlendView, Channel, render, render_backward
from semsplat.scene import UNASSIGNED
from semsplat.synth import class_embeddings

from conftest import random_scene


def two_object_ids(size=32):
    ids = np.full((size, size), UNASSIGNED, np.int64)
    ids[4:20, 3:14] = 0
    ids[10:28, 18:30] = 1
    return ids


class TestSyntheticTeacher:
    def test_single_object_constant(self):
        E = class_embeddings(3, 16, 0)
        ids = np.ones((32, 32), np.int64)
        t = teacher_synthetic(ids, E, stride=4)
        assert t.pix_features.shape == (8, 8, 16)
        assert np.allclose(t.pix_features, E[1], atol=1e-12)

    def test_full_frame_embed(self):
        E = class_embeddings(3, 16, 0)
        ids = np.full((32, 32), 2, np.int64)
        t = teacher_synthetic(ids, E)
        mask = np.ones((32, 32), bool)
        assert np.allclose(t.embed(np.zeros((32, 32, 3)), mask, (0, 32, 0, 32)), E[2])

    def test_background_is_zero(self):
        E = class_embeddings(2, 8, 0)
        t = teacher_synthetic(two_object_ids(), E)
        assert np.all(t.pix_features[0, 7] == 0)
        fg = np.linalg.norm(t.pix_features, axis=-1) > 0
        assert np.allclose(np.linalg.norm(t.pix_features[fg], axis=-1), 1.0)

    def test_noise_cosine(self):
        E = class_embeddings(1, 32, 3)
        ids = np.zeros((400, 400), np.int64)
        t = teacher_synthetic(ids, E, stride=4, noise=0.1, seed=5)
        cos = t.pix_features.reshape(-1, 32) @ E[0]
        assert cos.size == 10_000
        assert cos.mean() >= 0.95

    def test_noise_depends_on_view(self):
        E = class_embeddings(2, 8, 0)
        a = teacher_synthetic(two_object_ids(), E, noise=0.2, view=0)
        b = teacher_synthetic(two_object_ids(), E, noise=0.2, view=1)
        c = teacher_synthetic(two_object_ids(), E, noise=0.2, view=0)
        assert not np.array_equal(a.pix_features, b.pix_features)
        assert np.array_equal(a.pix_features, c.pix_features)

    def test_stride_must_divide(self):
        with pytest.raises(ValueError):
            teacher_synthetic(np.zeros((30, 30), np.int64), class_embeddings(1, 4, 0), stride=4)

    def test_file_round_trip(self, tmp_path):
        E = class_embeddings(2, 8, 0)
        maps = [teacher_synthetic(two_object_ids(), E, view=k) for k in range(2)]
        save_teacher(tmp_path, maps, maps[0].text_embeddings, 4)
        loaded = load_teacher(tmp_path)
        assert len(loaded) == 2
        assert np.allclose(loaded[1].pix_features, maps[1].pix_features, atol=1e-7)
        assert sorted(loaded[0].text_embeddings) == sorted(maps[0].text_embeddings)
        mask = two_object_ids() == 1
        v = loaded[0].embed(None, mask[10:28, 18:30], (10, 28, 18, 30))
        assert v @ E[1] > 0.99


class TestMasks:
    def test_constant_map_gives_full_frame(self):
        masks = extract_masks(np.zeros((16, 16), np.int64))
        assert len(masks) == 1
        assert masks.masks[0].all()

    def test_speckle_removed(self):
        ids = np.zeros((24, 24), np.int64)
        ids[2:22:4, 2:22:4] = 1
        masks = extract_masks(ids, min_area=1)
        assert masks.group_ids.tolist() == [0]
        assert masks.masks[0].all()

    def test_disjoint_and_labeled(self, rng):
        ids = rng.integers(-1, 4, size=(32, 32))
        ids[ids < 0] = UNASSIGNED
        ids[:16, :16] = 2
        ids[16:, 16:] = 3
        masks = extract_masks(ids, min_area=1)
        assert masks.masks.sum(axis=0).max() <= 1
        assert not np.any(masks.masks & (ids == UNASSIGNED)[None])

    def test_small_masks_dropped(self):
        ids = np.full((20, 20), UNASSIGNED, np.int64)
        ids[2:5, 2:5] = 0
        ids[8:18, 8:18] = 1
        assert extract_masks(ids, min_area=16).group_ids.tolist() == [1]

    def test_unlabeled_map(self):
        masks = extract_masks(np.full((8, 8), UNASSIGNED, np.int64))
        assert len(masks) == 0
        assert not masks.covered.any()


class TestInstanceFeatureMap:
    def test_full_frame(self):
        E = class_embeddings(2, 8, 0)
        t = teacher_synthetic(np.ones((16, 16), np.int64), E)
        masks = extract_masks(np.zeros((16, 16), np.int64))
        F = instance_feature_map(np.zeros((16, 16, 3)), masks, t)
        assert np.allclose(F, E[1])

    def test_no_masks(self):
        t = teacher_synthetic(np.zeros((16, 16), np.int64), class_embeddings(1, 8, 0))
        masks = InstanceMasks(np.zeros((0, 16, 16), bool), np.zeros(0, np.int64))
        assert not instance_feature_map(np.zeros((16, 16, 3)), masks, t).any()

    def test_two_masks_scripted(self):
        ids = two_object_ids()
        E = class_embeddings(2, 8, 0)
        t = teacher_synthetic(ids, E)
        masks = extract_masks(ids, min_area=1)
        F = instance_feature_map(np.ones((32, 32, 3)), masks, t)
        expected = np.zeros((32, 32, 8))
        for y in range(32):
            for x in range(32):
                for k, g in enumerate(masks.group_ids):
                    if masks.masks[k, y, x]:
                        expected[y, x] = E[g]
        assert np.allclose(F, expected)

    def test_mask_order_irrelevant(self):
        ids = two_object_ids()
        t = teacher_synthetic(ids, class_embeddings(2, 8, 0))
        masks = extract_masks(ids, min_area=1)
        flipped = InstanceMasks(masks.masks[::-1].copy(), masks.group_ids[::-1].copy())
        img = np.ones((32, 32, 3))
        assert np.array_equal(instance_feature_map(img, masks, t), instance_feature_map(img, flipped, t))

    def test_crop_is_masked(self):
        seen = []
        t = TeacherMaps(np.zeros((8, 8, 2)), lambda crop, mask, bbox: seen.append((crop, mask, bbox)) or np.ones(2))
        ids = two_object_ids()
        masks = extract_masks(ids, min_area=1)
        instance_feature_map(np.ones((32, 32, 3)), masks, t)
        for crop, mask, (y0, y1, x0, x1) in seen:
            assert crop.shape[:2] == (y1 - y0, x1 - x0) == mask.shape
            assert np.all(crop[~mask] == 0)


class TestLosses:
    def test_zero(self):
        F = torch.ones(8, 8, 4)
        assert float(multilevel_loss(torch.ones(2, 2, 4), torch.ones(2, 2, 4), F, F, np.ones((8, 8), bool))) == 0.0

    def test_weighting(self):
        F = torch.zeros(8, 8, 4, dtype=torch.float64)
        loss = multilevel_loss(torch.zeros(2, 2, 4), torch.zeros(2, 2, 4), F, torch.ones(8, 8, 4), np.ones((8, 8), bool), 0.3)
        assert float(loss) == pytest.approx(0.3, abs=1e-15)

    def test_naive_loop(self, rng):
        F_hat, F_pix = rng.normal(size=(4, 5, 3)), rng.normal(size=(4, 5, 3))
        F, F_ins = rng.normal(size=(16, 20, 3)), rng.normal(size=(16, 20, 3))
        cov = rng.uniform(size=(16, 20)) < 0.4
        pix = sum(abs(F_pix[i, j, c] - F_hat[i, j, c]) for i in range(4) for j in range(5) for c in range(3)) / 60
        ins_terms = [abs(F_ins[i, j, c] - F[i, j, c]) for i in range(16) for j in range(20) if cov[i, j] for c in range(3)]
        expected = pix + 0.3 * sum(ins_terms) / len(ins_terms)
        assert float(multilevel_loss(F_hat, F_pix, F, F_ins, cov)) == pytest.approx(expected, abs=1e-10)

    def test_uncovered_instance_term(self):
        F = torch.ones(4, 4, 2, requires_grad=True)
        out = instance_term(F, torch.zeros(4, 4, 2), np.zeros((4, 4), bool))
        out.backward()
        assert out.item() == 0.0 and not F.grad.any()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            pixel_distill_loss(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))
        with pytest.raises(ValueError):
            instance_term(np.zeros((4, 4, 3)), np.zeros((4, 4, 2)), np.ones((4, 4), bool))


class TestProjectionHead:
    def test_downsampler_starts_as_average_pool(self, rng):
        head = ProjectionHead(6, 5, stride=4).double()
        F = torch.from_numpy(rng.normal(size=(16, 12, 5)))
        pooled = F.reshape(4, 4, 3, 4, 5).mean(dim=(1, 3))
        assert torch.allclose(head.downsample(F), pooled, atol=1e-12)

    def test_seeded(self):
        a, b = ProjectionHead(8, 4, seed=3), ProjectionHead(8, 4, seed=3)
        assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))

    def test_indivisible_render(self):
        with pytest.raises(ValueError):
            ProjectionHead(4, 4, stride=4).downsample(torch.zeros(10, 8, 4))


def feature_loss(head, bv, x, F_pix, F_ins, covered, gamma=0.3):
    F_raw = torch.from_numpy(bv.composite(x))
    return _head_loss(head, F_raw, F_pix, F_ins, covered, gamma)


def _head_loss(head, F_raw, F_pix, F_ins, covered, gamma):
    F = head(F_raw)
    return multilevel_loss(head.downsample(F), F_pix, F, F_ins, covered, gamma)


@pytest.mark.parametrize("seed", range(3))
def test_feature_gradient_through_render_and_head(seed):
    """d loss / d f via the head's autograd and the rasterizer's backward, against central differences."""
    r = np.random.default_rng(seed)
    scene, cam = random_scene(r, n=10, dim=3, size=16, scale=(0.1, 0.3))
    head = ProjectionHead(3, 4, stride=4, seed=seed).double()
    x = r.normal(size=(10, 3))
    scene.idsf.features = x
    x = scene.idsf.features.astype(np.float64)
    F_pix, F_ins = torch.from_numpy(r.normal(size=(4, 4, 4))), torch.from_numpy(r.normal(size=(16, 16, 4)))
    covered = r.uniform(size=(16, 16)) < 0.5
    bv = BlendView.build(scene, cam)

    F_raw = torch.from_numpy(bv.composite(x)).requires_grad_(True)
    _head_loss(head, F_raw, F_pix, F_ins, covered, 0.3).backward()
    out = render(scene, cam, Channel.FEATURE)
    grads = render_backward(scene, cam, out, {"feature": F_raw.grad.numpy()})
    analytic = np.zeros_like(x)
    analytic[grads.visible] = grads.d_feature

    eps = 1e-6
    numeric = np.zeros_like(x)
    with torch.no_grad():
        for k in np.ndindex(x.shape):
            hi, lo = x.copy(), x.copy()
            hi[k] += eps
            lo[k] -= eps
            numeric[k] = (float(feature_loss(head, bv, hi, F_pix, F_ins, covered)) - float(feature_loss(head, bv, lo, F_pix, F_ins, covered))) / (2 * eps)
    assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) < 1e-4


def test_head_parameter_gradient(rng):
    head = ProjectionHead(3, 4, stride=2, seed=1).double()
    F_raw = torch.from_numpy(rng.normal(size=(8, 8, 3)))
    F_pix, F_ins = torch.from_numpy(rng.normal(size=(4, 4, 4))), torch.from_numpy(rng.normal(size=(8, 8, 4)))
    covered = rng.uniform(size=(8, 8)) < 0.5
    params = list(head.parameters())

    def loss(*ps):
        state = dict(zip([n for n, _ in head.named_parameters()], ps))
        F = torch.func.functional_call(head, state, (F_raw,))
        Fh = torch.nn.functional.conv2d(F.permute(2, 0, 1).unsqueeze(0), state["down.weight"], state["down.bias"], stride=2)[0].permute(1, 2, 0)
        return multilevel_loss(Fh, F_pix, F, F_ins, covered)

    assert torch.autograd.gradcheck(loss, tuple(p.detach().clone().requires_grad_(True) for p in params), eps=1e-6, atol=1e-6)
