import math

import numpy as np
import pytest
import torch

from semsplat.cluster import knn_graph
from semsplat.distill import InstanceMasks
from semsplat.scene import UNASSIGNED
from semsplat.train.losses import (
    ContrastiveGroups,
    build_contrastive_groups,
    contrastive_loss,
    partition_by_similarity,
    psnr,
    reconstruction_loss,
    smoothing_loss,
    ssim,
)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def naive_smoothing(F, knn, sample):
    total = 0.0
    for i in sample:
        for j in knn[i]:
            total += 1 - unit(F[i]) @ unit(F[j])
    return total / (len(sample) * knn.shape[1])


def naive_contrastive(members, protos, pos, neg, active, tau):
    per_group = []
    for i in range(len(members)):
        if not active[i]:
            continue
        terms = []
        for x in members[i]:
            x = unit(x)
            num = sum(math.exp(x @ protos[p] / tau) for p in pos[i])
            den = sum(math.exp(x @ protos[q] / tau) for q in neg[i])
            terms.append(-math.log(num / den))
        per_group.append(sum(terms) / len(terms))
    return sum(per_group) / len(per_group)


class TestSmoothing:
    def test_identical_features(self, rng):
        F = torch.ones(20, 4, dtype=torch.float64)
        knn = knn_graph(rng.normal(size=(20, 3)), 5)
        assert float(smoothing_loss(F, knn, 10, rng)) == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal_pair(self):
        F = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        knn = np.array([[1], [0]])
        assert float(smoothing_loss(F, knn, 2, sample=[0, 1])) == 1.0

    def test_naive_loop(self, rng):
        F = rng.normal(size=(40, 6))
        knn = knn_graph(rng.normal(size=(40, 3)), 5)
        sample = rng.choice(40, size=8, replace=False)
        got = float(smoothing_loss(torch.from_numpy(F), knn, 8, sample=sample))
        assert got == pytest.approx(naive_smoothing(F, knn, sample), abs=1e-10)

    def test_range(self, rng):
        F = torch.from_numpy(rng.normal(size=(30, 3)))
        knn = knn_graph(rng.normal(size=(30, 3)), 4)
        v = float(smoothing_loss(F, knn, 30, rng))
        assert 0.0 <= v <= 2.0

    def test_antipodal_neighbors_reach_two(self):
        F = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
        knn = np.array([[1], [0], [3], [2]])
        assert float(smoothing_loss(F, knn, 4, sample=[0, 1, 2, 3])) == 2.0

    def test_too_few_points(self, caplog):
        F = torch.ones(3, 2, requires_grad=True)
        out = smoothing_loss(F, np.zeros((3, 5), np.int64), 2)
        assert out.item() == 0.0
        assert "skipped" in caplog.text

    def test_seeded_sample(self, rng):
        F = torch.from_numpy(rng.normal(size=(50, 3)))
        knn = knn_graph(rng.normal(size=(50, 3)), 5)
        a = smoothing_loss(F, knn, 5, np.random.default_rng(9))
        b = smoothing_loss(F, knn, 5, np.random.default_rng(9))
        assert float(a) == float(b)


class TestContrastive:
    def test_closed_form_minus_twenty(self):
        groups = ContrastiveGroups(
            members=[torch.tensor([[1.0, 0.0]], dtype=torch.float64)],
            prototypes=torch.tensor([[1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64),
            positives=[np.array([0])],
            negatives=[np.array([1])],
            active=np.array([True]),
        )
        assert float(contrastive_loss(groups, 0.1)) == pytest.approx(-20.0, abs=1e-12)

    def test_identical_positive_and_negative(self, rng):
        p = unit(rng.normal(size=3))
        groups = ContrastiveGroups(
            members=[torch.from_numpy(rng.normal(size=(7, 3)))],
            prototypes=torch.from_numpy(np.stack([p, p])),
            positives=[np.array([0])],
            negatives=[np.array([1])],
            active=np.array([True]),
        )
        assert float(contrastive_loss(groups, 0.1)) == pytest.approx(0.0, abs=1e-12)

    def test_naive_oracle(self, rng):
        members = [rng.normal(size=(int(rng.integers(1, 6)), 4)) for _ in range(4)]
        protos = np.stack([unit(rng.normal(size=4)) for _ in range(4)])
        pos, neg = partition_by_similarity(protos, 0.2)
        active = np.array([len(n) > 0 for n in neg])
        groups = ContrastiveGroups([torch.from_numpy(m) for m in members], torch.from_numpy(protos), pos, neg, active)
        expected = naive_contrastive(members, protos, pos, neg, active, 0.1)
        assert float(contrastive_loss(groups, 0.1)) == pytest.approx(expected, rel=1e-8, abs=1e-8)

    def test_no_active_anchor(self):
        groups = ContrastiveGroups([torch.ones(2, 2)], torch.ones(1, 2), [np.array([0])], [np.array([], np.int64)], np.array([False]))
        assert float(contrastive_loss(groups)) == 0.0


class TestPartition:
    def test_identical_means(self):
        pos, neg = partition_by_similarity(np.array([[1.0, 0.0], [1.0, 0.0]]), 0.9)
        assert [p.tolist() for p in pos] == [[0, 1], [0, 1]]
        assert all(len(n) == 0 for n in neg)

    def test_orthogonal_means(self):
        pos, neg = partition_by_similarity(np.eye(2), 0.9)
        assert [p.tolist() for p in pos] == [[0], [1]]
        assert [n.tolist() for n in neg] == [[1], [0]]

    def test_scripted_pairs(self, rng):
        P = np.stack([unit(rng.normal(size=3)) for _ in range(5)])
        pos, neg = partition_by_similarity(P, 0.3)
        for i in range(5):
            for j in range(5):
                expect_pos = i == j or float(P[i] @ P[j]) > 0.3
                assert (j in pos[i]) == expect_pos
                assert (j in neg[i]) == (not expect_pos)

    def test_identical_groups_become_inactive(self, rng):
        labels = np.array([0] * 5 + [1] * 5)
        feats = torch.ones(10, 3, dtype=torch.float64)
        groups = build_contrastive_groups(labels, 2, feats, None, None, 0.9)
        assert not groups.active.any()
        assert float(contrastive_loss(groups)) == 0.0


class TestBuildGroups:
    def test_joint_members(self, rng):
        labels = np.array([0, 0, 0, 1, 1, UNASSIGNED])
        feats = torch.from_numpy(rng.normal(size=(6, 3)))
        rendered = torch.from_numpy(rng.normal(size=(4, 4, 3)))
        m = np.zeros((2, 4, 4), bool)
        m[0, :2] = True
        m[1, 3, :3] = True
        groups = build_contrastive_groups(labels, 2, feats, rendered, InstanceMasks(m, np.array([0, 1])), 0.99)
        assert [len(x) for x in groups.members] == [3 + 8, 2 + 3]
        assert torch.equal(groups.members[1][:2], feats[3:5])
        assert torch.equal(groups.members[1][2:], rendered[3, :3])
        assert np.allclose(np.linalg.norm(groups.prototypes.numpy(), axis=1), 1.0)
        assert groups.active.all()

    def test_subsampling_cap(self, rng):
        labels = np.zeros(600, np.int64)
        labels[300:] = 1
        groups = build_contrastive_groups(labels, 2, torch.from_numpy(rng.normal(size=(600, 3))), None, None, 0.9, max_samples=256, generator=rng)
        assert [len(x) for x in groups.members] == [256, 256]


class TestGradients:
    @pytest.mark.parametrize("seed", range(3))
    def test_smoothing(self, seed):
        r = np.random.default_rng(seed)
        knn = knn_graph(r.normal(size=(15, 3)), 3)
        sample = r.choice(15, 6, replace=False)
        F = torch.from_numpy(r.normal(size=(15, 4))).requires_grad_(True)
        assert torch.autograd.gradcheck(lambda f: smoothing_loss(f, knn, 6, sample=sample), (F,), eps=1e-6, atol=1e-7)

    @pytest.mark.parametrize("seed", range(3))
    def test_contrastive(self, seed):
        r = np.random.default_rng(seed)
        labels = r.integers(0, 3, size=18)
        labels[:3] = [0, 1, 2]
        F = torch.from_numpy(r.normal(size=(18, 4))).requires_grad_(True)

        fixed = build_contrastive_groups(labels, 3, F.detach(), None, None, 0.5)

        def loss(f):
            # prototypes are constants of the loss (detached), so only member features vary
            members = [f[torch.as_tensor(np.flatnonzero(labels == i))] for i in range(3)]
            return contrastive_loss(ContrastiveGroups(members, fixed.prototypes, fixed.positives, fixed.negatives, fixed.active), 0.1)

        assert torch.autograd.gradcheck(loss, (F,), eps=1e-6, atol=1e-6)


class TestReconstruction:
    def test_identical_images(self, rng):
        img = torch.from_numpy(rng.uniform(size=(16, 16, 3)))
        assert float(ssim(img, img)) == pytest.approx(1.0, abs=1e-12)
        assert float(reconstruction_loss(img, img)) == pytest.approx(0.0, abs=1e-12)

    def test_pure_l1(self, rng):
        a = torch.from_numpy(rng.uniform(size=(8, 8, 3)))
        b = torch.from_numpy(rng.uniform(size=(8, 8, 3)))
        assert float(reconstruction_loss(a, b, 0.0)) == pytest.approx(float((a - b).abs().mean()), abs=1e-15)

    def test_ssim_reference(self, rng):
        """Separable window against a direct 2D convolution."""
        x = torch.from_numpy(rng.uniform(size=(12, 12, 1)))
        y = torch.from_numpy(rng.uniform(size=(12, 12, 1)))
        g = torch.exp(-((torch.arange(11, dtype=torch.float64) - 5) ** 2) / (2 * 1.5**2))
        w = torch.outer(g, g) / g.sum() ** 2

        def blur(a):
            return torch.nn.functional.conv2d(a[None, None], w[None, None], padding=5)[0, 0]

        a, b = x[..., 0], y[..., 0]
        mx, my = blur(a), blur(b)
        sxx, syy, sxy = blur(a * a) - mx**2, blur(b * b) - my**2, blur(a * b) - mx * my
        c1, c2 = 0.01**2, 0.03**2
        ref = (((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx**2 + my**2 + c1) * (sxx + syy + c2))).mean()
        assert float(ssim(x, y)) == pytest.approx(float(ref), abs=1e-12)

    def test_psnr(self):
        a = np.zeros((4, 4, 3))
        assert psnr(a, a) == float("inf")
        assert psnr(a, a + 0.1) == pytest.approx(20.0)
