import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sfxembed.losses import (LossConfig, circle_loss, compute_loss, contrastive_loss,
                             cosine_matrix, cross_entropy, joint_loss, metric_loss, mine_pairs,
                             mine_triplets, regularface, triplet_loss)


def gram_embeddings(gram):
    """Vectors whose pairwise dot products (all unit norm) equal ``gram``."""
    return torch.linalg.cholesky(torch.tensor(gram, dtype=torch.float64))


class TestCrossEntropy:
    def test_uniform(self):
        assert float(cross_entropy(torch.zeros(3, 2), torch.tensor([0, 1, 0]))) == pytest.approx(math.log(2))

    def test_confident(self):
        val = float(cross_entropy(torch.tensor([[10.0, -10.0]], dtype=torch.float64), torch.tensor([0])))
        assert val == pytest.approx(math.log1p(math.exp(-20)), rel=1e-6)
        assert val == pytest.approx(2.06e-9, rel=1e-2)

    def test_monotone_in_gap(self):
        vals = [float(cross_entropy(torch.tensor([[g, 0.0]], dtype=torch.float64), torch.tensor([0])))
                for g in range(0, 30, 3)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy(torch.zeros(2, 3), torch.tensor([0, 3]))
        with pytest.raises(ValueError):
            cross_entropy(torch.zeros(2, 3), torch.tensor([-1, 0]))


def brute_pairs(labels):
    pos, neg = set(), set()
    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            (pos if labels[i] == labels[j] else neg).add((i, j))
    return pos, neg


def brute_triplets(labels):
    n = len(labels)
    return {(a, p, q) for a in range(n) for p in range(n) for q in range(n)
            if a != p and labels[a] == labels[p] and labels[q] != labels[a]}


class TestMiners:
    def test_examples(self):
        pairs = mine_pairs([0, 0, 1, 1])
        assert (len(pairs.pos), len(pairs.neg)) == (2, 4)
        # ordered (anchor, positive): 4 ordered same-label pairs x 2 negatives
        assert len(mine_triplets([0, 0, 1, 1])) == 8
        same = mine_pairs([5, 5, 5])
        assert len(same.neg) == 0 and len(mine_triplets([5, 5, 5])) == 0

    def test_exhaustive_multisets(self):
        checked = 0
        for n in range(2, 9):
            for labels in itertools.combinations_with_replacement(range(n), n):
                counts = np.bincount(labels)
                pairs = mine_pairs(labels)
                trips = mine_triplets(labels)
                n_pos = int(sum(m * (m - 1) // 2 for m in counts))
                assert len(pairs.pos) == n_pos
                assert len(pairs.neg) == n * (n - 1) // 2 - n_pos
                assert len(trips) == int(sum(m * (m - 1) * (n - m) for m in counts))
                checked += 1
        assert checked == sum(math.comb(2 * n - 1, n) for n in range(2, 9))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 3), min_size=2, max_size=8))
    def test_exact_sets(self, labels):
        pos, neg = brute_pairs(labels)
        pairs = mine_pairs(labels)
        assert {tuple(p) for p in pairs.pos.tolist()} == pos
        assert {tuple(p) for p in pairs.neg.tolist()} == neg
        t = mine_triplets(labels)
        got = set(zip(t.anchor.tolist(), t.positive.tolist(), t.negative.tolist()))
        assert got == brute_triplets(labels)


class TestContrastive:
    def test_identical_positive(self):
        x = torch.tensor([[1.0, 2.0], [2.0, 4.0]], dtype=torch.float64)
        assert float(contrastive_loss(x, mine_pairs([0, 0]))) == pytest.approx(0.0, abs=1e-15)

    def test_hinge_arithmetic(self):
        # s(0,1) = 0.4 (positive), s(0,2) = 0.3 (negative); s(1,2) = 0
        gram = [[1.0, 0.4, 0.3], [0.4, 1.0, 0.0], [0.3, 0.0, 1.0]]
        x = gram_embeddings(gram)
        labels = [0, 0, 1]
        val = contrastive_loss(x, mine_pairs(labels))
        # negatives (0,2): 0.3 and (1,2): 0.0, mean 0.15; positive 0.6
        assert float(val) == pytest.approx(0.6 + 0.15, abs=1e-12)
        pairs = mine_pairs(labels)
        only = pairs._replace(neg=pairs.neg[:1])
        assert float(contrastive_loss(x, only)) == pytest.approx(0.9, abs=1e-12)

    def test_no_negatives(self):
        x = gram_embeddings([[1.0, 0.5], [0.5, 1.0]])
        assert float(contrastive_loss(x, mine_pairs([1, 1]))) == pytest.approx(0.5)


class TestTriplet:
    def test_satisfied(self):
        x = gram_embeddings([[1, 1 - 1e-12, 0], [1 - 1e-12, 1, 0], [0, 0, 1]])
        assert float(triplet_loss(x, mine_triplets([0, 0, 1]), 0.05)) == pytest.approx(0.0, abs=1e-9)

    def test_hinge(self):
        x = gram_embeddings([[1.0, 0.2, 0.6], [0.2, 1.0, 0.6], [0.6, 0.6, 1.0]])
        # both anchors see s_ap = 0.2 and s_an = 0.6
        assert float(triplet_loss(x, mine_triplets([0, 0, 1]), 0.05)) == pytest.approx(0.45)

    def test_boundary(self):
        x = gram_embeddings([[1.0, 0.5, 0.5], [0.5, 1.0, 0.5], [0.5, 0.5, 1.0]])
        assert float(triplet_loss(x, mine_triplets([0, 0, 1]), 0.0)) == pytest.approx(0.0, abs=1e-12)

    def test_empty(self):
        x = torch.randn(3, 4, requires_grad=True)
        val = triplet_loss(x, mine_triplets([0, 0, 0]))
        assert val.item() == 0.0
        val.backward()


class TestCircle:
    def test_formula_example(self):
        x = gram_embeddings([[1, 0.9, 0.1], [0.9, 1, 0.1], [0.1, 0.1, 1]])
        val = float(circle_loss(x, [0, 0, 1], margin=0.25, gamma=1.0))
        assert val == pytest.approx(math.log1p(math.exp(-0.105)), abs=1e-12)
        assert round(val, 4) == 0.6420

    def test_anchor_without_negatives(self):
        x = torch.randn(3, 5, dtype=torch.float64)
        assert float(circle_loss(x, [1, 1, 1])) == 0.0

    def test_decreases_with_positive_similarity(self):
        vals = []
        for sp in np.linspace(-0.5, 0.99, 12):
            x = gram_embeddings([[1, sp, 0.1], [sp, 1, 0.1], [0.1, 0.1, 1]])
            vals.append(float(circle_loss(x, [0, 0, 1], 0.25, 1.0)))
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_finite_gradient_with_missing_categories(self):
        x = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
        circle_loss(x, [0, 0, 0, 1]).backward()
        assert torch.isfinite(x.grad).all()


class TestRegularFace:
    def test_orthogonal(self):
        assert float(regularface(torch.eye(2))) == 0.0

    def test_three_rows(self):
        w = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        assert float(regularface(w)) == pytest.approx(2 / 3)

    def test_identical(self):
        assert float(regularface(torch.ones(2, 4))) == pytest.approx(1.0)

    def test_single_class_warns(self):
        with pytest.warns(UserWarning):
            assert float(regularface(torch.ones(1, 4))) == 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 12), st.integers(0, 10_000))
    def test_range(self, c, seed):
        w = torch.randn(c, 8, generator=torch.Generator().manual_seed(seed))
        assert -1 - 1e-6 <= float(regularface(w)) <= 1 + 1e-6


class TestJoint:
    def test_examples(self):
        assert joint_loss(0.5, 0.3, 0.0) == pytest.approx(0.8)
        assert joint_loss(0.5, 0.3, 0.0, metric_weight=0.0) == pytest.approx(0.5)
        assert joint_loss(1.0, 0.4, 0.2, 1.0, 0.1) == pytest.approx(1.42)

    @pytest.mark.parametrize("which", ["ce", "metric", "reg"])
    def test_non_finite_named(self, which):
        args = {"ce": 1.0, "metric": 0.5, "reg": 0.1}
        args[which] = torch.tensor(float("nan"))
        with pytest.raises(FloatingPointError, match=which):
            joint_loss(args["ce"], args["metric"], args["reg"])

    def test_regularface_only_in_metric_runs(self):
        torch.manual_seed(0)
        logits, emb = torch.randn(8, 3), torch.randn(8, 16)
        labels = torch.tensor([0, 0, 1, 1, 2, 2, 0, 1])
        w = torch.ones(3, 512)  # regularface = 1 for identical rows
        ce = float(cross_entropy(logits, labels))
        assert float(compute_loss(logits, emb, labels, w, LossConfig("ce"))) == pytest.approx(ce)
        cfg = LossConfig("ce+triplet")
        expected = ce + float(metric_loss(emb, labels, cfg)) + 0.1 * 1.0
        assert float(compute_loss(logits, emb, labels, w, cfg)) == pytest.approx(expected, rel=1e-6)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig("ce+arcface")
        with pytest.raises(ValueError):
            LossConfig("ce+circle", circle_margin=1.0)
        with pytest.raises(ValueError):
            LossConfig("ce", metric_weight=-1)
        with pytest.raises(ValueError):
            LossConfig("ce+circle", circle_gamma=0)


# -- properties across all losses --------------------------------------------------------

def all_losses(x, labels):
    labels = torch.as_tensor(labels)
    return {
        "contrastive": contrastive_loss(x, mine_pairs(labels)),
        "triplet": triplet_loss(x, mine_triplets(labels)),
        "circle": circle_loss(x, labels),
        "regularface": regularface(x),
    }


def labels_for(seed, n=8):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, n)
    labels[:3] = [0, 1, 2]  # every kind of pair present
    return torch.as_tensor(labels)


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    x0 = torch.randn(8, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    labels = labels_for(seed)
    logits0 = torch.randn(8, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(seed + 99))
    fns = {name: (lambda x, n=name: all_losses(x, labels)[n]) for name in
           ("contrastive", "triplet", "circle", "regularface")}
    fns["cross_entropy"] = lambda x: cross_entropy(x[:, :3] + logits0, labels)
    eps = 1e-6
    for name, fn in fns.items():
        x = x0.clone().requires_grad_(True)
        fn(x).backward()
        analytic = x.grad
        numeric = torch.zeros_like(x0)
        for idx in itertools.product(range(8), range(16)):
            hi, lo = x0.clone(), x0.clone()
            hi[idx] += eps
            lo[idx] -= eps
            numeric[idx] = (fn(hi) - fn(lo)) / (2 * eps)
        denom = max(float(numeric.norm()), float(analytic.norm()), 1e-12)
        rel = float((numeric - analytic).norm()) / denom
        assert rel < 1e-4, f"{name}: relative gradient error {rel:.2e}"


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_scale_invariance(seed, c):
    x = torch.randn(8, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    labels = labels_for(seed)
    a, b = all_losses(x, labels), all_losses(c * x, labels)
    for name in a:
        assert abs(float(a[name]) - float(b[name])) <= 1e-6, name


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_invariance(seed):
    x = torch.randn(8, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    labels = labels_for(seed)
    perm = torch.as_tensor(np.random.default_rng(seed).permutation(8))
    a, b = all_losses(x, labels), all_losses(x[perm], labels[perm])
    for name in a:
        assert abs(float(a[name]) - float(b[name])) <= 1e-9, name


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(0, 4), min_size=2, max_size=10))
def test_non_negative(seed, labels):
    x = torch.randn(len(labels), 6, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    for name, val in all_losses(x, labels).items():
        if name != "regularface":
            assert float(val) >= 0.0


def test_cosine_floor():
    sim = cosine_matrix(torch.zeros(2, 3))
    assert torch.isfinite(sim).all()
