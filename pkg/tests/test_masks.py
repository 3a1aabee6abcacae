import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ovpanoptic.masks import (Assignment, GroundTruthMasks, MaskSet, assign, hungarian_match, mask_loss,
                              masked_pool, match_cost, pairwise_match_cost)
from ovpanoptic.model import OpenVocabSegmenter, images_to_tensor
from ovpanoptic.training import load_dataset

from conftest import small_config


def test_masked_pool_full_and_single_cell():
    f = torch.randn(5, 4, 4)
    assert torch.allclose(masked_pool(f, torch.ones(4, 4)), f.mean((1, 2)), atol=1e-6)
    m = torch.zeros(4, 4)
    m[2, 1] = 1
    assert torch.allclose(masked_pool(f, m), f[:, 2, 1], atol=1e-6)


def test_masked_pool_empty_falls_back_to_mean():
    f = torch.randn(3, 4, 4)
    assert torch.allclose(masked_pool(f, torch.zeros(4, 4)), f.mean((1, 2)), atol=1e-6)


def test_masked_pool_matches_loop_oracle(rng):
    f = torch.from_numpy(rng.normal(size=(6, 5, 7)))
    m = torch.from_numpy(rng.random((5, 7)))
    num = torch.zeros(6, dtype=torch.float64)
    den = 0.0
    for i in range(5):
        for j in range(7):
            num += m[i, j] * f[:, i, j]
            den += float(m[i, j])
    assert torch.allclose(masked_pool(f, m), num / den, atol=1e-6)


def test_masked_pool_resizes_and_batches():
    f = torch.randn(2, 3, 4, 4)
    masks = torch.zeros(2, 5, 8, 8)
    masks[:, :, :4, :4] = 1
    out = masked_pool(f, masks)
    assert out.shape == (2, 5, 3)
    assert torch.allclose(out[0, 0], f[0, :, :2, :2].mean((1, 2)), atol=1e-6)


@given(st.floats(-5, 5).filter(lambda a: abs(a) > 1e-3))
@settings(max_examples=25, deadline=None)
def test_masked_pool_linear(alpha):
    g = torch.Generator().manual_seed(0)
    f = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)
    m = torch.rand(4, 4, generator=g, dtype=torch.float64)
    assert torch.allclose(masked_pool(alpha * f, m), alpha * masked_pool(f, m), atol=1e-9)


def test_match_cost_examples():
    gt = torch.zeros(8, 8)
    gt[:, :4] = 1
    logits = torch.where(gt > 0, 10.0, -10.0)
    assert match_cost(logits, gt) < 0.01
    zero = torch.zeros(8, 8)
    assert match_cost(zero, gt, 1.0, 0.0) == pytest.approx(math.log(2), rel=1e-6)
    perm = torch.randperm(64)
    rand = torch.randn(8, 8)
    a = match_cost(rand, gt)
    b = match_cost(rand.flatten()[perm].view(8, 8), gt.flatten()[perm].view(8, 8))
    assert a == pytest.approx(b, rel=1e-6)
    with pytest.raises(ValueError):
        match_cost(torch.zeros(4, 4), gt)


def _brute_force(cost):
    n, m = cost.shape
    return min(sum(cost[p[j], j] for j in range(m)) for p in itertools.permutations(range(n), m))


def test_hungarian_equals_exhaustive_search():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(1, 7))
        m = int(rng.integers(0, n + 1))
        cost = rng.random((n, m))
        a = assign(cost)
        got = sum(cost[q, g] for q, g in a.pairs)
        assert len(a.pairs) == m
        assert len(set(a.queries)) == m and sorted(a.targets) == list(range(m))
        assert sorted(a.queries + a.unmatched) == list(range(n))
        if m:
            assert got == pytest.approx(_brute_force(cost), abs=1e-12)


def test_assignment_edge_cases():
    empty = assign(np.zeros((4, 0)))
    assert empty.pairs == [] and empty.unmatched == [0, 1, 2, 3]
    cost = np.ones((3, 3)) - 2 * np.eye(3)
    assert assign(cost).pairs == [(0, 0), (1, 1), (2, 2)]
    with pytest.raises(ValueError):
        assign(np.zeros((2, 3)))


def test_hungarian_match_on_masks():
    gt = torch.zeros(2, 8, 8)
    gt[0, :4] = 1
    gt[1, 4:] = 1
    logits = torch.full((3, 8, 8), -10.0)
    logits[2] = torch.where(gt[0] > 0, 10.0, -10.0)
    logits[0] = torch.where(gt[1] > 0, 10.0, -10.0)
    a = hungarian_match(MaskSet(logits, torch.zeros(3, 4)), GroundTruthMasks(gt))
    assert a.pairs == [(2, 0), (0, 1)] and a.unmatched == [1]
    with pytest.raises(ValueError):
        hungarian_match(MaskSet(logits[:1], torch.zeros(1, 4)), GroundTruthMasks(gt))
    none = hungarian_match(MaskSet(logits, torch.zeros(3, 4)), GroundTruthMasks(torch.zeros(0, 8, 8)))
    assert none.pairs == []


def test_mask_loss_examples():
    gt = torch.zeros(1, 8, 8)
    gt[0, 2:6, 2:6] = 1
    logits = torch.where(gt > 0, 10.0, -10.0)
    pred = MaskSet(logits, torch.zeros(1, 4))
    assert float(mask_loss(pred, GroundTruthMasks(gt), Assignment([(0, 0)], []))) < 0.01
    assert float(mask_loss(pred, GroundTruthMasks(torch.zeros(0, 8, 8)), Assignment([], [0]))) == 0.0


def test_mask_loss_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(1)
    logits = torch.randn(3, 8, 8, generator=g, dtype=torch.float64, requires_grad=True)
    gt = (torch.rand(2, 8, 8, generator=g) > 0.5).double()
    a = Assignment([(2, 0), (0, 1)], [1])
    f = lambda x: mask_loss(MaskSet(x, torch.zeros(3, 2, dtype=torch.float64)), GroundTruthMasks(gt), a)
    assert torch.autograd.gradcheck(f, (logits,), eps=1e-6, atol=1e-8, rtol=1e-3)


def test_pairwise_cost_matches_scalar_cost():
    g = torch.Generator().manual_seed(2)
    logits = torch.randn(3, 6, 6, generator=g)
    gt = (torch.rand(2, 6, 6, generator=g) > 0.5).float()
    c = pairwise_match_cost(logits, gt)
    for i in range(3):
        for j in range(2):
            assert float(c[i, j]) == pytest.approx(match_cost(logits[i], gt[j]), rel=1e-5)


@pytest.fixture(scope="module")
def tiny_model():
    return OpenVocabSegmenter(small_config())


def test_generator_output_cardinality(tiny_model):
    x = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        out = tiny_model(x)
    assert out.mask_logits.shape == (2, 6, 32, 32) and out.embeddings.shape == (2, 6, 64)
    assert torch.isfinite(out.embeddings).all()
    assert torch.allclose(out.embeddings.norm(dim=-1), torch.ones(2, 6), atol=1e-5)
    assert out[0].num_queries == 6 and len(out) == 2


def test_generator_overfits_one_image():
    cfg = small_config(masks={"num_queries": 6, "hidden_dim": 32, "decoder_layers": 2})
    model = OpenVocabSegmenter(cfg)
    item = load_dataset(cfg)[0]
    gt = item.ground_truth()
    x = images_to_tensor(item.image)
    params = [p for p in model.mask_generator.parameters()] + list(model.extractor.captioner.parameters())
    opt = torch.optim.AdamW(params, lr=3e-3, weight_decay=0.0)
    model.train()
    for _ in range(500):
        pred = model(x)[0]
        loss = mask_loss(pred, gt, hungarian_match(pred, gt))
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert loss.item() < 0.05
