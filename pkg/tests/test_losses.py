import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from apgcl.apg import CandidateList
from apgcl.losses import (
    LossError,
    TripletBatch,
    apg_consistency_loss,
    attention_loss,
    classification_loss,
    classifier_consistency_loss,
    cosine_distance,
    cross_entropy,
    mine_triplets,
    total_loss,
    triplet_loss,
)
from apgcl.numerics import softmax

LN4 = 1.3862943611198906
LN10 = 2.302585092994046


def test_classification_loss_examples():
    assert classification_loss(torch.tensor([0.0, 1.0, 0.0]), 1).item() == 0.0
    assert classification_loss(torch.full((4,), 0.25), 2).item() == pytest.approx(LN4, abs=1e-6)
    assert classification_loss(torch.tensor([0.7, 0.2, 0.1]), 1).item() == pytest.approx(1.6094379124341003, abs=1e-6)
    with pytest.raises(LossError):
        classification_loss(torch.full((4,), 0.25), 4)


def test_classifier_consistency_loss_examples():
    assert classifier_consistency_loss(torch.tensor([1.0, 0.0]), 0).item() == 0.0
    assert classifier_consistency_loss(torch.full((10,), 0.1), 7).item() == pytest.approx(LN10, abs=1e-6)
    assert classifier_consistency_loss(torch.tensor([0.5, 0.25, 0.25]), 2).item() == pytest.approx(LN4, abs=1e-6)
    with pytest.raises(LossError):
        classifier_consistency_loss(torch.tensor([0.5, 0.5]), -1)


def test_cross_entropy_matches_probability_form(f64):
    logits, y = torch.randn(6, 5), torch.randint(5, (6,))
    assert abs(cross_entropy(logits, y) - classification_loss(softmax(logits), y)) <= 1e-12


def _cands(n_classes, group_size):
    return CandidateList(4, group_size).extend(range(n_classes), seed=0)


def test_attention_loss_examples():
    cands = _cands(1, 1)
    assert attention_loss(torch.ones(2, 1, 1), 0, cands).item() == 0.0
    cands = _cands(5, 2)
    uniform = torch.full((2, 1, 10), 0.1)
    # 2 heads * 1 output * 2 rows * ln 10
    assert attention_loss(uniform, 3, cands).item() == pytest.approx(9.210340371976184, abs=1e-5)
    with pytest.raises(LossError):
        attention_loss(uniform, 9, cands)


def test_attention_loss_monotone_in_own_mass():
    cands = _cands(3, 1)
    low = torch.tensor([0.2, 0.5, 0.3]).reshape(1, 1, 3)
    high = torch.tensor([0.6, 0.2, 0.2]).reshape(1, 1, 3)
    assert attention_loss(high, 0, cands) < attention_loss(low, 0, cands)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(2, 4), st.integers(0, 10**6))
def test_attention_loss_lower_bound(n_h, n_p, n_g, n_cls, seed):
    gen = torch.Generator().manual_seed(seed)
    cands = _cands(n_cls, n_g)
    scores = softmax(torch.randn(n_h, n_p, len(cands), generator=gen) * 3)
    y = seed % n_cls
    rows = list(cands.group_rows(y))
    loss = attention_loss(scores, y, cands).item()
    bound = -n_p * n_h * n_g * math.log(float(scores[..., rows].max()))
    assert loss >= bound - 1e-4 and loss >= 0


def test_triplet_examples():
    a = torch.tensor([[1.0, 0.0]])
    orth = torch.tensor([[0.0, 1.0]])
    assert triplet_loss(TripletBatch(a, a.clone(), orth), 0.2).item() == 0.0
    b = torch.tensor([[1.0, 1.0]])
    assert triplet_loss(TripletBatch(a, b, b.clone()), 0.2).item() == pytest.approx(0.2, abs=1e-6)


def test_triplet_hinge_arithmetic(f64):
    # cos(theta) = 0.4 gives d_p = 0.6, cos = 0.5 gives d_n = 0.5
    def at(cos):
        return torch.tensor([[cos, math.sqrt(1 - cos**2)]])

    a = torch.tensor([[1.0, 0.0]])
    batch = TripletBatch(a, at(0.4), at(0.5))
    assert triplet_loss(batch, 0.2).item() == pytest.approx(0.3, abs=1e-9)


def test_triplet_zero_norm_rejected():
    z = torch.zeros(1, 2)
    with pytest.raises(LossError):
        triplet_loss(TripletBatch(z, torch.ones(1, 2), torch.ones(1, 2)))
    with pytest.raises(LossError):
        cosine_distance(torch.zeros(3), torch.ones(3))


def test_triplet_label_validation():
    x = torch.randn(2, 1, 4)
    with pytest.raises(LossError):
        TripletBatch(x, x, x, labels=(torch.tensor([0, 1]), torch.tensor([0, 1]), torch.tensor([1, 1])))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([0, 1, 2]))
def test_triplet_scale_invariance(seed, which):
    gen = torch.Generator().manual_seed(seed)
    members = [torch.randn(3, 2, 4, generator=gen, dtype=torch.float64) for _ in range(3)]
    base = triplet_loss(TripletBatch(*members))
    members[which] = members[which] * 7.3
    assert abs(triplet_loss(TripletBatch(*members)) - base) <= 1e-6


def test_mine_triplets_valid_and_seeded():
    labels = torch.tensor([0, 0, 1, 1, 2, 0])
    idx = mine_triplets(labels, torch.Generator().manual_seed(0))
    assert len(idx) == 5  # class 2 has no positive
    for a, p, n in idx.tolist():
        assert a != p and labels[a] == labels[p] != labels[n]
    again = mine_triplets(labels, torch.Generator().manual_seed(0))
    assert torch.equal(idx, again)
    assert len(mine_triplets(torch.tensor([1, 1, 1]), torch.Generator())) == 0


def test_apg_consistency_examples():
    g = torch.randn(2, 4)
    assert apg_consistency_loss(g, g.clone()).item() == 0.0
    assert apg_consistency_loss(g + 0.5, g).item() == pytest.approx(0.5, abs=1e-6)
    a = torch.tensor([[1.0, -2.0, 0.5, 3.0]])
    b = torch.tensor([[0.0, 1.0, 0.5, 1.0]])
    assert apg_consistency_loss(a, b).item() == pytest.approx((1 + 3 + 0 + 2) / 4)
    with pytest.raises(LossError):
        apg_consistency_loss(torch.zeros(1, 4), torch.zeros(2, 4))


def test_total_loss():
    assert total_loss({}).total.item() == 0.0
    parts = dict(zip(("cls", "attn", "tri", "conA", "conC"), (1.0, 2.0, 3.0, 4.0, 5.0)))
    br = total_loss(parts)
    assert br.total.item() == 15.0
    assert br.as_floats() == {**parts, "total": 15.0}
    task1 = total_loss({"cls": 0.7, "attn": 1.0})
    assert task1.conA.item() == 0.0 and task1.conC.item() == 0.0
    assert total_loss(parts, {"attn": 0.0, "tri": 0.0}).total.item() == 10.0
    with pytest.raises(LossError):
        total_loss({"kd": 1.0})


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_total_loss_batch_permutation_invariant(seed):
    gen = torch.Generator().manual_seed(seed)
    cands = _cands(3, 1)
    n = 6
    logits = torch.randn(n, 3, generator=gen)
    scores = softmax(torch.randn(n, 2, 1, 3, generator=gen))
    prompts = torch.randn(n, 1, 4, generator=gen)
    y = torch.tensor([0, 0, 1, 1, 2, 2])
    gen_p, cent = torch.randn(n, 1, 4, generator=gen), torch.randn(n, 1, 4, generator=gen)
    trip = torch.tensor([[0, 1, 2], [2, 3, 4], [4, 5, 0]])

    def loss(perm):
        inv = torch.argsort(perm)
        t = inv[trip]
        p = prompts[perm]
        return total_loss({
            "cls": cross_entropy(logits[perm], y[perm]),
            "attn": attention_loss(scores[perm], y[perm], cands),
            "tri": triplet_loss(TripletBatch(p[t[:, 0]], p[t[:, 1]], p[t[:, 2]])),
            "conA": apg_consistency_loss(gen_p[perm], cent[perm]),
            "conC": cross_entropy(logits[perm].flip(-1), y[perm]),
        }).total

    perm = torch.randperm(n, generator=gen)
    assert abs(loss(torch.arange(n)) - loss(perm)) <= 1e-6
