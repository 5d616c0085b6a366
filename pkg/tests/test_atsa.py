import numpy as np
import pytest
from hypothesis import given, strategies as st

from adamhf import atsa
from adamhf.atsa import (AtsaParams, budget_from_logit, kept_count, priority_allocator, score_logits, score_tokens,
                         select_and_aggregate, selective_refiner)
from adamhf.backbone import make_sequence, placeholder
from adamhf.numerics import Tensor, adaptive_pool, backward, grad_check, precision
from adamhf.pree import RoutingContext
from oracles import topk_full_sort


def seq(rng, n, d, modality="patho"):
    return make_sequence(rng.normal(size=(n, d)), Tensor(rng.normal(size=(1, d))), modality)


def test_identical_tokens_uniform_scores(rng):
    params = AtsaParams(rng, 4, 1, 4)
    row = rng.normal(size=(1, 4))
    s = make_sequence(np.repeat(row, 5, axis=0), Tensor(rng.normal(size=(1, 4))), "patho")
    assert np.allclose(score_tokens(s, params).data, 1 / 5, atol=1e-6)


@given(st.integers(1, 40), st.integers(0, 1000))
def test_scores_sum_to_one(n, seed):
    r = np.random.default_rng(seed)
    s = score_tokens(seq(r, n, 6), AtsaParams(r, 6, 1, 8)).data
    assert s.shape == (n, 1) and abs(s.sum() - 1) <= 1e-6


def test_duplicate_token_duplicates_logit(rng):
    params = AtsaParams(rng, 4, 1, 4)
    x = rng.normal(size=(3, 4))
    x = np.vstack([x, x[1:2]])
    logits = score_logits(make_sequence(x, Tensor(rng.normal(size=(1, 4))), "patho"), params).data
    assert logits[3, 0] == logits[1, 0]


def test_budget_limits():
    assert budget_from_logit(-1e4, 8, 64, 100) == 8
    assert budget_from_logit(1e4, 8, 64, 100) == 64
    assert budget_from_logit(1e4, 8, 64, 20) == 20
    # K_min + 0.5 * (K_max - K_min)
    assert budget_from_logit(0.0, 8, 64, 64) == 36
    assert budget_from_logit(0.0, 8, 64, 1000) == 36


def test_budget_when_fewer_tokens_than_k_min():
    assert budget_from_logit(0.0, 8, 256, 3) == 3


def test_allocator_uses_class_token(rng):
    params = AtsaParams(rng, 4, 2, 10)
    params.allocator.weight.data[:] = 0
    params.allocator.bias.data[:] = 0
    assert priority_allocator(seq(rng, 30, 4), params) == 6


def test_alpha_limits():
    assert atsa.alpha_from_logit(0.0) == 0.5
    assert atsa.alpha_from_logit(-50.0) == 0.1
    assert atsa.alpha_from_logit(50.0) == 0.9


def test_refiner_logit_zero(rng):
    params = AtsaParams(rng, 4, 2, 10)
    params.refiner.weight.data[:] = 0
    params.refiner.bias.data[:] = 0
    assert selective_refiner(seq(rng, 3, 4), params) == 0.5


def test_kept_count_examples():
    assert kept_count(2, 0.5) == 1
    assert kept_count(10, 0.9) == 9
    assert kept_count(2, 0.9) == 1  # round(1.8) = 2 would leave no pooled slot
    assert kept_count(10, 0.1) == 1
    assert kept_count(1, 0.5) == 1


@given(st.integers(2, 300), st.floats(0.1, 0.9))
def test_kept_count_bounds(K, alpha):
    n = kept_count(K, alpha)
    assert 1 <= n <= K - 1
    assert n == min(max(atsa.round_half_up(K * alpha), 1), K - 1)


def test_hand_worked_selection(rng):
    assert list(atsa.selection_order(np.array([0.4, 0.3, 0.2, 0.1]))) == [0, 1, 2, 3]
    params = AtsaParams(rng, 2, 1, 4)
    with precision(64):
        x = np.arange(8.0).reshape(4, 2)
        s = make_sequence(x, Tensor(np.zeros((1, 2))), "patho")
        # force scores [0.4, 0.3, 0.2, 0.1] through the order; K=2, alpha=0.5
        routing = RoutingContext(replay={"atsa": (2, 0.5, [0, 1, 2, 3])})
        out, trace = select_and_aggregate(s, params, routing, "atsa")
    scaled = x * (4 * trace.scores[:, None])
    assert trace.kept_indices == [0] and trace.pooled_count == 1
    assert out.n_tokens == 2
    assert np.allclose(out.body.data[0], scaled[0])
    assert np.allclose(out.body.data[1], scaled[1:].mean(axis=0))


def test_no_pruning_limit(rng):
    params = AtsaParams(rng, 3, 1, 10)
    x = rng.normal(size=(5, 3))
    with precision(64):
        s = make_sequence(x, Tensor(np.zeros((1, 3))), "patho")
        # uniform scores and full budget: kept tokens followed by singleton pools
        routing = RoutingContext(replay={"atsa": (5, 0.9, [0, 1, 2, 3, 4])})
        params.score2.weight.data[:] = 0
        out, trace = select_and_aggregate(s, params, routing, "atsa")
    assert np.allclose(out.body.data, x, atol=1e-12)


def test_missing_modality_single_token(rng):
    ph = placeholder(Tensor(rng.normal(size=(1, 4))), "geno")
    out, trace = select_and_aggregate(ph, AtsaParams(rng, 4, 2, 6))
    assert out.tokens.shape == (1, 4) and trace is None


def check_contracts(seq_, params):
    out, tr = select_and_aggregate(seq_, params)
    n = seq_.n_tokens
    scores = tr.scores
    assert out.tokens.shape[0] == tr.K + 1
    n_keep = kept_count(tr.K, tr.alpha)
    top, ranked = topk_full_sort(scores.tolist(), n_keep)
    assert tr.kept_indices == top
    assert tr.order == ranked
    # kept tokens plus pooled tokens cover every input exactly once
    assert sorted(tr.order) == list(range(n))
    assert tr.pooled_count == tr.K - n_keep
    assert set(tr.kept_indices) <= set(ranked[:tr.K])
    lo = min(params.k_min, min(params.k_max, n))
    assert lo <= tr.K <= min(params.k_max, n)
    assert 0.1 <= tr.alpha <= 0.9
    return out, tr


def test_contracts_on_1000_inputs():
    r = np.random.default_rng(2024)
    for i in range(1000):
        d = int(r.choice([2, 4, 8]))
        n = int(r.integers(1, 60))
        k_min = int(r.integers(1, 10))
        k_max = int(r.integers(k_min, 80))
        params = AtsaParams(r, d, k_min, k_max)
        params.allocator.bias.data[:] = r.normal(scale=3)
        params.refiner.bias.data[:] = r.normal(scale=3)
        x = r.normal(size=(n, d))
        if i % 5 == 0 and n > 2:
            x[r.integers(0, n)] = x[0]  # exact ties in score
        check_contracts(make_sequence(x, Tensor(r.normal(size=(1, d))), "patho"), params)


def test_ties_resolve_to_lower_index(rng):
    params = AtsaParams(rng, 4, 1, 6)
    params.score2.weight.data[:] = 0  # all logits equal
    _, tr = select_and_aggregate(seq(rng, 6, 4), params)
    assert tr.order == list(range(6))
    assert tr.kept_indices == list(range(len(tr.kept_indices)))


def test_pooled_group_follows_score_order(rng):
    params = AtsaParams(rng, 2, 1, 2)
    x = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]])
    s = make_sequence(x, Tensor(np.zeros((1, 2))), "patho")
    routing = RoutingContext(replay={"atsa": (2, 0.5, [3, 1, 0, 2])})
    out, tr = select_and_aggregate(s, params, routing, "atsa")
    scaled = x * (4 * tr.scores[:, None])
    assert np.allclose(out.body.data[0], scaled[3], atol=1e-6)
    assert np.allclose(out.body.data[1], adaptive_pool(Tensor(scaled[[1, 0, 2]]), 1).data[0], atol=1e-6)


def test_gradient_through_selection():
    r = np.random.default_rng(8)
    with precision(64):
        params = AtsaParams(r, 4, 2, 5)
        params.to_dtype(np.float64)
        x = Tensor(r.normal(size=(7, 4)), requires_grad=True)
        cls = Tensor(r.normal(size=(1, 4)), requires_grad=True)
        routing = RoutingContext()
        select_and_aggregate(make_sequence(x, cls, "patho"), params, routing, "atsa")
        replay = RoutingContext(replay=dict(routing.record))
        K = routing.record["atsa"][0]
        w = Tensor(r.normal(size=(K + 1, 4)))

        def f():
            out, _ = select_and_aggregate(make_sequence(x, cls, "patho"), params, replay, "atsa")
            return (out.tokens * w).sum()

        blocks = {"x": x, "cls": cls, **{n: p for n, p in params.trainable().items()
                                         if n.split(".")[0] in ("reduce", "score1", "score2")}}
        reports = grad_check(f, blocks, tol=1e-3)
    assert all(rep.passed for rep in reports), reports


def test_router_heads_get_no_gradient(rng):
    params = AtsaParams(rng, 4, 2, 5)
    x = Tensor(rng.normal(size=(7, 4)), requires_grad=True)
    out, _ = select_and_aggregate(make_sequence(x, Tensor(rng.normal(size=(1, 4))), "patho"), params)
    for p in params.parameters():
        p.zero_grad()
    backward(out.tokens.sum())
    assert not params.allocator.weight.grad.any()
    assert not params.refiner.weight.grad.any()
    assert params.score2.weight.grad.any()


def test_non_finite_router_logits_fall_back():
    assert budget_from_logit(float("nan"), 8, 64, 100) == 8
    assert atsa.alpha_from_logit(float("nan")) == 0.5
