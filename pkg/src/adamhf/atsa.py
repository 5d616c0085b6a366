"""Adaptive token selection and aggregation.

Tokens are scored against the class token, a router picks the budget ``K``
and the retention ratio ``alpha``, the best ``round(K*alpha)`` tokens are kept
as-is and everything else is mean-pooled into the remaining ``K - kept``
slots. Every token is multiplied by ``N * s_i`` so the scorer sees gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import TokenSeq
from .layers import Linear, Module
from .numerics import Tensor, _sigmoid_np, adaptive_pool, concat, relu, softmax
from .pree import RoutingContext

ALPHA_MIN, ALPHA_MAX = 0.1, 0.9


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class AtsaTrace:
    scores: np.ndarray
    K: int
    alpha: float
    kept_indices: list[int]
    pooled_count: int
    order: list[int] = field(default_factory=list)


class AtsaParams(Module):
    def __init__(self, rng: np.random.Generator, d: int, k_min: int, k_max: int):
        if not 1 <= k_min <= k_max:
            raise ValueError(f"need 1 <= k_min <= k_max, got {k_min}, {k_max}")
        half = max(1, d // 2)
        self.reduce = Linear(rng, d, half)
        self.score1 = Linear(rng, 2 * half, half)
        self.score2 = Linear(rng, half, 1)
        self.allocator = Linear(rng, d, 1)
        self.refiner = Linear(rng, d, 1)
        self.k_min = k_min
        self.k_max = k_max


def score_logits(seq: TokenSeq, params: AtsaParams) -> Tensor:
    """Pre-softmax importance of each non-class token, shape (N, 1)."""
    body = relu(params.reduce(seq.body))
    cls = relu(params.reduce(seq.cls))
    n = seq.n_tokens
    cls_rows = cls[np.zeros(n, dtype=np.intp)]
    joined = concat([body, cls_rows], axis=1)
    return params.score2(relu(params.score1(joined)))


def score_tokens(seq: TokenSeq, params: AtsaParams) -> Tensor:
    """Importance scores normalized over tokens, shape (N, 1), summing to 1."""
    return softmax(score_logits(seq, params), axis=0)


def budget_from_logit(logit: float, k_min: int, k_max: int, n: int) -> int:
    hi = min(k_max, n)
    lo = min(k_min, hi)
    if not math.isfinite(logit):
        return lo  # diverged weights; the non-finite loss is caught by the trainer
    return round_half_up(lo + float(_sigmoid_np(np.array([logit]))[0]) * (hi - lo))


def priority_allocator(seq: TokenSeq, params: AtsaParams) -> int:
    logit = params.allocator(seq.cls).item()
    return budget_from_logit(logit, params.k_min, params.k_max, seq.n_tokens)


def alpha_from_logit(logit: float) -> float:
    if not math.isfinite(logit):
        return 0.5
    a = float(_sigmoid_np(np.array([logit], dtype=np.float64))[0])
    return min(max(a, ALPHA_MIN), ALPHA_MAX)


def selective_refiner(seq: TokenSeq, params: AtsaParams) -> float:
    return alpha_from_logit(params.refiner(seq.cls).item())


def kept_count(K: int, alpha: float) -> int:
    """round(K*alpha), kept in [1, K-1] so one token survives and one slot pools."""
    if K < 2:
        return K
    return min(max(round_half_up(K * alpha), 1), K - 1)


def selection_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; equal scores resolve to the lower index."""
    return np.argsort(-scores, kind="stable")


def select_and_aggregate(seq: TokenSeq, params: AtsaParams, routing: RoutingContext | None = None,
                         site: str = "atsa") -> tuple[TokenSeq, AtsaTrace | None]:
    if not seq.present:
        return seq, None
    n = seq.n_tokens
    s = score_tokens(seq, params)
    s_np = s.data.reshape(-1)

    def decide():
        K = priority_allocator(seq, params)
        alpha = selective_refiner(seq, params)
        return K, alpha, selection_order(s_np).tolist()

    K, alpha, order = decide() if routing is None else routing.choose(site, decide)
    n_keep = kept_count(K, alpha)
    n_pool = K - n_keep
    scaled = seq.body * (s * float(n))
    kept_idx = order[:n_keep]
    parts = [scaled[np.asarray(kept_idx, dtype=np.intp)]]
    if n_pool > 0:
        rest = np.asarray(order[n_keep:], dtype=np.intp)
        parts.append(adaptive_pool(scaled[rest], n_pool))
    parts.append(seq.cls)
    trace = AtsaTrace(scores=s_np.copy(), K=K, alpha=alpha, kept_indices=list(kept_idx),
                      pooled_count=n_pool, order=list(order))
    return seq.with_tokens(concat(parts, axis=0)), trace
