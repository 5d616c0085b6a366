"""Hierarchical fusion head: low-rank bilinear local fusion, class-token global
fusion, beta blending and the discrete hazard head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import TokenSeq
from .layers import Linear, Module, param, zeros
from .numerics import (ConfigurationError, Tensor, clip, concat, cumsum, exp, log, matmul, mul,
                       record_flops, relu, sigmoid)


class LowRankFusionParams(Module):
    """Rank-r factors stored as (len, r, n_h).

    The implied weight is W[:, :, h] = sum_i outer(w_p[:, i, h], w_g[:, i, h]).
    """

    def __init__(self, rng: np.random.Generator, len_p: int, len_g: int, n_h: int, rank: int = 4):
        if rank < 1:
            raise ConfigurationError("low-rank fusion needs rank >= 1")
        self.rank = rank
        self.n_h = n_h
        self.w_p = param(rng, (len_p, rank, n_h), 1.0 / np.sqrt(len_p))
        self.w_g = param(rng, (len_g, rank, n_h), 1.0 / np.sqrt(len_g))
        self.bias = zeros((n_h,))

    def full_weight(self) -> np.ndarray:
        """Explicit (len_p, len_g, n_h) tensor assembled from the factors."""
        return np.einsum("aih,bih->abh", self.w_p.data, self.w_g.data)


def low_rank_fuse(x_p: Tensor, x_g: Tensor, params: LowRankFusionParams) -> Tensor:
    """Bilinear fusion at cost O(r * (len_p + len_g) * n_h); x_p, x_g are (1, len)."""
    len_p, r, n_h = params.w_p.shape
    len_g = params.w_g.shape[0]
    proj_p = matmul(x_p.reshape(1, -1), params.w_p.reshape(len_p, r * n_h))
    proj_g = matmul(x_g.reshape(1, -1), params.w_g.reshape(len_g, r * n_h))
    prod = mul(proj_p, proj_g)
    record_flops("hadamard", r * n_h)
    out = prod.reshape(r, n_h).sum(axis=0, keepdims=True)
    record_flops("rank_sum", r * n_h)
    return out + params.bias


def outer_product_fuse(tokens_p: Tensor, tokens_g: Tensor, params: LowRankFusionParams) -> Tensor:
    """Explicit bilinear fusion over every (pathology, genomic) token pair.

    Averages (x_p^i kron x_g^j) . W over all pairs; by bilinearity this equals
    ``low_rank_fuse`` on the mean tokens, but costs O(n_p * n_g * len_p * len_g).
    """
    W = Tensor(params.full_weight().reshape(-1, params.n_h), dtype=params.w_p.dtype)
    a, lp = tokens_p.shape
    b, lg = tokens_g.shape
    pairs = mul(tokens_p.reshape(a, 1, lp, 1), tokens_g.reshape(1, b, 1, lg)).reshape(a * b, lp * lg)
    record_flops("outer_product", a * b * lp * lg)
    out = matmul(pairs, W).mean(axis=0, keepdims=True)
    return out + params.bias


def local_summary(seq: TokenSeq) -> Tensor:
    """Mean non-class token with a trailing 1; absent modality gives (0, ..., 0, 1)."""
    d = seq.dim
    if not seq.present:
        e = np.zeros((1, d + 1))
        e[0, -1] = 1.0
        return Tensor(e, dtype=seq.tokens.dtype)
    one = Tensor(np.ones((1, 1)), dtype=seq.tokens.dtype)
    return concat([seq.body.mean(axis=0, keepdims=True), one], axis=1)


def augmented_tokens(seq: TokenSeq) -> Tensor:
    if not seq.present:
        return local_summary(seq)
    one = Tensor(np.ones((seq.n_tokens, 1)), dtype=seq.tokens.dtype)
    return concat([seq.body, one], axis=1)


class GlobalFusion(Module):
    def __init__(self, rng: np.random.Generator, d: int, n_h: int):
        self.fc1 = Linear(rng, 2 * d, d)
        self.fc2 = Linear(rng, d, n_h)


def global_fuse(x_p_cls: Tensor, x_g_cls: Tensor, mlp: GlobalFusion) -> Tensor:
    joined = concat([x_g_cls.reshape(1, -1), x_p_cls.reshape(1, -1)], axis=1)
    return mlp.fc2(relu(mlp.fc1(joined)))


def blend(local: Tensor, global_: Tensor, beta: float) -> Tensor:
    if not 0.0 <= beta <= 1.0:
        raise ConfigurationError(f"beta must lie in [0, 1], got {beta}")
    return global_ * (1.0 - beta) + local * beta


@dataclass
class FusedRepresentation:
    local: Tensor
    global_: Tensor
    blended: Tensor
    beta: float


@dataclass
class RiskOutput:
    hazards: Tensor  # (T,)
    survival: Tensor  # (T,)

    @property
    def risk(self) -> float:
        return float(np.sum(1.0 - self.survival.data))

    @property
    def predicted_time(self) -> float:
        return float(np.sum(self.survival.data))


class HazardHead(Module):
    def __init__(self, rng: np.random.Generator, n_h: int, hidden: int, t_bins: int):
        if t_bins < 2:
            raise ConfigurationError("need at least two time bins")
        self.fc1 = Linear(rng, n_h, hidden)
        # zero output layer: an untrained model predicts the same hazards for everyone
        self.fc2 = Linear(rng, hidden, t_bins, scale=0.0)
        self.t_bins = t_bins


HAZARD_EPS = 1e-7


def survival_from_hazards(hazards: Tensor) -> Tensor:
    """f_s(k) = prod_{i<=k} (1 - h_i), via a cumulative sum of logs."""
    h = clip(hazards, HAZARD_EPS, 1.0 - HAZARD_EPS)
    return exp(cumsum(log(1.0 - h), axis=0))


def hazards_to_output(hazards: Tensor) -> RiskOutput:
    # saturated sigmoids round to exactly 0 or 1; keep hazards strictly inside (0, 1)
    hazards = clip(hazards.reshape(-1), HAZARD_EPS, 1.0 - HAZARD_EPS)
    return RiskOutput(hazards=hazards, survival=survival_from_hazards(hazards))


def hazard_head(blended: Tensor, head: HazardHead) -> RiskOutput:
    logits = head.fc2(relu(head.fc1(blended.reshape(1, -1))))
    return hazards_to_output(sigmoid(logits))
