"""Sequence machinery shared by both modality streams.

A token sequence always carries its class token in the last row. Missing
modalities are represented by a placeholder holding only that class token.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .layers import Linear, Module, param, zeros
from .numerics import (ContractError, DimensionError, Tensor, concat, depthwise_conv1d, layer_norm,
                       matmul, relu, softmax)

MODALITIES = ("patho", "geno")


@dataclass
class TokenSeq:
    tokens: Tensor  # (N + 1, d); row N is the class token
    modality: str
    present: bool = True

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ContractError(f"unknown modality {self.modality!r}")
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise DimensionError(f"token sequence needs shape (N+1, d), got {self.tokens.shape}")
        if self.n_tokens == 0 and self.present:
            raise ContractError("an empty sequence must be marked absent")

    @property
    def n_tokens(self) -> int:
        """Number of non-class tokens."""
        return self.tokens.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    @property
    def body(self) -> Tensor:
        return self.tokens[:-1]

    @property
    def cls(self) -> Tensor:
        return self.tokens[-1:]

    def with_tokens(self, tokens: Tensor) -> "TokenSeq":
        return replace(self, tokens=tokens)


def make_sequence(features, cls_token: Tensor, modality: str) -> TokenSeq:
    body = features if isinstance(features, Tensor) else Tensor(features)
    return TokenSeq(concat([body, cls_token], axis=0), modality, present=True)


def placeholder(cls_token: Tensor, modality: str) -> TokenSeq:
    return TokenSeq(cls_token.reshape(1, -1) if cls_token.ndim == 1 else cls_token, modality, present=False)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Tensor(np.ones(d), requires_grad=True, dtype=np.float32)
        self.bias = zeros((d,))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class TransformerBlock(Module):
    """Pre-norm single-head self-attention followed by a ReLU feed-forward."""

    def __init__(self, rng: np.random.Generator, d: int, ffn_mult: int = 2):
        self.norm1 = LayerNorm(d)
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        self.out = Linear(rng, d, d)
        self.norm2 = LayerNorm(d)
        self.ff1 = Linear(rng, d, ffn_mult * d)
        self.ff2 = Linear(rng, ffn_mult * d, d)
        self.scale = 1.0 / np.sqrt(d)

    def attention_weights(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        return softmax(matmul(self.q(h), self.k(h).T) * self.scale, axis=-1)

    def __call__(self, seq: TokenSeq) -> TokenSeq:
        if not seq.present:
            return seq
        x = seq.tokens
        h = self.norm1(x)
        attn = softmax(matmul(self.q(h), self.k(h).T) * self.scale, axis=-1)
        x = x + self.out(matmul(attn, self.v(h)))
        x = x + self.ff2(relu(self.ff1(self.norm2(x))))
        return seq.with_tokens(x)


class EPEG(Module):
    """Residual depthwise convolution over the non-class pathology tokens."""

    def __init__(self, rng: np.random.Generator, d: int, kernel_size: int = 7):
        self.kernel = param(rng, (kernel_size, d), 1.0 / kernel_size)

    def __call__(self, seq: TokenSeq) -> TokenSeq:
        if seq.modality != "patho":
            raise ContractError("positional encoding applies to pathology tokens only")
        if not seq.present:
            return seq
        body = seq.body
        body = body + depthwise_conv1d(body, self.kernel)
        return seq.with_tokens(concat([body, seq.cls], axis=0))


class CrossModalAttention(Module):
    """Co-attention between the two bags.

    With V = x_p W_p1 and U = x_g W_g1 (rows are tokens), the score matrix is
    X = V U^T of shape (n_p, n_g). P normalizes each column over pathology
    tokens and G normalizes each row over genomic tokens:

        x_p* = P^T x_p W_p2   (one token per genomic token)
        x_g* = G x_g W_g2     (one token per pathology token)

    Class tokens stay out of X and are carried through unchanged.
    """

    def __init__(self, rng: np.random.Generator, d: int):
        s = 1.0 / np.sqrt(d)
        self.w_p1 = param(rng, (d, d), s)
        self.w_g1 = param(rng, (d, d), s)
        self.w_p2 = param(rng, (d, d), s)
        self.w_g2 = param(rng, (d, d), s)

    def scores(self, x_p: Tensor, x_g: Tensor) -> Tensor:
        return matmul(matmul(x_p, self.w_p1), matmul(x_g, self.w_g1).T)

    def __call__(self, g: TokenSeq, p: TokenSeq, score_shift: float = 0.0):
        if not g.present and not p.present:
            raise ContractError("cross attention needs at least one present modality")
        if g.dim != p.dim:
            raise DimensionError(f"cross attention dims differ: geno {g.dim}, patho {p.dim}")
        if not g.present:
            return g, p.with_tokens(concat([matmul(p.body, self.w_p2), p.cls], axis=0))
        if not p.present:
            return g.with_tokens(concat([matmul(g.body, self.w_g2), g.cls], axis=0)), p
        xp, xg = p.body, g.body
        X = self.scores(xp, xg)
        if score_shift:
            X = X + score_shift
        P = softmax(X, axis=0)
        G = softmax(X, axis=1)
        p_star = matmul(matmul(P.T, xp), self.w_p2)
        g_star = matmul(matmul(G, xg), self.w_g2)
        return (g.with_tokens(concat([g_star, g.cls], axis=0)),
                p.with_tokens(concat([p_star, p.cls], axis=0)))
