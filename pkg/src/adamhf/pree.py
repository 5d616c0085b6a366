"""Progressive residual experts expansion.

Each layer routes the whole bag to one expert (top-1 gating on the mean token)
and adds a frozen MLP applied to the same input:

    out = p_chosen * expert_chosen(x) + frozen_mlp(x)

Expert counts double per layer (1, 2, 4). Pathology experts are token-axis
CNNs, genomic experts are SELU networks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import TokenSeq
from .layers import Linear, Module, param, zeros
from .numerics import (ConfigurationError, ContractError, Tensor, conv1d_tokens, matmul, relu, selu,
                       softmax)


@dataclass
class GateDecision:
    layer_index: int
    chosen_expert_index: int
    gate_probs: np.ndarray


@dataclass
class RoutingContext:
    """Records discrete routing choices, or replays previously recorded ones.

    Replaying keeps the graph fixed while parameters are nudged, which is what
    finite-difference checks need.
    """

    replay: dict | None = None
    record: dict = field(default_factory=dict)
    all_experts: bool = False

    def choose(self, site: str, compute):
        if self.replay is not None and site in self.replay:
            value = self.replay[site]
        else:
            value = compute()
        self.record[site] = value
        return value


def argmax_lowest(values: np.ndarray) -> int:
    # np.argmax already returns the first maximal index
    return int(np.argmax(values))


class ConvExpert(Module):
    kind = "patho"

    def __init__(self, rng: np.random.Generator, d: int, kernel_size: int = 3):
        s = 1.0 / np.sqrt(kernel_size * d)
        self.w1 = param(rng, (kernel_size, d, d), s)
        self.b1 = zeros((d,))
        self.w2 = param(rng, (kernel_size, d, d), s)
        self.b2 = zeros((d,))

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d_tokens(relu(conv1d_tokens(x, self.w1, self.b1)), self.w2, self.b2)


class SNNExpert(Module):
    kind = "geno"

    def __init__(self, rng: np.random.Generator, d: int):
        self.fc1 = Linear(rng, d, d)
        self.fc2 = Linear(rng, d, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(selu(self.fc1(x)))


def expert_forward(expert, seq: TokenSeq, modality: str | None = None) -> TokenSeq:
    modality = modality or seq.modality
    if expert.kind != modality or seq.modality != modality:
        raise ContractError(f"{type(expert).__name__} cannot process {seq.modality} tokens")
    return seq.with_tokens(expert(seq.tokens))


class FrozenMLP(Module):
    """Fixed residual map; orthogonal weights keep it invertible."""

    def __init__(self, seed: int, d: int):
        rng = np.random.default_rng(seed)
        self.w1 = Tensor(_orthogonal(rng, d), requires_grad=False, dtype=np.float32)
        self.b1 = Tensor(np.zeros(d), requires_grad=False, dtype=np.float32)
        self.w2 = Tensor(_orthogonal(rng, d), requires_grad=False, dtype=np.float32)
        self.b2 = Tensor(np.zeros(d), requires_grad=False, dtype=np.float32)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(selu(matmul(x, self.w1) + self.b1), self.w2) + self.b2


def _orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


class Gate(Module):
    def __init__(self, rng: np.random.Generator, d: int, n_experts: int):
        self.fc1 = Linear(rng, d, d)
        self.fc2 = Linear(rng, d, n_experts)

    def logits(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x.mean(axis=0, keepdims=True))))


class PreeLayer(Module):
    def __init__(self, rng: np.random.Generator, d: int, n_experts: int, modality: str, frozen_seed: int):
        if n_experts < 1:
            raise ConfigurationError("a PREE layer needs at least one expert")
        make = ConvExpert if modality == "patho" else SNNExpert
        self.experts = [make(rng, d) for _ in range(n_experts)]
        self.gate = Gate(rng, d, n_experts)
        self.residual_mlp = FrozenMLP(frozen_seed, d)

    @property
    def n_experts(self) -> int:
        return len(self.experts)


def gate_select(layer: PreeLayer, seq: TokenSeq, layer_index: int = 0,
                routing: RoutingContext | None = None, site: str = "") -> tuple[GateDecision, Tensor]:
    """Softmax gate over the mean token; returns the decision and the prob tensor."""
    probs = softmax(layer.gate.logits(seq.tokens), axis=-1)
    p = probs.data.reshape(-1)
    if routing is None:
        chosen = argmax_lowest(p)
    else:
        chosen = routing.choose(site, lambda: argmax_lowest(p))
    return GateDecision(layer_index, chosen, p.copy()), probs


class PreeStack(Module):
    def __init__(self, rng: np.random.Generator, d: int, modality: str, n_layers: int = 3,
                 frozen_seed: int = 1234):
        if n_layers not in (1, 2, 3):
            raise ConfigurationError(f"PREE supports 1 to 3 layers, got {n_layers}")
        self.modality = modality
        # frozen MLPs are drawn per layer index, identically for both modalities
        self.layers = [PreeLayer(rng, d, 2 ** i, modality, frozen_seed + i) for i in range(n_layers)]


def pree_forward(stack: PreeStack, seq: TokenSeq, routing: RoutingContext | None = None,
                 prefix: str = "pree") -> tuple[TokenSeq, list[GateDecision]]:
    if not seq.present:
        return seq, []
    decisions = []
    x = seq.tokens
    for i, layer in enumerate(stack.layers):
        decision, probs = gate_select(layer, seq.with_tokens(x), i, routing, f"{prefix}.{i}")
        decisions.append(decision)
        if routing is not None and routing.all_experts:
            # dense MoE: every expert runs, outputs mixed by gate probabilities
            mixed = None
            for e, expert in enumerate(layer.experts):
                term = expert(x) * probs[:, e:e + 1]
                mixed = term if mixed is None else mixed + term
            x = mixed + layer.residual_mlp(x)
        else:
            c = decision.chosen_expert_index
            x = layer.experts[c](x) * probs[:, c:c + 1] + layer.residual_mlp(x)
    return seq.with_tokens(x), decisions
