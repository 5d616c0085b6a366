"""Network assembly: segregation unit, token selection, cross attention,
integration unit and the hierarchical fusion head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .atsa import AtsaParams, AtsaTrace, select_and_aggregate
from .backbone import EPEG, CrossModalAttention, TokenSeq, TransformerBlock, make_sequence, placeholder
from .config import RunConfig
from .fusion import (FusedRepresentation, GlobalFusion, HazardHead, LowRankFusionParams, RiskOutput, augmented_tokens,
                     blend, global_fuse, hazard_head, local_summary, low_rank_fuse, outer_product_fuse)
from .layers import Module
from .numerics import ConfigurationError, ContractError, Tensor, concat
from .pree import GateDecision, PreeStack, RoutingContext, pree_forward

ABLATIONS = ("atsa", "pree", "lmf")


class Unit(Module):
    """Transformer block then PREE per modality (EPEG before PREE on pathology)."""

    def __init__(self, rng: np.random.Generator, d: int, pree_layers: int, frozen_seed: int):
        self.transformer_p = TransformerBlock(rng, d)
        self.epeg = EPEG(rng, d)
        self.pree_p = PreeStack(rng, d, "patho", pree_layers, frozen_seed)
        self.transformer_g = TransformerBlock(rng, d)
        self.pree_g = PreeStack(rng, d, "geno", pree_layers, frozen_seed)

    def __call__(self, p: TokenSeq, g: TokenSeq, ctx: "ForwardContext", name: str):
        p = self.epeg(self.transformer_p(p))
        p, dp = pree_forward(self.pree_p, p, ctx.routing, f"{name}.patho")
        g = self.transformer_g(g)
        g, dg = pree_forward(self.pree_g, g, ctx.routing, f"{name}.geno")
        for i, dec in enumerate(dp):
            ctx.gates[f"{name}.patho.{i}"] = dec
        for i, dec in enumerate(dg):
            ctx.gates[f"{name}.geno.{i}"] = dec
        return p, g


@dataclass
class ForwardContext:
    routing: RoutingContext = field(default_factory=RoutingContext)
    ablate: frozenset = frozenset()
    gates: dict[str, GateDecision] = field(default_factory=dict)
    atsa: dict[str, AtsaTrace] = field(default_factory=dict)
    tokens_after_atsa: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.ablate) - set(ABLATIONS)
        if unknown:
            raise ConfigurationError(f"unknown ablations {sorted(unknown)}")
        self.routing.all_experts = "pree" in self.ablate


@dataclass
class ForwardResult:
    risk: RiskOutput
    cls_p: Tensor
    cls_g: Tensor
    fused: FusedRepresentation


class AdaMHF(Module):
    def __init__(self, cfg: RunConfig):
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        n_h = d
        self.cls_p = Tensor(rng.normal(0.0, 0.02, size=(1, d)), requires_grad=True, dtype=np.float32)
        self.cls_g = Tensor(rng.normal(0.0, 0.02, size=(1, d)), requires_grad=True, dtype=np.float32)
        self.segregation = Unit(rng, d, cfg.pree_layers, cfg.frozen_seed)
        self.atsa_p = AtsaParams(rng, d, cfg.k_min_p, cfg.k_max_p)
        self.atsa_g = AtsaParams(rng, d, cfg.k_min_g, cfg.k_max_g)
        self.cross = CrossModalAttention(rng, d)
        self.integration = Unit(rng, d, cfg.pree_layers, cfg.frozen_seed)
        self.lmf = LowRankFusionParams(rng, d + 1, d + 1, n_h, cfg.rank_r)
        self.global_mlp = GlobalFusion(rng, d, n_h)
        self.head = HazardHead(rng, n_h, d, cfg.t_bins)
        self.d = d
        self.beta = cfg.beta
        self.t_bins = cfg.t_bins
        self.missing_placeholder = cfg.missing_placeholder

    def sequence(self, features, modality: str) -> TokenSeq:
        cls = self.cls_p if modality == "patho" else self.cls_g
        if features is None:
            if self.missing_placeholder == "zeros":
                zero = Tensor(np.zeros((1, self.d)), dtype=cls.dtype)
                return TokenSeq(concat([zero, cls], axis=0), modality, present=True)
            return placeholder(cls, modality)
        features = np.asarray(features)
        if features.ndim != 2 or features.shape[1] != self.d:
            raise ConfigurationError(
                f"input -> segregation unit: {modality} features have shape {features.shape}, "
                f"model dimension is {self.d}")
        return make_sequence(Tensor(features, dtype=cls.dtype), cls, modality)


def forward(model: AdaMHF, x_p, x_g, ctx: ForwardContext | None = None) -> ForwardResult:
    """One sample through the network. ``None`` marks a missing modality."""
    if x_p is None and x_g is None:
        raise ContractError("at least one modality must be present")
    ctx = ctx or ForwardContext()
    p = model.sequence(x_p, "patho")
    g = model.sequence(x_g, "geno")

    p, g = model.segregation(p, g, ctx, "seg")

    if "atsa" not in ctx.ablate:
        p, trace_p = select_and_aggregate(p, model.atsa_p, ctx.routing, "atsa.patho")
        g, trace_g = select_and_aggregate(g, model.atsa_g, ctx.routing, "atsa.geno")
        if trace_p is not None:
            ctx.atsa["patho"] = trace_p
        if trace_g is not None:
            ctx.atsa["geno"] = trace_g
    ctx.tokens_after_atsa = {"patho": p.n_tokens, "geno": g.n_tokens}

    g, p = model.cross(g, p)
    p, g = model.integration(p, g, ctx, "int")

    if "lmf" in ctx.ablate and p.present and g.present:
        local = outer_product_fuse(augmented_tokens(p), augmented_tokens(g), model.lmf)
    else:
        local = low_rank_fuse(local_summary(p), local_summary(g), model.lmf)
    glob = global_fuse(p.cls, g.cls, model.global_mlp)
    blended = blend(local, glob, model.beta)
    risk = hazard_head(blended, model.head)
    return ForwardResult(risk, p.cls, g.cls, FusedRepresentation(local, glob, blended, model.beta))


def assemble_model(cfg: RunConfig) -> AdaMHF:
    return AdaMHF(cfg)
