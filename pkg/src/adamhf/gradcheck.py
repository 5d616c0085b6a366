"""Finite-difference check of the whole network at toy size."""
from __future__ import annotations

import numpy as np

from .config import RunConfig
from .dataio import SampleBag
from .model import AdaMHF, ForwardContext, assemble_model
from .numerics import GradCheckReport, backward, grad_check, verification_mode, ContractError
from .pree import RoutingContext
from .runner import sample_loss


def toy_model(seed: int = 0, d: int = 8, t_bins: int = 4) -> AdaMHF:
    """64-bit model with every trainable weight nudged away from zero.

    The hazard head starts at zero, which would zero every upstream gradient
    and make the check vacuous.
    """
    model = assemble_model(RunConfig(d_model=d, t_bins=t_bins, seed=seed))
    model.to_dtype(np.float64)
    rng = np.random.default_rng([seed, 31])
    for _, p in model.trainable().items():
        p.data = p.data + rng.normal(0.0, 0.1, size=p.data.shape)
    return model


def toy_samples(seed: int = 0, d: int = 8, n_p: int = 6, n_g: int = 6,
                outcomes=((3, 0),)) -> list[SampleBag]:
    rng = np.random.default_rng([seed, 32])
    return [SampleBag(f"g{i}", rng.normal(size=(n_p, d)), rng.normal(size=(n_g, d)), t, c)
            for i, (t, c) in enumerate(outcomes)]


def model_grad_check(seed: int = 0, d: int = 8, n_p: int = 6, n_g: int = 6, t_bins: int = 4,
                     tol: float = 1e-3, lam: float = 0.1, h: float = 1e-5,
                     blocks=None, outcomes=((3, 0),)) -> dict[str, GradCheckReport]:
    """Check every trainable block; discrete routing is recorded once, then replayed."""
    if not verification_mode():
        raise ContractError("model_grad_check must run under precision(64)")
    model = toy_model(seed, d, t_bins)
    samples = toy_samples(seed, d, n_p, n_g, outcomes)
    routes = [RoutingContext() for _ in samples]
    for bag, routing in zip(samples, routes):
        sample_loss(model, bag, lam, ForwardContext(routing=routing))
    replays = [RoutingContext(replay=dict(r.record)) for r in routes]

    def loss():
        total = None
        for bag, routing in zip(samples, replays):
            value, _ = sample_loss(model, bag, lam, ForwardContext(routing=routing))
            total = value if total is None else total + value
        return total

    params = model.trainable()
    if blocks is not None:
        params = {k: v for k, v in params.items() if k in blocks}
    return {r.parameter_name: r for r in grad_check(loss, params, tol=tol, h=h)}


def frozen_gradients(seed: int = 0, d: int = 8) -> dict[str, np.ndarray | None]:
    """Gradients that reached the frozen residual MLPs after one backward pass."""
    model = toy_model(seed, d)
    bag = toy_samples(seed, d)[0]
    value, _ = sample_loss(model, bag, 0.1)
    backward(value)
    return {name: p.grad for name, p in model.named_parameters(include_frozen=True) if not p.requires_grad}
