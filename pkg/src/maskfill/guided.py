"""Observation-aligned conditional mask generation.

Conditioning works in three steps. A stochastic anchor keeps each
observed pixel with probability rho (dropping a fraction injects the
diversity that keeps repeated generations from collapsing onto one
mask). At every reverse step the predicted observation probabilities are
scored against the anchor with a cross-entropy averaged over the whole
spatial domain, which keeps the gradient magnitude stable across very
different sparsity levels. The gradient of that loss with respect to the
current latent (through the network and the simplex projection) is then
subtracted from the deterministic base update, scaled by the guidance
weight.

With guidance scale 0 the trajectory is bitwise identical to the
unconditional sampler on the same seed: anchors and latent noise come
from separate derived streams.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from . import nnet, rng
from .grids import Mask
from .mask_prior import decode, simplex_project
from .nnet import NetParams, NumericsError
from .schedule import NoiseSchedule, ode_step, time_grid

__all__ = [
    "GuidanceConfig",
    "GuidedSampleInfo",
    "make_anchor",
    "guidance_loss",
    "guided_sample",
    "guided_sample_batch",
]


@dataclass(frozen=True)
class GuidanceConfig:
    rho: float = 0.8
    scale: float = 120.0
    n_steps: int = 15
    prob_clamp: float = 1e-6
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho={self.rho} outside (0, 1]")
        if self.scale < 0.0:
            raise ValueError("guidance scale must be >= 0")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not 0.0 < self.prob_clamp < 0.5:
            raise ValueError("prob_clamp must lie in (0, 0.5)")


@dataclass(frozen=True)
class GuidedSampleInfo:
    """Diagnostics from one guided run (guidance loss at the final state)."""

    final_guidance_loss: float


def make_anchor(mask: Mask, rho: float, seed: int) -> Mask:
    """Bernoulli-thinned subset of the observed pixels: y_i = 1[r_i < rho] M_i."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho={rho} outside [0, 1]")
    r = rng.stream(seed, "anchor").uniform(size=mask.shape)
    return Mask(((r < rho).astype(np.uint8)) & mask.bits)


def guidance_loss(e_hat: torch.Tensor, anchor: Mask | torch.Tensor, prob_clamp: float = 1e-6) -> torch.Tensor:
    """Cross-entropy between predicted observation probabilities and the
    anchor, normalised by the total pixel count d (not the anchor size).

    Predictions are clamped to [prob_clamp, 1 - prob_clamp] before the
    logs; the loss is unbounded at exact 0/1 otherwise.
    """
    y = torch.from_numpy(anchor.bits.astype(np.float64)) if isinstance(anchor, Mask) else anchor
    if e_hat.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(e_hat.shape)} vs {tuple(y.shape)}")
    e = e_hat.clamp(prob_clamp, 1.0 - prob_clamp)
    return -(y * torch.log(e) + (1.0 - y) * torch.log1p(-e)).mean()


def guided_sample_batch(
    params: NetParams,
    codec,
    masks: Sequence[Mask],
    cfg: GuidanceConfig,
    seeds: Sequence[int],
    *,
    schedule: NoiseSchedule = NoiseSchedule(),
    return_info: bool = False,
) -> list[Mask] | tuple[list[Mask], list[GuidedSampleInfo]]:
    """Run independent guided generations in one batched integration.

    Each element has its own observation mask, anchor and latent noise
    (streams derived from its seed), so the batch is exactly a set of
    independent draws computed together.
    """
    if len(masks) != len(seeds):
        raise ValueError("one seed per mask required")
    h, w = masks[0].shape
    for m in masks:
        if m.shape != (h, w):
            raise ValueError("all masks in a batch must share one shape")
    b = len(masks)
    anchors = torch.from_numpy(
        np.stack(
            [
                make_anchor(m, cfg.rho, rng.derive_seed(s, "guided.anchor")).bits.astype(np.float64)
                for m, s in zip(masks, seeds)
            ]
        )
    )
    init = np.stack(
        [rng.stream(s, "prior.sample.init").standard_normal((2, h, w)) for s in seeds]
    )
    x = torch.from_numpy(init)
    ts = time_grid(schedule, cfg.n_steps)
    d = float(h * w)
    tt = torch.empty(b, dtype=torch.float64)

    def batch_loss(e_obs: torch.Tensor) -> torch.Tensor:
        e = e_obs.clamp(cfg.prob_clamp, 1.0 - cfg.prob_clamp)
        per = -(anchors * torch.log(e) + (1.0 - anchors) * torch.log1p(-e)).sum(dim=(1, 2)) / d
        return per

    def batch_loss_from_logits(logits: torch.Tensor) -> torch.Tensor:
        # same cross-entropy, differentiated through the head's logits:
        # for two channels log(1 - e0) == log(e1), so the gradient stays
        # bounded ((e - y)/d) even where the probabilities saturate
        logp = torch.log_softmax(logits, dim=1)
        per = -(anchors * logp[:, 0] + (1.0 - anchors) * logp[:, 1]).sum(dim=(1, 2)) / d
        return per

    for i in range(cfg.n_steps):
        tt.fill_(ts[i])
        if cfg.scale != 0.0:
            leaf = x.detach().requires_grad_(True)
            logits = nnet.forward_batch(params, simplex_project(leaf, dim=1), tt, apply_head=False)
            total = batch_loss_from_logits(logits).sum()  # elements are independent
            (grad,) = torch.autograd.grad(total, leaf)
            if not torch.isfinite(grad).all():
                raise NumericsError(f"non-finite guidance gradient at step {i}")
            e_hat = simplex_project(logits.detach(), dim=1)
            x = x.detach()
        else:
            with torch.no_grad():
                e_hat = nnet.forward_batch(params, simplex_project(x, dim=1), tt)
        base = ode_step(schedule, x, codec.kappa * e_hat, ts[i], ts[i + 1])
        x = base - cfg.scale * grad if cfg.scale != 0.0 else base
        if not torch.isfinite(x).all():
            raise NumericsError(f"non-finite latent at guided step {i}")

    out = [decode(x[j]) for j in range(b)]
    if not return_info:
        return out
    with torch.no_grad():
        tt.fill_(ts[-1])
        e_final = nnet.forward_batch(params, simplex_project(x, dim=1), tt)
        final_losses = batch_loss(e_final[:, 0])
    infos = [GuidedSampleInfo(final_guidance_loss=float(v)) for v in final_losses]
    return out, infos


def guided_sample(
    params: NetParams,
    codec,
    mask: Mask,
    cfg: GuidanceConfig,
    *,
    schedule: NoiseSchedule = NoiseSchedule(),
    return_info: bool = False,
) -> Mask | tuple[Mask, GuidedSampleInfo]:
    """Generate one mask aligned with the given observation (anchor, guide,
    decode); the seed comes from the config."""
    result = guided_sample_batch(
        params, codec, [mask], cfg, [cfg.seed], schedule=schedule, return_info=return_info
    )
    if return_info:
        masks, infos = result
        return masks[0], infos[0]
    return result[0]
