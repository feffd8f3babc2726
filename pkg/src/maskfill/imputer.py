"""Context-query training of the reconstruction network and the
inference samplers.

Training repeatedly partitions each incomplete sample into a context
(fed to the network as masked values plus the context mask) and a query
(the withheld observed pixels the squared loss is restricted to). One
time-conditioned network serves both the clean t = 0 regression and the
time-indexed calls of the iterative samplers: with probability
``p_clean`` a step trains on the clean context, otherwise on a
noise-corrupted context at a uniformly drawn t.

Inference variants over a pluggable predictor:

* ``DirectProjection`` -- ensemble-average the clean-context prediction
  over K partitions and overwrite observed pixels.
* ``Proximal`` -- the same with an infinitesimally noised context.
* ``IterativeConditioning`` -- integrate the deterministic reverse
  process on an integer grid, blending the per-step prediction with a
  precomputed ensemble estimate (linear weight s/T) and pinning the
  noise direction of observed pixels to the observation.
* ``Repaint`` -- the iterative loop with periodic re-noising jumps.
* ``RecursiveJump`` -- staged restarts that re-noise the finished
  estimate back to progressively earlier levels.

Every sampler ends by overwriting observed pixels with the observation,
so outputs match the input exactly wherever data exists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
import torch

from . import nnet, rng
from .grids import DatasetManifest, Field, Mask, Partition, make_partition
from .guided import GuidanceConfig, guided_sample_batch
from .mask_prior import PriorModel, sample_unconditional_batch
from .nnet import ConvNetSpec, NetParams, NumericsError
from .partitioning import Guided, PartitionStrategy, UnconditionalPrior, partition
from .schedule import NoiseSchedule, ode_step, renoise, time_grid

__all__ = [
    "IMPUTER_SPEC",
    "ImputerTrainConfig",
    "ImputerConfigError",
    "DirectProjection",
    "Proximal",
    "IterativeConditioning",
    "Repaint",
    "RecursiveJump",
    "SamplerConfig",
    "NetPredictor",
    "train_imputer",
    "impute",
    "partition_ensemble",
    "dropout_partition_gen",
    "guided_partition_gen",
    "prior_partition_gen",
]

IMPUTER_SPEC = ConvNetSpec(
    in_channels=2,  # masked values + context mask
    hidden_channels=48,
    out_channels=1,
    n_blocks=4,
    output_head="linear",
)


class ImputerConfigError(ValueError):
    """Training cannot make progress under this configuration."""


@dataclass(frozen=True)
class ImputerTrainConfig:
    strategy: PartitionStrategy
    steps: int = 5000
    batch: int = 1
    lr: float = 1e-3
    p_clean: float = 0.5
    seed: int = 0
    prefetch_window: int = 32  # internal batching of generative partition draws

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be >= 1")
        if not 0.0 <= self.p_clean <= 1.0:
            raise ValueError("p_clean must lie in [0, 1]")
        if self.prefetch_window < 1:
            raise ValueError("prefetch_window must be >= 1")


Predictor = Callable[[float, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class NetPredictor:
    """Adapter making trained network weights callable as a predictor:
    (t, masked values (B, H, W), context mask (B, H, W)) -> (B, H, W)."""

    params: NetParams

    def __call__(self, t: float, masked: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        x = torch.stack([masked, ctx], dim=1)
        tt = torch.full((x.shape[0],), float(t), dtype=torch.float64)
        with torch.no_grad():
            return nnet.forward_batch(self.params, x, tt)[:, 0]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _as_observations(
    dataset: DatasetManifest | Sequence[tuple[np.ndarray, Mask]],
) -> tuple[list[torch.Tensor], list[Mask], list[Field | None]]:
    """Normalise the dataset to (raw value tensors, masks, fields-for-saliency)."""
    values: list[torch.Tensor] = []
    masks: list[Mask] = []
    fields: list[Field | None] = []
    if isinstance(dataset, DatasetManifest):
        for i in range(len(dataset)):
            obs = dataset.load_observation(i)
            values.append(torch.from_numpy(np.array(obs.values)))
            masks.append(obs.validity)
            fields.append(obs)
    else:
        for raw, mask in dataset:
            arr = np.array(raw, dtype=np.float64)
            values.append(torch.from_numpy(arr))
            masks.append(mask)
            fields.append(Field(np.where(mask.to_bool(), arr, 0.0), mask))
    if not values:
        raise ValueError("empty training dataset")
    return values, masks, fields


class _PartitionSource:
    """Per-step partition supplier.

    Generative strategies (guided / unconditional prior) are expensive per
    draw, so their masks are produced in batched windows; each request
    still uses its own derived seed, so the draws stay independent and the
    whole schedule is a pure function of (config, seed).
    """

    def __init__(
        self,
        strategy: PartitionStrategy,
        prior: PriorModel | None,
        masks: list[Mask],
        fields: list[Field | None],
        order: np.ndarray,
        seed: int,
        window: int,
    ) -> None:
        self.strategy = strategy
        self.prior = prior
        self.masks = masks
        self.fields = fields
        self.order = order  # flat request -> dataset index
        self.seed = seed
        self.window = window
        self._cache: dict[int, Partition] = {}
        if isinstance(strategy, Guided) and prior is None:
            raise ValueError("guided strategy requires a trained prior")

    def get(self, request: int) -> Partition:
        i = int(self.order[request])
        mask = self.masks[i]
        req_seed = rng.derive_seed(self.seed, f"partition.{request}")
        if isinstance(self.strategy, Guided):
            if request not in self._cache:
                self._fill_guided(request)
            return self._cache.pop(request)
        if isinstance(self.strategy, UnconditionalPrior):
            if request not in self._cache:
                self._fill_prior(request)
            return self._cache.pop(request)
        return partition(self.strategy, mask, self.fields[i], req_seed, prior=self.prior)

    def _window_requests(self, request: int) -> list[int]:
        start = (request // self.window) * self.window
        return [r for r in range(start, min(start + self.window, len(self.order)))]

    def _fill_guided(self, request: int) -> None:
        assert self.prior is not None
        requests = self._window_requests(request)
        batch_masks = [self.masks[int(self.order[r])] for r in requests]
        cfg: GuidanceConfig = self.strategy.cfg
        seeds = [
            rng.derive_seed(rng.derive_seed(self.seed, f"partition.{r}"), "partition.guided")
            for r in requests
        ]
        sampled = guided_sample_batch(self.prior.params, self.prior.codec, batch_masks, cfg, seeds)
        for r, m, s in zip(requests, batch_masks, sampled):
            self._cache[r] = make_partition(m, s)

    def _fill_prior(self, request: int) -> None:
        handle: PriorModel = self.strategy.prior
        requests = self._window_requests(request)
        batch_masks = [self.masks[int(self.order[r])] for r in requests]
        shape = batch_masks[0].shape
        same = all(m.shape == shape for m in batch_masks)
        seeds = [
            rng.derive_seed(rng.derive_seed(self.seed, f"partition.{r}"), "partition.prior")
            for r in requests
        ]
        if same:
            sampled = sample_unconditional_batch(
                handle.params, handle.codec, shape, handle.n_steps, seeds
            )
        else:
            sampled = [
                sample_unconditional_batch(handle.params, handle.codec, m.shape, handle.n_steps, [s])[0]
                for m, s in zip(batch_masks, seeds)
            ]
        for r, m, s in zip(requests, batch_masks, sampled):
            self._cache[r] = make_partition(m, s)


def train_imputer(
    dataset: DatasetManifest | Sequence[tuple[np.ndarray, Mask]],
    prior: PriorModel | None,
    cfg: ImputerTrainConfig,
    *,
    spec: ConvNetSpec = IMPUTER_SPEC,
    schedule: NoiseSchedule = NoiseSchedule(),
) -> tuple[NetParams, list[float]]:
    """Train the reconstruction network; returns weights and the loss trace.

    The loss of each batch member is the squared error over its query
    pixels normalised by the query size; members with empty queries are
    skipped, and a full epoch of empty queries aborts (the strategy is
    not producing usable partitions).
    """
    values, masks, fields = _as_observations(dataset)
    n = len(values)
    pick = rng.stream(cfg.seed, "imputer.sample")
    clean = rng.stream(cfg.seed, "imputer.clean")
    times = rng.stream(cfg.seed, "imputer.time")
    noise = rng.stream(cfg.seed, "imputer.noise")

    order = pick.integers(0, n, size=cfg.steps * cfg.batch)
    source = _PartitionSource(
        cfg.strategy, prior, masks, fields, order, cfg.seed, cfg.prefetch_window
    )

    params = nnet.init_params(spec, rng.derive_seed(cfg.seed, "imputer.init"))
    adam = nnet.init_adam(params, cfg.lr)
    losses: list[float] = []
    epoch_steps = max(1, math.ceil(n / cfg.batch))
    consecutive_empty = 0

    for step in range(cfg.steps):
        inputs: list[torch.Tensor] = []
        qry_masks: list[torch.Tensor] = []
        targets: list[torch.Tensor] = []
        ts: list[float] = []
        for b in range(cfg.batch):
            request = step * cfg.batch + b
            i = int(order[request])
            part = source.get(request)
            q = torch.from_numpy(part.qry.bits.astype(bool))
            if not bool(q.any()):
                continue
            u = values[i]
            ctx = torch.from_numpy(part.ctx.bits.astype(np.float64))
            ctx_b = part.ctx.to_bool()
            if clean.uniform() < cfg.p_clean:
                t_b = 0.0
                ctx_vals = torch.where(torch.from_numpy(ctx_b), u, torch.zeros(()))
            else:
                t_b = float(times.uniform(schedule.t_min, 1.0))
                eps = torch.from_numpy(noise.standard_normal(u.shape))
                noised = math.sqrt(1.0 - t_b) * u + math.sqrt(t_b) * eps
                ctx_vals = torch.where(torch.from_numpy(ctx_b), noised, torch.zeros(()))
            inputs.append(torch.stack([ctx_vals, ctx]))
            qry_masks.append(q)
            targets.append(u)
            ts.append(t_b)

        if not inputs:
            consecutive_empty += 1
            if consecutive_empty >= epoch_steps:
                raise ImputerConfigError(
                    f"no query pixels produced for {consecutive_empty} consecutive steps"
                )
            continue
        consecutive_empty = 0

        x = torch.stack(inputs)
        tt = np.array(ts)
        q_stack = torch.stack(qry_masks)
        u_stack = torch.stack(targets)
        q_sizes = q_stack.sum(dim=(1, 2)).to(torch.float64)

        def loss_fn(out: torch.Tensor) -> torch.Tensor:
            diff = torch.where(q_stack, out[:, 0] - u_stack, torch.zeros(()))
            per = (diff * diff).sum(dim=(1, 2)) / q_sizes
            return per.mean()

        loss, grads = nnet.value_and_param_grad(params, x, tt, loss_fn)
        if not np.isfinite(loss):
            raise NumericsError(f"imputer loss diverged at step {step}")
        losses.append(loss)
        adam, params = nnet.adam_step(adam, params, grads)
    return params, losses


# ---------------------------------------------------------------------------
# Inference samplers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DirectProjection:
    k_ens: int = 8

    def __post_init__(self) -> None:
        if self.k_ens < 1:
            raise ValueError("k_ens must be >= 1")


@dataclass(frozen=True)
class Proximal:
    delta: float = 1e-3
    k_ens: int = 8

    def __post_init__(self) -> None:
        if self.k_ens < 1:
            raise ValueError("k_ens must be >= 1")
        if not 0.0 < self.delta <= NoiseSchedule().t_min:
            raise ValueError(f"delta={self.delta} outside (0, t_min]")


@dataclass(frozen=True)
class IterativeConditioning:
    n_steps: int = 50
    k_ens: int = 8
    omega: str = "linear"

    def __post_init__(self) -> None:
        if self.n_steps < 1 or self.k_ens < 1:
            raise ValueError("n_steps and k_ens must be >= 1")
        if self.omega != "linear":
            raise ValueError(f"unknown omega schedule {self.omega!r}")


@dataclass(frozen=True)
class Repaint:
    n_steps: int = 50
    jump: int = 2
    every: int = 4
    k_ens: int = 8

    def __post_init__(self) -> None:
        if min(self.n_steps, self.jump, self.every, self.k_ens) < 1:
            raise ValueError("all Repaint counts must be >= 1")


@dataclass(frozen=True)
class RecursiveJump:
    n_steps: int = 50
    stages: int = 3
    k_ens: int = 8

    def __post_init__(self) -> None:
        if min(self.n_steps, self.stages, self.k_ens) < 1:
            raise ValueError("all RecursiveJump counts must be >= 1")
        if self.n_steps < self.stages:
            raise ValueError("n_steps must be >= stages so every jump lands above 0")


SamplerConfig = DirectProjection | Proximal | IterativeConditioning | Repaint | RecursiveJump


def partition_ensemble(
    mask: Mask, partition_gen: Callable[[int], Partition], k_ens: int, seed: int
) -> list[Partition]:
    """K independent partitions of one mask (per-member derived seeds)."""
    if k_ens < 1:
        raise ValueError("k_ens must be >= 1")
    return [partition_gen(rng.derive_seed(seed, f"member.{k}")) for k in range(k_ens)]


def dropout_partition_gen(mask: Mask, rho: float = 0.8) -> Callable[[int], Partition]:
    """Pixel-dropout fallback: keep each observed pixel in the context with
    probability rho, remainder becomes the query."""
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho={rho} outside (0, 1]")

    def gen(seed: int) -> Partition:
        keep = rng.stream(seed, "dropout").uniform(size=mask.shape) < rho
        return make_partition(mask, Mask(keep.astype(np.uint8)))

    return gen


def guided_partition_gen(
    prior: PriorModel, mask: Mask, cfg: GuidanceConfig
) -> Callable[[int], Partition]:
    """Observation-aligned generator matching the training-time strategy."""

    def gen(seed: int) -> Partition:
        return partition(Guided(cfg), mask, None, seed, prior=prior)

    return gen


def prior_partition_gen(prior: PriorModel, mask: Mask) -> Callable[[int], Partition]:
    def gen(seed: int) -> Partition:
        return partition(UnconditionalPrior(prior), mask, None, seed)

    return gen


def _ensemble_mean(
    model: Predictor,
    values: torch.Tensor,
    parts: Sequence[Partition],
    t: float,
) -> torch.Tensor:
    ctx = torch.from_numpy(np.stack([p.ctx.bits for p in parts]).astype(np.float64))
    masked = values.expand(len(parts), *values.shape) * ctx
    out = model(t, masked, ctx)
    if not torch.isfinite(out).all():
        raise NumericsError("non-finite predictor output")
    return out.mean(dim=0)


def impute(
    model: Predictor,
    u_obs: Field,
    mask: Mask,
    scfg: SamplerConfig,
    partition_gen: Callable[[int], Partition],
    seed: int,
    *,
    schedule: NoiseSchedule = NoiseSchedule(),
) -> Field:
    """Reconstruct a complete field from a partial observation.

    ``model`` maps (t, masked values, context mask) batches to predicted
    fields; ``partition_gen`` supplies the random context masks the
    ensembles average over. Observed pixels of the output always equal
    the observation exactly.
    """
    if u_obs.shape != mask.shape:
        raise ValueError("observation and mask shapes differ")
    u = torch.from_numpy(np.array(u_obs.values))
    m_bool = torch.from_numpy(mask.to_bool())

    def clean_ensemble(label: str) -> torch.Tensor:
        parts = partition_ensemble(mask, partition_gen, scfg.k_ens, rng.derive_seed(seed, label))
        return _ensemble_mean(model, u, parts, 0.0)

    if isinstance(scfg, DirectProjection):
        est = clean_ensemble("direct.parts")

    elif isinstance(scfg, Proximal):
        eps = torch.from_numpy(rng.stream(seed, "proximal.noise").standard_normal(u.shape))
        noised = math.sqrt(1.0 - scfg.delta) * u + math.sqrt(scfg.delta) * eps
        parts = partition_ensemble(mask, partition_gen, scfg.k_ens, rng.derive_seed(seed, "proximal.parts"))
        ctx = torch.from_numpy(np.stack([p.ctx.bits for p in parts]).astype(np.float64))
        masked = noised.expand(len(parts), *noised.shape) * ctx
        out = model(scfg.delta, masked, ctx)
        if not torch.isfinite(out).all():
            raise NumericsError("non-finite predictor output")
        est = out.mean(dim=0)

    else:
        n_int = scfg.n_steps
        if n_int > 1000:
            raise ValueError("integer grids above 1000 steps collide with t_min")
        e_imp = clean_ensemble("iterative.eimp")
        x = torch.from_numpy(rng.stream(seed, "iterative.init").standard_normal(u.shape))
        noise_stream = rng.stream(seed, "iterative.renoise")

        def t_cont(s: int) -> float:
            return 0.0 if s == 0 else max(s / n_int, schedule.t_min)

        def blended_step(s: int, s_next: int, x_s: torch.Tensor, counter: int) -> torch.Tensor:
            part = partition_gen(rng.derive_seed(seed, f"iterative.part.{counter}"))
            ctx = torch.from_numpy(part.ctx.bits.astype(np.float64))
            e_diff = model(t_cont(s), (x_s * ctx).unsqueeze(0), ctx.unsqueeze(0))[0]
            omega = s / n_int
            x0_blend = omega * e_diff + (1.0 - omega) * e_imp
            # pinning observed pixels to the observation reproduces the
            # merged-noise update (eps_obs on M, eps_unobs elsewhere)
            x0_merged = torch.where(m_bool, u, x0_blend)
            return ode_step(schedule, x_s, x0_merged, t_cont(s), t_cont(s_next))

        if isinstance(scfg, IterativeConditioning):
            for s in range(n_int, 0, -1):
                x = blended_step(s, s - 1, x, n_int - s)

        elif isinstance(scfg, Repaint):
            s, counter = n_int, 0
            while s > 0:
                t_int = s - 1
                x = blended_step(s, t_int, x, counter)
                counter += 1
                if counter % scfg.every == 0 and t_int > 0:
                    s_new = min(t_int + scfg.jump, n_int)
                    eps = torch.from_numpy(noise_stream.standard_normal(u.shape))
                    x = renoise(schedule, x, t_cont(t_int), t_cont(s_new), eps)
                    s = s_new
                else:
                    s = t_int

        elif isinstance(scfg, RecursiveJump):
            s, stage, counter = n_int, scfg.stages - 1, 0
            while s > 0:
                t_int = s - 1
                x = blended_step(s, t_int, x, counter)
                counter += 1
                if t_int == 0 and stage > 0:
                    s_jump = (stage * n_int) // scfg.stages
                    eps = torch.from_numpy(noise_stream.standard_normal(u.shape))
                    x = renoise(schedule, x, 0.0, t_cont(s_jump), eps)
                    s = s_jump
                    stage -= 1
                else:
                    s = t_int

        else:
            raise TypeError(f"unknown sampler config {type(scfg).__name__}")
        est = x

    if not torch.isfinite(est).all():
        raise NumericsError("non-finite imputed state")
    out = torch.where(m_bool, u, est)
    return Field(out.numpy(), Mask.ones(*mask.shape))
