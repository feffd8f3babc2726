"""Generative prior over binary observation masks.

Masks are lifted to a continuous scaled-logit target (the true class
channel holds kappa, the other zero), corrupted by the variance-
preserving forward process, and a softmax-headed network is trained to
predict the clean one-hot class field from the simplex-projected noisy
latent:

    L = E_{t, mask, eps} [ w(t) * || e_hat(t, softmax(x_t)) - e ||^2 ]

Sampling integrates the deterministic probability-flow steps backward
from Gaussian noise at t = 1 and decodes the final latent by per-pixel
argmax (ties break toward "missing", so decoding never invents an
observation).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from . import nnet, rng
from .grids import DatasetManifest, Mask
from .nnet import ConvNetSpec, NetParams, NumericsError, simplex_project
from .schedule import NoiseSchedule, forward_corrupt, ode_step, time_grid

__all__ = [
    "ScaledLogitCodec",
    "PriorTrainConfig",
    "PriorModel",
    "TrainingDivergedError",
    "PRIOR_SPEC",
    "encode_mask",
    "decode",
    "train_prior",
    "sample_unconditional",
    "sample_unconditional_batch",
]

N_CLASSES = 2  # binary masks: channel 0 = observed, channel 1 = missing

# Architecture is fixed deliberately small for desk scale.
PRIOR_SPEC = ConvNetSpec(
    in_channels=N_CLASSES,
    hidden_channels=32,
    out_channels=N_CLASSES,
    n_blocks=4,
    output_head="softmax-over-channels",
)


class TrainingDivergedError(NumericsError):
    """Loss became non-finite during prior training."""


@dataclass(frozen=True)
class ScaledLogitCodec:
    """Scaled one-hot encoding of the two mask classes.

    kappa is decoupled from the class count: larger kappa sharpens
    softmax(encode(...)) toward the hard one-hot without affecting the
    argmax decode.
    """

    kappa: float = 4.0

    def __post_init__(self) -> None:
        if self.kappa <= 0.0:
            raise ValueError("kappa must be positive")


def encode_mask(codec: ScaledLogitCodec, mask: Mask) -> np.ndarray:
    """(2, H, W) float64 target: channel of the true class holds kappa."""
    observed = mask.bits.astype(np.float64)
    return codec.kappa * np.stack([observed, 1.0 - observed])


def decode(x0) -> Mask:
    """Per-pixel argmax over the two channels; ties decode as missing.

    Any positive affine rescaling of the latent leaves the argmax (and so
    the decoded mask) unchanged.
    """
    arr = x0.detach().numpy() if isinstance(x0, torch.Tensor) else np.asarray(x0)
    if arr.ndim != 3 or arr.shape[0] != N_CLASSES:
        raise ValueError(f"expected (2, H, W) latent, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite latent in decode")
    return Mask((arr[0] > arr[1]).astype(np.uint8))


@dataclass(frozen=True)
class PriorTrainConfig:
    steps: int = 2000
    batch: int = 8
    lr: float = 2e-3
    weighting: str = "uniform"  # or "alpha2-over-sigma2"
    t_dist: str = "uniform"  # or "late": density ~ 1/sqrt(1-t), oversampling
    # the near-t=1 regime where mode commitment happens
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be >= 1")
        if self.weighting not in ("uniform", "alpha2-over-sigma2"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.t_dist not in ("uniform", "late"):
            raise ValueError(f"unknown t distribution {self.t_dist!r}")


@dataclass(frozen=True)
class PriorModel:
    """Trained mask prior bundled with its codec and sampler step count."""

    params: NetParams
    codec: ScaledLogitCodec = ScaledLogitCodec()
    n_steps: int = 15


def _as_mask_list(dataset: DatasetManifest | Sequence[Mask]) -> list[Mask]:
    if isinstance(dataset, DatasetManifest):
        return dataset.load_all_masks()
    masks = list(dataset)
    if not masks:
        raise ValueError("mask dataset is empty")
    return masks


def _weight(weighting: str, t: float) -> float:
    if weighting == "uniform":
        return 1.0
    return (1.0 - t) / t  # alpha_t^2 / sigma_t^2


def _draw_times(times: np.random.Generator, t_dist: str, t_min: float, n: int) -> np.ndarray:
    u = times.uniform(0.0, 1.0, size=n)
    if t_dist == "late":
        return 1.0 - u * u * (1.0 - t_min)
    return t_min + u * (1.0 - t_min)


def train_prior(
    dataset: DatasetManifest | Sequence[Mask],
    config: PriorTrainConfig,
    *,
    codec: ScaledLogitCodec = ScaledLogitCodec(),
    schedule: NoiseSchedule = NoiseSchedule(),
    spec: ConvNetSpec = PRIOR_SPEC,
    init: NetParams | None = None,
) -> tuple[NetParams, list[float]]:
    """Train the mask denoiser; returns final parameters and the loss trace.

    Per step: draw masks, draw t from the configured distribution, corrupt
    the scaled-logit encodings, and regress the softmax-projected latent
    onto the one-hot class field under the squared loss (mean over pixels
    of the per-pixel channel sum). ``init`` warm-starts from existing
    weights (e.g. for a lower-learning-rate refinement phase).
    """
    masks = _as_mask_list(dataset)
    targets = [torch.from_numpy(encode_mask(codec, m) / codec.kappa) for m in masks]
    encodings = [torch.from_numpy(encode_mask(codec, m)) for m in masks]

    params = init if init is not None else nnet.init_params(spec, rng.derive_seed(config.seed, "prior.init"))
    adam = nnet.init_adam(params, config.lr)
    pick = rng.stream(config.seed, "prior.sample")
    times = rng.stream(config.seed, "prior.time")
    noise = rng.stream(config.seed, "prior.noise")

    losses: list[float] = []
    for step in range(config.steps):
        idx = pick.integers(0, len(masks), size=config.batch)
        t = _draw_times(times, config.t_dist, schedule.t_min, config.batch)
        x0 = torch.stack([encodings[i] for i in idx])
        e_true = torch.stack([targets[i] for i in idx])
        eps = torch.from_numpy(noise.standard_normal(x0.shape))
        x_t = torch.stack(
            [forward_corrupt(schedule, x0[b], t[b], eps[b]) for b in range(config.batch)]
        )
        w = torch.tensor([_weight(config.weighting, tb) for tb in t], dtype=torch.float64)

        def loss_fn(out: torch.Tensor) -> torch.Tensor:
            per = ((out - e_true) ** 2).sum(dim=1).mean(dim=(1, 2))
            return (w * per).mean()

        loss, grads = nnet.value_and_param_grad(params, simplex_project(x_t, dim=1), t, loss_fn)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"loss diverged at step {step}")
        losses.append(loss)
        adam, params = nnet.adam_step(adam, params, grads)
    return params, losses


def sample_unconditional_batch(
    params: NetParams,
    codec: ScaledLogitCodec,
    shape: tuple[int, int],
    n_steps: int,
    seeds: Sequence[int],
    *,
    schedule: NoiseSchedule = NoiseSchedule(),
) -> list[Mask]:
    """Draw independent masks in one batched probability-flow integration."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    h, w = shape
    init = np.stack(
        [rng.stream(s, "prior.sample.init").standard_normal((N_CLASSES, h, w)) for s in seeds]
    )
    x = torch.from_numpy(init)
    ts = time_grid(schedule, n_steps)
    tt = torch.full((len(seeds),), ts[0], dtype=torch.float64)
    with torch.no_grad():
        for i in range(n_steps):
            tt.fill_(ts[i])
            e_hat = nnet.forward_batch(params, simplex_project(x, dim=1), tt)
            x = ode_step(schedule, x, codec.kappa * e_hat, ts[i], ts[i + 1])
            if not torch.isfinite(x).all():
                raise NumericsError(f"non-finite latent at sampling step {i}")
    return [decode(x[b]) for b in range(len(seeds))]


def sample_unconditional(
    params: NetParams,
    codec: ScaledLogitCodec,
    shape: tuple[int, int],
    n_steps: int,
    seed: int,
    *,
    schedule: NoiseSchedule = NoiseSchedule(),
) -> Mask:
    """Sample one mask from the learned prior."""
    return sample_unconditional_batch(params, codec, shape, n_steps, [seed], schedule=schedule)[0]
