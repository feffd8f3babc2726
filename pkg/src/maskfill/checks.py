"""Numerical verification suites behind the ``verify`` subcommand.

Four suites, each returning a JSON-serialisable dict:

* theorem campaign -- randomized exact enumeration of both positivity
  statements plus a hand-derived reference case;
* shift invariance -- constant channel shifts of the latent leave the
  softmax-headed network output bitwise unchanged;
* gradient fidelity -- autodiff parameter/input gradients against
  central finite differences;
* Tweedie consistency -- the trained single-mask prior's implied score
  against the analytic Gaussian score.
"""

from __future__ import annotations

import math
import time

import numpy as np
import torch

from . import nnet, rng
from .grids import Mask
from .guided import guidance_loss, make_anchor
from .imputer import IMPUTER_SPEC
from .mask_prior import (
    PRIOR_SPEC,
    PriorTrainConfig,
    ScaledLogitCodec,
    encode_mask,
    train_prior,
)
from .nnet import ConvNetSpec, simplex_project
from .partitioning import (
    DiscreteMaskDistribution,
    randomized_theorem_campaign,
    verify_theorem1,
)
from .schedule import NoiseSchedule, forward_corrupt, tweedie_score

__all__ = [
    "theorem_suite",
    "hand_case_theorem1",
    "shift_invariance_suite",
    "gradient_suite",
    "guidance_gradient_check",
    "tweedie_suite",
    "verify_report",
]

FD_STEP = 1e-5
GRAD_TOL = 1e-4


def _lattice(gen: np.random.Generator, shape, scale_pow: int = 20) -> np.ndarray:
    """Dyadic-lattice values in [-8, 8]: multiples of 2**-scale_pow, so
    adding two of them is exact in float64."""
    k = gen.integers(-(8 << scale_pow), (8 << scale_pow) + 1, size=shape)
    return k.astype(np.float64) / float(1 << scale_pow)


def hand_case_theorem1() -> dict:
    """Uniform support {(1,0),(0,1),(1,1)} in d=2: the empty context has
    probability 2/9 and a conditional query probability of exactly 1/2."""
    dist = DiscreteMaskDistribution(
        d=2, support=((1, 0), (0, 1), (1, 1)), probs=(1 / 3, 1 / 3, 1 / 3)
    )
    report, conditionals = verify_theorem1(dist)
    ctx_prob, conds = conditionals[(0, 0)]
    return {
        "context_probability": float(ctx_prob),
        "conditional_query_probability": float(conds[0]),
        "context_probability_exact": abs(float(ctx_prob) - 2.0 / 9.0) < 1e-15,
        "conditional_exact": abs(float(conds[0]) - 0.5) < 1e-15,
        "violations": len(report.violations),
    }


def theorem_suite(n_trials: int, d_max: int, seed: int) -> dict:
    start = time.perf_counter()
    summary = randomized_theorem_campaign(n_trials, d_max, seed)
    hand = hand_case_theorem1()
    return {
        "campaign": summary.to_json(),
        "hand_case": hand,
        "passed": summary.t1_violations == 0
        and summary.t2_violations == 0
        and hand["context_probability_exact"]
        and hand["conditional_exact"],
        "seconds": time.perf_counter() - start,
    }


def shift_invariance_suite(n_trials: int = 100, seed: int = 0, shape: tuple[int, int] = (8, 8)) -> dict:
    """Bitwise equality of forward(project(x + c)) and forward(project(x))
    across random (params, input, shift) triples.

    Inputs and shifts are drawn on a dyadic lattice so the shift itself is
    exact in floating point; the projection then removes it exactly.
    """
    gen = rng.stream(seed, "check.shift")
    failures = 0
    for trial in range(n_trials):
        params = nnet.init_params(PRIOR_SPEC, rng.derive_seed(seed, f"check.shift.params.{trial}"))
        x = torch.from_numpy(_lattice(gen, (2, *shape)))
        c = torch.from_numpy(_lattice(gen, (1, *shape)))
        t = float(gen.uniform(0.0, 1.0))
        base = nnet.forward(params, simplex_project(x, dim=0), t)
        shifted = nnet.forward(params, simplex_project(x + c, dim=0), t)
        if not torch.equal(base, shifted):
            failures += 1
    return {"trials": n_trials, "failures": failures, "passed": failures == 0}


def _fd_loss(build_loss, theta: torch.Tensor, idx: tuple[int, ...]) -> float:
    with torch.no_grad():
        orig = float(theta[idx])
        theta[idx] = orig + FD_STEP
        up = build_loss()
        theta[idx] = orig - FD_STEP
        down = build_loss()
        theta[idx] = orig
    return (up - down) / (2.0 * FD_STEP)


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def gradient_suite(spec: ConvNetSpec, n_coords: int = 50, seed: int = 0, shape: tuple[int, int] = (6, 6)) -> dict:
    """Parameter and input gradients vs central finite differences.

    The loss projects the output onto a fixed random direction, so
    gradients are generically nonzero for every parameter tensor.
    """
    gen = rng.stream(seed, "check.grad")
    params = nnet.init_params(spec, rng.derive_seed(seed, "check.grad.params"))
    x = torch.from_numpy(gen.standard_normal((spec.in_channels, *shape)))
    t = float(gen.uniform(0.0, 1.0))
    direction = torch.from_numpy(gen.standard_normal((spec.out_channels, *shape)))

    def loss_fn(out: torch.Tensor) -> torch.Tensor:
        return (out * direction).mean()

    grads = nnet.param_grad(params, x, t, loss_fn)
    names = list(params.tensors.keys())
    worst_param = 0.0
    for _ in range(n_coords):
        name = names[int(gen.integers(0, len(names)))]
        theta = params.tensors[name]
        idx = tuple(int(gen.integers(0, s)) for s in theta.shape)
        fd = _fd_loss(lambda: float(loss_fn(nnet.forward(params, x, t))), theta, idx)
        worst_param = max(worst_param, _rel_err(float(grads[name][idx]), fd))

    in_grad = nnet.input_grad(params, x, t, loss_fn)
    worst_input = 0.0
    for _ in range(n_coords):
        idx = tuple(int(gen.integers(0, s)) for s in x.shape)
        fd = _fd_loss(lambda: float(loss_fn(nnet.forward(params, x, t))), x, idx)
        worst_input = max(worst_input, _rel_err(float(in_grad[idx]), fd))

    return {
        "spec": f"{spec.in_channels}->{spec.hidden_channels}x{spec.n_blocks}->{spec.out_channels}/{spec.output_head}",
        "n_coords": n_coords,
        "max_rel_err_param": worst_param,
        "max_rel_err_input": worst_input,
        "passed": worst_param <= GRAD_TOL and worst_input <= GRAD_TOL,
    }


def guidance_gradient_check(n_coords: int = 50, seed: int = 0, shape: tuple[int, int] = (6, 6)) -> dict:
    """Gradient of guidance_loss(net(project(x))) w.r.t. the latent x vs
    finite differences -- the full composition used during guided runs."""
    gen = rng.stream(seed, "check.guidegrad")
    params = nnet.init_params(PRIOR_SPEC, rng.derive_seed(seed, "check.guidegrad.params"))
    mask = Mask.from_array(gen.integers(0, 2, size=shape))
    anchor = make_anchor(mask, 0.8, rng.derive_seed(seed, "check.guidegrad.anchor"))
    x = torch.from_numpy(gen.standard_normal((2, *shape)))
    t = 0.5

    def composed() -> float:
        e_hat = nnet.forward(params, simplex_project(x, dim=0), t)
        return float(guidance_loss(e_hat[0], anchor))

    leaf = x.detach().clone().requires_grad_(True)
    e_hat = nnet.forward(params, simplex_project(leaf, dim=0), t)
    (grad,) = torch.autograd.grad(guidance_loss(e_hat[0], anchor), leaf)

    worst = 0.0
    for _ in range(n_coords):
        idx = tuple(int(gen.integers(0, s)) for s in x.shape)
        fd = _fd_loss(composed, x, idx)
        worst = max(worst, _rel_err(float(grad[idx]), fd))
    return {"n_coords": n_coords, "max_rel_err": worst, "passed": worst <= GRAD_TOL}


def tweedie_suite(
    seed: int = 0,
    steps: int = 600,
    times: tuple[float, ...] = (0.2, 0.5, 0.8),
    n_draws: int = 16,
    tol: float = 0.05,
) -> dict:
    """Train the prior on a single 4x4 mask; the induced noisy marginal is
    a single Gaussian whose analytic score must match the model's
    Tweedie-formula score to ``tol`` relative error."""
    schedule = NoiseSchedule()
    codec = ScaledLogitCodec()
    gen = rng.stream(seed, "check.tweedie")
    mask = Mask.from_array(gen.integers(0, 2, size=(4, 4)))
    params, _ = train_prior(
        [mask], PriorTrainConfig(steps=steps, batch=8, lr=3e-3, seed=rng.derive_seed(seed, "check.tweedie.train"))
    )
    x0 = torch.from_numpy(encode_mask(codec, mask))
    errors = {}
    for t in times:
        alpha, sigma = math.sqrt(1.0 - t), math.sqrt(t)
        rels = []
        for draw in range(n_draws):
            eps = torch.from_numpy(gen.standard_normal(tuple(x0.shape)))
            x_t = forward_corrupt(schedule, x0, t, eps)
            with torch.no_grad():
                e_hat = nnet.forward(params, simplex_project(x_t, dim=0), t)
            model_score = tweedie_score(schedule, x_t, e_hat, t, codec.kappa)
            true_score = (alpha * x0 - x_t) / sigma**2
            rels.append(float(torch.linalg.vector_norm(model_score - true_score) / torch.linalg.vector_norm(true_score)))
        errors[str(t)] = float(np.mean(rels))
    return {"relative_errors": errors, "tolerance": tol, "passed": all(v <= tol for v in errors.values())}


def verify_report(trials: int, seed: int, d_max: int = 6, suites: tuple[str, ...] = ("theorems", "shift", "gradients", "tweedie")) -> dict:
    """Assemble the full verification report."""
    report: dict = {"seed": seed}
    if "theorems" in suites:
        report["theorems"] = theorem_suite(trials, d_max, rng.derive_seed(seed, "verify.theorems"))
    if "shift" in suites:
        report["shift_invariance"] = shift_invariance_suite(100, rng.derive_seed(seed, "verify.shift"))
    if "gradients" in suites:
        report["gradients"] = [
            gradient_suite(PRIOR_SPEC, 50, rng.derive_seed(seed, "verify.grad.prior")),
            gradient_suite(IMPUTER_SPEC, 50, rng.derive_seed(seed, "verify.grad.imputer")),
        ]
        report["guidance_gradient"] = guidance_gradient_check(50, rng.derive_seed(seed, "verify.guidegrad"))
    if "tweedie" in suites:
        report["tweedie"] = tweedie_suite(rng.derive_seed(seed, "verify.tweedie"))
    flat_pass = []
    for key, value in report.items():
        if isinstance(value, dict) and "passed" in value:
            flat_pass.append(value["passed"])
        elif isinstance(value, list):
            flat_pass.extend(v["passed"] for v in value if isinstance(v, dict) and "passed" in v)
    report["violations"] = 0 if all(flat_pass) else sum(1 for p in flat_pass if not p)
    report["passed"] = all(flat_pass)
    return report
