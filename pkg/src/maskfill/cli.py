"""Command-line pipeline driver.

Subcommands: synth, train-prior, sample-mask, train-imputer, impute,
evaluate, heatmap, verify. Options merge three layers (lowest wins
order: built-in default < JSON config file < command-line flag). Config
files use flat dotted keys namespaced by subcommand, e.g.::

    {"synth.height": 64, "train-imputer.strategy": "guided"}

Unknown keys are rejected. Every run echoes its effective configuration
into ``<out>/config.lock.json``, which is sufficient to reproduce the
artifacts bit-exactly. Exit codes: 0 success, 1 validation error, 2
numerical failure; failures emit one machine-readable JSON line on
stderr. Every subcommand requires an explicit ``--seed``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import checks, imputer, mask_prior, metrics, nnet, rng, synth
from .grids import (
    Field,
    Mask,
    atomic_write_bytes,
    land_mask,
    load_grid,
    load_manifest,
    save_grid,
)
from .guided import GuidanceConfig, guided_sample
from .imputer import (
    DirectProjection,
    ImputerTrainConfig,
    IterativeConditioning,
    NetPredictor,
    Proximal,
    RecursiveJump,
    Repaint,
    dropout_partition_gen,
    guided_partition_gen,
)
from .mask_prior import PriorModel, PriorTrainConfig, ScaledLogitCodec
from .partitioning import (
    BlockWise,
    Empirical,
    Guided,
    PixelLevel,
    SaliencyDriven,
    UnconditionalPrior,
)

_SENTINEL = object()

# dest -> (flag, type, default, help); the dest doubles as the config key suffix
OPTIONS: dict[str, dict[str, tuple[str, object, object, str]]] = {
    "synth": {
        "out": ("--out", str, None, "output dataset directory"),
        "seed": ("--seed", int, None, "master seed (required)"),
        "height": ("--height", int, 32, "grid height"),
        "width": ("--width", int, 32, "grid width"),
        "samples": ("--samples", int, 100, "number of samples"),
        "coverage": ("--coverage", float, 0.5, "target observed fraction"),
        "style": ("--style", str, "mixed", "occlusion style: blobs|swaths|mixed"),
        "land_fraction": ("--land-fraction", float, 0.1, "static land fraction"),
        "corr_length": ("--corr-length", float, 3.0, "field correlation length (pixels)"),
    },
    "train-prior": {
        "data": ("--data", str, None, "dataset directory or manifest path"),
        "out": ("--out", str, None, "output directory"),
        "seed": ("--seed", int, None, "master seed (required)"),
        "steps": ("--steps", int, 2000, "training steps"),
        "batch": ("--batch", int, 8, "batch size"),
        "lr": ("--lr", float, 2e-3, "Adam learning rate"),
        "kappa": ("--kappa", float, 4.0, "logit scale"),
    },
    "sample-mask": {
        "prior": ("--prior", str, None, "prior checkpoint"),
        "out": ("--out", str, None, "output directory"),
        "seed": ("--seed", int, None, "master seed (required)"),
        "steps": ("--steps", int, 15, "sampling steps"),
        "guided": ("--guided", bool, False, "use observation-aligned guidance"),
        "mask": ("--mask", str, None, "observation mask GRD (required when guided)"),
        "rho": ("--rho", float, 0.8, "anchor retention ratio"),
        "guidance_scale": ("--guidance-scale", float, 120.0, "guidance scale"),
        "ensemble": ("--ensemble", int, 1, "number of masks to draw"),
        "height": ("--height", int, 32, "grid height (unconditional)"),
        "width": ("--width", int, 32, "grid width (unconditional)"),
        "kappa": ("--kappa", float, 4.0, "logit scale"),
    },
    "train-imputer": {
        "data": ("--data", str, None, "dataset directory or manifest path"),
        "out": ("--out", str, None, "output directory"),
        "seed": ("--seed", int, None, "master seed (required)"),
        "strategy": ("--strategy", str, "guided", "guided|pixel|block|saliency|empirical|prior"),
        "prior": ("--prior", str, None, "prior checkpoint (guided/prior strategies)"),
        "steps": ("--steps", int, 5000, "training steps"),
        "batch": ("--batch", int, 1, "batch size"),
        "lr": ("--lr", float, 1e-3, "Adam learning rate"),
        "p_clean": ("--p-clean", float, 0.5, "probability of a clean t=0 step"),
        "rho": ("--rho", float, 0.8, "guided anchor retention"),
        "guidance_scale": ("--guidance-scale", float, 120.0, "guided scale"),
        "guided_steps": ("--guided-steps", int, 15, "guided sampling steps"),
        "kappa": ("--kappa", float, 4.0, "logit scale"),
    },
    "impute": {
        "params": ("--params", str, None, "imputer checkpoint"),
        "field": ("--field", str, None, "observed field GRD"),
        "mask": ("--mask", str, None, "observation mask GRD"),
        "data": ("--data", str, None, "alternative: dataset directory"),
        "index": ("--index", int, 0, "sample index within --data"),
        "out": ("--out", str, None, "output directory"),
        "seed": ("--seed", int, None, "master seed (required)"),
        "sampler": ("--sampler", str, "direct", "direct|proximal|iterative|repaint|recursive-jump"),
        "ensemble": ("--ensemble", int, 8, "ensemble size"),
        "sampler_steps": ("--sampler-steps", int, 50, "integer grid for iterative samplers"),
        "prior": ("--prior", str, None, "prior checkpoint for guided partitions"),
        "rho": ("--rho", float, 0.8, "partition retention ratio"),
        "guidance_scale": ("--guidance-scale", float, 120.0, "guided scale"),
        "steps": ("--steps", int, 15, "guided sampling steps"),
        "kappa": ("--kappa", float, 4.0, "logit scale"),
    },
    "evaluate": {
        "data": ("--data", str, None, "dataset directory or manifest path"),
        "params": ("--params", str, None, "imputer checkpoint"),
        "out": ("--out", str, None, "output directory"),
        "seed": ("--seed", int, None, "master seed (required)"),
        "sampler": ("--sampler", str, "direct", "direct|proximal|iterative|repaint|recursive-jump"),
        "ensemble": ("--ensemble", int, 8, "ensemble size"),
        "sampler_steps": ("--sampler-steps", int, 50, "integer grid for iterative samplers"),
        "prior": ("--prior", str, None, "prior checkpoint for guided partitions"),
        "rho": ("--rho", float, 0.8, "partition retention ratio"),
        "guidance_scale": ("--guidance-scale", float, 120.0, "guided scale"),
        "steps": ("--steps", int, 15, "guided sampling steps"),
        "kappa": ("--kappa", float, 4.0, "logit scale"),
        "limit": ("--limit", int, 0, "evaluate at most N samples (0 = all)"),
        "use_oracle": ("--use-oracle", bool, False, "score against the sealed oracle instead"),
    },
    "heatmap": {
        "mask": ("--mask", str, None, "observation mask GRD"),
        "data": ("--data", str, None, "alternative: dataset directory"),
        "index": ("--index", int, 0, "sample index within --data"),
        "out": ("--out", str, None, "output directory"),
        "seed": ("--seed", int, None, "master seed (required)"),
        "ensemble": ("--ensemble", int, 16, "ensemble size"),
        "prior": ("--prior", str, None, "prior checkpoint (guided partitions)"),
        "rho": ("--rho", float, 0.8, "retention ratio"),
        "guidance_scale": ("--guidance-scale", float, 120.0, "guided scale"),
        "steps": ("--steps", int, 15, "guided sampling steps"),
        "kappa": ("--kappa", float, 4.0, "logit scale"),
    },
    "verify": {
        "out": ("--out", str, None, "output directory"),
        "seed": ("--seed", int, None, "master seed (required)"),
        "trials": ("--trials", int, 200, "theorem campaign trials"),
        "d_max": ("--d-max", int, 6, "max enumeration dimension"),
        "suite": ("--suite", str, "all", "all|theorems|shift|gradients|tweedie"),
    },
}

SAMPLERS = ("direct", "proximal", "iterative", "repaint", "recursive-jump")
STRATEGIES = ("guided", "pixel", "block", "saliency", "empirical", "prior")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskfill", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for command, options in OPTIONS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", type=str, default=None, help="JSON config file with dotted keys")
        for dest, (flag, typ, _default, help_text) in options.items():
            if typ is bool:
                p.add_argument(flag, dest=dest, action="store_const", const=True, default=_SENTINEL, help=help_text)
            else:
                p.add_argument(flag, dest=dest, type=typ, default=_SENTINEL, help=help_text)
    return parser


def _merge_config(command: str, args: argparse.Namespace) -> dict:
    options = OPTIONS[command]
    file_values: dict[str, object] = {}
    if args.config is not None:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(doc, dict):
            raise ValueError("config file must hold a JSON object")
        for key, value in doc.items():
            prefix, _, dest = key.partition(".")
            known = prefix in OPTIONS and dest in OPTIONS[prefix]
            if not known:
                raise ValueError(f"unknown config key {key!r}")
            if prefix == command:
                file_values[dest] = value
    effective: dict[str, object] = {}
    for dest, (_flag, typ, default, _help) in options.items():
        cli_value = getattr(args, dest)
        if cli_value is not _SENTINEL:
            effective[dest] = cli_value
        elif dest in file_values:
            raw = file_values[dest]
            effective[dest] = bool(raw) if typ is bool else (None if raw is None else typ(raw))
        else:
            effective[dest] = default
    if effective.get("seed") is None:
        raise ValueError(f"{command} is stochastic: an explicit --seed is required")
    return effective


def _lock_config(out_dir: Path, command: str, effective: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {f"{command}.{k}": v for k, v in sorted(effective.items())}
    doc["command"] = command
    atomic_write_bytes(out_dir / "config.lock.json", json.dumps(doc, indent=2).encode("utf-8"))


def _require(cfg: dict, *keys: str) -> None:
    for key in keys:
        if cfg[key] is None:
            raise ValueError(f"missing required option --{key.replace('_', '-')}")


def _load_manifest_arg(data: str):
    path = Path(data)
    return load_manifest(path if path.suffix == ".json" else path / "manifest.json")


def _load_prior(cfg: dict, n_steps: int | None = None) -> PriorModel:
    params = nnet.load_params(cfg["prior"])
    return PriorModel(
        params=params,
        codec=ScaledLogitCodec(kappa=cfg.get("kappa", 4.0)),
        n_steps=n_steps if n_steps is not None else cfg.get("steps", 15),
    )


def _sampler_config(cfg: dict):
    name = cfg["sampler"]
    k = cfg["ensemble"]
    t = cfg["sampler_steps"]
    if name in ("direct", "direct-projection"):
        return DirectProjection(k_ens=k)
    if name in ("proximal", "proximal-prediction"):
        return Proximal(k_ens=k)
    if name in ("iterative", "iterative-conditioning"):
        return IterativeConditioning(n_steps=t, k_ens=k)
    if name in ("repaint", "resampling-inpainting"):
        return Repaint(n_steps=t, k_ens=k)
    if name in ("recursive-jump", "recursive-jump-inpainting"):
        return RecursiveJump(n_steps=t, k_ens=k)
    raise ValueError(f"unknown sampler {name!r}; expected one of {SAMPLERS}")


def _partition_gen_for(cfg: dict, mask: Mask):
    if cfg.get("prior"):
        prior = _load_prior(cfg, n_steps=cfg.get("steps", 15))
        gcfg = GuidanceConfig(rho=cfg["rho"], scale=cfg["guidance_scale"], n_steps=cfg.get("steps", 15))
        return guided_partition_gen(prior, mask, gcfg)
    return dropout_partition_gen(mask, cfg["rho"])


# ---------------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------------


def _cmd_synth(cfg: dict) -> None:
    _require(cfg, "out")
    config = synth.SynthConfig(
        height=cfg["height"],
        width=cfg["width"],
        corr_length=cfg["corr_length"],
        style=cfg["style"],
        coverage=cfg["coverage"],
        land_fraction=cfg["land_fraction"],
        n_samples=cfg["samples"],
        seed=cfg["seed"],
    )
    synth.gen_dataset(config, cfg["out"])


def _cmd_train_prior(cfg: dict) -> None:
    _require(cfg, "data", "out")
    manifest = _load_manifest_arg(cfg["data"])
    codec = ScaledLogitCodec(kappa=cfg["kappa"])
    params, losses = mask_prior.train_prior(
        manifest,
        PriorTrainConfig(steps=cfg["steps"], batch=cfg["batch"], lr=cfg["lr"], seed=cfg["seed"]),
        codec=codec,
    )
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    nnet.save_params(out / "prior.ckpt", params)
    atomic_write_bytes(out / "loss_trace.json", json.dumps(losses).encode("utf-8"))


def _cmd_sample_mask(cfg: dict) -> None:
    _require(cfg, "prior", "out")
    prior = _load_prior(cfg, n_steps=cfg["steps"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    n = cfg["ensemble"]
    masks: list[Mask] = []
    if cfg["guided"]:
        _require(cfg, "mask")
        observed = load_grid(cfg["mask"])
        if not isinstance(observed, Mask):
            raise ValueError("--mask must point at a mask GRD")
        for k in range(n):
            gcfg = GuidanceConfig(
                rho=cfg["rho"],
                scale=cfg["guidance_scale"],
                n_steps=cfg["steps"],
                seed=rng.derive_seed(cfg["seed"], f"sample-mask.{k}"),
            )
            masks.append(guided_sample(prior.params, prior.codec, observed, gcfg))
    else:
        shape = (cfg["height"], cfg["width"])
        if cfg["mask"]:
            observed = load_grid(cfg["mask"])
            if not isinstance(observed, Mask):
                raise ValueError("--mask must point at a mask GRD")
            shape = observed.shape
        seeds = [rng.derive_seed(cfg["seed"], f"sample-mask.{k}") for k in range(n)]
        masks = mask_prior.sample_unconditional_batch(prior.params, prior.codec, shape, cfg["steps"], seeds)
    for k, m in enumerate(masks):
        save_grid(out / f"mask_{k:04d}.grd", m)
    if n > 1:
        stack = np.stack([m.bits.astype(np.float64) for m in masks])
        mean, std = stack.mean(axis=0), stack.std(axis=0)
        save_grid(out / "ensemble_mean.grd", Field.complete(mean))
        save_grid(out / "ensemble_std.grd", Field.complete(std))
        metrics.write_pgm(out / "ensemble_mean.pgm", mean)
        metrics.write_pgm(out / "ensemble_std.pgm", std / 0.5)  # std of a Bernoulli is <= 0.5


def _strategy_from_config(cfg: dict, manifest) -> tuple[object, PriorModel | None]:
    name = cfg["strategy"]
    if name == "guided":
        gcfg = GuidanceConfig(rho=cfg["rho"], scale=cfg["guidance_scale"], n_steps=cfg["guided_steps"])
        _require(cfg, "prior")
        return Guided(gcfg), _load_prior(cfg, n_steps=cfg["guided_steps"])
    if name == "pixel":
        return PixelLevel(), None
    if name == "block":
        return BlockWise(), None
    if name == "saliency":
        return SaliencyDriven(), None
    if name == "empirical":
        return Empirical(pool=tuple(manifest.load_all_masks())), None
    if name == "prior":
        _require(cfg, "prior")
        return UnconditionalPrior(prior=_load_prior(cfg, n_steps=cfg["guided_steps"])), None
    raise ValueError(f"unknown strategy {name!r}; expected one of {STRATEGIES}")


def _cmd_train_imputer(cfg: dict) -> None:
    _require(cfg, "data", "out")
    manifest = _load_manifest_arg(cfg["data"])
    strategy, prior = _strategy_from_config(cfg, manifest)
    train_cfg = ImputerTrainConfig(
        strategy=strategy,
        steps=cfg["steps"],
        batch=cfg["batch"],
        lr=cfg["lr"],
        p_clean=cfg["p_clean"],
        seed=cfg["seed"],
    )
    params, losses = imputer.train_imputer(manifest, prior, train_cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    nnet.save_params(out / "imputer.ckpt", params)
    atomic_write_bytes(out / "loss_trace.json", json.dumps(losses).encode("utf-8"))


def _load_observation_arg(cfg: dict) -> tuple[Field, Mask]:
    if cfg["data"]:
        manifest = _load_manifest_arg(cfg["data"])
        obs = manifest.load_observation(cfg["index"])
        return obs, obs.validity
    _require(cfg, "field", "mask")
    raw_field = load_grid(cfg["field"])
    raw_mask = load_grid(cfg["mask"])
    if not isinstance(raw_field, Field) or not isinstance(raw_mask, Mask):
        raise ValueError("--field must be a field GRD and --mask a mask GRD")
    return Field(np.where(raw_mask.to_bool(), raw_field.values, 0.0), raw_mask), raw_mask


def _cmd_impute(cfg: dict) -> None:
    _require(cfg, "params", "out")
    obs, mask = _load_observation_arg(cfg)
    model = NetPredictor(nnet.load_params(cfg["params"]))
    scfg = _sampler_config(cfg)
    gen = _partition_gen_for(cfg, mask)
    result = imputer.impute(model, obs, mask, scfg, gen, cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_grid(out / "imputed.grd", result)


def _cmd_evaluate(cfg: dict) -> None:
    _require(cfg, "data", "params", "out")
    manifest = _load_manifest_arg(cfg["data"])
    model = NetPredictor(nnet.load_params(cfg["params"]))
    scfg = _sampler_config(cfg)
    land = land_mask(manifest)
    n = len(manifest) if cfg["limit"] == 0 else min(cfg["limit"], len(manifest))
    observations = [manifest.load_observation(i) for i in range(n)]

    def impute_fn(input_field: Field, input_mask: Mask, seed: int) -> Field:
        gen = _partition_gen_for(cfg, input_mask)
        return imputer.impute(model, input_field, input_mask, scfg, gen, seed)

    if cfg["use_oracle"]:
        rows = []
        for i, obs in enumerate(observations):
            recon = impute_fn(obs, obs.validity, rng.derive_seed(cfg["seed"], f"impute.{i}"))
            oracle = synth.load_oracle(manifest.root, i, manifest)
            mse = metrics.oracle_region_mse(recon, oracle, obs.validity, land)
            rows.append(
                {
                    "sample_id": i,
                    "mse": mse,
                    "psnr": math.nan,
                    "cbgd": math.nan,
                    "n_eval_pixels": int((1 - obs.validity.bits).sum() - land.bits.sum()),
                }
            )
    else:
        rows = metrics.evaluate_overlay(observations, impute_fn, cfg["seed"], land=land)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_metrics_csv(out / "metrics.csv", rows)


def _cmd_heatmap(cfg: dict) -> None:
    _require(cfg, "out")
    if cfg["data"]:
        manifest = _load_manifest_arg(cfg["data"])
        mask = manifest.load_mask(cfg["index"])
    else:
        _require(cfg, "mask")
        grid = load_grid(cfg["mask"])
        if not isinstance(grid, Mask):
            raise ValueError("--mask must point at a mask GRD")
        mask = grid
    gen = _partition_gen_for(cfg, mask)
    grid01 = metrics.query_prob_heatmap(mask, gen, cfg["ensemble"], cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_pgm(out / "query_prob.pgm", grid01.freq)
    save_grid(out / "query_prob.grd", Field(np.nan_to_num(grid01.freq, nan=0.0), Mask.ones(*mask.shape)))


def _cmd_verify(cfg: dict) -> None:
    _require(cfg, "out")
    suites = ("theorems", "shift", "gradients", "tweedie") if cfg["suite"] == "all" else (cfg["suite"],)
    report = checks.verify_report(cfg["trials"], cfg["seed"], d_max=cfg["d_max"], suites=suites)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out / "verify_report.json", json.dumps(report, indent=2).encode("utf-8"))
    print(json.dumps({"violations": report["violations"], "passed": report["passed"]}))
    if not report["passed"]:
        raise FloatingPointError("verification suite reported failures")


_COMMANDS = {
    "synth": _cmd_synth,
    "train-prior": _cmd_train_prior,
    "sample-mask": _cmd_sample_mask,
    "train-imputer": _cmd_train_imputer,
    "impute": _cmd_impute,
    "evaluate": _cmd_evaluate,
    "heatmap": _cmd_heatmap,
    "verify": _cmd_verify,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        effective = _merge_config(args.command, args)
        if effective.get("out"):
            _lock_config(Path(effective["out"]), args.command, effective)
        _COMMANDS[args.command](effective)
    except (ArithmeticError,) as exc:  # numerical failures (incl. NumericsError)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
