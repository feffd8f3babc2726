"""Calibration run for the end-to-end strategy comparison (not shipped)."""
import sys
import time

import numpy as np

from maskfill import metrics, rng, synth
from maskfill.grids import land_mask
from maskfill.guided import GuidanceConfig
from maskfill.imputer import (
    DirectProjection,
    ImputerTrainConfig,
    NetPredictor,
    dropout_partition_gen,
    impute,
    train_imputer,
)
from maskfill.mask_prior import PriorModel, PriorTrainConfig, ScaledLogitCodec, train_prior
from maskfill.partitioning import Guided, PixelLevel, UnconditionalPrior

t_start = time.time()


def log(msg):
    print(f"[{time.time()-t_start:7.1f}s] {msg}", flush=True)


out_dir = sys.argv[1] if len(sys.argv) > 1 else "/tmp/e2e_cal"
cfg = synth.SynthConfig(height=32, width=32, corr_length=3.0, style="mixed",
                        coverage=0.5, land_fraction=0.1, n_samples=100, seed=42)
manifest = synth.gen_dataset(cfg, out_dir)
land = land_mask(manifest)
log(f"dataset ready, land={land.count()}")

codec = ScaledLogitCodec()
prior_params, prior_losses = train_prior(
    manifest, PriorTrainConfig(steps=2000, batch=16, lr=3e-3, t_dist="late", seed=7), codec=codec
)
prior = PriorModel(params=prior_params, codec=codec, n_steps=10)
log(f"prior trained, loss {prior_losses[0]:.3f} -> {np.mean(prior_losses[-50:]):.4f}")

strategies = {
    "guided": Guided(GuidanceConfig(rho=0.8, scale=120.0, n_steps=10)),
    "pixel": PixelLevel(0.3, 0.3),
    "uncond": UnconditionalPrior(prior=prior),
}

N_EVAL = 20
observations = [manifest.load_observation(i) for i in range(N_EVAL)]
oracles = [synth.load_oracle(out_dir, i, manifest) for i in range(N_EVAL)]

results = {}
for name, strat in strategies.items():
    per_seed = []
    for seed in (101, 202, 303):
        t0 = time.time()
        tcfg = ImputerTrainConfig(strategy=strat, steps=5000, batch=1, lr=1e-3, p_clean=0.5, seed=seed)
        params, losses = train_imputer(manifest, prior if name == "guided" else None, tcfg)
        model = NetPredictor(params)
        mses = []
        for i, (obs, oracle) in enumerate(zip(observations, oracles)):
            recon = impute(model, obs, obs.validity, DirectProjection(k_ens=8),
                           dropout_partition_gen(obs.validity, 0.8),
                           rng.derive_seed(seed, f"eval.{i}"))
            mses.append(metrics.oracle_region_mse(recon, oracle, obs.validity, land))
        per_seed.append(float(np.mean(mses)))
        log(f"{name} seed={seed}: train {time.time()-t0:.0f}s  loss_end={np.mean(losses[-100:]):.4f}  oracle MSE={per_seed[-1]:.4f}")
    results[name] = per_seed

for name, vals in results.items():
    log(f"{name}: per-seed {['%.4f' % v for v in vals]}  median {np.median(vals):.4f}")
g, p, u = (np.median(results[k]) for k in ("guided", "pixel", "uncond"))
log(f"ordering guided<=pixel: {g <= p}   guided<=uncond: {g <= u}")
