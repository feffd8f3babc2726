"""Synthetic desk-scale datasets: smooth random fields under structured,
sample-dependent occlusions.

Fields are white Gaussian noise convolved with a separable Gaussian
kernel of standard deviation ``corr_length`` and standardised to mean 0,
variance 1 over all pixels. Occlusions come in three styles: smooth-blob
cloud cover, diagonal sensor-swath stripes, and their intersection; a
static land mask (fixed per dataset seed) is forced unobserved in every
sample. Coverage is hit exactly (up to ties) by thresholding a
continuous score at the empirical quantile.

The complete field of every sample is written to a sealed ``oracle``
subdirectory used only by evaluation; training inputs are the masked
observations alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import rng
from .grids import DatasetManifest, Field, Mask, load_grid, save_grid, save_manifest

__all__ = [
    "SynthConfig",
    "SynthConfigError",
    "gen_field",
    "gen_land",
    "gen_occlusion",
    "gen_dataset",
    "load_oracle",
]

STYLES = ("blobs", "swaths", "mixed")


class SynthConfigError(ValueError):
    """The requested dataset cannot be generated."""


@dataclass(frozen=True)
class SynthConfig:
    height: int = 32
    width: int = 32
    corr_length: float = 3.0
    style: str = "mixed"
    coverage: float = 0.5
    land_fraction: float = 0.1
    n_samples: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise SynthConfigError("grid dimensions must be positive")
        if self.corr_length < 1.0:
            raise SynthConfigError("corr_length must be >= 1")
        if self.style not in STYLES:
            raise SynthConfigError(f"style must be one of {STYLES}")
        if not 0.0 < self.coverage < 1.0:
            raise SynthConfigError("coverage must lie in (0, 1)")
        if not 0.0 <= self.land_fraction < 1.0:
            raise SynthConfigError("land_fraction must lie in [0, 1)")
        if self.n_samples < 1:
            raise SynthConfigError("n_samples must be >= 1")


def gen_field(cfg: SynthConfig, sample_seed: int) -> Field:
    """Smoothed Gaussian noise, standardised to mean 0 / variance 1."""
    gen = rng.stream(sample_seed, "synth.field")
    raw = gen.standard_normal((cfg.height, cfg.width))
    smooth = ndimage.gaussian_filter(raw, sigma=cfg.corr_length, mode="reflect")
    centred = smooth - smooth.mean()
    return Field.complete(centred / np.sqrt((centred * centred).mean()))


def _top_k(score: np.ndarray, allowed: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k highest-score pixels among ``allowed``
    (deterministic: ties resolve toward the lower flat index)."""
    flat = score.ravel().copy()
    flat[~allowed.ravel()] = -np.inf
    order = np.lexsort((np.arange(flat.size), -flat))
    out = np.zeros(flat.size, dtype=bool)
    out[order[:k]] = True
    return out.reshape(score.shape)


def _blob_score(shape: tuple[int, int], corr: float, gen: np.random.Generator) -> np.ndarray:
    return ndimage.gaussian_filter(gen.standard_normal(shape), sigma=corr, mode="reflect")


def _swath_score(shape: tuple[int, int], gen: np.random.Generator) -> np.ndarray:
    h, w = shape
    period = gen.uniform(max(4.0, min(h, w) / 8.0), max(6.0, min(h, w) / 2.0))
    phase = gen.uniform(0.0, period)
    direction = 1.0 if gen.uniform() < 0.5 else -1.0
    yy, xx = np.mgrid[0:h, 0:w]
    return np.sin(2.0 * np.pi * (xx + direction * yy + phase) / period)


def _ranks(score: np.ndarray) -> np.ndarray:
    order = np.lexsort((np.arange(score.size), score.ravel()))
    ranks = np.empty(score.size, dtype=np.int64)
    ranks[order] = np.arange(score.size)
    return ranks.reshape(score.shape)


def gen_land(cfg: SynthConfig) -> Mask:
    """Static land mask for the dataset (blob-shaped, fixed by the seed)."""
    n_land = int(round(cfg.land_fraction * cfg.height * cfg.width))
    if n_land == 0:
        return Mask.zeros(cfg.height, cfg.width)
    score = _blob_score((cfg.height, cfg.width), cfg.corr_length, rng.stream(cfg.seed, "synth.land"))
    return Mask.from_array(_top_k(score, np.ones(score.shape, dtype=bool), n_land))


def gen_occlusion(cfg: SynthConfig, sample_seed: int, land: Mask | None = None) -> Mask:
    """Sample-dependent observation mask at the configured coverage.

    Blobs threshold smoothed noise; swaths threshold a diagonal stripe
    wave; mixed thresholds the elementwise min of the two score ranks,
    which is exactly the intersection of one blob mask and one swath mask
    at a common quantile. Land pixels are forced to 0.
    """
    land = land if land is not None else gen_land(cfg)
    if land.shape != (cfg.height, cfg.width):
        raise SynthConfigError("land mask shape differs from config")
    sea = ~land.to_bool()
    k = int(round(cfg.coverage * cfg.height * cfg.width))
    if k > int(sea.sum()):
        raise SynthConfigError(
            f"coverage {cfg.coverage} needs {k} pixels but only {int(sea.sum())} are off-land"
        )
    gen = rng.stream(sample_seed, "synth.occlusion")
    shape = (cfg.height, cfg.width)
    if cfg.style == "blobs":
        score = _blob_score(shape, cfg.corr_length, gen)
    elif cfg.style == "swaths":
        score = _swath_score(shape, gen)
    else:
        blob_ranks = _ranks(_blob_score(shape, cfg.corr_length, gen))
        swath_ranks = _ranks(_swath_score(shape, gen))
        score = np.minimum(blob_ranks, swath_ranks).astype(np.float64)
    return Mask.from_array(_top_k(score, sea, k))


def _sample_name(i: int) -> str:
    return f"{i:04d}.grd"


def gen_dataset(cfg: SynthConfig, out_dir: str | Path) -> DatasetManifest:
    """Write field/mask GRD pairs plus the sealed oracle and the manifest.

    Stored observations are exactly M * u0 (zeros where unobserved); the
    complete u0 goes only into ``oracle/``, which the manifest never
    references.
    """
    out = Path(out_dir)
    for sub in ("fields", "masks", "oracle"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    land = gen_land(cfg)

    samples: list[tuple[str, str]] = []
    total = 0.0
    total_sq = 0.0
    count = 0
    for i in range(cfg.n_samples):
        sample_seed = rng.derive_seed(cfg.seed, f"synth.sample.{i}")
        u0 = gen_field(cfg, sample_seed)
        mask = gen_occlusion(cfg, sample_seed, land)
        obs = Field(np.where(mask.to_bool(), u0.values, 0.0), mask)
        save_grid(out / "fields" / _sample_name(i), obs)
        save_grid(out / "masks" / _sample_name(i), mask)
        save_grid(out / "oracle" / _sample_name(i), u0)
        samples.append((f"fields/{_sample_name(i)}", f"masks/{_sample_name(i)}"))
        vals = u0.values[mask.to_bool()]
        total += float(vals.sum())
        total_sq += float((vals * vals).sum())
        count += vals.size

    mean = total / count
    var = total_sq / count - mean * mean
    if var <= 0.0:
        raise SynthConfigError("degenerate dataset: zero variance over observed pixels")
    manifest = DatasetManifest(
        samples=samples,
        height=cfg.height,
        width=cfg.width,
        mean=mean,
        std=float(np.sqrt(var)),
        root=out,
    )
    save_manifest(out / "manifest.json", manifest)
    return manifest


def load_oracle(root: str | Path, i: int, manifest: DatasetManifest | None = None) -> Field:
    """Load a sealed complete field; standardised with the manifest's
    statistics when one is supplied (matching `load_observation` units)."""
    grid = load_grid(Path(root) / "oracle" / _sample_name(i))
    if not isinstance(grid, Field):
        raise ValueError("oracle file does not contain a field")
    if manifest is None:
        return grid
    return Field.complete((grid.values - manifest.mean) / manifest.std)
