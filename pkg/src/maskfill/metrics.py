"""Evaluation protocol and reconstruction metrics.

Evaluation overlays a mask drawn from a held-out pool onto a sample's
authentic observation mask: the intersection becomes the model input and
the remaining observed pixels (where real values exist) become the
scoring region. Metrics are masked MSE, PSNR, and the cross-boundary
gradient discrepancy (CBGD): the ratio of mean Sobel magnitudes in the
one-pixel bands on either side of the context/generated interface,
where 1 indicates a seamless boundary.

The query-probability heatmap estimates, per observed pixel, the
fraction of an ensemble of partitions that assigns it to the query
region; strictly positive entries everywhere are the empirical signature
of the positivity guarantees exercised elsewhere in the test suite.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import rng
from .grids import Field, Mask, Partition, ShapeMismatchError, atomic_write_bytes, intersect

__all__ = [
    "EvalCase",
    "QueryProbGrid",
    "EmptyRegionError",
    "UndefinedMetricError",
    "masked_mse",
    "psnr",
    "sobel_magnitude",
    "cbgd",
    "build_eval_case",
    "query_prob_heatmap",
    "write_metrics_csv",
    "write_pgm",
]

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


class EmptyRegionError(ValueError):
    """A metric was asked to average over an empty pixel region."""


class UndefinedMetricError(ArithmeticError):
    """The metric is undefined for this input (e.g. zero-gradient field)."""


def masked_mse(pred: Field, truth: Field, region: Mask) -> float:
    """Mean squared difference over region == 1 pixels."""
    if not (pred.shape == truth.shape == region.shape):
        raise ShapeMismatchError("pred, truth and region must share one shape")
    sel = region.to_bool()
    n = int(sel.sum())
    if n == 0:
        raise EmptyRegionError("masked_mse over an empty region")
    diff = pred.values[sel] - truth.values[sel]
    return float(np.mean(diff * diff))


def psnr(mse: float, peak: float) -> float:
    """10 log10(peak^2 / mse); returns +inf for mse == 0.

    ``peak`` is the dynamic range (max - min) of the ground-truth values
    over all evaluated pixels of the evaluation set.
    """
    if peak <= 0.0:
        raise ValueError("peak must be positive")
    if mse < 0.0:
        raise ValueError("mse must be non-negative")
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def sobel_magnitude(f: Field) -> np.ndarray:
    """sqrt(Gx^2 + Gy^2) with the standard 3x3 kernels, replicate padding.

    Missing pixels are pre-filled with the mean of the observed values so
    the convolution sees no holes.
    """
    if f.height < 3 or f.width < 3:
        raise ValueError("sobel_magnitude needs at least a 3x3 field")
    valid = f.validity.to_bool()
    values = f.values
    if not valid.all():
        if not valid.any():
            raise EmptyRegionError("cannot fill a field with no observed values")
        values = np.where(valid, values, values[valid].mean())
    gx = ndimage.correlate(values, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(values, SOBEL_Y, mode="nearest")
    return np.sqrt(gx * gx + gy * gy)


_EIGHT = np.ones((3, 3), dtype=bool)


def cbgd(recon: Field, ctx: Mask, gen_region: Mask) -> float:
    """Cross-boundary gradient discrepancy.

    B_gen holds generated pixels 8-adjacent to the context, B_ctx context
    pixels 8-adjacent to the generated region; the metric is the mean
    Sobel magnitude over B_gen divided by the mean over B_ctx.
    """
    if not (recon.shape == ctx.shape == gen_region.shape):
        raise ShapeMismatchError("recon, ctx and gen_region must share one shape")
    if np.any(ctx.bits & gen_region.bits):
        raise ValueError("ctx and gen_region overlap")
    ctx_b = ctx.to_bool()
    gen_b = gen_region.to_bool()
    band_gen = gen_b & ndimage.binary_dilation(ctx_b, structure=_EIGHT)
    band_ctx = ctx_b & ndimage.binary_dilation(gen_b, structure=_EIGHT)
    if not band_gen.any() or not band_ctx.any():
        raise UndefinedMetricError("empty boundary band")
    grad = sobel_magnitude(recon)
    denom = float(grad[band_ctx].mean())
    if denom < 1e-8:
        raise UndefinedMetricError(f"context-side gradient {denom} below 1e-8")
    return float(grad[band_gen].mean()) / denom


@dataclass(frozen=True)
class EvalCase:
    """One overlay evaluation case.

    m_input = overlay AND m_eval is what the model sees; eval_region =
    m_eval AND NOT m_input is where real values exist for scoring.
    """

    m_eval: Mask
    m_tilde: Mask
    m_input: Mask
    eval_region: Mask

    def __post_init__(self) -> None:
        if np.any(self.m_input.bits > self.m_eval.bits):
            raise ValueError("m_input must be a subset of m_eval")
        if np.any(self.m_input.bits & self.eval_region.bits):
            raise ValueError("m_input and eval_region overlap")
        if np.any((self.m_input.bits | self.eval_region.bits) != self.m_eval.bits):
            raise ValueError("m_input and eval_region must cover m_eval")


def build_eval_case(m_eval: Mask, pool: Sequence[Mask], seed: int, max_tries: int = 100) -> EvalCase:
    """Draw an overlay mask from the pool; redraw while the overlay leaves
    either the input or the scoring region empty."""
    if not pool:
        raise ValueError("empty overlay pool")
    pick = rng.stream(seed, "eval.overlay")
    for _ in range(max_tries):
        m_tilde = pool[int(pick.integers(0, len(pool)))]
        m_input = intersect(m_tilde, m_eval)
        eval_region = Mask(m_eval.bits & (1 - m_input.bits))
        if m_input.count() > 0 and eval_region.count() > 0:
            return EvalCase(m_eval=m_eval, m_tilde=m_tilde, m_input=m_input, eval_region=eval_region)
    raise ValueError(f"no usable overlay after {max_tries} draws")


@dataclass(frozen=True)
class QueryProbGrid:
    """Empirical per-pixel query frequencies over an ensemble of partitions.

    Entries are count / n_ensemble at observed pixels and NaN elsewhere.
    """

    freq: np.ndarray
    n_ensemble: int
    valid: Mask

    def __post_init__(self) -> None:
        observed = self.valid.to_bool()
        vals = self.freq[observed]
        if vals.size and (vals.min() < 0.0 or vals.max() > 1.0):
            raise ValueError("query frequencies outside [0, 1]")

    def min_observed(self) -> float:
        observed = self.valid.to_bool()
        if not observed.any():
            raise EmptyRegionError("no observed pixels")
        return float(self.freq[observed].min())


def query_prob_heatmap(
    mask: Mask,
    partition_gen: Callable[[int], Partition],
    n_ens: int,
    seed: int,
) -> QueryProbGrid:
    """Fraction of ensemble partitions assigning each observed pixel to qry."""
    if n_ens < 1:
        raise ValueError("n_ens must be >= 1")
    counts = np.zeros(mask.shape, dtype=np.int64)
    for k in range(n_ens):
        part = partition_gen(rng.derive_seed(seed, f"heatmap.{k}"))
        if part.parent.shape != mask.shape:
            raise ShapeMismatchError("partition shape differs from mask shape")
        counts += part.qry.bits
    freq = np.where(mask.to_bool(), counts / float(n_ens), np.nan)
    return QueryProbGrid(freq=freq, n_ensemble=n_ens, valid=mask)


def evaluate_overlay(
    observations: Sequence[Field],
    impute_fn: Callable[[Field, Mask, int], Field],
    seed: int,
    land: Mask | None = None,
) -> list[dict]:
    """Run the overlay protocol over a set of observed fields.

    Each sample's authentic mask is degraded by an overlay drawn from the
    other samples' masks; ``impute_fn(input_field, input_mask, seed)``
    reconstructs from the degraded input, and metrics are computed on the
    withheld observed pixels. The PSNR peak is the ground-truth dynamic
    range over all evaluated pixels of the whole set. CBGD compares the
    context band against the generated complement (minus land); samples
    where it is undefined record NaN.
    """
    if len(observations) < 2:
        raise ValueError("overlay evaluation needs at least two samples")
    masks = [obs.validity for obs in observations]
    partial: list[dict] = []
    lo, hi = math.inf, -math.inf
    for i, obs in enumerate(observations):
        pool = [m for j, m in enumerate(masks) if j != i]
        case = build_eval_case(obs.validity, pool, rng.derive_seed(seed, f"case.{i}"))
        input_field = Field(
            np.where(case.m_input.to_bool(), obs.values, 0.0), case.m_input
        )
        recon = impute_fn(input_field, case.m_input, rng.derive_seed(seed, f"impute.{i}"))
        mse = masked_mse(recon, obs, case.eval_region)
        gen_bits = 1 - case.m_input.bits
        if land is not None:
            gen_bits = gen_bits & (1 - land.bits)
        try:
            boundary = cbgd(recon, case.m_input, Mask(gen_bits))
        except (UndefinedMetricError, EmptyRegionError):
            boundary = math.nan
        truth_vals = obs.values[case.eval_region.to_bool()]
        lo = min(lo, float(truth_vals.min()))
        hi = max(hi, float(truth_vals.max()))
        partial.append(
            {
                "sample_id": i,
                "mse": mse,
                "cbgd": boundary,
                "n_eval_pixels": case.eval_region.count(),
            }
        )
    peak = hi - lo
    rows = []
    for row in partial:
        value = math.inf if row["mse"] == 0.0 else (math.nan if peak <= 0.0 else psnr(row["mse"], peak))
        rows.append({**row, "psnr": value})
    return rows


def oracle_region_mse(recon: Field, oracle: Field, observed: Mask, land: Mask) -> float:
    """MSE against the sealed complete field over truly-missing, non-land
    pixels (only meaningful on synthetic data where the oracle exists)."""
    region = Mask((1 - observed.bits) & (1 - land.bits))
    return masked_mse(recon, oracle, region)


def write_metrics_csv(path: str | Path, rows: Sequence[dict]) -> None:
    """Rows: sample_id, mse, psnr, cbgd, n_eval_pixels (inf/nan as text)."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["sample_id", "mse", "psnr", "cbgd", "n_eval_pixels"])
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def write_pgm(path: str | Path, grid01: np.ndarray) -> None:
    """Plain-text P2 PGM, 8-bit quantisation of values in [0, 1].

    NaN entries (absent pixels) are written as 0.
    """
    arr = np.nan_to_num(np.asarray(grid01, dtype=np.float64), nan=0.0)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("PGM input must lie in [0, 1]")
    quant = np.rint(arr * 255.0).astype(int)
    lines = ["P2", f"{arr.shape[1]} {arr.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in quant]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))
