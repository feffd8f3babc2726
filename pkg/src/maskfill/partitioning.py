"""Context-query partition strategies and exact positivity verifiers.

Strategies (all behind :func:`partition`):

* ``PixelLevel`` -- independent Bernoulli draws per observed pixel for
  context and query; overlap permitted.
* ``BlockWise`` -- sample blocks of a d x d grid without replacement for
  each side, intersected with the observed mask; overlap permitted.
* ``SaliencyDriven`` -- sort observed pixels by Sobel magnitude, take
  half the context budget from the high-gradient half and half from the
  low-gradient half; the remaining observed pixels become the query.
* ``Empirical`` -- intersect with a mask drawn from a pool of real masks.
* ``UnconditionalPrior`` -- intersect with an unconditional prior sample.
* ``Guided`` -- intersect with an observation-aligned guided sample.

The verifiers turn the two positivity statements into executable checks
on explicit finite mask distributions: enumerate every pair (or every
constrained mask), compute context and query probabilities exactly, test
the coverage assumption per (context, dimension), and assert the
conditional query probability is strictly positive whenever the
assumption holds. Probabilities may be floats or ``fractions.Fraction``
for an exact rational cross-check.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from . import rng
from .grids import Field, Mask, Partition, make_partition
from .guided import GuidanceConfig, guided_sample
from .mask_prior import PriorModel, sample_unconditional
from .metrics import sobel_magnitude

__all__ = [
    "PixelLevel",
    "BlockWise",
    "SaliencyDriven",
    "Empirical",
    "UnconditionalPrior",
    "Guided",
    "PartitionStrategy",
    "partition",
    "DiscreteMaskDistribution",
    "PositivityRecord",
    "TheoremReport",
    "CampaignSummary",
    "verify_theorem1",
    "verify_theorem2",
    "randomized_theorem_campaign",
]


# ---------------------------------------------------------------------------
# Strategies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PixelLevel:
    r_ctx: float = 0.3
    r_qry: float = 0.3

    def __post_init__(self) -> None:
        _check_ratio("r_ctx", self.r_ctx)
        _check_ratio("r_qry", self.r_qry)


@dataclass(frozen=True)
class BlockWise:
    grid_d: int = 8
    r_ctx: float = 0.5
    r_qry: float = 0.5

    def __post_init__(self) -> None:
        if self.grid_d < 1:
            raise ValueError("grid_d must be >= 1")
        _check_ratio("r_ctx", self.r_ctx)
        _check_ratio("r_qry", self.r_qry)


@dataclass(frozen=True)
class SaliencyDriven:
    r_ctx: float = 0.3

    def __post_init__(self) -> None:
        _check_ratio("r_ctx", self.r_ctx)


@dataclass(frozen=True)
class Empirical:
    pool: tuple[Mask, ...]

    def __post_init__(self) -> None:
        if not self.pool:
            raise ValueError("empirical strategy needs a non-empty mask pool")


@dataclass(frozen=True)
class UnconditionalPrior:
    prior: PriorModel


@dataclass(frozen=True)
class Guided:
    cfg: GuidanceConfig = GuidanceConfig()


PartitionStrategy = PixelLevel | BlockWise | SaliencyDriven | Empirical | UnconditionalPrior | Guided


def _check_ratio(name: str, value: float) -> None:
    if not 0.0 < value <= 1.0:
        raise ValueError(f"{name}={value} outside (0, 1]")


def _block_mask(mask: Mask, grid_d: int, chosen: np.ndarray) -> np.ndarray:
    rows = np.array_split(np.arange(mask.height), grid_d)
    cols = np.array_split(np.arange(mask.width), grid_d)
    out = np.zeros(mask.shape, dtype=np.uint8)
    for flat in chosen:
        r, c = divmod(int(flat), grid_d)
        if rows[r].size and cols[c].size:
            out[np.ix_(rows[r], cols[c])] = 1
    return out & mask.bits


def partition(
    strategy: PartitionStrategy,
    mask: Mask,
    fld: Field | None = None,
    seed: int = 0,
    *,
    prior: PriorModel | None = None,
) -> Partition:
    """Split an observed mask into context and query per the strategy.

    ``fld`` is required for the saliency strategy; ``prior`` for the
    guided strategy (the unconditional variant carries its own handle).
    """
    if mask.count() == 0:
        raise ValueError("cannot partition an empty observed mask")
    gen = rng.stream(seed, "partition")

    if isinstance(strategy, PixelLevel):
        u = gen.uniform(size=mask.shape)
        v = gen.uniform(size=mask.shape)
        ctx = Mask((u < strategy.r_ctx).astype(np.uint8) & mask.bits)
        qry = Mask((v < strategy.r_qry).astype(np.uint8) & mask.bits)
        return Partition(ctx=ctx, qry=qry, parent=mask, disjoint=False)

    if isinstance(strategy, BlockWise):
        n_blocks = strategy.grid_d**2
        n_ctx = int(strategy.r_ctx * n_blocks)
        n_qry = int(strategy.r_qry * n_blocks)
        ctx_blocks = gen.choice(n_blocks, size=n_ctx, replace=False)
        qry_blocks = gen.choice(n_blocks, size=n_qry, replace=False)
        ctx = Mask(_block_mask(mask, strategy.grid_d, ctx_blocks))
        qry = Mask(_block_mask(mask, strategy.grid_d, qry_blocks))
        return Partition(ctx=ctx, qry=qry, parent=mask, disjoint=False)

    if isinstance(strategy, SaliencyDriven):
        if fld is None:
            raise ValueError("saliency strategy requires the observed field")
        grad = sobel_magnitude(fld)
        observed = np.flatnonzero(mask.bits.ravel())
        # descending by gradient magnitude, flat index breaks ties
        order = observed[np.lexsort((observed, -grad.ravel()[observed]))]
        n_obs = order.size
        n_ctx = int(strategy.r_ctx * n_obs)
        n_half = n_ctx // 2
        high, low = order[: n_obs // 2], order[n_obs // 2 :]
        picked = np.concatenate(
            [
                gen.choice(high, size=n_half, replace=False),
                gen.choice(low, size=n_ctx - n_half, replace=False),
            ]
        )
        ctx_bits = np.zeros(mask.height * mask.width, dtype=np.uint8)
        ctx_bits[picked.astype(np.intp)] = 1
        ctx_bits = ctx_bits.reshape(mask.shape)
        qry_bits = mask.bits & (1 - ctx_bits)
        return Partition(ctx=Mask(ctx_bits), qry=Mask(qry_bits), parent=mask, disjoint=True)

    if isinstance(strategy, Empirical):
        pool_mask = strategy.pool[int(gen.integers(0, len(strategy.pool)))]
        return make_partition(mask, pool_mask)

    if isinstance(strategy, UnconditionalPrior):
        handle = strategy.prior
        sampled = sample_unconditional(
            handle.params,
            handle.codec,
            mask.shape,
            handle.n_steps,
            rng.derive_seed(seed, "partition.prior"),
        )
        return make_partition(mask, sampled)

    if isinstance(strategy, Guided):
        if prior is None:
            raise ValueError("guided strategy requires a trained prior")
        cfg = replace(strategy.cfg, seed=rng.derive_seed(seed, "partition.guided"))
        sampled = guided_sample(prior.params, prior.codec, mask, cfg)
        return make_partition(mask, sampled)

    raise TypeError(f"unknown partition strategy {type(strategy).__name__}")


# ---------------------------------------------------------------------------
# Exact verification of the positivity theorems
# ---------------------------------------------------------------------------

MAX_ENUM_DIM = 12


@dataclass(frozen=True)
class DiscreteMaskDistribution:
    """Explicit distribution over d-bit masks (d <= 12).

    Probabilities may be floats or Fractions; they must be positive,
    attached to distinct masks, and sum to 1 within 1e-12.
    """

    d: int
    support: tuple[tuple[int, ...], ...]
    probs: tuple

    def __post_init__(self) -> None:
        if not 1 <= self.d <= MAX_ENUM_DIM:
            raise ValueError(f"d={self.d} outside [1, {MAX_ENUM_DIM}]")
        if len(self.support) != len(self.probs) or not self.support:
            raise ValueError("support and probs must be non-empty and aligned")
        seen = set()
        for bits in self.support:
            if len(bits) != self.d or any(b not in (0, 1) for b in bits):
                raise ValueError(f"bad support element {bits}")
            if bits in seen:
                raise ValueError(f"duplicate support element {bits}")
            seen.add(bits)
        if any(p <= 0 for p in self.probs):
            raise ValueError("probabilities must be strictly positive")
        total = sum(self.probs)
        if abs(float(total) - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {float(total)}, not 1")

    @classmethod
    def from_json(cls, doc: dict) -> "DiscreteMaskDistribution":
        support = tuple(tuple(int(ch) for ch in s) for s in doc["support"])
        return cls(d=int(doc["d"]), support=support, probs=tuple(float(p) for p in doc["probs"]))

    def to_json(self) -> dict:
        return {
            "d": self.d,
            "support": ["".join(str(b) for b in bits) for bits in self.support],
            "probs": [float(p) for p in self.probs],
        }

    def as_ints(self) -> list[int]:
        # bit i of the integer encodes dimension i
        return [sum(b << i for i, b in enumerate(bits)) for bits in self.support]


def _int_to_bits(value: int, d: int) -> tuple[int, ...]:
    return tuple((value >> i) & 1 for i in range(d))


@dataclass(frozen=True)
class PositivityRecord:
    """One (context, dimension) or (constraint, dimension) check."""

    context: tuple[int, ...]
    dim: int
    assumption_held: bool
    probability: float | None
    witness: tuple[tuple[int, ...], ...] | None


@dataclass(frozen=True)
class TheoremReport:
    theorem: str
    n_cases: int
    n_assumption_held: int
    records: tuple[PositivityRecord, ...]
    violations: tuple[PositivityRecord, ...]

    def to_json(self) -> dict:
        return {
            "theorem": self.theorem,
            "n_cases": self.n_cases,
            "n_assumption_held": self.n_assumption_held,
            "n_violations": len(self.violations),
            "records": [asdict(r) for r in self.records],
        }


def verify_theorem1(dist: DiscreteMaskDistribution) -> tuple[TheoremReport, dict]:
    """Enumerate all independent support pairs, compute P(ctx = m) and
    P(qry_i = 1 | ctx = m) exactly, check the intersection-coverage
    assumption per (m, i), and assert positivity wherever it holds.

    Returns the report plus a mapping m -> (context probability,
    {i: conditional query probability}).
    """
    d = dist.d
    ints = dist.as_ints()
    probs = list(dist.probs)
    zero = 0 * probs[0]  # additive identity of whichever number type is in use

    ctx_prob: dict[int, object] = {}
    joint: dict[tuple[int, int], object] = {}
    witness: dict[tuple[int, int], tuple[int, int]] = {}
    for a, pa in zip(ints, probs):
        for b, pb in zip(ints, probs):
            m = a & b
            p = pa * pb
            ctx_prob[m] = ctx_prob.get(m, zero) + p
            # for an unobserved dimension of m, qry_i reduces to bit i of the first mask
            extra = a & ~m
            while extra:
                low = extra & -extra
                i = low.bit_length() - 1
                key = (m, i)
                joint[key] = joint.get(key, zero) + p
                witness.setdefault(key, (a, b))
                extra ^= low

    records: list[PositivityRecord] = []
    violations: list[PositivityRecord] = []
    held = 0
    conditionals: dict[tuple[int, ...], tuple[object, dict[int, object]]] = {}
    for m, pm in sorted(ctx_prob.items()):
        conds: dict[int, object] = {}
        for i in range(d):
            if (m >> i) & 1:
                continue
            key = (m, i)
            assumption = key in joint
            cond = joint[key] / pm if assumption else None
            if assumption:
                held += 1
                conds[i] = cond
            wit = None
            if assumption:
                a, b = witness[key]
                wit = (_int_to_bits(a, d), _int_to_bits(b, d))
            rec = PositivityRecord(
                context=_int_to_bits(m, d),
                dim=i,
                assumption_held=assumption,
                probability=None if cond is None else float(cond),
                witness=wit,
            )
            records.append(rec)
            if assumption and not cond > 0:
                violations.append(rec)
        conditionals[_int_to_bits(m, d)] = (pm, conds)

    report = TheoremReport(
        theorem="mask-intersection positivity",
        n_cases=len(records),
        n_assumption_held=held,
        records=tuple(records),
        violations=tuple(violations),
    )
    return report, conditionals


def verify_theorem2(dist: DiscreteMaskDistribution, mask_bits: Sequence[int], k: int) -> tuple[TheoremReport, dict]:
    """Restrict the distribution to masks sharing exactly k pixels with the
    observation, renormalise, and check P(qry_i = 1 | C_k) = P(mhat_i = 0 |
    C_k) > 0 for every observed dimension where the constrained-coverage
    assumption holds. Assumption failures flag a deterministic collapse.
    """
    d = dist.d
    if len(mask_bits) != d:
        raise ValueError("observation mask dimension mismatch")
    m_int = sum((1 if b else 0) << i for i, b in enumerate(mask_bits))
    m_count = bin(m_int).count("1")
    if not 0 < k < m_count:
        raise ValueError(f"k={k} outside (0, |M|={m_count})")

    pairs = [
        (v, p) for v, p in zip(dist.as_ints(), dist.probs) if bin(v & m_int).count("1") == k
    ]
    if not pairs:
        raise ValueError("empty constrained support")
    total = sum(p for _, p in pairs)
    zero = 0 * total

    records: list[PositivityRecord] = []
    violations: list[PositivityRecord] = []
    held = 0
    conditionals: dict[int, object] = {}
    for i in range(d):
        if not (m_int >> i) & 1:
            continue
        mass = zero
        wit = None
        for v, p in pairs:
            if not (v >> i) & 1:
                mass = mass + p
                if wit is None:
                    wit = (_int_to_bits(v, d),)
        assumption = wit is not None
        cond = mass / total if assumption else None
        if assumption:
            held += 1
            conditionals[i] = cond
        rec = PositivityRecord(
            context=tuple(mask_bits),
            dim=i,
            assumption_held=assumption,
            probability=None if cond is None else float(cond),
            witness=wit,
        )
        records.append(rec)
        if assumption and not cond > 0:
            violations.append(rec)

    report = TheoremReport(
        theorem="ratio-guided positivity",
        n_cases=len(records),
        n_assumption_held=held,
        records=tuple(records),
        violations=tuple(violations),
    )
    return report, conditionals


@dataclass(frozen=True)
class CampaignSummary:
    n_trials: int
    t1_cases: int = 0
    t1_assumption_held: int = 0
    t1_violations: int = 0
    t2_cases: int = 0
    t2_assumption_held: int = 0
    t2_violations: int = 0
    t2_skipped_empty_support: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def randomized_theorem_campaign(n_trials: int, d_max: int, seed: int) -> CampaignSummary:
    """Random supports and probabilities through both verifiers; the
    expected violation count is zero whenever the assumptions hold."""
    if d_max > MAX_ENUM_DIM:
        raise ValueError(f"d_max={d_max} exceeds enumeration bound {MAX_ENUM_DIM}")
    if n_trials == 0:
        return CampaignSummary(n_trials=0)
    gen = rng.stream(seed, "campaign")
    totals = {k: 0 for k in ("t1c", "t1h", "t1v", "t2c", "t2h", "t2v", "skip")}
    for _ in range(n_trials):
        d = int(gen.integers(2, d_max + 1))
        n_masks = int(gen.integers(1, min(2**d, 16) + 1))
        values = gen.choice(2**d, size=n_masks, replace=False)
        raw = gen.uniform(0.05, 1.0, size=n_masks)
        weights = raw / raw.sum()
        support = tuple(_int_to_bits(int(v), d) for v in values)
        dist = DiscreteMaskDistribution(d=d, support=support, probs=tuple(float(x) for x in weights))

        report1, _ = verify_theorem1(dist)
        totals["t1c"] += report1.n_cases
        totals["t1h"] += report1.n_assumption_held
        totals["t1v"] += len(report1.violations)

        m_int = int(gen.integers(1, 2**d))
        while bin(m_int).count("1") < 2:
            m_int = int(gen.integers(1, 2**d))
        k = int(gen.integers(1, bin(m_int).count("1")))
        try:
            report2, _ = verify_theorem2(dist, _int_to_bits(m_int, d), k)
        except ValueError:
            totals["skip"] += 1
        else:
            totals["t2c"] += report2.n_cases
            totals["t2h"] += report2.n_assumption_held
            totals["t2v"] += len(report2.violations)

    return CampaignSummary(
        n_trials=n_trials,
        t1_cases=totals["t1c"],
        t1_assumption_held=totals["t1h"],
        t1_violations=totals["t1v"],
        t2_cases=totals["t2c"],
        t2_assumption_held=totals["t2h"],
        t2_violations=totals["t2v"],
        t2_skipped_empty_support=totals["skip"],
    )
