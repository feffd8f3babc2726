"""Core grid types (masks, fields, partitions) and the GRD file format.

A :class:`Mask` is an H x W binary grid marking valid observations. A
:class:`Field` is an H x W float64 grid paired with a validity mask;
values at invalid positions are always stored as 0.0 so serialisation is
deterministic. A :class:`Partition` splits an observed mask into a
context part (shown to a model) and a query part (withheld as targets).

GRD binary format (little-endian):

    magic   4 bytes  b"OAMP"
    version u16      1
    dtype   u8       0 = u8 mask, 1 = f64 field
    height  u32
    width   u32
    payload row-major (uint8 bits or float64 values)

Dataset manifests are UTF-8 JSON files with keys "samples" (list of
[field_path, mask_path] pairs, relative to the manifest), "height",
"width", "mean", "std". The mean/std are normalisation statistics over
all valid pixels; observations are standardised on load.

All grid values are immutable after construction and safe to share
across threads.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "MAX_SIDE",
    "Mask",
    "Field",
    "Partition",
    "DatasetManifest",
    "GridFormatError",
    "ShapeMismatchError",
    "intersect",
    "union",
    "complement",
    "make_partition",
    "land_mask",
    "save_grid",
    "load_grid",
    "save_manifest",
    "load_manifest",
    "atomic_write_bytes",
]

MAX_SIDE = 4096  # desk-scale bound; keeps pixel counts far from overflow

GRD_MAGIC = b"OAMP"
GRD_VERSION = 1
GRD_HEADER = struct.Struct("<4sHBII")
DTYPE_MASK = 0
DTYPE_FIELD = 1


class GridFormatError(ValueError):
    """Raised for malformed GRD or manifest files."""


class ShapeMismatchError(ValueError):
    """Raised when two grids of different dimensions are combined."""


def _check_dims(height: int, width: int) -> None:
    if not (1 <= height <= MAX_SIDE and 1 <= width <= MAX_SIDE):
        raise ValueError(f"grid dimensions {height}x{width} outside [1, {MAX_SIDE}]")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Mask:
    """H x W binary grid; bits[i, j] == 1 marks a valid observation."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        if bits.ndim != 2:
            raise ValueError("mask bits must be a 2-d array")
        _check_dims(*bits.shape)
        if not np.all((bits == 0) | (bits == 1)):
            raise ValueError("mask bits must be exactly 0 or 1")
        object.__setattr__(self, "bits", _freeze(bits))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def count(self) -> int:
        """Number of set bits."""
        return int(self.bits.sum())

    def to_bool(self) -> np.ndarray:
        return self.bits.astype(bool)

    @classmethod
    def zeros(cls, height: int, width: int) -> "Mask":
        return cls(np.zeros((height, width), dtype=np.uint8))

    @classmethod
    def ones(cls, height: int, width: int) -> "Mask":
        return cls(np.ones((height, width), dtype=np.uint8))

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Mask":
        """Build from any array-like; nonzero entries become 1."""
        return cls((np.asarray(arr) != 0).astype(np.uint8))


@dataclass(frozen=True)
class Field:
    """H x W float64 grid with a validity mask of identical shape.

    Values at invalid positions are normalised to exactly 0.0; values at
    valid positions must be finite.
    """

    values: np.ndarray
    validity: Mask

    def __post_init__(self) -> None:
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("field values must be a 2-d array")
        _check_dims(*values.shape)
        if values.shape != self.validity.shape:
            raise ShapeMismatchError(
                f"field shape {values.shape} != validity shape {self.validity.shape}"
            )
        valid = self.validity.to_bool()
        if not np.all(np.isfinite(values[valid])):
            raise ValueError("non-finite value at a valid position")
        values = np.where(valid, values, 0.0)
        object.__setattr__(self, "values", _freeze(values))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @classmethod
    def complete(cls, values: np.ndarray) -> "Field":
        """Field with every pixel valid."""
        values = np.asarray(values, dtype=np.float64)
        return cls(values, Mask.ones(*values.shape))


@dataclass(frozen=True)
class Partition:
    """Context/query split of an observed parent mask.

    ``disjoint`` records whether the generating strategy guarantees
    ctx AND qry == 0 and ctx OR qry == parent (true for intersection
    style partitions; pixel- and block-level draws may overlap).
    """

    ctx: Mask
    qry: Mask
    parent: Mask
    disjoint: bool = True

    def __post_init__(self) -> None:
        if not (self.ctx.shape == self.qry.shape == self.parent.shape):
            raise ShapeMismatchError("partition masks must share one shape")
        parent = self.parent.bits
        if np.any(self.ctx.bits > parent) or np.any(self.qry.bits > parent):
            raise ValueError("ctx and qry must be subsets of parent")
        if self.disjoint:
            if np.any(self.ctx.bits & self.qry.bits):
                raise ValueError("disjoint partition has overlapping ctx/qry")
            if np.any((self.ctx.bits | self.qry.bits) != parent):
                raise ValueError("disjoint partition must cover parent exactly")


def _same_shape(a, b) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")


def intersect(a: Mask, b: Mask) -> Mask:
    """Elementwise AND of two masks."""
    _same_shape(a, b)
    return Mask(a.bits & b.bits)


def union(a: Mask, b: Mask) -> Mask:
    """Elementwise OR of two masks."""
    _same_shape(a, b)
    return Mask(a.bits | b.bits)


def complement(a: Mask) -> Mask:
    """Elementwise NOT of a mask."""
    return Mask(1 - a.bits)


def make_partition(observed: Mask, generated: Mask) -> Partition:
    """Intersection partition: ctx = generated AND observed, qry = rest.

    The query mask is the observed remainder observed AND NOT ctx, so the
    result is always disjoint and covers the observed mask exactly.
    """
    _same_shape(observed, generated)
    ctx = intersect(generated, observed)
    qry = Mask(observed.bits & (1 - ctx.bits))
    return Partition(ctx=ctx, qry=qry, parent=observed, disjoint=True)


# ---------------------------------------------------------------------------
# GRD binary I/O
# ---------------------------------------------------------------------------


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Write bytes via a temp file + rename so readers never see partial data."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def save_grid(path: str | Path, grid: Mask | Field) -> None:
    """Serialise a mask or field to a GRD file (byte-exact round trip)."""
    if isinstance(grid, Mask):
        dtype, payload = DTYPE_MASK, grid.bits.tobytes()
    elif isinstance(grid, Field):
        dtype, payload = DTYPE_FIELD, grid.values.astype("<f8").tobytes()
    else:
        raise TypeError(f"cannot save object of type {type(grid).__name__}")
    header = GRD_HEADER.pack(GRD_MAGIC, GRD_VERSION, dtype, grid.height, grid.width)
    atomic_write_bytes(path, header + payload)


def load_grid(path: str | Path) -> Mask | Field:
    """Load a GRD file. Fields are returned with an all-ones validity mask;
    pair with the companion mask file (see :class:`DatasetManifest`) to
    recover the observation structure."""
    raw = Path(path).read_bytes()
    if len(raw) < GRD_HEADER.size:
        raise GridFormatError(f"{path}: truncated header")
    magic, version, dtype, height, width = GRD_HEADER.unpack_from(raw)
    if magic != GRD_MAGIC:
        raise GridFormatError(f"{path}: bad magic {magic!r}")
    if version != GRD_VERSION:
        raise GridFormatError(f"{path}: unsupported version {version}")
    payload = raw[GRD_HEADER.size :]
    if dtype == DTYPE_MASK:
        expected = height * width
        if len(payload) != expected:
            raise GridFormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
        bits = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
        return Mask(bits.copy())
    if dtype == DTYPE_FIELD:
        expected = height * width * 8
        if len(payload) != expected:
            raise GridFormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
        values = np.frombuffer(payload, dtype="<f8").reshape(height, width)
        return Field.complete(values.copy())
    raise GridFormatError(f"{path}: unknown dtype code {dtype}")


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    """Index of (field, mask) GRD pairs plus normalisation statistics.

    ``mean``/``std`` are taken over all valid pixels of the whole dataset;
    :meth:`load_observation` standardises values on load. The derived land
    mask uses the inverted convention: bit 1 marks pixels that were never
    observed in any sample.
    """

    samples: list[tuple[str, str]]
    height: int
    width: int
    mean: float
    std: float
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.samples)

    def field_path(self, i: int) -> Path:
        return self.root / self.samples[i][0]

    def mask_path(self, i: int) -> Path:
        return self.root / self.samples[i][1]

    def load_mask(self, i: int) -> Mask:
        grid = load_grid(self.mask_path(i))
        if not isinstance(grid, Mask):
            raise GridFormatError(f"{self.mask_path(i)}: expected a mask grid")
        self._check_shape(grid)
        return grid

    def load_observation(self, i: int) -> Field:
        """Load sample i as a standardised field paired with its mask."""
        grid = load_grid(self.field_path(i))
        if not isinstance(grid, Field):
            raise GridFormatError(f"{self.field_path(i)}: expected a field grid")
        self._check_shape(grid)
        mask = self.load_mask(i)
        valid = mask.to_bool()
        values = np.where(valid, (grid.values - self.mean) / self.std, 0.0)
        return Field(values, mask)

    def load_all_masks(self) -> list[Mask]:
        return [self.load_mask(i) for i in range(len(self))]

    def _check_shape(self, grid: Mask | Field) -> None:
        if grid.shape != (self.height, self.width):
            raise GridFormatError(
                f"sample shape {grid.shape} != manifest shape {(self.height, self.width)}"
            )


def land_mask(manifest: DatasetManifest) -> Mask:
    """Bit 1 exactly where no sample ever observes the pixel."""
    if len(manifest) == 0:
        raise ValueError("empty manifest")
    seen = np.zeros((manifest.height, manifest.width), dtype=np.uint8)
    for i in range(len(manifest)):
        seen |= manifest.load_mask(i).bits
    return Mask(1 - seen)


def save_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    doc = {
        "samples": [list(pair) for pair in manifest.samples],
        "height": manifest.height,
        "width": manifest.width,
        "mean": manifest.mean,
        "std": manifest.std,
    }
    atomic_write_bytes(path, json.dumps(doc, indent=2).encode("utf-8"))


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise GridFormatError(f"{path}: invalid manifest JSON: {exc}") from exc
    try:
        samples = [(str(f), str(m)) for f, m in doc["samples"]]
        manifest = DatasetManifest(
            samples=samples,
            height=int(doc["height"]),
            width=int(doc["width"]),
            mean=float(doc["mean"]),
            std=float(doc["std"]),
            root=path.parent,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise GridFormatError(f"{path}: malformed manifest: {exc}") from exc
    _check_dims(manifest.height, manifest.width)
    return manifest
