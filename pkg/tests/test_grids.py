import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskfill.grids import (
    DatasetManifest,
    Field,
    GridFormatError,
    Mask,
    Partition,
    ShapeMismatchError,
    complement,
    intersect,
    land_mask,
    load_grid,
    load_manifest,
    make_partition,
    save_grid,
    save_manifest,
    union,
)


def mask_from_rows(*rows) -> Mask:
    return Mask(np.array(rows, dtype=np.uint8))


@st.composite
def masks(draw, max_side=6):
    h = draw(st.integers(1, max_side))
    w = draw(st.integers(1, max_side))
    bits = draw(st.lists(st.integers(0, 1), min_size=h * w, max_size=h * w))
    return Mask(np.array(bits, dtype=np.uint8).reshape(h, w))


@st.composite
def mask_pairs(draw, max_side=6):
    a = draw(masks(max_side))
    bits = draw(st.lists(st.integers(0, 1), min_size=a.height * a.width, max_size=a.height * a.width))
    return a, Mask(np.array(bits, dtype=np.uint8).reshape(a.shape))


class TestMask:
    def test_rejects_non_binary(self):
        with pytest.raises(ValueError, match="0 or 1"):
            Mask(np.array([[0, 2]], dtype=np.uint8))

    def test_rejects_oversize(self):
        with pytest.raises(ValueError, match="outside"):
            Mask.zeros(5000, 4)

    def test_immutable(self):
        m = Mask.ones(2, 2)
        with pytest.raises(ValueError):
            m.bits[0, 0] = 0


class TestField:
    def test_zeroes_invalid_positions(self):
        f = Field(np.array([[1.5, 2.5]]), mask_from_rows([1, 0]))
        assert f.values[0, 1] == 0.0
        assert f.values[0, 0] == 1.5

    def test_rejects_nan_at_valid(self):
        with pytest.raises(ValueError, match="non-finite"):
            Field(np.array([[np.nan, 0.0]]), mask_from_rows([1, 0]))

    def test_nan_at_invalid_is_stored_as_zero(self):
        f = Field(np.array([[np.nan, 1.0]]), mask_from_rows([0, 1]))
        assert f.values[0, 0] == 0.0


class TestIntersect:
    def test_identity_with_ones(self):
        m = mask_from_rows([1, 0], [0, 1])
        assert np.array_equal(intersect(Mask.ones(2, 2), m).bits, m.bits)

    def test_annihilator_with_zeros(self):
        m = mask_from_rows([1, 0], [0, 1])
        assert intersect(Mask.zeros(2, 2), m).count() == 0

    def test_elementwise_and(self):
        a = mask_from_rows([1, 1, 0, 0])
        b = mask_from_rows([1, 0, 1, 0])
        assert np.array_equal(intersect(a, b).bits, np.array([[1, 0, 0, 0]], dtype=np.uint8))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            intersect(Mask.ones(2, 2), Mask.ones(2, 3))

    @given(mask_pairs())
    @settings(max_examples=50, deadline=None)
    def test_commutative(self, pair):
        a, b = pair
        assert np.array_equal(intersect(a, b).bits, intersect(b, a).bits)

    @given(mask_pairs())
    @settings(max_examples=50, deadline=None)
    def test_idempotent_and_associative(self, pair):
        a, b = pair
        assert np.array_equal(intersect(a, a).bits, a.bits)
        c = complement(a)
        left = intersect(intersect(a, b), c)
        right = intersect(a, intersect(b, c))
        assert np.array_equal(left.bits, right.bits)


class TestMakePartition:
    def test_all_ones_generated(self):
        observed = mask_from_rows([1, 0, 1, 1])
        part = make_partition(observed, Mask.ones(1, 4))
        assert np.array_equal(part.ctx.bits, observed.bits)
        assert part.qry.count() == 0

    def test_all_zeros_generated(self):
        observed = mask_from_rows([1, 0, 1, 1])
        part = make_partition(observed, Mask.zeros(1, 4))
        assert part.ctx.count() == 0
        assert np.array_equal(part.qry.bits, observed.bits)

    def test_hand_case(self):
        observed = mask_from_rows([1, 1, 1, 0])
        generated = mask_from_rows([1, 0, 1, 1])
        part = make_partition(observed, generated)
        assert np.array_equal(part.ctx.bits, np.array([[1, 0, 1, 0]], dtype=np.uint8))
        assert np.array_equal(part.qry.bits, np.array([[0, 1, 0, 0]], dtype=np.uint8))

    @given(mask_pairs())
    @settings(max_examples=100, deadline=None)
    def test_disjoint_cover_identities(self, pair):
        observed, generated = pair
        part = make_partition(observed, generated)
        assert not np.any(part.ctx.bits & part.qry.bits)
        assert np.array_equal(part.ctx.bits | part.qry.bits, observed.bits)

    def test_partition_validation(self):
        with pytest.raises(ValueError, match="subset"):
            Partition(ctx=Mask.ones(1, 2), qry=Mask.zeros(1, 2), parent=Mask.zeros(1, 2))


class TestLandMask:
    def test_single_sample_is_complement(self, tmp_path):
        m = mask_from_rows([1, 0, 1])
        manifest = _write_dataset(tmp_path, [m])
        assert np.array_equal(land_mask(manifest).bits, complement(m).bits)

    def test_full_coverage_means_no_land(self, tmp_path):
        m = mask_from_rows([1, 0, 1])
        manifest = _write_dataset(tmp_path, [m, complement(m)])
        assert land_mask(manifest).count() == 0

    def test_column_case(self, tmp_path):
        manifest = _write_dataset(tmp_path, [mask_from_rows([1, 0, 0]), mask_from_rows([1, 1, 0])])
        assert np.array_equal(land_mask(manifest).bits, np.array([[0, 0, 1]], dtype=np.uint8))

    def test_empty_manifest_rejected(self, tmp_path):
        manifest = DatasetManifest(samples=[], height=1, width=3, mean=0.0, std=1.0, root=tmp_path)
        with pytest.raises(ValueError, match="empty"):
            land_mask(manifest)


def _write_dataset(root, mask_list, values=None):
    samples = []
    for i, m in enumerate(mask_list):
        vals = values[i] if values is not None else np.zeros(m.shape)
        save_grid(root / f"f{i}.grd", Field(vals, m))
        save_grid(root / f"m{i}.grd", m)
        samples.append((f"f{i}.grd", f"m{i}.grd"))
    h, w = mask_list[0].shape
    return DatasetManifest(samples=samples, height=h, width=w, mean=0.0, std=1.0, root=root)


class TestGrdFormat:
    def test_mask_round_trip(self, tmp_path):
        m = mask_from_rows([1, 0, 1], [0, 1, 1])
        save_grid(tmp_path / "m.grd", m)
        loaded = load_grid(tmp_path / "m.grd")
        assert isinstance(loaded, Mask)
        assert np.array_equal(loaded.bits, m.bits)

    def test_field_round_trip_bit_exact(self, tmp_path):
        f = Field.complete(np.array([[0.5, -1.25]]))
        save_grid(tmp_path / "f.grd", f)
        loaded = load_grid(tmp_path / "f.grd")
        assert isinstance(loaded, Field)
        assert loaded.values.tobytes() == f.values.tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.grd"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(GridFormatError, match="magic"):
            load_grid(path)

    def test_truncated_payload(self, tmp_path):
        m = Mask.ones(2, 2)
        save_grid(tmp_path / "m.grd", m)
        raw = (tmp_path / "m.grd").read_bytes()
        (tmp_path / "cut.grd").write_bytes(raw[:-1])
        with pytest.raises(GridFormatError, match="payload"):
            load_grid(tmp_path / "cut.grd")

    def test_unknown_dtype(self, tmp_path):
        m = Mask.ones(1, 1)
        save_grid(tmp_path / "m.grd", m)
        raw = bytearray((tmp_path / "m.grd").read_bytes())
        raw[6] = 9  # dtype byte
        (tmp_path / "odd.grd").write_bytes(bytes(raw))
        with pytest.raises(GridFormatError, match="dtype"):
            load_grid(tmp_path / "odd.grd")

    @given(m=masks())
    @settings(max_examples=30, deadline=None)
    def test_randomized_round_trip(self, tmp_path_factory, m):
        path = tmp_path_factory.mktemp("grd") / "m.grd"
        save_grid(path, m)
        assert np.array_equal(load_grid(path).bits, m.bits)


class TestManifest:
    def test_json_round_trip(self, tmp_path):
        m = mask_from_rows([1, 0], [1, 1])
        vals = np.array([[2.0, 0.0], [4.0, 6.0]])
        manifest = _write_dataset(tmp_path, [m], values=[vals])
        manifest = DatasetManifest(
            samples=manifest.samples, height=2, width=2, mean=4.0, std=2.0, root=tmp_path
        )
        save_manifest(tmp_path / "manifest.json", manifest)
        loaded = load_manifest(tmp_path / "manifest.json")
        assert loaded.samples == manifest.samples
        assert (loaded.height, loaded.width, loaded.mean, loaded.std) == (2, 2, 4.0, 2.0)

    def test_exact_key_names(self, tmp_path):
        manifest = _write_dataset(tmp_path, [mask_from_rows([1])])
        save_manifest(tmp_path / "manifest.json", manifest)
        doc = (tmp_path / "manifest.json").read_text()
        import json

        parsed = json.loads(doc)
        assert set(parsed.keys()) == {"samples", "height", "width", "mean", "std"}

    def test_standardised_on_load(self, tmp_path):
        m = mask_from_rows([1, 0], [1, 1])
        vals = np.array([[2.0, 99.0], [4.0, 6.0]])
        _write_dataset(tmp_path, [m], values=[vals])
        manifest = DatasetManifest(
            samples=[("f0.grd", "m0.grd")], height=2, width=2, mean=4.0, std=2.0, root=tmp_path
        )
        obs = manifest.load_observation(0)
        assert obs.values[0, 0] == pytest.approx(-1.0)
        assert obs.values[1, 1] == pytest.approx(1.0)
        assert obs.values[0, 1] == 0.0  # invalid stays zero

    def test_malformed_manifest(self, tmp_path):
        (tmp_path / "manifest.json").write_text('{"samples": []}')
        with pytest.raises(GridFormatError, match="malformed"):
            load_manifest(tmp_path / "manifest.json")
