import pathlib

import numpy as np
import pytest

from maskfill.grids import land_mask, load_grid
from maskfill.imputer import ImputerTrainConfig, train_imputer
from maskfill.partitioning import PixelLevel
from maskfill.synth import (
    SynthConfig,
    SynthConfigError,
    gen_dataset,
    gen_field,
    gen_land,
    gen_occlusion,
    load_oracle,
)

CFG = SynthConfig(height=32, width=32, corr_length=3.0, style="blobs", coverage=0.5, land_fraction=0.1, n_samples=4, seed=5)


class TestGenField:
    def test_standardised_exactly(self):
        f = gen_field(CFG, sample_seed=1)
        assert abs(f.values.mean()) <= 1e-10
        assert abs(f.values.var() - 1.0) <= 1e-10

    def test_deterministic(self):
        a = gen_field(CFG, sample_seed=2)
        b = gen_field(CFG, sample_seed=2)
        assert np.array_equal(a.values, b.values)

    def test_correlation_increases_with_length(self):
        def lag1(cfg):
            acs = []
            for s in range(50):
                v = gen_field(cfg, sample_seed=s).values
                acs.append(float((v[:, :-1] * v[:, 1:]).mean()))
            return float(np.mean(acs))

        short = lag1(SynthConfig(height=32, width=32, corr_length=1.0, n_samples=1, seed=0))
        long = lag1(SynthConfig(height=32, width=32, corr_length=4.0, n_samples=1, seed=0))
        assert long > short


class TestGenOcclusion:
    @pytest.mark.parametrize("style", ["blobs", "swaths"])
    def test_coverage_exact_up_to_ties(self, style):
        cfg = SynthConfig(height=64, width=64, style=style, coverage=0.4, land_fraction=0.1, n_samples=1, seed=7)
        land = gen_land(cfg)
        for s in range(5):
            m = gen_occlusion(cfg, sample_seed=s, land=land)
            realised = m.count() / (64 * 64)
            assert abs(realised - 0.4) <= 0.02

    def test_mixed_coverage_exact(self):
        cfg = SynthConfig(height=64, width=64, style="mixed", coverage=0.5, land_fraction=0.05, n_samples=1, seed=8)
        land = gen_land(cfg)
        m = gen_occlusion(cfg, sample_seed=1, land=land)
        assert abs(m.count() / (64 * 64) - 0.5) <= 0.02

    def test_land_pixels_always_zero(self):
        land = gen_land(CFG)
        assert land.count() > 0
        for s in range(5):
            m = gen_occlusion(CFG, sample_seed=s, land=land)
            assert not np.any(m.bits & land.bits)

    def test_sample_dependent(self):
        land = gen_land(CFG)
        a = gen_occlusion(CFG, sample_seed=1, land=land)
        b = gen_occlusion(CFG, sample_seed=2, land=land)
        assert np.abs(a.bits.astype(int) - b.bits.astype(int)).sum() > 0

    def test_unachievable_coverage_rejected(self):
        cfg = SynthConfig(height=16, width=16, coverage=0.95, land_fraction=0.3, n_samples=1, seed=9)
        with pytest.raises(SynthConfigError, match="coverage"):
            gen_occlusion(cfg, sample_seed=0)


class TestGenDataset:
    def test_manifest_round_trip_and_land(self, tmp_path):
        # enough samples that every off-land pixel is observed at least once,
        # so the derived never-observed mask is exactly the generator's land
        cfg = SynthConfig(height=32, width=32, style="blobs", coverage=0.5, land_fraction=0.1, n_samples=40, seed=5)
        manifest = gen_dataset(cfg, tmp_path)
        assert len(manifest) == cfg.n_samples
        derived = land_mask(manifest)
        assert np.array_equal(derived.bits, gen_land(cfg).bits)

    def test_observations_zero_outside_mask(self, tmp_path):
        manifest = gen_dataset(CFG, tmp_path)
        for i in range(len(manifest)):
            raw = load_grid(manifest.field_path(i))
            mask = manifest.load_mask(i)
            assert np.all(raw.values[~mask.to_bool()] == 0.0)

    def test_oracle_matches_observation_on_mask(self, tmp_path):
        manifest = gen_dataset(CFG, tmp_path)
        raw = load_grid(manifest.field_path(0))
        oracle = load_oracle(tmp_path, 0)
        mask = manifest.load_mask(0)
        sel = mask.to_bool()
        assert np.array_equal(raw.values[sel], oracle.values[sel])

    def test_aggregate_coverage(self, tmp_path):
        cfg = SynthConfig(height=32, width=32, style="mixed", coverage=0.5, land_fraction=0.1, n_samples=100, seed=10)
        manifest = gen_dataset(cfg, tmp_path)
        total = sum(manifest.load_mask(i).count() for i in range(len(manifest)))
        frac = total / (100 * 32 * 32)
        assert abs(frac - 0.5) <= 0.03

    def test_training_never_opens_oracle(self, tmp_path, monkeypatch):
        manifest = gen_dataset(CFG, tmp_path)
        opened: list[str] = []
        original = pathlib.Path.open

        def spy(self, *args, **kwargs):
            opened.append(str(self))
            return original(self, *args, **kwargs)

        monkeypatch.setattr(pathlib.Path, "open", spy)
        cfg = ImputerTrainConfig(strategy=PixelLevel(0.5, 0.5), steps=3, batch=1, seed=11)
        from maskfill.nnet import ConvNetSpec

        train_imputer(manifest, None, cfg, spec=ConvNetSpec(2, 4, 1, n_blocks=1, output_head="linear"))
        assert opened, "audit hook never fired"
        assert not [p for p in opened if "oracle" in p]
