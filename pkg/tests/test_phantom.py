import json
from dataclasses import replace

import numpy as np
import pytest

from shapelock.dataio import DomainLabel, Split, load_manifest
from shapelock.errors import ConfigError, DatasetSizeError, PhantomSpecError
from shapelock.phantom import PhantomSpec, generate_dataset, generate_sample, split_patient_counts


class TestSpecValidation:
    def test_defaults_valid_across_sizes(self):
        for size in (64, 96, 128, 192, 256, 512):
            PhantomSpec.default(size)

    def test_lungs_must_fit_in_body(self):
        with pytest.raises(PhantomSpecError):
            PhantomSpec.default(128, lung_axes=(40.0, 40.0))

    def test_ring_must_clear_lungs(self):
        with pytest.raises(PhantomSpecError):
            PhantomSpec.default(128, rib_ring_scale=0.55)

    def test_band_fraction_range(self):
        with pytest.raises(PhantomSpecError):
            PhantomSpec.default(128, pathology_band_fraction=1.5)

    def test_zoom_range_order(self):
        with pytest.raises(PhantomSpecError):
            PhantomSpec.default(128, zoom_range=(1.2, 0.8))


class TestGenerateSample:
    def test_deterministic(self, base_spec):
        a = generate_sample(base_spec, DomainLabel.HEALTHY, seed=5)
        b = generate_sample(base_spec, DomainLabel.HEALTHY, seed=5)
        assert np.array_equal(a.image.values, b.image.values)
        assert np.array_equal(a.lung_mask.values, b.lung_mask.values)
        assert a.rib_box == b.rib_box

    def test_healthy_has_empty_pathology(self, healthy_sample):
        assert healthy_sample.pathology_mask.is_empty()

    def test_pathology_inside_lungs(self, pathological_sample):
        p = pathological_sample
        assert not p.pathology_mask.is_empty()
        assert not np.any(p.pathology_mask.values & ~p.lung_mask.values)
        assert not np.any(p.lung_mask.values & ~p.body_mask.values)

    def test_twins_agree_outside_pathology(self, base_spec):
        h = generate_sample(base_spec, DomainLabel.HEALTHY, seed=31)
        p = generate_sample(base_spec, DomainLabel.PATHOLOGICAL, seed=31)
        outside = ~p.pathology_mask.values
        assert np.array_equal(h.image.values[outside], p.image.values[outside])
        assert (h.image.values[p.pathology_mask.values] != p.image.values[p.pathology_mask.values]).mean() > 0.99

    def test_zero_band_means_identical_domains(self, base_spec):
        spec = replace(base_spec, pathology_band_fraction=0.0)
        h = generate_sample(spec, DomainLabel.HEALTHY, seed=3)
        p = generate_sample(spec, DomainLabel.PATHOLOGICAL, seed=3)
        assert np.array_equal(h.image.values, p.image.values)
        assert p.pathology_mask.is_empty()

    def test_full_band_covers_lung(self, base_spec):
        spec = replace(base_spec, pathology_band_fraction=1.0)
        p = generate_sample(spec, DomainLabel.PATHOLOGICAL, seed=3)
        assert np.array_equal(p.pathology_mask.values, p.lung_mask.values)

    def test_lungless_sample(self, base_spec):
        s = generate_sample(base_spec, DomainLabel.HEALTHY, seed=9, with_lungs=False)
        assert s.lung_mask.is_empty()
        assert s.pathology_mask.is_empty()
        assert not s.body_mask.is_empty()

    def test_hu_values_plausible(self, healthy_sample):
        vals = healthy_sample.image.values
        assert vals.min() >= -2048 and vals.max() <= 4096
        assert abs(np.median(vals[healthy_sample.lung_mask.values]) - (-850)) < 40


class TestSplitCounts:
    def test_paper_proportions(self):
        assert split_patient_counts(10, (0.7, 0.1, 0.2)) == (7, 1, 2)

    def test_bad_sum_rejected(self):
        with pytest.raises(ConfigError, match="split"):
            split_patient_counts(10, (0.7, 0.2, 0.2))

    def test_too_few_patients(self):
        with pytest.raises(DatasetSizeError):
            split_patient_counts(3, (0.7, 0.1, 0.2))


class TestGenerateDataset:
    def test_manifest_contents(self, tiny_dataset):
        manifest = tiny_dataset
        # 4 patients x 5 slices x 2 domains
        assert len(manifest.slices) == 40
        for s in (Split.TRAIN, Split.VAL, Split.TEST):
            healthy_patients = {
                r.patient_id for r in manifest.select(split=s, domain=DomainLabel.HEALTHY)
            }
            assert healthy_patients, f"empty {s}"
        assert len(manifest.patients()) == 8

    def test_no_patient_in_two_splits(self, tiny_dataset):
        seen = {}
        for rec in tiny_dataset.slices:
            seen.setdefault(rec.patient_id, set()).add(rec.split)
        assert all(len(v) == 1 for v in seen.values())

    def test_nonlung_slice_count(self, tmp_path, small_spec):
        manifest = generate_dataset(
            small_spec, tmp_path / "d", n_patients=4, slices_per_patient=20,
            split=(0.5, 0.25, 0.25), seed=0, domains=(DomainLabel.HEALTHY,),
        )
        # 5% of 20 slices = 1 per patient
        empties = 0
        for rec in manifest.slices:
            if manifest.load_lung_mask(rec).is_empty():
                empties += 1
        assert empties == 4

    def test_files_exist_and_reload(self, tiny_dataset):
        reloaded = load_manifest(tiny_dataset.root / "manifest.json")
        assert len(reloaded.slices) == len(tiny_dataset.slices)
        rec = reloaded.select(domain=DomainLabel.PATHOLOGICAL)[0]
        img = reloaded.load_image(rec)
        assert img.shape == (64, 64)
        assert rec.pathology_mask is not None
        reloaded.load_pathology_mask(rec)

    def test_rerun_is_byte_identical(self, tmp_path, small_spec):
        m1 = generate_dataset(small_spec, tmp_path / "a", 4, 3, (0.5, 0.25, 0.25), seed=5)
        m2 = generate_dataset(small_spec, tmp_path / "b", 4, 3, (0.5, 0.25, 0.25), seed=5)
        doc1 = (tmp_path / "a" / "manifest.json").read_text()
        doc2 = (tmp_path / "b" / "manifest.json").read_text()
        assert doc1 == doc2
        rec1, rec2 = m1.slices[7], m2.slices[7]
        assert (tmp_path / "a" / rec1.image).read_bytes() == (tmp_path / "b" / rec2.image).read_bytes()

    def test_hu_roundtrip_through_png(self, tiny_dataset, small_spec):
        from shapelock.util import derive_seed

        rec = tiny_dataset.select(domain=DomainLabel.HEALTHY)[0]
        loaded = tiny_dataset.load_image(rec)
        regenerated = generate_sample(
            small_spec, rec.domain, derive_seed(11, rec.patient_id, rec.slice_id),
            rec.patient_id, rec.slice_id,
        )
        # PNG stores rounded HU
        assert np.abs(loaded.values - regenerated.image.values).max() <= 0.5
