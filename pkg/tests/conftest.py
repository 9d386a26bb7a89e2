"""Shared fixtures: tiny phantoms and datasets sized for fast tests."""

import numpy as np
import pytest
import torch

from shapelock.dataio import DomainLabel
from shapelock.phantom import PhantomSpec, generate_dataset, generate_sample

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_spec() -> PhantomSpec:
    return PhantomSpec.default(64)


@pytest.fixture(scope="session")
def base_spec() -> PhantomSpec:
    return PhantomSpec.default(128)


@pytest.fixture(scope="session")
def healthy_sample(base_spec):
    return generate_sample(base_spec, DomainLabel.HEALTHY, seed=42)


@pytest.fixture(scope="session")
def pathological_sample(base_spec):
    return generate_sample(base_spec, DomainLabel.PATHOLOGICAL, seed=42)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, small_spec):
    """4 patients x 5 slices per domain at 64 px, on disk with a manifest."""
    out = tmp_path_factory.mktemp("phantom-data")
    manifest = generate_dataset(
        small_spec,
        out,
        n_patients=4,
        slices_per_patient=5,
        split=(0.5, 0.25, 0.25),
        seed=11,
    )
    return manifest


@pytest.fixture(scope="session")
def cropped_tiny(tmp_path_factory, tiny_dataset):
    """tiny_dataset cropped to 32x32, shared by the training tests."""
    from shapelock.cropping import CropConfig, crop_dataset

    out = tmp_path_factory.mktemp("cropped-data")
    # ribs at 64 px are ~3-4 px wide; a radius-2 opening would erase them
    manifest, boxes, failures = crop_dataset(
        tiny_dataset, out, CropConfig(opening_radius=1), out_size=32
    )
    assert not failures
    assert len(boxes) == len(manifest.slices)
    return manifest


def rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
