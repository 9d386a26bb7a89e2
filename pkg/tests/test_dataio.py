import numpy as np
import pytest

from shapelock.dataio import (
    DomainLabel,
    Manifest,
    SliceRecord,
    Split,
    load_image_png,
    load_manifest,
    load_mask_png,
    save_image_png,
    save_manifest,
    save_mask_png,
)
from shapelock.errors import DataError
from shapelock.imaging import BinaryMask, Domain, Image2D


def test_image_png_roundtrip_integral_hu(tmp_path):
    arr = np.random.default_rng(0).integers(-2048, 4096, (32, 32)).astype(np.float32)
    img = Image2D(arr, Domain.HU)
    save_image_png(tmp_path / "x.png", img)
    back = load_image_png(tmp_path / "x.png")
    assert back.domain is Domain.HU
    np.testing.assert_array_equal(back.values, arr)


def test_image_png_rounds_fractional_hu(tmp_path):
    img = Image2D(np.array([[0.4, 0.6]], dtype=np.float32), Domain.HU)
    save_image_png(tmp_path / "x.png", img)
    back = load_image_png(tmp_path / "x.png")
    np.testing.assert_array_equal(back.values, [[0.0, 1.0]])


def test_image_png_rejects_non_hu(tmp_path):
    z = Image2D(np.zeros((2, 2), np.float32), Domain.ZSCORED)
    with pytest.raises(DataError):
        save_image_png(tmp_path / "x.png", z)


def test_mask_png_roundtrip(tmp_path):
    mask = BinaryMask(np.random.default_rng(1).random((16, 16)) > 0.5)
    save_mask_png(tmp_path / "m.png", mask)
    back = load_mask_png(tmp_path / "m.png")
    np.testing.assert_array_equal(back.values, mask.values)


def _record(pid, sid, split=Split.TRAIN, domain=DomainLabel.HEALTHY):
    return SliceRecord(
        patient_id=pid, slice_id=sid, domain=domain, split=split,
        image=f"images/{pid}_{sid}.png", lung_mask=f"masks/{pid}_{sid}.png",
    )


def test_manifest_roundtrip(tmp_path):
    m = Manifest(
        root=tmp_path,
        slices=[_record("p0", "s0"), _record("p1", "s0", Split.TEST, DomainLabel.PATHOLOGICAL)],
        metadata={"seed": 3},
    )
    path = save_manifest(m)
    back = load_manifest(path)
    assert back.metadata == {"seed": 3}
    assert [r.to_dict() for r in back.slices] == [r.to_dict() for r in m.slices]


def test_manifest_select_and_subset(tmp_path):
    m = Manifest(
        root=tmp_path,
        slices=[
            _record("p0", "s0"),
            _record("p0", "s1", Split.VAL),
            _record("p1", "s0", Split.TRAIN, DomainLabel.PATHOLOGICAL),
        ],
    )
    assert len(m.select(split=Split.TRAIN)) == 2
    assert len(m.select(domain=DomainLabel.HEALTHY)) == 2
    sub = m.subset(split=Split.TRAIN, domain=DomainLabel.PATHOLOGICAL)
    assert [r.patient_id for r in sub.slices] == ["p1"]
    assert list(m.patients()) == ["p0", "p1"]


def test_missing_manifest_raises():
    with pytest.raises(DataError):
        load_manifest("/nonexistent/manifest.json")


def test_malformed_manifest_raises(tmp_path):
    bad = tmp_path / "manifest.json"
    bad.write_text("{not json")
    with pytest.raises(DataError):
        load_manifest(bad)


def test_record_without_mask_raises(tmp_path):
    rec = SliceRecord("p", "s", DomainLabel.PATHOLOGICAL, Split.TEST, image="i.png")
    m = Manifest(root=tmp_path, slices=[rec])
    with pytest.raises(DataError):
        m.load_lung_mask(rec)
