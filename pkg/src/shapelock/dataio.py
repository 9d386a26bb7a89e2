"""Slice files and dataset manifests.

On-disk format:
  * images: 16-bit grayscale PNG, stored value = round(HU) + 32768
  * masks:  8-bit grayscale PNG, {0, 255}
  * manifest.json: per-slice records (patient, slice, domain, split, paths)

Paths inside a manifest are relative to the manifest's directory so a
dataset can be moved as a unit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import DataError
from .imaging import BinaryMask, Domain, Image2D

HU_OFFSET = 32768


class DomainLabel(str, Enum):
    HEALTHY = "healthy"
    PATHOLOGICAL = "pathological"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


def save_image_png(path: Path | str, img: Image2D) -> None:
    """Write an HU image as a 16-bit grayscale PNG (value = round(HU) + 32768)."""
    if img.domain is not Domain.HU:
        raise DataError(f"slice files store HU images, got {img.domain.value}")
    stored = np.round(img.values).astype(np.int64) + HU_OFFSET
    PILImage.fromarray(stored.astype(np.uint16)).save(str(path))


def load_image_png(path: Path | str) -> Image2D:
    arr = np.asarray(PILImage.open(str(path)), dtype=np.int64)
    if arr.ndim != 2:
        raise DataError(f"{path}: expected single-channel image, got shape {arr.shape}")
    return Image2D((arr - HU_OFFSET).astype(np.float32), Domain.HU)


def save_mask_png(path: Path | str, mask: BinaryMask) -> None:
    PILImage.fromarray(np.where(mask.values, 255, 0).astype(np.uint8)).save(str(path))


def load_mask_png(path: Path | str) -> BinaryMask:
    arr = np.asarray(PILImage.open(str(path)))
    if arr.ndim != 2:
        raise DataError(f"{path}: expected single-channel mask, got shape {arr.shape}")
    return BinaryMask(arr >= 128)


@dataclass
class SliceRecord:
    """One slice of one patient, as listed in a manifest."""

    patient_id: str
    slice_id: str
    domain: DomainLabel
    split: Split
    image: str
    lung_mask: str | None = None
    pathology_mask: str | None = None

    @property
    def key(self) -> str:
        return f"{self.patient_id}/{self.slice_id}"

    def to_dict(self) -> dict:
        d = {
            "patient_id": self.patient_id,
            "slice_id": self.slice_id,
            "domain": self.domain.value,
            "split": self.split.value,
            "image": self.image,
        }
        if self.lung_mask is not None:
            d["lung_mask"] = self.lung_mask
        if self.pathology_mask is not None:
            d["pathology_mask"] = self.pathology_mask
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SliceRecord":
        return cls(
            patient_id=d["patient_id"],
            slice_id=d["slice_id"],
            domain=DomainLabel(d["domain"]),
            split=Split(d["split"]),
            image=d["image"],
            lung_mask=d.get("lung_mask"),
            pathology_mask=d.get("pathology_mask"),
        )


@dataclass
class Manifest:
    """A dataset: slice records plus free-form metadata, rooted at a directory."""

    root: Path
    slices: list[SliceRecord] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def select(self, split: Split | None = None, domain: DomainLabel | None = None) -> list[SliceRecord]:
        out = self.slices
        if split is not None:
            out = [s for s in out if s.split is Split(split)]
        if domain is not None:
            out = [s for s in out if s.domain is DomainLabel(domain)]
        return out

    def subset(self, split: Split | None = None, domain: DomainLabel | None = None) -> "Manifest":
        """A view of this dataset restricted to one split and/or domain."""
        return Manifest(
            root=self.root, slices=self.select(split=split, domain=domain), metadata=self.metadata
        )

    def patients(self, split: Split | None = None) -> dict[str, list[SliceRecord]]:
        """Slice records grouped by patient, insertion-ordered by patient_id."""
        groups: dict[str, list[SliceRecord]] = {}
        for rec in self.select(split=split):
            groups.setdefault(rec.patient_id, []).append(rec)
        return dict(sorted(groups.items()))

    def resolve(self, relpath: str) -> Path:
        return self.root / relpath

    def load_image(self, rec: SliceRecord) -> Image2D:
        return load_image_png(self.resolve(rec.image))

    def load_lung_mask(self, rec: SliceRecord) -> BinaryMask:
        if rec.lung_mask is None:
            raise DataError(f"slice {rec.key} has no lung mask")
        return load_mask_png(self.resolve(rec.lung_mask))

    def load_pathology_mask(self, rec: SliceRecord) -> BinaryMask:
        if rec.pathology_mask is None:
            raise DataError(f"slice {rec.key} has no pathology mask")
        return load_mask_png(self.resolve(rec.pathology_mask))


def save_manifest(manifest: Manifest, path: Path | str | None = None) -> Path:
    path = Path(path) if path is not None else manifest.root / "manifest.json"
    doc = {
        "metadata": manifest.metadata,
        "slices": [s.to_dict() for s in manifest.slices],
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path: Path | str) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
        slices = [SliceRecord.from_dict(d) for d in doc["slices"]]
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc
    return Manifest(root=path.parent, slices=slices, metadata=doc.get("metadata", {}))
