"""Rib-cage-based cropping pipeline.

Steps: fill the lungs with their surrounding intensity (grayscale
reconstruction by erosion from the border), threshold and keep the largest
connected component (the body, dropping the scanner bed), threshold the
dense structures inside the body and clean them with a morphological
opening (the rib cage), then crop the original slice to the rib-cage
bounding box. Cropping to a stable anatomical reference removes the
zoom-level bias between acquisitions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace as _replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.morphology import binary_opening, disk, reconstruction

from .errors import EmptyMaskError, NoBodyError, NoRibsError, ParameterError
from .imaging import BinaryMask, Domain, Image2D, resize, resize_mask


@dataclass(frozen=True)
class RibCageBox:
    """Inclusive pixel bounding box of the rib cage."""

    row_min: int
    row_max: int
    col_min: int
    col_max: int

    def __post_init__(self):
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ParameterError(f"degenerate box {self}")
        if min(self.row_min, self.col_min) < 0:
            raise ParameterError(f"box with negative index {self}")

    @property
    def height(self) -> int:
        return self.row_max - self.row_min + 1

    @property
    def width(self) -> int:
        return self.col_max - self.col_min + 1

    def slices(self) -> tuple[slice, slice]:
        return slice(self.row_min, self.row_max + 1), slice(self.col_min, self.col_max + 1)

    def to_dict(self) -> dict:
        return {
            "row_min": self.row_min,
            "row_max": self.row_max,
            "col_min": self.col_min,
            "col_max": self.col_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RibCageBox":
        return cls(d["row_min"], d["row_max"], d["col_min"], d["col_max"])


@dataclass(frozen=True)
class CropConfig:
    """Thresholds and morphology parameters for the cropping pipeline.

    Defaults separate air (~-1000 HU) from soft tissue and soft tissue from
    bone; the pipeline structure, not these numbers, is what matters.
    """

    body_threshold: float = -200.0
    rib_threshold: float = 200.0
    opening_radius: int = 2
    connectivity: int = 8
    margin: int = 2

    def __post_init__(self):
        if self.rib_threshold <= self.body_threshold:
            raise ParameterError("rib_threshold must exceed body_threshold")
        if self.opening_radius < 0 or self.margin < 0:
            raise ParameterError("opening_radius and margin must be >= 0")
        if self.connectivity not in (4, 8):
            raise ParameterError(f"connectivity must be 4 or 8, got {self.connectivity}")


def _structure(connectivity: int) -> np.ndarray:
    return ndimage.generate_binary_structure(2, 2 if connectivity == 8 else 1)


def fill_lungs_by_reconstruction(img: Image2D) -> Image2D:
    """Raise dark regions not connected to the border up to their surrounding plateau.

    Grayscale morphological reconstruction by erosion, 8-connected: the
    marker is the image maximum everywhere except the one-pixel border
    frame, which keeps the original values. Lung interiors (dark basins
    enclosed by the body) are filled; border-connected dark regions (the
    outside air) are left untouched. Output >= input pointwise.
    """
    vals = img.values.astype(np.float64)
    marker = np.full_like(vals, vals.max())
    marker[0, :] = vals[0, :]
    marker[-1, :] = vals[-1, :]
    marker[:, 0] = vals[:, 0]
    marker[:, -1] = vals[:, -1]
    filled = reconstruction(marker, vals, method="erosion", footprint=np.ones((3, 3)))
    return Image2D(filled.astype(np.float32), img.domain)


def select_body_region(filled: Image2D, cfg: CropConfig) -> BinaryMask:
    """Threshold the lung-filled slice and keep the single largest component.

    Drops bright structures outside the thorax (scanner bed). Ties between
    equal-sized components break toward the component whose first pixel in
    raster order comes first.
    """
    thresholded = filled.values >= cfg.body_threshold
    if not thresholded.any():
        raise NoBodyError(f"nothing above body threshold {cfg.body_threshold} HU")
    labels, n = ndimage.label(thresholded, structure=_structure(cfg.connectivity))
    sizes = np.bincount(labels.ravel())[1:]
    # labels are assigned in raster-scan order, so argmax's first-max rule
    # implements the deterministic tie-break
    best = int(np.argmax(sizes)) + 1
    return BinaryMask(labels == best)


def segment_rib_cage(img: Image2D, body: BinaryMask, cfg: CropConfig) -> BinaryMask:
    """High-threshold the body region and clean it with a morphological opening."""
    if body.is_empty():
        raise EmptyMaskError("body mask is empty")
    if img.shape != body.shape:
        raise ParameterError(f"image/body shape mismatch: {img.shape} vs {body.shape}")
    dense = (img.values >= cfg.rib_threshold) & body.values
    if cfg.opening_radius > 0:
        dense = binary_opening(dense, disk(cfg.opening_radius))
    if not dense.any():
        raise NoRibsError(f"no dense structures above {cfg.rib_threshold} HU inside the body")
    return BinaryMask(dense)


def compute_bounding_box(mask: BinaryMask, margin: int = 0) -> RibCageBox:
    """Tightest box containing all true pixels, dilated by margin, clamped to bounds."""
    if mask.is_empty():
        raise EmptyMaskError("cannot bound an empty mask")
    rows = np.flatnonzero(mask.values.any(axis=1))
    cols = np.flatnonzero(mask.values.any(axis=0))
    return RibCageBox(
        row_min=max(int(rows[0]) - margin, 0),
        row_max=min(int(rows[-1]) + margin, mask.height - 1),
        col_min=max(int(cols[0]) - margin, 0),
        col_max=min(int(cols[-1]) + margin, mask.width - 1),
    )


def find_ribcage_box(img: Image2D, cfg: CropConfig | None = None) -> RibCageBox:
    """Run fill -> body -> ribs -> bounding box, without cropping."""
    cfg = cfg or CropConfig()
    filled = fill_lungs_by_reconstruction(img)
    body = select_body_region(filled, cfg)
    ribs = segment_rib_cage(img, body, cfg)
    return compute_bounding_box(ribs, cfg.margin)


def crop_to_ribcage(
    img: Image2D, cfg: CropConfig | None = None, out_size: int = 256
) -> tuple[Image2D, RibCageBox]:
    """Crop the original slice to its rib-cage box and resize to out_size x out_size."""
    box = find_ribcage_box(img, cfg)
    return apply_box(img, box, out_size), box


def apply_box(img: Image2D, box: RibCageBox, out_size: int) -> Image2D:
    """Crop an image to a previously computed box (bilinear resize)."""
    rs, cs = box.slices()
    return resize(Image2D(img.values[rs, cs], img.domain), out_size, out_size)


def apply_box_to_mask(mask: BinaryMask, box: RibCageBox, out_size: int) -> BinaryMask:
    """Crop a paired mask with the image's box (nearest-neighbor, stays binary)."""
    rs, cs = box.slices()
    return resize_mask(BinaryMask(mask.values[rs, cs]), out_size, out_size)


def crop_dataset(
    src, dst_dir, cfg: CropConfig | None = None, out_size: int = 256
) -> tuple["Manifest", dict[str, dict], dict[str, str]]:
    """Crop every slice of a dataset into a new one at dst_dir.

    Slices where no body or no ribs are found are skipped and reported in
    the failures mapping instead of aborting the run. Masks are cropped
    with their image's box. Returns (manifest, boxes, failures).
    """
    from .dataio import Manifest, save_image_png, save_manifest, save_mask_png

    cfg = cfg or CropConfig()
    dst_dir = Path(dst_dir)
    (dst_dir / "images").mkdir(parents=True, exist_ok=True)
    (dst_dir / "masks").mkdir(parents=True, exist_ok=True)

    records, boxes, failures = [], {}, {}
    for rec in src.slices:
        img = src.load_image(rec)
        try:
            box = find_ribcage_box(img, cfg)
        except (NoBodyError, NoRibsError) as exc:
            failures[rec.key] = str(exc)
            continue
        boxes[rec.key] = box.to_dict()
        save_image_png(dst_dir / rec.image, apply_box(img, box, out_size))
        if rec.lung_mask is not None:
            save_mask_png(
                dst_dir / rec.lung_mask, apply_box_to_mask(src.load_lung_mask(rec), box, out_size)
            )
        if rec.pathology_mask is not None:
            save_mask_png(
                dst_dir / rec.pathology_mask,
                apply_box_to_mask(src.load_pathology_mask(rec), box, out_size),
            )
        records.append(_replace(rec))

    manifest = Manifest(
        root=dst_dir,
        slices=records,
        metadata={
            **src.metadata,
            "cropped": True,
            "crop_out_size": out_size,
            "crop_config": {
                "body_threshold": cfg.body_threshold,
                "rib_threshold": cfg.rib_threshold,
                "opening_radius": cfg.opening_radius,
                "connectivity": cfg.connectivity,
                "margin": cfg.margin,
            },
        },
    )
    save_manifest(manifest)
    return manifest, boxes, failures
