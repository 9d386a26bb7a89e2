"""Deterministic synthetic thorax slices with exact ground truth.

The phantom stands in for clinical data: an elliptical body over air, two
elliptical lungs, rib arcs on a ring between lungs and body outline, a
scanner-bed bar outside the body, additive Gaussian texture noise, and a
random zoom factor. Pathological samples raise the outer annulus of each
lung to a denser intensity (peripheral consolidation pattern); a healthy
and a pathological sample generated from the same seed are pixel-identical
outside that annulus, which is what shape-preservation tests lean on.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .cropping import RibCageBox, compute_bounding_box
from .dataio import (
    DomainLabel,
    Manifest,
    SliceRecord,
    Split,
    save_image_png,
    save_manifest,
    save_mask_png,
)
from .errors import ConfigError, DatasetSizeError, PhantomSpecError
from .imaging import HU_MAX, HU_MIN, BinaryMask, Domain, Image2D, gaussian_kernel
from .util import derive_seed, num_workers

_BASE_SIZE = 128  # geometry defaults below are calibrated at this size


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and intensity recipe for one phantom family.

    Axes and offsets are (row, col) half-axes / displacements in pixels at
    `image_size`; zoom scales all anatomy about the image center.
    """

    image_size: int = 128
    body_axes: tuple[float, float] = (40.0, 51.0)
    lung_axes: tuple[float, float] = (25.0, 17.0)
    lung_offsets: tuple[tuple[float, float], tuple[float, float]] = ((0.0, -22.0), (0.0, 22.0))
    rib_count: int = 8
    rib_hu: float = 700.0
    body_hu: float = 0.0
    lung_hu: float = -850.0
    pathology_band_fraction: float = 0.35
    pathology_hu: float = -100.0
    texture_noise_std: float = 20.0
    noise_correlation_px: float = 1.5
    zoom_range: tuple[float, float] = (0.8, 1.2)
    rib_thickness: float = 6.0
    rib_ring_scale: float = 0.88
    scanner_bed_hu: float | None = 100.0

    def __post_init__(self):
        if self.image_size < 32:
            raise PhantomSpecError("image_size must be >= 32")
        if not 0.0 <= self.pathology_band_fraction <= 1.0:
            raise PhantomSpecError("pathology_band_fraction must lie in [0, 1]")
        if self.texture_noise_std < 0:
            raise PhantomSpecError("texture_noise_std must be >= 0")
        if self.noise_correlation_px < 0:
            raise PhantomSpecError("noise_correlation_px must be >= 0")
        zlo, zhi = self.zoom_range
        if not 0 < zlo <= zhi:
            raise PhantomSpecError(f"invalid zoom_range {self.zoom_range}")
        if self.rib_count < 1:
            raise PhantomSpecError("rib_count must be >= 1")
        br, bc = self.body_axes
        lr, lc = self.lung_axes
        for dr, dc in self.lung_offsets:
            # farthest corner of the lung's bounding box must stay inside the body
            if ((abs(dc) + lc) / bc) ** 2 + ((abs(dr) + lr) / br) ** 2 >= 1.0:
                raise PhantomSpecError("lungs are not strictly inside the body ellipse")
        half_t = self.rib_thickness / 2.0
        ring_r = self.rib_ring_scale * br
        ring_c = self.rib_ring_scale * bc
        hull_r = max(abs(dr) + lr for dr, _ in self.lung_offsets)
        hull_c = max(abs(dc) + lc for _, dc in self.lung_offsets)
        if ring_r - half_t <= hull_r or ring_c - half_t <= hull_c:
            raise PhantomSpecError("rib ring overlaps the lung hull")
        if ring_r + half_t >= br or ring_c + half_t >= bc:
            raise PhantomSpecError("rib ring extends outside the body")
        # the body may touch the left/right frame edge (as real scans do),
        # but the rib cage and its crop margin must stay inside
        if (
            zhi * (ring_r + half_t) + 2 >= self.image_size / 2
            or zhi * (ring_c + half_t) + 2 >= self.image_size / 2
        ):
            raise PhantomSpecError("rib ring leaves the frame at maximum zoom")
        if self.scanner_bed_hu is not None:
            bed_row = int(0.94 * self.image_size)
            if self.image_size / 2 + zhi * br >= bed_row - 1:
                raise PhantomSpecError("body can touch the scanner bed at maximum zoom")

    @classmethod
    def default(cls, image_size: int = 128, **overrides) -> "PhantomSpec":
        """Standard geometry scaled proportionally to image_size."""
        f = image_size / _BASE_SIZE
        base = cls(
            image_size=image_size,
            body_axes=(40.0 * f, 51.0 * f),
            lung_axes=(25.0 * f, 17.0 * f),
            lung_offsets=((0.0, -22.0 * f), (0.0, 22.0 * f)),
            rib_thickness=max(6.0 * f, 4.0),
        )
        return replace(base, **overrides) if overrides else base


@dataclass
class PhantomSample:
    """One generated slice plus its exact ground truth."""

    image: Image2D
    lung_mask: BinaryMask
    pathology_mask: BinaryMask
    body_mask: BinaryMask
    rib_box: RibCageBox
    domain: DomainLabel
    patient_id: str
    slice_id: str


def _texture_noise(rng: np.random.Generator, size: int, spec: PhantomSpec) -> np.ndarray:
    """Spatially correlated Gaussian texture, marginal std = texture_noise_std.

    CT noise is smoothed by the reconstruction kernel, so the phantom's is
    too: raw white noise is low-pass filtered and rescaled to keep the
    per-pixel standard deviation.
    """
    raw = rng.normal(0.0, 1.0, (size, size))
    corr = spec.noise_correlation_px
    if corr > 0:
        kernel = gaussian_kernel(2 * int(math.ceil(3 * corr)) + 1, corr)
        raw = ndimage.convolve(raw, kernel, mode="wrap") / math.sqrt((kernel**2).sum())
    return raw * spec.texture_noise_std


def _rib_arc_mask(spec: PhantomSpec, rr, cc, center, zoom) -> np.ndarray:
    ring_r = spec.rib_ring_scale * spec.body_axes[0] * zoom
    ring_c = spec.rib_ring_scale * spec.body_axes[1] * zoom
    u = (cc - center) / ring_c
    v = (rr - center) / ring_r
    rho = np.sqrt(u * u + v * v)
    # approximate pixel distance to the ring
    ring_px = (ring_r + ring_c) / 2.0
    band = np.abs(rho - 1.0) * ring_px <= spec.rib_thickness * zoom / 2.0
    theta = np.arctan2(v, u)
    arcs = np.zeros_like(band)
    step = 2.0 * math.pi / spec.rib_count
    gap = 0.30  # fraction of each sector left as intercostal space
    for k in range(spec.rib_count):
        a0 = -math.pi + (k + gap / 2.0) * step
        a1 = -math.pi + (k + 1 - gap / 2.0) * step
        arcs |= (theta >= a0) & (theta <= a1)
    return band & arcs


def generate_sample(
    spec: PhantomSpec,
    domain: DomainLabel,
    seed: int,
    patient_id: str = "p000",
    slice_id: str = "s000",
    with_lungs: bool = True,
) -> PhantomSample:
    """Render one slice. Bit-deterministic given (spec, domain, seed, with_lungs).

    The random draws (zoom, noise field) do not depend on the domain, so the
    healthy and pathological renderings of one seed differ only where the
    pathology annulus is painted.
    """
    domain = DomainLabel(domain)
    size = spec.image_size
    rng = np.random.default_rng(seed)
    zoom = float(rng.uniform(*spec.zoom_range))
    noise = _texture_noise(rng, size, spec)

    center = (size - 1) / 2.0
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    br, bc = spec.body_axes[0] * zoom, spec.body_axes[1] * zoom
    body = ((cc - center) / bc) ** 2 + ((rr - center) / br) ** 2 <= 1.0

    lung = np.zeros((size, size), dtype=bool)
    pathology = np.zeros((size, size), dtype=bool)
    if with_lungs:
        lr, lc = spec.lung_axes[0] * zoom, spec.lung_axes[1] * zoom
        band = spec.pathology_band_fraction
        for dr, dc in spec.lung_offsets:
            rho2 = ((cc - center - dc * zoom) / lc) ** 2 + ((rr - center - dr * zoom) / lr) ** 2
            one_lung = rho2 <= 1.0
            lung |= one_lung
            if band >= 1.0:
                pathology |= one_lung
            elif band > 0.0:
                pathology |= one_lung & (np.sqrt(rho2) >= 1.0 - band)

    ribs = _rib_arc_mask(spec, rr, cc, center, zoom)

    img = np.full((size, size), -1000.0)
    img[body] = spec.body_hu
    img[lung] = spec.lung_hu
    img[ribs] = spec.rib_hu
    if spec.scanner_bed_hu is not None:
        bed_row = int(0.94 * size)
        bed_h = max(2, size // 48)
        img[bed_row : bed_row + bed_h, int(0.2 * size) : int(0.8 * size)] = spec.scanner_bed_hu
    if domain is DomainLabel.PATHOLOGICAL:
        img[pathology] = spec.pathology_hu
    else:
        pathology = np.zeros((size, size), dtype=bool)
    img += noise
    img = np.clip(img, HU_MIN, HU_MAX)

    return PhantomSample(
        image=Image2D(img.astype(np.float32), Domain.HU),
        lung_mask=BinaryMask(lung),
        pathology_mask=BinaryMask(pathology),
        body_mask=BinaryMask(body),
        rib_box=compute_bounding_box(BinaryMask(ribs), margin=0),
        domain=domain,
        patient_id=patient_id,
        slice_id=slice_id,
    )


def split_patient_counts(n_patients: int, split: tuple[float, float, float]) -> tuple[int, int, int]:
    """Patient counts per (train, val, test); every part must be non-empty."""
    if abs(sum(split) - 1.0) > 1e-9:
        raise ConfigError(f"split must sum to 1 (got {split}, sum {sum(split)})")
    n_train = int(round(n_patients * split[0]))
    n_val = int(round(n_patients * split[1]))
    n_test = n_patients - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise DatasetSizeError(
            f"{n_patients} patients cannot fill split {split}: "
            f"train/val/test = {n_train}/{n_val}/{n_test}"
        )
    return n_train, n_val, n_test


def generate_dataset(
    spec: PhantomSpec,
    out_dir: Path | str,
    n_patients: int,
    slices_per_patient: int,
    split: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
    domains: tuple[DomainLabel, ...] = (DomainLabel.HEALTHY, DomainLabel.PATHOLOGICAL),
    nonlung_fraction: float = 0.05,
) -> Manifest:
    """Write a phantom dataset (slice PNGs + manifest) with a patient-level split.

    Each domain gets n_patients patients; per patient, the trailing
    round(nonlung_fraction * slices) slices are rendered without lungs to
    mimic apex/base slices. Every slice's randomness derives from
    (seed, patient_id, slice_id), so generation order is irrelevant.
    """
    out_dir = Path(out_dir)
    n_train, n_val, n_test = split_patient_counts(n_patients, split)
    if slices_per_patient < 1:
        raise DatasetSizeError("slices_per_patient must be >= 1")
    n_nonlung = int(round(nonlung_fraction * slices_per_patient))

    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    tasks = []
    for domain in domains:
        domain = DomainLabel(domain)
        prefix = "H" if domain is DomainLabel.HEALTHY else "P"
        for i in range(n_patients):
            if i < n_train:
                part = Split.TRAIN
            elif i < n_train + n_val:
                part = Split.VAL
            else:
                part = Split.TEST
            pid = f"{prefix}{i:03d}"
            for j in range(slices_per_patient):
                sid = f"s{j:03d}"
                lungless = j >= slices_per_patient - n_nonlung
                tasks.append((domain, part, pid, sid, lungless))

    def render(task) -> SliceRecord:
        domain, part, pid, sid, lungless = task
        sample = generate_sample(
            spec, domain, derive_seed(seed, pid, sid), pid, sid, with_lungs=not lungless
        )
        image_rel = f"images/{pid}_{sid}.png"
        lung_rel = f"masks/{pid}_{sid}_lung.png"
        save_image_png(out_dir / image_rel, sample.image)
        save_mask_png(out_dir / lung_rel, sample.lung_mask)
        path_rel = None
        if domain is DomainLabel.PATHOLOGICAL:
            path_rel = f"masks/{pid}_{sid}_path.png"
            save_mask_png(out_dir / path_rel, sample.pathology_mask)
        return SliceRecord(
            patient_id=pid,
            slice_id=sid,
            domain=domain,
            split=part,
            image=image_rel,
            lung_mask=lung_rel,
            pathology_mask=path_rel,
        )

    workers = num_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(render, tasks))
    else:
        records = [render(t) for t in tasks]

    manifest = Manifest(
        root=out_dir,
        slices=records,
        metadata={
            "generator": "phantom",
            "seed": seed,
            "image_size": spec.image_size,
            "n_patients_per_domain": n_patients,
            "slices_per_patient": slices_per_patient,
            "split": list(split),
            "nonlung_fraction": nonlung_fraction,
        },
    )
    save_manifest(manifest)
    return manifest
