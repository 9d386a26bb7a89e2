"""2D slice representation and pixel-level transforms.

Images are single-channel float32 grids tagged with the value domain they
live in (Hounsfield units, [0, 1] display units, or z-scored). All
operations are pure: they never mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage

from .errors import (
    ConstantImageError,
    DimensionMismatchError,
    DomainMismatchError,
    ParameterError,
)

HU_MIN = -2048.0
HU_MAX = 4096.0


class Domain(str, Enum):
    HU = "hu"
    UNIT = "unit"
    ZSCORED = "zscored"


@dataclass
class Image2D:
    """One CT or phantom slice: a (h, w) float32 grid plus its value domain."""

    values: np.ndarray
    domain: Domain = Domain.HU

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ParameterError(f"image must be a non-empty 2D grid, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ParameterError("image contains non-finite values")
        self.domain = Domain(self.domain)
        if self.domain is Domain.HU:
            if arr.min() < HU_MIN or arr.max() > HU_MAX:
                raise DomainMismatchError(
                    f"HU image out of range [{HU_MIN}, {HU_MAX}]: "
                    f"[{arr.min():.1f}, {arr.max():.1f}]"
                )
        elif self.domain is Domain.UNIT:
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise DomainMismatchError("UNIT image has values outside [0, 1]")
        self.values = arr

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class BinaryMask:
    """Per-pixel boolean mask with the same grid layout as the image it annotates."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.dtype != bool:
            arr = arr.astype(bool)
        if arr.ndim != 2:
            raise ParameterError(f"mask must be 2D, got shape {arr.shape}")
        self.values = arr

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def count(self) -> int:
        return int(self.values.sum())

    def is_empty(self) -> bool:
        return not self.values.any()


@dataclass(frozen=True)
class WindowSpec:
    """HU windowing parameters. Default is the lung window used throughout."""

    center: float = -500.0
    width: float = 1500.0

    def __post_init__(self):
        if self.width <= 0:
            raise ParameterError(f"window width must be > 0, got {self.width}")


def _check_same_shape(a, b, what: str):
    if a.shape != b.shape:
        raise DimensionMismatchError(f"{what}: {a.shape} vs {b.shape}")


def apply_window(img: Image2D, spec: WindowSpec) -> Image2D:
    """Map the HU interval center +/- width/2 linearly onto [0, 1], clamping outside.

    Args:
        img: slice in the HU domain.
        spec: window center/width in HU.

    Returns:
        Same-size image in the UNIT domain.
    """
    if img.domain is not Domain.HU:
        raise DomainMismatchError(f"apply_window expects an HU image, got {img.domain.value}")
    lo = spec.center - spec.width / 2.0
    out = (img.values.astype(np.float64) - lo) / spec.width
    out = np.clip(out, 0.0, 1.0)
    return Image2D(out.astype(np.float32), Domain.UNIT)


def zscore_normalize(img: Image2D) -> Image2D:
    """Subtract the mean and divide by the population standard deviation."""
    if img.values.size < 2:
        raise ParameterError("z-score needs at least 2 pixels")
    vals = img.values.astype(np.float64)
    std = vals.std()
    if std < 1e-8:
        raise ConstantImageError("cannot z-score a (near-)constant image")
    out = (vals - vals.mean()) / std
    return Image2D(out.astype(np.float32), Domain.ZSCORED)


def resize(img: Image2D, out_h: int, out_w: int) -> Image2D:
    """Bilinear resize using half-pixel sample centers (align_corners=False).

    Output values are convex combinations of input pixels, so the range
    never exceeds the input min/max. Resizing to the same size is exact.
    """
    if out_h < 1 or out_w < 1:
        raise ParameterError("output dimensions must be >= 1")
    if (out_h, out_w) == img.shape:
        return Image2D(img.values.copy(), img.domain)
    out = _bilinear(img.values.astype(np.float64), out_h, out_w)
    return Image2D(out.astype(np.float32), img.domain)


def _bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = arr.shape
    # half-pixel-center source coordinates, edge-clamped
    r = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    c = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    r0 = np.clip(np.floor(r).astype(int), 0, in_h - 1)
    c0 = np.clip(np.floor(c).astype(int), 0, in_w - 1)
    r1 = np.minimum(r0 + 1, in_h - 1)
    c1 = np.minimum(c0 + 1, in_w - 1)
    fr = np.clip(r - r0, 0.0, 1.0)[:, None]
    fc = np.clip(c - c0, 0.0, 1.0)[None, :]
    top = arr[np.ix_(r0, c0)] * (1 - fc) + arr[np.ix_(r0, c1)] * fc
    bot = arr[np.ix_(r1, c0)] * (1 - fc) + arr[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bot * fr


def resize_mask(mask: BinaryMask, out_h: int, out_w: int) -> BinaryMask:
    """Nearest-neighbor mask resize (keeps values strictly binary)."""
    if out_h < 1 or out_w < 1:
        raise ParameterError("output dimensions must be >= 1")
    in_h, in_w = mask.shape
    r = np.clip(np.round((np.arange(out_h) + 0.5) * in_h / out_h - 0.5).astype(int), 0, in_h - 1)
    c = np.clip(np.round((np.arange(out_w) + 0.5) * in_w / out_w - 0.5).astype(int), 0, in_w - 1)
    return BinaryMask(mask.values[np.ix_(r, c)])


def gaussian_kernel(kernel_size: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Normalized 2D Gaussian kernel (sums to 1)."""
    if kernel_size % 2 != 1 or kernel_size < 1:
        raise ParameterError(f"kernel_size must be odd and >= 1, got {kernel_size}")
    if sigma <= 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    half = kernel_size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_blur(img: Image2D, kernel_size: int = 5, sigma: float = 1.0) -> Image2D:
    """Convolve with a normalized Gaussian kernel, reflect-padded at borders.

    Reflect padding mirrors about the pixel centers (numpy 'reflect'
    convention: the edge pixel itself is not duplicated).
    """
    k = gaussian_kernel(kernel_size, sigma)
    # ndimage 'mirror' == np.pad 'reflect'
    out = ndimage.convolve(img.values.astype(np.float64), k, mode="mirror")
    if img.domain is Domain.UNIT:
        out = np.clip(out, 0.0, 1.0)
    elif img.domain is Domain.HU:
        out = np.clip(out, HU_MIN, HU_MAX)
    return Image2D(out.astype(np.float32), img.domain)


def blur_array(arr: np.ndarray, kernel_size: int = 5, sigma: float = 1.0) -> np.ndarray:
    """gaussian_blur for raw float arrays (z-scored training tensors etc.)."""
    k = gaussian_kernel(kernel_size, sigma)
    return ndimage.convolve(arr.astype(np.float64), k, mode="mirror").astype(arr.dtype)
