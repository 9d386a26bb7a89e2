"""Side-by-side translation panels: input | generated | absolute difference."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .cyclegan import DatasetStats
from .imaging import HU_MAX, HU_MIN, Domain, Image2D, WindowSpec, apply_window


def _to_display(z_arr: np.ndarray, stats: DatasetStats, window: WindowSpec) -> np.ndarray:
    hu = np.clip(stats.denormalize(z_arr), HU_MIN, HU_MAX)
    unit = apply_window(Image2D(hu, Domain.HU), window).values
    return (unit * 255).astype(np.uint8)


def _heat(diff: np.ndarray, scale: float) -> np.ndarray:
    """Dark-to-yellow heat ramp for |difference| maps."""
    v = np.clip(diff / scale, 0.0, 1.0)
    r = np.clip(1.6 * v, 0, 1)
    g = np.clip(1.6 * v - 0.45, 0, 1)
    b = np.clip(0.4 - v, 0, 0.4)
    return (np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)


def render_translation_panel(
    input_z: np.ndarray,
    generated_z: np.ndarray,
    stats: DatasetStats,
    window: WindowSpec | None = None,
    diff_scale: float = 2.0,
) -> np.ndarray:
    """RGB strip of (windowed input, windowed generated, difference heat map)."""
    window = window or WindowSpec()
    gray_in = _to_display(input_z, stats, window)
    gray_gen = _to_display(generated_z, stats, window)
    heat = _heat(np.abs(generated_z - input_z), diff_scale)
    sep = np.full((input_z.shape[0], 2, 3), 255, dtype=np.uint8)
    panels = [
        np.repeat(gray_in[..., None], 3, axis=-1),
        sep,
        np.repeat(gray_gen[..., None], 3, axis=-1),
        sep,
        heat,
    ]
    return np.concatenate(panels, axis=1)


def save_translation_panel(path: Path | str, input_z, generated_z, stats, **kwargs) -> None:
    panel = render_translation_panel(input_z, generated_z, stats, **kwargs)
    PILImage.fromarray(panel).save(str(path))
