"""Image artifacts: PNG writers and the heatmap colormap.

The heatmap palette is a fixed 256-entry lookup table (a piecewise-linear
blue-cyan-yellow-red ramp) so rendered files are byte-stable across
platforms and library versions.
"""

from pathlib import Path

import numpy as np
from PIL import Image

_ANCHORS = np.array([
    [0.00, 0, 0, 128],
    [0.25, 0, 128, 255],
    [0.50, 0, 255, 200],
    [0.75, 255, 220, 0],
    [1.00, 200, 0, 0],
], dtype=np.float64)


def heatmap_lut() -> np.ndarray:
    t = np.linspace(0.0, 1.0, 256)
    lut = np.stack([np.interp(t, _ANCHORS[:, 0], _ANCHORS[:, c]) for c in (1, 2, 3)], axis=1)
    return np.round(lut).astype(np.uint8)


HEATMAP_LUT = heatmap_lut()


def to_uint8(values) -> np.ndarray:
    return np.round(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)


def render_heatmap(normalized) -> np.ndarray:
    return HEATMAP_LUT[to_uint8(normalized)]


def save_image(path, image) -> Path:
    """Write an ``H x W`` or ``H x W x C`` array in [0, 1] as 8-bit PNG."""
    arr = to_uint8(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)
    return path


def save_heatmap(path, normalized) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(render_heatmap(normalized)).save(path)
    return path


def save_mask(path, mask) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)
    return path


def save_raw(path, values) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, np.asarray(values, dtype=np.float32))
    return path


def grid(rows, pad: int = 2) -> np.ndarray:
    """Tile a list of rows of ``H x W x 3`` uint8 panels into one image."""
    h, w = rows[0][0].shape[:2]
    ncol = max(len(r) for r in rows)
    out = np.full((len(rows) * (h + pad) + pad, ncol * (w + pad) + pad, 3), 255, np.uint8)
    for i, row in enumerate(rows):
        for j, panel in enumerate(row):
            if panel.ndim == 2:
                panel = np.repeat(panel[:, :, None], 3, axis=2)
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            out[y:y + h, x:x + w] = panel
    return out
