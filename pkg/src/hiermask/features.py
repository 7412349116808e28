"""Patch feature grids and the crop/resample geometry used by the pipeline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from hiermask.masks import BBox


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """A gh x gw grid of D-dimensional patch features.

    ``data`` is float32 with shape (gh, gw, dim); ``patch_size`` is the pixel
    side length of one patch, so the grid covers gh*patch_size by
    gw*patch_size pixels. Every patch vector must be finite with nonzero norm
    and the grid must hold at least 4 patches.
    """

    data: np.ndarray
    patch_size: int

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"feature grid must be 3-d (gh, gw, dim), got shape {arr.shape}")
        gh, gw, dim = arr.shape
        if gh * gw < 4:
            raise ValueError(f"feature grid needs at least 4 patches, got {gh}x{gw}")
        if dim < 1:
            raise ValueError("feature dimension must be >= 1")
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")
        if not np.isfinite(arr).all():
            bad = np.argwhere(~np.isfinite(arr).all(axis=2))[0]
            raise ValueError(f"non-finite feature at patch (y={bad[0]}, x={bad[1]})")
        norms = np.linalg.norm(arr.reshape(gh * gw, dim), axis=1)
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            i = int(zero[0])
            raise ValueError(f"patch (y={i // gw}, x={i % gw}) has zero-norm feature")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def gh(self) -> int:
        return int(self.data.shape[0])

    @property
    def gw(self) -> int:
        return int(self.data.shape[1])

    @property
    def dim(self) -> int:
        return int(self.data.shape[2])

    @property
    def n_patches(self) -> int:
        return self.gh * self.gw

    @property
    def pixel_height(self) -> int:
        return self.gh * self.patch_size

    @property
    def pixel_width(self) -> int:
        return self.gw * self.patch_size

    def flat(self) -> np.ndarray:
        """(n_patches, dim) float64 view of the features, row-major patch order."""
        return self.data.reshape(self.n_patches, self.dim).astype(np.float64)


def local_grid(grid: FeatureGrid, box: BBox, out_side: Optional[int] = None) -> FeatureGrid:
    """Feature grid for the crop spanned by a pixel ``box`` of the source grid.

    Features are sampled bilinearly at the patch centers of the output grid,
    mapped onto the pixel span of ``box``. Without ``out_side`` the output has
    one patch per (partially) covered source patch, which reduces to an exact
    sub-grid copy when the box is patch-aligned. ``out_side`` forces a square
    output (e.g. 32 to mimic a 256x256 crop at patch size 8).
    """
    ps = grid.patch_size
    if box.x2 > grid.pixel_width or box.y2 > grid.pixel_height:
        raise ValueError(
            f"bbox {box} exceeds grid pixel extent "
            f"{grid.pixel_width}x{grid.pixel_height}"
        )
    if out_side is not None:
        out_gh = out_gw = int(out_side)
    else:
        out_gh = (box.y2 + ps - 1) // ps - box.y1 // ps
        out_gw = (box.x2 + ps - 1) // ps - box.x1 // ps
    if out_gh < 1 or out_gw < 1:
        raise ValueError("local grid would be empty")

    # Patch-space coordinates of the output patch centers.
    sy = (box.y1 + (np.arange(out_gh) + 0.5) * (box.height / out_gh)) / ps - 0.5
    sx = (box.x1 + (np.arange(out_gw) + 0.5) * (box.width / out_gw)) / ps - 0.5
    data = _bilinear_sample(grid.data, sy, sx)
    return FeatureGrid(data, ps)


def _bilinear_sample(data: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    """Sample (gh, gw, dim) planes at the grid of (sy, sx) patch coordinates."""
    gh, gw, _ = data.shape
    sy = np.clip(sy, 0.0, gh - 1.0)
    sx = np.clip(sx, 0.0, gw - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (sy - y0)[:, None, None]
    fx = (sx - x0)[None, :, None]
    d = data.astype(np.float64)
    out = (
        d[np.ix_(y0, x0)] * (1.0 - fy) * (1.0 - fx)
        + d[np.ix_(y0, x1)] * (1.0 - fy) * fx
        + d[np.ix_(y1, x0)] * fy * (1.0 - fx)
        + d[np.ix_(y1, x1)] * fy * fx
    )
    return out.astype(np.float32)
