"""Binary mask primitives: RLE codec, IoU, boxes, and point queries.

Masks are stored as column-major run-length encodings following the common
annotation-format convention: counts alternate background/foreground starting
with background (a leading 0 means the first pixel is foreground), and the
counts sum to ``height * width``. Pixel order within the encoding is
column-major, i.e. flat index ``k = x * height + y``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import distance_transform_cdt

MaskId = Union[str, int]


def _canonical_runs(counts: Sequence[int], total: int) -> Tuple[int, ...]:
    """Validate raw RLE counts and collapse zero-length interior runs.

    The canonical form starts with the background count (possibly 0) and has
    strictly positive runs afterwards, so equal masks compare equal.
    """
    if len(counts) == 0:
        raise ValueError("RLE must contain at least one run")
    runs = []
    for i, c in enumerate(counts):
        if int(c) != c:
            raise ValueError(f"RLE run {i} is not an integer: {c!r}")
        c = int(c)
        if c < 0:
            raise ValueError(f"RLE run {i} is negative: {c}")
        if c == 0 and i > 0 and runs[-1] == 0:
            raise ValueError(f"RLE has consecutive zero-length runs at {i - 1}, {i}")
        runs.append(c)
    if sum(runs) != total:
        raise ValueError(f"RLE counts sum to {sum(runs)}, expected {total}")
    segments: list[list[int]] = []  # [value, count] with count > 0
    for i, c in enumerate(runs):
        if c == 0:
            continue
        value = i % 2
        if segments and segments[-1][0] == value:
            segments[-1][1] += c
        else:
            segments.append([value, c])
    if not segments:
        return (total,)
    out = [0] if segments[0][0] == 1 else []
    out.extend(c for _, c in segments)
    return tuple(out)


@dataclass(frozen=True)
class BinaryMask:
    """Immutable pixel mask backed by column-major RLE counts."""

    height: int
    width: int
    rle: Tuple[int, ...]

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError(f"mask dimensions must be positive, got {self.height}x{self.width}")
        canon = _canonical_runs(self.rle, self.height * self.width)
        object.__setattr__(self, "rle", canon)

    @cached_property
    def area(self) -> int:
        return int(sum(self.rle[1::2]))

    @cached_property
    def _bits(self) -> np.ndarray:
        """Decoded (height, width) boolean bitmap; read-only, cached."""
        counts = np.asarray(self.rle, dtype=np.int64)
        values = np.arange(len(counts), dtype=np.int64) % 2
        flat = np.repeat(values.astype(bool), counts)
        bits = flat.reshape((self.height, self.width), order="F")
        bits.flags.writeable = False
        return bits

    def to_bitmap(self) -> np.ndarray:
        """Row-major (height, width) boolean array; returns a writable copy."""
        return self._bits.copy()

    @property
    def is_empty(self) -> bool:
        return self.area == 0


def rle_encode(bitmap: np.ndarray) -> BinaryMask:
    """Encode a row-major boolean grid into a column-major RLE mask."""
    arr = np.asarray(bitmap)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"bitmap must be a non-empty 2-d grid, got shape {arr.shape}")
    flat = arr.astype(bool).ravel(order="F")
    changes = np.flatnonzero(np.diff(flat.view(np.int8))) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds)
    counts = [int(r) for r in runs]
    if flat[0]:
        counts = [0] + counts
    return BinaryMask(int(arr.shape[0]), int(arr.shape[1]), tuple(counts))


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection-over-union of two masks; 0.0 when both are empty."""
    if (a.height, a.width) != (b.height, b.width):
        raise ValueError(
            f"mask dimension mismatch: {a.height}x{a.width} vs {b.height}x{b.width}"
        )
    inter = int(np.count_nonzero(a._bits & b._bits))
    union = a.area + b.area - inter
    if union == 0:
        return 0.0
    return inter / union


@dataclass(frozen=True)
class BBox:
    """Half-open pixel box: x1 <= x < x2, y1 <= y < y2."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self) -> None:
        if not (0 <= self.x1 < self.x2 and 0 <= self.y1 < self.y2):
            raise ValueError(f"degenerate bbox ({self.x1},{self.y1},{self.x2},{self.y2})")

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1


def bbox_of(m: BinaryMask) -> BBox:
    """Tightest half-open box containing all foreground pixels."""
    bits = m._bits
    rows = np.flatnonzero(bits.any(axis=1))
    if rows.size == 0:
        raise ValueError("empty mask has no bounding box")
    cols = np.flatnonzero(bits.any(axis=0))
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def contains_point(m: BinaryMask, x: int, y: int) -> bool:
    """True iff pixel (x, y) is foreground."""
    if not (0 <= x < m.width and 0 <= y < m.height):
        raise ValueError(f"point ({x},{y}) outside {m.width}x{m.height} image")
    return bool(m._bits[y, x])


def center_point(m: BinaryMask) -> Tuple[int, int]:
    """Representative interior point (x, y) of a non-empty mask.

    Returns the rounded foreground centroid when it lands on a foreground
    pixel. Otherwise falls back to the foreground pixel with maximum
    Chebyshev distance to the mask boundary (the image border counts as
    boundary), breaking ties by smallest (y, x).
    """
    bits = m._bits
    ys, xs = np.nonzero(bits)
    if ys.size == 0:
        raise ValueError("empty mask has no center point")
    cy = int(np.floor(ys.mean() + 0.5))
    cx = int(np.floor(xs.mean() + 0.5))
    if bits[cy, cx]:
        return cx, cy
    padded = np.pad(bits, 1)
    dist = distance_transform_cdt(padded, metric="chessboard")[1:-1, 1:-1]
    flat_idx = int(np.argmax(dist))  # first max in row-major order = smallest (y, x)
    return flat_idx % m.width, flat_idx // m.width


def crop_to_box(m: BinaryMask, box: BBox) -> BinaryMask:
    """Sub-mask covered by ``box``; box must lie within the mask bounds."""
    if not (box.x2 <= m.width and box.y2 <= m.height):
        raise ValueError(f"bbox {box} exceeds {m.width}x{m.height} image")
    return rle_encode(m._bits[box.y1:box.y2, box.x1:box.x2])


def paste_into(local: BinaryMask, box: BBox, height: int, width: int) -> BinaryMask:
    """Resize ``local`` to ``box`` (nearest neighbor) and paste onto an empty canvas."""
    if not (box.x2 <= width and box.y2 <= height):
        raise ValueError(f"bbox {box} exceeds {width}x{height} image")
    patch = _resize_nearest_bits(local._bits, box.height, box.width)
    canvas = np.zeros((height, width), dtype=bool)
    canvas[box.y1:box.y2, box.x1:box.x2] = patch
    return rle_encode(canvas)


def _resize_nearest_bits(bits: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    src_h, src_w = bits.shape
    ys = np.minimum((np.arange(out_h) + 0.5) * (src_h / out_h), src_h - 1).astype(np.int64)
    xs = np.minimum((np.arange(out_w) + 0.5) * (src_w / out_w), src_w - 1).astype(np.int64)
    return bits[np.ix_(ys, xs)]


def resize_nearest(m: BinaryMask, out_h: int, out_w: int) -> BinaryMask:
    """Nearest-neighbor resample; pixel centers map via (i + 0.5) * src / out."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target dimensions must be positive, got {out_h}x{out_w}")
    return rle_encode(_resize_nearest_bits(m._bits, out_h, out_w))


@dataclass(frozen=True)
class ScoredMask:
    """Mask with a confidence score and its place in the granularity hierarchy.

    ``level`` 0 marks a coarse (top-down) mask; levels >= 1 are part masks
    and must name their coarse ancestor via ``parent_id``.
    """

    mask: BinaryMask
    score: float
    level: int = 0
    parent_id: Optional[MaskId] = None
    mask_id: Optional[MaskId] = None
    provenance: Optional[str] = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        if self.level < 0:
            raise ValueError(f"level must be >= 0, got {self.level}")
        if self.level == 0 and self.parent_id is not None:
            raise ValueError("level-0 masks must not have a parent_id")
        if self.level >= 1 and self.parent_id is None:
            raise ValueError(f"level-{self.level} mask requires a parent_id")

    @property
    def area(self) -> int:
        return self.mask.area
