"""Bottom-up stage: merge in-mask patch clusters under a threshold ladder.

Within one coarse mask, every covered patch starts as a singleton cluster.
For each threshold (largest first) the adjacent cluster pair with maximum
cosine similarity between cluster features is merged until that maximum
drops below the threshold; the surviving partition is snapshotted as one
granularity level. Cluster features are the size-weighted average of the
merged pair, which keeps them equal to the plain mean of their member
patches' original features.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Set, Tuple

import numpy as np

from hiermask.features import FeatureGrid
from hiermask.masks import (
    BBox,
    BinaryMask,
    ScoredMask,
    bbox_of,
    crop_to_box,
    resize_nearest,
    rle_encode,
)


class MaskTooSmallError(ValueError):
    """Parent mask covers fewer than two patches of the local grid."""


@dataclass(eq=False)
class Cluster:
    """A connected group of patches with a running mean feature."""

    id: int
    patches: Set[int]
    feature: np.ndarray  # (dim,) float64

    @property
    def size(self) -> int:
        return len(self.patches)


def _cluster_cosine(a: Cluster, b: Cluster) -> float:
    """Cosine similarity of cluster features; 0.0 when either norm is zero."""
    denom = float(np.linalg.norm(a.feature)) * float(np.linalg.norm(b.feature))
    if denom == 0.0:
        return 0.0
    return float(a.feature @ b.feature) / denom


def _local_parent_bits(parent: ScoredMask, grid: FeatureGrid) -> Tuple[np.ndarray, BBox]:
    """Parent mask rasterized into the local crop frame of ``grid``."""
    box = bbox_of(parent.mask)
    cropped = crop_to_box(parent.mask, box)
    local = resize_nearest(cropped, grid.pixel_height, grid.pixel_width)
    return local._bits, box


def init_clusters(
    parent: ScoredMask, grid: FeatureGrid
) -> Tuple[Dict[int, Cluster], Dict[int, Set[int]]]:
    """Singleton clusters and 4-connected adjacency for in-mask patches.

    A patch belongs to the parent iff its center pixel is foreground after
    the parent mask is rasterized to the local crop frame.
    """
    gh, gw, ps = grid.gh, grid.gw, grid.patch_size
    bits, _ = _local_parent_bits(parent, grid)
    centers_y = np.arange(gh) * ps + ps // 2
    centers_x = np.arange(gw) * ps + ps // 2
    member = bits[np.ix_(centers_y, centers_x)]
    if int(member.sum()) < 2:
        raise MaskTooSmallError("mask too small to conquer: covers fewer than 2 patches")

    feats = grid.flat()
    clusters: Dict[int, Cluster] = {}
    adjacency: Dict[int, Set[int]] = {}
    for py, px in np.argwhere(member):
        i = int(py) * gw + int(px)
        clusters[i] = Cluster(id=i, patches={i}, feature=feats[i].copy())
        adjacency[i] = set()
    for i in clusters:
        py, px = divmod(i, gw)
        if px + 1 < gw and member[py, px + 1]:
            adjacency[i].add(i + 1)
            adjacency[i + 1].add(i)
        if py + 1 < gh and member[py + 1, px]:
            adjacency[i].add(i + gw)
            adjacency[i + gw].add(i)
    return clusters, adjacency


def merge_pass(
    clusters: Dict[int, Cluster],
    adjacency: Dict[int, Set[int]],
    theta: float,
) -> None:
    """Merge adjacent clusters (in place) while the max pair similarity >= theta.

    Pair selection uses a lazy max-heap: entries are invalidated by cluster
    version stamps instead of being removed, and stale entries are skipped on
    pop. Equal similarities break toward the smallest (min_id, max_id) pair;
    the merged cluster keeps the smaller id.
    """
    if not (0.0 < theta < 1.0):
        raise ValueError(f"theta must be in (0, 1), got {theta}")
    version = {i: 0 for i in clusters}
    heap: List[Tuple[float, int, int, int, int]] = []
    for i, nbrs in adjacency.items():
        for j in nbrs:
            if i < j:
                sim = _cluster_cosine(clusters[i], clusters[j])
                heap.append((-sim, i, j, 0, 0))
    heapq.heapify(heap)

    while heap:
        neg_sim, a, b, va, vb = heapq.heappop(heap)
        if a not in clusters or b not in clusters:
            continue
        if version[a] != va or version[b] != vb:
            continue
        if -neg_sim < theta:
            break
        keep, dead = a, b  # a < b by construction
        merged = clusters[keep]
        gone = clusters[dead]
        total = merged.size + gone.size
        merged.feature = (merged.size * merged.feature + gone.size * gone.feature) / total
        merged.patches |= gone.patches
        version[keep] += 1
        del clusters[dead]
        del version[dead]
        neighbors = (adjacency[keep] | adjacency[dead]) - {keep, dead}
        adjacency[keep] = neighbors
        for nb in adjacency.pop(dead):
            adjacency[nb].discard(dead)
            if nb != keep:
                adjacency[nb].add(keep)
        for nb in neighbors:
            sim = _cluster_cosine(merged, clusters[nb])
            lo, hi = (keep, nb) if keep < nb else (nb, keep)
            heapq.heappush(heap, (-sim, lo, hi, version[lo], version[hi]))


@dataclass(eq=False)
class Hierarchy:
    """Nested level sets S_0..S_l for one coarse parent mask.

    ``levels[0]`` holds a single cluster covering every in-mask patch;
    ``levels[t]`` for t >= 1 is the partition reached after the merge pass at
    ``thetas[l - t]`` (coarser levels have smaller indices and no more
    clusters than finer ones). ``parts`` are the per-level pixel masks in the
    local crop frame; ``bbox`` is the parent box they map back to.
    """

    parent: ScoredMask
    levels: List[List[Cluster]]
    thetas: Tuple[float, ...]
    bbox: BBox
    parts: List[ScoredMask] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.levels) != len(self.thetas) + 1:
            raise ValueError("hierarchy must hold one level per threshold plus the parent level")
        if len(self.levels[0]) != 1:
            raise ValueError("level 0 must contain exactly the parent cluster")
        counts = [len(s) for s in self.levels]
        for i in range(len(counts) - 1):
            if counts[i] > counts[i + 1]:
                raise ValueError(f"level sizes must be non-decreasing, got {counts}")

    @property
    def n_levels(self) -> int:
        return len(self.levels)


def _snapshot(clusters: Dict[int, Cluster]) -> List[Cluster]:
    return [
        Cluster(id=c.id, patches=set(c.patches), feature=c.feature.copy())
        for _, c in sorted(clusters.items())
    ]


def _part_score(member_feats: np.ndarray, centroid: np.ndarray) -> float:
    if member_feats.shape[0] == 1:
        return 1.0
    denom = np.linalg.norm(member_feats, axis=1) * float(np.linalg.norm(centroid))
    sims = np.zeros(member_feats.shape[0])
    ok = denom > 0.0
    sims[ok] = (member_feats[ok] @ centroid) / denom[ok]
    return float(np.clip(sims.mean(), 0.0, 1.0))


def conquer(
    parent: ScoredMask,
    grid: FeatureGrid,
    thetas: Sequence[float],
) -> Hierarchy:
    """Build the full hierarchy for one parent mask.

    Cluster state carries over between thresholds, so each level is a
    coarsening of the previous one. Part masks are the clusters' patch
    blocks intersected with the rasterized parent, scored by the mean cosine
    similarity of member patch features to the cluster mean.
    """
    thetas = tuple(float(t) for t in thetas)
    if not thetas:
        raise ValueError("threshold ladder must not be empty")
    for t in thetas:
        if not (0.0 < t < 1.0):
            raise ValueError(f"thresholds must be in (0, 1), got {t}")
    if any(nxt >= prev for nxt, prev in zip(thetas[1:], thetas)):
        raise ValueError(f"threshold ladder must be strictly descending, got {thetas}")
    if parent.mask_id is None:
        raise ValueError("parent mask needs a mask_id before conquering")

    gh, gw, ps = grid.gh, grid.gw, grid.patch_size
    clusters, adjacency = init_clusters(parent, grid)
    feats = grid.flat()
    member_ids = sorted(clusters)

    fine_to_coarse: List[List[Cluster]] = []
    for theta in thetas:
        merge_pass(clusters, adjacency, theta)
        fine_to_coarse.append(_snapshot(clusters))

    root = Cluster(
        id=member_ids[0],
        patches=set(member_ids),
        feature=feats[member_ids].mean(axis=0),
    )
    levels = [[root]] + fine_to_coarse[::-1]

    parent_bits, box = _local_parent_bits(parent, grid)
    parts: List[ScoredMask] = []
    for t in range(1, len(levels)):
        for c in levels[t]:
            block = np.zeros((gh, gw), dtype=bool)
            rows, cols = np.divmod(sorted(c.patches), gw)
            block[rows, cols] = True
            pixels = np.repeat(np.repeat(block, ps, axis=0), ps, axis=1) & parent_bits
            ids = np.asarray(sorted(c.patches))
            parts.append(
                ScoredMask(
                    mask=rle_encode(pixels),
                    score=_part_score(feats[ids], c.feature),
                    level=t,
                    parent_id=parent.mask_id,
                    mask_id=f"{parent.mask_id}.L{t}.{c.id}",
                )
            )
    return Hierarchy(parent=parent, levels=levels, thetas=thetas, bbox=box, parts=parts)
