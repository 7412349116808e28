"""Conquer-stage tests: merging mechanics, hierarchy invariants, oracle equivalence."""

import numpy as np
import pytest

from hiermask.conquer import (
    Cluster,
    MaskTooSmallError,
    conquer,
    init_clusters,
    merge_pass,
)
from hiermask.features import FeatureGrid, local_grid
from hiermask.masks import ScoredMask, bbox_of, rle_encode


def patch_parent(member, patch_size=4, mask_id="p"):
    """Patch-aligned parent mask from a boolean patch grid."""
    pixels = np.repeat(np.repeat(member, patch_size, axis=0), patch_size, axis=1)
    return ScoredMask(mask=rle_encode(pixels), score=0.9, mask_id=mask_id)


def make_grid(data, patch_size=4):
    return FeatureGrid(np.asarray(data, dtype=np.float32), patch_size)


def singleton_state(features, adjacency):
    clusters = {
        i: Cluster(id=i, patches={i}, feature=np.asarray(f, dtype=np.float64).copy())
        for i, f in features.items()
    }
    adj = {i: set(n) for i, n in adjacency.items()}
    return clusters, adj


# --- independent reference implementation -------------------------------
# Rescans every adjacent pair each step instead of using a heap; same
# tie-break (smallest (min_id, max_id)) and the same weighted-mean update.

def oracle_merge_until(clusters, adj, theta):
    while True:
        best = None
        for a in sorted(clusters):
            for b in sorted(adj[a]):
                if b <= a:
                    continue
                fa, fb = clusters[a][1], clusters[b][1]
                denom = float(np.linalg.norm(fa)) * float(np.linalg.norm(fb))
                sim = 0.0 if denom == 0.0 else float(fa @ fb) / denom
                if best is None or sim > best[0]:
                    best = (sim, a, b)
        if best is None or best[0] < theta:
            return
        _, a, b = best
        pa, fa = clusters[a]
        pb, fb = clusters[b]
        na, nb = len(pa), len(pb)
        clusters[a] = (pa | pb, (na * fa + nb * fb) / (na + nb))
        del clusters[b]
        adj[a] = (adj[a] | adj[b]) - {a, b}
        for x in adj.pop(b):
            adj[x].discard(b)
            if x != a:
                adj[x].add(a)


def oracle_levels(member_ids, feats, adjacency, thetas):
    clusters = {i: ({i}, feats[i].astype(np.float64).copy()) for i in member_ids}
    adj = {i: set(adjacency[i]) for i in member_ids}
    out = []
    for theta in thetas:
        oracle_merge_until(clusters, adj, theta)
        out.append({frozenset(p) for p, _ in clusters.values()})
    return out


def partition(level):
    return {frozenset(c.patches) for c in level}


class TestInitClusters:
    def test_full_grid(self):
        member = np.ones((3, 3), dtype=bool)
        grid = make_grid(np.random.default_rng(0).standard_normal((3, 3, 4)))
        clusters, adj = init_clusters(patch_parent(member), grid)
        assert set(clusters) == set(range(9))
        assert adj[4] == {1, 3, 5, 7}
        assert adj[0] == {1, 3}

    def test_one_row_is_path_graph(self):
        grid = make_grid(np.random.default_rng(1).standard_normal((1, 5, 3)))
        member = np.ones((1, 5), dtype=bool)
        clusters, adj = init_clusters(patch_parent(member), grid)
        assert adj[0] == {1}
        assert adj[2] == {1, 3}
        assert adj[4] == {3}

    def test_l_shape_excludes_notch_pairs(self):
        # Column 0 plus bottom row of a 4x4 grid.
        member = np.zeros((4, 4), dtype=bool)
        member[:, 0] = True
        member[3, :] = True
        grid = make_grid(np.random.default_rng(2).standard_normal((4, 4, 3)))
        clusters, adj = init_clusters(patch_parent(member), grid)
        expected = {
            0: {4}, 4: {0, 8}, 8: {4, 12},
            12: {8, 13}, 13: {12, 14}, 14: {13, 15}, 15: {14},
        }
        assert adj == expected

    def test_too_small(self):
        # One fully covered patch plus a single stray pixel: the bbox spans
        # the 2x2 local grid but only one patch center is foreground.
        pixels = np.zeros((8, 8), dtype=bool)
        pixels[0:4, 0:4] = True
        pixels[7, 7] = True
        parent = ScoredMask(mask=rle_encode(pixels), score=0.5, mask_id="tiny")
        grid = make_grid(np.random.default_rng(3).standard_normal((2, 2, 3)))
        with pytest.raises(MaskTooSmallError):
            init_clusters(parent, grid)


class TestMergePass:
    def test_identical_features_merge_once(self):
        clusters, adj = singleton_state(
            {0: [1.0, 0.0], 1: [1.0, 0.0]}, {0: {1}, 1: {0}}
        )
        merge_pass(clusters, adj, 0.6)
        assert set(clusters) == {0}
        assert clusters[0].patches == {0, 1}
        np.testing.assert_array_equal(clusters[0].feature, [1.0, 0.0])

    def test_orthogonal_features_do_not_merge(self):
        clusters, adj = singleton_state(
            {0: [1.0, 0.0], 1: [0.0, 1.0]}, {0: {1}, 1: {0}}
        )
        merge_pass(clusters, adj, 0.6)
        assert set(clusters) == {0, 1}

    def test_path_partial_merge_weighted_feature(self):
        f1 = np.array([1.0, 0.0])
        f2 = np.array([1.0, 0.1]) / np.linalg.norm([1.0, 0.1])
        f3 = np.array([0.0, 1.0])
        clusters, adj = singleton_state(
            {0: f1, 1: f2, 2: f3}, {0: {1}, 1: {0, 2}, 2: {1}}
        )
        merge_pass(clusters, adj, 0.9)
        assert set(clusters) == {0, 2}
        assert clusters[0].patches == {0, 1}
        np.testing.assert_allclose(clusters[0].feature, (f1 + f2) / 2, atol=0)

    def test_matches_oracle_on_random_states(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            n = int(rng.integers(2, 12))
            feats = {i: rng.standard_normal(3) for i in range(n)}
            adj = {i: set() for i in range(n)}
            for i in range(n - 1):  # random path plus chords
                adj[i].add(i + 1)
                adj[i + 1].add(i)
            for _ in range(n // 2):
                a, b = rng.integers(0, n, 2)
                if a != b:
                    adj[int(a)].add(int(b))
                    adj[int(b)].add(int(a))
            theta = float(rng.uniform(0.05, 0.95))
            clusters, live_adj = singleton_state(feats, adj)
            merge_pass(clusters, live_adj, theta)
            ref = {i: ({i}, feats[i].astype(np.float64).copy()) for i in range(n)}
            ref_adj = {i: set(adj[i]) for i in range(n)}
            oracle_merge_until(ref, ref_adj, theta)
            assert {frozenset(c.patches) for c in clusters.values()} == {
                frozenset(p) for p, _ in ref.values()
            }

    def test_theta_range(self):
        clusters, adj = singleton_state({0: [1.0], 1: [1.0]}, {0: {1}, 1: {0}})
        with pytest.raises(ValueError, match="theta"):
            merge_pass(clusters, adj, 1.0)


class TestConquer:
    def test_two_block_grid_recovered_at_every_level(self):
        # Left half and right half with orthogonal features.
        data = np.zeros((4, 6, 2), dtype=np.float32)
        data[:, :3, 0] = 1.0
        data[:, 3:, 1] = 1.0
        grid = make_grid(data)
        parent = patch_parent(np.ones((4, 6), dtype=bool))
        h = conquer(parent, grid, thetas=(0.6, 0.5, 0.4, 0.3, 0.2, 0.1))
        left = frozenset(y * 6 + x for y in range(4) for x in range(3))
        right = frozenset(y * 6 + x for y in range(4) for x in range(3, 6))
        for level in h.levels[1:]:
            assert partition(level) == {left, right}
        assert partition(h.levels[0]) == {left | right}

    def test_single_threshold_equals_one_merge_pass(self):
        rng = np.random.default_rng(5)
        grid = make_grid(rng.standard_normal((3, 4, 3)))
        parent = patch_parent(np.ones((3, 4), dtype=bool))
        h = conquer(parent, grid, thetas=(0.4,))
        clusters, adj = init_clusters(parent, grid)
        merge_pass(clusters, adj, 0.4)
        assert partition(h.levels[1]) == {frozenset(c.patches) for c in clusters.values()}

    def test_uniform_features_collapse(self):
        grid = make_grid(np.ones((3, 3, 2)))
        parent = patch_parent(np.ones((3, 3), dtype=bool))
        h = conquer(parent, grid, thetas=(0.9, 0.5, 0.1))
        for level in h.levels:
            assert len(level) == 1

    def test_non_descending_ladder_rejected(self):
        grid = make_grid(np.ones((2, 2, 2)))
        parent = patch_parent(np.ones((2, 2), dtype=bool))
        with pytest.raises(ValueError, match="descending"):
            conquer(parent, grid, thetas=(0.5, 0.5))
        with pytest.raises(ValueError, match="in \\(0, 1\\)"):
            conquer(parent, grid, thetas=(1.2, 0.5))

    def test_parent_needs_id(self):
        grid = make_grid(np.ones((2, 2, 2)))
        parent = ScoredMask(mask=rle_encode(np.ones((8, 8), dtype=bool)), score=0.5)
        with pytest.raises(ValueError, match="mask_id"):
            conquer(parent, grid, thetas=(0.5,))

    def test_part_masks_cover_parent_and_carry_lineage(self):
        rng = np.random.default_rng(6)
        grid = make_grid(rng.standard_normal((4, 4, 3)))
        member = np.ones((4, 4), dtype=bool)
        parent = patch_parent(member, mask_id="d7")
        h = conquer(parent, grid, thetas=(0.8, 0.4))
        for part in h.parts:
            assert part.parent_id == "d7"
            assert 1 <= part.level <= 2
            assert 0.0 <= part.score <= 1.0
        for t in (1, 2):
            level_parts = [p for p in h.parts if p.level == t]
            union = np.zeros((16, 16), dtype=bool)
            for p in level_parts:
                bits = p.mask.to_bitmap()
                assert not (union & bits).any()  # parts are disjoint
                union |= bits
            np.testing.assert_array_equal(union, parent.mask.to_bitmap())


def random_member_grid(rng, gh, gw):
    """Random connected-ish membership covering at least 2 patches."""
    member = rng.random((gh, gw)) < rng.uniform(0.4, 0.9)
    if member.sum() < 2:
        member[0, 0] = member[0, 1] = True
    return member


class TestOracleEquivalence:
    def test_conquer_matches_bruteforce(self):
        rng = np.random.default_rng(7)
        for trial in range(120):
            gh = int(rng.integers(2, 9))
            gw = int(rng.integers(2, 9))
            if gh * gw < 4:
                gw = 4
            dim = int(rng.integers(2, 6))
            full = make_grid(rng.standard_normal((gh, gw, dim)))
            member = random_member_grid(rng, gh, gw)
            parent = patch_parent(member, mask_id=f"t{trial}")
            box = bbox_of(parent.mask)
            if (box.height // 4) * (box.width // 4) < 4:
                continue
            sub = local_grid(full, box)
            n_thetas = int(rng.integers(1, 6))
            thetas = tuple(sorted(rng.uniform(0.02, 0.98, n_thetas), reverse=True))
            if any(a <= b for a, b in zip(thetas[1:], thetas)):
                continue
            try:
                h = conquer(parent, sub, thetas)
            except MaskTooSmallError:
                continue

            # Oracle membership/adjacency from the planted patch sets alone.
            py0, px0 = box.y1 // 4, box.x1 // 4
            sub_member = member[py0:py0 + sub.gh, px0:px0 + sub.gw]
            ids = [int(y) * sub.gw + int(x) for y, x in np.argwhere(sub_member)]
            feats = {
                i: sub.data.reshape(-1, dim).astype(np.float64)[i] for i in ids
            }
            adjacency = {i: set() for i in ids}
            for i in ids:
                y, x = divmod(i, sub.gw)
                for dy, dx in ((0, 1), (1, 0)):
                    yy, xx = y + dy, x + dx
                    j = yy * sub.gw + xx
                    if yy < sub.gh and xx < sub.gw and j in adjacency:
                        adjacency[i].add(j)
                        adjacency[j].add(i)
            expected = oracle_levels(ids, feats, adjacency, thetas)
            got = list(reversed([partition(level) for level in h.levels[1:]]))
            assert got == expected, f"trial {trial} diverged"

    def test_hierarchy_invariants_fuzzed(self):
        rng = np.random.default_rng(8)
        for trial in range(150):
            gh = int(rng.integers(2, 8))
            gw = int(rng.integers(2, 8))
            if gh * gw < 4:
                gw = 4
            full = make_grid(rng.standard_normal((gh, gw, 3)))
            member = random_member_grid(rng, gh, gw)
            parent = patch_parent(member, mask_id=f"f{trial}")
            box = bbox_of(parent.mask)
            if (box.height // 4) * (box.width // 4) < 4:
                continue
            sub = local_grid(full, box)
            try:
                h = conquer(parent, sub, thetas=(0.6, 0.5, 0.4, 0.3, 0.2, 0.1))
            except MaskTooSmallError:
                continue

            counts = [len(level) for level in h.levels]
            assert all(a <= b for a, b in zip(counts, counts[1:]))

            member_set = set().union(*(c.patches for c in h.levels[0]))
            feats = sub.data.reshape(-1, 3).astype(np.float64)
            for t, level in enumerate(h.levels):
                seen = set()
                for c in level:
                    assert not (seen & c.patches)  # conservation: no overlap
                    seen |= c.patches
                    mean = feats[sorted(c.patches)].mean(axis=0)
                    np.testing.assert_allclose(c.feature, mean, atol=1e-6)
                assert seen == member_set  # conservation: no loss
                if t + 1 < len(h.levels):
                    finer = {frozenset(c.patches) for c in h.levels[t + 1]}
                    for c in level:
                        parts = [f for f in finer if f <= c.patches]
                        assert set().union(*parts) == c.patches  # exact nesting

    def test_determinism(self):
        rng = np.random.default_rng(9)
        grid = make_grid(rng.standard_normal((5, 5, 4)))
        parent = patch_parent(np.ones((5, 5), dtype=bool))
        a = conquer(parent, grid, thetas=(0.5, 0.3))
        b = conquer(parent, grid, thetas=(0.5, 0.3))
        assert [partition(l) for l in a.levels] == [partition(l) for l in b.levels]
        assert [p.mask for p in a.parts] == [p.mask for p in b.parts]
        assert [p.score for p in a.parts] == [p.score for p in b.parts]
