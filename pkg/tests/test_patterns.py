"""Pattern extraction, MST optimality, and scheduling tests.

The spanning-tree weight is checked against exhaustive enumeration of all
labeled spanning trees for small pattern sets (Cayley's p^(p-2) trees via
Prüfer sequences), which is the only independent oracle for minimality.
"""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixtree.patterns import (
    MissingPattern,
    build_mst,
    cluster_patterns,
    extract_patterns,
    hamming_matrix,
    schedule,
)


def patterns_from_masks(masks):
    masks = np.asarray(masks, dtype=bool)
    return [
        MissingPattern(masks[i], np.array([i], dtype=np.int64))
        for i in range(masks.shape[0])
    ]


def prufer_tree_weight(dist):
    """Minimum spanning-tree weight by brute force over Prüfer sequences."""
    p = dist.shape[0]
    if p == 1:
        return 0
    if p == 2:
        return int(dist[0, 1])
    best = None
    for seq in itertools.product(range(p), repeat=p - 2):
        degree = [1] * p
        for s in seq:
            degree[s] += 1
        seq = list(seq)
        total = 0
        deg = degree[:]
        ptr_leaves = sorted(i for i in range(p) if deg[i] == 1)
        import heapq

        heap = ptr_leaves[:]
        heapq.heapify(heap)
        for s in seq:
            leaf = heapq.heappop(heap)
            total += int(dist[leaf, s])
            deg[s] -= 1
            if deg[s] == 1:
                heapq.heappush(heap, s)
        u = heapq.heappop(heap)
        v = heapq.heappop(heap)
        total += int(dist[u, v])
        if best is None or total < best:
            best = total
    return best


class TestExtractPatterns:
    def test_dedup_with_counts(self):
        masks = np.zeros((4, 4), dtype=bool)
        masks[1, 2] = True
        masks[2, 2] = True
        masks[3, 1] = True
        masks[3, 3] = True
        pats = extract_patterns(masks)
        assert len(pats) == 3
        assert [len(p.sample_ids) for p in pats] == [1, 2, 1]
        assert list(pats[1].sample_ids) == [1, 2]

    def test_fully_observed(self):
        pats = extract_patterns(np.zeros((5, 3), dtype=bool))
        assert len(pats) == 1
        assert pats[0].n_m == 0
        assert list(pats[0].sample_ids) == [0, 1, 2, 3, 4]

    def test_all_distinct(self):
        masks = np.eye(6, dtype=bool)
        assert len(extract_patterns(masks)) == 6

    @given(st.integers(1, 40), st.integers(1, 8), st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_partition_property(self, n, d, seed):
        rng = np.random.default_rng(seed)
        masks = rng.random((n, d)) < 0.4
        pats = extract_patterns(masks)
        all_ids = np.concatenate([p.sample_ids for p in pats])
        assert sorted(all_ids) == list(range(n))
        for p in pats:
            assert (masks[p.sample_ids] == p.mask).all()
        keys = {p.mask.tobytes() for p in pats}
        assert len(keys) == len(pats)


class TestBuildMst:
    def test_chain(self):
        pats = patterns_from_masks(
            [[0, 0, 0], [0, 1, 0], [0, 1, 1]]
        )
        tree = build_mst(pats)
        assert tree.total_weight == 2
        assert tree.root == 0  # smallest n_m

    def test_single_pattern(self):
        pats = patterns_from_masks([[0, 1]])
        tree = build_mst(pats)
        assert tree.total_weight == 0
        assert tree.visit_order == [0]
        assert tree.parent[0] == (-1, 0)

    def test_square(self):
        pats = patterns_from_masks([[0, 0], [1, 0], [0, 1], [1, 1]])
        tree = build_mst(pats)
        assert tree.total_weight == 3

    def test_matches_bruteforce_small(self):
        rng = np.random.default_rng(101)
        for trial in range(50):
            p = int(rng.integers(2, 8))
            d = int(rng.integers(3, 10))
            masks = rng.random((p, d)) < 0.5
            # dedupe: distinct patterns required
            masks = np.unique(masks, axis=0)
            pats = patterns_from_masks(masks)
            tree = build_mst(pats)
            dist = hamming_matrix(pats)
            assert tree.total_weight == prufer_tree_weight(dist)

    def test_preorder_and_depths(self):
        rng = np.random.default_rng(102)
        masks = np.unique(rng.random((20, 12)) < 0.3, axis=0)
        pats = patterns_from_masks(masks)
        tree = build_mst(pats)
        seen = set()
        for pid in tree.visit_order:
            par, _ = tree.parent[pid]
            if par >= 0:
                assert par in seen
                assert tree.depth[pid] == tree.depth[par] + 1
            else:
                assert tree.depth[pid] == 0
            seen.add(pid)
        assert len(seen) == len(pats)

    def test_deterministic(self):
        rng = np.random.default_rng(103)
        masks = np.unique(rng.random((30, 10)) < 0.4, axis=0)
        pats = patterns_from_masks(masks)
        t1 = build_mst(pats)
        t2 = build_mst(pats)
        assert t1.visit_order == t2.visit_order
        assert t1.parent == t2.parent

    def test_weight_not_above_first_occurrence_chain(self):
        rng = np.random.default_rng(104)
        for seed in range(10):
            rng = np.random.default_rng(seed)
            masks = np.unique(rng.random((15, 9)) < 0.35, axis=0)
            pats = patterns_from_masks(masks)
            dist = hamming_matrix(pats)
            chain = sum(int(dist[i, i + 1]) for i in range(len(pats) - 1))
            assert build_mst(pats).total_weight <= chain


class TestSchedule:
    def test_blocks_follow_visit_order(self):
        masks = np.array([[0, 0], [0, 0], [1, 0], [0, 0], [1, 0]], dtype=bool)
        pats = extract_patterns(masks)
        tree = build_mst(pats)
        sched = schedule(tree, pats)
        assert list(sched.pattern_order) == tree.visit_order
        expected = np.concatenate([pats[p].sample_ids for p in tree.visit_order])
        assert (sched.sample_order == expected).all()

    def test_single_pattern_preserves_order(self):
        masks = np.zeros((6, 3), dtype=bool)
        pats = extract_patterns(masks)
        sched = schedule(build_mst(pats), pats)
        assert list(sched.sample_order) == list(range(6))

    def test_edge_costs_sum_to_tree_weight(self):
        rng = np.random.default_rng(105)
        masks = rng.random((40, 10)) < 0.4
        pats = extract_patterns(masks)
        tree = build_mst(pats)
        sched = schedule(tree, pats)
        assert sched.edge_costs.sum() == tree.total_weight

    def test_each_sample_once_and_block_distances(self):
        rng = np.random.default_rng(106)
        masks = rng.random((60, 8)) < 0.3
        pats = extract_patterns(masks)
        tree = build_mst(pats)
        sched = schedule(tree, pats)
        assert sorted(sched.sample_order) == list(range(60))
        for k, pid in enumerate(sched.pattern_order):
            par, nd = tree.parent[pid]
            assert nd == sched.edge_costs[k]
            if par >= 0:
                assert (pats[pid].mask ^ pats[par].mask).sum() == nd


class TestClusterPatterns:
    def test_below_threshold_single_group(self):
        rng = np.random.default_rng(107)
        masks = np.unique(rng.random((10, 6)) < 0.5, axis=0)
        pats = patterns_from_masks(masks)
        groups = cluster_patterns(pats, 100)
        assert len(groups) == 1
        assert groups[0].size == len(pats)

    def test_capacity_bound(self):
        rng = np.random.default_rng(108)
        masks = np.unique(rng.random((400, 16)) < 0.5, axis=0)[:250]
        pats = patterns_from_masks(masks)
        groups = cluster_patterns(pats, 100)
        assert len(groups) >= 3
        assert all(g.size <= 100 for g in groups)

    def test_partition_property(self):
        rng = np.random.default_rng(109)
        masks = np.unique(rng.random((300, 14)) < 0.5, axis=0)[:180]
        pats = patterns_from_masks(masks)
        groups = cluster_patterns(pats, 64)
        allids = np.concatenate(groups)
        assert sorted(allids) == list(range(len(pats)))

    def test_forest_schedule(self):
        from mixtree.patterns import build_forest

        rng = np.random.default_rng(110)
        masks = rng.random((100, 12)) < 0.4
        pats = extract_patterns(masks)
        trees = build_forest(pats, max_graph=10)
        sched = schedule(trees, pats)
        assert sorted(sched.pattern_order) == list(range(len(pats)))
        n = sum(len(p.sample_ids) for p in pats)
        assert sorted(sched.sample_order) == list(range(n))

    def test_invalid_max_graph(self):
        pats = patterns_from_masks([[0, 1]])
        with pytest.raises(ValueError):
            cluster_patterns(pats, 0)
