"""Missing-pattern extraction, spanning-tree ordering, and scheduling.

Samples sharing a missingness mask share all per-pattern matrix work, and
patterns that differ in few variables can reuse each other's matrices via
cheap updates. The minimum spanning tree of the pattern graph under
Hamming-distance edge weights therefore gives the cheapest order in which
to visit patterns, with each node deriving its matrices from its parent.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from . import _kernels

__all__ = [
    "MissingPattern",
    "PatternTree",
    "SampleSchedule",
    "extract_patterns",
    "hamming_matrix",
    "build_mst",
    "build_forest",
    "schedule",
    "cluster_patterns",
]


@dataclass(frozen=True)
class MissingPattern:
    """A maximal set of variables simultaneously missing in some samples."""

    mask: NDArray[np.bool_]
    sample_ids: NDArray[np.int64]

    @property
    def n_m(self) -> int:
        return int(self.mask.sum())

    @property
    def n_o(self) -> int:
        return int(self.mask.size - self.mask.sum())

    @property
    def missing_indices(self) -> NDArray[np.int64]:
        return np.nonzero(self.mask)[0].astype(np.int64)

    @property
    def observed_indices(self) -> NDArray[np.int64]:
        return np.nonzero(~self.mask)[0].astype(np.int64)


@dataclass
class PatternTree:
    """Minimum spanning tree over missing patterns with a traversal order.

    ``parent`` maps a pattern id to ``(parent_id, n_d)`` where ``n_d`` is the
    Hamming distance of the connecting edge; the root maps to ``(-1, 0)``.
    ``visit_order`` is a pre-order walk (parents always precede children).
    Nodes whose depth is a multiple of ``recompute_every`` are recomputed
    from scratch instead of being updated from their parent.
    """

    root: int
    parent: dict = field(default_factory=dict)
    visit_order: list = field(default_factory=list)
    depth: dict = field(default_factory=dict)
    recompute_every: int | None = 16

    @property
    def total_weight(self) -> int:
        return int(sum(nd for _, nd in self.parent.values()))

    def needs_scratch(self, pattern_id: int) -> bool:
        if pattern_id == self.root:
            return True
        if self.recompute_every is None:
            return False
        return self.depth[pattern_id] % self.recompute_every == 0


@dataclass(frozen=True)
class SampleSchedule:
    """Sample ordering induced by a pattern-tree traversal.

    Samples of one pattern appear contiguously; pattern blocks follow the
    trees' visit orders. ``edge_costs[k]`` is the Hamming distance from
    ``pattern_order[k]`` to its parent (0 for roots).
    """

    sample_order: NDArray[np.int64]
    pattern_order: NDArray[np.int64]
    edge_costs: NDArray[np.int64]


def extract_patterns(dataset) -> list[MissingPattern]:
    """Deduplicate per-sample missingness masks, in first-occurrence order."""
    mask = dataset.mask if hasattr(dataset, "mask") else np.asarray(dataset, dtype=bool)
    if mask.ndim != 2 or mask.shape[0] == 0:
        raise ValueError("expected a non-empty (n, d) mask")
    n = mask.shape[0]
    packed = np.packbits(mask, axis=1)
    seen: dict[bytes, int] = {}
    groups: list[list[int]] = []
    firsts: list[int] = []
    for i in range(n):
        key = packed[i].tobytes()
        hit = seen.get(key)
        if hit is None:
            seen[key] = len(groups)
            groups.append([i])
            firsts.append(i)
        else:
            groups[hit].append(i)
    return [
        MissingPattern(mask[firsts[g]].copy(), np.asarray(groups[g], dtype=np.int64))
        for g in range(len(groups))
    ]


def hamming_matrix(patterns) -> NDArray[np.int64]:
    """Pairwise Hamming distances between pattern masks, O(p^2) popcounts."""
    masks = np.stack([p.mask for p in patterns])
    packed = np.packbits(masks, axis=1)
    p, nbytes = packed.shape
    pad = (-nbytes) % 8
    if pad:
        packed = np.concatenate(
            [packed, np.zeros((p, pad), dtype=np.uint8)], axis=1)
    words = np.ascontiguousarray(packed).view(np.uint64)
    out = np.empty((p, p), dtype=np.int64)
    _kernels.hamming_packed(words, out)
    return out


def build_mst(patterns, recompute_every: int | None = 16,
              ids=None, dist=None) -> PatternTree:
    """Prim's minimum spanning tree over the (sub)set ``ids`` of patterns.

    Edge weight is the Hamming distance between masks. Deterministic under
    ties: the next node is the unvisited one with minimal (weight, id), and
    parents are only replaced on strict weight improvement.
    """
    if ids is None:
        ids = np.arange(len(patterns), dtype=np.int64)
    else:
        ids = np.asarray(ids, dtype=np.int64)
    if dist is None:
        sub = [patterns[i] for i in ids]
        dist = hamming_matrix(sub)
    m = ids.size
    # root: cheapest conditional-covariance block, ties by first occurrence
    root_local = 0
    best_key = None
    for k in range(m):
        key = (patterns[ids[k]].n_m, int(ids[k]))
        if best_key is None or key < best_key:
            best_key = key
            root_local = k

    tree = PatternTree(root=int(ids[root_local]), recompute_every=recompute_every)
    dist = np.ascontiguousarray(dist, dtype=np.int64)
    parents, _ = _kernels.prim_dense(dist, root_local)
    parent_local = {
        k: (int(parents[k]), 0 if parents[k] < 0 else int(dist[k, parents[k]]))
        for k in range(m)
    }

    children: dict[int, list[int]] = {k: [] for k in range(m)}
    for k, (par, _) in parent_local.items():
        if par >= 0:
            children[par].append(k)
    stack = [root_local]
    tree.depth[int(ids[root_local])] = 0
    while stack:
        u = stack.pop()
        pid = int(ids[u])
        tree.visit_order.append(pid)
        par, nd = parent_local[u]
        tree.parent[pid] = ((-1 if par < 0 else int(ids[par])), nd)
        if par >= 0:
            tree.depth[pid] = tree.depth[int(ids[par])] + 1
        for c in sorted(children[u], reverse=True):
            stack.append(c)
    return tree


def build_forest(patterns, max_graph: int = 4096,
                 recompute_every: int | None = 16) -> list[PatternTree]:
    """One MST per pattern group; groups are capped at ``max_graph`` nodes."""
    groups = cluster_patterns(patterns, max_graph)
    return [build_mst(patterns, recompute_every, ids=g) for g in groups]


def schedule(trees, patterns) -> SampleSchedule:
    """Flatten tree traversals into a contiguous sample ordering."""
    if isinstance(trees, PatternTree):
        trees = [trees]
    pattern_order = []
    edge_costs = []
    for tree in trees:
        for pid in tree.visit_order:
            pattern_order.append(pid)
            edge_costs.append(tree.parent[pid][1])
    covered = sorted(pattern_order)
    if covered != list(range(len(patterns))):
        raise ValueError("trees do not span the pattern set exactly once")
    sample_order = np.concatenate(
        [patterns[pid].sample_ids for pid in pattern_order]
    ).astype(np.int64)
    return SampleSchedule(
        sample_order=sample_order,
        pattern_order=np.asarray(pattern_order, dtype=np.int64),
        edge_costs=np.asarray(edge_costs, dtype=np.int64),
    )


def cluster_patterns(patterns, max_graph: int) -> list[NDArray[np.int64]]:
    """Split patterns into Hamming-space groups of at most ``max_graph``.

    Below the threshold, one group holds everything (the common case). Above
    it, farthest-point seeding followed by capacity-capped medoid assignment
    keeps the O(p^2) spanning-tree work bounded per group.
    """
    p = len(patterns)
    if max_graph < 1:
        raise ValueError("max_graph must be positive")
    if p <= max_graph:
        return [np.arange(p, dtype=np.int64)]

    dist = hamming_matrix(patterns)
    k = -(-p // max_graph)
    seeds = [0]
    mind = dist[0].copy()
    for _ in range(k - 1):
        nxt = int(np.argmax(mind))
        seeds.append(nxt)
        mind = np.minimum(mind, dist[nxt])

    assign = np.full(p, -1, dtype=np.int64)
    for _ in range(3):
        counts = np.zeros(k, dtype=np.int64)
        assign[:] = -1
        order = np.argsort(dist[seeds].min(axis=0), kind="stable")
        for i in order:
            for s in np.argsort(dist[seeds, i], kind="stable"):
                if counts[s] < max_graph:
                    assign[i] = s
                    counts[s] += 1
                    break
        new_seeds = []
        for s in range(k):
            members = np.nonzero(assign == s)[0]
            if members.size == 0:
                new_seeds.append(seeds[s])
                continue
            within = dist[np.ix_(members, members)].sum(axis=1)
            new_seeds.append(int(members[np.argmin(within)]))
        if new_seeds == seeds:
            break
        seeds = new_seeds

    return [np.nonzero(assign == s)[0].astype(np.int64) for s in range(k)
            if (assign == s).any()]
