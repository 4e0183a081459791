"""Reconstruction topology: spanning trees over the view-similarity graph.

Edge weight is 1 - similarity throughout; any strictly decreasing map of
similarity gives the same trees, this is just the simplest. All tie-breaks
prefer the lowest view id so outputs are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidSimilarity


@dataclass(frozen=True)
class SimilarityMatrix:
    s: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise InvalidSimilarity(f"expected square matrix, got {s.shape}")
        if s.shape[0] < 2:
            raise InvalidSimilarity("need at least 2 views")
        if not np.allclose(s, s.T, atol=1e-9):
            raise InvalidSimilarity("matrix is not symmetric")
        if np.any(s < -1e-9) or np.any(s > 1 + 1e-9):
            raise InvalidSimilarity("entries must lie in [0, 1]")
        if not np.allclose(np.diag(s), 1.0, atol=1e-9):
            raise InvalidSimilarity("diagonal must be 1")
        s = np.clip(0.5 * (s + s.T), 0.0, 1.0)
        np.fill_diagonal(s, 1.0)
        object.__setattr__(self, "s", s)

    @property
    def n(self) -> int:
        return self.s.shape[0]

    def weights(self) -> np.ndarray:
        return 1.0 - self.s


@dataclass(frozen=True)
class SpanningTree:
    root: int
    parent: dict  # view id -> parent view id, None at the root
    depth: dict  # view id -> layer index

    def nodes(self) -> list[int]:
        return sorted(self.parent)

    def children(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {v: [] for v in self.parent}
        for v, p in self.parent.items():
            if p is not None:
                out[p].append(v)
        for v in out:
            out[v].sort()
        return out

    def max_depth(self) -> int:
        return max(self.depth.values())

    def edges(self) -> set[tuple[int, int]]:
        return {(min(v, p), max(v, p)) for v, p in self.parent.items() if p is not None}

    def validate(self) -> None:
        roots = [v for v, p in self.parent.items() if p is None]
        if roots != [self.root]:
            raise ValueError(f"tree must have exactly the declared root, got {roots}")
        if self.depth[self.root] != 0:
            raise ValueError("root depth must be 0")
        if set(self.depth) != set(self.parent):
            raise ValueError("depth and parent maps disagree on the node set")
        for v, p in self.parent.items():
            if p is None:
                continue
            if p not in self.parent:
                raise ValueError(f"parent {p} of {v} is not in the tree")
            if self.depth[v] != self.depth[p] + 1:
                raise ValueError(f"depth of {v} inconsistent with its parent")
        # acyclic and spanning: every node must reach the root
        for v in self.parent:
            seen = set()
            while v is not None:
                if v in seen:
                    raise ValueError("cycle detected")
                seen.add(v)
                v = self.parent[v]
            if self.root not in seen:
                raise ValueError("node disconnected from root")


@dataclass(frozen=True)
class SpanningForest:
    trees: tuple

    @property
    def root_set(self) -> set[int]:
        return {t.root for t in self.trees}

    def nodes(self) -> list[int]:
        out = []
        for t in self.trees:
            out.extend(t.parent)
        return sorted(out)

    def validate(self, n: int | None = None) -> None:
        nodes = self.nodes()
        if len(nodes) != len(set(nodes)):
            raise ValueError("trees overlap")
        if len(self.root_set) != len(self.trees):
            raise ValueError("duplicate roots")
        if n is not None and nodes != list(range(n)):
            raise ValueError("trees do not partition the views")
        for t in self.trees:
            t.validate()


def _depths_from_parents(parent: dict) -> dict:
    children: dict[int, list[int]] = {v: [] for v in parent}
    root = None
    for v, p in parent.items():
        if p is None:
            root = v
        else:
            children[p].append(v)
    depth = {root: 0}
    stack = [root]
    while stack:
        v = stack.pop()
        for c in children[v]:
            depth[c] = depth[v] + 1
            stack.append(c)
    if len(depth) != len(parent):
        raise ValueError("parent map is not a single connected tree")
    return depth


def _orient(edges: set[tuple[int, int]], nodes: list[int], root: int) -> SpanningTree:
    adj: dict[int, list[int]] = {v: [] for v in nodes}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    for v in adj:
        adj[v].sort()
    parent = {root: None}
    depth = {root: 0}
    queue = [root]
    while queue:
        v = queue.pop(0)
        for c in adj[v]:
            if c not in parent:
                parent[c] = v
                depth[c] = depth[v] + 1
                queue.append(c)
    tree = SpanningTree(root, parent, depth)
    tree.validate()
    return tree


def similarity_root(sim: SimilarityMatrix) -> int:
    """View with the largest total similarity to all others, lowest id on ties."""
    return int(np.argmax(sim.s.sum(axis=1)))


def build_mst(sim: SimilarityMatrix) -> SpanningTree:
    """Minimum spanning tree over weights 1 - s, rooted at the similarity-sum argmax."""
    n = sim.n
    w = sim.weights()
    root = similarity_root(sim)
    in_tree = np.zeros(n, dtype=bool)
    in_tree[root] = True
    best_w = w[root].copy()
    best_p = np.full(n, root)
    parent = {root: None}
    for _ in range(n - 1):
        cand = np.where(~in_tree, best_w, np.inf)
        v = int(np.argmin(cand))  # argmin takes the lowest id on ties
        parent[v] = int(best_p[v])
        in_tree[v] = True
        update = ~in_tree & (w[v] < best_w)
        best_w[update] = w[v][update]
        best_p[update] = v
    depth = _depths_from_parents(parent)
    tree = SpanningTree(root, parent, depth)
    tree.validate()
    return tree


def build_spt(sim: SimilarityMatrix, root: int) -> SpanningTree:
    """Dijkstra shortest-path tree from `root` over weights 1 - s."""
    n = sim.n
    w = sim.weights()
    dist = np.full(n, np.inf)
    dist[root] = 0.0
    parent = {root: None}
    done = np.zeros(n, dtype=bool)
    for _ in range(n):
        cand = np.where(~done, dist, np.inf)
        v = int(np.argmin(cand))
        done[v] = True
        relax = ~done & (dist[v] + w[v] < dist)
        for u in np.flatnonzero(relax):
            dist[u] = dist[v] + w[v, u]
            parent[int(u)] = v
    depth = _depths_from_parents(parent)
    tree = SpanningTree(root, parent, depth)
    tree.validate()
    return tree


def compress_tree(t: SpanningTree, k: int) -> SpanningTree:
    """Relink even-depth nodes to their grandparents, k times.

    Each pass reads the input tree's depths, relinks every node at even
    depth >= 2 simultaneously, then recomputes depths; k passes compress the
    maximum depth to ceil(d / 2^k).
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    tree = t
    for _ in range(k):
        parent = {}
        for v, p in tree.parent.items():
            if p is not None and tree.depth[v] % 2 == 0 and tree.depth[v] >= 2:
                parent[v] = tree.parent[p]
            else:
                parent[v] = p
        tree = SpanningTree(tree.root, parent, _depths_from_parents(parent))
        tree.validate()
    return tree


def _kmedoids_once(d: np.ndarray, k: int, rng: np.random.Generator,
                   max_iters: int) -> tuple[float, tuple[int, ...]]:
    n = d.shape[0]
    medoids = [int(rng.integers(n))]
    while len(medoids) < k:
        nearest_sq = np.min(d[:, medoids], axis=1) ** 2
        nearest_sq[medoids] = 0.0
        total = nearest_sq.sum()
        if total <= 0:
            extra = [v for v in range(n) if v not in medoids]
            medoids.append(extra[0])
            continue
        medoids.append(int(rng.choice(n, p=nearest_sq / total)))

    def cost(ms):
        return float(np.min(d[:, ms], axis=1).sum())

    current = sorted(medoids)
    current_cost = cost(current)
    for _ in range(max_iters):
        best = (current_cost, current)
        for mi, m in enumerate(current):
            for o in range(n):
                if o in current:
                    continue
                trial = sorted(current[:mi] + [o] + current[mi + 1:])
                c = cost(trial)
                if c < best[0] - 1e-15:
                    best = (c, trial)
        if best[1] == current:
            break
        current_cost, current = best
    return current_cost, tuple(current)


def kmedoids_roots(sim: SimilarityMatrix, k: int, seed: int) -> list[int]:
    """K-medoids (PAM swap phase, k-medoids++ seeding) on distance 1 - s.

    Runs a handful of deterministic seeded restarts and keeps the best
    clustering, which reliably lands on the global optimum at the small view
    counts where the result is audited exhaustively.
    """
    n = sim.n
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if k == n:
        return list(range(n))
    d = sim.weights()
    best: tuple[float, tuple[int, ...]] | None = None
    for restart in range(8):
        rng = np.random.default_rng([abs(int(seed)), restart])
        c, medoids = _kmedoids_once(d, k, rng, max_iters=100)
        if best is None or c < best[0] - 1e-15 or (abs(c - best[0]) <= 1e-15 and medoids < best[1]):
            best = (c, medoids)
    return list(best[1])


def build_forest(sim: SimilarityMatrix, roots) -> SpanningForest:
    """Multi-root MST forest via a virtual node.

    The virtual node connects to every root with weight zero while root-root
    edges get infinite weight, so the MST minus the virtual node is a forest
    with exactly the requested roots.
    """
    roots = sorted(set(int(r) for r in roots))
    if not roots:
        raise ValueError("roots must be nonempty")
    if roots[0] < 0 or roots[-1] >= sim.n:
        raise ValueError(f"roots out of range for {sim.n} views")
    n = sim.n
    root_mask = np.zeros(n, dtype=bool)
    root_mask[roots] = True
    w = sim.weights()
    w[np.ix_(root_mask, root_mask)] = np.inf

    # Prim from the virtual node: seed every root at distance 0
    best_w = np.full(n, np.inf)
    best_p = np.full(n, -1)
    best_w[roots] = 0.0
    in_tree = np.zeros(n, dtype=bool)
    parent = {}
    for _ in range(n):
        cand = np.where(~in_tree, best_w, np.inf)
        v = int(np.argmin(cand))
        if not np.isfinite(cand[v]):
            raise ValueError("graph disconnected under the root constraints")
        parent[v] = None if best_p[v] < 0 else int(best_p[v])
        in_tree[v] = True
        update = ~in_tree & (w[v] < best_w)
        best_w[update] = w[v][update]
        best_p[update] = v

    trees = []
    for r in roots:
        members = {r}
        grew = True
        while grew:
            grew = False
            for v, p in parent.items():
                if p in members and v not in members:
                    members.add(v)
                    grew = True
        sub_parent = {v: parent[v] for v in members}
        trees.append(SpanningTree(r, sub_parent, _depths_from_parents(sub_parent)))
    forest = SpanningForest(tuple(trees))
    forest.validate(n)
    return forest
