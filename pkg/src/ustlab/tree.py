"""Rooted spanning-tree container shared by samplers and tree metrics."""

from __future__ import annotations

from functools import cached_property

import numba
import numpy as np

from ustlab.errors import DomainError


@numba.njit(cache=True)
def _bfs_order(indptr, indices, root):
    n = indptr.shape[0] - 1
    order = np.empty(n, np.int64)
    depth = np.full(n, -1, np.int64)
    order[0] = root
    depth[root] = 0
    head = 0
    tail = 1
    while head < tail:
        v = order[head]
        head += 1
        for k in range(indptr[v], indptr[v + 1]):
            w = indices[k]
            if depth[w] < 0:
                depth[w] = depth[v] + 1
                order[tail] = w
                tail += 1
    return order[:tail], depth


def csr_from_parent(parent: np.ndarray):
    n = parent.shape[0]
    child = np.flatnonzero(parent >= 0)
    a = np.concatenate([child, parent[child]])
    b = np.concatenate([parent[child], child])
    perm = np.lexsort((b, a))
    a, b = a[perm], b[perm]
    degree = np.bincount(a, minlength=n).astype(np.int64)
    indptr = np.zeros(n + 1, np.int64)
    np.cumsum(degree, out=indptr[1:])
    return indptr, b.astype(np.int64), degree


class SpanningTree:
    """A tree on labelled vertices with planar coordinates.

    ``parent[v]`` points one step toward ``root`` (``-1`` at the root).
    ``lattice[v]`` is False for the contracted wired root, whose coordinates
    carry no meaning.
    """

    def __init__(self, parent, coords, lattice=None, site_index=None):
        self.parent = np.asarray(parent, dtype=np.int64)
        self.coords = np.asarray(coords, dtype=np.float64)
        n = self.parent.shape[0]
        if self.coords.shape != (n, 2):
            raise ValueError("coords must have shape (n, 2)")
        self.lattice = np.ones(n, dtype=bool) if lattice is None else np.asarray(lattice, dtype=bool)
        roots = np.flatnonzero(self.parent < 0)
        if roots.size != 1:
            raise ValueError(f"expected exactly one root, found {roots.size}")
        self.root = int(roots[0])
        self._site_index = site_index

    @classmethod
    def from_edges(cls, sites, edges, root) -> "SpanningTree":
        """Build from a list of sites, undirected edges between them and a root."""
        sites = [tuple(s) for s in sites]
        idx = {s: i for i, s in enumerate(sites)}
        n = len(sites)
        adj = [[] for _ in range(n)]
        for a, b in edges:
            i, j = idx[tuple(a)], idx[tuple(b)]
            adj[i].append(j)
            adj[j].append(i)
        parent = np.full(n, -2, np.int64)
        r = idx[tuple(root)]
        parent[r] = -1
        stack = [r]
        while stack:
            v = stack.pop()
            for w in adj[v]:
                if parent[w] == -2:
                    parent[w] = v
                    stack.append(w)
        if (parent == -2).any() or len(edges) != n - 1:
            raise ValueError("edges do not form a spanning tree")
        return cls(parent, np.array(sites, dtype=np.float64), site_index=idx)

    @property
    def n_nodes(self) -> int:
        return self.parent.shape[0]

    @property
    def n_edges(self) -> int:
        return int((self.parent >= 0).sum())

    @cached_property
    def _csr(self):
        return csr_from_parent(self.parent)

    @property
    def indptr(self) -> np.ndarray:
        return self._csr[0]

    @property
    def indices(self) -> np.ndarray:
        return self._csr[1]

    @property
    def degree(self) -> np.ndarray:
        """The measure mu: number of tree edges at each vertex."""
        return self._csr[2]

    @cached_property
    def _bfs(self):
        return _bfs_order(self.indptr, self.indices, self.root)

    @property
    def depth(self) -> np.ndarray:
        return self._bfs[1]

    @property
    def bfs_order(self) -> np.ndarray:
        return self._bfs[0]

    def node(self, s) -> int:
        """Vertex index of a site (or of a vertex index passed through)."""
        if isinstance(s, (int, np.integer)):
            return int(s)
        if self._site_index is None:
            self._site_index = {
                (int(c[0]) if float(c[0]).is_integer() else float(c[0]),
                 int(c[1]) if float(c[1]).is_integer() else float(c[1])): i
                for i, c in enumerate(self.coords) if self.lattice[i]
            }
        try:
            return self._site_index[tuple(s)]
        except KeyError:
            raise DomainError(f"site {s!r} not in tree") from None

    def site(self, v: int):
        c = self.coords[v]
        return tuple(int(t) if float(t).is_integer() else float(t) for t in c)

    def neighbours(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def edges(self) -> np.ndarray:
        child = np.flatnonzero(self.parent >= 0)
        return np.stack([child, self.parent[child]], axis=1)

    def is_valid(self) -> bool:
        """Acyclic, connected, edge count n - 1, degrees consistent."""
        if self.n_edges != self.n_nodes - 1:
            return False
        if self.bfs_order.shape[0] != self.n_nodes:
            return False
        return int(self.degree.sum()) == 2 * self.n_edges

    def rerooted(self, new_root: int) -> np.ndarray:
        """Parent array of the same tree rooted at ``new_root``."""
        parent = self.parent.copy()
        prev = -1
        v = int(new_root)
        while v >= 0:
            nxt = int(self.parent[v])
            parent[v] = prev
            prev = v
            v = nxt
        return parent
