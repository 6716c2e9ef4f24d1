"""Simple random walk, chronological loop erasure and exact Green's functions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numba
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ustlab.errors import CapacityError, CappedRunError, DomainError
from ustlab.lattice import WIRED_ROOT, Site, Window
from ustlab.rng import as_generator

STEPS = ((1, 0), (-1, 0), (0, 1), (0, -1))
GREEN_MAX_SITES = 10_000
_BATCH = 4096


@dataclass(frozen=True)
class WalkPath:
    sites: tuple

    @property
    def length(self) -> int:
        return len(self.sites) - 1


@dataclass(frozen=True)
class LoopErasedPath:
    sites: tuple

    @property
    def length(self) -> int:
        """Number of edges."""
        return len(self.sites) - 1

    def __len__(self):
        return len(self.sites)


def default_step_cap(domain_size: int) -> int:
    n = max(int(domain_size), 2)
    return int(64 * n * (1 + math.log2(n)))


class _Directions:
    """Buffered uniform draws from {0,1,2,3}."""

    def __init__(self, rng):
        self._gen = as_generator(rng)
        self._buf = np.empty(0, dtype=np.int64)
        self._i = 0

    def next(self) -> int:
        if self._i == len(self._buf):
            self._buf = self._gen.integers(0, 4, size=_BATCH)
            self._i = 0
        d = self._buf[self._i]
        self._i += 1
        return int(d)


def _window_step(s, d: int, w: Window | None, dirs: _Directions):
    """One step of SRW on Z^2 (w is None) or on the window graph."""
    if w is None:
        return Site(s[0] + STEPS[d][0], s[1] + STEPS[d][1])
    if s is WIRED_ROOT:
        # uniform over the 4*side exterior edges
        e = int(as_generator(dirs._gen).integers(0, 4 * w.side))
        k, p = divmod(e, w.side)
        p -= w.L_out
        return [Site(w.L_out, p), Site(-w.L_out, p), Site(p, w.L_out), Site(p, -w.L_out)][k]
    while True:
        t = Site(s[0] + STEPS[d][0], s[1] + STEPS[d][1])
        if w.contains(t):
            return t
        if w.wired:
            return WIRED_ROOT
        d = dirs.next()


def srw_until_exit(
    start: Site,
    domain: Callable[[Site], bool],
    rng,
    step_cap: int,
    window: Window | None = None,
) -> WalkPath:
    """Walk from ``start`` up to and including the first site outside ``domain``."""
    start = Site(*start)
    if not domain(start):
        raise DomainError(f"start {start} not in domain")
    dirs = _Directions(rng)
    path = [start]
    s = start
    while True:
        if len(path) > step_cap:
            raise CappedRunError(f"walk exceeded step cap {step_cap}", WalkPath(tuple(path)))
        s = _window_step(s, dirs.next(), window, dirs)
        path.append(s)
        if s is WIRED_ROOT or not domain(s):
            return WalkPath(tuple(path))


def srw_until_hit(start, target: Iterable, rng, step_cap: int, window: Window | None = None) -> WalkPath:
    """Walk from ``start`` until its first entry into ``target``.

    With ``window`` given the walk lives on the window graph, so ``target`` may
    contain :data:`WIRED_ROOT`.
    """
    target = set(target)
    if not target:
        raise ValueError("target must be nonempty")
    if start is not WIRED_ROOT:
        start = Site(*start)
    dirs = _Directions(rng)
    path = [start]
    s = start
    while s not in target:
        if len(path) > step_cap:
            raise CappedRunError(f"walk exceeded step cap {step_cap}", WalkPath(tuple(path)))
        s = _window_step(s, dirs.next(), window, dirs)
        path.append(s)
    return WalkPath(tuple(path))


def loop_erase(p) -> LoopErasedPath:
    """Chronological loop erasure.

    A position map from site to its index on the current erased path makes
    each revisit an O(loop length) truncation, O(len(p)) overall.
    """
    sites = p.sites if isinstance(p, (WalkPath, LoopErasedPath)) else tuple(p)
    if not sites:
        raise ValueError("empty path")
    out: list = []
    where: dict = {}
    for s in sites:
        k = where.get(s)
        if k is None:
            where[s] = len(out)
            out.append(s)
        else:
            for t in out[k + 1:]:
                del where[t]
            del out[k + 1:]
    return LoopErasedPath(tuple(out))


@numba.njit(cache=True)
def _lerw_box(n, rng, step_cap):
    w = 2 * n + 3
    pos = np.full(w * w, -1, np.int64)
    cap = w * w + 1
    px = np.empty(cap, np.int64)
    py = np.empty(cap, np.int64)
    x = 0
    y = 0
    px[0] = 0
    py[0] = 0
    pos[(n + 1) * w + (n + 1)] = 0
    length = 1
    steps = 0
    buf = np.uint64(0)
    left = 0
    while True:
        if left == 0:
            buf = np.uint64(rng.integers(0, 4611686018427387904))
            left = 31
        d = buf & np.uint64(3)
        buf >>= np.uint64(2)
        left -= 1
        if d == 0:
            x += 1
        elif d == 1:
            x -= 1
        elif d == 2:
            y += 1
        else:
            y -= 1
        steps += 1
        if steps > step_cap:
            return -1
        key = (y + n + 1) * w + (x + n + 1)
        k = pos[key]
        if k >= 0:
            for j in range(k + 1, length):
                pos[(py[j] + n + 1) * w + (px[j] + n + 1)] = -1
            length = k + 1
        else:
            pos[key] = length
            px[length] = x
            py[length] = y
            length += 1
        if x > n or x < -n or y > n or y < -n:
            return length - 1


def lerw_box_length(n: int, rng, step_cap: int | None = None) -> int:
    """``M_n``: edges of the loop erasure of SRW from 0 stopped on leaving [-n, n]^2."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if step_cap is None:
        step_cap = default_step_cap((2 * n + 1) ** 2)
    m = _lerw_box(int(n), as_generator(rng), int(step_cap))
    if m < 0:
        raise CappedRunError(f"LERW walk for n={n} exceeded step cap {step_cap}")
    return int(m)


def _domain_system(domain: Sequence):
    sites = [Site(*s) for s in domain]
    if len(sites) > GREEN_MAX_SITES:
        raise CapacityError(f"|domain|={len(sites)} exceeds exact-solve bound {GREEN_MAX_SITES}")
    idx = {s: i for i, s in enumerate(sites)}
    if len(idx) != len(sites):
        raise ValueError("domain has repeated sites")
    rows, cols = [], []
    for i, s in enumerate(sites):
        for dx, dy in STEPS:
            j = idx.get(Site(s[0] + dx, s[1] + dy))
            if j is not None:
                rows.append(i)
                cols.append(j)
    n = len(sites)
    Q = sp.csr_matrix((np.full(len(rows), 0.25), (rows, cols)), shape=(n, n))
    A = (sp.identity(n, format="csr") - Q).tocsc()
    return sites, idx, A


def green_function(domain: Sequence, y, z, tol: float = 1e-10) -> float:
    """Expected visits to ``z`` by SRW from ``y`` before leaving ``domain``."""
    sites, idx, A = _domain_system(domain)
    y, z = Site(*y), Site(*z)
    if y not in idx or z not in idx:
        raise DomainError("y and z must lie in the domain")
    rhs = np.zeros(len(sites))
    rhs[idx[z]] = 1.0
    g = spla.spsolve(A, rhs) if len(sites) > 1 else rhs / A.toarray()[0, 0]
    g = np.atleast_1d(g)
    res = np.linalg.norm(A @ g - rhs) / max(np.linalg.norm(rhs), 1.0)
    if res > tol:
        raise ArithmeticError(f"Green's function solve residual {res:.2e} above {tol}")
    return float(g[idx[y]])


def green_matrix(domain: Sequence) -> tuple:
    """All of ``G_A`` at once (dense); returns ``(sites, G)``."""
    sites, _, A = _domain_system(domain)
    G = np.linalg.inv(A.toarray())
    return sites, G


def expected_exit_times(domain: Sequence) -> dict:
    """Exact ``E_y[tau_A]`` for every ``y`` in the domain, from (I - P) h = 1."""
    sites, _, A = _domain_system(domain)
    h = spla.spsolve(A, np.ones(len(sites))) if len(sites) > 1 else np.array([1.0])
    return dict(zip(sites, np.atleast_1d(h)))
