"""Lattice geometry: sites, simulation windows and the two extrinsic metrics.

Sites of a window ``B_inf(0, L_out)`` are numbered in row-major order,
``index = (y + L_out) * side + (x + L_out)`` with ``side = 2 * L_out + 1``.
Under the wired convention the exterior of the box is contracted to one extra
vertex whose index is ``n_sites`` (one past the last lattice site).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ustlab.errors import DomainError, ValidationError

WIRED = "wired"
FREE = "free"
BOUNDARIES = (WIRED, FREE)

# largest half-width accepted; keeps site indices inside int32
MAX_L_OUT = 16_000


class Site(NamedTuple):
    x: int
    y: int


class _WiredRoot:
    """Singleton token for the contracted exterior vertex."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "WIRED_ROOT"

    def __reduce__(self):
        return (_WiredRoot, ())


WIRED_ROOT = _WiredRoot()


@dataclass(frozen=True)
class Window:
    """Finite stand-in for Z^2.

    Statistics are read inside ``B_inf(0, L)`` only; the tree is sampled on
    the larger box ``B_inf(0, L_out)``.
    """

    L: int
    L_out: int
    boundary: str = WIRED

    def __post_init__(self):
        if not (1 <= self.L <= self.L_out):
            raise ValidationError(f"need 1 <= L <= L_out, got L={self.L}, L_out={self.L_out}")
        if self.L_out > MAX_L_OUT:
            raise ValidationError(f"L_out={self.L_out} exceeds {MAX_L_OUT}")
        if self.boundary not in BOUNDARIES:
            raise ValidationError(f"boundary must be one of {BOUNDARIES}")

    @classmethod
    def with_margin(cls, L: int, margin: float = 4, boundary: str = WIRED) -> "Window":
        return cls(L, int(round(margin * L)), boundary)

    @property
    def wired(self) -> bool:
        return self.boundary == WIRED

    @property
    def side(self) -> int:
        return 2 * self.L_out + 1

    @property
    def n_sites(self) -> int:
        return self.side * self.side

    @property
    def n_nodes(self) -> int:
        """Vertices of the simulation graph, counting the wired root."""
        return self.n_sites + (1 if self.wired else 0)

    @property
    def root_index(self) -> int:
        return self.n_sites if self.wired else self.index(Site(0, 0))

    def contains(self, s) -> bool:
        return abs(s[0]) <= self.L_out and abs(s[1]) <= self.L_out

    def in_measurement(self, s) -> bool:
        return abs(s[0]) <= self.L and abs(s[1]) <= self.L

    def index(self, s) -> int:
        if s is WIRED_ROOT:
            if not self.wired:
                raise DomainError("free window has no wired root")
            return self.n_sites
        if not self.contains(s):
            raise DomainError(f"site {tuple(s)} outside B_inf(0, {self.L_out})")
        return (s[1] + self.L_out) * self.side + (s[0] + self.L_out)

    def site(self, i: int):
        if self.wired and i == self.n_sites:
            return WIRED_ROOT
        if not 0 <= i < self.n_sites:
            raise DomainError(f"index {i} out of range")
        y, x = divmod(int(i), self.side)
        return Site(x - self.L_out, y - self.L_out)

    def sites(self, idx) -> tuple:
        """Vectorized :meth:`site` over an index array."""
        idx = np.asarray(idx, np.int64)
        if idx.size and (idx.min() < 0 or idx.max() > self.n_nodes - 1):
            raise DomainError("index out of range")
        y, x = np.divmod(idx, self.side)
        xs = (x - self.L_out).tolist()
        ys = (y - self.L_out).tolist()
        root = self.n_sites if self.wired else -1
        return tuple(WIRED_ROOT if i == root else Site(a, b)
                     for i, a, b in zip(idx.tolist(), xs, ys))

    def coords(self) -> np.ndarray:
        """(n_nodes, 2) int64 coordinates; the wired root row is (0, 0) and
        must be masked with :meth:`lattice_mask`."""
        r = np.arange(-self.L_out, self.L_out + 1, dtype=np.int64)
        xs = np.tile(r, self.side)
        ys = np.repeat(r, self.side)
        c = np.stack([xs, ys], axis=1)
        if self.wired:
            c = np.vstack([c, np.zeros((1, 2), dtype=np.int64)])
        return c

    def lattice_mask(self) -> np.ndarray:
        m = np.ones(self.n_nodes, dtype=bool)
        if self.wired:
            m[-1] = False
        return m


def neighbors(s: Site, w: Window) -> list:
    """Lattice neighbours of ``s`` inside the window.

    Under the wired convention the neighbours falling outside the box are
    replaced by a single :data:`WIRED_ROOT` entry, even at corners. (The
    walk engine still treats a corner's two exterior edges as two edges.)
    """
    if s is WIRED_ROOT or not w.contains(s):
        raise DomainError(f"site {s!r} outside simulation box")
    out = []
    exterior = False
    for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        t = Site(s[0] + dx, s[1] + dy)
        if w.contains(t):
            out.append(t)
        else:
            exterior = True
    if exterior and w.wired:
        out.append(WIRED_ROOT)
    return out


def dist_inf(a, b) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def dist_l2sq(a, b) -> int:
    dx = a[0] - b[0]
    dy = a[1] - b[1]
    return dx * dx + dy * dy


def box_sites(center, r: int) -> list:
    """Sites of ``B_inf(center, r)`` in row-major order."""
    cx, cy = center
    return [Site(cx + x, cy + y) for y in range(-r, r + 1) for x in range(-r, r + 1)]
