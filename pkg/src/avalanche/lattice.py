"""Finite boxes of Z^d, the dissipative toppling matrix and the wired graph.

Sites are always stored in lexicographic order of their coordinates; every
vector and matrix in the package uses that order.  Ordinary edge directions
carry labels ``0..2d-1`` in the order ``+e1, -e1, +e2, -e2, ...`` so the
opposite of label ``k`` is ``k ^ 1``.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy import sparse

OMEGA = -1
"""Vertex index of the sink in neighbour tables and walks."""

SPECIAL = -1
"""Parent label of a site whose tree edge is its special edge."""


@dataclass(frozen=True)
class LatticeSpec:
    """A finite set of lattice points with dissipation ``gamma``.

    Use :func:`make_box` for centred boxes; :func:`rect_box` and
    :func:`lattice_from_sites` build non-centred boxes and arbitrary site
    sets (for example a box with a few sites removed).
    """

    d: int
    sites: tuple[tuple[int, ...], ...]
    gamma: float
    radius: int | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if not isinstance(self.d, (int, np.integer)) or self.d < 1:
            raise ValueError(f"dimension must be a positive integer, got {self.d!r}")
        if self.gamma < 0 or not np.isfinite(self.gamma):
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma!r}")
        if len(self.sites) == 0:
            raise ValueError("a lattice needs at least one site")
        sites = tuple(sorted(tuple(int(c) for c in s) for s in self.sites))
        if any(len(s) != self.d for s in sites):
            raise ValueError("every site must have d coordinates")
        if len(set(sites)) != len(sites):
            raise ValueError("duplicate sites")
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def n_dirs(self) -> int:
        return 2 * self.d

    @property
    def max_height(self) -> float:
        """The stability threshold ``2d + gamma``."""
        return 2 * self.d + self.gamma

    @cached_property
    def index(self) -> dict[tuple[int, ...], int]:
        return {s: i for i, s in enumerate(self.sites)}

    @cached_property
    def neighbors(self) -> np.ndarray:
        """``(n_sites, 2d)`` table of neighbour indices, ``OMEGA`` outside."""
        table = np.full((self.n_sites, self.n_dirs), OMEGA, dtype=np.int64)
        for i, s in enumerate(self.sites):
            for k in range(self.n_dirs):
                axis, sign = divmod(k, 2)
                y = list(s)
                y[axis] += -1 if sign else 1
                table[i, k] = self.index.get(tuple(y), OMEGA)
        table.setflags(write=False)
        return table

    @cached_property
    def boundary_counts(self) -> np.ndarray:
        """Number of ordinary edges from each site to the sink."""
        return (self.neighbors == OMEGA).sum(axis=1)

    def site_index(self, x: int | Sequence[int]) -> int:
        """Accept either an index or a coordinate tuple."""
        if isinstance(x, (int, np.integer)):
            if not 0 <= x < self.n_sites:
                raise IndexError(f"site index {x} outside lattice of {self.n_sites} sites")
            return int(x)
        try:
            return self.index[tuple(int(c) for c in x)]
        except KeyError:
            raise IndexError(f"site {tuple(x)} not in lattice") from None

    def with_gamma(self, gamma: float) -> "LatticeSpec":
        return LatticeSpec(self.d, self.sites, gamma, radius=self.radius)

    def l1_norms(self) -> np.ndarray:
        return np.abs(np.asarray(self.sites)).sum(axis=1)

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        if self.radius is not None:
            return {"d": self.d, "radius": self.radius, "gamma": self.gamma}
        return {"d": self.d, "sites": [list(s) for s in self.sites], "gamma": self.gamma}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> "LatticeSpec":
        keys = set(obj)
        if not {"d", "gamma"} <= keys or len(keys & {"radius", "sites"}) != 1:
            raise ValueError("lattice JSON needs d, gamma and exactly one of radius/sites")
        extra = keys - {"d", "gamma", "radius", "sites"}
        if extra:
            raise ValueError(f"unknown lattice keys: {sorted(extra)}")
        if "radius" in obj:
            return make_box(obj["d"], obj["radius"], obj["gamma"])
        return lattice_from_sites(obj["sites"], obj["gamma"], d=obj["d"])

    @classmethod
    def from_json(cls, text: str) -> "LatticeSpec":
        return cls.from_dict(json.loads(text))


def make_box(d: int, radius: int, gamma: float) -> LatticeSpec:
    """The box ``[-radius, radius]^d``."""
    if not isinstance(d, (int, np.integer)) or d <= 0:
        raise ValueError(f"dimension must be a positive integer, got {d!r}")
    if not isinstance(radius, (int, np.integer)) or radius < 0:
        raise ValueError(f"radius must be a non-negative integer, got {radius!r}")
    axis = range(-radius, radius + 1)
    sites = tuple(itertools.product(axis, repeat=d))
    return LatticeSpec(int(d), sites, gamma, radius=int(radius))


def rect_box(shape: Sequence[int], gamma: float) -> LatticeSpec:
    """The box ``[0, shape[0]) x ... x [0, shape[-1])``."""
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ValueError(f"invalid box shape {shape!r}")
    sites = tuple(itertools.product(*(range(s) for s in shape)))
    return LatticeSpec(len(shape), sites, gamma)


def lattice_from_sites(sites: Iterable[Sequence[int]], gamma: float, d: int | None = None) -> LatticeSpec:
    sites = tuple(tuple(int(c) for c in s) for s in sites)
    if d is None:
        d = len(sites[0]) if sites else 0
    return LatticeSpec(d, sites, gamma)


def remove_sites(spec: LatticeSpec, removed: Iterable[Sequence[int]]) -> LatticeSpec:
    """Lambda minus a set of sites."""
    drop = {tuple(s) for s in removed}
    return LatticeSpec(spec.d, tuple(s for s in spec.sites if s not in drop), spec.gamma)


# -- toppling matrix ---------------------------------------------------------


@dataclass(frozen=True)
class TopplingMatrix:
    spec: LatticeSpec
    entries: np.ndarray

    def det(self) -> float:
        sign, logdet = np.linalg.slogdet(self.entries)
        if sign <= 0:
            return 0.0 if sign == 0 else float(sign * np.exp(logdet))
        return float(np.exp(logdet))

    def logdet(self) -> float:
        sign, logdet = np.linalg.slogdet(self.entries)
        if sign <= 0:
            raise np.linalg.LinAlgError("toppling matrix is not positive definite")
        return float(logdet)

    def to_csv(self) -> str:
        """Row-major CSV with a header of site coordinates."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = [" ".join(map(str, s)) for s in self.spec.sites]
        writer.writerow(["site", *header])
        for label, row in zip(header, self.entries):
            writer.writerow([label, *(repr(float(v)) for v in row)])
        return buf.getvalue()


def toppling_matrix(spec: LatticeSpec) -> TopplingMatrix:
    n = spec.n_sites
    m = np.zeros((n, n))
    m[np.arange(n), np.arange(n)] = spec.max_height
    nbr = spec.neighbors
    rows, dirs = np.nonzero(nbr != OMEGA)
    m[rows, nbr[rows, dirs]] = -1.0
    return TopplingMatrix(spec, m)


def toppling_matrix_sparse(spec: LatticeSpec) -> sparse.csr_matrix:
    n = spec.n_sites
    nbr = spec.neighbors
    rows, dirs = np.nonzero(nbr != OMEGA)
    data = np.concatenate([np.full(n, spec.max_height), -np.ones(len(rows))])
    r = np.concatenate([np.arange(n), rows])
    c = np.concatenate([np.arange(n), nbr[rows, dirs]])
    return sparse.csr_matrix((data, (r, c)), shape=(n, n))


# -- wired graph -------------------------------------------------------------


@dataclass(frozen=True)
class Edge:
    u: int
    v: int  # OMEGA for the sink
    kind: str  # "ord" or "spec"
    label: int | None  # direction label at ``u`` for ordinary edges
    weight: float


@dataclass(frozen=True)
class WiredGraph:
    """Lambda plus the sink ``omega``.

    Every site has ``2d`` ordinary edge ends (``neighbors[x, k]`` is the far
    end of the edge with label ``k``, ``OMEGA`` for boundary edges) and one
    special edge of weight ``gamma`` to the sink.
    """

    spec: LatticeSpec

    @property
    def neighbors(self) -> np.ndarray:
        return self.spec.neighbors

    @property
    def gamma(self) -> float:
        return self.spec.gamma

    def edges(self) -> list[Edge]:
        out = []
        nbr = self.neighbors
        for x in range(self.spec.n_sites):
            for k in range(self.spec.n_dirs):
                y = int(nbr[x, k])
                # list internal edges once, from the lower index
                if y == OMEGA or x < y:
                    out.append(Edge(x, y, "ord", k, 1.0))
            out.append(Edge(x, OMEGA, "spec", None, self.gamma))
        return out

    def edge_weight_at(self, x: int) -> float:
        return self.spec.n_dirs + self.gamma


def wired_graph(spec: LatticeSpec) -> WiredGraph:
    return WiredGraph(spec)


# -- exhaustive spanning-tree oracle -----------------------------------------


def iter_rooted_trees(spec: LatticeSpec) -> Iterator[tuple[int, ...]]:
    """All spanning trees of the wired graph, as parent-label tuples.

    Brute force over every choice of one outgoing edge per site; a choice is
    a tree iff following parents from every site reaches the sink.  Labels
    are ``0..2d-1`` for ordinary edges and ``SPECIAL`` for the special edge.
    """
    n = spec.n_sites
    nbr = spec.neighbors
    choices = (SPECIAL, *range(spec.n_dirs))
    for labels in itertools.product(choices, repeat=n):
        if _reaches_sink(labels, nbr):
            yield labels


def _reaches_sink(labels: Sequence[int], nbr: np.ndarray) -> bool:
    n = len(labels)
    ok = [False] * n
    for start in range(n):
        path = []
        v = start
        while v != OMEGA and not ok[v]:
            if v in path:
                return False
            path.append(v)
            lab = labels[v]
            v = OMEGA if lab == SPECIAL else int(nbr[v, lab])
        for p in path:
            ok[p] = True
    return True


def spanning_tree_weight_total(spec: LatticeSpec) -> float:
    """Sum over spanning trees of ``gamma ** (number of special edges)``."""
    g = spec.gamma
    total = 0.0
    for labels in iter_rooted_trees(spec):
        total += g ** sum(1 for lab in labels if lab == SPECIAL)
    return total
