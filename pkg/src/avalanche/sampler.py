"""Wilson's algorithm on the wired graph and the stationary laws built on it.

Sampling the weighted spanning-tree measure (tree weight ``gamma**N(t)``)
and pushing it through the inverse burning bijection gives the discrete
stationary law; filling each cell uniformly gives the continuous one.

Two implementations of Wilson's algorithm are kept: a readable reference
that records each walk and erases loops chronologically, and a compiled
cycle-popping kernel used for bulk sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .allowed import SpanningTree, tree_to_config
from .engine import DiscreteConfig, HeightConfig
from .lattice import OMEGA, SPECIAL, LatticeSpec, WiredGraph, wired_graph

DEFAULT_MAX_WALK_STEPS = 10**9


class WalkLimitExceeded(RuntimeError):
    """A random walk ran past the configured step cap without reaching the tree."""


@dataclass(frozen=True)
class RngStream:
    """Addressable random stream: identical ``(seed, stream_id)`` give identical draws."""

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream_id),))
        return np.random.Generator(np.random.PCG64(seq))

    def spawn(self, count: int) -> list["RngStream"]:
        """Consecutive stream ids starting at this one."""
        return [RngStream(self.seed, self.stream_id + i) for i in range(count)]


def as_generator(rng: RngStream | np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    return RngStream(0 if rng is None else int(rng)).generator()


def _check_reachable(spec: LatticeSpec) -> None:
    if spec.gamma == 0 and not np.any(spec.boundary_counts):
        raise ValueError("gamma = 0 needs at least one boundary edge for walks to reach the sink")


def _order(spec: LatticeSpec, order: str | Sequence[int] | None) -> np.ndarray:
    if order is None or (isinstance(order, str) and order == "lex"):
        return np.arange(spec.n_sites, dtype=np.int64)
    if isinstance(order, str):
        if order != "reversed":
            raise ValueError(f"unknown site order {order!r}")
        return np.arange(spec.n_sites - 1, -1, -1, dtype=np.int64)
    arr = np.asarray(order, dtype=np.int64)
    if sorted(arr.tolist()) != list(range(spec.n_sites)):
        raise ValueError("site order must be a permutation of the site indices")
    return arr


# -- reference implementation ----------------------------------------------


@dataclass
class WalkPath:
    """Vertices visited and the edge label used to leave each one.

    ``labels[i]`` is the edge taken from ``vertices[i]`` to ``vertices[i+1]``
    (``SPECIAL`` for the special edge).  Parallel edges to the sink are
    distinct edges, so the labels matter for the tree and not only the
    vertices.
    """

    vertices: list[int]
    labels: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.labels:
            self.labels = [0] * max(len(self.vertices) - 1, 0)
        if len(self.labels) != len(self.vertices) - 1:
            raise ValueError("a path with m+1 vertices needs m edge labels")

    def is_self_avoiding(self) -> bool:
        return len(set(self.vertices)) == len(self.vertices)


def network_walk_step(graph: WiredGraph, v: int, rng: np.random.Generator) -> tuple[int, int]:
    """One step of the weighted walk from site ``v``: returns ``(vertex, label)``.

    Each ordinary edge is taken with probability ``1/(2d+gamma)``, the special
    edge with ``gamma/(2d+gamma)``.
    """
    spec = graph.spec
    if not 0 <= v < spec.n_sites:
        raise IndexError(f"walk must start at a site of the lattice, got {v}")
    r = rng.random() * (spec.n_dirs + spec.gamma)
    if r < spec.n_dirs:
        k = min(int(r), spec.n_dirs - 1)
        return int(graph.neighbors[v, k]), k
    return OMEGA, SPECIAL


def loop_erase(path: WalkPath) -> WalkPath:
    """Chronological loop erasure."""
    verts = [path.vertices[0]]
    labels: list[int] = []
    pos = {path.vertices[0]: 0}
    for lab, v in zip(path.labels, path.vertices[1:]):
        if v in pos:
            cut = pos[v]
            for u in verts[cut + 1 :]:
                del pos[u]
            del verts[cut + 1 :]
            del labels[cut:]
        else:
            labels.append(lab)
            pos[v] = len(verts)
            verts.append(v)
    return WalkPath(verts, labels)


def _wilson_reference(graph: WiredGraph, rng: np.random.Generator, order: np.ndarray, max_steps: int) -> SpanningTree:
    spec = graph.spec
    in_tree = np.zeros(spec.n_sites, dtype=bool)
    parent = [SPECIAL] * spec.n_sites
    for start in order:
        if in_tree[start]:
            continue
        verts, labels = [int(start)], []
        v = int(start)
        while v != OMEGA and not in_tree[v]:
            nxt, lab = network_walk_step(graph, v, rng)
            verts.append(nxt)
            labels.append(lab)
            v = nxt
            if len(labels) > max_steps:
                raise WalkLimitExceeded(f"walk from site {start} exceeded {max_steps} steps")
        branch = loop_erase(WalkPath(verts, labels))
        for u, lab in zip(branch.vertices[:-1], branch.labels):
            in_tree[u] = True
            parent[u] = lab
    return SpanningTree(spec, tuple(parent))


# -- public sampling API ----------------------------------------------------


def wilson_sample(
    graph: WiredGraph,
    rng: RngStream | np.random.Generator | int | None = None,
    order: str | Sequence[int] | None = None,
    method: str = "fast",
    max_steps: int = DEFAULT_MAX_WALK_STEPS,
) -> SpanningTree:
    """A spanning tree of the wired graph with probability proportional to ``gamma**N(t)``."""
    spec = graph.spec
    _check_reachable(spec)
    gen = as_generator(rng)
    ordr = _order(spec, order)
    if method == "reference":
        return _wilson_reference(graph, gen, ordr, max_steps)
    if method != "fast":
        raise ValueError(f"unknown method {method!r}")
    labels = np.empty(spec.n_sites, dtype=np.int64)
    intree = np.empty(spec.n_sites, dtype=np.bool_)
    if _kernels.wilson(spec.neighbors, spec.gamma, ordr, gen, labels, intree, max_steps) < 0:
        raise WalkLimitExceeded(f"a walk exceeded {max_steps} steps")
    return SpanningTree(spec, tuple(labels))


def sample_tree_labels(
    spec: LatticeSpec,
    count: int,
    rng: RngStream | np.random.Generator | int | None = None,
    order: str | Sequence[int] | None = None,
    max_steps: int = DEFAULT_MAX_WALK_STEPS,
) -> np.ndarray:
    """``(count, n_sites)`` parent labels of independent Wilson trees."""
    _check_reachable(spec)
    out = np.empty((count, spec.n_sites), dtype=np.int8)
    status = _kernels.wilson_batch(spec.neighbors, spec.gamma, _order(spec, order), as_generator(rng), out, max_steps)
    if status != _kernels.STATUS_OK:
        raise WalkLimitExceeded(f"a walk exceeded {max_steps} steps")
    return out


def sample_nu(spec: LatticeSpec, rng=None, order=None) -> DiscreteConfig:
    return tree_to_config(wilson_sample(wired_graph(spec), rng, order=order))


def sample_nu_batch(spec: LatticeSpec, count: int, rng=None, order=None,
                    max_steps: int = DEFAULT_MAX_WALK_STEPS) -> np.ndarray:
    _check_reachable(spec)
    out = np.empty((count, spec.n_sites), dtype=np.int64)
    status = _kernels.nu_batch(spec.neighbors, spec.gamma, _order(spec, order), as_generator(rng), out, max_steps)
    if status != _kernels.STATUS_OK:
        raise WalkLimitExceeded(f"a walk exceeded {max_steps} steps")
    return out


def fill_cells(spec: LatticeSpec, xi: np.ndarray, rng) -> np.ndarray:
    """Heights uniform within the cells ``xi`` (any leading batch shape)."""
    gen = as_generator(rng)
    xi = np.asarray(xi)
    u = gen.random(xi.shape)
    top = xi == spec.n_dirs
    return np.where(top, spec.n_dirs + spec.gamma * u, xi + u)


def sample_m(spec: LatticeSpec, rng=None, order=None) -> HeightConfig:
    gen = as_generator(rng)
    xi = sample_nu(spec, gen, order=order)
    return HeightConfig(spec, fill_cells(spec, xi.values, gen))


def sample_m_batch(spec: LatticeSpec, count: int, rng=None, order=None,
                   max_steps: int = DEFAULT_MAX_WALK_STEPS) -> np.ndarray:
    _check_reachable(spec)
    out = np.empty((count, spec.n_sites), dtype=np.float64)
    status = _kernels.m_batch(spec.neighbors, spec.gamma, _order(spec, order), as_generator(rng), out, max_steps)
    if status != _kernels.STATUS_OK:
        raise WalkLimitExceeded(f"a walk exceeded {max_steps} steps")
    return out


def tree_frequencies(labels: np.ndarray) -> dict[tuple[int, ...], int]:
    keys, counts = np.unique(labels, axis=0, return_counts=True)
    return {tuple(int(v) for v in k): int(c) for k, c in zip(keys, counts)}
