"""Allowed configurations, the burning algorithm and the tree bijection.

Burn times: the sink has time 1, and the threshold recursion runs directly
from ``W_0 = Lambda``, so the first burnt sites (always including every site
at height ``2d``) get time 2.  The tree edge of a site burnt at time ``t`` is
chosen among its ordinary edges to sites burnt at ``t - 1`` in ascending
direction-label order.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import _kernels
from .engine import DiscreteConfig
from .lattice import OMEGA, SPECIAL, LatticeSpec

DEFAULT_ENUMERATION_CAP = 10**7


class NotAllowed(ValueError):
    """The configuration contains a forbidden subconfiguration."""


class NotATree(ValueError):
    """Parent labels do not form a spanning tree of the wired graph."""


class EnumerationTooLarge(ValueError):
    def __init__(self, required: int, cap: int) -> None:
        super().__init__(f"enumeration needs {required} configurations, above the cap {cap}")
        self.required = required
        self.cap = cap


@dataclass(frozen=True)
class BurnResult:
    burn_time: tuple[int | None, ...]  # None = unburnt
    allowed: bool

    OMEGA_TIME = 1


@dataclass(frozen=True)
class SpanningTree:
    """Parent edge of each site: a direction label ``0..2d-1`` or ``SPECIAL``."""

    spec: LatticeSpec
    labels: tuple[int, ...]

    def __post_init__(self) -> None:
        labels = tuple(int(v) for v in self.labels)
        if len(labels) != self.spec.n_sites:
            raise NotATree(f"expected {self.spec.n_sites} parent labels, got {len(labels)}")
        if any(v != SPECIAL and not 0 <= v < self.spec.n_dirs for v in labels):
            raise NotATree("parent labels must be SPECIAL or a direction label")
        object.__setattr__(self, "labels", labels)

    @property
    def special_count(self) -> int:
        return sum(1 for v in self.labels if v == SPECIAL)

    def parent(self, x: int) -> int:
        lab = self.labels[x]
        return OMEGA if lab == SPECIAL else int(self.spec.neighbors[x, lab])

    def is_valid(self) -> bool:
        depth = np.empty(self.spec.n_sites, dtype=np.int64)
        return bool(_kernels.tree_depths(np.asarray(self.labels, np.int64), self.spec.neighbors, depth))

    def to_records(self) -> list[dict]:
        return [
            {
                "site": list(self.spec.sites[i]),
                "edge_kind": "spec" if lab == SPECIAL else "ord",
                "direction_label": None if lab == SPECIAL else lab,
            }
            for i, lab in enumerate(self.labels)
        ]

    def to_json(self) -> str:
        return json.dumps(self.to_records())

    @classmethod
    def from_records(cls, spec: LatticeSpec, records: Sequence[dict]) -> "SpanningTree":
        labels = [SPECIAL] * spec.n_sites
        seen = set()
        for rec in records:
            i = spec.site_index(rec["site"])
            if i in seen:
                raise NotATree(f"site {rec['site']} listed twice")
            seen.add(i)
            if rec["edge_kind"] == "spec":
                labels[i] = SPECIAL
            elif rec["edge_kind"] == "ord":
                labels[i] = int(rec["direction_label"])
            else:
                raise NotATree(f"unknown edge kind {rec['edge_kind']!r}")
        if len(seen) != spec.n_sites:
            raise NotATree("every site needs exactly one parent edge")
        return cls(spec, tuple(labels))

    @classmethod
    def from_json(cls, spec: LatticeSpec, text: str) -> "SpanningTree":
        return cls.from_records(spec, json.loads(text))


def burn(config: DiscreteConfig) -> BurnResult:
    spec = config.spec
    t = np.zeros(spec.n_sites, dtype=np.int64)
    ok = _kernels.burn(config.values, spec.neighbors, t)
    return BurnResult(tuple(int(v) if v > 0 else None for v in t), bool(ok))


def is_allowed(config: DiscreteConfig) -> bool:
    return burn(config).allowed


def config_to_tree(config: DiscreteConfig) -> SpanningTree:
    spec = config.spec
    t = np.zeros(spec.n_sites, dtype=np.int64)
    if not _kernels.burn(config.values, spec.neighbors, t):
        raise NotAllowed(f"configuration {config.key()} is not allowed")
    labels = np.empty(spec.n_sites, dtype=np.int64)
    if not _kernels.config_to_labels(config.values, t, spec.neighbors, labels):
        raise AssertionError("burn times inconsistent with heights")  # unreachable for allowed configs
    return SpanningTree(spec, tuple(labels))


def tree_to_config(tree: SpanningTree) -> DiscreteConfig:
    spec = tree.spec
    xi = np.empty(spec.n_sites, dtype=np.int64)
    depth = np.empty(spec.n_sites, dtype=np.int64)
    if not _kernels.labels_to_config(np.asarray(tree.labels, np.int64), spec.neighbors, xi, depth):
        raise NotATree("parent edges contain a cycle")
    return DiscreteConfig(spec, xi)


def enumerate_allowed(spec: LatticeSpec, cap: int = DEFAULT_ENUMERATION_CAP) -> Iterator[DiscreteConfig]:
    """All allowed configurations, lexicographically, by filtering the product space."""
    for values in allowed_array(spec, cap):
        yield DiscreteConfig(spec, values)


def allowed_array(spec: LatticeSpec, cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
    """Allowed configurations as rows of an int array (lexicographic order)."""
    required = (spec.n_dirs + 1) ** spec.n_sites
    if required > cap:
        raise EnumerationTooLarge(required, cap)
    return _allowed_rows(spec.neighbors, spec.n_dirs, spec.n_sites)


def _allowed_rows(nbr: np.ndarray, n_dirs: int, n: int) -> np.ndarray:
    dummy = np.empty((0, n), dtype=np.int64)
    count = _kernels.allowed_rows(nbr, False, dummy)
    out = np.empty((count, n), dtype=np.int64)
    _kernels.allowed_rows(nbr, True, out)
    return out


def tree_array(spec: LatticeSpec, cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
    """Every spanning tree of the wired graph as a row of parent labels, by brute force."""
    required = (spec.n_dirs + 1) ** spec.n_sites
    if required > cap:
        raise EnumerationTooLarge(required, cap)
    nbr = spec.neighbors
    count = _kernels.tree_rows(nbr, False, np.empty((0, spec.n_sites), dtype=np.int64))
    out = np.empty((count, spec.n_sites), dtype=np.int64)
    _kernels.tree_rows(nbr, True, out)
    return out


def check_bijection(spec: LatticeSpec, cap: int = DEFAULT_ENUMERATION_CAP) -> dict:
    """Enumerate both sides and test that the two maps are mutually inverse bijections."""
    configs = allowed_array(spec, cap)
    trees = tree_array(spec, cap)
    nbr = spec.neighbors
    images = np.empty_like(configs)
    preimages = np.empty_like(trees)
    bad_fwd = _kernels.configs_to_labels(configs, nbr, images)
    bad_back = _kernels.labels_to_configs(trees, nbr, preimages)
    back_of_images = np.empty_like(configs)
    bad_round = _kernels.labels_to_configs(images, nbr, back_of_images) if not bad_fwd else -1
    image_set = {tuple(r) for r in images.tolist()}
    tree_set = {tuple(r) for r in trees.tolist()}
    pre_set = {tuple(r) for r in preimages.tolist()}
    config_set = {tuple(r) for r in configs.tolist()}
    report = {
        "allowed": int(len(configs)),
        "trees": int(len(trees)),
        "forward_failures": int(bad_fwd),
        "inverse_failures": int(bad_back),
        "forward_onto_trees": image_set == tree_set,
        "forward_injective": len(image_set) == len(configs),
        "inverse_onto_allowed": pre_set == config_set,
        "round_trip": bad_round == 0 and bool(np.array_equal(back_of_images, configs)),
    }
    report["passed"] = (not bad_fwd and not bad_back and report["forward_onto_trees"]
                        and report["forward_injective"] and report["inverse_onto_allowed"] and report["round_trip"])
    return report


def has_fsc_bruteforce(config: DiscreteConfig) -> bool:
    """Direct search over every nonempty ``W`` for a forbidden subconfiguration."""
    spec = config.spec
    nbr = spec.neighbors
    n = spec.n_sites
    for size in range(1, n + 1):
        for w in itertools.combinations(range(n), size):
            ws = set(w)
            if all(config.values[y] < sum(1 for z in nbr[y] if z in ws) for y in w):
                return True
    return False


def weight_total(spec: LatticeSpec, cap: int = DEFAULT_ENUMERATION_CAP) -> float:
    """Sum of ``gamma ** N(xi)`` over allowed configurations."""
    rows = allowed_array(spec, cap)
    n_max = np.count_nonzero(rows == spec.n_dirs, axis=1)
    return float(np.sum(np.power(spec.gamma, n_max.astype(float))))


def max_height_counts(spec: LatticeSpec, cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
    """``c[j]`` = number of allowed configurations with ``j`` maximal sites."""
    rows = allowed_array(spec, cap)
    n_max = np.count_nonzero(rows == spec.n_dirs, axis=1)
    return np.bincount(n_max, minlength=spec.n_sites + 1)


def tree_counts(spec: LatticeSpec, cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
    """``c[j]`` = number of spanning trees with ``j`` special edges (brute force)."""
    required = (spec.n_dirs + 1) ** spec.n_sites
    if required > cap:
        raise EnumerationTooLarge(required, cap)
    out = np.zeros(spec.n_sites + 1, dtype=np.int64)
    _kernels.count_trees(spec.neighbors, spec.gamma, out)
    return out


def exact_nu(spec: LatticeSpec, cap: int = DEFAULT_ENUMERATION_CAP) -> tuple[np.ndarray, np.ndarray]:
    """Allowed configurations and their stationary probabilities ``gamma**N / det``."""
    rows = allowed_array(spec, cap)
    n_max = np.count_nonzero(rows == spec.n_dirs, axis=1)
    w = np.power(spec.gamma, n_max.astype(float))
    return rows, w / w.sum()
