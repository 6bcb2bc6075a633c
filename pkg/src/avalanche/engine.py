"""Toppling, stabilization and addition operators.

Two arithmetic modes share one compiled cascade kernel:

* continuous heights (float64) with threshold ``2d + gamma``;
* rational mode for ``gamma = k/n``: integer heights in quanta of ``1/n``
  with toppling matrix entries ``2dn + k`` on the diagonal and ``-n`` off it.
  All identities hold exactly there.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .lattice import OMEGA, LatticeSpec, toppling_matrix

INT64_MAX = np.iinfo(np.int64).max
FLOAT_TOL = 1e-9


class OverflowInCascade(ArithmeticError):
    """An integer height would leave the int64 range during stabilization."""


# -- configurations -------------------------------------------------------


@dataclass
class HeightConfig:
    spec: LatticeSpec
    heights: np.ndarray

    def __post_init__(self) -> None:
        h = np.array(self.heights, dtype=np.float64)
        if h.shape != (self.spec.n_sites,):
            raise ValueError(f"expected {self.spec.n_sites} heights, got shape {h.shape}")
        if np.any(h < 0) or not np.all(np.isfinite(h)):
            raise ValueError("heights must be finite and non-negative")
        self.heights = h

    def is_stable(self) -> bool:
        return bool(np.all(self.heights < self.spec.max_height))

    def unstable_sites(self) -> np.ndarray:
        return np.flatnonzero(self.heights >= self.spec.max_height)

    def total(self) -> float:
        return float(self.heights.sum())

    def copy(self) -> "HeightConfig":
        return HeightConfig(self.spec, self.heights.copy())

    def to_json(self) -> str:
        return json.dumps({"spec": self.spec.to_dict(), "heights": self.heights.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "HeightConfig":
        obj = json.loads(text)
        return cls(LatticeSpec.from_dict(obj["spec"]), np.asarray(obj["heights"], dtype=float))


@dataclass
class DiscreteConfig:
    spec: LatticeSpec
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values)
        if v.shape != (self.spec.n_sites,):
            raise ValueError(f"expected {self.spec.n_sites} values, got shape {v.shape}")
        if not np.issubdtype(v.dtype, np.integer):
            if not np.all(v == np.round(v)):
                raise ValueError("discrete values must be integers")
        v = v.astype(np.int64)
        if np.any(v < 0) or np.any(v > self.spec.n_dirs):
            raise ValueError(f"discrete values must lie in 0..{self.spec.n_dirs}")
        self.values = v

    @property
    def n_max(self) -> int:
        """Number of sites at maximal height ``2d``."""
        return int(np.count_nonzero(self.values == self.spec.n_dirs))

    def key(self) -> tuple[int, ...]:
        return tuple(int(v) for v in self.values)

    def to_json(self) -> str:
        return json.dumps({"spec": self.spec.to_dict(), "heights": self.values.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "DiscreteConfig":
        obj = json.loads(text)
        return cls(LatticeSpec.from_dict(obj["spec"]), np.asarray(obj["heights"]))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DiscreteConfig):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.values, other.values)


@dataclass
class RationalConfig:
    """Integer heights ``floor(n * eta)`` for ``gamma = k/n``."""

    spec: LatticeSpec
    values: np.ndarray
    n: int
    k: int

    def __post_init__(self) -> None:
        _check_rational(self.spec, self.n, self.k)
        v = np.asarray(self.values, dtype=np.int64)
        if v.shape != (self.spec.n_sites,):
            raise ValueError(f"expected {self.spec.n_sites} values, got shape {v.shape}")
        if np.any(v < 0):
            raise ValueError("rational heights must be non-negative")
        self.values = v

    @property
    def threshold(self) -> int:
        return self.spec.n_dirs * self.n + self.k

    def is_stable(self) -> bool:
        return bool(np.all(self.values < self.threshold))

    def copy(self) -> "RationalConfig":
        return RationalConfig(self.spec, self.values.copy(), self.n, self.k)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RationalConfig):
            return NotImplemented
        return (self.spec, self.n, self.k) == (other.spec, other.n, other.k) and np.array_equal(
            self.values, other.values
        )


def _check_rational(spec: LatticeSpec, n: int, k: int) -> None:
    if n <= 0 or k < 0:
        raise ValueError(f"need n >= 1 and k >= 0, got n={n}, k={k}")
    if math.gcd(n, k) != 1:
        raise ValueError(f"k/n must be in lowest terms, got {k}/{n}")
    if abs(spec.gamma - k / n) > 1e-12:
        raise ValueError(f"gamma={spec.gamma} does not equal {k}/{n}")


def rational_matrix(spec: LatticeSpec, n: int, k: int) -> np.ndarray:
    """Integer toppling matrix with ``2dn + k`` on the diagonal and ``-n`` off it."""
    m = np.zeros((spec.n_sites, spec.n_sites), dtype=np.int64)
    np.fill_diagonal(m, spec.n_dirs * n + k)
    nbr = spec.neighbors
    rows, dirs = np.nonzero(nbr != OMEGA)
    m[rows, nbr[rows, dirs]] = -n
    return m


# -- avalanche records ----------------------------------------------------


@dataclass
class AvalancheRecord:
    origin: int
    toppling_counts: np.ndarray
    dissipated: float
    steps: int
    avalanche_set: frozenset[int] = field(init=False)

    def __post_init__(self) -> None:
        self.avalanche_set = frozenset(int(i) for i in np.flatnonzero(self.toppling_counts >= 1))

    @property
    def size(self) -> int:
        return len(self.avalanche_set)

    @property
    def max_count(self) -> int:
        return int(self.toppling_counts.max(initial=0))

    CSV_HEADER = ("origin", "steps", "avalanche_size", "dissipated", "max_count")

    def csv_row(self) -> tuple:
        return (self.origin, self.steps, self.size, repr(float(self.dissipated)), self.max_count)


def records_to_csv(records: Sequence[AvalancheRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AvalancheRecord.CSV_HEADER)
    for r in records:
        w.writerow(r.csv_row())
    return buf.getvalue()


# -- continuous mode ------------------------------------------------------


def topple(config: HeightConfig, x: int | Sequence[int]) -> HeightConfig:
    """One toppling at ``x``, legal or forced.

    A forced toppling that would drive ``x`` negative is rejected.
    """
    spec = config.spec
    i = spec.site_index(x)
    h = config.heights.copy()
    h[i] -= spec.max_height
    if h[i] < -FLOAT_TOL:
        raise ValueError(
            f"toppling site {i} with height {config.heights[i]:.6g} < {spec.max_height:.6g} "
            "gives a negative height"
        )
    h[i] = max(h[i], 0.0)
    for y in spec.neighbors[i]:
        if y != OMEGA:
            h[y] += 1.0
    return HeightConfig(spec, h)


def is_legal_toppling(config: HeightConfig, x: int | Sequence[int]) -> bool:
    return bool(config.heights[config.spec.site_index(x)] >= config.spec.max_height)


def _stabilize_array(spec: LatticeSpec, h: np.ndarray) -> tuple[np.ndarray, int, int]:
    counts = np.zeros(spec.n_sites, dtype=np.int64)
    steps, outflow, status = _kernels.stabilize_fifo(
        h, spec.neighbors, spec.max_height, 1.0, counts, np.inf
    )
    return counts, steps, outflow


def stabilize(config: HeightConfig, policy: str = "fifo") -> tuple[HeightConfig, np.ndarray]:
    """The stabilization map and the toppling-number vector.

    ``policy="scan"`` repeatedly topples the lowest-index unstable site; it
    is a slow reference used to check order independence.
    """
    spec = config.spec
    h = config.heights.copy()
    if policy == "fifo":
        counts, _, _ = _stabilize_array(spec, h)
    elif policy == "scan":
        counts = _stabilize_scan(spec, h, spec.max_height, 1.0)
    else:
        raise ValueError(f"unknown scheduling policy {policy!r}")
    np.maximum(h, 0.0, out=h)
    return HeightConfig(spec, h), counts


def _stabilize_scan(spec: LatticeSpec, h: np.ndarray, diag, off) -> np.ndarray:
    counts = np.zeros(spec.n_sites, dtype=np.int64)
    nbr = spec.neighbors
    while True:
        unstable = np.flatnonzero(h >= diag)
        if unstable.size == 0:
            return counts
        x = unstable[0]
        h[x] -= diag
        counts[x] += 1
        for y in nbr[x]:
            if y != OMEGA:
                h[y] += off


def add(config: HeightConfig, x: int | Sequence[int]) -> tuple[HeightConfig, AvalancheRecord]:
    """Addition operator: add unit height at ``x`` and stabilize."""
    spec = config.spec
    if not config.is_stable():
        raise ValueError("addition operators act on gamma-stable configurations")
    i = spec.site_index(x)
    h = config.heights.copy()
    h[i] += 1.0
    counts, steps, outflow = _stabilize_array(spec, h)
    np.maximum(h, 0.0, out=h)
    record = AvalancheRecord(i, counts, spec.gamma * steps + outflow, steps)
    return HeightConfig(spec, h), record


def residual(before: HeightConfig, after: HeightConfig, counts: np.ndarray) -> float:
    """Max deviation from ``after = before - Delta N`` (independent matrix product)."""
    delta = toppling_matrix(before.spec).entries
    return float(np.max(np.abs(before.heights - delta @ counts - after.heights)))


# -- rational mode --------------------------------------------------------


def to_rational(config: HeightConfig, n: int, k: int) -> RationalConfig:
    _check_rational(config.spec, n, k)
    return RationalConfig(config.spec, np.floor(n * config.heights).astype(np.int64), n, k)


def from_rational(rc: RationalConfig) -> HeightConfig:
    return HeightConfig(rc.spec, rc.values / rc.n)


def _stabilize_int(rc: RationalConfig, v: np.ndarray) -> tuple[np.ndarray, int, int]:
    counts = np.zeros(rc.spec.n_sites, dtype=np.int64)
    steps, outflow, status = _kernels.stabilize_fifo(
        v, rc.spec.neighbors, np.int64(rc.threshold), np.int64(rc.n), counts, np.int64(INT64_MAX)
    )
    if status == _kernels.STATUS_OVERFLOW:
        raise OverflowInCascade("int64 overflow while stabilizing a rational configuration")
    return counts, steps, outflow


def stabilize_rational(rc: RationalConfig, policy: str = "fifo") -> tuple[RationalConfig, np.ndarray]:
    v = rc.values.copy()
    if policy == "fifo":
        counts, _, _ = _stabilize_int(rc, v)
    elif policy == "scan":
        counts = _stabilize_scan(rc.spec, v, rc.threshold, rc.n)
    else:
        raise ValueError(f"unknown scheduling policy {policy!r}")
    return RationalConfig(rc.spec, v, rc.n, rc.k), counts


def add_rational(
    rc: RationalConfig, x: int | Sequence[int], quanta: int | None = None
) -> tuple[RationalConfig, AvalancheRecord]:
    """Add ``quanta`` integer particles at ``x`` (default ``n``, one unit of height).

    Dissipated mass is reported in height units, i.e. quanta divided by ``n``.
    """
    if not rc.is_stable():
        raise ValueError("addition operators act on stable configurations")
    spec = rc.spec
    i = spec.site_index(x)
    q = rc.n if quanta is None else int(quanta)
    if q < 0:
        raise ValueError("cannot add a negative number of particles")
    v = rc.values.copy()
    if v[i] > INT64_MAX - q:
        raise OverflowInCascade("int64 overflow on addition")
    v[i] += q
    counts, steps, outflow = _stabilize_int(rc, v)
    dissipated = (rc.k * steps + rc.n * outflow) / rc.n
    return RationalConfig(spec, v, rc.n, rc.k), AvalancheRecord(i, counts, dissipated, steps)


def rational_residual(before: RationalConfig, after: RationalConfig, counts: np.ndarray) -> int:
    m = rational_matrix(before.spec, before.n, before.k)
    return int(np.max(np.abs(before.values - m @ counts - after.values)))


# -- discretization -------------------------------------------------------


def discretize(config: HeightConfig) -> DiscreteConfig:
    """Cell index of each height: ``floor`` below ``2d``, ``2d`` in the top cell."""
    if not config.is_stable():
        raise ValueError("discretization is defined on gamma-stable configurations")
    spec = config.spec
    v = np.minimum(np.floor(config.heights), spec.n_dirs).astype(np.int64)
    return DiscreteConfig(spec, v)


def discretize_array(heights: np.ndarray, n_dirs: int) -> np.ndarray:
    """Vectorized cell index for arrays of stable heights (any shape)."""
    return np.minimum(np.floor(heights), n_dirs).astype(np.int64)
