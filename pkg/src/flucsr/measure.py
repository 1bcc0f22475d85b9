"""Discrete Radon measures: finite sums of weighted Dirac masses on a
rectangular domain.

Positions are stored in continuous pixel units as ``(x, y)`` pairs, where
``x`` runs along image columns (``0 <= x <= width``) and ``y`` along image
rows (``0 <= y <= height``). Pixel ``(r, c)`` covers ``[c, c+1] x [r, r+1]``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

CSV_HEADER = "x,y,amplitude"


@dataclass(frozen=True)
class Domain:
    """Closed rectangle ``[0, width] x [0, height]`` in pixel units."""

    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"domain sides must be positive, got {self.width}x{self.height}")

    def contains(self, positions) -> np.ndarray:
        p = np.atleast_2d(np.asarray(positions, dtype=float))
        return ((p[:, 0] >= 0) & (p[:, 0] <= self.width)
                & (p[:, 1] >= 0) & (p[:, 1] <= self.height))

    def clip(self, positions) -> np.ndarray:
        p = np.array(positions, dtype=float, ndmin=2)
        p[:, 0] = np.clip(p[:, 0], 0.0, self.width)
        p[:, 1] = np.clip(p[:, 1], 0.0, self.height)
        return p

    @property
    def bounds(self):
        return [(0.0, self.width), (0.0, self.height)]


def _freeze(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Sum of weighted Diracs ``sum_i a_i delta_{x_i}``.

    Spikes sharing the exact same position are merged at construction by
    summing their amplitudes (first occurrence keeps its place in the
    ordering). Instances are immutable.

    Parameters
    ----------
    amplitudes : array_like, shape (N,)
    positions : array_like, shape (N, 2)
        ``(x, y)`` pixel coordinates.
    """

    amplitudes: np.ndarray = field(default_factory=lambda: np.zeros(0))
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        a = np.array(self.amplitudes, dtype=float).reshape(-1)
        x = np.array(self.positions, dtype=float).reshape(-1, 2)
        if a.shape[0] != x.shape[0]:
            raise ValueError(f"{a.shape[0]} amplitudes for {x.shape[0]} positions")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(x))):
            raise ValueError("amplitudes and positions must be finite")
        if a.size > 1:
            uniq, first, inverse = np.unique(x, axis=0, return_index=True, return_inverse=True)
            if uniq.shape[0] < x.shape[0]:
                inverse = inverse.reshape(-1)
                summed = np.zeros(uniq.shape[0])
                np.add.at(summed, inverse, a)
                order = np.argsort(first, kind="stable")
                a, x = summed[order], uniq[order]
        object.__setattr__(self, "amplitudes", _freeze(a))
        object.__setattr__(self, "positions", _freeze(x))

    @classmethod
    def empty(cls) -> "DiscreteMeasure":
        return cls()

    def __len__(self):
        return self.amplitudes.shape[0]

    def __repr__(self):
        return f"DiscreteMeasure(N={len(self)}, tv={tv_norm(self):.6g})"

    def scaled(self, c: float) -> "DiscreteMeasure":
        return DiscreteMeasure(c * self.amplitudes, self.positions)

    def concat(self, other: "DiscreteMeasure") -> "DiscreteMeasure":
        """Measure sum ``self + other`` (coinciding positions are merged)."""
        return DiscreteMeasure(np.concatenate([self.amplitudes, other.amplitudes]),
                               np.concatenate([self.positions, other.positions]))

    def inside(self, domain: Domain) -> bool:
        return bool(np.all(domain.contains(self.positions))) if len(self) else True


def tv_norm(m: DiscreteMeasure) -> float:
    """Total variation of a discrete measure, i.e. the l1 norm of its amplitudes."""
    return float(np.sum(np.abs(m.amplitudes)))


def merge_close_spikes(m: DiscreteMeasure, radius: float) -> DiscreteMeasure:
    """Fuse single-linkage clusters of spikes closer than ``radius``.

    Each cluster becomes one spike carrying the summed amplitude, placed at
    the centroid weighted by absolute amplitudes (plain mean if they all
    vanish).
    """
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    n = len(m)
    if n < 2:
        return m
    pairs = cKDTree(m.positions).query_pairs(radius, output_type="ndarray")
    if pairs.shape[0] == 0:
        return m
    graph = coo_matrix((np.ones(pairs.shape[0]), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    n_clusters, labels = connected_components(graph, directed=False)
    # order clusters by their first member
    _, first = np.unique(labels, return_index=True)
    rank = np.empty(n_clusters, dtype=int)
    rank[np.argsort(first, kind="stable")] = np.arange(n_clusters)
    labels = rank[labels]

    amps = np.zeros(n_clusters)
    np.add.at(amps, labels, m.amplitudes)
    w = np.abs(m.amplitudes)
    wsum = np.zeros(n_clusters)
    np.add.at(wsum, labels, w)
    count = np.bincount(labels, minlength=n_clusters).astype(float)
    w = np.where(wsum[labels] > 0, w, 1.0)
    wsum = np.where(wsum > 0, wsum, count)
    pos = np.zeros((n_clusters, 2))
    np.add.at(pos, labels, w[:, None] * m.positions)
    pos /= wsum[:, None]
    return DiscreteMeasure(amps, pos)


def prune_zero_amplitudes(m: DiscreteMeasure, threshold: float = 0.0) -> DiscreteMeasure:
    """Drop spikes with ``|a_i| <= threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    keep = np.abs(m.amplitudes) > threshold
    if np.all(keep):
        return m
    return DiscreteMeasure(m.amplitudes[keep], m.positions[keep])


# --- spike-list CSV ---------------------------------------------------------

class SpikeFileError(ValueError):
    """Malformed spike-list file; ``line`` is 1-based."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _fmt(v: float) -> str:
    # 17 significant digits in positional notation round-trips float64 exactly
    return np.format_float_positional(v, precision=17, unique=False, fractional=False, trim="k")


def format_spikes(m: DiscreteMeasure) -> str:
    out = io.StringIO()
    out.write(CSV_HEADER + "\n")
    for a, (x, y) in zip(m.amplitudes, m.positions):
        out.write(f"{_fmt(x)},{_fmt(y)},{_fmt(a)}\n")
    return out.getvalue()


def write_spikes(path, m: DiscreteMeasure) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_spikes(m))


def parse_spikes(text: str) -> DiscreteMeasure:
    lines = text.split("\n")
    if not lines or lines[0].strip().replace(" ", "") != CSV_HEADER:
        raise SpikeFileError(f"expected header '{CSV_HEADER}'", line=1)
    amps, pos = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise SpikeFileError(f"expected 3 fields, got {len(parts)}", line=lineno)
        try:
            x, y, a = (float(p) for p in parts)
        except ValueError:
            raise SpikeFileError(f"non-numeric field in {line!r}", line=lineno) from None
        if not all(np.isfinite((x, y, a))):
            raise SpikeFileError("non-finite value", line=lineno)
        amps.append(a)
        pos.append((x, y))
    return DiscreteMeasure(np.array(amps), np.array(pos).reshape(-1, 2))


def read_spikes(path) -> DiscreteMeasure:
    return parse_spikes(Path(path).read_text(encoding="utf-8"))
