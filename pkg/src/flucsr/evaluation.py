"""Reconstruction metrics against ground truth, and super-resolved rendering."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .measure import DiscreteMeasure
from .operators import PsfModel, phi_apply


@dataclass
class MatchResult:
    pairs: List[Tuple[int, int, float]] = field(default_factory=list)
    unmatched_truth: List[int] = field(default_factory=list)
    unmatched_recon: List[int] = field(default_factory=list)
    radius: float = 1.0

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fn(self) -> int:
        return len(self.unmatched_truth)

    @property
    def fp(self) -> int:
        return len(self.unmatched_recon)


def match_spikes(truth: DiscreteMeasure, recon: DiscreteMeasure, radius: float) -> MatchResult:
    """Maximum-cardinality, then minimum-total-distance assignment within ``radius``.

    Amplitudes are ignored. Pairs farther than ``radius`` are forbidden by a
    cost larger than any admissible total, so the assignment first maximizes
    the number of admissible pairs.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    nt, nr = len(truth), len(recon)
    if nt == 0 or nr == 0:
        return MatchResult([], list(range(nt)), list(range(nr)), radius)
    d = cdist(truth.positions, recon.positions)
    allowed = d <= radius
    big = (float(np.sum(d[allowed])) + 1.0) * (min(nt, nr) + 1)
    cost = np.where(allowed, d, big)
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(i), int(j), float(d[i, j])) for i, j in zip(rows, cols) if allowed[i, j]]
    mt = {i for i, _, _ in pairs}
    mr = {j for _, j, _ in pairs}
    return MatchResult(sorted(pairs), [i for i in range(nt) if i not in mt],
                       [j for j in range(nr) if j not in mr], radius)


def jaccard_index(match: MatchResult) -> float:
    denom = match.tp + match.fn + match.fp
    return match.tp / denom if denom else 1.0


def localization_rmse(match: MatchResult) -> float:
    if not match.pairs:
        raise ValueError("no matched pairs")
    d = np.array([p[2] for p in match.pairs])
    return float(np.sqrt(np.mean(d ** 2)))


def amplitude_error(truth: DiscreteMeasure, recon: DiscreteMeasure, match: MatchResult) -> float:
    """Relative l1 amplitude error over matched pairs."""
    if not match.pairs:
        raise ValueError("no matched pairs")
    i = [p[0] for p in match.pairs]
    j = [p[1] for p in match.pairs]
    ref = np.sum(np.abs(truth.amplitudes[i]))
    return float(np.sum(np.abs(truth.amplitudes[i] - recon.amplitudes[j])) / ref)


def metrics(truth: DiscreteMeasure, recon: DiscreteMeasure, radius: float) -> dict:
    """Flat metrics dictionary; ``rmse``/``amplitude_error`` are ``nan`` without matches."""
    match = match_spikes(truth, recon, radius)
    out = {"jaccard": jaccard_index(match), "tp": match.tp, "fp": match.fp, "fn": match.fn,
           "radius": float(radius)}
    out["rmse"] = localization_rmse(match) if match.pairs else float("nan")
    out["amplitude_error"] = amplitude_error(truth, recon, match) if match.pairs else float("nan")
    return out


def format_report(values: dict) -> str:
    lines = []
    for k, v in values.items():
        lines.append(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")
    return "\n".join(lines) + "\n"


def render_measure(m: DiscreteMeasure, psf: PsfModel, upscale: int = 4,
                   render_sigma: float = 1.0) -> np.ndarray:
    """Raster ``(upscale H, upscale W)`` of ``m`` with Gaussians of ``render_sigma`` fine pixels."""
    if int(upscale) != upscale or upscale < 1:
        raise ValueError("upscale must be a positive integer")
    fine = PsfModel(render_sigma, psf.height * upscale, psf.width * upscale)
    scaled = DiscreteMeasure(m.amplitudes, m.positions * upscale)
    return phi_apply(scaled, fine).reshape(fine.shape)


def encode_pgm16(image: np.ndarray):
    """Binary 16-bit PGM with min-max scaling. Returns ``(bytes, lo, hi)``."""
    img = np.asarray(image, dtype=float)
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        scaled = np.rint((img - lo) / (hi - lo) * 65535.0)
    else:
        scaled = np.zeros_like(img)
    h, w = img.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    return header + scaled.astype(">u2").tobytes(), lo, hi


def write_pgm16(path, image: np.ndarray):
    data, lo, hi = encode_pgm16(image)
    with open(path, "wb") as fh:
        fh.write(data)
    return lo, hi


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"65535":
        raise ValueError("not a 16-bit binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(h, w).astype(np.uint16)
