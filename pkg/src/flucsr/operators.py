"""Pixel-integrated Gaussian measurement kernel and the two forward operators.

The PSF is the normalized isotropic Gaussian
``h(s) = exp(-|s|^2 / (2 sigma^2)) / (2 pi sigma^2)``. An atom ``phi(x)`` is
``h(. - x)`` integrated over every pixel of an ``H x W`` grid; because ``h``
is separable each atom is the outer product of two 1D erf differences.

``Phi m = sum_i a_i phi(x_i)`` maps a measure to an image and
``Lambda m = sum_i a_i phi(x_i) phi(x_i)^T`` maps it to a ``P x P``
covariance matrix (``P = H W``, row-major vectorization).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf, erfc

from .measure import DiscreteMeasure, Domain

#: atoms farther than this many sigmas from a pixel are exactly zero there
TRUNCATION_SIGMAS = 12.0

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class PsfModel:
    """Gaussian PSF of standard deviation ``sigma`` (pixels) on an ``H x W`` grid."""

    sigma: float
    height: int
    width: int

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if int(self.height) != self.height or int(self.width) != self.width \
                or self.height < 1 or self.width < 1:
            raise ValueError(f"grid must be positive integers, got {self.height}x{self.width}")
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "width", int(self.width))

    @classmethod
    def from_fwhm(cls, fwhm: float, height: int, width: int) -> "PsfModel":
        return cls(fwhm / FWHM_PER_SIGMA, height, width)

    def fwhm(self) -> float:
        return FWHM_PER_SIGMA * self.sigma

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def domain(self) -> Domain:
        return Domain(float(self.width), float(self.height))


# --- 1D building blocks -----------------------------------------------------

def gaussian_1d_pixel_integral(center, pixel_index, sigma):
    """Mass of a normalized 1D Gaussian centred at ``center`` inside the
    pixel ``[pixel_index, pixel_index + 1]``.

    Broadcasts over ``center`` and ``pixel_index``. The erfc form is used on
    the side of the tail so that far pixels keep full relative precision.
    Pixels farther than ``TRUNCATION_SIGMAS * sigma`` from the centre give 0.
    """
    c = np.asarray(center, dtype=float)
    k = np.asarray(pixel_index, dtype=float)
    lo = (k - c) / (sigma * _SQRT2)
    hi = (k + 1.0 - c) / (sigma * _SQRT2)
    val = np.where(
        lo >= 0, 0.5 * (erfc(lo) - erfc(hi)),
        np.where(hi <= 0, 0.5 * (erfc(-hi) - erfc(-lo)), 0.5 * (erf(hi) - erf(lo))))
    gap = np.maximum(np.maximum(k - c, c - k - 1.0), 0.0)
    val = np.where(gap > TRUNCATION_SIGMAS * sigma, 0.0, val)
    return val[()] if val.ndim == 0 else val


def _gaussian_density(s, sigma):
    return np.exp(-0.5 * (s / sigma) ** 2) * (_INV_SQRT_2PI / sigma)


def gaussian_1d_pixel_integral_derivative(center, pixel_index, sigma):
    """d/dcenter of :func:`gaussian_1d_pixel_integral` (difference of edge densities)."""
    c = np.asarray(center, dtype=float)
    k = np.asarray(pixel_index, dtype=float)
    val = _gaussian_density(k - c, sigma) - _gaussian_density(k + 1.0 - c, sigma)
    gap = np.maximum(np.maximum(k - c, c - k - 1.0), 0.0)
    val = np.where(gap > TRUNCATION_SIGMAS * sigma, 0.0, val)
    return val[()] if val.ndim == 0 else val


def axis_factors(coords, n: int, sigma: float):
    """``(len(coords), n)`` matrix of 1D pixel integrals along one axis."""
    c = np.asarray(coords, dtype=float).reshape(-1, 1)
    return gaussian_1d_pixel_integral(c, np.arange(n)[None, :], sigma)


def axis_factor_derivatives(coords, n: int, sigma: float):
    c = np.asarray(coords, dtype=float).reshape(-1, 1)
    return gaussian_1d_pixel_integral_derivative(c, np.arange(n)[None, :], sigma)


def separable_factors(positions, psf: PsfModel):
    """Row factors ``(N, H)`` and column factors ``(N, W)`` of the atoms at ``positions``."""
    p = np.asarray(positions, dtype=float).reshape(-1, 2)
    gy = axis_factors(p[:, 1], psf.height, psf.sigma)
    gx = axis_factors(p[:, 0], psf.width, psf.sigma)
    return gy, gx


# --- atoms ------------------------------------------------------------------

def atoms(positions, psf: PsfModel) -> np.ndarray:
    """Stacked atom images, shape ``(N, P)``."""
    gy, gx = separable_factors(positions, psf)
    return (gy[:, :, None] * gx[:, None, :]).reshape(gy.shape[0], -1)


def atom(x, psf: PsfModel) -> np.ndarray:
    """Atom image ``phi(x)`` as a length-``P`` row-major vector."""
    return atoms(np.asarray(x, dtype=float).reshape(1, 2), psf)[0]


def atom_gradients(positions, psf: PsfModel) -> np.ndarray:
    """Derivatives of the atoms w.r.t. their positions, shape ``(N, 2, P)``.

    ``[:, 0]`` is d/dx (column coordinate), ``[:, 1]`` is d/dy (row coordinate).
    """
    p = np.asarray(positions, dtype=float).reshape(-1, 2)
    n = p.shape[0]
    gy = axis_factors(p[:, 1], psf.height, psf.sigma)
    gx = axis_factors(p[:, 0], psf.width, psf.sigma)
    dgy = axis_factor_derivatives(p[:, 1], psf.height, psf.sigma)
    dgx = axis_factor_derivatives(p[:, 0], psf.width, psf.sigma)
    out = np.empty((n, 2, psf.n_pixels))
    out[:, 0] = (gy[:, :, None] * dgx[:, None, :]).reshape(n, -1)
    out[:, 1] = (dgy[:, :, None] * gx[:, None, :]).reshape(n, -1)
    return out


def atom_gradient(x, psf: PsfModel):
    """Pair ``(d phi / dx, d phi / dy)`` of length-``P`` vectors at one position."""
    g = atom_gradients(np.asarray(x, dtype=float).reshape(1, 2), psf)[0]
    return g[0], g[1]


# --- Phi --------------------------------------------------------------------

def phi_apply(m: DiscreteMeasure, psf: PsfModel) -> np.ndarray:
    """Image ``sum_i a_i phi(x_i)`` (length ``P``)."""
    if len(m) == 0:
        return np.zeros(psf.n_pixels)
    return m.amplitudes @ atoms(m.positions, psf)


def phi_adjoint_eval(residual, x, psf: PsfModel) -> float:
    """``<phi(x), residual>``."""
    r = np.asarray(residual, dtype=float).reshape(psf.height, psf.width)
    gy, gx = separable_factors(np.reshape(x, (1, 2)), psf)
    return float(gy[0] @ r @ gx[0])


# --- Lambda -----------------------------------------------------------------

def symmetrize(mat: np.ndarray) -> np.ndarray:
    """Copy the upper triangle onto the lower one so the result is exactly symmetric."""
    upper = np.triu(mat)
    return upper + np.triu(mat, 1).T


def lambda_apply(m: DiscreteMeasure, psf: PsfModel) -> np.ndarray:
    """Covariance-domain image ``sum_k a_k phi(x_k) phi(x_k)^T`` (``P x P``)."""
    p = psf.n_pixels
    if len(m) == 0:
        return np.zeros((p, p))
    a = atoms(m.positions, psf)
    return symmetrize((a.T * m.amplitudes) @ a)


def lambda_adjoint_eval(R, x, psf: PsfModel) -> float:
    """Quadratic form ``phi(x)^T R phi(x)``."""
    f = atom(x, psf)
    return float(f @ (np.asarray(R) @ f))


def lambda_adjoint_gradient(R, x, psf: PsfModel) -> np.ndarray:
    """Gradient of :func:`lambda_adjoint_eval` w.r.t. ``x`` (R symmetric)."""
    f = atom(x, psf)
    d = atom_gradients(np.reshape(x, (1, 2)), psf)[0]
    return 2.0 * d @ (np.asarray(R) @ f)


# --- certificate numerators on a grid ----------------------------------------

def grid_coordinates(n: int, factor: int) -> np.ndarray:
    """Centres of an ``factor``-times oversampled 1D pixel lattice."""
    return (np.arange(n * factor) + 0.5) / factor


def grid_phi_adjoint(residual, gy_grid, gx_grid, psf: PsfModel) -> np.ndarray:
    """``<phi(g), residual>`` for every grid point ``g``, shape ``(Gy, Gx)``."""
    r = np.asarray(residual, dtype=float).reshape(psf.height, psf.width)
    return gy_grid @ r @ gx_grid.T


def grid_lambda_adjoint(R, gy_grid, gx_grid, psf: PsfModel, chunk: int = 16) -> np.ndarray:
    """``phi(g)^T R phi(g)`` for every grid point ``g``, shape ``(Gy, Gx)``.

    Contracts the row axes first so the cost is ``O(Gy P^2)`` instead of
    ``O(Gy Gx P^2)``.
    """
    h, w = psf.height, psf.width
    r4 = np.asarray(R, dtype=float).reshape(h, w, h, w)
    out = np.empty((gy_grid.shape[0], gx_grid.shape[0]))
    for start in range(0, gy_grid.shape[0], chunk):
        gy = gy_grid[start:start + chunk]
        t1 = np.tensordot(gy, r4, axes=(1, 0))              # (c, W, H, W)
        t2 = np.einsum("icsd,is->icd", t1, gy)              # (c, W, W)
        out[start:start + chunk] = np.einsum("jc,icd,jd->ij", gx_grid, t2, gx_grid,
                                             optimize=True)
    return out
