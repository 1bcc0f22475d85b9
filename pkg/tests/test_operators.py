import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from flucsr.measure import DiscreteMeasure
from flucsr.operators import (FWHM_PER_SIGMA, PsfModel, atom, atom_gradient, atoms,
                              gaussian_1d_pixel_integral, gaussian_1d_pixel_integral_derivative,
                              grid_coordinates, grid_lambda_adjoint, grid_phi_adjoint,
                              lambda_adjoint_eval, lambda_adjoint_gradient, lambda_apply,
                              phi_adjoint_eval, phi_apply, separable_factors)

Q1D = 0.3829249225480261  # quad of N(0.5, 1) over [0, 1], see test below


def quad_pixel(center, k, sigma):
    val, _ = integrate.quad(lambda s: stats.norm.pdf(s, center, sigma), k, k + 1,
                            epsabs=0.0, epsrel=1e-12)
    return val


def random_measure(rng, n, psf, lo=-1.0, hi=1.0):
    pos = np.column_stack([rng.uniform(0, psf.width, n), rng.uniform(0, psf.height, n)])
    return DiscreteMeasure(rng.uniform(lo, hi, n), pos)


# --- PSF model ------------------------------------------------------------------------

def test_fwhm_conversion():
    psf = PsfModel.from_fwhm(2.29, 8, 8)
    assert psf.fwhm() == pytest.approx(2.29, rel=1e-15)
    assert FWHM_PER_SIGMA == pytest.approx(2 * math.sqrt(2 * math.log(2)))
    assert psf.n_pixels == 64 and psf.shape == (8, 8)
    with pytest.raises(ValueError):
        PsfModel(0.0, 4, 4)
    with pytest.raises(ValueError):
        PsfModel(1.0, 0, 4)


# --- 1D pixel integral ---------------------------------------------------------------

def test_1d_integral_matches_quadrature():
    assert quad_pixel(0.5, 0, 1.0) == pytest.approx(Q1D, abs=1e-14)
    assert gaussian_1d_pixel_integral(0.5, 0, 1.0) == pytest.approx(Q1D, abs=1e-15)
    rng = np.random.default_rng(1)
    for _ in range(20):
        c, k, s = rng.uniform(-3, 10), int(rng.integers(0, 8)), rng.uniform(0.3, 3)
        assert gaussian_1d_pixel_integral(c, k, s) == pytest.approx(quad_pixel(c, k, s),
                                                                    rel=1e-10, abs=1e-16)


def test_1d_integral_far_tail_is_zero():
    assert gaussian_1d_pixel_integral(0.5, 20, 1.0) == 0.0
    assert gaussian_1d_pixel_integral(30.0, 3, 1.5) == 0.0
    assert abs(gaussian_1d_pixel_integral(14.0, 0, 1.0)) <= 1e-16


def test_1d_integral_tail_keeps_relative_precision():
    # erfc on the tail side, not a cancelling erf difference
    ref = quad_pixel(0.5, 6, 1.0)
    assert gaussian_1d_pixel_integral(0.5, 6, 1.0) == pytest.approx(ref, rel=1e-9)


@given(st.floats(-5, 15), st.integers(0, 10), st.floats(0.2, 4))
def test_1d_integral_reflection_symmetry(c, k, sigma):
    a = gaussian_1d_pixel_integral(c, k, sigma)
    b = gaussian_1d_pixel_integral(2 * k + 1 - c, k, sigma)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-300)


def test_1d_derivative_finite_difference():
    rng = np.random.default_rng(2)
    h = 1e-5
    for _ in range(50):
        c, k, s = rng.uniform(-2, 10), int(rng.integers(0, 8)), rng.uniform(0.5, 2)
        fd = (gaussian_1d_pixel_integral(c + h, k, s) - gaussian_1d_pixel_integral(c - h, k, s)) / (2 * h)
        an = gaussian_1d_pixel_integral_derivative(c, k, s)
        assert an == pytest.approx(fd, rel=1e-6, abs=1e-11)


# --- atoms -------------------------------------------------------------------------------

def test_atom_single_pixel_cell():
    psf = PsfModel(1.0, 1, 1)
    assert atom((0.5, 0.5), psf)[0] == pytest.approx(Q1D ** 2, rel=1e-14)
    assert Q1D ** 2 == pytest.approx(0.146631, abs=1e-6)


def test_atom_far_outside_is_zero():
    psf = PsfModel(1.0, 8, 8)
    assert np.all(atom((40.0, 4.0), psf) == 0.0)
    gx, gy = atom_gradient((40.0, -30.0), psf)
    assert np.all(gx == 0.0) and np.all(gy == 0.0)


def test_atom_mass_tends_to_one():
    for n, tol in ((8, 1e-3), (30, 1e-12)):
        psf = PsfModel(1.0, n, n)
        total = atom((n / 2, n / 2), psf).sum()
        assert total <= 1.0 + 1e-15
        assert total == pytest.approx(1.0, abs=tol)


def test_atom_layout_row_major():
    # x is the column coordinate, y the row coordinate
    psf = PsfModel(0.5, 4, 6)
    img = atom((4.5, 1.5), psf).reshape(4, 6)
    assert np.unravel_index(np.argmax(img), img.shape) == (1, 4)


def test_atom_entries_nonnegative_and_bounded():
    rng = np.random.default_rng(3)
    psf = PsfModel(1.3, 9, 7)
    a = atoms(rng.uniform(-3, 12, size=(50, 2)), psf)
    assert np.all(a >= 0)
    assert np.all(a.sum(axis=1) <= 1.0 + 1e-15)


def test_atom_separability_marginals():
    psf = PsfModel(0.9, 20, 20)
    x = (7.3, 11.6)
    img = atom(x, psf).reshape(20, 20)
    gy, gx = separable_factors(np.array([x]), psf)
    # separable: any row is a multiple of the column factor
    for r in range(5, 15):
        np.testing.assert_allclose(img[r], gy[0, r] * gx[0], rtol=0, atol=1e-17)
    col = [gaussian_1d_pixel_integral(x[0], c, 0.9) for c in range(20)]
    np.testing.assert_array_equal(gx[0], col)


def test_atom_gradient_finite_difference():
    rng = np.random.default_rng(4)
    h = 1e-5
    for _ in range(30):
        sigma = rng.uniform(0.6, 2.0)
        psf = PsfModel(sigma, 10, 12)
        x = rng.uniform(1, 9, 2)
        gx, gy = atom_gradient(x, psf)
        for d, g in ((np.array([h, 0]), gx), (np.array([0, h]), gy)):
            fd = (atom(x + d, psf) - atom(x - d, psf)) / (2 * h)
            assert np.linalg.norm(g - fd) <= 1e-6 * np.linalg.norm(g)


def test_atom_gradient_zero_on_mirror_pixel():
    psf = PsfModel(1.1, 6, 6)
    gx, gy = atom_gradient((2.3, 3.5), psf)
    img_gy = gy.reshape(6, 6)
    # y sits at the centre of row 3: every pixel in that row is stationary in y
    assert np.max(np.abs(img_gy[3])) <= 1e-17
    assert np.max(np.abs(gx.reshape(6, 6)[3])) > 0


# --- Phi ----------------------------------------------------------------------------------

def test_phi_apply_examples():
    psf = PsfModel(1.0, 8, 8)
    assert np.all(phi_apply(DiscreteMeasure.empty(), psf) == 0.0)
    m1 = DiscreteMeasure([2.5], [[3.2, 4.1]])
    np.testing.assert_allclose(phi_apply(m1, psf), 2.5 * atom((3.2, 4.1), psf), rtol=1e-15)
    m2 = DiscreteMeasure([-1.0], [[6.0, 1.0]])
    np.testing.assert_allclose(phi_apply(m1.concat(m2), psf),
                               phi_apply(m1, psf) + phi_apply(m2, psf), rtol=1e-14, atol=1e-17)


def test_phi_adjoint_examples():
    psf = PsfModel(1.0, 8, 8)
    f = atom((3.3, 2.2), psf)
    assert phi_adjoint_eval(f, (3.3, 2.2), psf) == pytest.approx(f @ f, rel=1e-14)
    assert phi_adjoint_eval(np.zeros(64), (3.3, 2.2), psf) == 0.0


def test_phi_adjoint_identity():
    rng = np.random.default_rng(5)
    for _ in range(20):
        psf = PsfModel(rng.uniform(0.5, 2), int(rng.integers(4, 17)), int(rng.integers(4, 17)))
        m = random_measure(rng, int(rng.integers(1, 11)), psf)
        p = rng.normal(size=psf.n_pixels)
        lhs = phi_apply(m, psf) @ p
        rhs = sum(a * phi_adjoint_eval(p, x, psf) for a, x in zip(m.amplitudes, m.positions))
        assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1e-300)


# --- Lambda ---------------------------------------------------------------------------------

def test_lambda_apply_examples():
    psf = PsfModel(1.0, 5, 5)
    assert np.all(lambda_apply(DiscreteMeasure.empty(), psf) == 0.0)
    x = (2.2, 2.9)
    f = atom(x, psf)
    L = lambda_apply(DiscreteMeasure([3.0], [x]), psf)
    np.testing.assert_allclose(L, 3.0 * np.outer(f, f), rtol=1e-14, atol=1e-18)
    assert np.linalg.matrix_rank(L) == 1
    assert np.array_equal(L, L.T)


def test_lambda_apply_diagonal_against_loop():
    rng = np.random.default_rng(6)
    psf = PsfModel(1.2, 6, 7)
    m = random_measure(rng, 5, psf)
    diag = np.zeros(psf.n_pixels)
    for a, x in zip(m.amplitudes, m.positions):
        f = atom(x, psf)
        for i in range(psf.n_pixels):
            diag[i] += a * f[i] * f[i]
    np.testing.assert_allclose(np.diag(lambda_apply(m, psf)), diag, rtol=1e-13, atol=1e-18)


def test_lambda_apply_psd_for_nonnegative_amplitudes():
    rng = np.random.default_rng(7)
    psf = PsfModel(1.0, 8, 8)
    for _ in range(10):
        L = lambda_apply(random_measure(rng, 10, psf, 0.0, 5.0), psf)
        assert np.linalg.eigvalsh(L).min() >= -1e-8 * np.max(np.diag(L))


def test_lambda_adjoint_examples():
    psf = PsfModel(1.0, 6, 6)
    x = (2.7, 3.1)
    f = atom(x, psf)
    R = lambda_apply(DiscreteMeasure([1.0], [x]), psf)
    assert lambda_adjoint_eval(R, x, psf) == pytest.approx(np.dot(f, f) ** 2, rel=1e-14)
    assert lambda_adjoint_eval(np.zeros((36, 36)), x, psf) == 0.0
    np.testing.assert_array_equal(lambda_adjoint_gradient(np.zeros((36, 36)), x, psf), [0, 0])


def test_lambda_adjoint_identity():
    rng = np.random.default_rng(8)
    for _ in range(20):
        psf = PsfModel(rng.uniform(0.5, 2), int(rng.integers(3, 17)), int(rng.integers(3, 17)))
        m = random_measure(rng, int(rng.integers(1, 11)), psf)
        B = rng.normal(size=(psf.n_pixels, psf.n_pixels))
        R = B + B.T
        lhs = np.sum(lambda_apply(m, psf) * R)
        rhs = sum(a * lambda_adjoint_eval(R, x, psf) for a, x in zip(m.amplitudes, m.positions))
        assert abs(lhs - rhs) <= 1e-12 * abs(lhs)


def test_lambda_adjoint_gradient_finite_difference():
    rng = np.random.default_rng(9)
    h = 1e-5
    for _ in range(20):
        psf = PsfModel(rng.uniform(0.7, 1.8), 8, 8)
        B = rng.normal(size=(64, 64))
        R = B + B.T
        x = rng.uniform(2, 6, 2)
        g = lambda_adjoint_gradient(R, x, psf)
        fd = np.array([(lambda_adjoint_eval(R, x + d, psf) - lambda_adjoint_eval(R, x - d, psf)) / (2 * h)
                       for d in (np.array([h, 0]), np.array([0, h]))])
        assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(g)


def test_lambda_adjoint_gradient_stationary_at_symmetric_spike():
    psf = PsfModel(1.0, 16, 16)
    x = (8.0, 8.0)  # the grid is mirror symmetric about this point
    R = lambda_apply(DiscreteMeasure([1.0], [x]), psf)
    g = lambda_adjoint_gradient(R, x, psf)
    assert np.max(np.abs(g)) <= 1e-15 * lambda_adjoint_eval(R, x, psf)


# --- grids ------------------------------------------------------------------------------------

def test_grid_adjoints_match_pointwise():
    rng = np.random.default_rng(10)
    psf = PsfModel(1.1, 5, 6)
    r = rng.normal(size=psf.n_pixels)
    B = rng.normal(size=(30, 30))
    R = B + B.T
    ys, xs = grid_coordinates(5, 2), grid_coordinates(6, 2)
    gy = np.array([[gaussian_1d_pixel_integral(y, k, 1.1) for k in range(5)] for y in ys])
    gx = np.array([[gaussian_1d_pixel_integral(x, k, 1.1) for k in range(6)] for x in xs])
    G1 = grid_phi_adjoint(r, gy, gx, psf)
    G2 = grid_lambda_adjoint(R, gy, gx, psf, chunk=3)
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            assert G1[i, j] == pytest.approx(phi_adjoint_eval(r, (x, y), psf), rel=1e-12, abs=1e-14)
            assert G2[i, j] == pytest.approx(lambda_adjoint_eval(R, (x, y), psf), rel=1e-10, abs=1e-12)


def test_grid_coordinates():
    np.testing.assert_array_equal(grid_coordinates(2, 2), [0.25, 0.75, 1.25, 1.75])
    np.testing.assert_array_equal(grid_coordinates(3, 1), [0.5, 1.5, 2.5])
