"""Sliding Frank-Wolfe for the BLASSO on the temporal mean and on the covariance.

Both problems share the form

    min_m  1/2 |data - A(m)|^2 + lam |m|_TV

with ``A = Phi`` (``MEAN``, data is an image) or ``A = Lambda`` (``COVARIANCE``,
data is a ``P x P`` covariance). Every iteration

1. maximizes the certificate ``eta(x) = A*(data - A m)(x) / lam`` on an
   oversampled grid, then refines the best grid point by bounded ascent;
2. stops if ``eta`` is at most ``1 + tol`` there;
3. re-fits all amplitudes by an l1-regularized least squares on the support
   augmented with the new point;
4. slides amplitudes and positions jointly with L-BFGS-B.

Under a nonnegativity constraint the certificate is maximized with its sign
(``max eta``), otherwise in absolute value.

Covariance atoms ``phi phi^T`` are never formed: their Gram matrix is the
elementwise square of the image-domain Gram matrix and their correlation with
the data is the quadratic form ``phi^T R phi``.
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.optimize import minimize

from .measure import DiscreteMeasure, prune_zero_amplitudes, tv_norm
from .operators import (PsfModel, atom_gradients, atoms, grid_coordinates,
                        grid_lambda_adjoint, grid_phi_adjoint, lambda_apply,
                        phi_apply, separable_factors, axis_factors)

DEGENERATE_INSERTION = 1e-9


class ProblemKind(enum.Enum):
    MEAN = "mean"
    COVARIANCE = "covariance"


class Termination(enum.Enum):
    CERTIFICATE_OPTIMAL = "CertificateOptimal"
    MAX_ITERATIONS = "MaxIterations"


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """One BLASSO instance.

    ``data`` is a length-``P`` image for ``MEAN`` and a ``P x P`` symmetric
    matrix for ``COVARIANCE``. ``nonnegative`` defaults to True for the
    covariance problem (amplitudes are variances) and False for the mean.
    """

    kind: ProblemKind
    data: np.ndarray
    psf: PsfModel
    lam: float
    nonnegative: Optional[bool] = None

    def __post_init__(self):
        kind = ProblemKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        p = self.psf.n_pixels
        d = np.asarray(self.data, dtype=float)
        if kind is ProblemKind.MEAN:
            if d.size != p:
                raise ValueError(f"image has {d.size} pixels, PSF grid has {p}")
            d = d.reshape(p)
        else:
            if d.shape != (p, p):
                raise ValueError(f"covariance has shape {d.shape}, PSF grid needs {(p, p)}")
        if not np.all(np.isfinite(d)):
            raise ValueError("data must be finite")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)
        if self.nonnegative is None:
            object.__setattr__(self, "nonnegative", kind is ProblemKind.COVARIANCE)

    def with_lambda(self, lam: float) -> "ProblemInstance":
        return ProblemInstance(self.kind, self.data, self.psf, lam, self.nonnegative)


@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 50
    certificate_tolerance: float = 1e-3
    insertion_grid_factor: int = 4
    lasso_tolerance: float = 1e-10
    slide_max_evals: int = 500
    amplitude_prune_threshold: float = 0.0

    def __post_init__(self):
        if self.max_iterations < 1 or self.insertion_grid_factor < 1:
            raise ValueError("max_iterations and insertion_grid_factor must be positive")
        if not (self.certificate_tolerance > 0 and self.lasso_tolerance > 0):
            raise ValueError("tolerances must be positive")
        if self.slide_max_evals < 0 or self.amplitude_prune_threshold < 0:
            raise ValueError("slide_max_evals and amplitude_prune_threshold must be nonnegative")


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    certificate: float
    n_spikes: int
    milliseconds: float


@dataclass
class SolverReport:
    records: List[IterationRecord] = field(default_factory=list)
    termination: Termination = Termination.MAX_ITERATIONS
    final_certificate: float = float("nan")

    def log_lines(self) -> List[str]:
        """Tab-separated ``iteration, objective, max eta, N, ms`` per record."""
        return [f"{r.iteration}\t{r.objective!r}\t{r.certificate!r}\t{r.n_spikes}\t{r.milliseconds:.3f}"
                for r in self.records]

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for line in self.log_lines():
                fh.write(line + "\n")


# --- the two data-fidelity models ----------------------------------------------

class _Model:
    """Data term of one problem. Subclasses see ``self.psf`` and ``self.data``."""

    def __init__(self, inst: ProblemInstance):
        self.inst = inst
        self.psf = inst.psf
        self.data = inst.data
        self.half_norm2 = 0.5 * float(np.sum(inst.data ** 2))
        self._grid_cache = {}

    def grid(self, factor):
        if factor not in self._grid_cache:
            gxc = grid_coordinates(self.psf.width, factor)
            gyc = grid_coordinates(self.psf.height, factor)
            self._grid_cache[factor] = (gxc, gyc,
                                        axis_factors(gyc, self.psf.height, self.psf.sigma),
                                        axis_factors(gxc, self.psf.width, self.psf.sigma))
        return self._grid_cache[factor]


class _MeanModel(_Model):

    def correlations(self, A):
        return A @ self.data

    def gram(self, A):
        return A @ A.T

    def residual(self, m):
        return self.data - phi_apply(m, self.psf)

    def data_term(self, m):
        return 0.5 * float(np.sum(self.residual(m) ** 2))

    def grid_adjoint(self, m, factor):
        gxc, gyc, gy, gx = self.grid(factor)
        return grid_phi_adjoint(self.residual(m), gy, gx, self.psf)

    def point_adjoint(self, m, x):
        """``A*(data - A m)`` at ``x`` and its gradient."""
        res = self.residual(m)
        f = atoms(x.reshape(1, 2), self.psf)[0]
        d = atom_gradients(x.reshape(1, 2), self.psf)[0]
        return float(f @ res), d @ res

    def slide_value_grad(self, a, pos):
        A = atoms(pos, self.psf)
        dA = atom_gradients(pos, self.psf)
        res = self.data - a @ A
        val = 0.5 * float(res @ res)
        ga = -(A @ res)
        gx = -a[:, None] * (dA @ res)
        return val, ga, gx


class _CovarianceModel(_Model):

    def __init__(self, inst):
        super().__init__(inst)
        self._grid_data = {}

    def correlations(self, A):
        return np.einsum("np,np->n", A @ self.data, A)

    def gram(self, A):
        return (A @ A.T) ** 2

    def data_term(self, m):
        return 0.5 * float(np.sum((self.data - lambda_apply(m, self.psf)) ** 2))

    def grid_adjoint(self, m, factor):
        gxc, gyc, gy, gx = self.grid(factor)
        if factor not in self._grid_data:
            self._grid_data[factor] = grid_lambda_adjoint(self.data, gy, gx, self.psf)
        out = self._grid_data[factor].copy()
        if len(m):
            my, mx = separable_factors(m.positions, self.psf)
            sy = (gy @ my.T) ** 2
            sx = (gx @ mx.T) ** 2
            out -= (sy * m.amplitudes) @ sx.T
        return out

    def point_adjoint(self, m, x):
        f = atoms(x.reshape(1, 2), self.psf)[0]
        d = atom_gradients(x.reshape(1, 2), self.psf)[0]
        rf = self.data @ f
        val = float(f @ rf)
        grad = 2.0 * (d @ rf)
        if len(m):
            A = atoms(m.positions, self.psf)
            c = A @ f
            val -= float(m.amplitudes @ c ** 2)
            grad -= 2.0 * (d @ A.T) @ (m.amplitudes * c)
        return val, grad

    def slide_value_grad(self, a, pos):
        # expanded 1/2|R|^2 - sum a_k q_k + 1/2 a^T (G o G) a, q_k = phi_k^T R phi_k
        A = atoms(pos, self.psf)
        dA = atom_gradients(pos, self.psf)
        RA = self.data @ A.T                              # (P, N)
        q = np.einsum("pn,np->n", RA, A)
        G = A @ A.T
        K = G ** 2
        Ka = K @ a
        val = self.half_norm2 - float(a @ q) + 0.5 * float(a @ Ka)
        ga = -q + Ka
        dq = 2.0 * np.einsum("kdp,pk->kd", dA, RA)         # d q_k / d x_k
        D = np.einsum("kdp,jp->kdj", dA, A)                # dphi_k . phi_j
        gx = a[:, None] * (-dq + 2.0 * np.einsum("kdj,kj,j->kd", D, G, a))
        return val, ga, gx


def _model(inst: ProblemInstance) -> _Model:
    return _MeanModel(inst) if inst.kind is ProblemKind.MEAN else _CovarianceModel(inst)


# --- objective and certificate ----------------------------------------------------

def objective(m: DiscreteMeasure, inst: ProblemInstance) -> float:
    """``1/2 |data - A m|^2 + lam |m|_TV`` with the residual formed explicitly."""
    return _model(inst).data_term(m) + inst.lam * tv_norm(m)


def objective_gradient(m: DiscreteMeasure, inst: ProblemInstance):
    """Gradient of :func:`objective` w.r.t. amplitudes ``(N,)`` and positions ``(N, 2)``.

    The l1 term contributes ``lam * sign(a)``; it is not differentiable at
    zero amplitudes, where 0 is used.
    """
    if len(m) == 0:
        return np.zeros(0), np.zeros((0, 2))
    _, ga, gx = _model(inst).slide_value_grad(m.amplitudes, m.positions)
    return ga + inst.lam * np.sign(m.amplitudes), gx


def certificate(m: DiscreteMeasure, inst: ProblemInstance, x) -> float:
    """``eta(x) = A*(data - A m)(x) / lam`` (positive at under-fitted spikes)."""
    val, _ = _model(inst).point_adjoint(m, np.asarray(x, dtype=float))
    return val / inst.lam


def certificate_grid(m: DiscreteMeasure, inst: ProblemInstance, factor: int) -> np.ndarray:
    """``eta`` on the ``factor``-oversampled lattice of pixel sub-centres, ``(Gy, Gx)``."""
    return _model(inst).grid_adjoint(m, factor) / inst.lam


def _stopping_value(eta, nonnegative):
    return eta if nonnegative else abs(eta)


def _best_point(model: _Model, m, factor, max_evals, nonnegative):
    """Best grid point of the certificate numerator, refined by bounded ascent.

    Returns ``(x, value)`` with ``value`` the signed numerator at ``x``.
    """
    gxc, gyc, _, _ = model.grid(factor)
    g = model.grid_adjoint(m, factor)
    score = g if nonnegative else np.abs(g)
    idx = int(np.argmax(score))                         # first maximum in row-major order
    iy, ix = divmod(idx, g.shape[1])
    x0 = np.array([gxc[ix], gyc[iy]])
    v0 = float(g[iy, ix])
    if max_evals <= 0 or v0 == 0.0:
        return x0, v0
    sign = 1.0 if (nonnegative or v0 >= 0) else -1.0
    norm = abs(v0)

    def fun(x):
        v, gr = model.point_adjoint(m, x)
        return -sign * v / norm, -sign * gr / norm

    res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=model.psf.domain.bounds,
                   options=dict(maxfun=max_evals, maxiter=max_evals, gtol=1e-10, ftol=1e-15))
    v1, _ = model.point_adjoint(m, res.x)
    if sign * v1 >= sign * v0:
        return np.asarray(res.x, dtype=float), float(v1)
    return x0, v0


def insert_spike(m: DiscreteMeasure, inst: ProblemInstance, opts: SolverOptions) -> np.ndarray:
    """Position maximizing ``|eta|`` (``eta`` under nonnegativity): grid scan plus refinement."""
    x, _ = _best_point(_model(inst), m, opts.insertion_grid_factor, opts.slide_max_evals,
                       inst.nonnegative)
    return x


def lambda_max(kind, data, psf: PsfModel, nonnegative: Optional[bool] = None,
               grid_factor: int = 4, max_evals: int = 500) -> float:
    """Smallest ``lam`` whose solution is the zero measure (sup of ``|A* data|``)."""
    inst = ProblemInstance(kind, data, psf, 1.0, nonnegative)
    _, v = _best_point(_model(inst), DiscreteMeasure(), grid_factor, max_evals, inst.nonnegative)
    return max(_stopping_value(v, inst.nonnegative), 0.0)


# --- amplitude step -----------------------------------------------------------------

def _lasso_value(G, b, c, lam, a):
    return c - float(b @ a) + 0.5 * float(a @ G @ a) + lam * float(np.sum(np.abs(a)))


def _fista(G, b, c, lam, nonneg, a0, tol, max_iter=5000):
    L = float(np.linalg.eigvalsh(G)[-1])
    if L <= 0:
        return np.zeros_like(b)
    step = 1.0 / L
    thr = lam * step

    def prox(v):
        if nonneg:
            return np.maximum(v - thr, 0.0)
        return np.sign(v) * np.maximum(np.abs(v) - thr, 0.0)

    a = prox(a0) if nonneg else a0.copy()
    z, t = a.copy(), 1.0
    f_prev = _lasso_value(G, b, c, lam, a)
    history = [f_prev]
    for k in range(1, max_iter + 1):
        a_new = prox(z - step * (G @ z - b))
        f_new = _lasso_value(G, b, c, lam, a_new)
        if f_new > f_prev:                                 # adaptive restart
            t = 1.0
            z = a.copy()
            a_new = prox(z - step * (G @ z - b))
            f_new = _lasso_value(G, b, c, lam, a_new)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        z = a_new + ((t - 1.0) / t_new) * (a_new - a)
        a, t, f_prev = a_new, t_new, f_new
        history.append(f_new)
        if k % 10 == 0:
            if history[-11] - f_new <= tol * max(abs(f_new), np.finfo(float).tiny):
                break
    return a


def _polish(G, b, c, lam, nonneg, a, max_rounds=100):
    """Feature-sign active-set refinement: exact LASSO optimality on small dictionaries."""
    n = b.size
    a = a.copy()
    f = _lasso_value(G, b, c, lam, a)
    for _ in range(max_rounds):
        corr = b - G @ a
        active = a != 0
        s = np.sign(a)
        viol = corr if nonneg else np.abs(corr)
        viol = np.where(active, -np.inf, viol - lam)
        j = int(np.argmax(viol)) if n else 0
        if n and viol[j] > 1e-12 * max(lam, 1e-300):
            active[j] = True
            s[j] = 1.0 if nonneg else np.sign(corr[j])
        S = np.flatnonzero(active)
        if S.size == 0:
            break
        z, *_ = np.linalg.lstsq(G[np.ix_(S, S)], b[S] - lam * s[S], rcond=None)
        cur = a[S]
        # walk from cur to z, stopping at the best sign change
        candidates = [1.0]
        with np.errstate(divide="ignore", invalid="ignore"):
            cross = cur / (cur - z)
        candidates += [float(t) for t in cross[(np.sign(z) != s[S]) & (cur != 0)] if 0 < t < 1]
        best, best_f = None, f
        for tt in candidates:
            trial = a.copy()
            v = cur + tt * (z - cur)
            v[np.sign(v) != s[S]] = 0.0
            if nonneg:
                v = np.maximum(v, 0.0)
            trial[S] = v
            ft = _lasso_value(G, b, c, lam, trial)
            if ft < best_f - 1e-15 * abs(best_f) or (best is None and ft <= best_f):
                best, best_f = trial, ft
        if best is None:
            break
        moved = np.max(np.abs(best - a)) if n else 0.0
        a, f = best, best_f
        corr = b - G @ a
        act = a != 0
        if nonneg:
            ok = np.all(corr[~act] <= lam * (1 + 1e-12))
        else:
            ok = np.all(np.abs(corr[~act]) <= lam * (1 + 1e-12))
        on = np.all(np.abs(corr[act] - lam * np.sign(a[act])) <= 1e-10 * max(lam, np.max(np.abs(b))))
        if (ok and on) or moved == 0.0:
            break
    return a


def solve_lasso_gram(G, b, lam, nonnegative=False, tol=1e-10, a0=None, c=0.0):
    """Minimize ``c - b.a + 1/2 a^T G a + lam |a|_1`` (``a >= 0`` if ``nonnegative``).

    Accelerated proximal gradient (FISTA with adaptive restart) until the
    relative objective decrease over 10 iterations falls below ``tol``, then an
    active-set polish that solves the KKT system on the identified support.
    """
    G = np.asarray(G, dtype=float)
    b = np.asarray(b, dtype=float)
    a0 = np.zeros_like(b) if a0 is None else np.asarray(a0, dtype=float)
    if b.size == 0:
        return b.copy()
    a = _fista(G, b, c, lam, nonnegative, a0, tol)
    a_pol = _polish(G, b, c, lam, nonnegative, a)
    if _lasso_value(G, b, c, lam, a_pol) <= _lasso_value(G, b, c, lam, a):
        a = a_pol
    return a


def lasso_amplitudes(support, inst: ProblemInstance, opts: SolverOptions, a0=None) -> np.ndarray:
    """l1-regularized least-squares amplitudes on the fixed positions ``support``."""
    model = _model(inst)
    return _lasso_on_support(model, np.asarray(support, dtype=float).reshape(-1, 2),
                             inst, opts, a0)


def _lasso_on_support(model, support, inst, opts, a0=None):
    A = atoms(support, inst.psf)
    G = model.gram(A)
    b = model.correlations(A)
    return solve_lasso_gram(G, b, inst.lam, inst.nonnegative, opts.lasso_tolerance, a0,
                            c=model.half_norm2)


# --- sliding step ---------------------------------------------------------------------

def _slide_objective(model, inst, a, pos, signs):
    val, ga, gx = model.slide_value_grad(a, pos)
    return val + inst.lam * float(signs @ a), ga + inst.lam * signs, gx


def slide(m: DiscreteMeasure, inst: ProblemInstance, opts: SolverOptions,
          _model_cache: Optional[_Model] = None) -> DiscreteMeasure:
    """Joint local descent on amplitudes and positions.

    L-BFGS-B with positions boxed to the domain and every amplitude kept on
    the sign it enters with (so the l1 term stays smooth); nonnegative
    problems keep amplitudes ``>= 0``. Returns the input unchanged unless the
    objective strictly decreases.
    """
    n = len(m)
    if n == 0 or opts.slide_max_evals <= 0:
        return m
    model = _model_cache or _model(inst)
    a0 = m.amplitudes.copy()
    signs = np.where(a0 < 0, -1.0, 1.0)
    if inst.nonnegative:
        signs[:] = 1.0
        a0 = np.maximum(a0, 0.0)
    scale = max(float(np.max(np.abs(a0))), np.finfo(float).tiny)
    f0, _, _ = _slide_objective(model, inst, a0, m.positions, signs)

    def fun(v):
        a = v[:n] * scale
        pos = v[n:].reshape(n, 2)
        f, ga, gx = _slide_objective(model, inst, a, pos, signs)
        return f / fnorm, np.concatenate([ga * scale, gx.reshape(-1)]) / fnorm

    fnorm = max(abs(f0), np.finfo(float).tiny)
    amp_bounds = [(0.0, None) if s > 0 else (None, 0.0) for s in signs]
    pos_bounds = model.psf.domain.bounds * n
    v0 = np.concatenate([a0 / scale, m.positions.reshape(-1)])
    res = minimize(fun, v0, jac=True, method="L-BFGS-B", bounds=amp_bounds + pos_bounds,
                   options=dict(maxfun=opts.slide_max_evals, maxiter=opts.slide_max_evals,
                                gtol=1e-12, ftol=1e-15))
    a1 = res.x[:n] * scale
    p1 = model.psf.domain.clip(res.x[n:].reshape(n, 2))
    f1, _, _ = _slide_objective(model, inst, a1, p1, signs)
    if not f1 < f0:
        return m
    return DiscreteMeasure(a1, p1)


# --- driver ------------------------------------------------------------------------------

def solve(inst: ProblemInstance, opts: SolverOptions = SolverOptions(),
          callback=None):
    """Sliding Frank-Wolfe. Returns ``(measure, report)``."""
    model = _model(inst)
    lam = inst.lam
    m = DiscreteMeasure()
    report = SolverReport()
    obj = model.data_term(m)
    for k in range(opts.max_iterations):
        t0 = time.perf_counter()
        x_star, v = _best_point(model, m, opts.insertion_grid_factor, opts.slide_max_evals,
                                inst.nonnegative)
        eta = _stopping_value(v / lam, inst.nonnegative)
        if eta <= 1.0 + opts.certificate_tolerance:
            report.records.append(IterationRecord(k, obj, eta, len(m),
                                                  1e3 * (time.perf_counter() - t0)))
            report.termination = Termination.CERTIFICATE_OPTIMAL
            report.final_certificate = eta
            return m, report

        if len(m) and np.min(np.linalg.norm(m.positions - x_star, axis=1)) <= DEGENERATE_INSERTION:
            trial = m
        else:
            support = np.vstack([m.positions, x_star])
            a_prev = np.append(m.amplitudes, 0.0)
            a_new = _lasso_on_support(model, support, inst, opts, a_prev)
            trial = DiscreteMeasure(a_new, support)
            prev = DiscreteMeasure(a_prev, support)
            if _objective_fast(model, trial, lam) > _objective_fast(model, prev, lam):
                trial = prev
            trial = prune_zero_amplitudes(trial, opts.amplitude_prune_threshold)

        m = slide(trial, inst, opts, _model_cache=model)
        m = prune_zero_amplitudes(m, opts.amplitude_prune_threshold)
        obj = _objective_fast(model, m, lam)
        if not np.isfinite(obj):
            raise FloatingPointError("non-finite objective")
        report.records.append(IterationRecord(k, obj, eta, len(m),
                                              1e3 * (time.perf_counter() - t0)))
        if callback is not None:
            callback(k, m, report)

    _, v = _best_point(model, m, opts.insertion_grid_factor, opts.slide_max_evals,
                       inst.nonnegative)
    report.final_certificate = _stopping_value(v / lam, inst.nonnegative)
    if report.final_certificate <= 1.0 + opts.certificate_tolerance:
        report.termination = Termination.CERTIFICATE_OPTIMAL
    return m, report


def _objective_fast(model: _Model, m: DiscreteMeasure, lam: float) -> float:
    if isinstance(model, _CovarianceModel) and len(m):
        val, _, _ = model.slide_value_grad(m.amplitudes, m.positions)
        return val + lam * tv_norm(m)
    return model.data_term(m) + lam * tv_norm(m)
