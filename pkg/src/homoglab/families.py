"""Coefficient families, Cesaro averaging and the effective-coefficient build.

A family bundles the primitives of the two-scale system: the fast-variable
diffusion amplitude ``phi`` (through ``a00 = phi^2/2``), the slow drift and
diffusion ``b1``/``sigma1``, the driver ``f`` and the terminal function ``H``.
Catalog families follow an oscillation+transition template in the weighted
quantities

    rho      = r0(x2) + r1(x2)*T(x1) + r2(x2)*sin(x1)
    rho*b1   = ...
    rho*a1   = ...
    rho*f    = (q0(x2) + q1(x2)*T(x1) + q2(x2)*sin(x1)) * (c0 + c1*tanh(y))

with ``T(x1) = (2/pi)*arctan(x1)`` and ``rho = 1/a00``.  Running averages of
``T`` tend to +1/-1 and of ``sin`` to 0, so every effective coefficient has a
closed form that the numeric averaging engine is checked against.

The effective model takes the quotient form: each averaged coefficient is a
ratio of Cesaro limits weighted by ``rho``, with a separate value on each
side of the interface ``{x1 = 0}`` (the point 0 itself uses the minus side).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.stats import qmc

from .quadrature import QuadratureError, cumulative, integrate


def transition(x1):
    """Odd transition profile with Cesaro running-average limits +1/-1."""
    return (2.0 / np.pi) * np.arctan(x1)


class FamilyError(ValueError):
    """Unknown family id, bad parameter arity or malformed tables."""


class AveragingError(RuntimeError):
    """Numeric Cesaro limits disagree with the declared closed form."""


# ---------------------------------------------------------------------------
# Cesaro averaging engine
# ---------------------------------------------------------------------------

def geometric_schedule(x_start: float = 100.0, ratio: float = math.sqrt(10.0),
                       n_horizons: int = 9) -> np.ndarray:
    return x_start * ratio ** np.arange(n_horizons)


@dataclass(frozen=True)
class CesaroResult:
    g_plus: np.ndarray
    g_minus: np.ndarray
    converged: bool
    residual: float
    horizons: np.ndarray
    averages_plus: np.ndarray   # (n_horizons, m)
    averages_minus: np.ndarray


def cesaro_average(g, x2, schedule=None, tol: float = 1e-4) -> CesaroResult:
    """Running-average limits of ``g(t, x2)`` as t -> +/- infinity.

    ``g`` must be vectorized in t and may return several components at once
    (shape ``(nt, m)``).  The average A(X) = (1/X) * int_0^X g is evaluated
    on a geometric horizon schedule via adaptive panel quadrature, and
    convergence is declared when the last three values stabilize to ``tol``.
    Non-convergence is reported, never papered over with an extrapolation.
    """
    schedule = np.asarray(geometric_schedule() if schedule is None
                          else schedule, dtype=float)
    if schedule.size < 4 or np.any(np.diff(schedule) <= 0) or schedule[0] <= 0:
        raise ValueError("schedule must be increasing, positive, length >= 4")

    def one_side(sign):
        grid = np.concatenate(([0.0], sign * schedule))
        cum = cumulative(lambda t: g(t, x2), grid, rtol=tol / 10.0)
        # (1/x1) * int_0^{x1}; both signs give the plain ratio.
        return cum[1:] / (sign * schedule)[:, None]

    avg_p = one_side(+1.0)
    avg_m = one_side(-1.0)
    res_p = np.max(np.abs(avg_p[-3:] - avg_p[-1]))
    res_m = np.max(np.abs(avg_m[-3:] - avg_m[-1]))
    residual = float(max(res_p, res_m))
    return CesaroResult(
        g_plus=avg_p[-1].copy(), g_minus=avg_m[-1].copy(),
        converged=bool(residual <= tol), residual=residual,
        horizons=schedule, averages_plus=avg_p, averages_minus=avg_m)


# ---------------------------------------------------------------------------
# Families
# ---------------------------------------------------------------------------

def _as_x2(x2, d):
    x2 = np.asarray(x2, dtype=float)
    if x2.ndim == 0:
        x2 = x2[None]
    if x2.shape[-1] != d:
        raise FamilyError(f"x2 has trailing dimension {x2.shape[-1]}, expected {d}")
    return x2


@dataclass(frozen=True)
class _Template:
    """Weights of c0(x2) + c1(x2)*T(x1) + c2(x2)*sin(x1)."""
    w0: Callable
    w1: Callable
    w2: Callable

    def __call__(self, x1, x2):
        x1 = np.asarray(x1, dtype=float)
        w0, w1, w2 = self.w0(x2), self.w1(x2), self.w2(x2)
        extra = w0.ndim - x1.ndim
        xx = x1.reshape(x1.shape + (1,) * extra) if extra > 0 else x1
        return w0 + w1 * transition(xx) + w2 * np.sin(xx)

    def limits(self, x2, a_trans, a_sin):
        """Combine weights with (numeric or exact) basis limits."""
        plus = self.w0(x2) + self.w1(x2) * a_trans[0] + self.w2(x2) * a_sin[0]
        minus = self.w0(x2) + self.w1(x2) * a_trans[1] + self.w2(x2) * a_sin[1]
        return plus, minus


def _scalar_w(fn_or_c, d):
    if callable(fn_or_c):
        return lambda x2: np.asarray(fn_or_c(x2), dtype=float)
    c = float(fn_or_c)
    return lambda x2: np.full(np.asarray(x2).shape[:-1], c)

def _vec_w(v, d):
    v = np.asarray(v, dtype=float).reshape(d)
    return lambda x2: np.broadcast_to(v, np.asarray(x2).shape[:-1] + (d,)).copy()

def _mat_w(m, d):
    m = np.asarray(m, dtype=float).reshape(d, d)
    return lambda x2: np.broadcast_to(m, np.asarray(x2).shape[:-1] + (d, d)).copy()


@dataclass
class CoefficientFamily:
    """Evaluable two-scale coefficient set with declared bounds.

    ``d`` is the slow dimension, ``k = d + 1`` the Brownian dimension.
    Bounds (a00 ellipticity window, Lipschitz constant, driver sup norm)
    are declared by the constructor and audited by sampling.
    """
    family_id: str
    params: tuple
    d: int
    k: int
    rho_t: _Template
    rhob_t: _Template
    rhoa_t: _Template
    rhof_t: _Template
    f_shape: tuple            # (c0, c1): y-shape c0 + c1*tanh(y)
    H: Callable
    bounds: dict
    closed_form_limits: Optional["AveragedModel"] = None
    _clamp_count: list = field(default_factory=lambda: [0], repr=False)

    # -- raw weighted quantities -------------------------------------------
    def rho(self, x1, x2):
        return self.rho_t(x1, _as_x2(x2, self.d))

    def rho_b(self, x1, x2):
        return self.rhob_t(x1, _as_x2(x2, self.d))

    def rho_a(self, x1, x2):
        return self.rhoa_t(x1, _as_x2(x2, self.d))

    def rho_f(self, x1, x2, y):
        base = self.rhof_t(x1, _as_x2(x2, self.d))
        return base * self.f_y_shape(y)

    def f_y_shape(self, y):
        c0, c1 = self.f_shape
        return c0 + c1 * np.tanh(np.asarray(y, dtype=float))

    # -- physical coefficients ---------------------------------------------
    def a00(self, x1, x2):
        return 1.0 / self.rho(x1, x2)

    def phi(self, x1, x2):
        return np.sqrt(2.0 / self.rho(x1, x2))

    def b1(self, x1, x2):
        return self.rho_b(x1, x2) / self.rho(x1, x2)[..., None]

    def a1(self, x1, x2):
        return self.rho_a(x1, x2) / self.rho(x1, x2)[..., None, None]

    def sigma1(self, x1, x2):
        return _sym_sqrt(2.0 * self.a1(x1, x2))

    def f(self, x1, x2, y):
        return self.rho_f(x1, x2, y) / self.rho(x1, x2)

    def terminal(self, x):
        x = np.asarray(x, dtype=float)
        return self.H(x)


def _sym_sqrt(mat):
    """Symmetric PSD square root, batched over leading axes."""
    mat = np.asarray(mat, dtype=float)
    d = mat.shape[-1]
    if d == 1:
        v = mat[..., 0, 0]
        if np.any(v < 0):
            raise AveragingError("matrix square root of a negative 1x1 block")
        return np.sqrt(v)[..., None, None]
    w, v = np.linalg.eigh(mat)
    if np.any(w < -1e-12):
        raise AveragingError("matrix square root of an indefinite block")
    w = np.clip(w, 0.0, None)
    return np.einsum("...ij,...j,...kj->...ik", v, np.sqrt(w), v)


# ---------------------------------------------------------------------------
# Averaged (effective) model
# ---------------------------------------------------------------------------

@dataclass
class _Branch:
    rho: Callable          # x2 -> (...,)
    rho_b: Callable        # x2 -> (..., d)  limit of rho*b1
    rho_a: Callable        # x2 -> (..., d, d)
    f_coef: Callable       # x2 -> (...,)  limit of rho*f y-independent factor


@dataclass
class AveragedModel:
    """Effective coefficients; possibly discontinuous across {x1 = 0}.

    The point x1 = 0 belongs to the minus branch.  The driver's y-shape is
    tabulated on a grid and interpolated by a monotone cubic; outside the
    grid the (bounded, saturating) shape is clamped to the edge values.
    """
    d: int
    k: int
    plus: _Branch
    minus: _Branch
    y_grid: np.ndarray
    y_shape: PchipInterpolator
    y_shape_fn: Optional[Callable] = None   # exact shape when known
    side_convention: str = "minus"
    exact: bool = False

    # -- branch plumbing ----------------------------------------------------
    def _blend(self, x1, pv, mv):
        x1 = np.asarray(x1, dtype=float)
        mask = x1 > 0
        extra = pv.ndim - mask.ndim
        if extra > 0:
            mask = mask.reshape(mask.shape + (1,) * extra)
        return np.where(mask, pv, mv)

    def rho_plus(self, x2):
        return self.plus.rho(_as_x2(x2, self.d))

    def rho_minus(self, x2):
        return self.minus.rho(_as_x2(x2, self.d))

    def rho_pm(self, x1, x2):
        x2 = _as_x2(x2, self.d)
        return self._blend(x1, self.plus.rho(x2), self.minus.rho(x2))

    def a00_bar(self, x1, x2):
        return 1.0 / self.rho_pm(x1, x2)

    def b_bar(self, x1, x2):
        x2 = _as_x2(x2, self.d)
        p = self.plus.rho_b(x2) / self.plus.rho(x2)[..., None]
        m = self.minus.rho_b(x2) / self.minus.rho(x2)[..., None]
        return self._blend(x1, p, m)

    def a1_bar(self, x1, x2):
        x2 = _as_x2(x2, self.d)
        p = self.plus.rho_a(x2) / self.plus.rho(x2)[..., None, None]
        m = self.minus.rho_a(x2) / self.minus.rho(x2)[..., None, None]
        return self._blend(x1, p, m)

    def a_bar(self, x1, x2):
        a00 = self.a00_bar(x1, x2)
        a1 = self.a1_bar(x1, x2)
        out = np.zeros(a1.shape[:-2] + (self.d + 1, self.d + 1))
        out[..., 0, 0] = a00
        out[..., 1:, 1:] = a1
        return out

    def phi_bar(self, x1, x2):
        return np.sqrt(2.0 * self.a00_bar(x1, x2))

    def sigma1_bar(self, x1, x2):
        return _sym_sqrt(2.0 * self.a1_bar(x1, x2))

    def sigma_bar(self, x1, x2):
        s1 = self.sigma1_bar(x1, x2)
        out = np.zeros(s1.shape[:-2] + (self.d + 1, self.k))
        out[..., 0, 0] = self.phi_bar(x1, x2)
        out[..., 1:, 1:] = s1
        return out

    def _shape_at(self, y):
        if self.y_shape_fn is not None:
            return np.asarray(self.y_shape_fn(np.asarray(y, dtype=float)))
        y = np.clip(np.asarray(y, dtype=float), self.y_grid[0], self.y_grid[-1])
        return self.y_shape(y)

    def f_bar(self, x1, x2, y):
        x2 = _as_x2(x2, self.d)
        p = self.plus.f_coef(x2) / self.plus.rho(x2)
        m = self.minus.f_coef(x2) / self.minus.rho(x2)
        return self._blend(x1, p, m) * self._shape_at(y)

    # -- serialization ------------------------------------------------------
    def to_json(self, x2_grid, x1_probe=(-1.0, 1.0)):
        """Branch tables on an x2 grid, for regression testing."""
        x2_grid = np.asarray(x2_grid, dtype=float)
        if x2_grid.ndim == 1:
            x2_grid = x2_grid[:, None]
        doc = {"format": "averaged-model", "version": 1, "d": self.d,
               "k": self.k, "side_convention": self.side_convention,
               "x2_grid": x2_grid.tolist(),
               "y_grid": self.y_grid.tolist(),
               "y_shape": self.y_shape(self.y_grid).tolist(),
               "branches": {}}
        for name, x1 in (("plus", max(x1_probe)), ("minus", min(x1_probe))):
            doc["branches"][name] = {
                "rho": self.rho_pm(x1, x2_grid).tolist(),
                "b_bar": self.b_bar(x1, x2_grid).tolist(),
                "a_bar": self.a_bar(x1, x2_grid).tolist(),
                "f_bar_at_ygrid": np.stack(
                    [self.f_bar(x1, x2_grid, y) for y in self.y_grid],
                    axis=-1).tolist(),
            }
        return doc

    def save_json(self, path, x2_grid):
        with open(path, "w") as fh:
            json.dump(self.to_json(x2_grid), fh, sort_keys=True, indent=1)


# ---------------------------------------------------------------------------
# eval_coefficients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoeffValues:
    phi: np.ndarray
    b1: np.ndarray
    sigma1: np.ndarray
    a00: np.ndarray
    f_at: Callable
    H: Callable


def eval_coefficients(fam: CoefficientFamily, x1, x2, eps=None) -> CoeffValues:
    """Coefficient values at (x1/eps, x2) when eps is given, else at (x1, x2)."""
    if eps is not None and not eps > 0:
        raise ValueError("eps must be positive")
    x1f = np.asarray(x1, dtype=float) / eps if eps is not None else np.asarray(x1, dtype=float)
    return CoeffValues(
        phi=fam.phi(x1f, x2), b1=fam.b1(x1f, x2), sigma1=fam.sigma1(x1f, x2),
        a00=fam.a00(x1f, x2),
        f_at=lambda y: fam.f(x1f, x2, y),
        H=fam.terminal)


# ---------------------------------------------------------------------------
# build_averaged
# ---------------------------------------------------------------------------

_DEFAULT_YGRID = np.linspace(-4.0, 4.0, 41)


def _basis_limits_numeric(schedule, tol):
    """Cesaro limits of the template basis (T, sin) by quadrature."""
    res = cesaro_average(
        lambda t, _x2: np.stack([transition(t), np.sin(t)], axis=-1),
        x2=None, schedule=schedule, tol=tol)
    if not res.converged:
        raise AveragingError(
            f"basis running averages did not stabilize (residual {res.residual:.3e})")
    a_trans = (float(res.g_plus[0]), float(res.g_minus[0]))
    a_sin = (float(res.g_plus[1]), float(res.g_minus[1]))
    return a_trans, a_sin


def _assemble(fam, a_trans, a_sin, y_grid, exact):
    def branch(side):
        i = 0 if side == "+" else 1
        return _Branch(
            rho=lambda x2, i=i: fam.rho_t.limits(x2, a_trans, a_sin)[i],
            rho_b=lambda x2, i=i: fam.rhob_t.limits(x2, a_trans, a_sin)[i],
            rho_a=lambda x2, i=i: fam.rhoa_t.limits(x2, a_trans, a_sin)[i],
            f_coef=lambda x2, i=i: fam.rhof_t.limits(x2, a_trans, a_sin)[i])
    y_grid = np.asarray(y_grid, dtype=float)
    shape_tab = fam.f_y_shape(y_grid)
    return AveragedModel(
        d=fam.d, k=fam.k, plus=branch("+"), minus=branch("-"),
        y_grid=y_grid, y_shape=PchipInterpolator(y_grid, shape_tab),
        y_shape_fn=fam.f_y_shape, exact=exact)


def closed_form_averaged(fam: CoefficientFamily,
                         y_grid=_DEFAULT_YGRID) -> AveragedModel:
    """Effective model from the exact basis limits T -> +/-1, sin -> 0."""
    return _assemble(fam, (1.0, -1.0), (0.0, 0.0), y_grid, exact=True)


def _compare_models(num: AveragedModel, ref: AveragedModel, grid_n=21):
    x1g = np.linspace(-2.0, 2.0, grid_n)
    x2g = np.linspace(-3.0, 3.0, grid_n)[:, None]
    dev = 0.0
    for x1 in (x1g[0], -1e-9, 0.0, 1e-9, x1g[-1]):
        dev = max(dev, float(np.max(np.abs(num.rho_pm(x1, x2g) - ref.rho_pm(x1, x2g)))))
        dev = max(dev, float(np.max(np.abs(num.b_bar(x1, x2g) - ref.b_bar(x1, x2g)))))
        dev = max(dev, float(np.max(np.abs(num.a_bar(x1, x2g) - ref.a_bar(x1, x2g)))))
        for y in (-2.0, 0.0, 2.0):
            dev = max(dev, float(np.max(np.abs(num.f_bar(x1, x2g, y) - ref.f_bar(x1, x2g, y)))))
    return dev


def build_averaged(fam: CoefficientFamily, y_grid=_DEFAULT_YGRID,
                   tol: float = 1e-4, schedule=None) -> AveragedModel:
    """Numeric Cesaro averaging of a family's weighted coefficients.

    The template structure makes every weighted coefficient a fixed linear
    combination of {1, T, sin}, so the engine averages the basis once and
    assembles the branches by linearity.  When the family declares closed
    forms the numeric model must agree with them within ``tol``; the
    returned model then carries the closed form.
    """
    a_trans, a_sin = _basis_limits_numeric(schedule, tol)
    numeric = _assemble(fam, a_trans, a_sin, y_grid, exact=False)
    # Positive definiteness at a probe set; failures point at (A3) violations.
    probe_x2 = np.linspace(-3.0, 3.0, 7)[:, None] if fam.d == 1 else \
        np.zeros((1, fam.d))
    for x1 in (-1.0, 0.0, 1.0):
        a1 = numeric.a1_bar(x1, probe_x2)
        if np.any(np.linalg.eigvalsh(a1) <= 0):
            raise AveragingError("assembled averaged diffusion block is not "
                                 "positive definite (upstream assumption violation)")
        _ = _sym_sqrt(2.0 * a1)
    if fam.closed_form_limits is not None:
        dev = _compare_models(numeric, fam.closed_form_limits)
        if dev > tol:
            raise AveragingError(
                f"numeric limits deviate from closed form by {dev:.3e} > tol {tol:.1e}")
        return fam.closed_form_limits
    return numeric


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------

def _attach_closed_form(fam: CoefficientFamily) -> CoefficientFamily:
    fam.closed_form_limits = closed_form_averaged(fam)
    return fam


def _const_family() -> CoefficientFamily:
    d = 1
    zero = _scalar_w(0.0, d)
    fam = CoefficientFamily(
        family_id="const", params=(), d=d, k=d + 1,
        rho_t=_Template(_scalar_w(1.0, d), zero, zero),
        rhob_t=_Template(_vec_w([0.0], d), _vec_w([0.0], d), _vec_w([0.0], d)),
        rhoa_t=_Template(_mat_w([[0.5]], d), _mat_w([[0.0]], d), _mat_w([[0.0]], d)),
        rhof_t=_Template(zero, zero, zero),
        f_shape=(0.0, 0.0),
        H=lambda x: np.ones(np.asarray(x).shape[:-1]),
        bounds=dict(C1=1.0, C2=1.0, C3=2.0, Lambda=1.0, lip=0.0,
                    f_sup=0.0, h_sup=1.0, deriv_bound=1.0))
    return _attach_closed_form(fam)


def _switch_family(params=()) -> CoefficientFamily:
    if len(params) == 0:
        r0, r1 = 2.0, 1.0
    elif len(params) == 2:
        r0, r1 = map(float, params)
        if r0 - abs(r1) < 0.2:
            raise FamilyError("switch family needs r0 - |r1| >= 0.2")
    else:
        raise FamilyError(f"switch family takes 0 or 2 params, got {len(params)}")
    d = 1
    fam = CoefficientFamily(
        family_id="switch", params=tuple(params), d=d, k=d + 1,
        rho_t=_Template(_scalar_w(r0, d), _scalar_w(r1, d), _scalar_w(0.0, d)),
        rhob_t=_Template(_vec_w([1.0], d), _vec_w([1.0], d), _vec_w([0.3], d)),
        rhoa_t=_Template(_mat_w([[1.2]], d), _mat_w([[0.4]], d), _mat_w([[0.2]], d)),
        rhof_t=_Template(_scalar_w(0.9, d), _scalar_w(0.3, d), _scalar_w(0.2, d)),
        f_shape=(1.0, 0.5),
        H=lambda x: np.tanh(x[..., 0]) + 0.5 * np.cos(x[..., 1]),
        bounds=dict(C1=1.0 / (r0 + abs(r1)), C2=1.0 / (r0 - abs(r1)),
                    C3=12.0, Lambda=2.0 * 0.6 / (r0 + abs(r1)), lip=3.0,
                    f_sup=1.5 * 1.4 / (r0 - abs(r1)), h_sup=1.5,
                    deriv_bound=3.0))
    return _attach_closed_form(fam)


def _slowvary_family() -> CoefficientFamily:
    d = 1
    zero = _scalar_w(0.0, d)
    zvec = _vec_w([0.0], d)
    zmat = _mat_w([[0.0]], d)

    def b_w(x2):
        return 0.5 * np.tanh(x2)          # (..., d) already

    def a_w(x2):
        return (0.5 + 0.2 * np.cos(x2[..., 0]))[..., None, None]

    def q_w(x2):
        return 0.5 + 0.2 * np.cos(x2[..., 0])

    fam = CoefficientFamily(
        family_id="slowvary", params=(), d=d, k=d + 1,
        rho_t=_Template(_scalar_w(1.0, d), zero, zero),
        rhob_t=_Template(lambda x2: b_w(x2), zvec, zvec),
        rhoa_t=_Template(lambda x2: a_w(x2), zmat, zmat),
        rhof_t=_Template(lambda x2: q_w(x2), zero, zero),
        f_shape=(0.2, 0.3),
        H=lambda x: np.tanh(x[..., 0]) + 0.5 * np.cos(x[..., 1]),
        bounds=dict(C1=1.0, C2=1.0, C3=4.0, Lambda=0.6, lip=1.0,
                    f_sup=0.5 * 0.7, h_sup=1.5, deriv_bound=1.5))
    return _attach_closed_form(fam)


def _noparams(fid, builder):
    def make(params):
        if len(params) != 0:
            raise FamilyError(f"{fid} family takes no params, got {len(params)}")
        return builder()
    return make


CATALOG = {"const": _noparams("const", _const_family),
           "switch": _switch_family,
           "slowvary": _noparams("slowvary", _slowvary_family)}


def make_family(family_id: str, params: Sequence[float] = (), d: int = 1,
                k: Optional[int] = None) -> CoefficientFamily:
    if family_id not in CATALOG:
        raise FamilyError(f"unknown family_id {family_id!r}")
    fam = CATALOG[family_id](tuple(params))
    if d != fam.d or (k is not None and k != fam.k):
        raise FamilyError(f"{family_id} is a d={fam.d}, k={fam.k} family")
    return fam


def from_tables(x1_grid, rho_tab, rhob_tab, rhoa_tab, rhof_tab,
                f_shape=(0.0, 1.0), H=None, bounds=None) -> CoefficientFamily:
    """Tabulated-custom family: x2-independent samples over an x1 grid.

    Evaluation outside the grid clamps to the edge (saturation form for the
    fast argument); clamps are counted on the family for diagnostics.  No
    closed-form limits are attached.
    """
    x1_grid = np.asarray(x1_grid, dtype=float)
    rho_tab = np.asarray(rho_tab, dtype=float)
    rhob_tab = np.asarray(rhob_tab, dtype=float)
    rhoa_tab = np.asarray(rhoa_tab, dtype=float)
    rhof_tab = np.asarray(rhof_tab, dtype=float)
    if rhob_tab.ndim != 2 or rhoa_tab.ndim != 3:
        raise FamilyError("rhob_tab must be (nx, d) and rhoa_tab (nx, d, d)")
    d = rhob_tab.shape[1]
    counter = [0]

    def interp(tab):
        def ev(x1, x2):
            x1 = np.asarray(x1, dtype=float)
            n_out = int(np.sum((x1 < x1_grid[0]) | (x1 > x1_grid[-1])))
            if n_out:
                counter[0] += n_out
            xc = np.clip(x1, x1_grid[0], x1_grid[-1])
            flat = tab.reshape(tab.shape[0], -1)
            vals = np.stack([np.interp(xc, x1_grid, flat[:, j])
                             for j in range(flat.shape[1])], axis=-1)
            out = vals.reshape(x1.shape + tab.shape[1:])
            want = np.asarray(x2).shape[:-1] + tab.shape[1:]
            return np.broadcast_to(out.reshape(x1.shape + tab.shape[1:]), want) \
                if out.shape != want else out
        return ev

    # Tabulated families bypass the template; wrap the interpolants in
    # objects with the same call/limits surface.  Limits come from the
    # clamped tails (the table is constant outside its range).
    class _Tab:
        def __init__(self, tab):
            self.tab = tab
            self.ev = interp(tab)
        def __call__(self, x1, x2):
            return self.ev(x1, x2)
        def limits(self, x2, a_trans, a_sin):
            del a_trans, a_sin
            shp = np.asarray(x2).shape[:-1]
            plus = np.broadcast_to(self.tab[-1], shp + self.tab.shape[1:]).copy()
            minus = np.broadcast_to(self.tab[0], shp + self.tab.shape[1:]).copy()
            return plus, minus

    fam = CoefficientFamily(
        family_id="tabulated", params=(), d=d, k=d + 1,
        rho_t=_Tab(rho_tab), rhob_t=_Tab(rhob_tab),
        rhoa_t=_Tab(rhoa_tab), rhof_t=_Tab(rhof_tab),
        f_shape=tuple(f_shape),
        H=H if H is not None else (lambda x: np.ones(np.asarray(x).shape[:-1])),
        bounds=bounds or dict(
            C1=float(1.0 / rho_tab.max()), C2=float(1.0 / rho_tab.min()),
            C3=50.0, Lambda=0.1, lip=10.0, f_sup=10.0, h_sup=10.0,
            deriv_bound=10.0),
        _clamp_count=counter)
    return fam


# ---------------------------------------------------------------------------
# Assumption audit
# ---------------------------------------------------------------------------

_ASSUMPTION_IDS = ("A1", "A2", "A3", "B1", "B2", "B3", "C1", "C2", "C3")


@dataclass
class AssumptionEntry:
    id: str
    status: str                  # verified-sampled | closed-form | violated | unchecked
    residual: float
    witness: Optional[tuple] = None
    detail: str = ""


@dataclass
class AssumptionReport:
    entries: dict

    def __getitem__(self, key):
        return self.entries[key]

    def violated(self):
        return [e for e in self.entries.values() if e.status == "violated"]


def audit_assumptions(fam: CoefficientFamily, sample_spec: dict) -> AssumptionReport:
    """Sampled audit of the structural assumptions; never a proof.

    ``sample_spec`` = {"box": [(lo, hi), ...] over (x1, x2_1..x2_d, y),
    "n_samples": int, "seed": int}.  Violations carry a witness point.
    """
    box = np.asarray(sample_spec["box"], dtype=float)
    n = int(sample_spec["n_samples"])
    seed = int(sample_spec["seed"])
    if box.shape[0] < fam.d + 1 or np.any(box[:, 1] <= box[:, 0]):
        raise ValueError("sample box must be nonempty over (x1, x2[, y])")
    dims = box.shape[0]
    sob = qmc.Sobol(d=dims, scramble=True, seed=seed)
    pts = qmc.scale(sob.random(n), box[:, 0], box[:, 1])
    x1 = pts[:, 0]
    x2 = pts[:, 1:1 + fam.d]
    y = pts[:, 1 + fam.d] if dims > 1 + fam.d else np.zeros(n)
    b = fam.bounds
    entries = {}

    def _witness(idx):
        return tuple(float(v) for v in pts[idx])

    # (A3): ellipticity window on a00 and the slow diffusion block.
    a00 = fam.a00(x1, x2)
    res_a3 = np.maximum(b["C1"] - a00, a00 - b["C2"])
    eigs = np.linalg.eigvalsh(2.0 * fam.a1(x1, x2)).min(axis=-1)
    res_a3 = np.maximum(res_a3, b["Lambda"] - eigs)
    growth = (np.abs(2.0 * fam.a1(x1, x2)).sum(axis=(-2, -1)) + a00
              + np.sum(fam.b1(x1, x2) ** 2, axis=-1)
              - b["C3"] * (1.0 + np.sum(x2 ** 2, axis=-1)))
    res_a3 = np.maximum(res_a3, growth)
    i = int(np.argmax(res_a3))
    entries["A3"] = AssumptionEntry(
        "A3", "violated" if res_a3[i] > 1e-12 else "verified-sampled",
        float(res_a3[i]), _witness(i) if res_a3[i] > 1e-12 else None,
        "ellipticity window, growth bound")

    # (A1): sampled Lipschitz quotients of phi, b1, sigma1.
    rng = np.random.default_rng(seed + 1)
    j = rng.permutation(n)
    dx = np.sqrt((x1 - x1[j]) ** 2 + np.sum((x2 - x2[j]) ** 2, axis=-1))
    ok = dx > 1e-9
    def lip_of(fn):
        v = fn(x1, x2)
        dv = np.abs(v - v[j]).reshape(n, -1).max(axis=-1)
        return np.where(ok, dv / np.where(ok, dx, 1.0), 0.0)
    q = np.maximum(lip_of(fam.phi),
                   np.maximum(lip_of(lambda a, c: fam.b1(a, c)),
                              lip_of(lambda a, c: fam.sigma1(a, c))))
    res_a1 = q - b["lip"]
    i = int(np.argmax(res_a1))
    entries["A1"] = AssumptionEntry(
        "A1", "violated" if res_a1[i] > 1e-9 else "verified-sampled",
        float(res_a1[i]), _witness(i) if res_a1[i] > 1e-9 else None,
        "sampled difference quotients vs declared Lipschitz constant")

    # (A2)/(C3): sampled second x2-differences bounded.
    h = 1e-3
    def d2_x2(fn):
        e = np.zeros_like(x2); e[:, 0] = h
        return np.abs(fn(x1, x2 + e) - 2.0 * fn(x1, x2) + fn(x1, x2 - e)).max() / h ** 2
    res_a2 = max(d2_x2(fam.phi), d2_x2(lambda a, c: fam.b1(a, c)[..., 0])) - b["deriv_bound"]
    entries["A2"] = AssumptionEntry(
        "A2", "violated" if res_a2 > 1e-6 else "verified-sampled",
        float(res_a2), None, "sampled second x2-differences")
    res_c3 = d2_x2(lambda a, c: fam.rho_f(a, c, 0.0)) - b["deriv_bound"]
    entries["C3"] = AssumptionEntry(
        "C3", "violated" if res_c3 > 1e-6 else "verified-sampled",
        float(res_c3), None, "sampled second x2-differences of rho*f")

    # (C1): bounded driver and terminal condition.
    fv = np.abs(fam.f(x1, x2, y))
    res_c1 = float(np.max(fv) - b["f_sup"])
    hv = np.abs(fam.terminal(np.concatenate([x1[:, None], x2], axis=1)))
    res_c1 = max(res_c1, float(np.max(hv) - b["h_sup"]))
    i = int(np.argmax(fv))
    entries["C1"] = AssumptionEntry(
        "C1", "violated" if res_c1 > 1e-9 else "verified-sampled",
        res_c1, _witness(i) if res_c1 > 1e-9 else None,
        "driver and terminal sup bounds")

    # (B1)/(B2): existence of the limits; closed-form for the catalog.
    has_cf = fam.closed_form_limits is not None
    for aid in ("B1", "B2"):
        entries[aid] = AssumptionEntry(
            aid, "closed-form" if has_cf else "unchecked", 0.0, None,
            "limits exist by template construction" if has_cf
            else "no closed form; B-limits not separately certified")

    # (B3)/(C2): remainder decay trend along |x1| in {10, 1e2, 1e3, 1e4}.
    x2_ref = np.zeros((1, fam.d))
    avg = build_averaged(fam) if not has_cf else fam.closed_form_limits
    horizons = np.array([10.0, 1e2, 1e3, 1e4])
    for aid, g, norm in (
            ("B3", lambda t, _: fam.rho(t, x2_ref),
             1.0 + float(np.sum(x2_ref ** 2))),
            ("C2", lambda t, _: fam.rho_f(t, x2_ref, 0.0),
             1.0 + float(np.sum(x2_ref ** 2)))):
        rem = []
        for sgn in (+1.0, -1.0):
            grid = np.concatenate(([0.0], sgn * horizons))
            cum = cumulative(lambda t: g(t, None)[:, None], grid, rtol=1e-6)
            run = cum[1:, 0] / (sgn * horizons)
            if aid == "B3":
                lim = avg.plus.rho(x2_ref)[0] if sgn > 0 else avg.minus.rho(x2_ref)[0]
            else:
                lim = (avg.plus.f_coef(x2_ref)[0] if sgn > 0
                       else avg.minus.f_coef(x2_ref)[0]) * fam.f_y_shape(0.0)
            rem.append(np.abs(run - lim) / norm)
        trend = np.maximum(rem[0], rem[1])
        decreasing = bool(np.all(np.diff(trend) <= 1e-12 + 0.05 * trend[:-1]))
        entries[aid] = AssumptionEntry(
            aid, "verified-sampled" if decreasing else "violated",
            float(trend[-1]),
            None if decreasing else (float(horizons[int(np.argmax(np.diff(trend) > 0))]),),
            f"remainder along |x1|={list(horizons)}: {[float(t) for t in trend]}")
    return AssumptionReport(entries=entries)
