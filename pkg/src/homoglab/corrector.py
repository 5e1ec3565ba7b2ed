"""Fast-variable corrector: construction by quadrature and decay checks.

The corrector V solves  a00(x1/eps, x2) * V'' = f(x1/eps, x2, y) - fbar(x1, x2, y)
in x1 with V(0) = V'(0) = 0, for frozen (x2, y).  Writing
q(t) = rho(t/eps, x2) * (f(t/eps, x2, y) - fbar(t, x2, y)), the solution is the
double primitive

    V(x1)  = int_0^{x1} (x1 - t) q(t) dt,      V'(x1) = int_0^{x1} q(t) dt,

so everything reduces to single adaptive quadratures (the running-average
form V'(x1) = x1 * F(x1) has the removable singularity F(0) := 0 handled
explicitly).  Because q averages to zero on each side of the interface,
V shrinks with eps; decay_table tabulates that.

Second derivatives are never formed by differencing quadrature values
(catastrophic cancellation at step h = 1e-4*eps); instead the central
second difference of a double primitive is written exactly as a hat-kernel
integral, which is evaluated directly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .families import AveragedModel, CoefficientFamily
from .quadrature import cumulative, integrate


@dataclass
class CorrectorField:
    """Corrector data for one (family, averaged model, eps) triple.

    The cache maps rounded (x1, x2..., y) keys to computed values; inserts
    are idempotent, so concurrent readers at worst recompute.
    """
    fam: CoefficientFamily
    avg: AveragedModel
    eps: float
    rtol: float = 1e-8
    cache: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @property
    def max_panel(self) -> float:
        # resolve the t/eps oscillation scale
        return float(np.pi) * min(1.0, self.eps)

    def q(self, t, x2, y):
        """Weighted driver gap rho * (f - fbar) at fast argument t/eps."""
        t = np.asarray(t, dtype=float)
        x2 = np.asarray(x2, dtype=float).reshape(1, self.fam.d)
        tf = t / self.eps
        rho = self.fam.rho(tf, x2)
        return (self.fam.rho_f(tf, x2, y)
                - rho * self.avg.f_bar(t, x2, float(y)))

    def _key(self, tag, x1, x2, y):
        x2 = np.asarray(x2, dtype=float).reshape(-1)
        return (tag, round(float(x1), 12)) + tuple(
            round(float(v), 12) for v in x2) + (round(float(y), 12),)


def corrector_dx1(field: CorrectorField, x1: float, x2, y: float) -> float:
    """D_{x1}V = x1 * F(x1) with F the running average of q; F(0) := 0."""
    x1 = float(x1)
    if x1 == 0.0:
        return 0.0
    key = field._key("dx1", x1, x2, y)
    if key not in field.cache:
        val = integrate(lambda t: field.q(t, x2, y), 0.0, x1,
                        rtol=field.rtol, max_panel=field.max_panel)
        field.cache[key] = float(val[0])
    return field.cache[key]


def corrector_value(field: CorrectorField, x1: float, x2, y: float) -> float:
    """V(x1) = int_0^{x1} (x1 - t) q(t) dt (the iterated integral collapsed)."""
    x1 = float(x1)
    if x1 == 0.0:
        return 0.0
    key = field._key("val", x1, x2, y)
    if key not in field.cache:
        val = integrate(lambda t: (x1 - t) * field.q(t, x2, y),
                        0.0, x1, rtol=field.rtol, max_panel=field.max_panel)
        field.cache[key] = float(val[0])
    return field.cache[key]


def second_difference(field: CorrectorField, x1: float, x2, y: float,
                      h: float) -> float:
    """Central second difference of V at step h, via the exact identity

        (V(c+h) - 2 V(c) + V(c-h)) / h^2 = (1/h^2) int (h - |t-c|)_+ q(t) dt.

    Evaluating the hat integral directly avoids the cancellation of
    differencing three O(1) quadrature values by h^2 ~ 1e-8 eps^2.
    Within |x1| < h the stencil is shifted one-sided away from the
    interface (center c = x1 + sign(x1) h).
    """
    x1 = float(x1)
    c = x1
    if abs(x1) < h:
        c = x1 + (h if x1 >= 0 else -h)

    def hat_part(a, b, left):
        def g(t):
            w = (t - a) if left else (b - t)
            return w * field.q(t, x2, y)
        return integrate(g, a, b, rtol=field.rtol,
                         max_panel=field.max_panel)[0]

    total = hat_part(c - h, c, True) + hat_part(c, c + h, False)
    return float(total) / h ** 2


@dataclass(frozen=True)
class ResidualReport:
    max_residual: float
    max_scaled: float          # residual / per-point tolerance, worst case
    witness: tuple
    n_points: int
    n_failed: int
    h: float

    @property
    def passed(self) -> bool:
        return self.n_failed == 0


def residual_check(field: CorrectorField, sample_spec: dict) -> ResidualReport:
    """Check a00(x1/eps) * D2 V - (f - fbar) ~ 0 at sampled points.

    ``sample_spec``: {"box": [(x1lo, x1hi), x2 ranges..., (ylo, yhi)],
    "n_samples": int, "seed": int, optional "h"}.  The second derivative is
    the central difference at step h (default 1e-4*eps) via the hat-kernel
    identity; the per-point tolerance is max(1e-4, 1e-3*|f - fbar|).
    Violations are reported, not raised.
    """
    box = np.asarray(sample_spec["box"], dtype=float)
    n = int(sample_spec["n_samples"])
    h = float(sample_spec.get("h", 1e-4 * field.eps))
    rng = np.random.default_rng(int(sample_spec["seed"]))
    pts = box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((n, box.shape[0]))
    # keep samples off the interface per the one-sided-stencil contract
    pts[:, 0] = np.where(np.abs(pts[:, 0]) < 1e-6, 1e-6, pts[:, 0])
    d = field.fam.d
    worst = (-1.0, -1.0, None)
    n_failed = 0
    for p in pts:
        x1, x2, y = float(p[0]), p[1:1 + d], float(p[1 + d])
        d2 = second_difference(field, x1, x2, y, h)
        x2r = x2.reshape(1, d)
        a00 = float(field.fam.a00(x1 / field.eps, x2r)[0])
        gap = float(field.fam.f(x1 / field.eps, x2r, y)[0]
                    - field.avg.f_bar(x1, x2r, y)[0])
        resid = abs(a00 * d2 - gap)
        tol = max(1e-4, 1e-3 * abs(gap))
        if resid / tol > worst[1]:
            worst = (resid, resid / tol, (x1, *x2.tolist(), y))
        if resid > tol:
            n_failed += 1
    return ResidualReport(max_residual=worst[0], max_scaled=worst[1],
                          witness=worst[2], n_points=n, n_failed=n_failed, h=h)


# ---------------------------------------------------------------------------
# Decay table
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecayRow:
    eps: float
    sup_V: float
    sup_growth: float        # sup |V'(x1) / x1|
    sup_beta: float          # weighted-driver remainder, |x1| >= sqrt(eps)
    sup_alpha: float         # rho remainder, |x1| >= sqrt(eps)


@dataclass
class DecayTable:
    rows: list
    grid_spec: str
    monotone_V: bool
    monotone_beta: bool

    def sup_V(self):
        return np.array([r.sup_V for r in self.rows])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eps", "sup_V", "sup_beta", "sup_alpha", "grid_spec"])
            for r in self.rows:
                w.writerow([f"{r.eps:.10g}", f"{r.sup_V:.10g}",
                            f"{r.sup_beta:.10g}", f"{r.sup_alpha:.10g}",
                            self.grid_spec])


def _half_grid(lo, hi, n):
    """Split an x1 grid into monotone halves anchored at 0."""
    pts = np.linspace(lo, hi, n)
    neg = np.concatenate(([0.0], np.sort(pts[pts < 0])[::-1]))
    pos = np.concatenate(([0.0], np.sort(pts[pts > 0])))
    return neg, pos


def decay_table(fam: CoefficientFamily, avg: AveragedModel,
                eps_list: Sequence[float], box, y_box,
                n_grid=(41, 41, 41), csv_path: Optional[str] = None,
                rtol: float = 1e-6) -> DecayTable:
    """Sampled sup norms of V, V'/x1 and the averaging remainders per eps.

    ``box`` = ((x1lo, x1hi), (x2lo, x2hi)) at d = 1, ``y_box`` = (ylo, yhi).
    For each (eps, x2) the x1 profiles of all y values come from one
    cumulative quadrature of the stacked integrand (q, t*q, rho*f, rho),
    using V = x1 * Q1 - Qt.  Sup norms are grid samples, not certificates;
    the grid spec travels with the table.
    """
    eps_list = [float(e) for e in eps_list]
    if any(b <= a for a, b in zip(eps_list[1:], eps_list[:-1])) or \
            not all(e > 0 for e in eps_list):
        raise ValueError("eps_list must be positive and strictly decreasing")
    if fam.d != 1:
        raise ValueError("decay_table assumes d = 1 boxes")
    (x1lo, x1hi), (x2lo, x2hi) = box
    n1, n2, ny = n_grid
    x2s = np.linspace(x2lo, x2hi, n2)
    ys = np.linspace(y_box[0], y_box[1], ny)
    shape_y = fam.f_y_shape(ys)
    neg, pos = _half_grid(x1lo, x1hi, n1)
    rows = []
    for eps in eps_list:
        sup_V = sup_G = sup_b = sup_a = 0.0
        for x2v in x2s:
            x2r = np.array([[x2v]])
            fp = float(avg.plus.f_coef(x2r)[0])
            fm = float(avg.minus.f_coef(x2r)[0])
            rp = float(avg.plus.rho(x2r)[0])
            rm = float(avg.minus.rho(x2r)[0])
            pch = avg._shape_at(ys)

            def g(t):
                tf = t / eps
                rho = fam.rho(tf, x2r)
                rhof = fam.rhof_t(tf, x2r)[:, None] * shape_y
                coef = np.where(t > 0, fp / rp, fm / rm)
                q = rhof - (rho * coef)[:, None] * pch
                return np.concatenate(
                    [q, t[:, None] * q, rhof, rho[:, None]], axis=1)

            for grid, flim, rlim in ((neg, fm, rm), (pos, fp, rp)):
                if grid.shape[0] < 2:
                    continue
                cum = cumulative(g, grid, rtol=rtol,
                                 max_panel=np.pi * min(1.0, eps))
                x1 = grid[1:, None]
                Q1, Qt = cum[1:, :ny], cum[1:, ny:2 * ny]
                R1, A1 = cum[1:, 2 * ny:3 * ny], cum[1:, 3 * ny]
                sup_V = max(sup_V, float(np.max(np.abs(x1 * Q1 - Qt))))
                sup_G = max(sup_G, float(np.max(np.abs(Q1 / x1))))
                far = np.abs(grid[1:]) >= np.sqrt(eps)
                if far.any():
                    beta = np.abs(R1[far] / x1[far]
                                  - flim * shape_y[None, :])
                    alpha = np.abs(A1[far] / grid[1:][far] - rlim)
                    sup_b = max(sup_b, float(np.max(beta)))
                    sup_a = max(sup_a, float(np.max(alpha)))
        rows.append(DecayRow(eps=eps, sup_V=sup_V, sup_growth=sup_G,
                             sup_beta=sup_b, sup_alpha=sup_a))

    def nonincreasing(vals):
        vals = np.asarray(vals)
        return bool(np.all(np.diff(vals) <= 0.05 * vals[:-1] + 1e-12))

    spec = (f"x1[{x1lo},{x1hi}]x{n1};x2[{x2lo},{x2hi}]x{n2};"
            f"y[{y_box[0]},{y_box[1]}]x{ny}")
    table = DecayTable(rows=rows, grid_spec=spec,
                       monotone_V=nonincreasing([r.sup_V for r in rows]),
                       monotone_beta=nonincreasing([r.sup_beta for r in rows]))
    if csv_path is not None:
        table.to_csv(csv_path)
    return table
