"""Least-squares regression Monte Carlo solver for the backward equation.

Backward induction from the terminal condition, with conditional
expectations replaced by polynomial least-squares projections and a short
Picard fixed point for the (y-Lipschitz, bounded) driver at each step.
The initial value Y0 represents the PDE solution at the bundle's starting
point; all paths share that point, so Y0 is a plain ensemble mean.

Also hosts the path functionals used by the tightness diagnostics:
grid conditional variation and up-crossing counts.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .simulate import PathBundle, SimGrid

_MAGIC = b"HMGS1"
_VERSION = 1


class RegressionError(RuntimeError):
    """Rank-deficient regression at some backward step."""


class PicardError(RuntimeError):
    """Driver fixed point failed to contract."""


@dataclass
class BsdeSpec:
    """Problem data and regression knobs for one backward solve.

    ``driver`` receives (x1_arg, x2, y) where x1_arg is X1/eps on two-scale
    bundles and X1 itself on averaged bundles.  ``y_bound`` (when given)
    clips the regression output to the a-priori band sup|H| + t*sup|f|.
    """
    terminal: Callable                    # x (..., d+1) -> (...,)
    driver: Callable                      # (x1, x2, y) -> (...,)
    basis_degree: int = 3
    include_sign_feature: bool = False
    n_picard: int = 3
    picard_tol: float = 1e-5
    y_bound: Optional[float] = None
    cond_limit: float = 1e12

    def __post_init__(self):
        if self.n_picard < 1:
            raise ValueError("n_picard must be >= 1")
        if not 0 <= self.basis_degree <= 6:
            raise ValueError("basis_degree must be in [0, 6]")


@dataclass
class BsdeSolution:
    Y0: float
    Y0_stderr: float
    Y: np.ndarray                  # (n_paths, n_steps+1)
    Z: np.ndarray                  # (n_paths, n_steps, k)
    picard_residuals: list
    condition_numbers: np.ndarray  # per interior step
    cv: float                      # grid conditional variation of Y (debiased)
    cv_stderr: float
    sup_abs_y: float               # E sup_s |Y_s|
    eps: Optional[float]

    def z_energy(self, dt):
        """Estimate of E sum |Z|^2 dt."""
        return float(np.mean(np.sum(self.Z ** 2, axis=(1, 2))) * dt)

    def save(self, path, dt):
        n_paths, n_steps1 = self.Y.shape
        k = self.Z.shape[2]
        header = struct.pack(
            "<5sIQQQdd", _MAGIC, _VERSION, n_paths, n_steps1 - 1, k,
            float("nan") if self.eps is None else self.eps, dt)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(self.Y, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.Z, dtype="<f8").tobytes())
        meta = {"Y0": self.Y0, "Y0_stderr": self.Y0_stderr,
                "picard_residuals": list(self.picard_residuals),
                "max_condition_number": float(np.max(self.condition_numbers))
                if self.condition_numbers.size else 0.0,
                "cv": self.cv, "cv_stderr": self.cv_stderr,
                "sup_abs_y": self.sup_abs_y, "eps": self.eps}
        with open(str(path) + ".json", "w") as fh:
            json.dump(meta, fh, sort_keys=True)


# ---------------------------------------------------------------------------
# Regression features
# ---------------------------------------------------------------------------

def _monomial_powers(n_vars, degree):
    powers = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(n_vars), total):
            p = [0] * n_vars
            for v in combo:
                p[v] += 1
            powers.append(tuple(p))
    return powers


def feature_matrix(states, degree, sign_feature):
    """Scaled total-degree polynomial features of the state, plus an
    optional interface indicator 1_{x1>0}."""
    states = np.asarray(states, dtype=float)
    n, nv = states.shape
    mu = states.mean(axis=0)
    sd = states.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    z = (states - mu) / sd
    cols = [np.prod(z ** np.asarray(p), axis=1)
            for p in _monomial_powers(nv, degree)]
    if sign_feature:
        cols.append((states[:, 0] > 0).astype(float))
    return np.column_stack(cols)


def _project(F, target, cond_limit, step, rcond=1e-9):
    """Truncated-SVD least squares; returns (fitted, coefficients, cond).

    Near-collinear columns (e.g. the interface indicator while all paths
    are still on one side) are projected out rather than blowing up the
    fit; the reported condition number covers the kept directions only.
    """
    u, s, vt = np.linalg.svd(F, full_matrices=False)
    if s[0] <= 0:
        raise RegressionError(f"zero feature matrix at step {step}")
    keep = s > rcond * s[0]
    cond = s[0] / s[keep][-1]
    if cond > cond_limit:
        raise RegressionError(
            f"regression ill-conditioned at step {step} (cond {cond:.3e})")
    coeff = vt[keep].T @ ((u[:, keep].T @ target) / s[keep])
    return F @ coeff, coeff, cond


# ---------------------------------------------------------------------------
# Backward solver
# ---------------------------------------------------------------------------

def _driver_x1(bundle: PathBundle):
    x1 = bundle.x1()
    return x1 / bundle.eps if bundle.eps is not None else x1


def solve_bsde(bundle: PathBundle, spec: BsdeSpec) -> BsdeSolution:
    n, m = bundle.n_paths, bundle.grid.n_steps
    dt = bundle.grid.dt
    d, k = bundle.d, bundle.k
    x1a = _driver_x1(bundle)
    x2 = bundle.x2()
    Y = np.empty((n, m + 1))
    Z = np.zeros((n, m, k))
    Y[:, m] = np.asarray(spec.terminal(bundle.X[:, m, :]), dtype=float)
    conds = np.zeros(m - 1)
    picard = np.zeros(spec.n_picard)

    def clip(v):
        if spec.y_bound is not None:
            return np.clip(v, -spec.y_bound, spec.y_bound)
        return v

    for s in range(m - 1, 0, -1):
        F = feature_matrix(bundle.X[:, s, :], spec.basis_degree,
                           spec.include_sign_feature)
        cont, _, cond = _project(F, Y[:, s + 1], spec.cond_limit, s)
        conds[s - 1] = cond
        y = cont
        for j in range(spec.n_picard):
            y_new = cont + dt * np.asarray(
                spec.driver(x1a[:, s], x2[:, s], y), dtype=float)
            picard[j] = max(picard[j], float(np.sqrt(np.mean((y_new - y) ** 2))))
            y = y_new
        Y[:, s] = clip(y)
        zt = Y[:, s + 1][:, None] * bundle.dB[:, s, :] / dt
        for c in range(k):
            Z[:, s, c], _, _ = _project(F, zt[:, c], spec.cond_limit, s)

    # Step 0: every path sits at x0, so the projection is the plain mean.
    cont0 = float(np.mean(Y[:, 1]))
    y0 = cont0
    for j in range(spec.n_picard):
        y0_new = cont0 + dt * float(np.asarray(
            spec.driver(x1a[0, 0], x2[0, 0], y0)))
        picard[j] = max(picard[j], abs(y0_new - y0))
        y0 = y0_new
    y0 = float(clip(np.asarray(y0)))
    Y[:, 0] = y0
    Z[:, 0, :] = np.mean(Y[:, 1][:, None] * bundle.dB[:, 0, :] / dt, axis=0)

    residuals = [float(r) for r in picard]
    for j in range(2, len(residuals)):
        if residuals[j] > residuals[j - 1] > residuals[j - 2]:
            raise PicardError(
                f"driver fixed point diverging: residuals {residuals}")

    # Monte Carlo uncertainty of Y0 from the pathwise rollout estimator
    # H(X_T) + sum_s f(.., Y_s) dt, whose mean is the same value but whose
    # spread reflects the actual sampling noise of the ensemble.
    rollout = Y[:, m].copy()
    for s in range(m):
        rollout += dt * np.asarray(
            spec.driver(x1a[:, s], x2[:, s], Y[:, s]), dtype=float)
    y0_stderr = float(np.std(rollout) / np.sqrt(n))

    cv, cv_stderr = conditional_variation(
        Y, bundle.grid,
        _features_for(bundle, spec.basis_degree, spec.include_sign_feature))
    return BsdeSolution(
        Y0=y0, Y0_stderr=y0_stderr, Y=Y, Z=Z,
        picard_residuals=residuals, condition_numbers=conds,
        cv=cv, cv_stderr=cv_stderr,
        sup_abs_y=float(np.mean(np.max(np.abs(Y), axis=1))),
        eps=bundle.eps)


def _features_for(bundle, degree, sign_feature):
    def at_step(s):
        return feature_matrix(bundle.X[:, s, :], degree, sign_feature)
    return at_step


# ---------------------------------------------------------------------------
# Path functionals (tightness diagnostics)
# ---------------------------------------------------------------------------

def conditional_variation(Y, grid: SimGrid, features):
    """Grid conditional variation: sum over steps of E|E[dY | F_s]|.

    The conditional mean is the least-squares projection of the increment
    on the step-s features; ``features`` maps a step index to the feature
    matrix.  A noise floor (projection variance of a martingale increment)
    is subtracted per path before taking absolute values, so martingales
    report ~0 rather than accumulated regression noise.  This evaluates the
    simulation-grid partition only: a lower bound for the true CV.
    """
    Y = np.asarray(Y, dtype=float)
    if not np.all(np.isfinite(Y)):
        raise ValueError("Y contains non-finite values")
    n, m1 = Y.shape
    m = m1 - 1
    cv = 0.0
    var_acc = 0.0
    floor_acc = 0.0
    for s in range(m):
        dY = Y[:, s + 1] - Y[:, s]
        if s == 0:
            fitted = np.full(n, dY.mean())
            noise_sd = float(np.std(dY) / np.sqrt(n))
        else:
            F = features(s)
            fitted, _, _ = _project(F, dY, 1e12, s)
            resid = dY - fitted
            p = F.shape[1]
            noise_sd = float(np.sqrt(np.mean(resid ** 2) * p / max(n - p, 1)))
        mag = np.sqrt(np.maximum(fitted ** 2 - noise_sd ** 2, 0.0))
        cv += float(np.mean(mag))
        var_acc += float(np.var(mag) / n)
        floor_acc += np.sqrt(2.0 / np.pi) * noise_sd
    return cv, float(np.sqrt(var_acc) + floor_acc)


def upcrossings(path, a: float, b: float) -> int:
    """Completed traversals from level <= a up to level >= b."""
    if not a < b:
        raise ValueError("need a < b")
    path = np.asarray(path, dtype=float)
    count = 0
    armed = False
    for v in path:
        if not armed and v <= a:
            armed = True
        elif armed and v >= b:
            count += 1
            armed = False
    return count


def _upcrossings_batch(Y, a, b):
    """Mean up-crossing count across the rows of Y (vectorized scan)."""
    n = Y.shape[0]
    counts = np.zeros(n)
    armed = np.zeros(n, dtype=bool)
    for s in range(Y.shape[1]):
        v = Y[:, s]
        fire = armed & (v >= b)
        counts += fire
        armed = (armed & ~fire) | (v <= a)
    return float(np.mean(counts))


@dataclass(frozen=True)
class PathFunctionals:
    cv: float
    upcrossings: dict
    sup_norm: float


def path_functionals(sol: BsdeSolution, bands: Sequence[tuple]) -> PathFunctionals:
    ups = {(float(a), float(b)): _upcrossings_batch(sol.Y, a, b)
           for a, b in bands}
    return PathFunctionals(cv=sol.cv, upcrossings=ups, sup_norm=sol.sup_abs_y)


def tightness_certificate(solutions: Sequence[BsdeSolution],
                          bands: Sequence[tuple], dt: float) -> dict:
    """Empirical uniform-in-eps boundedness report (not a proof).

    Tabulates CV + E sup|Y| and per-band mean up-crossing counts for each
    solution, plus the max/min ratios across the collection.
    """
    if not solutions:
        raise ValueError("need at least one solution")
    rows = []
    for sol in solutions:
        pf = path_functionals(sol, bands)
        rows.append({
            "eps": sol.eps,
            "cv": sol.cv,
            "sup_abs_y": sol.sup_abs_y,
            "cv_plus_sup": sol.cv + sol.sup_abs_y,
            "energy": float(np.mean(np.max(np.abs(sol.Y), axis=1) ** 2))
            + sol.z_energy(dt),
            "upcrossings": {f"{a}:{b}": c for (a, b), c in pf.upcrossings.items()},
        })

    def ratio(key):
        vals = np.array([r[key] for r in rows])
        lo = float(np.min(vals))
        return float(np.max(vals) / lo) if lo > 0 else 1.0

    cert = {"rows": rows,
            "ratio_cv_plus_sup": ratio("cv_plus_sup"),
            "ratio_energy": ratio("energy"),
            "ratio_upcrossings": {}}
    for a, b in bands:
        key = f"{float(a)}:{float(b)}"
        vals = np.array([r["upcrossings"][key] for r in rows])
        lo = float(np.min(vals))
        cert["ratio_upcrossings"][key] = float(np.max(vals) / lo) if lo > 0 else 1.0
    return cert
