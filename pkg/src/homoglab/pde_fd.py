"""Semi-implicit finite differences for the d = 1 parabolic problems.

Monte-Carlo-independent cross-check of the probabilistic solvers.  The
operator matches the generator of the simulated process,

    a00(x1, x2) d2/dx1^2 + a11(x1, x2) d2/dx2^2 + b1(x1, x2) d/dx2,

with no mixed term and no x1 drift (block diffusion structure).  Diffusion
and drift are implicit (one sparse solve per step, matrix factorized once),
the semi-linear driver f(x, v) explicit.

Interface handling for discontinuous averaged a00 at x1 = 0: the default
"centered" scheme discretizes the non-divergence operator directly, which
enforces continuity of dv/dx1 across the jump.  That is the behaviour of
the simulated process (a driftless diffusion is a time-changed Brownian
motion, so x itself is its scale function and harmonic profiles are linear
with matching slopes).  A conservation-form "harmonic" flux scheme is kept
as an option for comparison; it enforces continuity of a00*dv/dx1 instead
and does NOT match the Monte Carlo representation when a00 jumps.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu


class PdeError(RuntimeError):
    """Grid construction or linear-solve failure."""


@dataclass(frozen=True)
class Grid2D:
    L1: float
    L2: float
    n1: int                  # interior nodes along x1 (odd, so 0 is a node)
    n2: int
    dt_fd: float
    t_end: float

    def __post_init__(self):
        if self.n1 % 2 == 0:
            raise PdeError("n1 must be odd so that x1 = 0 is a grid node")
        if not (self.L1 > 0 and self.L2 > 0 and self.n2 >= 3):
            raise PdeError("bad domain spec")
        if not 0 < self.dt_fd <= self.t_end / 10:
            raise PdeError("need 0 < dt_fd <= t_end / 10")

    @property
    def x1(self) -> np.ndarray:
        return np.linspace(-self.L1, self.L1, self.n1 + 2)

    @property
    def x2(self) -> np.ndarray:
        return np.linspace(-self.L2, self.L2, self.n2 + 2)

    @property
    def h1(self) -> float:
        return 2.0 * self.L1 / (self.n1 + 1)

    @property
    def h2(self) -> float:
        return 2.0 * self.L2 / (self.n2 + 1)

    def refined(self, factor: int = 2) -> "Grid2D":
        """Nested refinement: old nodes are a subset of the new ones.

        dt shrinks by factor^2 so the first-order time error refines at
        the same rate as the second-order spatial error.
        """
        return Grid2D(self.L1, self.L2,
                      factor * (self.n1 + 1) - 1, factor * (self.n2 + 1) - 1,
                      self.dt_fd / factor ** 2, self.t_end)


@dataclass
class PdeModel:
    """Coefficient callables on (x1, x2) meshes; f also takes the value v."""
    a00: Callable
    a11: Callable
    b1: Callable
    f: Callable
    H: Callable
    label: str = "custom"
    eps: Optional[float] = None

    @classmethod
    def from_family(cls, fam, eps: float) -> "PdeModel":
        if fam.d != 1:
            raise PdeError("FD solver is d = 1 only")

        def pack(x1, x2):
            return x1 / eps, x2[..., None]

        return cls(
            a00=lambda x1, x2: fam.a00(*pack(x1, x2)),
            a11=lambda x1, x2: fam.a1(*pack(x1, x2))[..., 0, 0],
            b1=lambda x1, x2: fam.b1(*pack(x1, x2))[..., 0],
            f=lambda x1, x2, v: fam.f(*pack(x1, x2), v),
            H=lambda x1, x2: fam.terminal(np.stack([x1, x2], axis=-1)),
            label=f"eps-form:{fam.family_id}", eps=eps)

    @classmethod
    def from_averaged(cls, avg, H) -> "PdeModel":
        if avg.d != 1:
            raise PdeError("FD solver is d = 1 only")

        def pack(x1, x2):
            return x1, x2[..., None]

        return cls(
            a00=lambda x1, x2: avg.a00_bar(*pack(x1, x2)),
            a11=lambda x1, x2: avg.a1_bar(*pack(x1, x2))[..., 0, 0],
            b1=lambda x1, x2: avg.b_bar(*pack(x1, x2))[..., 0],
            f=lambda x1, x2, v: avg.f_bar(*pack(x1, x2), v),
            H=lambda x1, x2: H(np.stack([x1, x2], axis=-1)),
            label="averaged")


@dataclass
class GridSolution:
    grid: Grid2D
    values: np.ndarray         # (n1+2, n2+2) final time slice
    boundary_mode: str
    scheme: str
    model_label: str

    def at(self, x1: float, x2: float) -> float:
        """Bilinear interpolation inside the domain."""
        xs, ys = self.grid.x1, self.grid.x2
        i = int(np.clip(np.searchsorted(xs, x1) - 1, 0, xs.size - 2))
        j = int(np.clip(np.searchsorted(ys, x2) - 1, 0, ys.size - 2))
        tx = (x1 - xs[i]) / (xs[i + 1] - xs[i])
        ty = (x2 - ys[j]) / (ys[j + 1] - ys[j])
        v = self.values
        return float((1 - tx) * (1 - ty) * v[i, j] + tx * (1 - ty) * v[i + 1, j]
                     + (1 - tx) * ty * v[i, j + 1] + tx * ty * v[i + 1, j + 1])

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x1", "x2", "v"])
            for i, a in enumerate(self.grid.x1):
                for j, b in enumerate(self.grid.x2):
                    w.writerow([f"{a:.10g}", f"{b:.10g}",
                                f"{self.values[i, j]:.12g}"])
        header = {"n1": self.grid.n1, "n2": self.grid.n2,
                  "L1": self.grid.L1, "L2": self.grid.L2,
                  "dt_fd": self.grid.dt_fd, "t_end": self.grid.t_end,
                  "boundary_mode": self.boundary_mode, "scheme": self.scheme,
                  "model": self.model_label}
        with open(str(path) + ".json", "w") as fh:
            json.dump(header, fh, sort_keys=True)


def _assemble(model: PdeModel, grid: Grid2D, scheme: str):
    """Sparse operator A over all nodes (boundary rows left empty)."""
    x1, x2 = grid.x1, grid.x2
    nx, ny = x1.size, x2.size
    X1, X2 = np.meshgrid(x1, x2, indexing="ij")
    a00 = np.broadcast_to(np.asarray(model.a00(X1, X2), dtype=float),
                          X1.shape)
    a11 = np.broadcast_to(np.asarray(model.a11(X1, X2), dtype=float),
                          X1.shape)
    b1 = np.broadcast_to(np.asarray(model.b1(X1, X2), dtype=float), X1.shape)
    h1, h2 = grid.h1, grid.h2

    def idx(i, j):
        return i * ny + j

    rows, cols, vals = [], [], []

    def add(i, j, i2, j2, v):
        rows.append(idx(i, j))
        cols.append(idx(i2, j2))
        vals.append(v)

    if scheme == "harmonic":
        # conservation-form x1 flux with harmonic half-node coefficients
        Xh, X2h = np.meshgrid(0.5 * (x1[:-1] + x1[1:]), x2, indexing="ij")
        ah = np.broadcast_to(np.asarray(model.a00(Xh, X2h), dtype=float),
                             Xh.shape)
        an = a00
        num = 2.0 * an[:-1] * an[1:]
        den = an[:-1] + an[1:]
        ah = np.where(den > 0, num / den, ah)
    elif scheme != "centered":
        raise PdeError(f"unknown interface scheme {scheme!r}")

    for i in range(1, nx - 1):
        for j in range(1, ny - 1):
            if scheme == "harmonic":
                cw, ce = ah[i - 1, j] / h1 ** 2, ah[i, j] / h1 ** 2
            else:
                cw = ce = a00[i, j] / h1 ** 2
            cs = a11[i, j] / h2 ** 2 - b1[i, j] / (2 * h2)
            cn = a11[i, j] / h2 ** 2 + b1[i, j] / (2 * h2)
            add(i, j, i - 1, j, cw)
            add(i, j, i + 1, j, ce)
            add(i, j, i, j - 1, cs)
            add(i, j, i, j + 1, cn)
            add(i, j, i, j, -(cw + ce) - 2 * a11[i, j] / h2 ** 2)
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(nx * ny, nx * ny))
    return A, X1, X2


def solve_pde(model: PdeModel, grid: Grid2D, boundary_mode: str = "dirichlet",
              scheme: str = "centered") -> GridSolution:
    """March the terminal-value problem backward over [0, t_end].

    In the time-to-maturity variable the problem is a forward heat flow
    from v(0) = H; the reported slice is remaining time t_end, so
    values[i, j] ~ v(0, x) for terminal data at t_end.
    """
    if model.eps is not None and model.eps < 4.0 * grid.h1:
        warnings.warn(
            f"eps = {model.eps} under-resolved (4*h1 = {4 * grid.h1:.3g}); "
            "fast oscillations are not represented on this grid",
            RuntimeWarning)
    A, X1, X2 = _assemble(model, grid, scheme)
    nx, ny = X1.shape
    n = nx * ny
    interior = np.zeros((nx, ny), dtype=bool)
    interior[1:-1, 1:-1] = True
    iflat = interior.ravel()

    M = (sparse.identity(n, format="csr") - grid.dt_fd * A).tolil()
    if boundary_mode == "neumann":
        # boundary value pinned to its inward neighbour: zero normal slope
        for i in range(nx):
            for j in (0, ny - 1):
                r = i * ny + j
                M.rows[r], M.data[r] = [r], [1.0]
                jn = j + 1 if j == 0 else j - 1
                M[r, i * ny + jn] = -1.0
        for j in range(ny):
            for i in (0, nx - 1):
                r = i * ny + j
                M.rows[r], M.data[r] = [r], [1.0]
                im = i + 1 if i == 0 else i - 1
                M[r, im * ny + j] = -1.0
    elif boundary_mode != "dirichlet":
        raise PdeError(f"unknown boundary mode {boundary_mode!r}")

    try:
        lu = splu(M.tocsc())
    except RuntimeError as exc:
        raise PdeError(f"implicit-step factorization failed: {exc}") from exc

    v = np.asarray(model.H(X1, X2), dtype=float).copy()
    hbound = v.copy()
    n_steps = int(round(grid.t_end / grid.dt_fd))
    if abs(n_steps * grid.dt_fd - grid.t_end) > 1e-9 * grid.t_end:
        raise PdeError("dt_fd must divide t_end")
    for _ in range(n_steps):
        rhs = v + grid.dt_fd * np.asarray(model.f(X1, X2, v), dtype=float)
        rf = rhs.ravel().copy()
        if boundary_mode == "dirichlet":
            rf[~iflat] = hbound.ravel()[~iflat]
        else:
            rf[~iflat] = 0.0
        v = lu.solve(rf).reshape(nx, ny)
        if not np.all(np.isfinite(v)):
            raise PdeError("non-finite values after implicit step")
    return GridSolution(grid=grid, values=v, boundary_mode=boundary_mode,
                        scheme=scheme, model_label=model.label)


def richardson_error(model: PdeModel, grid: Grid2D, refinement: int = 2,
                     boundary_mode: str = "dirichlet",
                     scheme: str = "centered") -> float:
    """Sup-norm change under nested space-time refinement (common nodes)."""
    coarse = solve_pde(model, grid, boundary_mode, scheme)
    fine = solve_pde(model, grid.refined(refinement), boundary_mode, scheme)
    return float(np.max(np.abs(
        coarse.values - fine.values[::refinement, ::refinement])))


def interface_gaps(sol: GridSolution) -> dict:
    """One-sided x1-derivative data at the interface column x1 = 0.

    Returns the max over x2 of |slope jump| and of the relative value jump
    reconstructed from each side (both ~0 for the centered scheme on a
    resolved solution; the harmonic scheme trades the slope gap for flux
    continuity instead).
    """
    i0 = sol.grid.n1 // 2 + 1
    x1 = sol.grid.x1
    if abs(x1[i0]) > 1e-12:
        raise PdeError("grid has no interface node")
    h = sol.grid.h1
    v = sol.values
    left = (v[i0] - v[i0 - 1]) / h
    right = (v[i0 + 1] - v[i0]) / h
    return {"max_slope_gap": float(np.max(np.abs(right - left))),
            "max_curvature": float(np.max(np.abs(
                v[i0 + 1] - 2 * v[i0] + v[i0 - 1])) / h ** 2)}
