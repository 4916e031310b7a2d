"""Periodic Fourier grid model of the boundary and the first-order operator D.

The boundary R^n is modeled by an n-torus of period L sampled at N cell
centers per axis, so discontinuous coefficients never get sampled on a jump.
Fields take values in C^{m(1+n)} with the normal components first and the
tangential components axis-major; a field is stored as an array of shape
(npts, dim) and flattens point-major into vectors that dense operators act on.

D is the Fourier multiplier with symbol [0, i xi^t; -i xi, 0] (x) I_m.  Its
null space on the torus contains the constant (xi = 0) modes, which do not
exist in the whole-space picture; every boundary solve in the higher modules
is therefore posed on the mean-zero subspace.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


def _is_power_of_two(k):
    return k >= 1 and (k & (k - 1)) == 0


@dataclass(frozen=True)
class TorusGrid:
    """Periodic grid: n axes, N points per axis, period L, system size m."""

    n: int
    N: int
    L: float = 2 * np.pi
    m: int = 1

    def __post_init__(self):
        if self.n not in (1, 2):
            raise ValueError("boundary dimension n must be 1 or 2")
        if not _is_power_of_two(self.N) or self.N < 8:
            raise ValueError("N must be a power of two >= 8")
        if self.L <= 0:
            raise ValueError("period L must be positive")
        if self.m < 1:
            raise ValueError("system size m must be >= 1")

    @property
    def npts(self):
        return self.N**self.n

    @property
    def dim_component(self):
        return (1 + self.n) * self.m

    @property
    def total_dim(self):
        return self.npts * self.dim_component

    @property
    def dx(self):
        return self.L / self.N

    @property
    def cell_volume(self):
        return self.dx**self.n

    @property
    def axis_points(self):
        return (np.arange(self.N) + 0.5) * self.dx

    @property
    def axis_modes(self):
        """Angular wavenumbers per axis in FFT ordering."""
        return 2 * np.pi / self.L * np.fft.fftfreq(self.N, d=1.0 / self.N)

    @property
    def points(self):
        """Flattened coordinates, shape (npts, n), C-order over axes."""
        x = self.axis_points
        if self.n == 1:
            return x[:, None]
        X, Y = np.meshgrid(x, x, indexing="ij")
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    @property
    def modes(self):
        """Flattened mode vectors, shape (npts, n), matching FFT layout."""
        xi = self.axis_modes
        if self.n == 1:
            return xi[:, None]
        KX, KY = np.meshgrid(xi, xi, indexing="ij")
        return np.stack([KX.ravel(), KY.ravel()], axis=1)

    def periodic_delta(self, a, b=None):
        """Periodic distance |a - b| (componentwise wrap into [-L/2, L/2))."""
        d = np.asarray(a, dtype=float) if b is None else np.asarray(a) - np.asarray(b)
        return np.mod(d + self.L / 2, self.L) - self.L / 2

    def fft(self, values):
        """Forward FFT over the point axes of a (npts, ...) array."""
        v = np.asarray(values)
        shape = (self.N,) * self.n + v.shape[1:]
        return np.fft.fftn(v.reshape(shape), axes=tuple(range(self.n))).reshape(v.shape)

    def ifft(self, values):
        v = np.asarray(values)
        shape = (self.N,) * self.n + v.shape[1:]
        return np.fft.ifftn(v.reshape(shape), axes=tuple(range(self.n))).reshape(
            v.shape
        )


class GridField:
    """C^{m(1+n)}-valued function sampled on a torus grid."""

    def __init__(self, grid: TorusGrid, values):
        values = np.asarray(values, dtype=complex)
        if values.shape != (grid.npts, grid.dim_component):
            raise ValueError(
                f"values shape {values.shape}, expected "
                f"({grid.npts}, {grid.dim_component})"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        self.grid = grid
        self.values = values

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros((grid.npts, grid.dim_component), dtype=complex))

    @classmethod
    def from_scalar(cls, grid, h):
        """Embed an m-component boundary function as a normal vector field."""
        h = np.asarray(h, dtype=complex).reshape(grid.npts, grid.m)
        values = np.zeros((grid.npts, grid.dim_component), dtype=complex)
        values[:, : grid.m] = h
        return cls(grid, values)

    @property
    def perp(self):
        """Normal part, shape (npts, m)."""
        return self.values[:, : self.grid.m]

    @property
    def par(self):
        """Tangential part, shape (npts, n, m), axis-major."""
        m, n = self.grid.m, self.grid.n
        return self.values[:, m:].reshape(self.grid.npts, n, m)

    def flat(self):
        return self.values.reshape(-1)

    def norm(self):
        """L2 norm with the grid quadrature weight."""
        return float(np.linalg.norm(self.values)) * np.sqrt(self.grid.cell_volume)

    def mean_zero(self):
        """Project out the xi = 0 mode of every component."""
        return GridField(self.grid, self.values - self.values.mean(axis=0))

    def to_csv(self, path_or_buffer):
        """One row per grid point: coordinates then interleaved re/im."""
        grid = self.grid
        header = ["x"] + (["y"] if grid.n == 2 else [])
        for i in range(grid.m):
            header += [f"perp_{i}_re", f"perp_{i}_im"]
        for i in range(grid.m):
            for j in range(grid.n):
                header += [f"par_{i}_{j}_re", f"par_{i}_{j}_im"]
        close = False
        if isinstance(path_or_buffer, (str, bytes)):
            fh = open(path_or_buffer, "w", newline="")
            close = True
        else:
            fh = path_or_buffer
        try:
            w = csv.writer(fh)
            w.writerow(header)
            pts = grid.points
            par = self.par
            for p in range(grid.npts):
                row = [repr(float(c)) for c in pts[p]]
                for i in range(grid.m):
                    z = self.values[p, i]
                    row += [repr(float(z.real)), repr(float(z.imag))]
                for i in range(grid.m):
                    for j in range(grid.n):
                        z = par[p, j, i]
                        row += [repr(float(z.real)), repr(float(z.imag))]
                w.writerow(row)
        finally:
            if close:
                fh.close()

    @classmethod
    def from_csv(cls, grid, path_or_buffer):
        if isinstance(path_or_buffer, (str, bytes)):
            fh = open(path_or_buffer, newline="")
            close = True
        else:
            fh = path_or_buffer
            close = False
        try:
            rows = list(csv.reader(fh))
        finally:
            if close:
                fh.close()
        data = np.array(rows[1:], dtype=float)
        values = np.zeros((grid.npts, grid.dim_component), dtype=complex)
        off = grid.n
        for i in range(grid.m):
            values[:, i] = data[:, off + 2 * i] + 1j * data[:, off + 2 * i + 1]
        off = grid.n + 2 * grid.m
        for i in range(grid.m):
            for j in range(grid.n):
                c = off + 2 * (i * grid.n + j)
                values[:, grid.m + j * grid.m + i] = data[:, c] + 1j * data[:, c + 1]
        return cls(grid, values)


class DenseOperator:
    """Dense matrix acting on flattened GridFields, with a provenance label."""

    def __init__(self, grid: TorusGrid, matrix, label=""):
        matrix = np.asarray(matrix, dtype=complex)
        if matrix.shape != (grid.total_dim, grid.total_dim):
            raise ValueError(
                f"operator shape {matrix.shape}, expected square of {grid.total_dim}"
            )
        self.grid = grid
        self.matrix = matrix
        self.label = label

    def apply(self, f: GridField) -> GridField:
        if f.grid is not self.grid and f.grid != self.grid:
            raise ValueError("grid mismatch between operator and field")
        out = self.matrix @ f.flat()
        return GridField(self.grid, out.reshape(f.values.shape))

    def __matmul__(self, other):
        if isinstance(other, DenseOperator):
            return DenseOperator(
                self.grid, self.matrix @ other.matrix, f"{self.label}@{other.label}"
            )
        return NotImplemented

    def norm2(self):
        return float(np.linalg.norm(self.matrix, 2))


def inner(grid: TorusGrid, f, g):
    """Discrete L2 pairing sum(f * conj(g)) * dx^n over points and components."""
    fv = f.values if isinstance(f, GridField) else np.asarray(f)
    gv = g.values if isinstance(g, GridField) else np.asarray(g)
    return complex(np.sum(fv * gv.conj()) * grid.cell_volume)


def symbol_matrices(grid: TorusGrid):
    """Per-mode symbols of D, shape (npts, dim, dim)."""
    dim = grid.dim_component
    m, n = grid.m, grid.n
    xi = grid.modes
    S = np.zeros((grid.npts, dim, dim), dtype=complex)
    for a in range(n):
        for i in range(m):
            S[:, i, (1 + a) * m + i] = 1j * xi[:, a]
            S[:, (1 + a) * m + i, i] = -1j * xi[:, a]
    return S


def _apply_symbol(grid, symbols, values):
    """Apply a per-mode matrix symbol to (npts, dim, ...) stacked fields."""
    spec = grid.fft(values)
    out = np.einsum("pab,pb...->pa...", symbols, spec)
    return grid.ifft(out)


def reflection_signs(grid: TorusGrid):
    s = np.ones(grid.dim_component)
    s[: grid.m] = -1.0
    return np.tile(s, grid.npts)


def assemble_D(grid: TorusGrid) -> DenseOperator:
    """Dense realization of the boundary operator D = [0, div; -grad, 0].

    Assembled through FFT application to the identity, then symmetrized and
    forced to anticommute with the reflection exactly (both corrections are
    at rounding level).
    """
    dim = grid.dim_component
    eye = np.eye(grid.total_dim, dtype=complex).reshape(grid.npts, dim, grid.total_dim)
    D = _apply_symbol(grid, symbol_matrices(grid), eye).reshape(
        grid.total_dim, grid.total_dim
    )
    D = 0.5 * (D + D.conj().T)
    s = reflection_signs(grid)
    D = 0.5 * (D - s[:, None] * D * s[None, :])
    return DenseOperator(grid, D, label="D")


def curl_free_projection(grid: TorusGrid) -> DenseOperator:
    """Orthogonal projection onto closure(range(D)).

    Computed mode by mode from the symbol: on each nonzero mode the range of
    the Hermitian symbol is spanned by its nonzero-eigenvalue eigenvectors;
    the xi = 0 mode is annihilated.  Exactly idempotent and self-adjoint up
    to rounding, and commutes with D by construction.
    """
    S = symbol_matrices(grid)
    dim = grid.dim_component
    P = np.zeros_like(S)
    for p in range(grid.npts):
        w, v = np.linalg.eigh(S[p])
        mask = np.abs(w) > 1e-12 * (1.0 + np.abs(w).max())
        vr = v[:, mask]
        P[p] = vr @ vr.conj().T
    eye = np.eye(grid.total_dim, dtype=complex).reshape(grid.npts, dim, grid.total_dim)
    M = _apply_symbol(grid, P, eye).reshape(grid.total_dim, grid.total_dim)
    M = 0.5 * (M + M.conj().T)
    return DenseOperator(grid, M, label="P_H")


def multiplication_operator(field) -> DenseOperator:
    """Block-diagonal operator applying the coefficient matrix pointwise."""
    grid = field.grid
    dim = grid.dim_component
    M = np.zeros((grid.total_dim, grid.total_dim), dtype=complex)
    for p in range(grid.npts):
        M[p * dim : (p + 1) * dim, p * dim : (p + 1) * dim] = field.samples[p]
    return DenseOperator(grid, M, label=f"M[{field.label}]")


def apply_pointwise(field, f: GridField) -> GridField:
    """Apply a coefficient field pointwise to a grid field (no dense matrix)."""
    out = np.einsum("pab,pb->pa", field.samples, f.values)
    return GridField(f.grid, out)


def tangential_gradient(grid: TorusGrid, scalar):
    """Spectral gradient of an m-component scalar field, shape (npts, n, m)."""
    scalar = np.asarray(scalar, dtype=complex).reshape(grid.npts, grid.m)
    spec = grid.fft(scalar)
    xi = grid.modes
    out = 1j * xi[:, :, None] * spec[:, None, :]
    return grid.ifft(out)


def tangential_divergence(grid: TorusGrid, par):
    """Spectral divergence of a tangential field (npts, n, m) -> (npts, m)."""
    par = np.asarray(par, dtype=complex).reshape(grid.npts, grid.n, grid.m)
    spec = grid.fft(par)
    xi = grid.modes
    return grid.ifft(np.sum(1j * xi[:, :, None] * spec, axis=1))


def tangential_curl(grid: TorusGrid, par):
    """Scalar curl d1 f2 - d2 f1 per system for n = 2; zero for n = 1."""
    par = np.asarray(par, dtype=complex).reshape(grid.npts, grid.n, grid.m)
    if grid.n == 1:
        return np.zeros((grid.npts, grid.m), dtype=complex)
    spec = grid.fft(par)
    xi = grid.modes
    curl = 1j * xi[:, 0, None] * spec[:, 1, :] - 1j * xi[:, 1, None] * spec[:, 0, :]
    return grid.ifft(curl)


def antidifferentiate(grid: TorusGrid, par):
    """Mean-zero potential u with grad u = par (least squares on the modes)."""
    par = np.asarray(par, dtype=complex).reshape(grid.npts, grid.n, grid.m)
    spec = grid.fft(par)
    xi = grid.modes
    xi2 = np.sum(xi**2, axis=1)
    xi2safe = np.where(xi2 == 0, 1.0, xi2)
    u_hat = np.sum(-1j * xi[:, :, None] * spec, axis=1) / xi2safe[:, None]
    u_hat[xi2 == 0] = 0.0
    return grid.ifft(u_hat)


def garding_check(field, trials=20, seed=0):
    """Worst Rayleigh ratio Re<A f, f> / ||f||^2 over random curl-free fields.

    Random fields are projected onto H = closure(range(D)); pointwise strict
    accretivity makes kappa a lower bound, which the caller asserts.
    """
    grid = field.grid
    P = curl_free_projection(grid)
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(trials):
        raw = rng.standard_normal(grid.total_dim) + 1j * rng.standard_normal(
            grid.total_dim
        )
        f = P.apply(GridField(grid, raw.reshape(grid.npts, grid.dim_component)))
        nrm2 = f.norm() ** 2
        if nrm2 < 1e-20:
            continue
        val = inner(grid, apply_pointwise(field, f), f).real / nrm2
        worst = min(worst, val)
    return float(worst)
