"""Pointwise block-matrix algebra for coefficient matrices.

A coefficient value at a point is an (1+n)m x (1+n)m complex matrix acting on
vectors with the normal component first: a field f splits as
f = [f_perp, f_par] where f_perp has m entries (one per system) and f_par has
n*m entries ordered axis-major, i.e. component index a*m + i for axis a and
system i.  This matches the Fourier symbol convention used in :mod:`.torus`.

The module houses the hat transform exchanging the roles of the transversal
derivative and the conormal derivative, accretivity/sector diagnostics, the
reflection across the boundary, and the Lipschitz-graph pullback.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SingularNormalBlock(Exception):
    """Raised when the normal-normal block is numerically singular."""


class NotAccretive(Exception):
    """Raised when a coefficient field fails strict pointwise accretivity."""


def _as_matrix(mat, dim):
    M = np.asarray(mat, dtype=complex)
    if M.shape != (dim, dim):
        raise ValueError(f"expected a {dim}x{dim} matrix, got shape {M.shape}")
    return M


@dataclass(frozen=True)
class BlockCoefficient:
    """One pointwise coefficient matrix in perp/par block form.

    ``matrix`` is the assembled (1+n)m square matrix; the four blocks are
    exposed as views through the properties below.
    """

    n: int
    m: int
    matrix: np.ndarray

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("need n >= 1 and m >= 1")
        object.__setattr__(self, "matrix", _as_matrix(self.matrix, self.dim))

    @property
    def dim(self):
        return (1 + self.n) * self.m

    @property
    def perp_perp(self):
        return self.matrix[: self.m, : self.m]

    @property
    def perp_par(self):
        return self.matrix[: self.m, self.m :]

    @property
    def par_perp(self):
        return self.matrix[self.m :, : self.m]

    @property
    def par_par(self):
        return self.matrix[self.m :, self.m :]

    @classmethod
    def from_blocks(cls, n, m, perp_perp, perp_par, par_perp, par_par):
        top = np.hstack([_as_matrix(perp_perp, m), np.asarray(perp_par, dtype=complex)])
        bot = np.hstack([np.asarray(par_perp, dtype=complex), _as_matrix(par_par, n * m)])
        return cls(n, m, np.vstack([top, bot]))

    def adjoint(self):
        """Pointwise adjoint coefficient A*."""
        return BlockCoefficient(self.n, self.m, self.matrix.conj().T)

    def hermitian_min_eig(self):
        """Smallest eigenvalue of the Hermitian part (1/2)(A + A*)."""
        H = 0.5 * (self.matrix + self.matrix.conj().T)
        return float(np.linalg.eigvalsh(H)[0])


@dataclass(frozen=True)
class ReflectionN:
    """Reflection across the boundary: -1 on perp components, +1 on par."""

    n: int
    m: int

    @property
    def signs(self):
        s = np.ones((1 + self.n) * self.m)
        s[: self.m] = -1.0
        return s

    @property
    def matrix(self):
        return np.diag(self.signs)


def hat_transform(a: BlockCoefficient, cond_limit=1e12) -> BlockCoefficient:
    """The block transform mapping A to the multiplication coefficient B.

    Blocks of the result: [A_pp^{-1}, -A_pp^{-1} A_pl; A_lp A_pp^{-1},
    A_ll - A_lp A_pp^{-1} A_pl], writing p for perp and l for par.
    Raises :class:`SingularNormalBlock` when cond(A_pp) exceeds ``cond_limit``.
    """
    app = a.perp_perp
    if np.linalg.cond(app) > cond_limit:
        raise SingularNormalBlock(
            f"normal-normal block has condition number > {cond_limit:g}"
        )
    app_inv = np.linalg.inv(app)
    return BlockCoefficient.from_blocks(
        a.n,
        a.m,
        app_inv,
        -app_inv @ a.perp_par,
        a.par_perp @ app_inv,
        a.par_par - a.par_perp @ app_inv @ a.perp_par,
    )


def hat_involution_check(a: BlockCoefficient) -> float:
    """Frobenius residual of applying the hat transform twice."""
    b = hat_transform(hat_transform(a))
    return float(np.linalg.norm(b.matrix - a.matrix))


def dual_hat_check(a: BlockCoefficient) -> float:
    """Residual of hat(A*) = N hat(A)* N."""
    lhs = hat_transform(a.adjoint()).matrix
    s = ReflectionN(a.n, a.m).signs
    rhs = s[:, None] * hat_transform(a).matrix.conj().T * s[None, :]
    return float(np.linalg.norm(lhs - rhs))


def lipschitz_pullback(a: BlockCoefficient, sigma) -> BlockCoefficient:
    """Coefficient pullback under the shear (t, x) -> (t + gamma(x), x).

    For slope vector sigma = grad(gamma), returns
    [1, -sigma^t; 0, I] A [1, 0; -sigma, I] applied per system pair, acting
    on the full assembled matrix in the axis-major component layout.
    """
    sigma = np.asarray(sigma, dtype=float).reshape(a.n)
    dim = a.dim
    left = np.eye(dim, dtype=complex)
    right = np.eye(dim, dtype=complex)
    for axis in range(a.n):
        for i in range(a.m):
            col = (1 + axis) * a.m + i
            left[i, col] = -sigma[axis]
            right[col, i] = -sigma[axis]
    return BlockCoefficient(a.n, a.m, left @ a.matrix @ right)


def numerical_range_angle(M, tol=1e-8):
    """Max |arg z| over the numerical range of M, for M accretive.

    The numerical range sits inside the sector |arg z| <= alpha exactly when
    both rotated Hermitian parts Herm(e^{+-i(pi/2 - alpha)} M) are positive
    semidefinite; the angle is found by bisection on alpha to ``tol``.
    """
    M = np.asarray(M, dtype=complex)

    def inside(alpha):
        for s in (+1.0, -1.0):
            R = np.exp(s * 1j * (np.pi / 2 - alpha)) * M
            if np.linalg.eigvalsh(0.5 * (R + R.conj().T))[0] < -tol * np.linalg.norm(M, 2):
                return False
        return True

    lo, hi = 0.0, np.pi / 2
    if inside(lo):
        return 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if inside(mid):
            hi = mid
        else:
            lo = mid
    return float(hi)


class CoefficientField:
    """Grid-sampled coefficient map x -> BlockCoefficient.

    ``samples`` has shape (npts, dim, dim) with dim = (1+n)m, indexed like the
    grid's flattened points.  kappa/omega are the accretivity constants: kappa
    is the worst pointwise Hermitian lower bound of A, omega the sector angle
    of the transformed multiplication coefficient B = hat(A).
    """

    def __init__(self, grid, samples, label="custom"):
        samples = np.array(samples, dtype=complex)
        if samples.shape != (grid.npts, grid.dim_component, grid.dim_component):
            raise ValueError(
                f"samples shape {samples.shape} does not match grid "
                f"({grid.npts} points, component dim {grid.dim_component})"
            )
        self.grid = grid
        self.samples = samples
        self.samples.setflags(write=False)
        self.label = label
        self._bounds = None

    @property
    def n(self):
        return self.grid.n

    @property
    def m(self):
        return self.grid.m

    def at(self, index) -> BlockCoefficient:
        return BlockCoefficient(self.n, self.m, self.samples[index])

    def adjoint_field(self) -> "CoefficientField":
        return CoefficientField(
            self.grid, self.samples.conj().transpose(0, 2, 1), label=self.label + "*"
        )

    def hat_field(self, cond_limit=1e12) -> "CoefficientField":
        """Apply the hat transform pointwise (batched)."""
        m = self.m
        app = self.samples[:, :m, :m]
        if np.max(np.linalg.cond(app)) > cond_limit:
            raise SingularNormalBlock("normal-normal block singular at a grid point")
        apl = self.samples[:, :m, m:]
        alp = self.samples[:, m:, :m]
        all_ = self.samples[:, m:, m:]
        app_inv = np.linalg.inv(app)
        out = np.empty_like(self.samples)
        out[:, :m, :m] = app_inv
        out[:, :m, m:] = -app_inv @ apl
        out[:, m:, :m] = alp @ app_inv
        out[:, m:, m:] = all_ - alp @ app_inv @ apl
        return CoefficientField(self.grid, out, label="hat(" + self.label + ")")

    @property
    def kappa(self):
        return self.bounds()[0]

    @property
    def omega(self):
        return self.bounds()[1]

    def bounds(self):
        if self._bounds is None:
            self._bounds = accretivity_bounds(self)
        return self._bounds

    def max_norm(self):
        """L-infinity norm: max over grid points of the pointwise 2-norm."""
        return float(np.max(np.linalg.norm(self.samples, ord=2, axis=(1, 2))))


def accretivity_bounds(field: CoefficientField):
    """Global (kappa, omega) for a coefficient field.

    kappa is the min over grid points of the smallest eigenvalue of the
    Hermitian part of A(x); omega the max over points of the numerical-range
    angle of B(x) = hat(A)(x).  Raises :class:`NotAccretive` when kappa <= 0.
    Accretivity of the transformed field is asserted by recomputing the
    pointwise Hermitian bound on B.
    """
    herm = 0.5 * (field.samples + field.samples.conj().transpose(0, 2, 1))
    kappa = float(np.min(np.linalg.eigvalsh(herm)[:, 0]))
    if kappa <= 0:
        raise NotAccretive(f"pointwise accretivity fails: kappa = {kappa:.3e}")
    bsamples = field.hat_field().samples
    bherm = 0.5 * (bsamples + bsamples.conj().transpose(0, 2, 1))
    kappa_b = float(np.min(np.linalg.eigvalsh(bherm)[:, 0]))
    if kappa_b <= 0:
        raise NotAccretive(
            f"transformed field lost accretivity: kappa(B) = {kappa_b:.3e}"
        )
    # the numerical-range scan is the cost driver; scan unique samples only
    _, unique_idx = np.unique(np.round(bsamples, 12), axis=0, return_index=True)
    omega = max(numerical_range_angle(bsamples[i]) for i in unique_idx)
    if omega >= np.pi / 2:
        raise NotAccretive(f"sector angle omega = {omega:.6f} >= pi/2")
    return kappa, omega


def pullback_field(field: CoefficientField, sigma_values) -> CoefficientField:
    """Pointwise Lipschitz-graph pullback with slope sigma(x) per grid point."""
    sigma_values = np.asarray(sigma_values, dtype=float).reshape(
        field.grid.npts, field.n
    )
    out = np.empty_like(field.samples)
    for p in range(field.grid.npts):
        out[p] = lipschitz_pullback(field.at(p), sigma_values[p]).matrix
    return CoefficientField(field.grid, out, label=field.label + "_sheared")


def kkpt_sign(x, L):
    """Periodized sign: +1 on (0, L/2), -1 on (L/2, L)."""
    return np.where(np.mod(x, L) < L / 2, 1.0, -1.0)


def _hermitian_random_samples(grid, seed, amplitude=0.5, modes=2):
    """Smooth Hermitian-valued accretive samples I + amplitude * H(x).

    H is a band-limited trigonometric polynomial with Hermitian values and
    sup-norm at most 1, so kappa >= 1 - amplitude.
    """
    rng = np.random.default_rng(seed)
    dim = grid.dim_component
    x = grid.points  # (npts, n)
    H = np.zeros((grid.npts, dim, dim), dtype=complex)
    nterms = 0
    for _ in range(modes):
        kvec = rng.integers(-2, 3, size=grid.n)
        phase = rng.uniform(0, 2 * np.pi)
        G = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
        G = 0.5 * (G + G.conj().T)
        G /= np.linalg.norm(G, 2)
        osc = np.cos((2 * np.pi / grid.L) * (x @ kvec) + phase)
        H += osc[:, None, None] * G
        nterms += 1
    H /= nterms
    out = np.broadcast_to(np.eye(dim, dtype=complex), H.shape).copy()
    out += amplitude * H
    return out


def coefficient_field_from_config(grid, config) -> CoefficientField:
    """Build a coefficient field from a JSON-style config dict.

    Recognized families: identity, constant, hermitian_random, block, kkpt,
    custom_table.  ``constant`` reads "matrix" (nested lists, entries either
    numbers or [re, im] pairs); ``custom_table`` reads "table" with one such
    matrix per grid point (row-major in the flattened point index).
    """
    family = config.get("family", "identity")
    dim = grid.dim_component
    eye = np.eye(dim, dtype=complex)

    def parse_matrix(entry, expect_dim=dim):
        M = np.asarray(entry, dtype=float)
        if M.ndim == 3 and M.shape[-1] == 2:
            M = M[..., 0] + 1j * M[..., 1]
        M = np.asarray(M, dtype=complex)
        if M.shape != (expect_dim, expect_dim):
            raise ValueError(f"matrix must be {expect_dim}x{expect_dim}")
        return M

    if family == "identity":
        samples = np.broadcast_to(eye, (grid.npts, dim, dim)).copy()
    elif family == "constant":
        if "matrix" in config:
            M = parse_matrix(config["matrix"])
        elif grid.n == 1 and grid.m == 1:
            M = np.array([[2.0, 1.0], [0.0, 1.0]], dtype=complex)
        else:
            raise ValueError("constant family needs an explicit matrix for this shape")
        samples = np.broadcast_to(M, (grid.npts, dim, dim)).copy()
    elif family == "hermitian_random":
        samples = _hermitian_random_samples(grid, int(config.get("seed", 0)))
    elif family == "block":
        M = np.diag(
            np.concatenate([np.full(grid.m, 2.0), np.full(grid.n * grid.m, 0.5)])
        ).astype(complex)
        if "matrix" in config:
            M = parse_matrix(config["matrix"])
            if np.any(M[: grid.m, grid.m :]) or np.any(M[grid.m :, : grid.m]):
                raise ValueError("block family requires vanishing off-diagonal blocks")
        samples = np.broadcast_to(M, (grid.npts, dim, dim)).copy()
    elif family == "kkpt":
        if grid.n != 1 or grid.m != 1:
            raise ValueError("kkpt family requires n = 1, m = 1")
        k = float(config.get("k", 0.5))
        s = kkpt_sign(grid.points[:, 0], grid.L)
        samples = np.zeros((grid.npts, 2, 2), dtype=complex)
        samples[:, 0, 0] = 1.0
        samples[:, 1, 1] = 1.0
        samples[:, 0, 1] = k * s
        samples[:, 1, 0] = -k * s
    elif family == "custom_table":
        table = np.asarray(config["table"], dtype=float)
        if table.shape[0] != grid.npts:
            raise ValueError(
                f"custom_table needs one matrix per grid point ({grid.npts})"
            )
        samples = np.stack([parse_matrix(table[p]) for p in range(grid.npts)])
    else:
        raise ValueError(f"unknown coefficient family '{family}'")

    label = family if family != "kkpt" else f"kkpt(k={config.get('k', 0.5)})"
    return CoefficientField(grid, samples, label=label)
