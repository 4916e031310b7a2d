"""Fundamental solutions by duality: pole kernels, decay, and the lift.

For a coefficient field A, the fundamental solution of div A* grad with pole
(t0, x0) is represented by the slices of its conormal gradient g(t, .).  The
boundary representative at each height solves a finite Riesz representation
problem on the dual pair of spectral subspaces: with B = hat(A) and
Btil = N B* N,

    <N v, g> = +(e^{-(t0-t) BD} v)_perp^i(x0)   for v in range(Etil+), t < t0,
    <N v, g> = -(e^{-(t0-t) BD} v)_perp^i(x0)   for v in range(Etil-), t > t0,

where g lies in the left (resp. right) sector of D Btil and <a, b> is the
discrete L2 pairing conjugating its second argument.  The sign and
conjugation conventions are pinned by the closed-form Laplace kernel.
Regularizing the dual Gram matrix is forbidden: a degenerate pairing raises,
since nondegeneracy is exactly the duality claim the construction rests on.

On the torus every slice is mean-zero; comparisons against whole-space
kernels must project out the zero mode and sum periodic images (or use the
closed-form periodized kernels below).
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
from scipy.interpolate import CubicSpline

from .coeff import CoefficientField, pullback_field
from .funcalc import operator_bundle, spectral_split
from .torus import (
    DenseOperator,
    TorusGrid,
    antidifferentiate,
    inner,
    multiplication_operator,
    reflection_signs,
    tangential_curl,
)

DUAL_GRAM_THRESHOLD = 1e-10


class DegenerateDualPairing(Exception):
    """The dual Gram matrix of the sector pairing is numerically singular."""


class TailNotConverged(Exception):
    """The transversal quadrature tail exceeds its share of the integral."""


class ShearUnresolved(Exception):
    """The Lipschitz shear moves more than one height-cell per grid step."""


class PoleEvaluation(Exception):
    """Closed-form kernel evaluated at its pole."""


def laplace_kernel(n, point):
    """Closed-form fundamental solution of the Laplacian on R^{1+n}.

    Returns (phi, grad) at (t, x): the log kernel for n = 1, the power law
    for n >= 2, with sigma_n the area of the unit sphere in R^{1+n}.
    """
    pt = np.asarray(point, dtype=float)
    if pt.shape != (1 + n,):
        raise ValueError(f"point must have {1 + n} entries")
    r2 = float(np.sum(pt**2))
    if r2 == 0.0:
        raise PoleEvaluation("kernel evaluated at the pole")
    if n == 1:
        sigma = 2 * np.pi
        phi = np.log(np.sqrt(r2)) / sigma
    else:
        from math import gamma

        sigma = 2 * np.pi ** ((1 + n) / 2) / gamma((1 + n) / 2)
        phi = -(r2 ** (-(n - 1) / 2)) / ((n - 1) * sigma)
    grad = pt / (sigma * r2 ** ((n + 1) / 2))
    return phi, grad


def periodic_halfplane_kernel(L, t, x):
    """Gradient of the Laplace fundamental solution on the period-L cylinder.

    Closed form of the periodized log kernel: the potential is
    (1/4 pi) ln(cosh(2 pi t / L) - cos(2 pi x / L)) up to a constant, which
    equals the convergent part of the image sum of grad Phi.  Raises at the
    pole (t = 0, x = 0 mod L).
    """
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    a = 2 * np.pi * t / L
    b = 2 * np.pi * x / L
    den = np.cosh(a) - np.cos(b)
    if np.any(den < 1e-300):
        raise PoleEvaluation("periodized kernel evaluated at the pole")
    gt = np.sinh(a) / den / (2 * L)
    gx = np.sin(b) / den / (2 * L)
    return gt, gx


def torus_log_gradient(grid: TorusGrid, x0):
    """Spectral gradient of the 2-torus Laplace Green's function at pole x0.

    Solves Delta G = delta - 1/L^2 on the mean-zero modes; the gradient is
    the exact continuum limit of the lifted Laplacian construction.
    """
    if grid.n != 2:
        raise ValueError("torus log kernel needs a 2d grid")
    x0 = np.asarray(x0, dtype=float)
    xi = grid.modes
    xi2 = np.sum(xi**2, axis=1)
    phase = np.exp(-1j * (xi @ x0)) / grid.L**2
    xi2safe = np.where(xi2 == 0, 1.0, xi2)
    g_hat = 1j * xi * (phase / xi2safe)[:, None]
    g_hat[xi2 == 0] = 0.0
    # the spectral coefficients above are physical Fourier coefficients;
    # cell-centered sampling only changes the phase convention inside fft
    vals = np.zeros((grid.npts, 2), dtype=complex)
    for a in range(2):
        vals[:, a] = np.sum(
            g_hat[None, :, a] * np.exp(1j * (grid.points @ xi.T)), axis=1
        )
    return vals.real


class PoleKernel:
    """Conormal-gradient slices of a fundamental solution around one pole.

    ``slices[t]`` has shape (npts, dim, m): grid component layout in the
    middle, one column per system index of the pole.  Two-sided kernels use
    a pole on the boundary (t0 = 0) with heights of both signs.
    """

    def __init__(self, field, pole, heights, slices, gram_sigma_min):
        self.field = field
        self.grid = field.grid
        self.pole = (float(pole[0]), np.atleast_1d(np.asarray(pole[1], dtype=float)))
        self.heights = tuple(float(t) for t in heights)
        self.slices = slices
        self.gram_sigma_min = gram_sigma_min

    @property
    def t0(self):
        return self.pole[0]

    def slice_norms(self):
        w = np.sqrt(self.grid.cell_volume)
        return {t: float(np.linalg.norm(self.slices[t])) * w for t in self.heights}

    def curl_residual(self):
        """Largest tangential-curl residual over slices and columns."""
        grid = self.grid
        worst = 0.0
        for t in self.heights:
            g = self.slices[t]
            for i in range(grid.m):
                par = g[:, grid.m :, i].reshape(grid.npts, grid.n, grid.m)
                c = tangential_curl(grid, par)
                worst = max(
                    worst, float(np.linalg.norm(c)) * np.sqrt(grid.cell_volume)
                )
        return worst


def _grid_point_index(grid, x0):
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = np.linalg.norm(grid.periodic_delta(grid.points - x0[None, :]), axis=1)
    idx = int(np.argmin(d))
    if d[idx] > 1e-9 * grid.L:
        raise ValueError("pole is not a grid point")
    return idx


def _l2_orthonormal(grid, cols):
    Q, _ = np.linalg.qr(cols)
    return Q / np.sqrt(grid.cell_volume)


def construct_pole_kernel(
    field: CoefficientField, pole, heights, dual_route="adjoint"
) -> PoleKernel:
    """Build the fundamental-solution kernel of div A* grad for one pole.

    ``heights`` must avoid the pole height; each slice comes from its own
    Riesz solve at the corresponding offset (the semigroup-evolution route
    is the translation-covariance invariant, exercised separately).
    ``dual_route`` selects how the slice-side splitting of D Btil is found:
    "adjoint" reuses the BD eigendecomposition through the exact identity
    D Btil = -N (BD)* N, "independent" runs a second eigendecomposition of
    the assembled matrix.
    """
    grid = field.grid
    t0 = float(pole[0])
    p0 = _grid_point_index(grid, pole[1])
    heights = [float(t) for t in heights]
    if any(t == t0 for t in heights):
        raise ValueError("slice heights must avoid the pole height")
    bundle = operator_bundle(field)
    split = bundle.split_BD

    if dual_route == "adjoint":
        dual = bundle.dual_slice_split()
    elif dual_route == "independent":
        btil_field = field.adjoint_field().hat_field()
        dual = spectral_split(
            DenseOperator(
                grid,
                bundle.D.matrix @ multiplication_operator(btil_field).matrix,
                label=f"DBtil[{field.label}]",
            ),
            "DB",
        )
    else:
        raise ValueError("dual_route must be 'adjoint' or 'independent'")

    signs = reflection_signs(grid)
    m = grid.m
    dim = grid.dim_component
    dx = grid.cell_volume

    jobs = []
    lower = [t for t in heights if t < t0]
    upper = [t for t in heights if t > t0]
    if lower:
        jobs.append(("lower", lower, "+", "-", +1.0))
    if upper:
        jobs.append(("upper", upper, "-", "+", -1.0))

    slices = {}
    gram_sigmas = {}
    for name, ts, bd_side, dual_side, sign in jobs:
        Vb = _l2_orthonormal(grid, split.V[:, split._mask(bd_side)])
        Gb = _l2_orthonormal(grid, dual.V[:, dual._mask(dual_side)])
        if Vb.shape[1] != Gb.shape[1]:
            raise DegenerateDualPairing(
                f"sector dimensions differ: {Vb.shape[1]} vs {Gb.shape[1]}"
            )
        M = dx * (Vb * signs[:, None]).T @ Gb.conj()
        sv = np.linalg.svd(M, compute_uv=False)
        gram_sigmas[name] = float(sv[-1])
        if sv[-1] <= DUAL_GRAM_THRESHOLD:
            raise DegenerateDualPairing(
                f"dual Gram matrix singular: sigma_min = {sv[-1]:.3e}"
            )
        lu = scipy.linalg.lu_factor(M)
        Y = split.Vinv @ Vb
        mask = split._mask(bd_side)
        rows = split.V[[p0 * dim + i for i in range(m)], :]
        for t in ts:
            s = t0 - t
            w = np.zeros_like(split.eigenvalues)
            w[mask] = np.exp(-s * split.eigenvalues[mask])
            phi = sign * ((rows * w[None, :]) @ Y).T  # (nbasis, m)
            c = scipy.linalg.lu_solve(lu, phi).conj()
            g = Gb @ c
            slices[t] = g.reshape(grid.npts, dim, m)
    return PoleKernel(field, (t0, pole[1]), heights, slices, gram_sigmas)


def evolve_kernel_slice(kernel: PoleKernel, t_from, t_to):
    """Evolve a stored slice with the D Btil semigroup (covariance route).

    Valid only away from the pole plane: downward below it, upward above.
    """
    bundle = operator_bundle(kernel.field)
    dual = bundle.dual_slice_split()
    dt = t_to - t_from
    if t_from < kernel.t0:
        side = "-"
        if dt > 0:
            raise ValueError("below the pole the evolution must move downward")
    else:
        side = "+"
        if dt < 0:
            raise ValueError("above the pole the evolution must move upward")
    g = kernel.slices[float(t_from)].reshape(-1, kernel.grid.m)
    out = dual.propagate(side, dt, g)
    return out.reshape(kernel.grid.npts, kernel.grid.dim_component, kernel.grid.m)


def annular_decay(kernel: PoleKernel, radii):
    """Tail and solid-annulus masses of a pole kernel over a radius ladder.

    Tail rows: slice mass outside the periodic ball of radius R, one row per
    (R, t).  Solid rows: mass of the space-time annulus
    R < |(t,x) - pole| < 2R integrated over the slices with trapezoid
    weights.  Log-log slopes are fit against (R + |t - t0|) for tails and R
    for solid annuli.
    """
    grid = kernel.grid
    radii = [float(R) for R in radii]
    if max(radii) > grid.L / 4 + 1e-12:
        raise ValueError("radii must stay below L/4 (periodic image guard)")
    x0 = kernel.pole[1]
    dist = np.linalg.norm(grid.periodic_delta(grid.points - x0[None, :]), axis=1)
    heights = np.array(sorted(kernel.heights))
    wts = np.zeros_like(heights)
    if len(heights) > 1:
        wts[1:-1] = 0.5 * (heights[2:] - heights[:-2])
        wts[0] = heights[1] - heights[0]
        wts[-1] = heights[-1] - heights[-2]
    else:
        wts[0] = 1.0
    dx = grid.cell_volume

    tail_rows = []
    for t in heights:
        dens = np.sum(np.abs(kernel.slices[float(t)]) ** 2, axis=(1, 2))
        for R in radii:
            mass = float(np.sum(dens[dist > R]) * dx)
            tail_rows.append({"R": R, "t": float(t), "mass": mass})

    solid_rows = []
    for R in radii:
        total = 0.0
        for t, w in zip(heights, wts):
            dens = np.sum(np.abs(kernel.slices[float(t)]) ** 2, axis=(1, 2))
            rho = np.sqrt(dist**2 + (t - kernel.t0) ** 2)
            sel = (rho > R) & (rho < 2 * R)
            total += float(np.sum(dens[sel]) * dx * w)
        solid_rows.append({"R": R, "mass": total})

    tail_x = np.log([r["R"] + abs(r["t"] - kernel.t0) for r in tail_rows])
    tail_y = np.log([max(r["mass"], 1e-300) for r in tail_rows])
    solid_x = np.log([r["R"] for r in solid_rows])
    solid_y = np.log([max(r["mass"], 1e-300) for r in solid_rows])
    return {
        "tail": tail_rows,
        "solid": solid_rows,
        "tail_slope": float(np.polyfit(tail_x, tail_y, 1)[0]),
        "solid_slope": float(np.polyfit(solid_x, solid_y, 1)[0]),
    }


def gaussian_bump(
    grid, center_t, center_x, width_t, width_x, component=0, amplitude=1.0
):
    """Smooth localized test field t -> (npts, dim) for distribution checks."""
    center_x = np.atleast_1d(np.asarray(center_x, dtype=float))
    d = np.linalg.norm(grid.periodic_delta(grid.points - center_x[None, :]), axis=1)
    prof_x = np.exp(-((d / width_x) ** 2))

    def bump(t):
        vals = np.zeros((grid.npts, grid.dim_component), dtype=complex)
        vals[:, component] = (
            amplitude * np.exp(-(((t - center_t) / width_t) ** 2)) * prof_x
        )
        return vals

    return bump


def distributional_identity_check(kernel: PoleKernel, test_bumps):
    """Pair the kernel against test fields across the pole plane.

    The kernel must carry a uniform two-sided height ladder straddling its
    pole height; each test bump is a callable t -> (npts, dim) array, smooth
    and numerically supported inside the ladder.  For each bump and column i
    the quadrature value

        I_i = sum_t dt <-N (d/dt + BD) phi(t), f_i(t)>

    is compared with its discrete expectation
    -phi_perp^i(pole) + (P_ker phi(t0))_perp^i(x0): the zero-mode correction
    is the torus quarantine showing up in the jump functional.  The time
    derivative uses centered differences, so residuals scale as O(dt^2) plus
    spectral terms.  Signs follow the Laplace-kernel oracle.
    """
    grid = kernel.grid
    bundle = operator_bundle(kernel.field)
    split = bundle.split_BD
    t0 = kernel.t0
    p0 = _grid_point_index(grid, kernel.pole[1])
    heights = np.array(sorted(kernel.heights))
    dts = np.diff(heights)
    dt = float(dts[0])
    if not np.allclose(dts, dt, rtol=1e-9):
        raise ValueError("distributional check needs a uniform height ladder")
    if not (heights[0] < t0 < heights[-1]):
        raise ValueError("height ladder must straddle the pole height")
    signs = reflection_signs(grid).reshape(grid.npts, grid.dim_component)
    BD = bundle.BD.matrix
    results = []
    for bump in test_bumps:
        phi = {float(t): np.asarray(bump(t), dtype=complex) for t in heights}
        lo, hi = float(heights[0] - dt), float(heights[-1] + dt)
        phi[lo] = np.asarray(bump(lo), dtype=complex)
        phi[hi] = np.asarray(bump(hi), dtype=complex)
        peak = max(np.linalg.norm(v) for v in phi.values())
        if max(np.linalg.norm(phi[lo]), np.linalg.norm(phi[hi])) > 1e-10 * peak:
            raise ValueError("test bump must vanish outside the height ladder")
        I = np.zeros(grid.m, dtype=complex)
        hs = [lo] + [float(t) for t in heights] + [hi]
        for j, t in enumerate(heights):
            dphi = (phi[hs[j + 2]] - phi[hs[j]]) / (2 * dt)
            w = dphi + (BD @ phi[float(t)].reshape(-1)).reshape(dphi.shape)
            test = -signs * w
            f = kernel.slices[float(t)]
            for i in range(grid.m):
                I[i] += dt * inner(grid, test, f[:, :, i])
        phi0 = np.asarray(bump(t0), dtype=complex)
        ker_part = split.apply_weights(
            split.kernel_mask.astype(complex), phi0.reshape(-1)
        ).reshape(grid.npts, grid.dim_component)
        expected = -phi0[p0, : grid.m] + ker_part[p0, : grid.m]
        results.append(
            {
                "value": I,
                "expected": expected,
                "residual": float(np.max(np.abs(I - expected))),
            }
        )
    return results


def lambda_form(block, nu0, nu):
    """The boundary-form matrix A [nu0, 0; nu, 0] + [0, nu^t; 0, -nu0] A."""
    n, m = block.n, block.m
    dim = block.dim
    nu = np.asarray(nu, dtype=complex).reshape(n)
    left = np.zeros((dim, dim), dtype=complex)
    right = np.zeros((dim, dim), dtype=complex)
    for i in range(m):
        left[i, i] = nu0
        for a in range(n):
            left[(1 + a) * m + i, i] = nu[a]
            right[i, (1 + a) * m + i] = nu[a]
            right[(1 + a) * m + i, (1 + a) * m + i] = -nu0
    return block.matrix @ left + right @ block.matrix


def conormal_to_full_gradient(coeff_samples, values, m):
    """Recover [d_t u, grad_par u] from conormal-gradient slice values.

    ``coeff_samples`` are the pointwise matrices C of the system the slices
    solve (C = A* for pole kernels): the transversal derivative is
    C_pp^{-1} (f_perp - C_pl f_par), the tangential part is unchanged.
    ``values`` has shape (npts, dim, ncols).
    """
    app = coeff_samples[:, :m, :m]
    apl = coeff_samples[:, :m, m:]
    f_perp = values[:, :m, :]
    f_par = values[:, m:, :]
    rhs = f_perp - np.einsum("pab,pbc->pac", apl, f_par)
    out = values.copy()
    out[:, :m, :] = np.linalg.solve(app, rhs)
    return out


def truncated_cone_profile(grid, x0, R):
    """The profile min(dist(x, x0), R) and its slope field on the grid."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    delta = grid.periodic_delta(grid.points - x0[None, :])
    dist = np.linalg.norm(delta, axis=1)
    gamma = np.minimum(dist, R)
    sigma = np.zeros((grid.npts, grid.n))
    inside = (dist < R) & (dist > 0)
    sigma[inside] = delta[inside] / dist[inside, None]
    return gamma, sigma


def lipschitz_invariance_check(
    fieldA: CoefficientField, gamma, sigma, pole, band=None, ladder_count=None
):
    """Compare the pole kernel of A against the sheared kernel of A_sigma.

    gamma/sigma sample the Lipschitz profile and its slope on the grid, with
    gamma >= 0 and gamma = 0 at the pole's boundary point.  The full
    gradients must satisfy
    grad Gamma(t, x) = [1, 0; -sigma, I] grad Gamma_sigma(t - gamma(x), x)
    up to the per-slice zero mode (the torus version of the free constant);
    the return value is the relative discrepancy after removing it.
    """
    grid = fieldA.grid
    gamma = np.asarray(gamma, dtype=float).reshape(grid.npts)
    sigma = np.asarray(sigma, dtype=float).reshape(grid.npts, grid.n)
    if np.any(gamma < -1e-12):
        raise ValueError("profile must be nonnegative")
    t0, x0 = float(pole[0]), pole[1]
    p0 = _grid_point_index(grid, x0)
    if abs(gamma[p0]) > 1e-12:
        raise ValueError("profile must vanish at the pole's boundary point")
    gmax = float(gamma.max())
    if band is None:
        band = np.linspace(-0.5 * t0, -0.25 * t0, 4)
    band = np.asarray(band, dtype=float)
    smax = float(np.max(np.abs(sigma)))
    dt_ladder = max(grid.dx * max(smax, 1.0), (band.max() - band.min()) / 16)
    if smax * grid.dx > dt_ladder * (1 + 1e-12):
        raise ShearUnresolved(
            f"shear step {smax * grid.dx:.3e} exceeds ladder spacing {dt_ladder:.3e}"
        )
    lo = float(band.min() - gmax - 2 * dt_ladder)
    hi = min(float(band.max()) + 2 * dt_ladder, -1e-6 * grid.L)
    if ladder_count is None:
        ladder_count = max(8, int(np.ceil((hi - lo) / dt_ladder)) + 3)
    ladder = np.linspace(lo, hi, ladder_count)

    fieldS = pullback_field(fieldA, sigma)
    kernelA = construct_pole_kernel(fieldA, (t0, x0), band)
    kernelS = construct_pole_kernel(fieldS, (t0, x0), ladder)

    adjA = fieldA.adjoint_field().samples
    adjS = fieldS.adjoint_field().samples
    m = grid.m

    fullS = np.stack(
        [
            conormal_to_full_gradient(adjS, kernelS.slices[float(t)], m)
            for t in ladder
        ]
    )
    spline_re = CubicSpline(ladder, fullS.real, axis=0)
    spline_im = CubicSpline(ladder, fullS.imag, axis=0)

    shear = np.tile(np.eye(grid.dim_component, dtype=complex), (grid.npts, 1, 1))
    for a in range(grid.n):
        for i in range(m):
            shear[:, (1 + a) * m + i, i] = -sigma[:, a]

    rng = np.arange(grid.npts)
    num = 0.0
    den = 0.0
    for t in band:
        fullA = conormal_to_full_gradient(adjA, kernelA.slices[float(t)], m)
        evals = t - gamma
        shifted = spline_re(evals)[rng, rng] + 1j * spline_im(evals)[rng, rng]
        pred = np.einsum("pab,pbc->pac", shear, shifted)
        diff = fullA - pred
        diff -= diff.mean(axis=0, keepdims=True)
        num += float(np.sum(np.abs(diff) ** 2))
        den += float(np.sum(np.abs(fullA - fullA.mean(axis=0, keepdims=True)) ** 2))
    return float(np.sqrt(num / den))


def lambda_form_closedness(field: CoefficientField, seed=0, heights=None, modes=2):
    """Quadrature residual of the closedness of the boundary form.

    Takes random band-limited upper-half solutions u of the A-system and G
    of the A*-system, forms the space-time vector field with components
    W_c = <Lambda(e_c) grad u, grad G> and evaluates div W with exact
    transversal derivatives (through the semigroup generators) and spectral
    tangential derivatives.  Returns the residual relative to the size of W.
    """
    grid = field.grid
    bundle = operator_bundle(field)
    split = bundle.split_DB
    dual = bundle.dual_slice_split()
    if heights is None:
        heights = np.linspace(0.05, 0.15, 5) * grid.L
    rng = np.random.default_rng(seed)

    def smooth_field(gen):
        xi = grid.modes
        keep = np.sum(xi**2, axis=1) <= (2 * np.pi / grid.L * modes) ** 2 + 1e-9
        raw = gen.standard_normal(
            (grid.npts, grid.dim_component)
        ) + 1j * gen.standard_normal((grid.npts, grid.dim_component))
        spec = grid.fft(raw)
        spec[~keep] = 0.0
        return grid.ifft(spec).reshape(-1)

    f0 = split.apply_weights(split.right_mask.astype(complex), smooth_field(rng))
    gmask = dual._mask("+").astype(complex)
    g0 = dual.V @ (gmask * (dual.Vinv @ smooth_field(rng)))

    m = grid.m
    dim = grid.dim_component
    adj = field.adjoint_field().samples
    lam = np.empty((1 + grid.n, grid.npts, dim, dim), dtype=complex)
    for p in range(grid.npts):
        blk = field.at(p)
        lam[0, p] = lambda_form(blk, 1.0, np.zeros(grid.n))
        for a in range(grid.n):
            e = np.zeros(grid.n)
            e[a] = 1.0
            lam[1 + a, p] = lambda_form(blk, 0.0, e)

    DBmat = bundle.DB.matrix

    def full_grad(cf_samples, conormal_flat):
        vals = conormal_flat.reshape(grid.npts, dim, 1)
        return conormal_to_full_gradient(cf_samples, vals, m)[:, :, 0]

    num = 0.0
    den = 0.0
    for t in heights:
        fu = split.apply_weights(split.semigroup_weights("+", t), f0)
        dfu = -(DBmat @ fu)
        ew = np.exp(-t * dual.eigenvalues) * gmask
        fg = dual.V @ (ew * (dual.Vinv @ g0))
        dfg = dual.V @ (-dual.eigenvalues * ew * (dual.Vinv @ g0))

        gu = full_grad(field.samples, fu)
        gg = full_grad(adj, fg)
        dgu = full_grad(field.samples, dfu)
        dgg = full_grad(adj, dfg)

        W = np.empty((grid.npts, 1 + grid.n), dtype=complex)
        for c in range(1 + grid.n):
            W[:, c] = np.einsum("pa,pab,pb->p", gg.conj(), lam[c], gu)
        dW0 = np.einsum("pa,pab,pb->p", dgg.conj(), lam[0], gu) + np.einsum(
            "pa,pab,pb->p", gg.conj(), lam[0], dgu
        )
        spec = grid.fft(W[:, 1:])
        divpar = grid.ifft(np.sum(1j * grid.modes * spec, axis=1, keepdims=True))[:, 0]
        resid = dW0 + divpar
        num += float(np.linalg.norm(resid) ** 2)
        den += float(np.linalg.norm(W) ** 2) / grid.L
    return float(np.sqrt(num / max(den, 1e-300)))


def lift_coefficient_field(base_grid: TorusGrid, base_samples) -> CoefficientField:
    """Lift base coefficients A(x) on R^n to diag(1, A) on the half space.

    ``base_samples`` has shape (npts, n*m, n*m) acting on tangential parts
    in the axis-major layout; the lifted block coefficient is t-independent
    with identity normal block and vanishing off-diagonal blocks.
    """
    m = base_grid.m
    dim = base_grid.dim_component
    base_samples = np.asarray(base_samples, dtype=complex)
    if base_samples.shape != (base_grid.npts, base_grid.n * m, base_grid.n * m):
        raise ValueError("base samples must act on the tangential components")
    samples = np.zeros((base_grid.npts, dim, dim), dtype=complex)
    samples[:, :m, :m] = np.eye(m)
    samples[:, m:, m:] = base_samples
    return CoefficientField(base_grid, samples, label="lifted")


def tdep_fundamental_solution(
    base_grid: TorusGrid,
    base_samples,
    x0,
    T_max=None,
    nodes_per_side=48,
    tail_fraction_limit=0.1,
):
    """Fundamental solution gradient for base coefficients via the lift.

    Builds the two-sided pole kernel of the lifted t-independent problem at
    pole (0, x0) and integrates the tangential slice parts over the
    auxiliary transversal variable with a log-spaced trapezoid ladder plus
    an exact [0, t_min] cell using the boundary slices.  Raises
    :class:`TailNotConverged` when the certified remainder (exponential
    eigenvalue decay of the slice expansion) exceeds its share.

    Returns (g, info): g has shape (npts, n, m) per pole column.
    """
    if base_grid.n != 2:
        raise ValueError("the lift is implemented for n = 2 base coefficients")
    if T_max is None:
        T_max = 4.0 * base_grid.L
    lifted = lift_coefficient_field(base_grid, base_samples)
    # fundamental solution of div Atil grad <-> Def-5.1 field is Atil*
    fieldG = lifted.adjoint_field()
    fieldG = CoefficientField(base_grid, fieldG.samples, label="lifted*")
    t_min = base_grid.dx / 4
    pos = np.geomspace(t_min, T_max, nodes_per_side)
    heights = np.concatenate([-pos[::-1], pos])
    kernel = construct_pole_kernel(fieldG, (0.0, x0), heights)
    # boundary slices at 0-/0+ close the quadrature cell at the pole plane
    eps = t_min * 1e-6
    closure = construct_pole_kernel(fieldG, (0.0, x0), [-eps, eps])

    grid = base_grid
    m = grid.m
    g = np.zeros((grid.npts, grid.n * m, m), dtype=complex)
    for sgn in (1.0, -1.0):
        ts = pos  # integrate in |t| on each side
        par = np.stack([kernel.slices[float(sgn * t)][:, m:, :] for t in ts])
        # trapezoid in log|t| of (slice * t), accurate for power-law decay
        logt = np.log(ts)
        integrand = par * ts[:, None, None, None]
        w = np.zeros(len(ts))
        w[1:-1] = 0.5 * (logt[2:] - logt[:-2])
        w[0] = 0.5 * (logt[1] - logt[0])
        w[-1] = 0.5 * (logt[-1] - logt[-2])
        g += np.tensordot(w, integrand, axes=(0, 0))
        # closing cell [0, t_min] by plain trapezoid with the boundary slice
        bdry = closure.slices[float(sgn * eps)][:, m:, :]
        edge = kernel.slices[float(sgn * t_min)][:, m:, :]
        g += 0.5 * t_min * (bdry + edge)

    # certified tail bound from the eigenvalue decay of the outer slices
    bundle = operator_bundle(fieldG)
    dual = bundle.dual_slice_split()
    dx_w = np.sqrt(grid.cell_volume)
    tails = []
    for sgn, side in ((1.0, "+"), (-1.0, "-")):
        outer = kernel.slices[float(sgn * T_max)].reshape(-1, m)
        coef = dual.Vinv @ outer
        mask = dual._mask(side)
        mu = np.abs(dual.eigenvalues[mask].real)
        colnorm = np.linalg.norm(dual.V[:, mask], axis=0) * dx_w
        amp = np.abs(coef[mask]) * colnorm[:, None]
        tails.append(float(np.sum(amp / mu[:, None])))
    tail = sum(tails)
    gnorm = float(np.linalg.norm(g)) * dx_w
    info = {
        "tail_bound": tail,
        "g_norm": gnorm,
        "T_max": float(T_max),
        "t_min": float(t_min),
        "gram_sigma_min": kernel.gram_sigma_min,
    }
    if tail > tail_fraction_limit * max(gnorm, 1e-300):
        raise TailNotConverged(
            f"certified tail {tail:.3e} exceeds {tail_fraction_limit:.0%} of "
            f"the accumulated integral {gnorm:.3e}"
        )
    return g, info


def base_distributional_residual(base_grid, base_samples, g, x0, bump_width=None):
    """Residual of div(A g) = delta - background against a smooth test bump.

    Pairs A g with the gradient of a real bump: the expected value is
    -phi(x0) + mean(phi) (the uniform background is exact for the identity
    and a few-percent model otherwise).  Returns max over columns of the
    relative residual.
    """
    grid = base_grid
    if bump_width is None:
        bump_width = grid.L / 8
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    center = x0 + grid.L / 4
    d = np.linalg.norm(grid.periodic_delta(grid.points - center[None, :]), axis=1)
    phi = np.exp(-((d / bump_width) ** 2))
    spec = grid.fft(phi.astype(complex).reshape(grid.npts, 1))
    gradphi = grid.ifft(1j * grid.modes[:, :, None] * spec[:, None, :])[:, :, 0]
    Ag = np.einsum("pab,pbm->pam", np.asarray(base_samples, dtype=complex), g)
    p0 = _grid_point_index(grid, x0)
    worst = 0.0
    for i in range(grid.m):
        val = complex(
            np.sum(Ag[:, :, i] * gradphi.conj()) * grid.cell_volume
        )
        expected = -phi[p0] + phi.mean()
        worst = max(worst, abs(val - expected) / abs(expected))
    return float(worst)


def reconstruct_potential(base_grid, g, x0, gauge_radius=None):
    """Potential from its gradient by spectral antidifferentiation.

    The mean-zero part is exact on the torus; the gauge sets the mean over
    the farthest annulus (centered at the pole) to zero.
    """
    grid = base_grid
    vals = np.zeros((grid.npts, grid.m), dtype=complex)
    for i in range(grid.m):
        vals[:, i] = antidifferentiate(
            grid, g[:, :, i].reshape(grid.npts, grid.n, grid.m)
        )[:, 0]
    if gauge_radius is None:
        gauge_radius = grid.L / 4
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    dist = np.linalg.norm(grid.periodic_delta(grid.points - x0[None, :]), axis=1)
    ring = (dist > 0.8 * gauge_radius) & (dist <= gauge_radius)
    vals -= vals[ring].mean(axis=0, keepdims=True)
    return vals, dist


def pointwise_bound_check(base_grid, g, x0, radii=None):
    """Envelope and dyadic-mean diagnostics of the reconstructed potential.

    For the planar case the potential must fit C (1 + |ln r|): the fitted
    constant comes from mid-range annuli, and the dyadic mean differences
    |A_2R - A_R| are returned for comparison with the expected constancy
    (exactly (1/2 pi) ln 2 for the Laplacian).
    """
    grid = base_grid
    gamma_vals, dist = reconstruct_potential(base_grid, g, x0)
    if radii is None:
        radii = [grid.L / 16, grid.L / 8, grid.L / 4]
    means = {}
    for R in radii:
        sel = (dist > R) & (dist < 2 * R)
        means[R] = complex(gamma_vals[sel, 0].mean())
    dyadic = {}
    rs = sorted(radii)
    for a, b in zip(rs, rs[1:]):
        if abs(2 * a - b) < 1e-9 * grid.L:
            dyadic[a] = abs(means[b] - means[a])
    mid = (dist > grid.L / 32) & (dist < grid.L / 4)
    rr = dist[mid]
    envelope = 1 + np.abs(np.log(rr))
    fitted = np.abs(gamma_vals[mid, 0])
    C = float(np.max(fitted / envelope))
    lsq = float(np.sum(fitted * envelope) / np.sum(envelope**2))
    return {
        "fitted_C_max": C,
        "fitted_C_lsq": lsq,
        "annulus_means": {float(k): [v.real, v.imag] for k, v in means.items()},
        "dyadic_differences": {float(k): float(v) for k, v in dyadic.items()},
    }
