"""Layer potential operators, boundary solvers, and estimate machinery.

The double layer at height t is the normal part of b_t(BD) applied to the
normal embedding of the boundary function; its strong limit at the boundary
is the normal part of the right spectral projection.  The gradient of the
single layer is e^{-t DB} E+ on the same embedding.  All boundary solves are
posed on the mean-zero subspace (the torus quarantine of the xi = 0 modes),
and residuals are reported after projecting out the zero mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .funcalc import SideMismatch, operator_bundle
from .torus import (
    GridField,
    antidifferentiate,
    tangential_curl,
    tangential_gradient,
)

_trapezoid = getattr(np, "trapezoid", None) or np.trapz

INVERTIBILITY_REL_THRESHOLD = 1e-6


class NotInvertible(Exception):
    """Boundary operator is numerically singular; carries sigma_min."""

    def __init__(self, message, sigma_min=None):
        super().__init__(message)
        self.sigma_min = sigma_min


@dataclass(frozen=True)
class WhitneyParams:
    """Whitney box parameters: heights in (t/c0, c0 t), window c1 * t."""

    c0: float = 2.0
    c1: float = 0.5
    t_samples: tuple = ()

    def __post_init__(self):
        if not self.c0 > 1:
            raise ValueError("c0 must exceed 1")
        if not self.c1 > 0:
            raise ValueError("c1 must be positive")
        ts = tuple(float(t) for t in self.t_samples)
        if ts and list(ts) != sorted(ts):
            raise ValueError("t_samples must be sorted increasing")
        object.__setattr__(self, "t_samples", ts)

    @classmethod
    def default(cls, L, count=24):
        return cls(t_samples=tuple(np.geomspace(1e-3 * L, 1.0 * L, count)))


@dataclass
class SolutionSlice:
    """Solution data at one height: potential values and conormal gradient."""

    t: float
    u: np.ndarray
    conormal: GridField
    curl_residual: float = dataclass_field(init=False, default=0.0)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=complex)
        if not np.all(np.isfinite(self.u)):
            raise ValueError("slice potential is not finite")
        grid = self.conormal.grid
        c = tangential_curl(grid, self.conormal.par)
        self.curl_residual = float(np.linalg.norm(c)) * np.sqrt(grid.cell_volume)


def scalar_embedding_matrix(grid):
    """Matrix mapping flattened m-component scalars to normal vector fields."""
    dim = grid.dim_component
    E = np.zeros((grid.total_dim, grid.npts * grid.m), dtype=complex)
    for p in range(grid.npts):
        for i in range(grid.m):
            E[p * dim + i, p * grid.m + i] = 1.0
    return E


def mean_zero_scalar_basis(grid):
    """Orthonormal basis (columns) of mean-zero m-component scalar fields."""
    xi = grid.modes
    nonzero = np.flatnonzero(np.sum(xi**2, axis=1) > 0)
    phases = np.exp(1j * grid.points @ xi[nonzero].T) / np.sqrt(grid.npts)
    if grid.m == 1:
        return phases
    return np.kron(phases, np.eye(grid.m))


def _embed_scalar(grid, h):
    h = np.asarray(h, dtype=complex).reshape(grid.npts, grid.m)
    return GridField.from_scalar(grid, h)


def double_layer_t(fieldA, t, h):
    """Double layer potential at height t > 0 applied to boundary data h."""
    if t <= 0:
        raise ValueError("height t must be positive")
    bundle = operator_bundle(fieldA)
    split = bundle.split_BD
    v = split.apply_weights(split.semigroup_weights("+", t), _embed_scalar(fieldA.grid, h).flat())
    return v.reshape(fieldA.grid.npts, fieldA.grid.dim_component)[:, : fieldA.grid.m]


def double_layer_slice(fieldA, t, h) -> SolutionSlice:
    """Double layer value and conormal gradient at one height."""
    grid = fieldA.grid
    bundle = operator_bundle(fieldA)
    split = bundle.split_BD
    vflat = split.apply_weights(split.semigroup_weights("+", t), _embed_scalar(grid, h).flat())
    v = GridField(grid, vflat.reshape(grid.npts, grid.dim_component))
    u = v.perp
    # u = +v_perp, so its conormal gradient is -Dv
    f = GridField(grid, -(bundle.D.matrix @ vflat).reshape(v.values.shape))
    return SolutionSlice(t=t, u=u, conormal=f)


def double_layer_boundary(fieldA):
    """Strong boundary limit of the double layer as a dense matrix on scalars."""
    grid = fieldA.grid
    bundle = operator_bundle(fieldA)
    split = bundle.split_BD
    E = scalar_embedding_matrix(grid)
    cols = split.apply_weights(split.right_mask.astype(complex), E)
    dim = grid.dim_component
    rows = cols.reshape(grid.npts, dim, -1)[:, : grid.m, :].reshape(
        grid.npts * grid.m, -1
    )
    return rows


def neumann_boundary(fieldA):
    """Boundary operator of the Neumann ansatz: h -> (E+ [h,0])_perp."""
    grid = fieldA.grid
    bundle = operator_bundle(fieldA)
    split = bundle.split_DB
    E = scalar_embedding_matrix(grid)
    cols = split.apply_weights(split.right_mask.astype(complex), E)
    dim = grid.dim_component
    return cols.reshape(grid.npts, dim, -1)[:, : grid.m, :].reshape(
        grid.npts * grid.m, -1
    )


def restricted_sigma_min(grid, M):
    """Smallest singular value of a scalar-space operator on mean-zero fields."""
    Q = mean_zero_scalar_basis(grid)
    s = np.linalg.svd(Q.conj().T @ M @ Q, compute_uv=False)
    return float(s[-1])


def _solve_mean_zero(grid, M, rhs_scalar, opname):
    """Solve the mean-zero compression M h = rhs; raises NotInvertible."""
    Q = mean_zero_scalar_basis(grid)
    Mc = Q.conj().T @ M @ Q
    s = np.linalg.svd(Mc, compute_uv=False)
    scale = s[0] if s[0] > 0 else 1.0
    if s[-1] <= INVERTIBILITY_REL_THRESHOLD * scale:
        raise NotInvertible(
            f"{opname} not invertible on mean-zero fields: "
            f"sigma_min = {s[-1]:.3e} (relative {s[-1] / scale:.3e})",
            sigma_min=float(s[-1]),
        )
    rhs = Q.conj().T @ np.asarray(rhs_scalar, dtype=complex).reshape(-1)
    return (Q @ np.linalg.solve(Mc, rhs)).reshape(grid.npts, grid.m)


def single_layer_gradient_t(fieldA, t, h) -> GridField:
    """Conormal gradient of the single layer at height t: e^{-tDB} E+ [h,0]."""
    if t <= 0:
        raise ValueError("height t must be positive")
    grid = fieldA.grid
    bundle = operator_bundle(fieldA)
    split = bundle.split_DB
    out = split.apply_weights(
        split.semigroup_weights("+", t), _embed_scalar(grid, h).flat()
    )
    return GridField(grid, out.reshape(grid.npts, grid.dim_component))


def solve_dirichlet(fieldA, phi, heights):
    """Dirichlet solve via the double layer equation on mean-zero data."""
    grid = fieldA.grid
    Dtil = double_layer_boundary(fieldA)
    h = _solve_mean_zero(grid, Dtil, phi, "double layer operator")
    return [double_layer_slice(fieldA, t, h) for t in heights], h


def solve_neumann(fieldA, phi, heights):
    """Neumann solve via the single layer ansatz on mean-zero data."""
    grid = fieldA.grid
    Neu = neumann_boundary(fieldA)
    h = _solve_mean_zero(grid, Neu, phi, "Neumann boundary operator")
    slices = []
    for t in heights:
        f = single_layer_gradient_t(fieldA, t, h)
        u = antidifferentiate(grid, f.par)
        slices.append(SolutionSlice(t=t, u=u, conormal=f))
    return slices, h


def square_function_norm(fieldA, h, t_quadrature=None, return_details=False):
    """Quadrature of the square function integral, as a ratio to ||h||^2.

    Integrates ||d/dt Dtil_t h||^2 t dt over a log ladder, with the
    derivative computed exactly as -(BD) b_t(BD) on the embedded data.  The
    remainder beyond the last node is bounded through the eigenvalue decay
    of the expansion and added to the reported value.
    """
    grid = fieldA.grid
    if t_quadrature is None:
        t_quadrature = np.geomspace(1e-4 * grid.L, 10 * grid.L, 200)
    t_quadrature = np.asarray(t_quadrature, dtype=float)
    bundle = operator_bundle(fieldA)
    split = bundle.split_BD
    y = split.Vinv @ _embed_scalar(grid, h).flat()
    mask = split.right_mask
    lam = split.eigenvalues[mask]
    y = y[mask]
    # columns of V restricted to the normal components
    Vp = split.V.reshape(grid.npts, grid.dim_component, -1)[:, : grid.m, :]
    Vp = Vp.reshape(grid.npts * grid.m, -1)[:, mask]
    hnorm2 = float(np.linalg.norm(h) ** 2) * grid.cell_volume
    if hnorm2 == 0:
        return 0.0 if not return_details else (0.0, {"tail": 0.0, "values": []})
    vals = np.empty_like(t_quadrature)
    for j, t in enumerate(t_quadrature):
        z = Vp @ (-lam * np.exp(-t * lam) * y)
        vals[j] = np.linalg.norm(z) ** 2 * grid.cell_volume
    # trapezoid in log t of g(t) * t^2
    logt = np.log(t_quadrature)
    integral = _trapezoid(vals * t_quadrature**2, logt)
    # certified tail: ||z(t)|| <= sum_j a_j e^{-mu_j (t - T)} with coefficients
    # frozen at the last node
    T = t_quadrature[-1]
    a = np.abs(y) * np.abs(lam) * np.exp(-T * lam.real) * np.linalg.norm(Vp, axis=0)
    mu = lam.real
    S = mu[:, None] + mu[None, :]
    tail = float(
        np.sum(np.outer(a, a) * (T / S + 1.0 / S**2)) * grid.cell_volume
    )
    ratio = (integral + tail) / hnorm2
    if return_details:
        return ratio, {"tail": tail / hnorm2, "integral": integral / hnorm2}
    return float(ratio)


def nontangential_maximal(slices, params: WhitneyParams):
    """Discrete modified non-tangential maximal function of the slices.

    For each sampled height t the Whitney box collects slice heights in
    (t/c0, c0 t) and grid points within periodic distance c1 t; the value is
    the L2 average (root mean square by the Riemann sum) over the box, and
    the maximal function takes the sup over t.  Constants give exactly 1.
    """
    if not slices:
        raise ValueError("need at least one slice")
    grid = slices[0].conormal.grid
    heights = np.array([s.t for s in slices])
    order = np.argsort(heights)
    heights = heights[order]
    stack = np.stack([np.abs(slices[i].u) ** 2 for i in order])  # (nt, npts, m)
    # local trapezoid weights of the height ladder
    wts = np.zeros_like(heights)
    if len(heights) > 1:
        wts[1:-1] = 0.5 * (heights[2:] - heights[:-2])
        wts[0] = heights[1] - heights[0]
        wts[-1] = heights[-1] - heights[-2]
    else:
        wts[0] = 1.0
    pts = grid.points
    out = np.zeros((grid.npts, grid.m))
    for ref in heights:
        sel = (heights > ref / params.c0) & (heights < ref * params.c0)
        if not np.any(sel):
            continue
        # periodic distances are translation invariant: build the window as a
        # set of index offsets computed once against the first grid point
        if grid.n == 1:
            offs = np.flatnonzero(np.abs(grid.periodic_delta(pts[:, 0] - pts[0, 0])) < params.c1 * ref)
            window = [(np.arange(grid.npts) + o) % grid.npts for o in offs]
        else:
            delta = grid.periodic_delta(pts - pts[0])
            offs = np.flatnonzero(np.linalg.norm(delta, axis=1) < params.c1 * ref)
            N = grid.N
            base = np.arange(grid.npts)
            bx, by = np.divmod(base, N)
            window = []
            for o in offs:
                ox, oy = divmod(int(o), N)
                window.append(((bx + ox) % N) * N + (by + oy) % N)
        ssum = np.zeros((grid.npts, grid.m))
        for idx in window:
            ssum += np.sum(stack[sel][:, idx, :] * wts[sel, None, None], axis=0)
        vol = wts[sel].sum() * len(window)
        out = np.maximum(out, np.sqrt(ssum / vol))
    return out


def kkpt_sweep(kvalues, N=64, L=2 * np.pi, workers=1):
    """Smallest singular values of both boundary operators along a k ladder."""
    from concurrent.futures import ThreadPoolExecutor

    from .coeff import coefficient_field_from_config
    from .torus import TorusGrid

    grid = TorusGrid(n=1, N=N, L=L, m=1)

    def one(k):
        fld = coefficient_field_from_config(grid, {"family": "kkpt", "k": float(k)})
        dl = restricted_sigma_min(grid, double_layer_boundary(fld))
        ne = restricted_sigma_min(grid, neumann_boundary(fld))
        return {"k": float(k), "sigma_min_dlp": dl, "sigma_min_neumann": ne}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, kvalues))
    else:
        rows = [one(k) for k in kvalues]
    return rows


def coefficient_stability(fieldA, fieldA0):
    """Lipschitz ratio of the boundary double layer against the coefficients."""
    diff = fieldA.samples - fieldA0.samples
    denom = float(np.max(np.linalg.norm(diff, ord=2, axis=(1, 2))))
    if denom <= 1e-14:
        return 0.0
    grid = fieldA.grid
    Q = mean_zero_scalar_basis(grid)
    MA = Q.conj().T @ double_layer_boundary(fieldA) @ Q
    M0 = Q.conj().T @ double_layer_boundary(fieldA0) @ Q
    return float(np.linalg.norm(MA - M0, 2) / denom)


def conjugate_system(fieldA, v0: GridField, heights, proj_tol=1e-8):
    """Evolve a conjugate system from v0 in the right BD sector.

    Returns slices with u = -v_perp and conormal f = Dv; the reconstruction
    identity grad_par u = f_par is checked spectrally and stored on each
    slice as ``gradient_residual``.
    """
    grid = fieldA.grid
    bundle = operator_bundle(fieldA)
    split = bundle.split_BD
    proj = split.apply_weights(split.right_mask.astype(complex), v0.flat())
    v0n = v0.norm()
    if v0n > 0 and np.linalg.norm(proj - v0.flat()) * np.sqrt(grid.cell_volume) > proj_tol * v0n:
        raise ValueError("v0 is not in the right spectral subspace of BD")
    slices = []
    for t in heights:
        if t < 0:
            raise SideMismatch("conjugate systems evolve at nonnegative heights")
        vflat = split.apply_weights(split.semigroup_weights("+", t), v0.flat())
        v = GridField(grid, vflat.reshape(grid.npts, grid.dim_component))
        u = -v.perp
        f = GridField(grid, (bundle.D.matrix @ vflat).reshape(v.values.shape))
        sl = SolutionSlice(t=t, u=u, conormal=f)
        gres = tangential_gradient(grid, u) - f.par
        sl.gradient_residual = float(np.linalg.norm(gres)) * np.sqrt(grid.cell_volume)
        slices.append(sl)
    return slices
