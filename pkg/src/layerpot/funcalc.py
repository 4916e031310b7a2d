"""Functional calculus of the discretized operators DB and BD.

Both operators are bisectorial: their spectrum sits in a double sector around
the real axis plus a kernel cluster at zero.  The calculus is implemented by
dense eigendecomposition with right-eigenvector similarity; the sector
splittings E+/E-, the kernel projection, the semigroups e^{-t Op} and the
boundary function b_t (exponential on the right sector, zero elsewhere) are
all evaluated through the same (V, lambda, V^{-1}) factorization.

Near-degeneracies fail loudly: eigenvalues inside the gap annulus close to
the imaginary axis raise GapViolation, and an ill-conditioned eigenvector
basis raises DefectiveSpectrum.
"""

from __future__ import annotations

import json

import numpy as np
import scipy.linalg

from .torus import DenseOperator, GridField, multiplication_operator, reflection_signs

KERNEL_GAP = 1e-8
GAP_UPPER = 1e-4
EIGENBASIS_COND_LIMIT = 1e10


class DefectiveSpectrum(Exception):
    """Eigenvector basis too ill-conditioned to trust the splitting."""


class GapViolation(Exception):
    """An eigenvalue sits in the kernel gap annulus near the imaginary axis."""


class SideMismatch(Exception):
    """Semigroup evaluated on the growing side of its sector."""


def assemble_DB(field) -> DenseOperator:
    """Dense D * M_B with B the hat-transformed coefficients."""
    from .torus import assemble_D

    D = assemble_D(field.grid)
    MB = multiplication_operator(field.hat_field())
    return DenseOperator(field.grid, D.matrix @ MB.matrix, label=f"DB[{field.label}]")


def assemble_BD(field) -> DenseOperator:
    """Dense M_B * D with B the hat-transformed coefficients."""
    from .torus import assemble_D

    D = assemble_D(field.grid)
    MB = multiplication_operator(field.hat_field())
    return DenseOperator(field.grid, MB.matrix @ D.matrix, label=f"BD[{field.label}]")


def _norm2_estimate(matrix, iterations=20, seed=7):
    """Power-method estimate of the spectral norm."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(matrix.shape[1]) + 1j * rng.standard_normal(matrix.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iterations):
        w = matrix.conj().T @ (matrix @ v)
        est = np.linalg.norm(w) ** 0.5
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
    return float(est)


def _condition_estimate(lu_piv, matrix):
    """1-norm condition estimate from an LU factorization (LAPACK gecon)."""
    gecon = scipy.linalg.get_lapack_funcs(("gecon",), (matrix,))[0]
    anorm = np.linalg.norm(matrix, 1)
    rcond, info = gecon(lu_piv[0], anorm, norm="1")
    if info != 0 or rcond == 0:
        return np.inf
    return 1.0 / rcond


class SpectralSplit:
    """Eigendecomposition of DB or BD partitioned into sectors and kernel.

    Holds the factorization Op = V diag(eigenvalues) V^{-1} together with
    boolean masks for the right sector (Re > gap), left sector (Re < -gap)
    and kernel cluster (|lambda| below the gap threshold), and the observed
    sector angle.
    """

    def __init__(self, op: DenseOperator, kind):
        if kind not in ("DB", "BD"):
            raise ValueError("kind must be 'DB' or 'BD'")
        self.kind = kind
        self.operator_label = op.label or kind
        self.grid = op.grid
        w, V = np.linalg.eig(op.matrix)
        lu_piv = scipy.linalg.lu_factor(V, check_finite=False)
        condV = _condition_estimate(lu_piv, V)
        if condV > EIGENBASIS_COND_LIMIT:
            raise DefectiveSpectrum(
                f"eigenvector condition estimate {condV:.2e} exceeds "
                f"{EIGENBASIS_COND_LIMIT:.0e} for {self.operator_label}"
            )
        Vinv = scipy.linalg.lu_solve(lu_piv, np.eye(V.shape[0], dtype=complex))
        self.op_norm = _norm2_estimate(op.matrix)
        scale = self.op_norm if self.op_norm > 0 else 1.0
        absw = np.abs(w)
        kernel = absw < KERNEL_GAP * scale
        in_annulus = (absw >= KERNEL_GAP * scale) & (absw <= GAP_UPPER * scale)
        near_imag = np.abs(w.real) < absw * np.cos(np.pi / 2 - 1e-3)
        if np.any(in_annulus & near_imag):
            bad = w[in_annulus & near_imag]
            raise GapViolation(
                f"{bad.size} eigenvalue(s) in the gap annulus near the imaginary "
                f"axis for {self.operator_label}, e.g. {bad[0]:.3e}"
            )
        self.eigenvalues = w
        self.V = V
        self.Vinv = Vinv
        self.eigenbasis_cond = condV
        self.kernel_mask = kernel
        self.right_mask = ~kernel & (w.real > 0)
        self.left_mask = ~kernel & (w.real <= 0)
        nz = w[~kernel]
        if nz.size:
            folded = np.where(nz.real >= 0, nz, -nz)
            self.omega_observed = float(np.max(np.abs(np.angle(folded))))
        else:
            self.omega_observed = 0.0

    def _mask(self, which):
        return {
            "+": self.right_mask,
            "-": self.left_mask,
            "right": self.right_mask,
            "left": self.left_mask,
            "kernel": self.kernel_mask,
        }[which]

    def weighted(self, weights):
        """Materialize V diag(weights) V^{-1} as a DenseOperator."""
        M = (self.V * weights[None, :]) @ self.Vinv
        return DenseOperator(self.grid, M, label=f"f({self.operator_label})")

    def apply_weights(self, weights, vec):
        """Apply V diag(weights) V^{-1} to a flat vector or matrix of columns."""
        y = self.Vinv @ vec
        y = weights[:, None] * y if y.ndim > 1 else weights * y
        return self.V @ y

    def projection(self, which) -> DenseOperator:
        P = self.weighted(self._mask(which).astype(complex))
        P.label = f"E{which}[{self.operator_label}]"
        return P

    @property
    def right_proj(self):
        return self.projection("+")

    @property
    def left_proj(self):
        return self.projection("-")

    @property
    def kernel_proj(self):
        return self.projection("kernel")

    def sector_basis(self, which):
        """Orthonormal basis (columns) of the invariant sector subspace."""
        cols = self.V[:, self._mask(which)]
        Q, _ = np.linalg.qr(cols)
        return Q

    def semigroup_weights(self, side, t):
        mask = self._mask(side)
        w = np.zeros_like(self.eigenvalues)
        w[mask] = np.exp(-t * self.eigenvalues[mask])
        return w

    def propagator(self, side, t) -> DenseOperator:
        """e^{-t Op} restricted to one sector (zero on the complement)."""
        if side == "+" and t < 0 or side == "-" and t > 0:
            raise SideMismatch(f"side '{side}' incompatible with t = {t}")
        M = self.weighted(self.semigroup_weights(side, t))
        M.label = f"exp(-{t}*{self.operator_label})E{side}"
        return M

    def diagnostics(self):
        """JSON-ready dump: eigenvalues, sector angle, projection norms, gap."""
        scale = self.op_norm if self.op_norm > 0 else 1.0
        absw = np.abs(self.eigenvalues)
        nz = absw[~self.kernel_mask]
        return {
            "operator": self.operator_label,
            "kind": self.kind,
            "dim": int(self.eigenvalues.size),
            "omega_observed": self.omega_observed,
            "eigenbasis_cond": float(self.eigenbasis_cond),
            "op_norm_estimate": self.op_norm,
            "kernel_dim": int(self.kernel_mask.sum()),
            "right_dim": int(self.right_mask.sum()),
            "left_dim": int(self.left_mask.sum()),
            "gap_ratio": float(nz.min() / scale) if nz.size else None,
            "proj_norm_right": _norm2_estimate(self.right_proj.matrix),
            "proj_norm_left": _norm2_estimate(self.left_proj.matrix),
            "eigenvalues": [[float(z.real), float(z.imag)] for z in self.eigenvalues],
        }

    def diagnostics_json(self):
        return json.dumps(self.diagnostics())


def spectral_split(op: DenseOperator, kind) -> SpectralSplit:
    return SpectralSplit(op, kind)


class Semigroup:
    """Sector semigroup t -> e^{-t Op} E_side for a fixed splitting."""

    def __init__(self, split: SpectralSplit, side):
        if side not in ("+", "-"):
            raise ValueError("side must be '+' or '-'")
        self.split = split
        self.side = side

    def __call__(self, t) -> DenseOperator:
        return self.split.propagator(self.side, t)

    def apply(self, t, f: GridField) -> GridField:
        if self.side == "+" and t < 0 or self.side == "-" and t > 0:
            raise SideMismatch(f"side '{self.side}' incompatible with t = {t}")
        out = self.split.apply_weights(
            self.split.semigroup_weights(self.side, t), f.flat()
        )
        return GridField(f.grid, out.reshape(f.values.shape))


def semigroup_apply(split: SpectralSplit, side, t, f: GridField) -> GridField:
    """e^{-t Op} restricted to the chosen sector, applied to f."""
    return Semigroup(split, side).apply(t, f)


def b_t_of_BD(split: SpectralSplit, t) -> DenseOperator:
    """b_t(BD) = e^{-t BD} Etil+: exponential on the right sector, else zero."""
    if split.kind != "BD":
        raise ValueError("b_t acts on a BD splitting")
    if t <= 0:
        raise ValueError("b_t requires t > 0")
    return split.propagator("+", t)


class OperatorBundle:
    """Lazily built dense operators and splittings for one coefficient field.

    Construction cost is dominated by the eigendecompositions, so bundles are
    cached per field through :func:`operator_bundle`.
    """

    def __init__(self, field):
        self.field = field
        self.grid = field.grid
        self._cache = {}

    def _get(self, key, builder):
        if key not in self._cache:
            self._cache[key] = builder()
        return self._cache[key]

    @property
    def D(self) -> DenseOperator:
        from .torus import assemble_D

        return self._get("D", lambda: assemble_D(self.grid))

    @property
    def MB(self) -> DenseOperator:
        return self._get(
            "MB", lambda: multiplication_operator(self.field.hat_field())
        )

    @property
    def DB(self) -> DenseOperator:
        return self._get(
            "DB",
            lambda: DenseOperator(
                self.grid,
                self.D.matrix @ self.MB.matrix,
                label=f"DB[{self.field.label}]",
            ),
        )

    @property
    def BD(self) -> DenseOperator:
        return self._get(
            "BD",
            lambda: DenseOperator(
                self.grid,
                self.MB.matrix @ self.D.matrix,
                label=f"BD[{self.field.label}]",
            ),
        )

    @property
    def split_DB(self) -> SpectralSplit:
        return self._get("split_DB", lambda: spectral_split(self.DB, "DB"))

    @property
    def split_BD(self) -> SpectralSplit:
        return self._get("split_BD", lambda: spectral_split(self.BD, "BD"))

    def dual_slice_split(self) -> "AdjointSectorCalculus":
        """Calculus of D*Btil, Btil = N B* N, from the BD factorization.

        Uses the exact matrix identity D Btil = -N (BD)* N: eigenvalues are
        -conj(lambda) and the eigenvector matrix is N V^{-*}.  This shares
        the BD eigendecomposition instead of running a second one; the
        equivalence with an independent splitting is covered by tests.
        """
        return self._get("dual_slice", lambda: AdjointSectorCalculus(self.split_BD))


class AdjointSectorCalculus:
    """Sector calculus of D*Btil derived from a BD splitting by adjointness."""

    def __init__(self, split_BD: SpectralSplit):
        s = reflection_signs(split_BD.grid)
        self.grid = split_BD.grid
        self.eigenvalues = -split_BD.eigenvalues.conj()
        self.V = s[:, None] * split_BD.Vinv.conj().T
        self.Vinv = split_BD.V.conj().T * s[None, :]
        self.right_mask = split_BD.left_mask
        self.left_mask = split_BD.right_mask
        self.kernel_mask = split_BD.kernel_mask
        self.operator_label = f"DBtil~adj({split_BD.operator_label})"

    def _mask(self, which):
        return {
            "+": self.right_mask,
            "-": self.left_mask,
            "right": self.right_mask,
            "left": self.left_mask,
            "kernel": self.kernel_mask,
        }[which]

    def sector_basis(self, which):
        Q, _ = np.linalg.qr(self.V[:, self._mask(which)])
        return Q

    def projection(self, which) -> DenseOperator:
        w = self._mask(which).astype(complex)
        return DenseOperator(
            self.grid, (self.V * w[None, :]) @ self.Vinv, label=f"E{which}"
        )

    def propagator(self, side, t) -> DenseOperator:
        if side == "+" and t < 0 or side == "-" and t > 0:
            raise SideMismatch(f"side '{side}' incompatible with t = {t}")
        mask = self._mask(side)
        w = np.zeros_like(self.eigenvalues)
        w[mask] = np.exp(-t * self.eigenvalues[mask])
        return DenseOperator(
            self.grid, (self.V * w[None, :]) @ self.Vinv, label="exp"
        )

    def propagate(self, side, t, vec):
        mask = self._mask(side)
        w = np.zeros_like(self.eigenvalues)
        w[mask] = np.exp(-t * self.eigenvalues[mask])
        if vec.ndim > 1:
            return self.V @ (w[:, None] * (self.Vinv @ vec))
        return self.V @ (w * (self.Vinv @ vec))


_BUNDLES = {}


def operator_bundle(field) -> OperatorBundle:
    """Bundle cache keyed by field identity (fields are immutable)."""
    key = id(field)
    bundle = _BUNDLES.get(key)
    if bundle is None or bundle.field is not field:
        bundle = OperatorBundle(field)
        _BUNDLES[key] = bundle
    return bundle
