"""Experiment orchestration: config validation, tasks, reports, baselines.

A run takes a JSON config, dispatches to the library, and writes a report
bundle: ``summary.json`` plus CSV tables.  Files are staged in a temporary
directory inside the output root and moved into place only after the whole
task finished, with ``summary.json`` written last; an interrupted run leaves
no partial bundle behind.  Exit semantics for the CLI: 0 on pass, 1 when a
hard invariant fails (a degenerate sweep point is data, not failure), 2 on
config errors.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import shutil
import tempfile

import numpy as np

from . import __version__
from .coeff import coefficient_field_from_config
from .torus import GridField, TorusGrid, garding_check

TASKS = (
    "verify",
    "dirichlet",
    "neumann",
    "kkpt-sweep",
    "estimates",
    "fundsol",
    "tdep-fundsol",
)


class ConfigInvalid(Exception):
    """Config failed validation; message lists field-level errors."""


class BaselineMismatch(Exception):
    """Baseline bundle belongs to a different config."""


def _require(cond, errors, msg):
    if not cond:
        errors.append(msg)


class ExperimentConfig:
    """Validated experiment description."""

    def __init__(self, raw):
        errors = []
        if not isinstance(raw, dict):
            raise ConfigInvalid("config must be a JSON object")
        self.raw = raw
        self.task = raw.get("task")
        _require(self.task in TASKS, errors, f"task: must be one of {TASKS}")
        grid = raw.get("grid", {})
        _require(isinstance(grid, dict), errors, "grid: must be an object")
        if isinstance(grid, dict):
            n = grid.get("n", 1)
            N = grid.get("N", 64)
            L = grid.get("L", 2 * np.pi)
            m = grid.get("m", 1)
            _require(n in (1, 2), errors, "grid.n: must be 1 or 2")
            _require(
                isinstance(N, int) and N >= 8 and (N & (N - 1)) == 0,
                errors,
                "grid.N: must be a power of two >= 8",
            )
            _require(
                isinstance(L, (int, float)) and L > 0, errors, "grid.L: must be > 0"
            )
            _require(isinstance(m, int) and m >= 1, errors, "grid.m: must be >= 1")
        self.coefficients = raw.get("coefficients", {"family": "identity"})
        _require(
            isinstance(self.coefficients, dict), errors, "coefficients: object"
        )
        self.seed = raw.get("seed", 0)
        _require(isinstance(self.seed, int), errors, "seed: must be an integer")
        self.tolerances = raw.get("tolerances", {})
        _require(isinstance(self.tolerances, dict), errors, "tolerances: object")
        for key, val in self.tolerances.items():
            _require(
                isinstance(val, (int, float)) and val > 0,
                errors,
                f"tolerances.{key}: must be positive",
            )
        if self.task == "kkpt-sweep":
            kvals = raw.get("k", [0.0, 0.25, 0.5, 0.75, 0.9, 0.99])
            _require(
                isinstance(kvals, list) and all(isinstance(k, (int, float)) for k in kvals),
                errors,
                "k: must be a list of numbers",
            )
            self.kvalues = [float(k) for k in kvals] if isinstance(kvals, list) else []
        if self.task in ("dirichlet", "neumann"):
            hts = raw.get("heights", [0.05, 0.1, 0.2, 0.5, 1.0])
            _require(
                isinstance(hts, list)
                and all(isinstance(t, (int, float)) and t > 0 for t in hts),
                errors,
                "heights: must be a list of positive numbers",
            )
            self.heights = [float(t) for t in hts] if isinstance(hts, list) else []
        if self.task in ("fundsol", "tdep-fundsol"):
            self.pole = raw.get("pole", None)
            self.radii = raw.get("radii", None)
            self.tmax = raw.get("tmax", None)
        if errors:
            raise ConfigInvalid("; ".join(errors))
        if isinstance(grid, dict) and not errors:
            self.grid = TorusGrid(n=grid.get("n", 1), N=grid.get("N", 64), L=float(grid.get("L", 2 * np.pi)), m=grid.get("m", 1))

    def hash(self):
        """Hash of the canonical config, excluding output locations."""
        stripped = {k: v for k, v in self.raw.items() if k not in ("out",)}
        blob = json.dumps(stripped, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigInvalid(f"cannot read config: {exc}") from exc
        return cls(raw)


class ReportBundle:
    """In-memory report: one summary dict plus named CSV tables."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.summary = {
            "task": config.task,
            "config_hash": config.hash(),
            "code_version": __version__,
            "invariants": {},
            "constants": {},
        }
        self.tables = {}

    def record(self, name, passed, value=None, tolerance=None):
        entry = {"pass": bool(passed)}
        if value is not None:
            entry["value"] = float(value)
        if tolerance is not None:
            entry["tolerance"] = float(tolerance)
        self.summary["invariants"][name] = entry

    def constant(self, name, value):
        self.summary["constants"][name] = float(value)

    def add_table(self, name, header, rows):
        self.tables[name] = (list(header), [list(r) for r in rows])

    @property
    def passed(self):
        return all(v["pass"] for v in self.summary["invariants"].values())

    def write(self, out_dir):
        """Stage and atomically publish the bundle; summary.json lands last."""
        os.makedirs(out_dir, exist_ok=True)
        stage = tempfile.mkdtemp(prefix=".stage-", dir=out_dir)
        try:
            for name, (header, rows) in self.tables.items():
                with open(os.path.join(stage, f"{name}.csv"), "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(header)
                    for row in rows:
                        w.writerow([_fmt(v) for v in row])
            self.summary["pass"] = self.passed
            with open(os.path.join(stage, "summary.json"), "w") as fh:
                json.dump(self.summary, fh, indent=2, sort_keys=True)
            for name in sorted(os.listdir(stage)):
                if name != "summary.json":
                    os.replace(os.path.join(stage, name), os.path.join(out_dir, name))
            os.replace(
                os.path.join(stage, "summary.json"),
                os.path.join(out_dir, "summary.json"),
            )
        finally:
            shutil.rmtree(stage, ignore_errors=True)
        return out_dir


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    return v


def _verify_task(config, bundle: ReportBundle):
    from . import coeff as coeffmod
    from . import funcalc, layers
    from .torus import assemble_D, curl_free_projection, reflection_signs

    grid = config.grid
    field = coefficient_field_from_config(grid, config.coefficients)
    tol = config.tolerances

    kappa, omega = field.bounds()
    bundle.constant("kappa", kappa)
    bundle.constant("omega", omega)
    bundle.record("accretive", kappa > 0, kappa)

    D = assemble_D(grid)
    sym = np.linalg.norm(D.matrix - D.matrix.conj().T)
    s = reflection_signs(grid)
    par = np.linalg.norm(s[:, None] * D.matrix * s[None, :] + D.matrix)
    bundle.record("D_selfadjoint", sym <= 1e-12, sym, 1e-12)
    bundle.record("NDN_antisymmetry", par <= 1e-12, par, 1e-12)

    P = curl_free_projection(grid)
    idem = np.linalg.norm(P.matrix @ P.matrix - P.matrix)
    comm = np.linalg.norm(P.matrix @ D.matrix - D.matrix @ P.matrix)
    bundle.record("projection_idempotent", idem <= 1e-10, idem, 1e-10)
    bundle.record("projection_commutes_D", comm <= 1e-9, comm, 1e-9)

    worst = garding_check(field, trials=12, seed=config.seed)
    bundle.constant("garding_worst_ratio", worst)
    bundle.record("garding", worst >= kappa - 1e-10, worst)

    b = funcalc.operator_bundle(field)
    sBD, sDB = b.split_BD, b.split_DB
    eye = np.eye(grid.total_dim)
    compl = np.linalg.norm(
        sBD.right_proj.matrix + sBD.left_proj.matrix + sBD.kernel_proj.matrix - eye
    )
    bundle.record("BD_split_complementarity", compl <= 1e-10, compl, 1e-10)
    inter = np.linalg.norm(
        b.MB.matrix @ sDB.right_proj.matrix - sBD.right_proj.matrix @ b.MB.matrix, 2
    )
    bundle.record("intertwining_B", inter <= 1e-9, inter, 1e-9)
    sector = max(sBD.omega_observed, sDB.omega_observed)
    bundle.constant("omega_observed", sector)
    bundle.record("sector_containment", sector <= omega + 1e-6, sector)

    Dtil = layers.double_layer_boundary(field)
    sigma = layers.restricted_sigma_min(grid, Dtil)
    bundle.constant("sigma_min_dlp", sigma)
    tol_dlp = tol.get("dlp_identity", 1e-9)
    if config.coefficients.get("family", "identity") == "identity":
        Q = layers.mean_zero_scalar_basis(grid)
        dev = np.linalg.norm(
            Q.conj().T @ Dtil @ Q - 0.5 * np.eye(Q.shape[1]), 2
        )
        bundle.record("dlp_is_half_identity", dev <= tol_dlp, dev, tol_dlp)
    return bundle


def _kkpt_task(config, bundle):
    from .layers import kkpt_sweep

    rows = kkpt_sweep(config.kvalues, N=config.grid.N, L=config.grid.L)
    bundle.add_table(
        "kkpt_sweep",
        ["k", "sigma_min_dlp", "sigma_min_neumann"],
        [[r["k"], r["sigma_min_dlp"], r["sigma_min_neumann"]] for r in rows],
    )
    sig = [r["sigma_min_dlp"] for r in rows]
    bundle.record("kkpt_monotone", all(a > b for a, b in zip(sig, sig[1:])))
    for r in rows:
        bundle.constant(f"sigma_min_dlp_k{r['k']}", r["sigma_min_dlp"])
    return bundle


def _bvp_task(config, bundle):
    from . import layers

    grid = config.grid
    field = coefficient_field_from_config(grid, config.coefficients)
    rng = np.random.default_rng(config.seed)
    phi = rng.standard_normal((grid.npts, grid.m))
    phi = phi - phi.mean(axis=0, keepdims=True)
    heights = sorted(config.heights)
    if config.task == "dirichlet":
        slices, h = layers.solve_dirichlet(field, phi, heights)
        Q = layers.mean_zero_scalar_basis(grid)
        resid = np.linalg.norm(
            Q.conj().T @ (layers.double_layer_boundary(field) @ h.reshape(-1) - phi.reshape(-1))
        ) / max(np.linalg.norm(phi), 1e-300)
        bundle.record("boundary_residual", resid <= 1e-8, resid, 1e-8)
        trace = [
            float(np.linalg.norm(s.u - phi) / np.linalg.norm(phi)) for s in slices
        ]
        bundle.add_table(
            "trace_convergence",
            ["t", "relative_trace_error"],
            list(zip([s.t for s in slices], trace)),
        )
        bundle.record("trace_decreasing", trace[0] <= trace[-1] + 1e-12)
    else:
        slices, h = layers.solve_neumann(field, phi, heights)
        Q = layers.mean_zero_scalar_basis(grid)
        resid = np.linalg.norm(
            Q.conj().T @ (layers.neumann_boundary(field) @ h.reshape(-1) - phi.reshape(-1))
        ) / max(np.linalg.norm(phi), 1e-300)
        bundle.record("boundary_residual", resid <= 1e-8, resid, 1e-8)
        trace = [
            float(
                np.linalg.norm(s.conormal.perp - phi) / np.linalg.norm(phi)
            )
            for s in slices
        ]
        bundle.add_table(
            "conormal_trace",
            ["t", "relative_trace_error"],
            list(zip([s.t for s in slices], trace)),
        )
    buf = io.StringIO()
    GridField(grid, slices[0].conormal.values).to_csv(buf)
    bundle.tables["first_slice_conormal"] = (
        buf.getvalue().splitlines()[0].split(","),
        [line.split(",") for line in buf.getvalue().splitlines()[1:]],
    )
    return bundle


def _estimates_task(config, bundle):
    from . import layers

    grid = config.grid
    field = coefficient_field_from_config(grid, config.coefficients)
    rng = np.random.default_rng(config.seed)
    h = rng.standard_normal((grid.npts, grid.m))
    h -= h.mean(axis=0, keepdims=True)
    hn = float(np.linalg.norm(h)) * np.sqrt(grid.cell_volume)

    heights = np.geomspace(1e-3 * grid.L, grid.L, 24)
    sup_ratio = 0.0
    slices = []
    for t in heights:
        u = layers.double_layer_t(field, float(t), h)
        nrm = float(np.linalg.norm(u)) * np.sqrt(grid.cell_volume)
        sup_ratio = max(sup_ratio, nrm / hn)
        slices.append(layers.SolutionSlice(t=float(t), u=u, conormal=GridField.zeros(grid)))
    bundle.constant("sup_t_norm_ratio", sup_ratio)

    sq = layers.square_function_norm(field, h)
    bundle.constant("square_function_ratio", sq)

    params = layers.WhitneyParams(t_samples=tuple(heights))
    nt = layers.nontangential_maximal(slices, params)
    nt_ratio = float(np.linalg.norm(nt)) * np.sqrt(grid.cell_volume) / hn
    bundle.constant("nontangential_ratio", nt_ratio)

    bundle.add_table(
        "estimates",
        ["name", "value"],
        [
            ["sup_t_norm_ratio", sup_ratio],
            ["square_function_ratio", sq],
            ["nontangential_ratio", nt_ratio],
        ],
    )
    bundle.record("estimates_finite", np.isfinite([sup_ratio, sq, nt_ratio]).all())
    return bundle


def _fundsol_task(config, bundle):
    from .fundsol import annular_decay, construct_pole_kernel

    grid = config.grid
    field = coefficient_field_from_config(grid, config.coefficients)
    pole = config.pole or [0.0, [grid.L / 2] * grid.n]
    t0 = float(pole[0])
    x0 = np.asarray(pole[1], dtype=float)
    radii = config.radii or [grid.L / 16, grid.L / 8, grid.L / 4]
    hmax = 2 * max(radii)
    hs = np.linspace(-hmax, hmax, 33)
    hs = hs[np.abs(hs - t0) > 1e-9]
    kernel = construct_pole_kernel(field, (t0, x0), hs)
    decay = annular_decay(kernel, radii)
    bundle.add_table(
        "tail_masses",
        ["R", "t", "mass"],
        [[r["R"], r["t"], r["mass"]] for r in decay["tail"]],
    )
    bundle.add_table(
        "solid_masses", ["R", "mass"], [[r["R"], r["mass"]] for r in decay["solid"]]
    )
    bundle.constant("tail_slope", decay["tail_slope"])
    bundle.constant("solid_slope", decay["solid_slope"])
    n = grid.n
    bundle.record("tail_slope_within_band", abs(decay["tail_slope"] + n) <= 0.3)
    bundle.record("solid_slope_within_band", abs(decay["solid_slope"] - (1 - n)) <= 0.3)
    bundle.constant("curl_residual", kernel.curl_residual())
    return bundle


def _tdep_task(config, bundle):
    from .fundsol import base_distributional_residual, tdep_fundamental_solution

    grid = config.grid
    if grid.n != 2:
        raise ConfigInvalid("tdep-fundsol requires grid.n = 2")
    fam = config.coefficients.get("family", "identity")
    eps = float(config.coefficients.get("epsilon", 0.0))
    npts, nm = grid.npts, grid.n * grid.m
    base = np.broadcast_to(np.eye(nm, dtype=complex), (npts, nm, nm)).copy()
    if fam == "identity":
        pass
    elif fam == "scalar_perturbation":
        rng = np.random.default_rng(config.seed)
        pert = rng.standard_normal((npts, nm, nm)) + 1j * rng.standard_normal(
            (npts, nm, nm)
        )
        pert /= np.max(np.abs(np.linalg.eigvals(pert)))
        base += eps * pert
    else:
        raise ConfigInvalid("tdep coefficients: family must be identity or scalar_perturbation")
    dev = float(np.max(np.linalg.norm(base - np.eye(nm), ord=2, axis=(1, 2))))
    if dev > 0.3:
        raise ConfigInvalid("tdep coefficients must stay near real scalar (L-inf < 0.3)")
    x0 = np.asarray(
        (config.pole or [0.0, [grid.L / 2] * grid.n])[1], dtype=float
    )
    tmax = float(config.tmax) if config.tmax else 4.0 * grid.L
    g, info = tdep_fundamental_solution(grid, base, x0, T_max=tmax)
    bundle.constant("tail_bound", info["tail_bound"])
    bundle.constant("g_norm", info["g_norm"])
    dist_resid = base_distributional_residual(grid, base, g, x0)
    bundle.constant("distributional_residual", dist_resid)
    bundle.record("distributional", dist_resid <= 0.1, dist_resid, 0.1)
    radii = [grid.L / 16, grid.L / 8, grid.L / 4]
    x0d = np.linalg.norm(grid.periodic_delta(grid.points - x0[None, :]), axis=1)
    rows = []
    for R in radii:
        sel = (x0d > R) & (x0d < 2 * R)
        rows.append([R, float(np.sum(np.abs(g[sel]) ** 2) * grid.cell_volume)])
    bundle.add_table("annulus_masses", ["R", "mass"], rows)
    slope = float(
        np.polyfit(np.log([r[0] for r in rows]), np.log([r[1] for r in rows]), 1)[0]
    )
    bundle.constant("annulus_slope", slope)
    bundle.record("annulus_slope_flat", abs(slope) <= 0.3, slope, 0.3)
    return bundle


def run(config: ExperimentConfig, out_dir=None) -> ReportBundle:
    """Dispatch one task and optionally publish the bundle."""
    bundle = ReportBundle(config)
    task_fn = {
        "verify": _verify_task,
        "kkpt-sweep": _kkpt_task,
        "dirichlet": _bvp_task,
        "neumann": _bvp_task,
        "estimates": _estimates_task,
        "fundsol": _fundsol_task,
        "tdep-fundsol": _tdep_task,
    }[config.task]
    task_fn(config, bundle)
    if out_dir is not None:
        bundle.write(out_dir)
    return bundle


def regression_compare(bundle_dir, baseline_dir, constant_tol=0.10, slope_tol=0.1):
    """Diff a bundle against a baseline with the same config hash.

    Constants drifting more than ``constant_tol`` (relative) and slopes
    drifting more than ``slope_tol`` (absolute) are flagged.
    """
    with open(os.path.join(bundle_dir, "summary.json")) as fh:
        new = json.load(fh)
    with open(os.path.join(baseline_dir, "summary.json")) as fh:
        old = json.load(fh)
    if new.get("config_hash") != old.get("config_hash"):
        raise BaselineMismatch(
            f"config hash {new.get('config_hash')} != baseline {old.get('config_hash')}"
        )
    diffs = {}
    for name, val in new.get("constants", {}).items():
        ref = old.get("constants", {}).get(name)
        if ref is None:
            diffs[name] = {"status": "new", "value": val}
            continue
        if "slope" in name:
            if abs(val - ref) > slope_tol:
                diffs[name] = {"status": "slope_drift", "value": val, "baseline": ref}
        else:
            denom = max(abs(ref), 1e-300)
            if abs(val - ref) / denom > constant_tol:
                diffs[name] = {"status": "drift", "value": val, "baseline": ref}
    return diffs
