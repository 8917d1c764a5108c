"""Configuration-driven experiment runner.

Usage::

    dtnlab <kind> [--config run.ini] [--out DIR] [--workers N] [--seed S]

The config is an INI file with an ``[experiment]`` section (common fields)
and one optional section named after the experiment kind.  Every run writes
``manifest.json`` next to its CSV outputs.  Exit status: 0 pass, 1 numerical
failure or failed check, 2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np
from scipy.special import iv, ivp

from .constants import ConstantsLedger, recursion_bound
from .dtn import assemble_dtn, fourier_rayleigh_quotients, operator_norm, save_dtn
from .fem import EigenvalueError, solve_dirichlet
from .geometry import GeometryError, build_grid_partition, chain_to
from .greens import SourcePlacementError
from .inverse import (
    ForwardMap,
    InverseError,
    ReconstructionProblem,
    add_operator_noise,
    estimate_lipschitz_constant,
    reconstruct,
    rondi_lower_bound,
    write_records,
)
from .mesh import MeshError, make_mesh
from .probe import ProbeError, alessandrini_gap, interface_blowup_scan, make_probe, three_spheres_check

KINDS = (
    "dtn_spectrum",
    "alessandrini",
    "blowup_scan",
    "three_spheres",
    "reconstruct",
    "stability_sweep",
    "bounds_calc",
)

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

NUMERICAL_ERRORS = (EigenvalueError, InverseError, ProbeError, SourcePlacementError, MeshError, GeometryError)


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


# per-kind defaults; every value is a string as it would appear in the INI file
DEFAULTS = {
    "dtn_spectrum": {"radius": "1.0", "sides": "128", "potential": "0", "modes": "8", "tol": "0.02"},
    "alessandrini": {
        "side_cells": "2",
        "perturbed_cell": "1",
        "dq": "0.5",
        "y": "0.22,-0.05",
        "z": "0.28,-0.05",
        "refine_radius": "0.02",
        "tol": "0.05",
    },
    "blowup_scan": {"side_cells": "2", "k": "2", "perturbed_cell": "1", "dq": "0.5", "exponents": "3,4,5,6"},
    "three_spheres": {
        "field": "cubic",
        "center": "0.5,0.5",
        "radii": "0.05,0.2,0.4",
        "mode": "Linf",
        "exponent": "hadamard",
        "potential": "1+1j",
        "low": "0.98",
        "high": "1.05",
    },
    "reconstruct": {
        "domain": "disk",
        "side_cells": "2",
        "truth": "0.7+0.1j,1.3-0.05j,0.9,1.2+0.2j",
        "initial": "1",
        "noise": "0",
        "method": "gauss_newton",
        "max_iter": "50",
        "tol": "1e-8",
    },
    "stability_sweep": {"domain": "disk", "side_cells": "2", "sampling": "exhaustive_lattice", "budget": "10000"},
    "bounds_calc": {"n": "2", "K": "1", "N": "8", "C": "1", "mode": "n3", "M_max": "5"},
}

# experiment kinds whose geometry is fixed by the experiment itself
_MESHLESS = ("bounds_calc",)


@dataclass
class ExperimentConfig:
    kind: str
    h: float = 0.05
    seed: int = 0
    workers: int = 1
    out: str = "out"
    check: bool = False
    refine: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def validate(self) -> "ExperimentConfig":
        if self.kind not in KINDS:
            raise ConfigError(f"experiment.kind: unknown kind {self.kind!r}")
        if not (math.isfinite(self.h) and self.h > 0):
            raise ConfigError(f"experiment.h: must be positive, got {self.h}")
        if self.workers < 1:
            raise ConfigError("experiment.workers: must be at least 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("experiment.seed: must be an unsigned 64-bit integer")
        for i, (center, radius) in enumerate(self.refine):
            if not radius > 0:
                raise ConfigError(f"experiment.refine[{i}]: radius must be positive")
        unknown = set(self.params) - set(DEFAULTS[self.kind])
        if unknown:
            raise ConfigError(f"{self.kind}.{sorted(unknown)[0]}: unknown field")
        return self

    def get(self, key: str) -> str:
        return self.params.get(key, DEFAULTS[self.kind][key])

    def number(self, key: str, cast=float, positive: bool = False):
        try:
            value = cast(self.get(key))
        except ValueError as exc:
            raise ConfigError(f"{self.kind}.{key}: {exc}") from None
        if positive and not value > 0:
            raise ConfigError(f"{self.kind}.{key}: must be positive, got {value}")
        return value

    def vector(self, key: str, cast=float) -> np.ndarray:
        try:
            return np.array([cast(v.strip().replace(" ", "")) for v in self.get(key).split(",") if v.strip()])
        except ValueError as exc:
            raise ConfigError(f"{self.kind}.{key}: {exc}") from None

    def echo(self) -> dict:
        d = asdict(self)
        d["params"] = {k: self.get(k) for k in DEFAULTS[self.kind]}
        return d


def load_config(path: str | Path | None, kind: str) -> ExperimentConfig:
    """Read an INI file; missing sections fall back to defaults."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config: file {path} not found")
        parser.read(path)
    exp = parser["experiment"] if parser.has_section("experiment") else {}
    file_kind = exp.get("kind", kind)
    if file_kind != kind:
        raise ConfigError(f"experiment.kind: config is for {file_kind!r}, command is {kind!r}")
    try:
        refine = []
        for item in filter(None, (s.strip() for s in exp.get("refine", "").split(";"))):
            x, y, r = (float(v) for v in item.split(","))
            refine.append(((x, y), r))
        cfg = ExperimentConfig(
            kind=kind,
            h=float(exp.get("h", 0.05)),
            seed=int(exp.get("seed", 0)),
            workers=int(exp.get("workers", 1)),
            out=exp.get("out", "out"),
            check=exp.get("check", "false").strip().lower() in ("1", "true", "yes", "on"),
            refine=refine,
            params=dict(parser[kind]) if parser.has_section(kind) else {},
        )
    except ValueError as exc:
        raise ConfigError(f"experiment: {exc}") from None
    return cfg


@dataclass
class RunManifest:
    config: dict
    code_version: str
    status: str = "running"
    passed: bool | None = None
    mesh: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    outputs: list = field(default_factory=list)
    error: str | None = None

    def write(self, directory: Path) -> None:
        with open(directory / "manifest.json", "w") as fh:
            json.dump(asdict(self), fh, indent=2, default=_json_default)
            fh.write("\n")


def _json_default(obj):
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def _code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _mesh_stats(mesh) -> dict:
    return {
        "nodes": int(mesh.n_nodes),
        "triangles": int(mesh.n_triangles),
        "h": float(mesh.h),
        "sigma_nodes": int(len(mesh.sigma_nodes)),
    }


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def _write_csv(path: Path, header, rows) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _seed_stream(seed: int, index: int) -> np.random.Generator:
    """Independent generator for task ``index``, stable under any scheduling."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _ledger(partition, N: int, M: int = 1) -> dict:
    led = ConstantsLedger(r0=partition.r0, L=partition.L, A=partition.A, N=N, M=M)
    led.sample_tau()
    return led.to_dict()


# ---------------------------------------------------------------------------
# experiments; each returns (passed, results) and fills manifest.mesh/constants


def _run_dtn_spectrum(cfg: ExperimentConfig, out: Path, manifest: RunManifest):
    c = cfg.number("potential")
    if c < 0:
        raise ConfigError("dtn_spectrum.potential: must be nonnegative")
    modes = np.arange(1, cfg.number("modes", int, positive=True) + 1)
    part = build_grid_partition(
        1, "disk", radius=cfg.number("radius", positive=True), disk_sides=cfg.number("sides", int), background=c
    )
    mesh = make_mesh(part, cfg.h, cfg.refine)
    manifest.mesh = _mesh_stats(mesh)
    manifest.constants = _ledger(part, 1)
    op = assemble_dtn(mesh, np.array([c], dtype=complex), workers=cfg.workers)
    rq = fourier_rayleigh_quotients(op, modes)
    radius = float(part.domain_polygon[0, 0])
    if c == 0:
        ref = modes / radius
    else:
        s = math.sqrt(c)
        ref = s * ivp(modes, s * radius) / iv(modes, s * radius)
    rel = np.abs(rq - ref) / np.abs(ref)
    _write_csv(
        out / "dtn_spectrum.csv",
        ["k", "rayleigh_quotient", "reference", "rel_error"],
        [[int(k), _fmt(a), _fmt(b), _fmt(e)] for k, a, b, e in zip(modes, rq, ref, rel)],
    )
    save_dtn(op, out / "dtn_matrix.npz")
    results = {"max_rel_error": float(rel.max()), "dtn_norm": op.norm()}
    return bool(rel.max() <= cfg.number("tol")), results


def _square_probe(cfg, refine_points=()):
    n = cfg.number("side_cells", int, positive=True)
    part = build_grid_partition(n, "unit_square")
    cell = cfg.number("perturbed_cell", int)
    if not 0 <= cell < part.n_cells:
        raise ConfigError(f"{cfg.kind}.perturbed_cell: must lie in [0, {part.n_cells})")
    q1 = np.ones(part.n_cells, dtype=complex)
    q2 = q1.copy()
    q2[cell] += cfg.number("dq")
    return part, q1, q2, cell


def _run_alessandrini(cfg: ExperimentConfig, out: Path, manifest: RunManifest):
    y, z = cfg.vector("y"), cfg.vector("z")
    part, q1, q2, _ = _square_probe(cfg)
    rr = cfg.number("refine_radius", positive=True)
    mesh = make_mesh(part, cfg.h, [(y, rr), (z, rr), *cfg.refine])
    manifest.mesh = _mesh_stats(mesh)
    manifest.constants = _ledger(part, part.n_cells)
    res = alessandrini_gap(make_probe(mesh, q1, q2), y, z)
    v, b = res.volume_side, res.boundary_side
    _write_csv(
        out / "alessandrini.csv",
        ["h", "volume_re", "volume_im", "boundary_re", "boundary_im", "relative_gap"],
        [[_fmt(mesh.h), _fmt(v.real), _fmt(v.imag), _fmt(b.real), _fmt(b.imag), _fmt(res.relative_gap)]],
    )
    results = {"volume_side": v, "boundary_side": b, "relative_gap": res.relative_gap}
    return bool(res.relative_gap <= cfg.number("tol")), results


def _run_blowup_scan(cfg: ExperimentConfig, out: Path, manifest: RunManifest):
    part, q1, q2, cell = _square_probe(cfg)
    k = cfg.number("k", int)
    chain = chain_to(part, cell)
    if not 2 <= k <= len(chain):
        raise ConfigError(f"blowup_scan.k: must lie in [2, {len(chain)}] for the chain {chain.indices}")
    radii = part.r1 * 2.0 ** -cfg.vector("exponents")
    point = chain.crossing_points[k - 2]
    mesh = make_mesh(part, cfg.h, [(point, 2.5 * part.r1), *cfg.refine])
    manifest.mesh = _mesh_stats(mesh)
    manifest.constants = _ledger(part, part.n_cells, len(chain))
    probe = make_probe(mesh, q1, q2, target=cell)
    scan = interface_blowup_scan(probe, k, radii, out / "blowup_scan.csv")
    values = np.asarray(scan.values)
    monotone = bool(np.all(np.diff(values) > 0)) if len(values) > 1 else False
    results = {
        "slope": scan.slope,
        "intercept": scan.intercept,
        "r_squared": scan.r_squared,
        "monotone": monotone,
        "skipped": list(scan.skipped),
    }
    return bool(monotone and scan.slope > 0), results


def _run_three_spheres(cfg: ExperimentConfig, out: Path, manifest: RunManifest):
    center = cfg.vector("center")
    r1, r2, r3 = cfg.vector("radii")
    kind = cfg.get("field")
    if kind == "cubic":
        field_fn = lambda p: ((p[:, 0] - center[0]) + 1j * (p[:, 1] - center[1])) ** 3  # noqa: E731
        field_fn_re = lambda p: field_fn(p).real  # noqa: E731
        evaluate = field_fn_re
    elif kind == "fem":
        q = complex(cfg.get("potential").replace(" ", ""))
        part = build_grid_partition(1, "unit_square")
        mesh = make_mesh(part, cfg.h, cfg.refine, extension=False)
        manifest.mesh = _mesh_stats(mesh)
        manifest.constants = _ledger(part, 1)
        evaluate = solve_dirichlet(mesh, np.array([q]), lambda p: np.exp(p[:, 0]) * np.cos(2 * p[:, 1])).evaluate
    else:
        raise ConfigError("three_spheres.field: must be 'cubic' or 'fem'")
    res = three_spheres_check(evaluate, center, r1, r2, r3, cfg.get("mode"), cfg.get("exponent"))
    _write_csv(
        out / "three_spheres.csv",
        ["mode", "norm_rho1", "norm_rho2", "norm_rho3", "exponent", "lhs", "rhs", "Q"],
        [[cfg.get("mode"), *map(_fmt, res.norms), _fmt(res.exponent), _fmt(res.lhs), _fmt(res.rhs), _fmt(res.Q)]],
    )
    passed = cfg.number("low") <= res.Q <= cfg.number("high")
    return bool(passed), {"Q": res.Q, "exponent": res.exponent}


def _inverse_mesh(cfg: ExperimentConfig, manifest: RunManifest):
    n = cfg.number("side_cells", int, positive=True)
    domain = cfg.get("domain")
    if domain not in ("disk", "unit_square"):
        raise ConfigError(f"{cfg.kind}.domain: must be 'disk' or 'unit_square'")
    part = build_grid_partition(n, domain)
    mesh = make_mesh(part, cfg.h, cfg.refine, extension=False)
    manifest.mesh = _mesh_stats(mesh)
    manifest.constants = _ledger(part, part.n_cells)
    return part, mesh


def _run_reconstruct(cfg: ExperimentConfig, out: Path, manifest: RunManifest):
    part, mesh = _inverse_mesh(cfg, manifest)
    truth = cfg.vector("truth", complex)
    if len(truth) != part.n_cells:
        raise ConfigError(f"reconstruct.truth: needs {part.n_cells} values, got {len(truth)}")
    initial = cfg.vector("initial", complex)
    initial = np.full(part.n_cells, initial[0]) if len(initial) == 1 else initial
    if len(initial) != part.n_cells:
        raise ConfigError(f"reconstruct.initial: needs 1 or {part.n_cells} values")
    noise = cfg.number("noise")
    if noise < 0:
        raise ConfigError("reconstruct.noise: must be nonnegative")
    method = cfg.get("method")
    if method not in ("gauss_newton", "landweber"):
        raise ConfigError("reconstruct.method: must be 'gauss_newton' or 'landweber'")
    fm = ForwardMap(mesh, workers=cfg.workers)
    data = fm(truth)
    if noise > 0:
        data = add_operator_noise(data, noise, _seed_stream(cfg.seed, 0))
    problem = ReconstructionProblem(
        fm, data, initial, noise_level=noise, max_iter=cfg.number("max_iter", int, positive=True), truth=truth
    )
    result = reconstruct(problem, method)
    result.write_trace(out / "trace.csv")
    err = np.abs(result.estimate - truth)
    _write_csv(
        out / "estimate.csv",
        ["cell", "truth_re", "truth_im", "estimate_re", "estimate_im", "abs_error"],
        [
            [j, _fmt(t.real), _fmt(t.imag), _fmt(e.real), _fmt(e.imag), _fmt(a)]
            for j, (t, e, a) in enumerate(zip(truth, result.estimate, err))
        ],
    )
    results = {
        "max_error": float(err.max()),
        "iterations": len(result.trace) - 1,
        "converged": result.converged,
        "reason": result.reason,
        "data_noise_norm": operator_norm(data.matrix - fm(truth).matrix, fm.basis),
    }
    return bool(result.converged and err.max() <= cfg.number("tol")), results


def _run_stability_sweep(cfg: ExperimentConfig, out: Path, manifest: RunManifest):
    part, mesh = _inverse_mesh(cfg, manifest)
    sampling = cfg.get("sampling")
    if sampling not in ("exhaustive_lattice", "random"):
        raise ConfigError("stability_sweep.sampling: must be 'exhaustive_lattice' or 'random'")
    fm = ForwardMap(mesh)
    est = estimate_lipschitz_constant(
        fm, sampling, cfg.number("budget", int, positive=True), rng=_seed_stream(cfg.seed, 0), workers=cfg.workers
    )
    write_records(est.records, out / "stability_records.csv", seed=cfg.seed)
    bound = rondi_lower_bound(part.n_cells, 2, 1.0)
    _write_csv(
        out / "stability_summary.csv",
        ["N", "C_est", "complete", "pairs", "rondi_bound_K1_nonphysical"],
        [[part.n_cells, _fmt(est.C_est), int(est.complete), len(est.records), _fmt(bound.bound)]],
    )
    results = {"C_est": est.C_est, "complete": est.complete, "pairs": len(est.records), "rondi_bound": bound.bound}
    return True, results


def _run_bounds_calc(cfg: ExperimentConfig, out: Path, manifest: RunManifest):
    n = cfg.number("n", int)
    K = cfg.number("K", positive=True)
    N = cfg.number("N", positive=True)
    C = cfg.number("C", positive=True)
    M_max = cfg.number("M_max", int, positive=True)
    mode = cfg.get("mode")
    bound = rondi_lower_bound(N, n, K)
    rows = []
    for M in range(1, M_max + 1):
        t = recursion_bound(M, C, mode, n if mode == "n_ge5" else None)
        rows.append([M, t.height, _fmt(t.top)])
    _write_csv(out / "recursion_bound.csv", ["M", "tower_height", "tower_top"], rows)
    manifest.constants = {"note": "K is not given numerically by the theory; K = 1 is a non-physical default"}
    results = {"rondi_lower_bound": {"bound": bound.bound, "eps0": bound.eps0, "K1": bound.K1}}
    return True, results


RUNNERS = {
    "dtn_spectrum": _run_dtn_spectrum,
    "alessandrini": _run_alessandrini,
    "blowup_scan": _run_blowup_scan,
    "three_spheres": _run_three_spheres,
    "reconstruct": _run_reconstruct,
    "stability_sweep": _run_stability_sweep,
    "bounds_calc": _run_bounds_calc,
}


def _inventory(out: Path) -> list:
    files = []
    for p in sorted(out.iterdir()):
        if p.name == "manifest.json" or not p.is_file():
            continue
        files.append({"file": p.name, "sha256": hashlib.sha256(p.read_bytes()).hexdigest()})
    return files


def run(config: ExperimentConfig) -> RunManifest:
    """Validate, write the initial manifest, run the experiment and finalize the manifest.

    Numerical failures are recorded in the manifest (status ``failed``) and
    re-raised; configuration errors raise before anything is written.
    """
    config.validate()
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config=config.echo(), code_version=_code_version())
    manifest.write(out)
    start = time.perf_counter()
    try:
        passed, results = RUNNERS[config.kind](config, out, manifest)
    except NUMERICAL_ERRORS as exc:
        manifest.status, manifest.error = "failed", f"{type(exc).__name__}: {exc}"
        manifest.wall_clock = time.perf_counter() - start
        manifest.outputs = _inventory(out)
        manifest.write(out)
        raise
    manifest.results = results
    manifest.passed = passed
    manifest.status = "finished"
    manifest.wall_clock = time.perf_counter() - start
    manifest.outputs = _inventory(out)
    manifest.write(out)
    return manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtnlab", description="DtN map experiments for piecewise constant potentials")
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind)
        p.add_argument("--config", help="INI experiment configuration")
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, help="parallel sub-tasks")
        p.add_argument("--seed", type=int, help="unsigned 64-bit seed")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.kind)
        if args.out is not None:
            cfg.out = args.out
        if args.workers is not None:
            cfg.workers = args.workers
        if args.seed is not None:
            cfg.seed = args.seed
        cfg.validate()
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        manifest = run(cfg)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(json.dumps({"kind": cfg.kind, "passed": manifest.passed, "results": manifest.results}, default=_json_default))
    if cfg.check and not manifest.passed:
        return EXIT_FAIL
    return EXIT_PASS


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
