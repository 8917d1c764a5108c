"""Recovering the cell values of the potential from DtN data, and empirical
Lipschitz constants of the inverse map."""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dtn import DtnOperator, TraceBasis, assemble_dtn, operator_norm, scaled_matrix, trace_basis, unscale_matrix
from .fem import EigenvalueError, mass_matrix, system
from .mesh import Mesh

LATTICE_VALUES = (0.5, 1.0, 1.5)


class InverseError(RuntimeError):
    pass


class ReconstructionDiverged(InverseError):
    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


# ---------------------------------------------------------------------------
# admissible classes


@dataclass(frozen=True)
class AdmissibleClass:
    """``box``: real values in [1/2, 3/2] on the whole cube; ``grid``: one such value per cell;
    ``lattice``: one of {1/2, 1, 3/2} per cell."""

    mode: str
    N: int

    def __post_init__(self):
        if self.mode not in ("box", "grid", "lattice"):
            raise ValueError(f"unknown class mode {self.mode!r}")
        if self.N < 1:
            raise ValueError("N must be positive")

    @property
    def cardinality(self) -> float:
        return float(3**self.N) if self.mode == "lattice" else math.inf

    def contains(self, q) -> bool:
        q = np.asarray(q)
        if q.shape != (self.N,) or np.any(np.abs(np.imag(q)) > 0):
            return False
        q = np.real(q)
        if self.mode == "lattice":
            return bool(np.all(np.isin(q, LATTICE_VALUES)))
        ok = bool(np.all((q >= 0.5) & (q <= 1.5)))
        return ok and (self.mode == "grid" or bool(np.all(q == q[0])))

    def members(self) -> np.ndarray:
        if self.mode != "lattice":
            raise ValueError("only the lattice class is enumerable")
        return lattice_members(self.N)


def lattice_members(N: int) -> np.ndarray:
    """All ``3^N`` lattice potentials in lexicographic order."""
    return np.array(list(itertools.product(LATTICE_VALUES, repeat=N)), dtype=float).reshape(-1, N)


# ---------------------------------------------------------------------------
# forward map and its derivative


class ForwardMap:
    """``q -> Lambda_q`` on a fixed Omega mesh and trace basis, cached by potential values."""

    def __init__(self, mesh: Mesh, basis: TraceBasis | None = None, *, cache_size: int = 4096, workers: int = 1):
        self.mesh = mesh
        self.basis = trace_basis(mesh) if basis is None else basis
        self.N = int(mesh.partition.n_cells) if mesh.partition is not None else int(mesh.labels.max()) + 1
        self._cache: dict[bytes, DtnOperator] = {}
        self.cache_size = cache_size
        self.workers = workers
        self.evaluations = 0

    def _key(self, q) -> bytes:
        return np.asarray(q, dtype=complex).reshape(self.N).tobytes()

    def __call__(self, q, keep_solutions: bool = False) -> DtnOperator:
        """DtN operator of ``q``; only the matrix is cached, never the volume solutions."""
        q = np.asarray(q, dtype=complex).reshape(self.N)
        key = self._key(q)
        op = self._cache.get(key)
        if op is None or keep_solutions:
            op = assemble_dtn(self.mesh, q, self.basis, keep_solutions=keep_solutions, workers=self.workers)
            self.evaluations += 1
            if len(self._cache) >= self.cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = DtnOperator(op.matrix, op.basis, op.fingerprint)
        return op

    def scaled(self, q) -> np.ndarray:
        return scaled_matrix(self(q).matrix, self.basis)

    def jacobian(self, q) -> np.ndarray:
        """``dA/dq_j = U^T M_j U``, shape (N, m, m)."""
        op = self(q, keep_solutions=True)
        U = op.solutions
        return np.stack([U.T @ (mass_matrix(self.mesh, j) @ U) for j in range(self.N)])


def forward_map(partition, mesh: Mesh, q_values) -> DtnOperator:
    """DtN operator of the potential with the given cell values."""
    if partition is not None and mesh.partition is not None and partition is not mesh.partition:
        raise ValueError("mesh was built for a different partition")
    return _shared_forward(mesh)(q_values)


def jacobian(partition, mesh: Mesh, q_values) -> np.ndarray:
    if partition is not None and mesh.partition is not None and partition is not mesh.partition:
        raise ValueError("mesh was built for a different partition")
    return _shared_forward(mesh).jacobian(q_values)


def _shared_forward(mesh: Mesh) -> ForwardMap:
    cache = mesh.__dict__.setdefault("_inverse_cache", {})
    if "forward" not in cache:
        cache["forward"] = ForwardMap(mesh)
    return cache["forward"]


# ---------------------------------------------------------------------------
# noise


def add_operator_noise(op: DtnOperator, delta: float, rng: np.random.Generator) -> DtnOperator:
    """Add a random complex symmetric perturbation whose operator norm is exactly ``delta``."""
    m = op.basis.size
    raw = rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))
    raw = 0.5 * (raw + raw.T)
    raw *= delta / np.linalg.norm(raw, 2)
    return DtnOperator(op.matrix + unscale_matrix(raw, op.basis), op.basis, None)


# ---------------------------------------------------------------------------
# reconstruction


@dataclass
class ReconstructionProblem:
    forward: ForwardMap
    measured: np.ndarray
    initial: np.ndarray
    noise_level: float = 0.0
    damping: float = 1e-3
    damping_decrease: float = 3.0
    damping_increase: float = 4.0
    max_iter: int = 50
    tol: float = 1e-13
    step_tol: float = 1e-13
    gradient_tol: float = 1e-10
    discrepancy: float = 1.5
    box: tuple[float, float] | None = None
    truth: np.ndarray | None = None

    def __post_init__(self):
        if isinstance(self.measured, DtnOperator):
            self.measured = self.measured.matrix
        self.measured = np.asarray(self.measured, dtype=complex)
        self.initial = np.asarray(self.initial, dtype=complex).reshape(self.forward.N)
        self.measured_scaled = scaled_matrix(self.measured, self.forward.basis)
        if self.box is not None and np.any((self.initial.real < self.box[0]) | (self.initial.real > self.box[1])):
            raise ValueError("initial guess outside the box")
        if self.noise_level < 0:
            raise ValueError("noise level must be nonnegative")


@dataclass
class TraceRow:
    iteration: int
    misfit: float
    step: float
    error: float | None
    damping: float


@dataclass
class ReconstructionResult:
    estimate: np.ndarray
    trace: list = field(default_factory=list)
    converged: bool = False
    reason: str = ""

    def write_trace(self, path: str | Path) -> None:
        write_trace(self.trace, path)


def _residual(problem: ReconstructionProblem, q) -> np.ndarray:
    return problem.forward.scaled(q) - problem.measured_scaled


def _misfit(res: np.ndarray) -> float:
    return float(np.linalg.norm(res))


def _error(problem, q):
    return None if problem.truth is None else float(np.max(np.abs(q - problem.truth)))


def _real_jacobian(problem: ReconstructionProblem, q) -> np.ndarray:
    basis = problem.forward.basis
    J = problem.forward.jacobian(q)
    cols = [scaled_matrix(Jj, basis).ravel() for Jj in J]
    S = np.stack(cols, axis=1)  # complex, d residual / d Re q_j
    # d residual / d Im q_j = i S
    return np.vstack([np.hstack([S.real, -S.imag]), np.hstack([S.imag, S.real])])


def _stack(res: np.ndarray) -> np.ndarray:
    return np.concatenate([res.real.ravel(), res.imag.ravel()])


def _to_complex(p: np.ndarray) -> np.ndarray:
    n = len(p) // 2
    return p[:n] + 1j * p[n:]


def _project(problem, q):
    if problem.box is None:
        return q
    return np.clip(q.real, *problem.box) + 1j * q.imag


def _stop_by_discrepancy(problem, q) -> bool:
    if problem.noise_level <= 0:
        return False
    delta = problem.forward(q).matrix - problem.measured
    return operator_norm(delta, problem.forward.basis) <= problem.discrepancy * problem.noise_level


def _guarded_residual(problem, q):
    try:
        return _residual(problem, q)
    except EigenvalueError:
        return None


def reconstruct(problem: ReconstructionProblem, method: str = "gauss_newton") -> ReconstructionResult:
    """Minimize the scaled Frobenius misfit of the DtN matrices.

    ``gauss_newton`` uses Levenberg-Marquardt damping, decreased
    geometrically after each accepted step; ``landweber`` takes fixed steps
    ``1 / ||J||^2``.  A trial point where the forward problem is singular
    is rejected and the step halved.  Five consecutive misfit increases
    raise :class:`ReconstructionDiverged`.
    """
    if method == "gauss_newton":
        return _gauss_newton(problem)
    if method == "landweber":
        return _landweber(problem)
    raise ValueError("method must be 'gauss_newton' or 'landweber'")


def _gauss_newton(problem: ReconstructionProblem) -> ReconstructionResult:
    q = problem.initial.copy()
    res = _residual(problem, q)
    misfit = _misfit(res)
    lam = problem.damping
    trace = [TraceRow(0, misfit, 0.0, _error(problem, q), lam)]
    scale0 = max(np.linalg.norm(problem.measured_scaled), 1e-300)
    if misfit <= problem.tol * scale0 or _stop_by_discrepancy(problem, q):
        return ReconstructionResult(q, trace, True, "initial guess fits the data")
    increases = 0
    it = 0
    while it < problem.max_iter:
        J = _real_jacobian(problem, q)
        g = J.T @ _stack(res)
        if np.linalg.norm(g) <= problem.gradient_tol * np.linalg.norm(J) * misfit:
            return ReconstructionResult(q, trace, True, "stationary point")
        H = J.T @ J
        diag = np.diag(H).copy()
        diag[diag == 0] = 1.0
        step = np.linalg.solve(H + lam * np.diag(diag), -g)
        factor = 1.0
        trial_res = None
        for _ in range(30):
            trial = _project(problem, q + factor * _to_complex(step))
            trial_res = _guarded_residual(problem, trial)
            if trial_res is not None:
                break
            factor *= 0.5
        if trial_res is None:
            raise ReconstructionDiverged("forward problem singular along the whole step", trace)
        trial_misfit = _misfit(trial_res)
        if trial_misfit < misfit:
            it += 1
            step_size = float(np.max(np.abs(trial - q)))
            q, res, misfit = trial, trial_res, trial_misfit
            lam /= problem.damping_decrease
            increases = 0
            trace.append(TraceRow(it, misfit, step_size, _error(problem, q), lam))
            if misfit <= problem.tol * scale0 or step_size <= problem.step_tol * max(1.0, np.max(np.abs(q))):
                return ReconstructionResult(q, trace, True, "misfit or step below tolerance")
            if _stop_by_discrepancy(problem, q):
                return ReconstructionResult(q, trace, True, "discrepancy principle")
        else:
            # decrease predicted by the linear model, lost in round-off of the misfit
            predicted = -(g @ step + 0.5 * step @ (H @ step))
            if predicted <= 1e-12 * misfit**2:
                return ReconstructionResult(q, trace, True, "no resolvable decrease")
            increases += 1
            lam *= problem.damping_increase
            if increases >= 5:
                raise ReconstructionDiverged("misfit increased on five consecutive trial steps", trace)
    return ReconstructionResult(q, trace, False, "iteration limit")


def _landweber(problem: ReconstructionProblem) -> ReconstructionResult:
    q = problem.initial.copy()
    res = _residual(problem, q)
    misfit = _misfit(res)
    trace = [TraceRow(0, misfit, 0.0, _error(problem, q), 0.0)]
    scale0 = max(np.linalg.norm(problem.measured_scaled), 1e-300)
    J = _real_jacobian(problem, q)
    omega = 1.0 / np.linalg.norm(J, 2) ** 2
    increases = 0
    for it in range(1, problem.max_iter + 1):
        if misfit <= problem.tol * scale0 or _stop_by_discrepancy(problem, q):
            return ReconstructionResult(q, trace, True, "misfit below tolerance")
        J = _real_jacobian(problem, q)
        direction = -omega * _to_complex(J.T @ _stack(res))
        factor = 1.0
        for _ in range(30):
            trial = _project(problem, q + factor * direction)
            trial_res = _guarded_residual(problem, trial)
            if trial_res is not None:
                break
            factor *= 0.5
        else:
            raise ReconstructionDiverged("forward problem singular along the whole step", trace)
        trial_misfit = _misfit(trial_res)
        increases = increases + 1 if trial_misfit > misfit else 0
        step_size = float(np.max(np.abs(trial - q)))
        q, res, misfit = trial, trial_res, trial_misfit
        trace.append(TraceRow(it, misfit, step_size, _error(problem, q), omega))
        if increases >= 5:
            raise ReconstructionDiverged("misfit increased on five consecutive steps", trace)
    return ReconstructionResult(q, trace, False, "iteration limit")


def write_trace(trace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "misfit", "step", "error_if_known"])
        for row in trace:
            err = "" if row.error is None else f"{row.error:.12g}"
            w.writerow([row.iteration, f"{row.misfit:.12g}", f"{row.step:.12g}", err])


# ---------------------------------------------------------------------------
# stability ratios


@dataclass
class StabilityRecord:
    N: int
    q1: np.ndarray
    q2: np.ndarray
    distance: float
    dtn_norm: float
    ratio: float
    mesh_h: float = math.nan
    seed: int | None = None


def stability_ratio(q1, q2, mesh: Mesh, basis: TraceBasis | None = None, *, forward: ForwardMap | None = None,
                    seed: int | None = None) -> StabilityRecord:
    """``||q1 - q2||_inf / ||Lambda_1 - Lambda_2||`` on one shared mesh."""
    q1 = np.asarray(q1, dtype=complex)
    q2 = np.asarray(q2, dtype=complex)
    distance = float(np.max(np.abs(q1 - q2)))
    if distance == 0:
        raise InverseError("identical potentials: the stability ratio is undefined")
    fm = forward if forward is not None else _shared_forward(mesh)
    basis = fm.basis if basis is None else basis
    norm = operator_norm(fm(q1).matrix - fm(q2).matrix, basis)
    ratio = distance / norm if norm > 0 else math.inf
    return StabilityRecord(len(q1), q1, q2, distance, norm, ratio, mesh.h, seed)


@dataclass
class LipschitzEstimate:
    N: int
    C_est: float
    records: list
    complete: bool
    argmax: list
    min_norm_half: float

    @property
    def is_lower_bound(self) -> bool:
        return not self.complete


def _random_pairs(members: np.ndarray, count: int, rng: np.random.Generator):
    """Pairs whose Hamming distance is drawn uniformly from 1..N."""
    N = members.shape[1]
    pairs = []
    powers = 3 ** np.arange(N - 1, -1, -1)
    for _ in range(count):
        a = rng.integers(0, 3, N)
        hamming = int(rng.integers(1, N + 1))
        cells = rng.choice(N, hamming, replace=False)
        b = a.copy()
        b[cells] = (a[cells] + rng.integers(1, 3, hamming)) % 3
        pairs.append((int(a @ powers), int(b @ powers)))
    return pairs


def estimate_lipschitz_constant(
    forward: ForwardMap,
    sampling: str = "exhaustive_lattice",
    budget: int = 10_000,
    *,
    rng: np.random.Generator | None = None,
    workers: int = 1,
) -> LipschitzEstimate:
    """Largest ratio ``||q1 - q2||_inf / ||Lambda_1 - Lambda_2||`` over lattice pairs.

    ``exhaustive_lattice`` evaluates every pair when their number is within
    ``budget`` (otherwise the first ``budget`` pairs, flagged incomplete);
    ``random`` draws ``budget`` pairs.
    """
    N = forward.N
    members = lattice_members(N)
    n_members = len(members)
    if sampling == "exhaustive_lattice":
        all_pairs = n_members * (n_members - 1) // 2
        complete = all_pairs <= budget
        pairs = list(itertools.islice(itertools.combinations(range(n_members), 2), budget))
    elif sampling == "random":
        rng = np.random.default_rng(0) if rng is None else rng
        pairs = _random_pairs(members, budget, rng)
        complete = False
    else:
        raise ValueError("sampling must be 'exhaustive_lattice' or 'random'")
    needed = sorted({i for p in pairs for i in p})
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(lambda i: system(forward.mesh, members[i].astype(complex)), needed))
    scaled = {i: forward.scaled(members[i]) for i in needed}
    records, best, argmax = [], -1.0, []
    min_half = math.inf
    for a, b in pairs:
        dist = float(np.max(np.abs(members[a] - members[b])))
        norm = float(np.linalg.norm(scaled[a] - scaled[b], 2))
        ratio = dist / norm if norm > 0 else math.inf
        records.append(StabilityRecord(N, members[a], members[b], dist, norm, ratio, forward.mesh.h))
        if dist == 0.5:
            min_half = min(min_half, norm)
        if ratio > best * (1 + 1e-12):
            best, argmax = ratio, [(a, b)]
        elif abs(ratio - best) <= 1e-9 * best:
            argmax.append((a, b))
    return LipschitzEstimate(N, best, records, complete, argmax, min_half)


def write_records(records, path: str | Path, seed: int | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "distance", "dtn_norm", "ratio", "mesh_h", "seed"])
        for r in records:
            s = r.seed if r.seed is not None else seed
            w.writerow([r.N, f"{r.distance:.12g}", f"{r.dtn_norm:.12g}", f"{r.ratio:.12g}", f"{r.mesh_h:.6g}",
                        "" if s is None else s])


# ---------------------------------------------------------------------------
# exponential lower bound


@dataclass(frozen=True)
class RondiBound:
    N: float
    n: int
    K: float
    K1: float
    bound: float
    eps0: float

    def net_cardinality(self, eps: float) -> float:
        """``exp(K (-ln eps)^{2n-1})``."""
        return math.exp(self.K * (-math.log(eps)) ** (2 * self.n - 1))

    def log_net_cardinality(self, eps: float) -> float:
        return self.K * (-math.log(eps)) ** (2 * self.n - 1)


def rondi_lower_bound(N: float, n: int = 2, K: float = 1.0) -> RondiBound:
    """``(1/4) exp(K1 N^{1/(2n-1)})`` with ``K1 = (ln 3 / K)^{1/(2n-1)}``."""
    if not N > 0 or not K > 0:
        raise ValueError("N and K must be positive")
    if n < 2:
        raise ValueError("n must be at least 2")
    p = 1.0 / (2 * n - 1)
    K1 = (math.log(3.0) / K) ** p
    expo = K1 * N**p
    return RondiBound(N, n, K, K1, 0.25 * math.exp(expo), math.exp(-expo))
