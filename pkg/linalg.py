"""
Trace-of-inverse superadditivity for block-partitioned SPD matrices.

For S symmetric positive definite with N diagonal blocks S_ii of size d,

    Tr[S^{-1}] >= sum_i Tr[S_ii^{-1}],

with equality iff the off-diagonal blocks vanish. The audit checks this on
random draws and replays the Schur-complement recursion block by block.
"""
import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular

from errors import NotPositiveDefiniteError
from scheduler import WorkerPool, get_worker_pool

logger = logging.getLogger(__name__)

SYMMETRY_TOLERANCE = 1e-12
RIDGE = 1e-6
AUDIT_TOLERANCE = 1e-9
SCHUR_TOLERANCE = 1e-6


@dataclass(frozen=True)
class BlockMatrix:
    entries: np.ndarray
    block_dim: int
    n_blocks: int

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=float)
        size = self.block_dim * self.n_blocks
        if entries.shape != (size, size):
            raise ValueError(f"expected a {size}x{size} matrix for {self.n_blocks} blocks of {self.block_dim}, got {entries.shape}")
        scale = max(1.0, float(np.max(np.abs(entries))))
        if not np.allclose(entries, entries.T, rtol=0.0, atol=SYMMETRY_TOLERANCE * scale):
            raise NotPositiveDefiniteError("matrix is not symmetric")
        object.__setattr__(self, "entries", entries)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def block(self, i: int, j: int) -> np.ndarray:
        d = self.block_dim
        return self.entries[i * d:(i + 1) * d, j * d:(j + 1) * d]

    def leading(self, k: int) -> "BlockMatrix":
        """Principal submatrix made of the first k blocks."""
        d = self.block_dim
        return BlockMatrix(self.entries[: k * d, : k * d], d, k)

    def is_block_diagonal(self, tol: float = 0.0) -> bool:
        mask = np.kron(1.0 - np.eye(self.n_blocks), np.ones((self.block_dim, self.block_dim)))
        return bool(np.all(np.abs(self.entries * mask) <= tol))

    def condition_number(self) -> float:
        return float(np.linalg.cond(self.entries))


class SchurSplit(NamedTuple):
    """Pieces of Tr[S^{-1}] for S = [[S_N, delta], [delta^T, Z]]."""

    leading: float
    coupling: float
    tail: float
    tail_block: float

    @property
    def total(self) -> float:
        return self.leading + self.coupling + self.tail

    @property
    def increment(self) -> float:
        return self.coupling + self.tail


class TraceTrial(NamedTuple):
    trial: int
    d: int
    n: int
    lhs: float
    rhs: float
    margin: float
    condition_number: float
    schur_ok: bool


@dataclass
class TraceAuditReport:
    trials: List[TraceTrial] = field(default_factory=list)
    violations: List[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


def _inverse_cholesky(a: np.ndarray) -> np.ndarray:
    try:
        lower = cholesky(a, lower=True, check_finite=True)
    except LinAlgError as e:
        raise NotPositiveDefiniteError(f"Cholesky factorization failed: {e}") from e
    return solve_triangular(lower, np.eye(a.shape[0]), lower=True)


def _inverse(a: np.ndarray) -> np.ndarray:
    inv_lower = _inverse_cholesky(a)
    return inv_lower.T @ inv_lower


def trace_inverse(s: BlockMatrix) -> float:
    """Tr[S^{-1}] = ||L^{-1}||_F^2 for S = L L^T."""
    inv_lower = _inverse_cholesky(s.entries)
    return float(np.sum(inv_lower * inv_lower))


def block_trace_sum(s: BlockMatrix) -> float:
    """sum_i Tr[S_ii^{-1}]."""
    total = 0.0
    for i in range(s.n_blocks):
        inv_lower = _inverse_cholesky(s.block(i, i))
        total += float(np.sum(inv_lower * inv_lower))
    return total


def schur_trace_split(s: BlockMatrix) -> SchurSplit:
    """
    Split Tr[S^{-1}] along the last block.

    With Zt = (Z - delta^T S_N^{-1} delta)^{-1},
    Tr[S^{-1}] = Tr[S_N^{-1}] + Tr[S_N^{-1} delta Zt delta^T S_N^{-1}] + Tr[Zt].
    """
    if s.n_blocks < 2:
        raise ValueError("need at least two blocks to split")
    cut = (s.n_blocks - 1) * s.block_dim
    head = s.entries[:cut, :cut]
    delta = s.entries[:cut, cut:]
    z = s.entries[cut:, cut:]
    head_inv = _inverse(head)
    projected = head_inv @ delta
    z_tilde = _inverse(z - delta.T @ projected)
    return SchurSplit(
        leading=float(np.trace(head_inv)),
        coupling=float(np.trace(projected @ z_tilde @ projected.T)),
        tail=float(np.trace(z_tilde)),
        tail_block=float(np.trace(_inverse(z))),
    )


def random_spd(rng: np.random.Generator, size: int) -> np.ndarray:
    """M^T M + 1e-6 I with standard normal M."""
    m = rng.standard_normal((size, size))
    a = m.T @ m + RIDGE * np.eye(size)
    return 0.5 * (a + a.T)


def random_block_diagonal(rng: np.random.Generator, block_dim: int, n_blocks: int) -> np.ndarray:
    size = block_dim * n_blocks
    a = np.zeros((size, size))
    for i in range(n_blocks):
        sl = slice(i * block_dim, (i + 1) * block_dim)
        a[sl, sl] = random_spd(rng, block_dim)
    return a


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, trial])))


def replay_schur_recursion(s: BlockMatrix, tol: float = SCHUR_TOLERANCE) -> bool:
    """
    Walk k = 2..N over leading principal blocks and check each step.

    Every split must reproduce the directly computed trace, and the increment
    Tr[S_k^{-1}] - Tr[S_{k-1}^{-1}] must dominate Tr[S_kk^{-1}].
    """
    for k in range(2, s.n_blocks + 1):
        sub = s.leading(k)
        split = schur_trace_split(sub)
        direct = trace_inverse(sub)
        scale = tol * max(1.0, direct)
        if abs(split.total - direct) > scale:
            logger.debug(f"Schur identity off by {split.total - direct:.3e} at k={k}")
            return False
        if split.coupling < -scale or split.increment < split.tail_block - scale:
            logger.debug(f"Schur increment {split.increment:.6g} below block term {split.tail_block:.6g} at k={k}")
            return False
    return True


def _run_trial(seed: int, trial: int, d_max: int, n_max: int, tol: float):
    rng = trial_rng(seed, trial)
    d = int(rng.integers(1, d_max + 1))
    n = int(rng.integers(min(2, n_max), n_max + 1))
    s = BlockMatrix(random_spd(rng, d * n), d, n)
    lhs = trace_inverse(s)
    rhs = block_trace_sum(s)
    cond = s.condition_number()
    logger.debug(f"trial {trial}: d={d} N={n} cond={cond:.3e} margin={lhs - rhs:.3e}")
    schur_ok = replay_schur_recursion(s, SCHUR_TOLERANCE)
    return TraceTrial(trial, d, n, lhs, rhs, lhs - rhs, cond, schur_ok), s.entries


def superadditivity_audit(
    seed: int,
    trials: int,
    d_max: int = 3,
    n_max: int = 4,
    tol: float = AUDIT_TOLERANCE,
    pool: Optional[WorkerPool] = None,
) -> TraceAuditReport:
    """
    Check Tr[S^{-1}] >= sum_i Tr[S_ii^{-1}] - tol * Tr[S^{-1}] on random SPD draws.

    Each trial draws d <= d_max, N <= n_max and S from its own seeded stream, so
    the report does not depend on the worker count. Violations carry the matrix.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    pool = pool or get_worker_pool()
    results = pool.map(lambda t: _run_trial(seed, t, d_max, n_max, tol), range(trials))
    report = TraceAuditReport(trials=[row for row, _ in results])
    for row, matrix in results:
        if row.margin < -tol * row.lhs or not row.schur_ok:
            logger.error(f"superadditivity violated in trial {row.trial}: lhs={row.lhs!r} rhs={row.rhs!r}")
            report.violations.append({"trial": row.trial, "lhs": row.lhs, "rhs": row.rhs, "matrix": matrix.tolist()})
    logger.info(f"trace audit: {len(results)} trials, {len(report.violations)} violations")
    return report


def equality_audit(seed: int, trials: int, d_max: int = 3, n_max: int = 4, tol: float = 1e-12) -> int:
    """Count block-diagonal draws where Tr[S^{-1}] and sum_i Tr[S_ii^{-1}] differ by more than tol (relative)."""
    failures = 0
    for t in range(trials):
        rng = trial_rng(seed, t)
        d = int(rng.integers(1, d_max + 1))
        n = int(rng.integers(1, n_max + 1))
        s = BlockMatrix(random_block_diagonal(rng, d, n), d, n)
        lhs, rhs = trace_inverse(s), block_trace_sum(s)
        if abs(lhs - rhs) > tol * max(1.0, lhs):
            failures += 1
    return failures
