"""Dense symmetric linear algebra and the batched mPCG solver core.

Provides the pieces the multi-task GP fitter needs to avoid cubic-cost
factorizations: a pivoted-Cholesky low-rank preconditioner, a batched
preconditioned conjugate-gradient solve that extracts Lanczos tridiagonal
coefficients on the fly, and the stochastic trace / log-determinant
estimators built on top of them.  A dense Cholesky path is kept alongside
as the reference oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg


class NotPositiveDefinite(ValueError):
    """Raised when a Cholesky pivot falls at or below the jitter floor."""


class RankExceedsDim(ValueError):
    pass


class SingularInnerMatrix(ValueError):
    pass


class BreakdownZeroCurvature(RuntimeError):
    """s'As <= 0 for an active column: the operator is not SPD."""


class NonFinite(RuntimeError):
    pass


class NonPositiveEigenvalue(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


# Division guard for batched alpha/beta on converged (frozen) columns.
_DIV_FLOOR = 1e-300


def check_symmetric(a: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """Validate a dense symmetric matrix; returns the array unchanged."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFinite("matrix has non-finite entries")
    scale = max(np.abs(a).max(), 1.0)
    if np.abs(a - a.T).max() > rtol * scale:
        raise DimensionMismatch("matrix is not symmetric within tolerance")
    return a


def cholesky_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A X = B for SPD A via Cholesky (reference path)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    try:
        factor = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    return scipy.linalg.cho_solve(factor, b, check_finite=False)


def cholesky_logdet(a: np.ndarray) -> float:
    """log|A| for SPD A (reference path for the Lanczos estimator)."""
    try:
        chol = np.linalg.cholesky(np.asarray(a, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


@dataclass(frozen=True)
class LowRankFactor:
    """C0 with C0 @ C0.T approximating a PSD matrix, from pivoted Cholesky."""

    dim: int
    rank: int
    factor: np.ndarray  # (dim, rank)

    def densify(self) -> np.ndarray:
        return self.factor @ self.factor.T


def pivoted_cholesky(a: np.ndarray, rank: int) -> LowRankFactor:
    """Greedy diagonal-pivoted partial Cholesky of a PSD matrix.

    Returns C0 (dim x rank) in the original row order.  The trace-norm
    error after r steps is the sum of the remaining Schur-complement
    diagonal, which is non-increasing in r by construction.
    """
    a = check_symmetric(a)
    n = a.shape[0]
    if not 1 <= rank <= n:
        raise RankExceedsDim(f"rank {rank} outside [1, {n}]")

    diag = np.diag(a).astype(float).copy()
    c0 = np.zeros((n, rank))
    order: list[int] = []
    for step in range(rank):
        pivot = int(np.argmax(diag))
        if diag[pivot] <= 0.0:
            # Numerically exhausted: remaining factor columns stay zero.
            break
        order.append(pivot)
        root = np.sqrt(diag[pivot])
        col = (a[:, pivot] - c0[:, :step] @ c0[pivot, :step]) / root
        col[order] = 0.0
        col[pivot] = root
        c0[:, step] = col
        diag = np.maximum(diag - col**2, 0.0)
        diag[pivot] = 0.0
    return LowRankFactor(dim=n, rank=rank, factor=c0)


@dataclass(frozen=True)
class Preconditioner:
    """P = C0 C0' + diag(noise); applied through the matrix inversion lemma."""

    low_rank: LowRankFactor
    noise_diagonal: np.ndarray

    def __post_init__(self):
        noise = np.asarray(self.noise_diagonal, dtype=float)
        if noise.ndim != 1 or noise.shape[0] != self.low_rank.dim:
            raise DimensionMismatch("noise diagonal length must equal dim")
        if np.any(noise <= 0.0):
            raise NotPositiveDefinite("noise diagonal must be strictly positive")
        object.__setattr__(self, "noise_diagonal", noise)

    @property
    def dim(self) -> int:
        return self.low_rank.dim

    def densify(self) -> np.ndarray:
        return self.low_rank.densify() + np.diag(self.noise_diagonal)

    def apply(self, v: np.ndarray) -> np.ndarray:
        c0 = self.low_rank.factor
        v = np.asarray(v, dtype=float)
        noise = self.noise_diagonal[:, None] if v.ndim == 2 else self.noise_diagonal
        return c0 @ (c0.T @ v) + noise * v

    def apply_inverse(self, v: np.ndarray) -> np.ndarray:
        """P^-1 v = E^-1 v - E^-1 C0 (I + C0' E^-1 C0)^-1 C0' E^-1 v.

        The only dense solve is the rank x rank inner system.
        """
        v = np.asarray(v, dtype=float)
        c0 = self.low_rank.factor
        e_inv = 1.0 / self.noise_diagonal
        ev = e_inv[:, None] * v if v.ndim == 2 else e_inv * v
        inner = np.eye(self.low_rank.rank) + c0.T @ (e_inv[:, None] * c0)
        try:
            inner_factor = scipy.linalg.cho_factor(inner, lower=True, check_finite=False)
        except scipy.linalg.LinAlgError as exc:
            raise SingularInnerMatrix(str(exc)) from exc
        w = scipy.linalg.cho_solve(inner_factor, c0.T @ ev, check_finite=False)
        correction = e_inv[:, None] * (c0 @ w) if v.ndim == 2 else e_inv * (c0 @ w)
        return ev - correction

    def logdet(self) -> float:
        """log|P| = log|C0' E^-1 C0 + I| + log|E| (matrix determinant lemma)."""
        c0 = self.low_rank.factor
        e_inv = 1.0 / self.noise_diagonal
        inner = np.eye(self.low_rank.rank) + c0.T @ (e_inv[:, None] * c0)
        sign, inner_logdet = np.linalg.slogdet(inner)
        if sign <= 0:
            raise SingularInnerMatrix("inner matrix not positive definite")
        return float(inner_logdet + np.sum(np.log(self.noise_diagonal)))

    def sqrt_apply(self, z: np.ndarray) -> np.ndarray:
        """C z for C = [C0 | E^{1/2}], so Cov(Cz) = P for standard-normal z."""
        c0 = self.low_rank.factor
        r = self.low_rank.rank
        z = np.asarray(z, dtype=float)
        root_e = np.sqrt(self.noise_diagonal)
        if z.ndim == 1:
            return c0 @ z[:r] + root_e * z[r:]
        return c0 @ z[:r] + root_e[:, None] * z[r:]


def preconditioner_apply_inverse(precond: Preconditioner, v: np.ndarray) -> np.ndarray:
    return precond.apply_inverse(v)


def preconditioner_logdet(precond: Preconditioner) -> float:
    return precond.logdet()


def sample_probes(precond: Preconditioner, count: int, seed: int) -> np.ndarray:
    """Draw dim x count probes d_i = C z_i with Cov(d_i) = P, fixed by seed."""
    if count < 1:
        raise DimensionMismatch("probe count must be >= 1")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((precond.low_rank.rank + precond.dim, count))
    return precond.sqrt_apply(z)


@dataclass(frozen=True)
class TridiagonalMatrix:
    """Symmetric tridiagonal T accumulated from one probe column of mPCG."""

    size: int
    diagonal: np.ndarray
    off_diagonal: np.ndarray

    def densify(self) -> np.ndarray:
        t = np.diag(self.diagonal)
        if self.size > 1:
            t += np.diag(self.off_diagonal, 1) + np.diag(self.off_diagonal, -1)
        return t

    def first_entry_log_quadratic(self) -> float:
        """e1' log(T) e1 via symmetric tridiagonal eigendecomposition."""
        if self.size == 0:
            return 0.0
        if self.size == 1:
            value = self.diagonal[0]
            if value <= 0.0:
                raise NonPositiveEigenvalue("tridiagonal has non-positive eigenvalue")
            return float(np.log(value))
        eigvals, eigvecs = scipy.linalg.eigh_tridiagonal(
            self.diagonal, self.off_diagonal)
        if np.any(eigvals <= 0.0):
            raise NonPositiveEigenvalue("tridiagonal has non-positive eigenvalue")
        first_row = eigvecs[0, :]
        return float(np.sum(first_row**2 * np.log(eigvals)))


@dataclass
class SolverWorkspace:
    """Probe block and per-probe Lanczos state for one batched solve.

    Column 0 of ``probes`` is the right-hand side; columns 1..t are random
    probes with E[d d'] = P.  ``tridiagonals`` and ``probe_weights`` are
    filled in by :func:`mpcg_batch`; the workspace is owned by one solve.
    """

    probe_count: int
    max_iterations: int
    tolerance: float
    probes: np.ndarray
    tridiagonals: list[TridiagonalMatrix] = field(default_factory=list)
    probe_weights: np.ndarray | None = None

    def __post_init__(self):
        self.probes = np.asarray(self.probes, dtype=float)
        if self.probe_count < 1 or self.max_iterations < 1 or self.tolerance < 0:
            raise DimensionMismatch("invalid workspace configuration")
        if self.probes.ndim != 2 or self.probes.shape[1] != self.probe_count + 1:
            raise DimensionMismatch(
                f"probe matrix must be dim x {self.probe_count + 1}")
        if not np.all(np.isfinite(self.probes)):
            raise NonFinite("probe matrix has non-finite entries")

    @classmethod
    def build(cls, rhs, precond, probe_count=10, max_iterations=100,
              tolerance=1e-8, seed=0):
        rhs = np.asarray(rhs, dtype=float)
        probes = sample_probes(precond, probe_count, seed)
        return cls(probe_count=probe_count, max_iterations=max_iterations,
                   tolerance=tolerance,
                   probes=np.column_stack([rhs, probes]))


class _TridiagonalAccumulator:
    """Per-column alpha/beta recurrences mapped to Lanczos coefficients.

    diag[j] = 1/alpha_j + beta_{j-1}/alpha_{j-1}, off[j] = sqrt(beta_j)/alpha_j.
    The diagonal entry for an iteration is written as soon as its alpha is
    known, so a column frozen mid-run keeps a valid tridiagonal of its
    effective size.
    """

    def __init__(self):
        self.diag: list[float] = []
        self.off: list[float] = []
        self._prev_alpha = None
        self._prev_beta = None

    def push_alpha(self, alpha: float):
        entry = 1.0 / alpha
        if self._prev_alpha is not None:
            entry += self._prev_beta / self._prev_alpha
            self.off.append(np.sqrt(self._prev_beta) / self._prev_alpha)
        self.diag.append(entry)
        self._prev_alpha = alpha

    def push_beta(self, beta: float):
        self._prev_beta = beta

    def freeze(self) -> TridiagonalMatrix:
        return TridiagonalMatrix(size=len(self.diag),
                                 diagonal=np.asarray(self.diag),
                                 off_diagonal=np.asarray(self.off))


def mpcg_batch(apply_a: Callable[[np.ndarray], np.ndarray],
               workspace: SolverWorkspace,
               precond: Preconditioner) -> tuple[np.ndarray, list[TridiagonalMatrix]]:
    """Batched preconditioned CG against all workspace columns at once.

    Solves A U = [rhs, d_1, ..., d_t] column-wise, with per-column step
    sizes computed as element-wise column reductions.  For each probe
    column the alpha/beta sequence is folded into a partial Lanczos
    tridiagonalization of the preconditioned operator.  A converged column
    is frozen in place (its updates stop) rather than removed, keeping the
    batch shapes fixed.
    """
    delta = workspace.probes
    n, ncols = delta.shape
    k = min(workspace.max_iterations, n)

    u = np.zeros_like(delta)
    r = -delta.copy()                      # R = A U - Delta with U = 0
    z = precond.apply_inverse(r)
    s = -z
    rz = np.sum(r * z, axis=0)

    rhs_norms = np.linalg.norm(delta, axis=0)
    # Zero right-hand sides are converged at the outset with solution zero.
    active = rhs_norms > 0.0
    thresholds = workspace.tolerance * np.where(active, rhs_norms, 1.0)

    accumulators = [_TridiagonalAccumulator() for _ in range(workspace.probe_count)]
    # d' P^-1 d per probe, the quadrature weight for the log-det estimator.
    probe_weights = rz[1:].copy()

    # Columns at machine-level residuals are frozen even under tolerance 0,
    # so post-termination roundoff cannot corrupt an already exact solve.
    machine_floor = 16 * np.finfo(float).eps * np.maximum(rhs_norms, 1.0)

    for _ in range(k):
        active = active & (np.linalg.norm(r, axis=0) > machine_floor)
        if not active.any():
            break
        a_s = apply_a(s)
        curvature = np.sum(s * a_s, axis=0)
        if np.any(curvature[active] <= 0.0):
            raise BreakdownZeroCurvature("s'As <= 0: operator is not SPD")
        alpha = np.where(active, rz / np.maximum(np.abs(curvature), _DIV_FLOOR), 0.0)
        u = u + s * alpha
        r = r + a_s * alpha
        if not np.all(np.isfinite(u)):
            raise NonFinite("mPCG iterate became non-finite")

        for i in range(1, ncols):
            if active[i]:
                accumulators[i - 1].push_alpha(alpha[i])

        residual_norms = np.linalg.norm(r, axis=0)
        newly_done = active & (residual_norms < thresholds)
        active = active & ~newly_done
        if not active.any():
            break

        z = precond.apply_inverse(r)
        rz_next = np.sum(r * z, axis=0)
        beta = np.where(active, rz_next / np.where(np.abs(rz) > _DIV_FLOOR, rz, 1.0), 0.0)
        s = np.where(active, -z + s * beta, s)
        rz = rz_next

        for i in range(1, ncols):
            if active[i]:
                accumulators[i - 1].push_beta(beta[i])

    tridiagonals = [acc.freeze() for acc in accumulators]
    workspace.tridiagonals = tridiagonals
    workspace.probe_weights = probe_weights
    return u, tridiagonals


def lanczos_logdet(tridiagonals: Sequence[TridiagonalMatrix],
                   precond: Preconditioner,
                   probe_weights: np.ndarray | None = None) -> float:
    """Stochastic Lanczos quadrature estimate of log|A|.

    Returns log|P| plus the averaged e1' log(T_i) e1 quadrature terms.
    Each term estimates the log-det of the preconditioned operator as seen
    from a unit start vector, so it must be scaled by the squared probe
    norm d_i' P^-1 d_i (``probe_weights``, recorded by mpcg_batch) to be
    calibrated; with no weights given the raw average is returned, which
    is only meaningful when the preconditioner captures A exactly.
    """
    if probe_weights is None:
        weights = np.ones(len(tridiagonals))
    else:
        weights = np.asarray(probe_weights, dtype=float)
        if weights.shape != (len(tridiagonals),):
            raise DimensionMismatch("one weight per tridiagonal required")
    quad = sum(w * t.first_entry_log_quadratic()
               for w, t in zip(weights, tridiagonals))
    return precond.logdet() + quad / len(tridiagonals)


def stochastic_trace(solved_probes: np.ndarray, rhs_terms: np.ndarray) -> float:
    """(1/t) sum_i <A^-1 d_i, (dA/dtheta) P^-1 d_i>: Hutchinson-style trace.

    Unbiased for Tr(A^-1 dA/dtheta) when the probes satisfy E[d d'] = P.
    """
    solved_probes = np.asarray(solved_probes, dtype=float)
    rhs_terms = np.asarray(rhs_terms, dtype=float)
    if solved_probes.shape != rhs_terms.shape:
        raise DimensionMismatch(
            f"shape mismatch {solved_probes.shape} vs {rhs_terms.shape}")
    t = solved_probes.shape[1]
    return float(np.sum(solved_probes * rhs_terms) / t)
