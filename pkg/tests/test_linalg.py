import numpy as np
import pytest
import scipy.linalg

from musenet import linalg
from musenet.bench import random_mgp_kernel


def random_spd(n, seed, condition=100.0):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eigs = np.geomspace(1.0, condition, n)
    return (q * eigs) @ q.T


def make_preconditioner(a, rank, noise=0.05):
    low_rank = linalg.pivoted_cholesky(a - noise * np.eye(a.shape[0]), rank)
    return linalg.Preconditioner(low_rank=low_rank,
                                 noise_diagonal=np.full(a.shape[0], noise))


class TestCholeskySolve:
    def test_identity(self):
        b = np.array([1.0, -2.0, 3.0])
        np.testing.assert_allclose(linalg.cholesky_solve(np.eye(3), b), b)

    def test_diagonal(self):
        a = np.diag([2.0, 4.0])
        np.testing.assert_allclose(linalg.cholesky_solve(a, np.array([2.0, 4.0])),
                                   [1.0, 1.0])

    def test_residual_oracle_random_spd(self):
        a = random_spd(50, seed=0)
        rng = np.random.default_rng(1)
        b = rng.standard_normal((50, 3))
        x = linalg.cholesky_solve(a, b)
        residual = np.linalg.norm(a @ x - b) / np.linalg.norm(b)
        assert residual <= 1e-10

    def test_not_positive_definite(self):
        with pytest.raises(linalg.NotPositiveDefinite):
            linalg.cholesky_solve(np.diag([1.0, -1.0]), np.ones(2))


class TestPivotedCholesky:
    def test_rank_one_recovery(self):
        v = np.array([1.0, -2.0, 0.5])
        a = np.outer(v, v)
        factor = linalg.pivoted_cholesky(a, 1)
        np.testing.assert_allclose(factor.densify(), a, atol=1e-12)

    def test_identity_full_rank(self):
        factor = linalg.pivoted_cholesky(np.eye(4), 4)
        np.testing.assert_allclose(factor.densify(), np.eye(4), atol=1e-12)

    def test_eigen_oracle_low_rank(self):
        # rank-5 PSD built from its eigendecomposition; rank-5 factorization
        # must reproduce it to rounding.
        rng = np.random.default_rng(3)
        basis = np.linalg.qr(rng.standard_normal((30, 5)))[0]
        eigs = np.array([5.0, 3.0, 2.0, 1.0, 0.5])
        a = (basis * eigs) @ basis.T
        factor = linalg.pivoted_cholesky(a, 5)
        assert np.abs(factor.densify() - a).max() <= 1e-8

    def test_rank_exceeds_dim(self):
        with pytest.raises(linalg.RankExceedsDim):
            linalg.pivoted_cholesky(np.eye(3), 4)

    def test_trace_error_monotone_in_rank(self):
        a = random_spd(20, seed=5, condition=1e4)
        errors = []
        for rank in range(1, 21):
            factor = linalg.pivoted_cholesky(a, rank)
            errors.append(np.trace(a - factor.densify()))
        diffs = np.diff(errors)
        assert np.all(diffs <= 1e-9)
        assert errors[-1] <= 1e-8


class TestPreconditioner:
    def test_pure_noise_identity(self):
        p = make_preconditioner(np.eye(6), rank=1, noise=1.0)
        p = linalg.Preconditioner(
            low_rank=linalg.LowRankFactor(6, 1, np.zeros((6, 1))),
            noise_diagonal=np.ones(6))
        v = np.arange(6.0)
        np.testing.assert_allclose(p.apply_inverse(v), v, atol=1e-12)

    def test_diagonal_halving(self):
        p = linalg.Preconditioner(
            low_rank=linalg.LowRankFactor(3, 1, np.zeros((3, 1))),
            noise_diagonal=np.full(3, 2.0))
        v = np.array([2.0, 4.0, 6.0])
        np.testing.assert_allclose(p.apply_inverse(v), v / 2.0, atol=1e-12)

    def test_matches_dense_solve(self):
        rng = np.random.default_rng(9)
        c0 = rng.standard_normal((40, 5))
        p = linalg.Preconditioner(low_rank=linalg.LowRankFactor(40, 5, c0),
                                  noise_diagonal=rng.uniform(0.5, 2.0, 40))
        v = rng.standard_normal((40, 4))
        expected = linalg.cholesky_solve(p.densify(), v)
        np.testing.assert_allclose(p.apply_inverse(v), expected, atol=1e-8)

    def test_apply_then_inverse_is_identity(self):
        rng = np.random.default_rng(10)
        c0 = rng.standard_normal((25, 4))
        p = linalg.Preconditioner(low_rank=linalg.LowRankFactor(25, 4, c0),
                                  noise_diagonal=rng.uniform(0.2, 1.5, 25))
        v = rng.standard_normal(25)
        np.testing.assert_allclose(p.apply_inverse(p.apply(v)), v, atol=1e-8)

    def test_logdet_pure_noise_identity(self):
        p = linalg.Preconditioner(
            low_rank=linalg.LowRankFactor(5, 1, np.zeros((5, 1))),
            noise_diagonal=np.ones(5))
        assert abs(p.logdet()) <= 1e-12

    def test_logdet_diagonal(self):
        n = 6
        p = linalg.Preconditioner(
            low_rank=linalg.LowRankFactor(n, 1, np.zeros((n, 1))),
            noise_diagonal=np.exp(np.arange(1.0, n + 1)))
        expected = np.sum(np.arange(1.0, n + 1))
        np.testing.assert_allclose(p.logdet(), expected, atol=1e-10)

    def test_logdet_matches_dense(self):
        rng = np.random.default_rng(11)
        c0 = rng.standard_normal((30, 6))
        p = linalg.Preconditioner(low_rank=linalg.LowRankFactor(30, 6, c0),
                                  noise_diagonal=rng.uniform(0.3, 2.0, 30))
        sign, expected = np.linalg.slogdet(p.densify())
        assert sign > 0
        np.testing.assert_allclose(p.logdet(), expected, atol=1e-9)

    def test_requires_positive_noise(self):
        with pytest.raises(linalg.NotPositiveDefinite):
            linalg.Preconditioner(
                low_rank=linalg.LowRankFactor(3, 1, np.zeros((3, 1))),
                noise_diagonal=np.array([1.0, 0.0, 1.0]))


class TestSampleProbes:
    def test_standard_normal_when_pure_noise(self):
        p = linalg.Preconditioner(
            low_rank=linalg.LowRankFactor(4, 1, np.zeros((4, 1))),
            noise_diagonal=np.ones(4))
        probes = linalg.sample_probes(p, 20000, seed=0)
        cov = probes @ probes.T / probes.shape[1]
        assert np.abs(cov - np.eye(4)).max() < 0.08

    def test_deterministic_per_seed(self):
        p = linalg.Preconditioner(
            low_rank=linalg.LowRankFactor(6, 2, np.ones((6, 2))),
            noise_diagonal=np.full(6, 0.5))
        a = linalg.sample_probes(p, 7, seed=42)
        b = linalg.sample_probes(p, 7, seed=42)
        assert np.array_equal(a, b)

    def test_empirical_covariance_matches_p(self):
        rng = np.random.default_rng(3)
        c0 = rng.standard_normal((20, 3))
        p = linalg.Preconditioner(low_rank=linalg.LowRankFactor(20, 3, c0),
                                  noise_diagonal=rng.uniform(0.5, 1.5, 20))
        probes = linalg.sample_probes(p, 5000, seed=1)
        cov = probes @ probes.T / probes.shape[1]
        dense = p.densify()
        rel = np.linalg.norm(cov - dense) / np.linalg.norm(dense)
        assert rel < 0.10


def run_mpcg(a, rhs, precond, probe_count=5, max_iterations=None, tol=1e-10,
             seed=0):
    workspace = linalg.SolverWorkspace.build(
        rhs=rhs, precond=precond, probe_count=probe_count,
        max_iterations=max_iterations or a.shape[0], tolerance=tol, seed=seed)
    solutions, tridiagonals = linalg.mpcg_batch(lambda v: a @ v, workspace,
                                                precond)
    return solutions, tridiagonals, workspace


class TestMpcgBatch:
    def test_identity_converges_first_iteration(self):
        n = 6
        p = linalg.Preconditioner(
            low_rank=linalg.LowRankFactor(n, 1, np.zeros((n, 1))),
            noise_diagonal=np.ones(n))
        rhs = np.arange(1.0, n + 1)
        solutions, tridiagonals, _ = run_mpcg(np.eye(n), rhs, p, probe_count=3)
        np.testing.assert_allclose(solutions[:, 0], rhs, atol=1e-12)
        for t in tridiagonals:
            assert t.size == 1
            np.testing.assert_allclose(t.diagonal, [1.0])

    def test_diagonal_terminates_within_rank_iterations(self):
        a = np.diag([1.0, 2.0, 4.0])
        p = linalg.Preconditioner(
            low_rank=linalg.LowRankFactor(3, 1, np.zeros((3, 1))),
            noise_diagonal=np.ones(3))
        rhs = np.array([1.0, 1.0, 1.0])
        solutions, tridiagonals, _ = run_mpcg(a, rhs, p, probe_count=2,
                                              max_iterations=3)
        np.testing.assert_allclose(solutions[:, 0], rhs / np.diag(a),
                                   atol=1e-10)
        assert all(t.size <= 3 for t in tridiagonals)

    def test_mgp_kernel_against_cholesky(self):
        kern, rhs, _ = random_mgp_kernel(100, seed=7)
        precond = make_preconditioner(kern.matrix, rank=20,
                                      noise=float(kern.noise_diagonal.min()))
        exact = linalg.cholesky_solve(kern.matrix, rhs)
        solutions, _, _ = run_mpcg(kern.matrix, rhs, precond, probe_count=5,
                                   max_iterations=100)
        rel = np.linalg.norm(solutions[:, 0] - exact) / np.linalg.norm(exact)
        assert rel <= 1e-6

    @pytest.mark.parametrize("build", [
        lambda: (np.eye(12), 0),
        lambda: (np.diag(np.arange(1.0, 13.0)), 1),
        lambda: (random_spd(40, seed=2, condition=100.0), 2),
        lambda: (random_mgp_kernel(60, seed=3)[0].matrix, 3),
    ])
    def test_full_iterations_zero_tolerance_equals_cholesky(self, build):
        a, seed = build()
        n = a.shape[0]
        rng = np.random.default_rng(seed)
        rhs = rng.standard_normal(n)
        precond = make_preconditioner(a, rank=min(10, n),
                                      noise=0.01 * float(np.diag(a).mean()))
        exact = linalg.cholesky_solve(a, rhs)
        solutions, _, _ = run_mpcg(a, rhs, precond, probe_count=3,
                                   max_iterations=n, tol=0.0, seed=seed)
        rel = np.linalg.norm(solutions[:, 0] - exact) / np.linalg.norm(exact)
        assert rel <= 1e-8

    def test_tridiagonals_symmetric_positive_diagonal(self):
        a = random_spd(30, seed=4)
        p = make_preconditioner(a, rank=5, noise=0.02)
        _, tridiagonals, _ = run_mpcg(a, np.ones(30), p, probe_count=6)
        for t in tridiagonals:
            assert np.all(t.diagonal > 0)
            dense = t.densify()
            np.testing.assert_allclose(dense, dense.T)

    def test_breakdown_on_indefinite_operator(self):
        a = np.diag([1.0, -1.0, 2.0])
        p = linalg.Preconditioner(
            low_rank=linalg.LowRankFactor(3, 1, np.zeros((3, 1))),
            noise_diagonal=np.ones(3))
        with pytest.raises(linalg.BreakdownZeroCurvature):
            run_mpcg(a, np.ones(3), p, probe_count=2)


class TestLanczosLogdet:
    def test_identity_estimate_zero(self):
        n = 5
        p = linalg.Preconditioner(
            low_rank=linalg.LowRankFactor(n, 1, np.zeros((n, 1))),
            noise_diagonal=np.ones(n))
        _, tridiagonals, ws = run_mpcg(np.eye(n), np.ones(n), p, probe_count=4)
        estimate = linalg.lanczos_logdet(tridiagonals, p, ws.probe_weights)
        assert abs(estimate) <= 1e-10

    def test_scalar_spectrum_estimates_dim(self):
        # A = e * I with P = I: every quadrature term is exactly 1, so the
        # weighted estimate reduces to the mean squared probe norm ~ dim.
        n = 30
        a = np.e * np.eye(n)
        p = linalg.Preconditioner(
            low_rank=linalg.LowRankFactor(n, 1, np.zeros((n, 1))),
            noise_diagonal=np.ones(n))
        _, tridiagonals, ws = run_mpcg(a, np.ones(n), p, probe_count=400,
                                       max_iterations=n, seed=8)
        estimate = linalg.lanczos_logdet(tridiagonals, p, ws.probe_weights)
        assert abs(estimate - n) / n < 0.10

    def test_exact_when_probes_span(self):
        # Probes P^{1/2} e_i sqrt(n) make the whitened outer-product average
        # the identity, so full-depth quadrature telescopes exactly.
        rng = np.random.default_rng(11)
        n = 10
        raw = rng.standard_normal((n, n))
        a = raw @ raw.T + n * np.eye(n)
        p = make_preconditioner(a, rank=3, noise=0.05)
        half = scipy.linalg.sqrtm(p.densify()).real
        probes = half @ (np.sqrt(n) * np.eye(n))
        workspace = linalg.SolverWorkspace(
            probe_count=n, max_iterations=n, tolerance=0.0,
            probes=np.column_stack([rng.standard_normal(n), probes]))
        _, tridiagonals = linalg.mpcg_batch(lambda v: a @ v, workspace, p)
        estimate = linalg.lanczos_logdet(tridiagonals, p,
                                         workspace.probe_weights)
        assert abs(estimate - linalg.cholesky_logdet(a)) <= 1e-8

    def test_mgp_kernel_within_five_percent(self):
        kern, rhs, _ = random_mgp_kernel(200, seed=12)
        precond = make_preconditioner(kern.matrix, rank=30,
                                      noise=float(kern.noise_diagonal.min()))
        workspace = linalg.SolverWorkspace.build(
            rhs=rhs, precond=precond, probe_count=10, max_iterations=50,
            tolerance=1e-10, seed=0)
        _, tridiagonals = linalg.mpcg_batch(lambda v: kern.matrix @ v,
                                            workspace, precond)
        estimate = linalg.lanczos_logdet(tridiagonals, precond,
                                         workspace.probe_weights)
        exact = linalg.cholesky_logdet(kern.matrix)
        assert abs(estimate - exact) / abs(exact) < 0.05

    def test_non_positive_eigenvalue(self):
        bad = linalg.TridiagonalMatrix(size=2,
                                       diagonal=np.array([1.0, -0.5]),
                                       off_diagonal=np.array([0.0]))
        p = linalg.Preconditioner(
            low_rank=linalg.LowRankFactor(2, 1, np.zeros((2, 1))),
            noise_diagonal=np.ones(2))
        with pytest.raises(linalg.NonPositiveEigenvalue):
            linalg.lanczos_logdet([bad], p)


class TestStochasticTrace:
    def test_single_canonical_probe(self):
        solved = np.array([[1.0], [0.0], [0.0]])
        rhs_terms = np.array([[1.0], [0.0], [0.0]])
        assert linalg.stochastic_trace(solved, rhs_terms) == 1.0

    def test_identity_direction_estimates_dim(self):
        # dSigma = Sigma collapses the estimator to mean d' P^-1 d.
        kern, rhs, _ = random_mgp_kernel(150, seed=3)
        a = kern.matrix
        precond = make_preconditioner(a, rank=20,
                                      noise=float(kern.noise_diagonal.min()))
        workspace = linalg.SolverWorkspace.build(
            rhs=rhs, precond=precond, probe_count=30, max_iterations=100,
            tolerance=1e-10, seed=5)
        solutions, _ = linalg.mpcg_batch(lambda v: a @ v, workspace, precond)
        probes = workspace.probes[:, 1:]
        estimate = linalg.stochastic_trace(solutions[:, 1:],
                                           a @ precond.apply_inverse(probes))
        assert abs(estimate - a.shape[0]) / a.shape[0] < 0.10

    def test_kernel_derivative_direction_within_ten_percent(self):
        # Realistic direction: the kernel's own lengthscale derivative.
        kern, rhs, hp = random_mgp_kernel(50, seed=21)
        a = kern.matrix
        sqdist = np.subtract.outer(kern.times, kern.times) ** 2
        direction = kern.kernel_part * sqdist / hp.lengthscale**3
        precond = make_preconditioner(a, rank=15,
                                      noise=float(kern.noise_diagonal.min()))
        workspace = linalg.SolverWorkspace.build(
            rhs=rhs, precond=precond, probe_count=30, max_iterations=50,
            tolerance=1e-12, seed=3)
        solutions, _ = linalg.mpcg_batch(lambda v: a @ v, workspace, precond)
        probes = workspace.probes[:, 1:]
        estimate = linalg.stochastic_trace(
            solutions[:, 1:], direction @ precond.apply_inverse(probes))
        exact = np.trace(np.linalg.solve(a, direction))
        assert abs(estimate - exact) / abs(exact) < 0.10

    def test_dimension_mismatch(self):
        with pytest.raises(linalg.DimensionMismatch):
            linalg.stochastic_trace(np.ones((4, 2)), np.ones((4, 3)))
