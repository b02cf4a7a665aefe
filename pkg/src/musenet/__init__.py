"""Multi-task GP imputation, synthetic generation, and a missingness-aware
multi-branching self-attention classifier, with an mPCG-accelerated solver
core."""

from . import autodiff, bench, cli, encoder, linalg, metrics, mgp, records, \
    synthgen, training
from .encoder import EncoderConfig, EncoderParameters, forward, forward_batch
from .linalg import (Preconditioner, SolverWorkspace, TridiagonalMatrix,
                     cholesky_solve, lanczos_logdet, mpcg_batch,
                     pivoted_cholesky, sample_probes, stochastic_trace)
from .mgp import (FitConfig, MgpHyperparameters, SolverConfig,
                  assemble_covariance, fit_hyperparameters, impute_dataset,
                  impute_posterior_mean, nll_and_gradient)
from .records import ImputationResult, LongitudinalRecord, read_records, \
    write_records
from .synthgen import (ArmaSpec, DatasetConfig, engineer_features,
                       generate_dataset, simulate_arma, split_dataset)
from .training import (adamw_step, mb_loss, multi_branch_partition, predict,
                       train)

__version__ = "0.1.0"
