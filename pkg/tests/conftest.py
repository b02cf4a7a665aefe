"""Shared helpers: records simulated from a known MGP prior and tiny fixtures."""

import numpy as np
import pytest

from musenet import mgp
from musenet.records import LongitudinalRecord


def simulate_mgp_record(hp, n_times, seed, patient_id="sim", label=0,
                        missing_fraction=0.0, time_span=None):
    """Draw a record exactly from the MGP prior with the given parameters."""
    rng = np.random.default_rng(seed)
    span = time_span if time_span is not None else float(n_times)
    times = np.sort(rng.uniform(0.0, span, n_times))
    times = times + np.arange(n_times) * 1e-9    # no duplicate stamps
    m = hp.n_variables
    scaffold = LongitudinalRecord.from_dense(patient_id, times,
                                             np.zeros((n_times, m)), label)
    kern = mgp.assemble_covariance(scaffold, hp)
    draw = np.linalg.cholesky(kern.matrix) @ rng.standard_normal(n_times * m)
    values = np.zeros((n_times, m))
    for value, (t, var) in zip(draw, kern.ordered_observations):
        values[t, var] = value
    if missing_fraction <= 0.0:
        return LongitudinalRecord.from_dense(patient_id, times, values, label)
    observed = rng.random((n_times, m)) >= missing_fraction
    # Keep at least one observed cell so the kernel stays definable.
    if not observed.any():
        observed[0, 0] = True
    masked = np.where(observed, values, np.nan)
    return LongitudinalRecord(patient_id=patient_id, times=times,
                              values=masked, label=label, observed=observed), values


@pytest.fixture
def two_task_hp():
    return mgp.MgpHyperparameters(
        task_factor=np.array([[1.0, 0.0], [0.6, 0.8]]),
        noise_variances=np.array([0.1, 0.2]),
        lengthscale=2.0)


@pytest.fixture
def tiny_record():
    rng = np.random.default_rng(7)
    times = np.sort(rng.uniform(0, 10, 4))
    values = rng.standard_normal((4, 2))
    observed = np.array([[1, 1], [1, 0], [0, 1], [1, 1]], dtype=bool)
    return LongitudinalRecord(patient_id="tiny", times=times,
                              values=np.where(observed, values, np.nan),
                              label=1, observed=observed)
