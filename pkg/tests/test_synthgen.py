import numpy as np
import pytest
from scipy import stats

from musenet import synthgen
from musenet.records import write_records
from musenet.synthgen import ArmaSpec, BASELINE_SPECS, DatasetConfig


class TestSimulateArma:
    def test_white_noise_variance(self):
        spec = ArmaSpec(0, 0, ())
        series = synthgen.simulate_arma(spec, 10000, seed=0)
        assert abs(series.var() - 1.0) < 0.10

    def test_ar1_closed_form_variance(self):
        spec = ArmaSpec(1, 0, (0.5,))
        series = synthgen.simulate_arma(spec, 50000, seed=1)
        expected = 1.0 / (1.0 - 0.25)
        assert abs(series.var() - expected) / expected < 0.10

    def test_table_baseline_specs_run(self):
        for spec in BASELINE_SPECS:
            series = synthgen.simulate_arma(spec, 200, seed=3)
            assert series.shape == (200,)
            assert np.all(np.isfinite(series))

    def test_deterministic_per_seed(self):
        spec = BASELINE_SPECS[0]
        a = synthgen.simulate_arma(spec, 100, seed=9)
        b = synthgen.simulate_arma(spec, 100, seed=9)
        assert np.array_equal(a, b)

    def test_stationarity_flags(self):
        # first and third baselines carry a unit/inside-unit-circle AR root
        assert not BASELINE_SPECS[0].is_stationary()
        assert BASELINE_SPECS[1].is_stationary()
        assert not BASELINE_SPECS[2].is_stationary()

    def test_coefficient_count_validated(self):
        with pytest.raises(synthgen.ConfigInvalid):
            ArmaSpec(2, 1, (0.5,))


class TestEngineerFeatures:
    def test_negative_scaling_of_first_base(self):
        ones = np.ones(5)
        series = synthgen.engineer_features(ones, ones, ones,
                                            positive_class=False)
        np.testing.assert_allclose(series[3], 0.8 * ones)

    def test_positive_scaling_of_first_base(self):
        ones = np.ones(5)
        series = synthgen.engineer_features(ones, ones, ones,
                                            positive_class=True)
        np.testing.assert_allclose(series[3], 1.1 * ones)

    def test_product_variable_formula(self):
        rng = np.random.default_rng(2)
        b1, b2, b3 = rng.standard_normal((3, 20))
        series = synthgen.engineer_features(b1, b2, b3, positive_class=False)
        np.testing.assert_allclose(series[7], b1 * b2 + b3 * (0.8 * b1))

    def test_all_formulas_against_direct_evaluation(self):
        rng = np.random.default_rng(5)
        b1, b2, b3 = rng.standard_normal((3, 10))
        neg = synthgen.engineer_features(b1, b2, b3, positive_class=False)
        pos = synthgen.engineer_features(b1, b2, b3, positive_class=True)
        np.testing.assert_allclose(neg[0], b1)
        np.testing.assert_allclose(neg[4], b1 + b2)
        np.testing.assert_allclose(neg[5], b3 + 0.8 * b1)
        np.testing.assert_allclose(neg[6], b1 + b2 + b3)
        np.testing.assert_allclose(neg[8], b3 + 0.8 * b1 + b1 * b2)
        np.testing.assert_allclose(neg[9], -(b1 + b2) + neg[8])
        np.testing.assert_allclose(pos[5], b3 + 1.1 * b1)
        np.testing.assert_allclose(pos[7], b1 * b2 + b3 * (1.1 * b1))
        np.testing.assert_allclose(pos[8],
                                   1.1 * b3 + 1.1 * (1.1 * b1) + b1 * b2)
        np.testing.assert_allclose(pos[9], -(b1 + b2) + pos[8])

    def test_length_mismatch(self):
        with pytest.raises(synthgen.LengthMismatch):
            synthgen.engineer_features(np.ones(3), np.ones(4), np.ones(3),
                                       positive_class=False)


class TestGenerateDataset:
    def test_structure_small(self):
        config = DatasetConfig(n_obs=40, sub_time=12, n_variables=10,
                               n_samples=60, percent_negative=0.9, seed=2)
        dataset = synthgen.generate_dataset(config)
        assert len(dataset.records) == 60
        labels = [r.label for r in dataset.records]
        assert labels.count(0) == 54
        for record in dataset.records:
            assert record.values.shape == (12, 10)
            assert np.all(np.diff(record.times) > 0)
            missing_frac = 1.0 - record.observed.mean(axis=0)
            assert np.all(missing_frac >= 0.30 - 1e-9)
            assert np.all(missing_frac <= 0.60 + 1e-9)

    def test_observed_count_follows_rate(self):
        config = DatasetConfig(n_obs=30, sub_time=20, n_variables=4,
                               n_samples=10, seed=3)
        dataset = synthgen.generate_dataset(config)
        for record in dataset.records:
            observed = record.observed.sum(axis=0)
            # each variable hides round(rate * subTime) cells
            assert np.all(observed >= 20 - 12)
            assert np.all(observed <= 20 - 6)

    def test_all_negative_when_fraction_one(self):
        config = DatasetConfig(n_obs=20, sub_time=5, n_variables=10,
                               n_samples=25, percent_negative=1.0, seed=4)
        dataset = synthgen.generate_dataset(config)
        assert all(r.label == 0 for r in dataset.records)

    def test_byte_identical_per_seed(self, tmp_path):
        config = DatasetConfig(n_obs=25, sub_time=8, n_variables=10,
                               n_samples=12, seed=6)
        for name in ("a", "b"):
            write_records(tmp_path / name,
                          synthgen.generate_dataset(config).records)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_nonstationary_flags_reported(self):
        config = DatasetConfig(n_obs=20, sub_time=5, n_samples=2, seed=0)
        dataset = synthgen.generate_dataset(config)
        assert len(dataset.nonstationary_flags) == 2

    def test_invalid_config(self):
        with pytest.raises(synthgen.ConfigInvalid):
            DatasetConfig(n_obs=10, sub_time=20, n_samples=5).validate()
        with pytest.raises(synthgen.ConfigInvalid):
            DatasetConfig(percent_negative=0.0, n_samples=5).validate()

    def test_classes_differ_on_scaled_variables(self):
        # The class contrast on variables 4 and 9 is a scale factor and the
        # raw processes are zero-mean, so the two-sample mean test runs on
        # per-record amplitude statistics.  Variable 9 rides the exploding
        # third baseline, whose random amplitude would swamp a raw test;
        # normalizing by that baseline isolates the 1.1-vs-1.0 factor.
        config = DatasetConfig(n_obs=60, sub_time=25, n_variables=10,
                               n_samples=1000, percent_negative=0.5, seed=8,
                               missing_rate_range=(0.0, 0.0))
        records = synthgen.generate_dataset(config).records

        def amplitude(record, var):
            return np.abs(record.values[:, var]).mean()

        def scale_ratio(record):
            return (np.log(np.abs(record.values[:, 8]) + 1e-300).mean()
                    - np.log(np.abs(record.values[:, 2]) + 1e-300).mean())

        for statistic in (lambda r: amplitude(r, 3), scale_ratio):
            neg = [statistic(r) for r in records if r.label == 0][:500]
            pos = [statistic(r) for r in records if r.label == 1][:500]
            _, p_value = stats.ttest_ind(pos, neg, equal_var=False)
            assert p_value < 0.01


class TestSplitDataset:
    def _records(self, n, positive_fraction, seed=0):
        config = DatasetConfig(n_obs=15, sub_time=5, n_variables=4,
                               n_samples=n,
                               percent_negative=1.0 - positive_fraction,
                               seed=seed)
        return synthgen.generate_dataset(config).records

    def test_sizes_and_stratification(self):
        records = self._records(200, positive_fraction=0.1)
        train, val, test = synthgen.split_dataset(records, (0.8, 0.1, 0.1),
                                                  seed=1)
        assert (len(train), len(val), len(test)) == (160, 20, 20)
        assert sum(r.label for r in train) == 16
        assert sum(r.label for r in val) == 2
        assert sum(r.label for r in test) == 2

    def test_disjoint_and_complete(self):
        records = self._records(100, positive_fraction=0.2)
        parts = synthgen.split_dataset(records, (0.5, 0.25, 0.25), seed=2)
        ids = [r.patient_id for part in parts for r in part]
        assert len(ids) == 100
        assert len(set(ids)) == 100

    def test_everything_in_train(self):
        records = self._records(30, positive_fraction=0.2)
        train, val, test = synthgen.split_dataset(records, (1.0, 0.0, 0.0),
                                                  seed=3)
        assert len(train) == 30 and not val and not test

    def test_deterministic(self):
        records = self._records(50, positive_fraction=0.3)
        first = synthgen.split_dataset(records, (0.6, 0.2, 0.2), seed=4)
        second = synthgen.split_dataset(records, (0.6, 0.2, 0.2), seed=4)
        for a, b in zip(first, second):
            assert [r.patient_id for r in a] == [r.patient_id for r in b]

    def test_fraction_sum_invalid(self):
        with pytest.raises(synthgen.FractionSumInvalid):
            synthgen.split_dataset([], (0.5, 0.2, 0.2), seed=0)
