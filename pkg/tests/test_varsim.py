import numpy as np
import pytest

from conftest import make_library, uci_csv
from errors import ConfigurationError, ContractViolation
from tnn import ComponentAssignment, TrainParams, ingest_csv, nominal_thresholds, quantize, select_hidden_size, train
from varsim import VariationConfig, VariationReport, mc_accuracy, perturb_thresholds, requantize


@pytest.fixture
def toy_model(toy_csv):
    data = ingest_csv(toy_csv, "label")
    return data, train(data, 2, 3, TrainParams(epochs=5, batch_size=8, learning_rates=(0.01,)))


def test_zero_sigma_is_the_nominal_ladder():
    ladder = perturb_thresholds(3, 0.0, np.random.default_rng(0))
    assert (ladder == nominal_thresholds(3)).all()


def test_ladders_stay_sorted():
    ladders = perturb_thresholds(4, 0.3, np.random.default_rng(1), size=500)
    assert ladders.shape == (500, 15)
    assert (np.diff(ladders, axis=1) >= 0).all()


def test_one_bit_ladder_has_one_level():
    assert perturb_thresholds(1, 0.1, np.random.default_rng(2)).shape == (1,)


def test_perturbation_is_unbiased():
    ladders = perturb_thresholds(2, 0.05, np.random.default_rng(3), size=100_000)
    assert ladders.mean(axis=0) == pytest.approx(nominal_thresholds(2), rel=0.01)
    spread = ladders.std(axis=0) / nominal_thresholds(2)
    assert spread == pytest.approx([0.05] * 3, rel=0.05)


def test_requantize_with_nominal_ladders_matches_quantize():
    x = np.random.default_rng(4).uniform(0.0, 1.0, size=(1000, 3))
    ladders = np.tile(nominal_thresholds(2), (3, 1))
    assert (requantize(x, ladders) == quantize(x, 2)).all()


def test_requantize_checks_feature_count():
    with pytest.raises(ContractViolation):
        requantize(np.zeros((4, 3)), np.tile(nominal_thresholds(2), (2, 1)))


@pytest.mark.parametrize("kwargs", [{"sigma": -0.1}, {"trials": 0}])
def test_variation_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        VariationConfig(**kwargs)


def test_zero_sigma_reproduces_nominal_accuracy(toy_model):
    data, model = toy_model
    report = mc_accuracy(model, data, VariationConfig(sigma=0.0, trials=5))
    assert (report.trials == report.nominal).all()
    assert report.std == 0.0


def test_trials_are_seeded(toy_model):
    data, model = toy_model
    cfg = VariationConfig(sigma=0.2, trials=20, seed=7)
    a, b = mc_accuracy(model, data, cfg), mc_accuracy(model, data, cfg)
    assert (a.trials == b.trials).all()
    assert ((0.0 <= a.trials) & (a.trials <= 1.0)).all()


def test_approximate_design_under_variation(toy_model, lib):
    data, model = toy_model
    library = make_library(model, lib, approximate=False)
    assignment = ComponentAssignment.all_exact(model, library)
    exact = mc_accuracy(model, data, VariationConfig(sigma=0.1, trials=10, seed=3))
    same = mc_accuracy(model, data, VariationConfig(sigma=0.1, trials=10, seed=3), assignment, library)
    assert (exact.trials == same.trials).all()


def test_report_summary_and_frame():
    report = VariationReport(0.9, np.array([0.8, 0.9, 1.0]), 0.1)
    summary = report.summary()
    assert summary["mean"] == pytest.approx(0.9)
    assert (summary["min"], summary["max"], summary["trials"]) == (0.8, 1.0, 3)
    frame = report.to_frame()
    assert list(frame.columns) == ["trial", "accuracy"]
    assert len(frame) == 3


def test_empty_split_is_rejected(toy_model):
    data, model = toy_model
    data.test_idx = data.test_idx[:0]
    with pytest.raises(ContractViolation):
        mc_accuracy(model, data, VariationConfig(trials=2))


@pytest.mark.slow
@pytest.mark.parametrize("name", ["breast_cancer", "redwine"])
def test_uci_accuracy_spread_under_ten_percent_variation(name):
    data = ingest_csv(uci_csv(name), seed=0)
    model, _ = select_hidden_size(data, 4)
    exact = mc_accuracy(model, data, VariationConfig(sigma=0.0, trials=200))
    assert (exact.trials == exact.nominal).all()
    report = mc_accuracy(model, data, VariationConfig(sigma=0.1, trials=200, seed=1))
    assert report.std < 0.05
