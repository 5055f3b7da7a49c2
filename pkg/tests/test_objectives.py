import numpy as np
import pytest

from rtfgraph import autodiff as ad
from rtfgraph.errors import SignalError
from rtfgraph.metrics import si_sdr, stoi
from rtfgraph.objectives import (MAXIMIZE, OBJECTIVES, beamformer_output_array, evaluate_objective, objective,
                                 objective_and_gradient, soft_stoi_node, training_loss)
from tests.gradcheck import numeric_gradient, relative_error, sample_coords


def perturbed(example, seed, scale=0.02):
    rng = np.random.default_rng(seed)
    return example.oracle_features + scale * rng.standard_normal(example.oracle_features.shape)


def value_of(name, example):
    return lambda features: evaluate_objective(name, features, example).value


@pytest.mark.parametrize("name,tol", [("sisdr1", 1e-4), ("sisdr2", 1e-4), ("sbf", 1e-5), ("feature_mse", 1e-6)])
def test_objective_gradients(toy_example, name, tol):
    features = perturbed(toy_example, seed=1)
    _, grad = objective_and_gradient(name, features, toy_example)
    coords = sample_coords(features.size, 20, seed=2)
    numeric = numeric_gradient(value_of(name, toy_example), features, coords)
    assert relative_error(grad.reshape(-1)[coords], numeric) < tol


def test_soft_stoi_gradient(toy_example):
    features = perturbed(toy_example, seed=3, scale=0.05)
    _, grad = objective_and_gradient("stoi", features, toy_example)
    coords = sample_coords(features.size, 20, seed=4)
    numeric = numeric_gradient(value_of("stoi", toy_example), features, coords)
    assert relative_error(grad.reshape(-1)[coords], numeric) < 1e-3


def test_soft_stoi_gradient_on_waveform(toy_example, rng):
    est = toy_example.oracle_out + 0.1 * np.std(toy_example.oracle_out) * rng.standard_normal(toy_example.oracle_out.size)

    def fn(x):
        return float(soft_stoi_node(ad.Tape().constant(x), toy_example.clean_ref, toy_example.rate).value)

    tape = ad.Tape()
    node = tape.variable(est)
    tape.backward(soft_stoi_node(node, toy_example.clean_ref, toy_example.rate))
    coords = np.flatnonzero(np.abs(toy_example.clean_ref) > 0)[::400][:20]
    numeric = numeric_gradient(fn, est, coords)
    assert relative_error(node.grad[coords], numeric) < 1e-3


def test_sisdr2_peaks_at_oracle(toy_example):
    assert evaluate_objective("sisdr2", toy_example.oracle_features, toy_example).value == 150.0
    _, grad = objective_and_gradient("sisdr2", toy_example.oracle_features, toy_example)
    np.testing.assert_array_equal(grad, 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_sisdr2_decreases_away_from_oracle(toy_example, seed):
    direction = np.random.default_rng(100 + seed).standard_normal(toy_example.oracle_features.shape)
    values = [evaluate_objective("sisdr2", toy_example.oracle_features + t * direction, toy_example).value
              for t in (1e-3, 1e-2, 1e-1)]
    assert values[0] > values[1] > values[2]


def test_objectives_agree_with_metrics(toy_example):
    features = perturbed(toy_example, seed=5)
    out = beamformer_output_array(features, toy_example)
    assert evaluate_objective("sisdr1", features, toy_example).value == pytest.approx(
        si_sdr(toy_example.clean_ref, out), abs=1e-9)
    assert evaluate_objective("sisdr2", features, toy_example).value == pytest.approx(
        si_sdr(toy_example.oracle_out, out), abs=1e-9)
    assert evaluate_objective("stoi", features, toy_example).value == pytest.approx(
        stoi(toy_example.clean_ref, out), abs=0.02)


def test_soft_stoi_is_maximal_on_clean_reference(toy_example, rng):
    ref = toy_example.clean_ref
    best = float(soft_stoi_node(ad.Tape().constant(ref), ref).value)
    noisy = ref + 0.3 * np.std(ref) * rng.standard_normal(ref.size)
    assert best >= 0.999
    assert best > float(soft_stoi_node(ad.Tape().constant(noisy), ref).value)


def test_zero_features_give_finite_objectives(toy_example):
    zeros = np.zeros_like(toy_example.oracle_features)
    for name in OBJECTIVES:
        value, grad = objective_and_gradient(name, zeros, toy_example)
        assert np.isfinite(value)
        assert np.all(np.isfinite(grad))


def test_training_loss_signs(toy_example):
    features = perturbed(toy_example, seed=6)
    for name in OBJECTIVES:
        tape = ad.Tape()
        loss = training_loss(name)(tape, tape.constant(features), toy_example)
        expected = evaluate_objective(name, features, toy_example)
        assert expected.maximize == MAXIMIZE[name]
        assert float(loss.value) == pytest.approx(-expected.value if expected.maximize else expected.value)


def test_objective_registry_and_requirements(toy_example):
    with pytest.raises(ValueError):
        objective("pesq")
    bare = type(toy_example)(**{**toy_example.__dict__, "clean_ref": None, "sbf_source": None})
    for name in ("sisdr1", "stoi", "sbf"):
        with pytest.raises(SignalError):
            evaluate_objective(name, toy_example.oracle_features, bare)
    assert evaluate_objective("sisdr2", toy_example.oracle_features, bare).value == 150.0
