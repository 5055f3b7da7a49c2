from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

from rtfgraph import autodiff as ad
from rtfgraph.container import write_container
from rtfgraph.errors import CheckpointError, ShapeError, TrainingDivergedError
from rtfgraph.gcn import (PARAM_NAMES, Adam, GcnParams, LinearWarmupSchedule, ResumeState, TrainConfig,
                          TrainingExample, example_loss, gcn_forward, infer, load_checkpoint, message, save_checkpoint,
                          train)
from rtfgraph.manifold_graph import FeatureBank, QueryAttachment, attach_query, leave_one_out, self_attachment
from rtfgraph.objectives import training_loss
from rtfgraph.rtf_estimation import npm
from tests.gradcheck import numeric_gradient, relative_error, sample_coords

D = 4


def random_query(rng, mics=2, k=3, d=D):
    return QueryAttachment(
        center=rng.standard_normal((mics, d)),
        neighbor_ids=np.stack([rng.permutation(50)[:k] for _ in range(mics)]),
        neighbor_features=rng.standard_normal((mics, k, d)),
        distances=np.zeros((mics, k)),
    )


def squared_error(tape, out, target):
    return ad.sum_squares(ad.sub(out, tape.constant(target)))


def test_params_validation():
    params = GcnParams.init(D, seed=0)
    assert params.d == D
    np.testing.assert_array_equal(params.b1, 0.0)
    with pytest.raises(ShapeError):
        GcnParams(np.zeros((8, 8)), np.zeros(8), np.zeros((8, 8)), np.zeros(8), np.zeros((8, 3)), np.zeros(4))
    np.testing.assert_array_equal(GcnParams.init(D, seed=0).W1, params.W1)
    assert not np.allclose(GcnParams.init(D, seed=1).W1, params.W1)


def test_forward_is_mean_of_messages(rng):
    params = GcnParams.init(D, seed=2)
    center = rng.standard_normal(D)
    neighbors = rng.standard_normal((3, D))
    expected = np.mean([message(params, center, n) for n in neighbors], axis=0)
    np.testing.assert_allclose(gcn_forward(params, center, neighbors), expected, atol=1e-12)


def test_forward_is_bitwise_invariant_to_neighbor_order(rng):
    params = GcnParams.init(D, seed=3)
    center = rng.standard_normal(D)
    neighbors = rng.standard_normal((5, D))
    ids = np.array([11, 4, 7, 2, 9])
    reference = gcn_forward(params, center, neighbors, ids)
    reference_no_ids = gcn_forward(params, center, neighbors)
    for _ in range(10):
        perm = rng.permutation(5)
        np.testing.assert_array_equal(gcn_forward(params, center, neighbors[perm], ids[perm]), reference)
        np.testing.assert_array_equal(gcn_forward(params, center, neighbors[perm]), reference_no_ids)


def test_forward_rejects_empty_neighbourhood(rng):
    with pytest.raises(ValueError):
        gcn_forward(GcnParams.init(D, seed=0), rng.standard_normal(D), np.zeros((0, D)))


def test_infer_matches_per_graph_forward(rng):
    params = GcnParams.init(D, seed=4)
    query = random_query(rng)
    out = infer(params, query)
    assert out.shape == (2, D)
    for mic in range(2):
        np.testing.assert_allclose(
            out[mic], gcn_forward(params, query.center[mic], query.neighbor_features[mic], query.neighbor_ids[mic]),
            atol=1e-12)
    with pytest.raises(CheckpointError):
        infer(GcnParams.init(D + 1, seed=0), query)


def test_self_attachment_is_a_single_message(rng):
    params = GcnParams.init(D, seed=5)
    center = rng.standard_normal((2, D))
    out = infer(params, self_attachment(center))
    np.testing.assert_allclose(out[1], message(params, center[1], center[1]), atol=1e-12)


@pytest.mark.parametrize("name", ["W1", "b1", "W2", "W3", "b3"])
def test_parameter_gradients(rng, name):
    params = GcnParams.init(D, seed=6)
    params.b1 = 0.1 * rng.standard_normal(2 * D)
    params.b2 = 0.1 * rng.standard_normal(2 * D)
    example = TrainingExample("grad", random_query(rng), rng.standard_normal((2, D)))
    _, grads = example_loss(params, example, squared_error)

    def fn(value):
        trial = params.copy()
        setattr(trial, name, value)
        return example_loss(trial, example, squared_error)[0]

    base = getattr(params, name)
    coords = sample_coords(base.size, 20, seed=1)
    numeric = numeric_gradient(fn, base, coords)
    assert relative_error(grads[name].reshape(-1)[coords], numeric) < 1e-6


def test_schedule_warmup_and_decay():
    schedule = LinearWarmupSchedule(1.0, total_steps=10, warmup_ratio=0.2)
    assert schedule(0) == 0.0
    assert schedule(1) == pytest.approx(0.5)
    assert schedule(2) == pytest.approx(1.0)
    assert schedule(6) == pytest.approx(0.5)
    assert schedule(10) == 0.0
    assert LinearWarmupSchedule(1e-3, total_steps=4, warmup_ratio=0.0)(0) == pytest.approx(1e-3)


@pytest.mark.parametrize("total_steps", [1, 3, 10, 24])
def test_small_warmup_ratio_still_starts_at_zero(total_steps):
    schedule = LinearWarmupSchedule(1e-3, total_steps=total_steps, warmup_ratio=0.04)
    assert schedule.warmup_steps == 1
    assert schedule(0) == 0.0
    assert schedule(1) == pytest.approx(1e-3)


def test_adam_first_step_is_sign_step(rng):
    params = GcnParams.init(D, seed=7)
    before = params.copy()
    grads = {name: rng.standard_normal(value.shape) for name, value in params.as_dict().items()}
    optimizer = Adam(params)
    optimizer.step(params, grads, lr=0.01)
    for name in grads:
        np.testing.assert_allclose(getattr(params, name) - getattr(before, name), -0.01 * np.sign(grads[name]),
                                   atol=1e-8)
    assert optimizer.step_count == 1


def regression_examples(rng, count=8):
    examples = []
    for index in range(count):
        query = random_query(rng)
        examples.append(TrainingExample(f"ex{index}", query, query.neighbor_features.mean(axis=1)))
    return examples


def test_training_reduces_loss(rng):
    cfg = TrainConfig(learning_rate=3e-3, warmup_ratio=0.0, epochs=40, dropout_p=0.0, seed=1)
    result = train(GcnParams.init(D, seed=1), regression_examples(rng), squared_error, cfg, progress=False)
    assert len(result.log) == 40
    assert result.log.train_loss.iloc[-1] < 0.8 * result.log.train_loss.iloc[0]
    assert result.optimizer.step_count == 40 * 8
    assert result.schedule_step == 40 * 8


def test_training_is_deterministic(rng):
    examples = regression_examples(rng, 4)
    cfg = TrainConfig(learning_rate=1e-3, epochs=3, dropout_p=0.5, seed=9, batch_size=2)
    a = train(GcnParams.init(D, seed=0), examples, squared_error, cfg, progress=False)
    b = train(GcnParams.init(D, seed=0), examples, squared_error, cfg, progress=False)
    np.testing.assert_array_equal(a.last.W1, b.last.W1)


def test_training_keeps_best_validated_epoch(rng):
    scores = iter([0.1, 0.5, 0.3])
    snapshots = []

    def validate(params):
        snapshots.append(params.copy())
        return next(scores)

    cfg = TrainConfig(learning_rate=1e-3, warmup_ratio=0.0, epochs=3, dropout_p=0.0)
    result = train(GcnParams.init(D, seed=0), regression_examples(rng, 3), squared_error, cfg, validate, False)
    assert result.best_epoch == 1
    np.testing.assert_array_equal(result.best.W3, snapshots[1].W3)
    np.testing.assert_array_equal(result.last.W3, snapshots[2].W3)


def test_training_stops_on_nan(rng):
    def broken(tape, out, payload):
        return ad.total(ad.scale(out, np.nan))

    cfg = TrainConfig(epochs=1, dropout_p=0.0)
    with pytest.raises(TrainingDivergedError):
        train(GcnParams.init(D, seed=0), regression_examples(rng, 2), broken, cfg, progress=False)


def test_checkpoint_round_trip(tmp_path, rng):
    params = GcnParams.init(D, seed=8)
    optimizer = Adam(params)
    optimizer.step(params, {name: np.ones_like(v) for name, v in params.as_dict().items()}, 1e-3)
    path = tmp_path / "model.bgtc"
    save_checkpoint(path, params, {"K": 5, "M": 3, "loss": "sisdr2", "seed": 0, "epoch": 7}, optimizer)
    loaded = load_checkpoint(path)
    for name, value in params.as_dict().items():
        np.testing.assert_array_equal(getattr(loaded.params, name), value)
    assert loaded.meta["epoch"] == 7
    assert loaded.meta["adam_step"] == 1
    np.testing.assert_array_equal(loaded.optimizer_state["adam_m_W2"], optimizer.m["W2"])

    restored = Adam(loaded.params)
    restored.load_state(loaded.optimizer_state, loaded.meta["adam_step"])
    np.testing.assert_array_equal(restored.v["b3"], optimizer.v["b3"])


def test_checkpoint_errors(tmp_path):
    params = GcnParams.init(D, seed=0)
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "a.bgtc", params, {"K": 5})

    meta = {"schema_version": 1, "d": D, "K": 5, "M": 3, "loss": "sbf", "seed": 0, "epoch": 0}
    bad_shape = dict(params.as_dict(), W3=np.zeros((2 * D, D + 1)))
    write_container(tmp_path / "b.bgtc", bad_shape, meta)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "b.bgtc")

    write_container(tmp_path / "c.bgtc", params.as_dict(), dict(meta, schema_version=2))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c.bgtc")

    write_container(tmp_path / "d.bgtc", params.as_dict(), {"d": D})
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "d.bgtc")


class Interrupted(Exception):
    pass


def weight_norm_score(params):
    return -float(np.sum(params.W3 ** 2))


def test_resumed_training_matches_uninterrupted_run(tmp_path, rng):
    examples = regression_examples(rng, 4)
    cfg = TrainConfig(learning_rate=1e-3, warmup_ratio=0.25, epochs=3, dropout_p=0.5, seed=4, batch_size=2)
    full = train(GcnParams.init(D, seed=0), examples, squared_error, cfg, weight_norm_score, progress=False)

    meta = {"K": 5, "M": 3, "loss": "sisdr2", "seed": 4}
    last, best = tmp_path / "last.bgtc", tmp_path / "best.bgtc"

    def save_then_stop(state):
        save_checkpoint(last, state.params, {**meta, **state.progress_meta()}, state.optimizer())
        save_checkpoint(best, state.best, {**meta, "epoch": state.best_epoch})
        if state.next_epoch == 1:
            raise Interrupted

    with pytest.raises(Interrupted):
        train(GcnParams.init(D, seed=0), examples, squared_error, cfg, weight_norm_score, progress=False,
              on_epoch=save_then_stop)
    state = ResumeState.from_checkpoints(load_checkpoint(last), load_checkpoint(best))
    assert (state.next_epoch, state.step, len(state.history)) == (1, 2, 1)

    resumed = train(GcnParams.init(D, seed=99), examples, squared_error, cfg, weight_norm_score, progress=False,
                    resume=state)
    for name in PARAM_NAMES:
        np.testing.assert_array_equal(getattr(resumed.last, name), getattr(full.last, name))
        np.testing.assert_array_equal(getattr(resumed.best, name), getattr(full.best, name))
    assert resumed.best_epoch == full.best_epoch
    assert resumed.optimizer.step_count == full.optimizer.step_count == 6
    pd.testing.assert_frame_equal(resumed.log, full.log)


def test_resume_state_must_fit(tmp_path, rng):
    params = GcnParams.init(D, seed=0)
    state = ResumeState(params=params, optimizer_state=Adam(params).state(), step=2, next_epoch=1, best=params,
                        best_epoch=0, best_metric=0.0)
    cfg = TrainConfig(epochs=2, dropout_p=0.0, batch_size=2)
    with pytest.raises(ValueError, match="step 2"):
        train(params, regression_examples(rng, 2), squared_error, cfg, progress=False, resume=state)

    meta = {"K": 5, "M": 3, "loss": "sisdr2", "seed": 0, "epoch": 0}
    save_checkpoint(tmp_path / "plain.bgtc", params, meta)
    plain = load_checkpoint(tmp_path / "plain.bgtc")
    with pytest.raises(CheckpointError):
        ResumeState.from_checkpoints(plain, plain)
    with pytest.raises(CheckpointError):
        Adam(params).load_state({"adam_m_W1": np.zeros((2, 2))}, 1)


def manifold_features(theta, mics=2):
    """Smooth closed curve of (mics, D) features."""
    rows = [[np.cos(theta + m), np.sin(theta + m), 0.5 * np.cos(2 * theta), 0.5 * np.sin(2 * theta)]
            for m in range(mics)]
    return np.array(rows)


def test_training_lowers_npm_on_held_out_positions():
    thetas = np.linspace(0.0, np.pi, 31)
    features = np.stack([manifold_features(t) for t in thetas])
    bank_rows, held_out = np.arange(0, 31, 2), np.arange(1, 31, 2)
    bank = FeatureBank(features[bank_rows], bank_rows)
    loss = training_loss("feature_mse")
    examples = [TrainingExample(f"pos{pid}", leave_one_out(bank, int(pid), features[pid], 3),
                                SimpleNamespace(oracle_features=features[pid]))
                for pid in bank_rows]

    untrained = GcnParams.init(D, seed=5)
    cfg = TrainConfig(learning_rate=5e-3, warmup_ratio=0.0, epochs=80, dropout_p=0.0, seed=5)
    trained = train(untrained, examples, loss, cfg, progress=False).last

    def mean_npm(params):
        return np.mean([npm(infer(params, attach_query(None, bank, features[pid], 3)), features[pid])[1]
                        for pid in held_out])

    assert mean_npm(trained) <= mean_npm(untrained)
