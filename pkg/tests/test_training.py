import json
from collections import Counter

import numpy as np
import pytest

from conftest import make_dataset
from src import insert_model, training
from src import tensor_core as tc
from src.exceptions import ArtifactMismatchError, ConfigError, NumericError
from src.training import AdamState, TrainConfig, TrainState


class _Untouchable(dict):
    def _fail(self, *args, **kwargs):
        raise AssertionError("training read the test split")

    __getitem__ = get = keys = items = values = __iter__ = __len__ = _fail


@pytest.fixture
def fast_config():
    return TrainConfig(batch_size=4, learning_rate=0.05, max_epochs=3, patience=10, seed=11,
                       eval_batch_size=8, num_similar_users=2)


def _single(name, value):
    store = tc.ParameterStore()
    store.add(name, value)
    return store


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(beta2=1.0).validate()
    assert TrainConfig.from_dict({"batch_size": 3, "other": 1}).batch_size == 3


def test_batches_cover_every_position_once(toy_dataset):
    batches = list(training.make_batches(toy_dataset, 3, seed=0))
    seen = Counter((inst.user, inst.ordinal, len(inst.context) + 1) for batch in batches for inst in batch)
    assert sorted(seen) == sorted(training.training_positions(toy_dataset))
    assert set(seen.values()) == {1}
    assert len(training.training_positions(toy_dataset)) == 9


def test_consecutive_positions_come_from_distinct_users(toy_dataset):
    for batch in training.make_batches(toy_dataset, 3, seed=5):
        assert len({inst.user for inst in batch}) == 3


@pytest.mark.parametrize("seed", range(50))
def test_uneven_users_still_get_distinct_batches(seed):
    # training positions per user: 1, 1, 2, 2
    dataset = make_dataset([("u0", ["a", "b"], 0), ("u1", ["b", "a"], 1),
                            ("u2", ["a", "b", "a"], 2), ("u3", ["b", "a", "b"], 3)])
    batches = list(training.make_batches(dataset, 3, seed=seed))
    assert [len(b) for b in batches] == [3, 3]
    for batch in batches:
        assert len({inst.user for inst in batch}) == 3


def test_users_repeat_only_when_too_few_remain():
    # positions per user: 3 and 1; the second batch cannot avoid a repeat
    dataset = make_dataset([("u0", ["a", "b", "a", "b"], 0), ("u1", ["b", "a"], 1)])
    batches = list(training.make_batches(dataset, 2, seed=0))
    users = [sorted(inst.user for inst in b) for b in batches]
    assert users == [[0, 1], [0, 0]]


def test_batch_order_depends_only_on_seed(toy_dataset):
    def targets(seed):
        return [[(i.user, i.ordinal, i.target) for i in b] for b in training.make_batches(toy_dataset, 2, seed)]

    assert targets(4) == targets(4)


def test_batches_carry_candidate_sets(toy_dataset):
    from src.candidate_retrieval import CandidateRetriever

    retriever = CandidateRetriever(toy_dataset, N=10)
    instances = [i for b in training.make_batches(toy_dataset, 4, 0, retriever) for i in b]
    first_alice = next(i for i in instances if i.user == 0 and i.ordinal == 1)
    assert first_alice.candidate_sets.own_history == ()
    assert first_alice.candidate_sets.similar_users_sessions


def test_adam_first_step_moves_by_learning_rate():
    store = _single("w", [1.0])
    state = AdamState()
    norm, clipped = training.adam_step(store, {"w": np.array([0.5])}, state, TrainConfig(learning_rate=0.1))
    assert (norm, clipped) == (0.5, False)
    assert store.value("w")[0] == pytest.approx(0.9, abs=1e-6)
    assert state.step == 1
    np.testing.assert_allclose(state.m["w"], [0.05])
    np.testing.assert_allclose(state.v["w"], [0.00025])


def test_adam_clips_by_global_norm():
    store = _single("w", [0.0, 0.0])
    state = AdamState()
    norm, clipped = training.adam_step(store, {"w": np.array([3.0, 4.0])}, state,
                                       TrainConfig(gradient_clip_norm=1.0))
    assert norm == pytest.approx(5.0)
    assert clipped
    np.testing.assert_allclose(state.m["w"], [0.06, 0.08])


def test_adam_rejects_non_finite_gradients():
    store = _single("mlp_out.W", [1.0, 2.0])
    with pytest.raises(NumericError) as info:
        training.adam_step(store, {"mlp_out.W": np.array([np.nan, 0.0])}, AdamState(), TrainConfig())
    assert info.value.parameter == "mlp_out.W"
    assert info.value.exit_code == 4
    np.testing.assert_array_equal(store.value("mlp_out.W"), [1.0, 2.0])


def test_early_stopping_trace():
    state = TrainState()
    scores = [0.1, 0.2, 0.2, 0.15, 0.19]
    decisions = [training.update_early_stopping(state, s, epoch, patience=3)
                 for epoch, s in enumerate(scores, start=1)]
    assert decisions == [False, False, False, False, True]
    assert (state.best_epoch, state.best_score) == (2, 0.2)


def test_train_state_survives_the_manifest():
    state = TrainState(epoch=2, step=7, best_score=0.3, best_epoch=1, clipped_steps=1,
                       rng_state=np.random.default_rng(3).bit_generator.state)
    state.adam = AdamState(step=7, m={"w": np.array([0.1])}, v={"w": np.array([0.2])})
    manifest = json.loads(json.dumps(state.to_manifest()))
    restored = TrainState.from_checkpoint(manifest, state.adam.to_arrays())
    assert restored.to_manifest() == state.to_manifest()
    np.testing.assert_array_equal(restored.adam.v["w"], [0.2])


def test_training_reduces_the_loss(toy_dataset, small_config, fast_config):
    fast_config.max_epochs = 8
    result = training.train(toy_dataset, small_config, fast_config, progress=False)
    losses = [record["loss"] for record in result.history]
    assert losses[-1] < losses[0]
    assert result.state.step == 8 * 3


def test_training_is_deterministic(toy_dataset, small_config, fast_config):
    small_config.dropout_rate = 0.3
    first = training.train(toy_dataset, small_config, fast_config, progress=False)
    second = training.train(toy_dataset, small_config, fast_config, progress=False)
    assert [r["loss"] for r in first.history] == [r["loss"] for r in second.history]
    for name in first.model.store.names():
        np.testing.assert_array_equal(first.model.store.value(name), second.model.store.value(name))


def test_resume_matches_uninterrupted_run(tmp_path, toy_dataset, small_config, fast_config):
    small_config.dropout_rate = 0.3
    straight = training.train(toy_dataset, small_config, fast_config, out_dir=tmp_path / "straight",
                              progress=False)

    fast_config.max_epochs = 1
    training.train(toy_dataset, small_config, fast_config, out_dir=tmp_path / "resumed", progress=False)
    fast_config.max_epochs = 3
    resumed = training.train(toy_dataset, small_config, fast_config, out_dir=tmp_path / "resumed",
                             resume=True, progress=False)

    assert resumed.state.epoch == straight.state.epoch == 3
    last_a = insert_model.load_checkpoint(tmp_path / "straight" / training.LAST_CHECKPOINT)[0]
    last_b = insert_model.load_checkpoint(tmp_path / "resumed" / training.LAST_CHECKPOINT)[0]
    for name in last_a.store.names():
        np.testing.assert_array_equal(last_a.store.value(name), last_b.store.value(name))
    log = (tmp_path / "resumed" / training.TRAIN_LOG).read_text().splitlines()
    assert [json.loads(line)["epoch"] for line in log] == [1, 2, 3]


def test_resume_without_checkpoint_fails(tmp_path, toy_dataset, small_config, fast_config):
    with pytest.raises(ArtifactMismatchError):
        training.train(toy_dataset, small_config, fast_config, out_dir=tmp_path, resume=True, progress=False)


def test_training_writes_checkpoints_and_log(tmp_path, toy_dataset, small_config, fast_config):
    fast_config.max_epochs = 2
    result = training.train(toy_dataset, small_config, fast_config, out_dir=tmp_path, progress=False)
    assert result.best_path.is_file() and result.last_path.is_file()
    _, manifest, arrays = insert_model.load_checkpoint(result.last_path, toy_dataset)
    assert manifest["train_state"]["epoch"] == 2
    assert any(key.startswith("adam_m.") for key in arrays)
    record = json.loads((tmp_path / training.TRAIN_LOG).read_text().splitlines()[0])
    assert set(record) >= {"epoch", "step", "loss", "val_recall@5", "val_mrr@20", "wall_time_s",
                           "grad_clip_norm", "clipped_steps"}


def test_training_never_reads_the_test_split(toy_dataset, small_config, fast_config):
    toy_dataset.test = _Untouchable(toy_dataset.test)
    fast_config.max_epochs = 1
    training.train(toy_dataset, small_config, fast_config, progress=False)
