"""Desk-scale training properties. Minutes, not seconds: run with `pytest -m slow`."""
import numpy as np
import pytest

from conftest import make_dataset
from src import evaluation, insert_model, training
from src import tensor_core as tc
from src.candidate_retrieval import CandidateRetriever
from src.evaluation import EvalConfig

pytestmark = pytest.mark.slow


def _chain_corpus(num_users, num_items, sessions_per_user, seed):
    """Every session follows one global successor permutation, so context alone fixes the next item."""
    rng = np.random.default_rng(seed)
    successor = rng.permutation(num_items)
    raw = []
    for u in range(num_users):
        for s in range(sessions_per_user):
            item = int(rng.integers(num_items))
            items = []
            for _ in range(int(rng.integers(3, 6))):
                items.append(f"i{item}")
                item = int(successor[item])
            raw.append((f"u{u:02d}", items, 10_000 * s + u))
    return make_dataset(raw)


def _cluster_corpus(num_clusters, users_per_cluster, sessions_per_user, seed, num_shared=6):
    """
    Every cluster owns a transition table: shared item k leads to the cluster's
    private item k, which leads on to the shared item picked by the cluster's own
    permutation. The second item is only predictable from the user's history or
    neighbourhood.
    """
    rng = np.random.default_rng(seed)
    shared = [f"s{k}" for k in range(num_shared)]
    raw = []
    for c in range(num_clusters):
        private = [f"c{c}p{k}" for k in range(num_shared)]
        onward = rng.permutation(num_shared)
        for u in range(users_per_cluster):
            user = f"c{c}u{u}"
            for s in range(sessions_per_user):
                k = int(rng.integers(num_shared))
                items = [shared[k], private[k]]
                if rng.random() < 0.5:
                    items.append(shared[int(onward[k])])
                raw.append((user, items, 10_000 * s + 100 * c + u))
    return make_dataset(raw)


def _sampled_numeric_gradient(fn, array, indices, h=1e-4):
    flat = array.reshape(-1)
    out = np.zeros(len(indices))
    for n, i in enumerate(indices):
        saved = flat[i]
        flat[i] = saved + h
        plus = fn()
        flat[i] = saved - h
        minus = fn()
        flat[i] = saved
        out[n] = (plus - minus) / (2 * h)
    return out


@pytest.mark.parametrize("loss_mode", insert_model.LOSS_MODES)
def test_full_model_gradients_on_a_small_corpus(loss_mode):
    rng = np.random.default_rng(8)
    stream = [f"i{v}" for v in rng.permutation(19)] + [f"i{v}" for v in rng.integers(0, 19, size=20)]
    raw, cursor = [], 0
    for s in range(12):
        raw.append((f"u{s % 3}", stream[cursor:cursor + 3], 10_000 * (s // 3) + s % 3))
        cursor += 3
    dataset = make_dataset(raw)
    assert dataset.num_items == 20

    config = insert_model.ModelConfig(embed_dim=8, item_vocab=dataset.num_items, user_vocab=dataset.num_users,
                                      dropout_rate=0.0, loss_mode=loss_mode, seed=2)
    store = insert_model.init_parameters(config)
    retriever = CandidateRetriever(dataset, N=2)
    instances = [insert_model.make_instance(s, t, retriever) for s in dataset.sessions("train")
                 for t in range(2, len(s) + 1)]
    batch = insert_model.collate(instances)

    tape = tc.Tape()
    trace = insert_model.forward_batch(batch, store, config, tape=tape)
    tc.backward(tape, insert_model.loss(trace, batch.targets, config))

    def loss_value():
        return insert_model.loss(insert_model.forward_batch(batch, store, config), batch.targets, config).item()

    for name in store.names():
        size = store.value(name).size
        picks = rng.choice(size, size=min(size, 24), replace=False)
        numeric = _sampled_numeric_gradient(loss_value, store.value(name), picks)
        np.testing.assert_allclose(store.grad(name).reshape(-1)[picks], numeric, rtol=1e-4, atol=1e-7,
                                   err_msg=name)


def test_full_model_memorises_training_transitions():
    dataset = _chain_corpus(num_users=20, num_items=50, sessions_per_user=10, seed=0)
    model_config = insert_model.ModelConfig(embed_dim=16, dropout_rate=0.0, seed=0)
    train_config = training.TrainConfig(batch_size=32, learning_rate=0.02, max_epochs=80, patience=80,
                                        num_similar_users=3, max_candidate_sessions=10, seed=0)
    result = training.train(dataset, model_config, train_config, progress=False)
    retriever = CandidateRetriever(dataset, N=3, max_candidate_sessions=10)
    report = evaluation.evaluate_model(result.model, dataset, "train", EvalConfig(ks=[1]), retriever=retriever)
    assert report.overall[1]["recall"] >= 0.9


def _test_mrr5(dataset, variant, seed):
    model_config = insert_model.ModelConfig(embed_dim=16, dropout_rate=0.1, variant=variant, seed=seed)
    train_config = training.TrainConfig(batch_size=32, learning_rate=0.02, max_epochs=20, patience=20,
                                        num_similar_users=9, max_candidate_sessions=20, seed=seed)
    result = training.train(dataset, model_config, train_config, progress=False)
    retriever = CandidateRetriever(dataset, N=9, max_candidate_sessions=20) if result.model.pools else None
    report = evaluation.evaluate_model(result.model, dataset, "test", EvalConfig(ks=[5]), retriever=retriever)
    return report.overall[5]["mrr"]


def test_collaborative_priors_beat_the_context_only_variant():
    dataset = _cluster_corpus(num_clusters=10, users_per_cluster=10, sessions_per_user=10, seed=3)
    wins_full, wins_o = 0, 0
    for seed in range(5):
        context_only = _test_mrr5(dataset, "c", seed)
        wins_full += _test_mrr5(dataset, "full", seed) > context_only
        wins_o += _test_mrr5(dataset, "o", seed) > context_only
    assert wins_full >= 4
    assert wins_o >= 4
