import json

import pytest

from conftest import make_dataset, random_corpus
from src import candidate_retrieval as cr
from src.candidate_retrieval import UserProfile
from src.exceptions import UnknownUserError


def _profile(user, items):
    return UserProfile(user, frozenset(items), ())


def test_similarity_examples():
    assert cr.user_similarity(_profile(0, {1, 2, 3}), _profile(1, {2, 3, 4})) == pytest.approx(2 / 9)
    assert cr.user_similarity(_profile(0, {1, 2}), _profile(1, {3, 4})) == 0.0
    assert cr.user_similarity(_profile(0, set()), _profile(1, {3})) == 0.0
    assert cr.user_similarity(_profile(0, {5}), _profile(1, {5})) == 1.0


def test_similarity_is_symmetric():
    a, b = _profile(0, {1, 2, 7}), _profile(1, {2, 7, 9, 11})
    assert cr.user_similarity(a, b) == cr.user_similarity(b, a)


def test_top_n_breaks_ties_by_user_index_and_skips_self():
    profiles = {
        0: _profile(0, {1, 2}),
        3: _profile(3, {1, 9}),
        1: _profile(1, {2, 8}),
        2: _profile(2, {7}),
    }
    result = cr.top_n_similar_users(profiles[0], profiles, N=5)
    assert [u for u, _ in result] == [1, 3]
    assert all(score == pytest.approx(0.25) for _, score in result)
    assert cr.top_n_similar_users(profiles[0], profiles, N=1) == [(1, 0.25)]


def test_toy_profiles_and_similar_users(toy_dataset):
    profiles = cr.build_profiles(toy_dataset)
    assert profiles[0].item_set == frozenset({1, 2, 3})
    assert profiles[1].item_set == frozenset({2, 3, 4, 7})
    top = cr.top_n_similar_users(profiles[0], profiles, N=10)
    assert [u for u, _ in top] == [1, 2]
    assert top[0][1] == pytest.approx(1 / 6)
    assert top[1][1] == pytest.approx(1 / 9)
    # bob and carol share nothing
    assert [u for u, _ in cr.top_n_similar_users(profiles[1], profiles)] == [0]


def test_sparse_table_matches_pairwise_scan():
    dataset = make_dataset(random_corpus(25, 40, 5, seed=7))
    table = cr.compute_similar_user_table(dataset, N=4)
    profiles = cr.build_profiles(dataset)
    for user in range(dataset.num_users):
        expected = cr.top_n_similar_users(profiles[user], profiles, N=4)
        got = table.get(user)
        assert [u for u, _ in got] == [u for u, _ in expected]
        assert [s for _, s in got] == pytest.approx([s for _, s in expected])


def test_candidate_sets_for_toy_user(toy_dataset):
    test_session = toy_dataset.test[0][0]
    sets = cr.build_candidate_sets(toy_dataset, 0, test_session.ordinal, N=10)
    assert [s.ordinal for s in sets.own_history] == [1, 2]
    assert all(s.user == 0 for s in sets.own_history)
    # bob (start 5), carol (9), bob (10_005), carol (10_009)
    assert [(s.user, s.ordinal) for s in sets.similar_users_sessions] == [(1, 1), (2, 1), (1, 2), (2, 2)]
    assert [u for u, _ in sets.similar_users] == [1, 2]


def test_history_only_holds_earlier_training_sessions(toy_dataset):
    sets = cr.build_candidate_sets(toy_dataset, 0, 2)
    assert [s.ordinal for s in sets.own_history] == [1]
    assert cr.build_candidate_sets(toy_dataset, 0, 1).own_history == ()


def test_pool_cap_keeps_most_recent(toy_dataset):
    sets = cr.build_candidate_sets(toy_dataset, 0, 4, max_candidate_sessions=2, max_history_sessions=1)
    assert [(s.user, s.ordinal) for s in sets.similar_users_sessions] == [(1, 2), (2, 2)]
    assert [s.ordinal for s in sets.own_history] == [2]


def test_user_without_overlap_gets_empty_pool():
    dataset = make_dataset([
        ("x", ["a", "b"], 0), ("x", ["b", "a"], 10_000),
        ("y", ["c", "d"], 1), ("y", ["d", "c"], 10_001),
    ])
    sets = cr.build_candidate_sets(dataset, 0, 3)
    assert sets.similar_users_sessions == ()
    assert sets.similar_users == ()


def test_unknown_user(toy_dataset):
    with pytest.raises(UnknownUserError):
        cr.build_candidate_sets(toy_dataset, 99, 1)
    with pytest.raises(UnknownUserError):
        cr.build_candidate_sets(toy_dataset, -1, 1)


def test_table_cache_roundtrip(toy_dataset, tmp_path):
    first = cr.load_or_compute_similar_user_table(toy_dataset, N=10, use_cache=True)
    cached = list((tmp_path / "cache").glob("similar_users_*_N10.json"))
    assert len(cached) == 1
    payload = json.loads(cached[0].read_text())
    assert payload["fingerprint"] == toy_dataset.fingerprint

    second = cr.load_or_compute_similar_user_table(toy_dataset, N=10, use_cache=True)
    assert second.to_dict() == first.to_dict()


def test_stale_cache_is_recomputed(toy_dataset, tmp_path):
    first = cr.load_or_compute_similar_user_table(toy_dataset, N=10, use_cache=True)
    path = next((tmp_path / "cache").glob("similar_users_*.json"))
    stale = first.to_dict()
    stale["fingerprint"] = "0" * 64
    stale["table"] = {}
    path.write_text(json.dumps(stale))
    again = cr.load_or_compute_similar_user_table(toy_dataset, N=10, use_cache=True)
    assert again.get(0) == first.get(0)


def test_retriever_memoises(toy_dataset):
    retriever = cr.CandidateRetriever(toy_dataset, N=10)
    assert retriever.candidate_sets(0, 4) is retriever.candidate_sets(0, 4)
