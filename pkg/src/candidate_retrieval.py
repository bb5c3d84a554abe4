"""Candidate similar-session pools: the user's own history H and the sessions S of similar users."""
import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from src import utils
from src.exceptions import UnknownUserError

logger = logging.getLogger(__name__)

DEFAULT_NUM_SIMILAR_USERS = 10
DEFAULT_MAX_CANDIDATE_SESSIONS = 50


@dataclass(frozen=True)
class UserProfile:
    user: int
    item_set: frozenset
    sessions: tuple


@dataclass(frozen=True)
class CandidateSets:
    own_history: tuple
    similar_users_sessions: tuple
    similar_users: tuple

    @classmethod
    def empty(cls):
        return cls((), (), ())


def build_profiles(dataset):
    """One profile per user, from the training split only."""
    profiles = {}
    for user in range(dataset.num_users):
        sessions = tuple(dataset.train.get(user, ()))
        items = frozenset(i for s in sessions for i in s.items)
        profiles[user] = UserProfile(user, items, sessions)
    return profiles


def user_similarity(u_tau, u_c):
    """Shared items divided by the product of both item-set sizes; 0 when either set is empty."""
    if not u_tau.item_set or not u_c.item_set:
        return 0.0
    return len(u_tau.item_set & u_c.item_set) / (len(u_tau.item_set) * len(u_c.item_set))


def top_n_similar_users(u_c, profiles, N=DEFAULT_NUM_SIMILAR_USERS):
    """
    Pairwise scan: the N highest-scoring other users with score > 0,
    ties broken by ascending user index.
    """
    scored = []
    for user in sorted(profiles):
        if user == u_c.user:
            continue
        score = user_similarity(profiles[user], u_c)
        if score > 0:
            scored.append((user, score))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:N]


# ==============================================================================
# TOP-N TABLE (computed once per training run, optionally cached on disk)
# ==============================================================================

class SimilarUserTable:
    def __init__(self, table, n, fingerprint):
        self._table = table
        self.n = n
        self.fingerprint = fingerprint

    def get(self, user):
        return self._table.get(user, [])

    def to_dict(self):
        return {
            "fingerprint": self.fingerprint,
            "n": self.n,
            "table": {str(u): [[v, s] for v, s in pairs] for u, pairs in sorted(self._table.items())},
        }

    @classmethod
    def from_dict(cls, payload):
        table = {int(u): [(int(v), float(s)) for v, s in pairs] for u, pairs in payload["table"].items()}
        return cls(table, int(payload["n"]), payload["fingerprint"])


def _incidence_matrix(profiles, num_users):
    rows, cols = [], []
    for user, profile in profiles.items():
        for item in profile.item_set:
            rows.append(user)
            cols.append(item)
    num_items = (max(cols) + 1) if cols else 1
    data = np.ones(len(rows), dtype=np.int64)
    return sparse.csr_matrix((data, (rows, cols)), shape=(num_users, num_items))


def compute_similar_user_table(dataset, N=DEFAULT_NUM_SIMILAR_USERS):
    """All users' top-N lists at once via sparse intersections A·Aᵀ."""
    profiles = build_profiles(dataset)
    num_users = dataset.num_users
    incidence = _incidence_matrix(profiles, num_users)
    overlaps = (incidence @ incidence.T).tocsr()
    sizes = np.asarray(incidence.sum(axis=1)).reshape(-1).astype(np.int64)

    table = {}
    for user in range(num_users):
        row = overlaps.getrow(user)
        others, shared = row.indices, row.data
        keep = (others != user) & (shared > 0)
        others, shared = others[keep], shared[keep]
        if others.size == 0:
            table[user] = []
            continue
        scores = shared / (sizes[others] * sizes[user])
        order = np.lexsort((others, -scores))[:N]
        table[user] = [(int(others[k]), float(scores[k])) for k in order]
    return SimilarUserTable(table, N, dataset.fingerprint)


def _cache_path(fingerprint, N):
    return utils.cache_dir() / f"similar_users_{fingerprint[:16]}_N{N}.json"


def load_or_compute_similar_user_table(dataset, N=DEFAULT_NUM_SIMILAR_USERS, use_cache=True):
    path = _cache_path(dataset.fingerprint, N) if use_cache else None
    if path is not None and path.is_file():
        try:
            payload = json.loads(path.read_text())
            if payload.get("fingerprint") == dataset.fingerprint and int(payload.get("n", -1)) == N:
                logger.debug("Loaded similar-user table from %s", path)
                return SimilarUserTable.from_dict(payload)
            logger.info("Ignoring stale similar-user cache %s", path)
        except (ValueError, KeyError) as exc:
            logger.warning("Unreadable similar-user cache %s: %s", path, exc)
    table = compute_similar_user_table(dataset, N)
    if path is not None:
        path.write_text(json.dumps(table.to_dict(), sort_keys=True))
        logger.debug("Cached similar-user table at %s", path)
    return table


# ==============================================================================
# CANDIDATE SETS
# ==============================================================================

def build_candidate_sets(dataset, user, session_ordinal, N=DEFAULT_NUM_SIMILAR_USERS, table=None,
                         max_candidate_sessions=DEFAULT_MAX_CANDIDATE_SESSIONS, max_history_sessions=None):
    """
    H: the user's training sessions with ordinal < `session_ordinal`, in time
    order. S: training sessions of the top-N similar users, keeping only the
    `max_candidate_sessions` most recent (0/None keeps all).
    """
    if not 0 <= user < dataset.num_users:
        raise UnknownUserError(f"unknown user index {user}")
    history = [s for s in dataset.train.get(user, ()) if s.ordinal < session_ordinal]
    if max_history_sessions:
        history = history[-max_history_sessions:]

    if table is None:
        table = compute_similar_user_table(dataset, N)
    similar = table.get(user)[:N]
    pool = [s for other, _ in similar for s in dataset.train.get(other, ())]
    pool.sort(key=lambda s: (s.start_time, s.user, s.ordinal))
    if max_candidate_sessions:
        pool = pool[-max_candidate_sessions:]
    return CandidateSets(tuple(history), tuple(pool), tuple(similar))


class CandidateRetriever:
    """Builds candidate sets lazily and memoises them per (user, ordinal)."""

    def __init__(self, dataset, N=DEFAULT_NUM_SIMILAR_USERS, max_candidate_sessions=DEFAULT_MAX_CANDIDATE_SESSIONS,
                 max_history_sessions=None, table=None, use_cache=False):
        self.dataset = dataset
        self.N = N
        self.max_candidate_sessions = max_candidate_sessions
        self.max_history_sessions = max_history_sessions
        self.table = table or load_or_compute_similar_user_table(dataset, N, use_cache=use_cache)
        self._memo = {}

    def candidate_sets(self, user, session_ordinal):
        key = (user, session_ordinal)
        found = self._memo.get(key)
        if found is None:
            found = build_candidate_sets(
                self.dataset, user, session_ordinal, self.N, self.table,
                self.max_candidate_sessions, self.max_history_sessions,
            )
            self._memo[key] = found
        return found
