"""From raw (user, item, timestamp) logs to the per-user split session corpus."""
import itertools
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd

from src import file_loader, utils
from src.exceptions import ConfigError, DataError, EmptyDatasetError

logger = logging.getLogger(__name__)

PAD_ITEM = "<pad>"
SPLITS = ("train", "valid", "test")

# Dataset statistics as published for the two public corpora (reported next to
# our own counts, never asserted).
STATS_REFERENCE = {
    "delicious": {"users": 1643, "items": 5005, "sessions": 45603, "interactions": 257639,
                  "interactions_per_session": 5.6, "interactions_per_user": 156.8},
    "reddit": {"users": 18173, "items": 13521, "sessions": 1119225, "interactions": 2868050,
               "interactions_per_session": 2.6, "interactions_per_user": 157.8},
}


# ==============================================================================
# 1. TYPES
# ==============================================================================

@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass(frozen=True)
class Session:
    """
    Time-ordered items of one user. Before `split_per_user` the user and items
    are raw ids; afterwards they are vocabulary indices.
    """
    user: object
    items: tuple
    start_time: int
    ordinal: int
    timestamps: tuple = ()

    def __len__(self):
        return len(self.items)


class Vocabulary:
    """Bidirectional token <-> index map; optional padding token at index 0."""

    def __init__(self, tokens=(), padding=None):
        self._tokens = []
        self._index = {}
        self.padding = padding
        if padding is not None:
            self.add(padding)
        for token in tokens:
            self.add(token)

    def add(self, token):
        if token not in self._index:
            self._index[token] = len(self._tokens)
            self._tokens.append(token)
        return self._index[token]

    def index(self, token):
        return self._index[token]

    def token(self, index):
        return self._tokens[index]

    def tokens(self):
        return list(self._tokens)

    def __contains__(self, token):
        return token in self._index

    def __len__(self):
        return len(self._tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self._tokens == other._tokens and self.padding == other.padding


@dataclass
class DataConfig:
    idle_threshold_s: int = 3600
    min_freq: int = 10
    max_session_len: int = 20
    test_fraction: float = 0.1
    valid_fraction: float = 0.1
    input_format: str = "tsv"

    def validate(self):
        if self.idle_threshold_s < 0:
            raise ConfigError("idle_threshold_s must be >= 0")
        if self.min_freq < 1:
            raise ConfigError("min_freq must be >= 1")
        if self.max_session_len < 2:
            raise ConfigError("max_session_len must be >= 2")
        _check_fractions(self.test_fraction, self.valid_fraction)
        file_loader.resolve_format(self.input_format)
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class SessionDataset:
    users: Vocabulary
    items: Vocabulary
    train: dict
    valid: dict
    test: dict
    config: dict = field(default_factory=dict)
    fingerprint: str = ""

    def split(self, name):
        if name not in SPLITS:
            raise DataError(f"unknown split '{name}', expected one of {SPLITS}")
        return getattr(self, name)

    def sessions(self, split):
        """All sessions of a split in (user index, ordinal) order."""
        by_user = self.split(split)
        return [s for user in sorted(by_user) for s in by_user[user]]

    @property
    def num_users(self):
        return len(self.users)

    @property
    def num_items(self):
        """Item vocabulary size including the padding index."""
        return len(self.items)

    @property
    def stats(self):
        return corpus_stats(self)


# ==============================================================================
# 2. PIPELINE OPERATIONS
# ==============================================================================

def load_interactions(path, format_spec="tsv"):
    """Reads a log and returns interactions sorted by (user, timestamp, input order)."""
    frame = file_loader.read_interaction_frame(path, format_spec)
    frame = frame.sort_values(["user_id", "timestamp"], kind="mergesort")
    return [Interaction(u, i, int(t)) for u, i, t in
            zip(frame["user_id"], frame["item_id"], frame["timestamp"])]


def sessionize(interactions, idle_threshold_s=3600):
    """
    Splits each user's time-sorted stream wherever the gap to the previous
    interaction is strictly greater than the idle threshold.
    """
    sessions = []
    for user, events in itertools.groupby(interactions, key=lambda e: e.user_id):
        ordinal = 0
        items, stamps = [], []
        previous = None
        for event in events:
            if previous is not None and event.timestamp - previous > idle_threshold_s:
                ordinal += 1
                sessions.append(Session(user, tuple(items), stamps[0], ordinal, tuple(stamps)))
                items, stamps = [], []
            items.append(event.item_id)
            stamps.append(event.timestamp)
            previous = event.timestamp
        if items:
            ordinal += 1
            sessions.append(Session(user, tuple(items), stamps[0], ordinal, tuple(stamps)))
    return sessions


def filter_corpus(sessions, min_freq=10, max_session_len=20):
    """
    Removes users and items with total frequency below `min_freq` and
    sessions whose length falls outside [2, max_session_len], repeating
    until nothing changes.
    """
    current = list(sessions)
    rounds = 0
    while True:
        rounds += 1
        user_freq, item_freq = Counter(), Counter()
        for s in current:
            user_freq[s.user] += len(s.items)
            item_freq.update(s.items)
        rare_users = {u for u, c in user_freq.items() if c < min_freq}
        rare_items = {i for i, c in item_freq.items() if c < min_freq}

        kept, changed = [], False
        for s in current:
            if s.user in rare_users:
                changed = True
                continue
            keep = [k for k, item in enumerate(s.items) if item not in rare_items]
            if len(keep) < 2 or len(keep) > max_session_len:
                changed = True
                continue
            if len(keep) != len(s.items):
                changed = True
                stamps = tuple(s.timestamps[k] for k in keep) if s.timestamps else ()
                s = replace(s, items=tuple(s.items[k] for k in keep), timestamps=stamps,
                            start_time=stamps[0] if stamps else s.start_time)
            kept.append(s)
        current = kept
        if not changed:
            break

    if not current:
        raise EmptyDatasetError("every session was removed by the frequency/length filters")
    logger.info("Filtering reached a fixed point after %d rounds: %d sessions kept", rounds, len(current))
    return current


def _check_fractions(test_fraction, valid_fraction):
    for name, value in (("test_fraction", test_fraction), ("valid_fraction", valid_fraction)):
        if not 0.0 < value < 1.0:
            raise ConfigError(f"{name} must lie in (0, 1), got {value}")
    if test_fraction + valid_fraction >= 1.0:
        raise ConfigError("test_fraction + valid_fraction must be < 1")


def _ceil_count(fraction, count):
    # tolerance keeps e.g. 0.1 * 30 at 3 rather than 4
    return int(math.ceil(fraction * count - 1e-9))


def split_counts(count, test_fraction=0.1, valid_fraction=0.1):
    """(train, valid, test) session counts for a user with `count` sessions."""
    if count < 3:
        return count, 0, 0
    n_test = _ceil_count(test_fraction, count)
    n_valid = _ceil_count(valid_fraction, count)
    while n_test + n_valid > count - 1:
        if n_valid > 0:
            n_valid -= 1
        else:
            n_test -= 1
    return count - n_valid - n_test, n_valid, n_test


def split_per_user(sessions, test_fraction=0.1, valid_fraction=0.1, config=None):
    """
    Builds vocabularies (first appearance in time order, item index 0 is
    padding), renumbers each user's sessions 1..n in time order and assigns
    the last sessions to test, the ones before them to valid, the rest to train.
    """
    _check_fractions(test_fraction, valid_fraction)
    ordered = sorted(sessions, key=lambda s: (s.start_time, str(s.user), s.ordinal))
    users = Vocabulary()
    items = Vocabulary(padding=PAD_ITEM)
    for s in ordered:
        users.add(s.user)
        for item in s.items:
            items.add(item)

    per_user = {}
    for s in ordered:
        per_user.setdefault(users.index(s.user), []).append(s)

    splits = {name: {} for name in SPLITS}
    for user in sorted(per_user):
        indexed = [
            Session(user, tuple(items.index(i) for i in s.items), s.start_time, ordinal,
                    tuple(s.timestamps) or (s.start_time,) * len(s.items))
            for ordinal, s in enumerate(per_user[user], start=1)
        ]
        n_train, n_valid, _ = split_counts(len(indexed), test_fraction, valid_fraction)
        parts = {
            "train": indexed[:n_train],
            "valid": indexed[n_train:n_train + n_valid],
            "test": indexed[n_train + n_valid:],
        }
        for name, part in parts.items():
            if part:
                splits[name][user] = part

    dataset = SessionDataset(users, items, splits["train"], splits["valid"], splits["test"],
                             config=dict(config or {}))
    dataset.fingerprint = dataset_fingerprint(dataset)
    return dataset


def build_dataset(interactions, config):
    """sessionize -> filter_corpus -> split_per_user under one DataConfig."""
    config.validate()
    sessions = sessionize(interactions, config.idle_threshold_s)
    sessions = filter_corpus(sessions, config.min_freq, config.max_session_len)
    return split_per_user(sessions, config.test_fraction, config.valid_fraction, config=config.to_dict())


def _stats_row(sessions):
    lengths = [len(s.items) for s in sessions]
    n_sessions = len(lengths)
    n_interactions = int(np.sum(lengths)) if lengths else 0
    n_users = len({s.user for s in sessions})
    n_items = len({i for s in sessions for i in s.items})
    return {
        "users": n_users,
        "items": n_items,
        "sessions": n_sessions,
        "interactions": n_interactions,
        "interactions_per_session": n_interactions / n_sessions if n_sessions else 0.0,
        "interactions_per_user": n_interactions / n_users if n_users else 0.0,
    }


def corpus_stats(dataset):
    """Table-style counts for the whole corpus and for each split."""
    rows = {name: _stats_row(dataset.sessions(name)) for name in SPLITS}
    rows = {"all": _stats_row([s for name in SPLITS for s in dataset.sessions(name)]), **rows}
    return pd.DataFrame.from_dict(rows, orient="index")


# ==============================================================================
# 3. PERSISTENCE
# ==============================================================================

def _dataset_arrays(dataset):
    arrays = {
        "vocab.users": np.array(dataset.users.tokens(), dtype=object),
        "vocab.items": np.array(dataset.items.tokens(), dtype=object),
    }
    for name in SPLITS:
        sessions = dataset.sessions(name)
        lengths = [len(s.items) for s in sessions]
        arrays[f"{name}.users"] = np.array([s.user for s in sessions], dtype="<i8")
        arrays[f"{name}.ordinals"] = np.array([s.ordinal for s in sessions], dtype="<i8")
        arrays[f"{name}.start_times"] = np.array([s.start_time for s in sessions], dtype="<i8")
        arrays[f"{name}.offsets"] = np.concatenate([[0], np.cumsum(lengths)]).astype("<i8")
        arrays[f"{name}.items"] = np.array([i for s in sessions for i in s.items], dtype="<i8")
        arrays[f"{name}.timestamps"] = np.array([t for s in sessions for t in s.timestamps], dtype="<i8")
    return arrays


def dataset_fingerprint(dataset):
    return utils.hash_arrays(_dataset_arrays(dataset))


def save_dataset(dataset, path, extra_manifest=None):
    arrays = _dataset_arrays(dataset)
    manifest = {
        "kind": "session_dataset",
        "preprocess_config": dataset.config,
        "fingerprint": utils.hash_arrays(arrays),
        "stats": utils.clean_for_json(corpus_stats(dataset).to_dict(orient="index")),
        **(extra_manifest or {}),
    }
    file_loader.write_container(path, arrays, manifest)
    logger.info("Saved dataset (%d users, %d items) to %s", dataset.num_users, dataset.num_items - 1, path)
    return manifest


def load_dataset(path):
    arrays, manifest = file_loader.read_container(path)
    if manifest.get("kind") != "session_dataset":
        raise DataError(f"{path} is not a session dataset file")
    users = Vocabulary(arrays["vocab.users"].tolist())
    item_tokens = arrays["vocab.items"].tolist()
    items = Vocabulary(item_tokens[1:], padding=item_tokens[0])

    splits = {}
    for name in SPLITS:
        offsets = arrays[f"{name}.offsets"]
        flat_items = arrays[f"{name}.items"]
        flat_stamps = arrays[f"{name}.timestamps"]
        by_user = {}
        for k, (user, ordinal, start) in enumerate(zip(arrays[f"{name}.users"], arrays[f"{name}.ordinals"],
                                                        arrays[f"{name}.start_times"])):
            lo, hi = offsets[k], offsets[k + 1]
            stamps = tuple(int(t) for t in flat_stamps[lo:hi])
            session = Session(int(user), tuple(int(i) for i in flat_items[lo:hi]), int(start), int(ordinal), stamps)
            by_user.setdefault(int(user), []).append(session)
        splits[name] = by_user

    dataset = SessionDataset(users, items, splits["train"], splits["valid"], splits["test"],
                             config=manifest.get("preprocess_config", {}))
    dataset.fingerprint = dataset_fingerprint(dataset)
    if manifest.get("fingerprint") and manifest["fingerprint"] != dataset.fingerprint:
        raise DataError(f"{path}: content does not match its recorded fingerprint")
    return dataset
