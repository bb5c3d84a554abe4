import numpy as np
import pytest

from src import data_pipeline
from src.data_pipeline import Session
from src.insert_model import ModelConfig

# 20 rows, 4 users. With min_freq=2 item "z" (seen once) is dropped and u3's
# first session shrinks to [a, b]; u1's last two events are exactly 3600 s apart.
FIXTURE_ROWS = [
    ("u1", "a", 0), ("u1", "b", 100), ("u1", "c", 200),
    ("u1", "a", 10000), ("u1", "b", 10100),
    ("u1", "b", 20000), ("u1", "c", 23600),
    ("u2", "a", 0), ("u2", "c", 50),
    ("u2", "b", 8000), ("u2", "c", 8100),
    ("u2", "a", 20000), ("u2", "b", 20100),
    ("u3", "a", 0), ("u3", "b", 60), ("u3", "z", 120),
    ("u3", "c", 5000), ("u3", "a", 5060),
    ("u4", "a", 0), ("u4", "b", 30),
]


def write_tsv(path, rows, header=None, delimiter="\t"):
    lines = [delimiter.join(header)] if header else []
    lines += [delimiter.join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def make_dataset(raw_sessions, test_fraction=0.1, valid_fraction=0.1):
    """raw_sessions: (user id, [item ids], start time) triples; items inside a session are one second apart."""
    counters = {}
    sessions = []
    for user, items, start in raw_sessions:
        counters[user] = counters.get(user, 0) + 1
        sessions.append(Session(user, tuple(items), start, counters[user], tuple(start + k for k in range(len(items)))))
    return data_pipeline.split_per_user(sessions, test_fraction, valid_fraction)


def random_corpus(num_users, num_items, sessions_per_user, seed=0, min_len=2, max_len=5):
    rng = np.random.default_rng(seed)
    raw = []
    for u in range(num_users):
        for s in range(sessions_per_user):
            length = int(rng.integers(min_len, max_len + 1))
            items = [f"i{int(v)}" for v in rng.integers(0, num_items, size=length)]
            raw.append((f"u{u:02d}", items, 10_000 * s + 7 * u))
    return raw


@pytest.fixture
def fixture_tsv(tmp_path):
    return write_tsv(tmp_path / "fixture.tsv", FIXTURE_ROWS)


@pytest.fixture
def fixture_config(tmp_path):
    path = tmp_path / "settings.yaml"
    path.write_text(
        "min_freq: 2\n"
        "embed_dim: 8\n"
        "batch_size: 4\n"
        "max_epochs: 2\n"
        "eval_batch_size: 8\n"
    )
    return path


@pytest.fixture
def toy_dataset():
    """3 users, 4 sessions each: 2 train, 1 valid, 1 test per user."""
    raw = [
        ("alice", ["a", "b", "c"], 0), ("alice", ["b", "c"], 10_000),
        ("alice", ["a", "c", "d"], 20_000), ("alice", ["c", "d"], 30_000),
        ("bob", ["b", "c", "d"], 5), ("bob", ["d", "e"], 10_005),
        ("bob", ["b", "e"], 20_005), ("bob", ["e", "c", "b"], 30_005),
        ("carol", ["f", "g"], 9), ("carol", ["g", "f", "a"], 10_009),
        ("carol", ["a", "f"], 20_009), ("carol", ["f", "g", "a", "b"], 30_009),
    ]
    return make_dataset(raw)


@pytest.fixture
def small_config(toy_dataset):
    return ModelConfig(embed_dim=6, item_vocab=toy_dataset.num_items, user_vocab=toy_dataset.num_users,
                       dropout_rate=0.0, seed=3)


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("INSERT_CACHE_DIR", str(tmp_path / "cache"))
