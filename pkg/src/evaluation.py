"""Ranking metrics, session-length stratification and the ablation runner."""
import concurrent.futures
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from src import analysis_utils, insert_model, utils
from src.candidate_retrieval import CandidateRetriever
from src.data_pipeline import SPLITS
from src.exceptions import ConfigError, EmptyReportError, UsageError

logger = logging.getLogger(__name__)

LENGTH_BUCKETS = ("2", "3", "4", "5", "long")
SHORT_BUCKETS = ("2", "3", "4", "5")
SHORT_SESSION_MAX_LEN = 5
PADDING_INDEX = 0


@dataclass
class EvalConfig:
    ks: list = field(default_factory=lambda: [5, 20])
    targets: str = "all"
    short_only: bool = False
    batch_size: int = 256
    threads: int = 1
    progress: bool = False

    def validate(self):
        if not self.ks or any(int(k) < 1 for k in self.ks):
            raise ConfigError("ks must be a non-empty list of positive integers")
        if self.targets not in ("all", "last"):
            raise ConfigError(f"targets must be 'all' or 'last', got '{self.targets}'")
        if self.batch_size < 1 or self.threads < 1:
            raise ConfigError("batch_size and threads must be >= 1")
        self.ks = sorted({int(k) for k in self.ks})
        return self

    def to_dict(self):
        values = asdict(self)
        values.pop("progress")
        return values

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


# ==============================================================================
# 1. METRICS
# ==============================================================================

def rank_of_target(logits, target, excluded=(PADDING_INDEX,)):
    """
    1-based rank of `target` among non-excluded items by descending logit;
    equal logits rank the lower item index first.
    """
    logits = np.asarray(logits)
    excluded = set(excluded)
    if target in excluded:
        raise UsageError(f"target {target} is excluded from the ranking")
    return int(batch_ranks(logits.reshape(1, -1), np.array([target]), excluded)[0])


def batch_ranks(logits, targets, excluded=(PADDING_INDEX,)):
    """Row-wise `rank_of_target` for a B×m logit matrix."""
    logits = np.asarray(logits)
    rows = np.arange(len(targets))
    target_scores = logits[rows, targets][:, None]
    positions = np.arange(logits.shape[1])
    ahead = (logits > target_scores) | ((logits == target_scores) & (positions[None, :] < targets[:, None]))
    allowed = np.ones(logits.shape[1], dtype=bool)
    allowed[list(excluded)] = False
    return 1 + np.sum(ahead & allowed[None, :], axis=1)


def recall_mrr_at_k(ranks, K):
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise EmptyReportError("no ranks to summarise")
    if np.any(ranks < 1):
        raise UsageError("ranks are 1-based")
    hits = ranks <= K
    return float(np.mean(hits)), float(np.mean(np.where(hits, 1.0 / ranks, 0.0)))


def length_bucket(session_length):
    return str(session_length) if session_length <= SHORT_SESSION_MAX_LEN else "long"


# ==============================================================================
# 2. REPORT
# ==============================================================================

@dataclass
class RankingReport:
    ks: list
    count: int
    overall: dict
    buckets: dict
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_ranks(cls, ranks, lengths, ks, metadata=None):
        ranks, lengths = np.asarray(ranks), np.asarray(lengths)
        overall = {k: dict(zip(("recall", "mrr"), recall_mrr_at_k(ranks, k))) for k in ks}
        labels = np.array([length_bucket(n) for n in lengths])
        buckets = {}
        for name in LENGTH_BUCKETS + ("short",):
            members = np.isin(labels, SHORT_BUCKETS) if name == "short" else labels == name
            entry = {"count": int(members.sum())}
            for k in ks:
                if members.any():
                    recall, mrr = recall_mrr_at_k(ranks[members], k)
                    entry[k] = {"recall": recall, "mrr": mrr}
                else:
                    entry[k] = {"recall": None, "mrr": None}
            buckets[name] = entry
        return cls(list(ks), int(ranks.size), overall, buckets, dict(metadata or {}))

    def headline(self):
        """Recall@K and MRR@K columns in the order of the published tables."""
        row = {f"Recall@{k}": self.overall[k]["recall"] for k in self.ks}
        row.update({f"MRR@{k}": self.overall[k]["mrr"] for k in self.ks})
        return row

    def to_frame(self):
        """One row per (bucket, K)."""
        rows = [{"bucket": "all", "k": k, "count": self.count, **self.overall[k]} for k in self.ks]
        for name, entry in self.buckets.items():
            rows.extend({"bucket": name, "k": k, "count": entry["count"], **entry[k]} for k in self.ks)
        return pd.DataFrame(rows, columns=["bucket", "k", "count", "recall", "mrr"])

    def to_dict(self):
        return utils.clean_for_json({
            "ks": self.ks,
            "count": self.count,
            "overall": {str(k): v for k, v in self.overall.items()},
            "buckets": {name: {str(k): v for k, v in entry.items()} for name, entry in self.buckets.items()},
            "metadata": self.metadata,
        })

    @classmethod
    def from_dict(cls, payload):
        ks = [int(k) for k in payload["ks"]]
        overall = {int(k): v for k, v in payload["overall"].items()}
        buckets = {
            name: {("count" if key == "count" else int(key)): value for key, value in entry.items()}
            for name, entry in payload["buckets"].items()
        }
        return cls(ks, payload["count"], overall, buckets, payload.get("metadata", {}))


# ==============================================================================
# 3. EVALUATION
# ==============================================================================

def evaluation_positions(dataset, split, targets="all", short_only=False):
    """(session, t) pairs to score, in a fixed order."""
    positions = []
    for session in dataset.sessions(split):
        if short_only and len(session) > SHORT_SESSION_MAX_LEN:
            continue
        first = len(session) if targets == "last" else 2
        positions.extend((session, t) for t in range(first, len(session) + 1))
    return positions


def _rank_chunk(model, chunk, retriever):
    instances = [insert_model.make_instance(session, t, retriever) for session, t in chunk]
    batch = model.collate(instances)
    return batch_ranks(model.logits(batch), batch.targets), batch.lengths


def evaluate_model(model, dataset, split, config, retriever=None, metadata=None):
    """
    Scores every target position t >= 2 of `split` using only the items before
    t as context. Fixed-size chunks are ranked (in parallel when
    `config.threads` > 1) and reduced in order.
    """
    config.validate()
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {list(SPLITS)}, got '{split}'")
    if model.pools and retriever is None:
        retriever = CandidateRetriever(dataset)
    positions = evaluation_positions(dataset, split, config.targets, config.short_only)
    if not positions:
        raise EmptyReportError(f"split '{split}' has nothing to evaluate")

    chunks = [positions[i:i + config.batch_size] for i in range(0, len(positions), config.batch_size)]
    rank_retriever = retriever if model.pools else None
    if config.threads == 1:
        results = (_rank_chunk(model, chunk, rank_retriever) for chunk in chunks)
        results = list(tqdm(results, total=len(chunks), desc=f"evaluate {split}", disable=not config.progress))
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=config.threads) as executor:
            results = list(executor.map(lambda chunk: _rank_chunk(model, chunk, rank_retriever), chunks))

    ranks = np.concatenate([r for r, _ in results])
    lengths = np.concatenate([n for _, n in results])
    meta = {
        "split": split,
        "variant": model.config.variant,
        "dataset_hash": dataset.fingerprint,
        "eval_config": config.to_dict(),
        **(metadata or {}),
    }
    report = RankingReport.from_ranks(ranks, lengths, config.ks, meta)
    logger.info("Evaluated %d instances on %s: %s", report.count, split,
                ", ".join(f"{name} {value:.4f}" for name, value in report.headline().items()))
    return report


def evaluate(checkpoint, dataset, split="test", config=None):
    """Loads a checkpoint (checked against the dataset fingerprint) and evaluates it."""
    config = config or EvalConfig()
    checkpoint = Path(checkpoint)
    model, manifest, _ = insert_model.load_checkpoint(checkpoint, dataset)
    train_config = manifest.get("train_config", {})
    retriever = None
    if model.pools:
        retriever = CandidateRetriever(
            dataset,
            N=train_config.get("num_similar_users", 10),
            max_candidate_sessions=train_config.get("max_candidate_sessions", 50),
            max_history_sessions=train_config.get("max_history_sessions") or None,
        )
    metadata = {
        "checkpoint": checkpoint.name,
        "checkpoint_hash": utils.sha256_file(checkpoint),
        "model_config": manifest["model_config"],
    }
    return evaluate_model(model, dataset, split, config, retriever=retriever, metadata=metadata)


# ==============================================================================
# 4. ABLATION
# ==============================================================================

@dataclass
class AblationResult:
    mean: pd.DataFrame
    sem: pd.DataFrame
    runs: pd.DataFrame
    reports: dict
    reference: dict = field(default_factory=lambda: analysis_utils.ABLATION_REFERENCE)


def run_ablation_suite(dataset, model_config, train_config, eval_config=None, variants=insert_model.VARIANTS,
                       seeds=None, out_dir=None, progress=False, split="test"):
    """
    Trains and evaluates every variant with identical configs for each seed.
    Returns the per-variant mean table, the SEM across seeds and the raw runs.
    """
    from src import training

    eval_config = eval_config or EvalConfig()
    seeds = list(seeds) if seeds else [train_config.seed]
    rows, reports = [], {}
    for variant in variants:
        for seed in seeds:
            run_model_config = replace(model_config, variant=variant, seed=seed)
            run_train_config = replace(train_config, seed=seed)
            run_dir = Path(out_dir) / variant / f"seed_{seed}" if out_dir is not None else None
            logger.info("Ablation run: variant '%s', seed %d", variant, seed)
            result = training.train(dataset, run_model_config, run_train_config, out_dir=run_dir, progress=progress)
            retriever = None
            if result.model.pools:
                retriever = CandidateRetriever(
                    dataset, N=train_config.num_similar_users,
                    max_candidate_sessions=train_config.max_candidate_sessions,
                    max_history_sessions=train_config.max_history_sessions or None,
                )
            report = evaluate_model(result.model, dataset, split, eval_config, retriever=retriever,
                                    metadata={"seed": seed})
            reports[(variant, seed)] = report
            rows.append({"variant": variant, "seed": seed, **report.headline()})

    runs = pd.DataFrame(rows)
    mean, sem = analysis_utils.aggregate_runs(runs, "variant", order=list(variants))
    return AblationResult(mean=mean, sem=sem, runs=runs, reports=reports)
