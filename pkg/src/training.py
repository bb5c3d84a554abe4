"""User-aware mini-batch training with Adam, early stopping and resumable checkpoints."""
import heapq
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from tqdm import tqdm

from src import evaluation, insert_model, utils
from src import tensor_core as tc
from src.candidate_retrieval import CandidateRetriever
from src.exceptions import ArtifactMismatchError, ConfigError, EmptyReportError, NumericError, UsageError

logger = logging.getLogger(__name__)

LAST_CHECKPOINT = "last.h5"
BEST_CHECKPOINT = "best.h5"
TRAIN_LOG = "train_log.jsonl"
EARLY_STOP_METRIC = ("mrr", 20)


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0
    gradient_clip_norm: float = 5.0
    num_similar_users: int = 10
    max_candidate_sessions: int = 50
    max_history_sessions: int = 0
    eval_batch_size: int = 256

    def validate(self):
        for name in ("batch_size", "max_epochs", "patience", "num_similar_users", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.learning_rate <= 0 or self.adam_epsilon <= 0:
            raise ConfigError("learning_rate and adam_epsilon must be > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("beta1 and beta2 must be in [0, 1)")
        if self.gradient_clip_norm < 0 or self.max_candidate_sessions < 0 or self.max_history_sessions < 0:
            raise ConfigError("gradient_clip_norm and candidate caps must be >= 0")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_arrays(self):
        arrays = {f"adam_m.{name}": value.astype("<f8") for name, value in self.m.items()}
        arrays.update({f"adam_v.{name}": value.astype("<f8") for name, value in self.v.items()})
        return arrays

    @classmethod
    def from_arrays(cls, arrays, step, dtype=np.float64):
        state = cls(step=step)
        for key, value in arrays.items():
            if key.startswith("adam_m."):
                state.m[key[len("adam_m."):]] = np.array(value, dtype=dtype)
            elif key.startswith("adam_v."):
                state.v[key[len("adam_v."):]] = np.array(value, dtype=dtype)
        return state


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    best_score: float = -1.0
    best_epoch: int = 0
    bad_epochs: int = 0
    stopped: bool = False
    clipped_steps: int = 0
    rng_state: dict = None
    adam: AdamState = field(default_factory=AdamState)

    def to_manifest(self):
        values = asdict(self)
        values.pop("adam")
        values["adam_step"] = self.adam.step
        return values

    @classmethod
    def from_checkpoint(cls, manifest_state, arrays, dtype=np.float64):
        values = dict(manifest_state)
        adam_step = values.pop("adam_step", 0)
        state = cls(**values)
        state.adam = AdamState.from_arrays(arrays, adam_step, dtype)
        return state


@dataclass
class TrainResult:
    model: object
    state: TrainState
    history: list
    best_path: Path = None
    last_path: Path = None


# ==============================================================================
# 1. BATCHES
# ==============================================================================

def training_positions(dataset):
    """Every (user, ordinal, target position t >= 2) of the training split."""
    positions = []
    for session in dataset.sessions("train"):
        for t in range(2, len(session) + 1):
            positions.append((session.user, session.ordinal, t))
    return positions


def _user_aware_batches(positions, batch_size, rng):
    """
    Splits positions into batches of distinct users where possible.

    Each user's positions are shuffled into a queue; every batch takes one
    position from each of the `batch_size` users with the most positions
    left (ties broken by a per-epoch random user order). A user repeats
    inside a batch only when fewer than `batch_size` users have positions left.
    """
    per_user = {}
    for pos in positions:
        per_user.setdefault(pos[0], []).append(pos)
    users = sorted(per_user)
    queues = [[per_user[u][k] for k in rng.permutation(len(per_user[u]))] for u in users]
    rank = rng.permutation(len(users))
    heap = [(-len(queue), int(rank[k]), k) for k, queue in enumerate(queues)]
    heapq.heapify(heap)

    batches = []
    while heap:
        batch = []
        while heap and len(batch) < batch_size:
            taken = [heapq.heappop(heap) for _ in range(min(batch_size - len(batch), len(heap)))]
            for _, _, k in taken:
                batch.append(queues[k].pop())
            for _, tie, k in taken:
                if queues[k]:
                    heapq.heappush(heap, (-len(queues[k]), tie, k))
        batches.append(batch)
    return batches


def make_batches(dataset, batch_size, seed, retriever=None, pools=("H", "S")):
    """
    Yields lists of `Instance`s covering every training position exactly once.
    `seed` may be an int or a numpy Generator (shared with dropout during training).
    """
    rng = np.random.default_rng(seed)
    sessions = {(s.user, s.ordinal): s for s in dataset.sessions("train")}
    positions = training_positions(dataset)
    if not positions:
        raise UsageError("training split has no session with at least two items")
    for chunk in _user_aware_batches(positions, batch_size, rng):
        batch = []
        for user, ordinal, t in chunk:
            session = sessions[(user, ordinal)]
            batch.append(insert_model.make_instance(session, t, retriever if pools else None))
        yield batch


# ==============================================================================
# 2. OPTIMISER
# ==============================================================================

def adam_step(params, grads, state, config):
    """
    One bias-corrected Adam update in place, after optional global-norm
    clipping. Returns (global gradient norm, clipped?).
    """
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            raise NumericError(f"non-finite gradient for parameter '{name}'", parameter=name)

    norm = float(np.sqrt(np.sum([np.sum(g * g) for g in grads.values()])))
    factor = 1.0
    clipped = config.gradient_clip_norm > 0 and norm > config.gradient_clip_norm
    if clipped:
        factor = config.gradient_clip_norm / norm

    state.step += 1
    bc1 = 1.0 - config.beta1 ** state.step
    bc2 = 1.0 - config.beta2 ** state.step
    for name in sorted(grads):
        g = grads[name] * factor if clipped else grads[name]
        value = params.value(name)
        if name not in state.m:
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        m, v = state.m[name], state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        value -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.adam_epsilon)
    return norm, clipped


def update_early_stopping(state, score, epoch, patience):
    """Records a validation score; returns True once `patience` epochs pass without improvement."""
    if score > state.best_score:
        state.best_score = score
        state.best_epoch = epoch
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
    state.stopped = state.bad_epochs >= patience
    return state.stopped


# ==============================================================================
# 3. TRAINING LOOP
# ==============================================================================

def _complete_model_config(model_config, dataset):
    values = model_config.to_dict()
    values["item_vocab"] = values["item_vocab"] or dataset.num_items
    values["user_vocab"] = values["user_vocab"] or dataset.num_users
    if values["item_vocab"] != dataset.num_items or values["user_vocab"] != dataset.num_users:
        raise ConfigError("model vocabulary sizes do not match the dataset")
    return insert_model.ModelConfig.from_dict(values)


def _validation_metrics(model, dataset, retriever, train_config):
    eval_config = evaluation.EvalConfig(ks=[5, 20], batch_size=train_config.eval_batch_size, threads=1)
    try:
        report = evaluation.evaluate_model(model, dataset, "valid", eval_config, retriever=retriever)
    except EmptyReportError:
        return None
    return {f"val_{metric}@{k}": report.overall[k][metric] for k in (5, 20) for metric in ("recall", "mrr")}


def _resume(out_dir, dataset, model_config):
    last = out_dir / LAST_CHECKPOINT
    if not last.is_file():
        raise ArtifactMismatchError(f"nothing to resume: {last} does not exist")
    model, manifest, arrays = insert_model.load_checkpoint(last, dataset)
    if model.config.to_dict() != model_config.to_dict():
        raise ArtifactMismatchError("model config differs from the checkpoint being resumed")
    state = TrainState.from_checkpoint(manifest["train_state"], arrays, model.store.dtype)
    best = out_dir / BEST_CHECKPOINT
    best_store = insert_model.load_checkpoint(best, dataset)[0].store if best.is_file() else model.store.copy()
    logger.info("Resuming after epoch %d (step %d)", state.epoch, state.step)
    return model, state, best_store


def train(dataset, model_config, train_config, out_dir=None, resume=False, progress=True, extra_manifest=None):
    """
    Trains until `max_epochs` or early stopping on validation MRR@20. With
    `out_dir`, writes last.h5 (resumable), best.h5 and a JSON-lines log.
    """
    train_config.validate()
    model_config = _complete_model_config(model_config, dataset).validate()
    out_dir = Path(out_dir) if out_dir is not None else None
    if resume and out_dir is None:
        raise UsageError("resume needs an output directory")

    if resume:
        model, state, best_store = _resume(out_dir, dataset, model_config)
    else:
        model = insert_model.InsertModel(model_config)
        state = TrainState()
        best_store = model.store.copy()
    rng = np.random.default_rng(train_config.seed)
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state

    retriever = None
    if model.pools:
        retriever = CandidateRetriever(
            dataset, N=train_config.num_similar_users,
            max_candidate_sessions=train_config.max_candidate_sessions,
            max_history_sessions=train_config.max_history_sessions or None,
        )
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    manifest_extra = dict(extra_manifest or {})
    history = []
    logger.info("Training variant '%s' with %d parameters", model_config.variant, model.store.num_parameters())
    while not state.stopped and state.epoch < train_config.max_epochs:
        epoch = state.epoch + 1
        started = time.perf_counter()
        losses, clipped_before = [], state.clipped_steps
        batches = make_batches(dataset, train_config.batch_size, rng, retriever, model.pools)
        for instances in tqdm(batches, desc=f"epoch {epoch}", disable=not progress, leave=False):
            batch = model.collate(instances)
            tape = tc.Tape()
            trace = model.forward(batch, training=True, rng=rng, tape=tape)
            batch_loss = model.loss(trace, batch.targets)
            model.store.zero_grads()
            tc.backward(tape, batch_loss)
            _, clipped = adam_step(model.store, model.store.grads(), state.adam, train_config)
            state.clipped_steps += int(clipped)
            state.step += 1
            losses.append(batch_loss.item())

        metrics = _validation_metrics(model, dataset, retriever, train_config)
        score = metrics[f"val_{EARLY_STOP_METRIC[0]}@{EARLY_STOP_METRIC[1]}"] if metrics else float(epoch)
        state.epoch = epoch
        stop = update_early_stopping(state, score, epoch, train_config.patience)
        if state.best_epoch == epoch:
            best_store = model.store.copy()
        state.rng_state = rng.bit_generator.state

        record = {
            "epoch": epoch,
            "step": state.step,
            "loss": float(np.mean(losses)),
            **(metrics or {f"val_{m}@{k}": None for k in (5, 20) for m in ("recall", "mrr")}),
            "wall_time_s": round(time.perf_counter() - started, 3),
            "grad_clip_norm": train_config.gradient_clip_norm,
            "clipped_steps": state.clipped_steps - clipped_before,
        }
        history.append(record)
        logger.info("epoch %d loss %.4f val MRR@20 %s", epoch, record["loss"], record.get("val_mrr@20"))

        if out_dir is not None:
            _write_checkpoints(out_dir, model, best_store, state, dataset, train_config, manifest_extra)
            with open(out_dir / TRAIN_LOG, "a") as f:
                f.write(json.dumps(utils.clean_for_json(record), sort_keys=True) + "\n")
        if stop:
            logger.info("Early stopping after epoch %d (best epoch %d)", epoch, state.best_epoch)

    best_model = insert_model.InsertModel(model_config, best_store)
    return TrainResult(
        model=best_model,
        state=state,
        history=history,
        best_path=out_dir / BEST_CHECKPOINT if out_dir else None,
        last_path=out_dir / LAST_CHECKPOINT if out_dir else None,
    )


def _write_checkpoints(out_dir, model, best_store, state, dataset, train_config, manifest_extra):
    common = dict(dataset_hash=dataset.fingerprint, train_config=train_config.to_dict(),
                  extra_manifest=manifest_extra)
    insert_model.save_checkpoint(out_dir / LAST_CHECKPOINT, model, train_state=state.to_manifest(),
                                 extra_arrays=state.adam.to_arrays(), **common)
    if state.best_epoch == state.epoch:
        best_model = insert_model.InsertModel(model.config, best_store)
        insert_model.save_checkpoint(out_dir / BEST_CHECKPOINT, best_model,
                                     train_state={"epoch": state.best_epoch, "best_score": state.best_score},
                                     **common)
