"""The recommender network: local GRU module, similar-session retrieval, session
encoder, prior aggregation, modulation and the next-item prediction head.

Everything runs batched. A `Batch` holds right-padded index arrays plus boolean
masks, and padded positions are blended out with `select` so they contribute
exactly nothing, neither to values nor to gradients. The single-instance
operations (`encode_local`, `ssrn_similarity`, ...) are the B=1 case.
"""
import functools
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import special

from src import tensor_core as tc
from src.candidate_retrieval import CandidateSets
from src.exceptions import ArgumentError, ArtifactMismatchError, ConfigError, DimensionError, UsageError

logger = logging.getLogger(__name__)

VARIANTS = ("full", "c", "h", "o", "a")
LOSS_MODES = ("complement_ce", "standard_ce")
MLP_ACTIVATIONS = ("tanh", "identity")
CHECKPOINT_FORMAT_VERSION = 1

ETA_EPSILON = 1e-8
PROB_EPSILON = 1e-12

# candidate pools consumed by each variant; "a" swaps the similarity function, not the pools
VARIANT_POOLS = {
    "full": ("H", "S"),
    "c": (),
    "h": ("H",),
    "o": ("S",),
    "a": ("H", "S"),
}
_PRIOR_MLP = {"H": "mlp_h", "S": "mlp_s"}


@dataclass
class ModelConfig:
    embed_dim: int = 50
    item_vocab: int = 0
    user_vocab: int = 0
    dropout_rate: float = 0.2
    loss_mode: str = "complement_ce"
    variant: str = "full"
    mlp_activation: str = "tanh"
    share_ssrn_gru: bool = True
    normalize_similarity: bool = False
    seed: int = 0
    dtype: str = "float64"

    def validate(self):
        if self.embed_dim <= 0:
            raise ConfigError("embed_dim must be > 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.item_vocab < 2:
            raise ConfigError("item_vocab must cover the padding item and at least one real item")
        if self.user_vocab < 1:
            raise ConfigError("user_vocab must be >= 1")
        for name, allowed in (("loss_mode", LOSS_MODES), ("variant", VARIANTS),
                              ("mlp_activation", MLP_ACTIVATIONS), ("dtype", ("float64", "float32"))):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {list(allowed)}, got '{getattr(self, name)}'")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


# ==============================================================================
# 1. PARAMETERS
# ==============================================================================

def _gru_names(prefix):
    return [f"{prefix}.{kind}_{gate}" for kind in ("W", "U") for gate in ("z", "r", "h")]


def parameter_shapes(config):
    d, m, n = config.embed_dim, config.item_vocab, config.user_vocab
    shapes = {"item_embeddings": (m, d), "user_embeddings": (n, d)}
    prefixes = ["gru"] if config.share_ssrn_gru else ["gru", "ssrn_gru"]
    for prefix in prefixes:
        for name in _gru_names(prefix):
            shapes[name] = (d, d)
        for gate in ("z", "r", "h"):
            shapes[f"{prefix}.b_{gate}"] = (d,)
    for mlp in ("mlp_h", "mlp_s"):
        shapes.update({f"{mlp}.W1": (d, d), f"{mlp}.b1": (d,), f"{mlp}.W2": (d, d), f"{mlp}.b2": (d,)})
    shapes.update({"mlp_out.W": (d, m), "mlp_out.b": (m,)})
    return shapes


def init_parameters(config):
    """uniform(-1/sqrt(d), 1/sqrt(d)) matrices, zero biases, zero padding embedding."""
    rng = np.random.default_rng(config.seed)
    bound = 1.0 / np.sqrt(config.embed_dim)
    store = tc.ParameterStore(config.dtype)
    for name, shape in sorted(parameter_shapes(config).items()):
        is_bias = name.split(".")[-1].startswith("b")
        value = np.zeros(shape) if is_bias else rng.uniform(-bound, bound, size=shape)
        if name == "item_embeddings":
            value[0] = 0.0
        store.add(name, value)
    return store


class ParameterView:
    """Reads parameters as tape leaves while recording, as constants otherwise."""

    def __init__(self, store, tape=None):
        self.store = store
        self.tape = tape
        self._cache = {}

    def __getitem__(self, name):
        found = self._cache.get(name)
        if found is None:
            if self.tape is not None:
                found = self.tape.parameter(self.store, name)
            else:
                found = tc.Tensor(self.store.value(name))
            self._cache[name] = found
        return found

    def __contains__(self, name):
        return name in self.store


def as_params(params, tape=None):
    if isinstance(params, ParameterView):
        return params
    return ParameterView(params, tape)


# ==============================================================================
# 2. BATCHES
# ==============================================================================

@dataclass(frozen=True)
class Instance:
    """One next-item prediction: `context` precedes `target` in a session of `session_length` items."""
    user: int
    ordinal: int
    context: tuple
    target: int
    session_length: int
    candidate_sets: CandidateSets = field(default_factory=CandidateSets.empty)


def make_instance(session, t, retriever=None):
    """Instance predicting the t-th item (1-based, t >= 2) of `session` from the items before it."""
    if not 2 <= t <= len(session):
        raise UsageError(f"target position {t} outside 2..{len(session)}")
    candidate_sets = CandidateSets.empty()
    if retriever is not None:
        candidate_sets = retriever.candidate_sets(session.user, session.ordinal)
    return Instance(session.user, session.ordinal, tuple(session.items[:t - 1]), session.items[t - 1],
                    len(session), candidate_sets)


def session_instances(session, retriever=None, targets="all"):
    """All positions t = 2..|s|, or only the last one."""
    first = len(session) if targets == "last" else 2
    return [make_instance(session, t, retriever) for t in range(first, len(session) + 1)]


@dataclass
class PoolBatch:
    name: str           # "H" (own history) or "S" (similar users)
    items: np.ndarray   # (B, C, L) item indices, 0 = padding
    mask: np.ndarray    # (B, C, L)
    valid: np.ndarray   # (B, C) real candidate sessions
    users: np.ndarray   # (B, C) owner of each candidate session


@dataclass
class Batch:
    context: np.ndarray
    context_mask: np.ndarray
    targets: np.ndarray
    users: np.ndarray
    lengths: np.ndarray
    pools: dict

    def __len__(self):
        return len(self.targets)


def _pool_batch(name, session_lists):
    B = len(session_lists)
    C = max(1, max(len(s) for s in session_lists))
    L = max([1] + [len(sess) for sessions in session_lists for sess in sessions])
    items = np.zeros((B, C, L), dtype=np.int64)
    mask = np.zeros((B, C, L), dtype=bool)
    valid = np.zeros((B, C), dtype=bool)
    users = np.zeros((B, C), dtype=np.int64)
    for b, sessions in enumerate(session_lists):
        for c, sess in enumerate(sessions):
            items[b, c, :len(sess)] = sess.items
            mask[b, c, :len(sess)] = True
            valid[b, c] = True
            users[b, c] = sess.user
    return PoolBatch(name, items, mask, valid, users)


def collate(instances, pools=("H", "S")):
    """Pads contexts and candidate pools of `instances` into one Batch."""
    if not instances:
        raise UsageError("cannot collate an empty list of instances")
    B = len(instances)
    T = max(len(inst.context) for inst in instances)
    if T == 0:
        raise UsageError("every instance needs a non-empty context")
    context = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    for b, inst in enumerate(instances):
        if not inst.context:
            raise UsageError("every instance needs a non-empty context")
        context[b, :len(inst.context)] = inst.context
        mask[b, :len(inst.context)] = True
    pool_batches = {}
    for pool in pools:
        pick = (lambda cs: cs.own_history) if pool == "H" else (lambda cs: cs.similar_users_sessions)
        pool_batches[pool] = _pool_batch(pool, [pick(inst.candidate_sets) for inst in instances])
    return Batch(
        context=context,
        context_mask=mask,
        targets=np.array([inst.target for inst in instances], dtype=np.int64),
        users=np.array([inst.user for inst in instances], dtype=np.int64),
        lengths=np.array([inst.session_length for inst in instances], dtype=np.int64),
        pools=pool_batches,
    )


# ==============================================================================
# 3. BUILDING BLOCKS
# ==============================================================================

def _affine(x, W, b):
    out = tc.matmul(x, W)
    return tc.add(out, tc.broadcast_to(b, out.shape))


def gru_cell(x, h_prev, params, prefix="gru"):
    """
    z = σ(W_z x + U_z h + b_z), r = σ(W_r x + U_r h + b_r),
    h~ = tanh(W_h x + U_h (r ⊙ h) + b_h), h' = (1 − z) ⊙ h + z ⊙ h~.
    Works on d-vectors or on B×d rows.
    """
    params = as_params(params)
    x, h_prev = tc.as_tensor(x), tc.as_tensor(h_prev)
    d = params[f"{prefix}.W_z"].shape[0]
    if x.shape != h_prev.shape or x.shape[-1] != d or x.ndim not in (1, 2):
        raise DimensionError(f"gru_cell: x {x.shape} and h {h_prev.shape} must both be (…, {d})")
    single = x.ndim == 1
    if single:
        x, h_prev = tc.reshape(x, (1, d)), tc.reshape(h_prev, (1, d))

    def gate(name, hidden):
        pre = tc.add(tc.matmul(x, params[f"{prefix}.W_{name}"]), tc.matmul(hidden, params[f"{prefix}.U_{name}"]))
        return tc.add(pre, tc.broadcast_to(params[f"{prefix}.b_{name}"], pre.shape))

    z = tc.sigmoid(gate("z", h_prev))
    r = tc.sigmoid(gate("r", h_prev))
    candidate = tc.tanh(gate("h", tc.mul(r, h_prev)))
    h = tc.add(tc.mul(tc.sub(1.0, z), h_prev), tc.mul(z, candidate))
    return tc.reshape(h, (d,)) if single else h


def _run_gru(items, mask, params, prefix):
    """Hidden state after every step of right-padded rows; padded steps carry h forward."""
    rows, steps = items.shape
    d = params[f"{prefix}.W_z"].shape[0]
    h = tc.Tensor(np.zeros((rows, d)))
    states = []
    for t in range(steps):
        x_t = tc.gather(params["item_embeddings"], items[:, t])
        h_new = gru_cell(x_t, h, params, prefix)
        h = tc.select(np.broadcast_to(mask[:, t:t + 1], (rows, d)), h_new, h)
        states.append(h)
    return states


def encode_local(context, params):
    """h_c: last GRU state over the embedded context, starting from zeros."""
    if len(context) == 0:
        raise UsageError("encode_local needs a non-empty context")
    params = as_params(params)
    items = np.asarray(context, dtype=np.int64).reshape(1, -1)
    h = _run_gru(items, np.ones(items.shape, dtype=bool), params, "gru")[-1]
    return tc.reshape(h, (h.shape[-1],))


def _ssrn_prefix(params):
    return "ssrn_gru" if "ssrn_gru.W_z" in params else "gru"


def _ssrn_scores(items, mask, h_rows, params):
    """
    Max over positions of λ_i = h_i · h_c for each candidate row. Rows
    without any real item score 0. Returns (scores (N,), λ (N, L)).
    """
    states = _run_gru(items, mask, params, _ssrn_prefix(params))
    lambdas = tc.stack([tc.dot(h_i, h_rows) for h_i in states], axis=1)
    scores, _ = tc.masked_max(lambdas, mask, axis=1)
    return scores, lambdas


def _mean_embedding_scores(embedded, mask, h_rows):
    N, L, d = embedded.shape
    counts = np.maximum(mask.sum(axis=1, keepdims=True), 1)
    weights = (mask / counts).reshape(N, 1, L)
    means = tc.reshape(tc.matmul(tc.Tensor(weights), embedded), (N, d))
    return tc.dot(means, h_rows)


def _encode_sessions(embedded, mask, owners, params):
    """
    w = Σ α_i x_i with α_i = (x_i·θ)/η and η = Σ_j x_j·θ, θ the owner's
    embedding. Rows with |η| < ETA_EPSILON fall back to uniform weights.
    """
    N, L, d = embedded.shape
    theta = tc.gather(params["user_embeddings"], owners)
    raw = tc.reshape(tc.matmul(embedded, tc.reshape(theta, (N, d, 1))), (N, L))
    s = tc.select(mask, raw, tc.Tensor(np.zeros((N, L))))
    eta = tc.sum(s, axis=1)
    degenerate = np.abs(eta.data) < ETA_EPSILON
    eta_safe = tc.select(degenerate, tc.Tensor(np.ones(N)), eta)
    alpha = tc.div(s, tc.broadcast_to(tc.reshape(eta_safe, (N, 1)), (N, L)))
    uniform = mask / np.maximum(mask.sum(axis=1, keepdims=True), 1)
    alpha = tc.select(np.broadcast_to(degenerate[:, None], (N, L)), tc.Tensor(uniform), alpha)
    return tc.reshape(tc.matmul(tc.reshape(alpha, (N, 1, L)), embedded), (N, d)), alpha


def _prior_mlp(x, params, which, activation):
    name = _PRIOR_MLP[which]
    hidden = _affine(x, params[f"{name}.W1"], params[f"{name}.b1"])
    if activation == "tanh":
        hidden = tc.tanh(hidden)
    return _affine(hidden, params[f"{name}.W2"], params[f"{name}.b2"])


def _single_session_arrays(candidate):
    if len(candidate) == 0:
        raise UsageError("candidate session is empty")
    items = np.asarray(candidate.items, dtype=np.int64).reshape(1, -1)
    return items, np.ones(items.shape, dtype=bool)


def ssrn_similarity(candidate, h_c, params):
    """Returns (score, per-item λ) for one candidate session against h_c."""
    params = as_params(params)
    items, mask = _single_session_arrays(candidate)
    h_c = tc.as_tensor(h_c)
    scores, lambdas = _ssrn_scores(items, mask, tc.reshape(h_c, (1, h_c.shape[-1])), params)
    return tc.reshape(scores, ()), [float(v) for v in lambdas.data[0]]


def encode_session(candidate, params):
    params = as_params(params)
    items, mask = _single_session_arrays(candidate)
    embedded = tc.gather(params["item_embeddings"], items)
    w, _ = _encode_sessions(embedded, mask, np.array([candidate.user]), params)
    return tc.reshape(w, (w.shape[-1],))


def aggregate_prior(candidates, which, params, config):
    """β = MLP_which(Σ score · w_cs); an empty candidate list gives exactly 0."""
    params = as_params(params)
    d = config.embed_dim
    if not candidates:
        return tc.Tensor(np.zeros(d))
    pre = functools.reduce(tc.add, [tc.mul(score, w) for score, w in candidates])
    beta = _prior_mlp(tc.reshape(pre, (1, d)), params, which, config.mlp_activation)
    return tc.reshape(beta, (d,))


# ==============================================================================
# 4. FORWARD PASS AND LOSS
# ==============================================================================

@dataclass
class ForwardTrace:
    h_c: tc.Tensor
    beta_h: tc.Tensor
    beta_s: tc.Tensor
    psi: tc.Tensor
    logits: tc.Tensor
    similarity: dict
    session_weights: dict
    tape: object = None

    def probabilities(self):
        return special.softmax(self.logits.data, axis=-1)


def _pool_prior(pool, h_c, params, config):
    B, C, L = pool.items.shape
    N, d = B * C, config.embed_dim
    items = pool.items.reshape(N, L)
    mask = pool.mask.reshape(N, L)
    h_rows = tc.gather(h_c, np.repeat(np.arange(B), C))
    embedded = tc.gather(params["item_embeddings"], items)

    if config.variant == "a":
        scores = _mean_embedding_scores(embedded, mask, h_rows)
    else:
        scores, _ = _ssrn_scores(items, mask, h_rows, params)
    weights, _ = _encode_sessions(embedded, mask, pool.users.reshape(N), params)

    scores = tc.reshape(scores, (B, C))
    if config.normalize_similarity:
        scores = tc.softmax(scores, mask=pool.valid, axis=1)
    pre = tc.reshape(tc.matmul(tc.reshape(scores, (B, 1, C)), tc.reshape(weights, (B, C, d))), (B, d))
    has_candidates = np.broadcast_to(pool.valid.any(axis=1)[:, None], (B, d))
    beta = tc.select(has_candidates, _prior_mlp(pre, params, pool.name, config.mlp_activation),
                     tc.Tensor(np.zeros((B, d))))
    return beta, scores.data, weights.data.reshape(B, C, d)


def forward_batch(batch, params, config, training=False, rng=None, tape=None):
    params = as_params(params, tape)
    B, d = len(batch), config.embed_dim
    h_c = _run_gru(batch.context, batch.context_mask, params, "gru")[-1]

    zeros = tc.Tensor(np.zeros((B, d)))
    betas = {"H": zeros, "S": zeros}
    similarity, session_weights = {}, {}
    psi = h_c
    for which in VARIANT_POOLS[config.variant]:
        pool = batch.pools.get(which)
        if pool is None:
            raise UsageError(f"batch was collated without the '{which}' candidate pool")
        beta, scores, weights = _pool_prior(pool, h_c, params, config)
        betas[which] = beta
        similarity[which], session_weights[which] = scores, weights
        psi = tc.add(psi, beta)

    if training and config.dropout_rate > 0 and rng is None:
        raise UsageError("training forward pass needs a random generator for dropout")
    dropped = tc.dropout(psi, config.dropout_rate, rng, training)
    logits = _affine(dropped, params["mlp_out.W"], params["mlp_out.b"])
    return ForwardTrace(h_c, betas["H"], betas["S"], psi, logits, similarity, session_weights, tape)


def forward(context, candidate_sets, params, config, training=False, rng=None, tape=None):
    """Single-instance forward pass; the trace holds 1×… tensors."""
    instance = Instance(user=-1, ordinal=0, context=tuple(context), target=0,
                        session_length=len(context) + 1,
                        candidate_sets=candidate_sets or CandidateSets.empty())
    batch = collate([instance], VARIANT_POOLS[config.variant])
    return forward_batch(batch, params, config, training=training, rng=rng, tape=tape)


def loss(trace, target_item, config):
    """
    Mean over the batch of
      complement_ce: −[log p(v+) + Σ_{v≠v+} log(1 − p(v))], p clamped to [ε, 1 − ε]
      standard_ce:   −log p(v+)
    """
    logits = trace.logits
    if logits.ndim == 1:
        logits = tc.reshape(logits, (1, logits.shape[0]))
    targets = np.atleast_1d(np.asarray(target_item, dtype=np.int64))
    B, m = logits.shape
    if targets.shape != (B,):
        raise DimensionError(f"expected {B} targets, got {targets.shape}")
    if np.any(targets < 0) or np.any(targets >= m):
        raise ArgumentError(f"target item out of range [0, {m})")

    if config.loss_mode == "standard_ce":
        return tc.mean(tc.softmax_cross_entropy(logits, targets))
    p = tc.softmax(logits)
    positive = np.zeros((B, m), dtype=bool)
    positive[np.arange(B), targets] = True
    log_p = tc.clamped_log(p, PROB_EPSILON, 1.0 - PROB_EPSILON)
    log_not_p = tc.clamped_log(tc.sub(1.0, p), PROB_EPSILON, 1.0 - PROB_EPSILON)
    per_row = tc.sum(tc.select(positive, log_p, log_not_p), axis=1)
    return tc.scale(tc.mean(per_row), -1.0)


# ==============================================================================
# 5. MODEL AND CHECKPOINTS
# ==============================================================================

class InsertModel:
    def __init__(self, config, store=None):
        self.config = config.validate()
        self.store = store if store is not None else init_parameters(config)
        if self.store.dtype != tc.resolve_dtype(config.dtype):
            self.store.astype(config.dtype)
        self._check_shapes()

    def _check_shapes(self):
        expected = parameter_shapes(self.config)
        if sorted(expected) != self.store.names():
            missing = sorted(set(expected) ^ set(self.store.names()))
            raise ArtifactMismatchError(f"parameter names do not match the model config: {missing}")
        for name, shape in expected.items():
            if self.store.value(name).shape != shape:
                raise ArtifactMismatchError(
                    f"parameter '{name}' has shape {self.store.value(name).shape}, expected {shape}")

    @property
    def pools(self):
        return VARIANT_POOLS[self.config.variant]

    def collate(self, instances):
        return collate(instances, self.pools)

    def forward(self, batch, training=False, rng=None, tape=None):
        return forward_batch(batch, self.store, self.config, training=training, rng=rng, tape=tape)

    def loss(self, trace, targets):
        return loss(trace, targets, self.config)

    def logits(self, batch):
        """Eval-mode logits as a plain array; safe to call from several threads."""
        return self.forward(batch).logits.data

    def scores(self, context, candidate_sets=None):
        """Next-item probabilities for one context (m entries, padding included)."""
        trace = forward(context, candidate_sets, self.store, self.config)
        return trace.probabilities()[0]


def save_checkpoint(path, model, dataset_hash, train_config=None, train_state=None,
                    extra_arrays=None, extra_manifest=None):
    manifest = {
        "kind": "insert_checkpoint",
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "train_config": train_config or {},
        "vocab_sizes": {"items": model.config.item_vocab, "users": model.config.user_vocab},
        "seed": model.config.seed,
        "dataset_hash": dataset_hash,
        "train_state": train_state or {},
        **(extra_manifest or {}),
    }
    model.store.save(path, manifest, extra_arrays)
    logger.debug("Saved checkpoint %s", path)


def load_checkpoint(path, dataset=None):
    """
    Returns (model, manifest, arrays). With `dataset` given, its fingerprint
    must match the one the checkpoint was trained on.
    """
    store, manifest, arrays = tc.ParameterStore.load(path)
    if manifest.get("kind") != "insert_checkpoint":
        raise ArtifactMismatchError(f"{path} is not a model checkpoint")
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ArtifactMismatchError(f"unsupported checkpoint format {manifest.get('format_version')}")
    if dataset is not None and manifest.get("dataset_hash") != dataset.fingerprint:
        raise ArtifactMismatchError(
            f"checkpoint was trained on dataset {manifest.get('dataset_hash', '?')[:12]}, "
            f"not {dataset.fingerprint[:12]}")
    config = ModelConfig.from_dict(manifest["model_config"])
    return InsertModel(config, store), manifest, arrays
