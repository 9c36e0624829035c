"""GRU question generator conditioned on image feature vectors.

The image feature is projected affinely into the initial recurrent state
(it is not re-fed at later steps); the gated recurrent unit then emits one
token per step until the end sentinel. With x the input embedding and h
the previous state:

    z = sigmoid(Wz x + Uz h + bz)          update gate
    r = sigmoid(Wr x + Ur h + br)          reset gate
    c = tanh(Wc x + Uc (r * h) + bc)       candidate state
    h' = (1 - z) * h + z * c

Training is plain SGD over the mean per-token cross-entropy with gradient
clipping, plateau learning-rate decay and early stopping on validation
loss; features are constants (no gradient flows past the projection).
Decoding is beam search over summed log-probabilities; the unknown-word
and begin-sentence tokens are masked and never emitted.

Everything runs in float64, and every random draw is fixed by the config
seed, so checkpoints are reproducible byte for byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import BOS_ID, EOS_ID, UNK_ID, ImageRecord, Vocabulary, encode
from .errors import DataError
from .seeding import derive_seed


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite during training."""


@dataclass
class GeneratorConfig:
    """Model dimensions and the optimization/decoding knobs."""

    feature_dim: int
    vocab: Vocabulary
    hidden_dim: int = 500
    embed_dim: int = 500
    beam_size: int = 8
    max_decode_len: int = 30
    learning_rate: float = 0.1
    lr_decay: float = 0.5
    patience: int = 3
    grad_clip_norm: float = 5.0
    max_epochs: int = 50
    batch_size: int = 1
    seed: int = 0
    length_normalize: bool = False

    def __post_init__(self):
        for name in ("feature_dim", "hidden_dim", "embed_dim"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive")
        if self.beam_size < 1:
            raise DataError("beam_size must be >= 1")
        if self.learning_rate <= 0:
            raise DataError("learning_rate must be positive")
        if self.max_decode_len < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise DataError("max_decode_len, max_epochs and batch_size must be >= 1")

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)


PARAM_NAMES = ("w_proj", "b_proj", "embedding",
               "w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_c", "u_c", "b_c",
               "w_out", "b_out")


@dataclass
class GeneratorParams:
    """Every trainable tensor of the model."""

    w_proj: np.ndarray   # (h, d)
    b_proj: np.ndarray   # (h,)
    embedding: np.ndarray  # (V, e)
    w_z: np.ndarray      # (h, e)
    u_z: np.ndarray      # (h, h)
    b_z: np.ndarray      # (h,)
    w_r: np.ndarray
    u_r: np.ndarray
    b_r: np.ndarray
    w_c: np.ndarray
    u_c: np.ndarray
    b_c: np.ndarray
    w_out: np.ndarray    # (V, h)
    b_out: np.ndarray    # (V,)

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "GeneratorParams":
        return GeneratorParams(**{n: t.copy() for n, t in self.tensors().items()})

    def global_norm(self) -> float:
        return math.sqrt(sum(float((t * t).sum()) for t in self.tensors().values()))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors().values())


def expected_shapes(cfg: GeneratorConfig) -> dict[str, tuple[int, ...]]:
    h, d, e, v = cfg.hidden_dim, cfg.feature_dim, cfg.embed_dim, cfg.vocab_size
    return {
        "w_proj": (h, d), "b_proj": (h,), "embedding": (v, e),
        "w_z": (h, e), "u_z": (h, h), "b_z": (h,),
        "w_r": (h, e), "u_r": (h, h), "b_r": (h,),
        "w_c": (h, e), "u_c": (h, h), "b_c": (h,),
        "w_out": (v, h), "b_out": (v,),
    }


def init_parameters(cfg: GeneratorConfig) -> GeneratorParams:
    """Uniform(-s, s) with s = 1/sqrt(columns) per matrix, zero biases.

    Fully determined by ``cfg.seed``: tensors are drawn in a fixed order
    from one generator.
    """
    rng = np.random.default_rng(cfg.seed)
    tensors = {}
    for name, shape in expected_shapes(cfg).items():
        if len(shape) == 1:
            tensors[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[1])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return GeneratorParams(**tensors)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - math.log(float(np.exp(shifted).sum()))


def gru_step(params: GeneratorParams, x: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
    """One recurrent step; raises on a non-finite state (divergence signal)."""
    z = _sigmoid(params.w_z @ x + params.u_z @ h_prev + params.b_z)
    r = _sigmoid(params.w_r @ x + params.u_r @ h_prev + params.b_r)
    c = np.tanh(params.w_c @ x + params.u_c @ (r * h_prev) + params.b_c)
    h = (1.0 - z) * h_prev + z * c
    if not np.all(np.isfinite(h)):
        raise TrainingDiverged("non-finite hidden state")
    return h


def initial_state(params: GeneratorParams, feature) -> np.ndarray:
    return params.w_proj @ np.asarray(feature, dtype=np.float64) + params.b_proj


@dataclass
class _StepCache:
    x_id: int
    x: np.ndarray
    h_prev: np.ndarray
    z: np.ndarray
    r: np.ndarray
    c: np.ndarray
    h: np.ndarray
    log_probs: np.ndarray
    y: int


def _check_target(target_ids: Sequence[int], vocab_size: int):
    if len(target_ids) < 2:
        raise DataError("target must hold at least the two sentinels")
    if target_ids[0] != BOS_ID or target_ids[-1] != EOS_ID:
        raise DataError("target must begin with <s> and end with </s>")
    if any(not 0 <= t < vocab_size for t in target_ids):
        raise DataError("target id outside the vocabulary")


def _forward_sequence(params: GeneratorParams, feature,
                      target_ids: Sequence[int],
                      keep_cache: bool) -> tuple[float, list[_StepCache], np.ndarray]:
    _check_target(target_ids, params.w_out.shape[0])
    h = initial_state(params, feature)
    steps: list[_StepCache] = []
    nll = 0.0
    n_pred = len(target_ids) - 1
    for t in range(n_pred):
        x_id = target_ids[t]
        x = params.embedding[x_id]
        h_prev = h
        z = _sigmoid(params.w_z @ x + params.u_z @ h_prev + params.b_z)
        r = _sigmoid(params.w_r @ x + params.u_r @ h_prev + params.b_r)
        c = np.tanh(params.w_c @ x + params.u_c @ (r * h_prev) + params.b_c)
        h = (1.0 - z) * h_prev + z * c
        log_probs = _log_softmax(params.w_out @ h + params.b_out)
        y = target_ids[t + 1]
        nll -= float(log_probs[y])
        if keep_cache:
            steps.append(_StepCache(x_id, x, h_prev, z, r, c, h, log_probs, y))
    return nll / n_pred, steps, h


def sequence_nll(params: GeneratorParams, feature, target_ids: Sequence[int]) -> float:
    """Teacher-forced mean negative log-probability per predicted token."""
    nll, _, _ = _forward_sequence(params, feature, target_ids, keep_cache=False)
    if not math.isfinite(nll):
        raise TrainingDiverged("non-finite sequence loss")
    return nll


def _zero_grads(params: GeneratorParams) -> GeneratorParams:
    return GeneratorParams(**{n: np.zeros_like(t) for n, t in params.tensors().items()})


def _backward_sequence(params: GeneratorParams, feature,
                       steps: list[_StepCache], grads: GeneratorParams,
                       scale: float) -> None:
    per_step = scale / len(steps)
    dh_next = np.zeros_like(steps[0].h)
    for step in reversed(steps):
        probs = np.exp(step.log_probs)
        dlogits = probs * per_step
        dlogits[step.y] -= per_step
        grads.w_out += np.outer(dlogits, step.h)
        grads.b_out += dlogits
        dh = params.w_out.T @ dlogits + dh_next

        dz = dh * (step.c - step.h_prev)
        dc = dh * step.z
        dh_prev = dh * (1.0 - step.z)

        da_c = dc * (1.0 - step.c * step.c)
        grads.w_c += np.outer(da_c, step.x)
        grads.u_c += np.outer(da_c, step.r * step.h_prev)
        grads.b_c += da_c
        drh = params.u_c.T @ da_c
        dr = drh * step.h_prev
        dh_prev += drh * step.r

        da_r = dr * step.r * (1.0 - step.r)
        grads.w_r += np.outer(da_r, step.x)
        grads.u_r += np.outer(da_r, step.h_prev)
        grads.b_r += da_r

        da_z = dz * step.z * (1.0 - step.z)
        grads.w_z += np.outer(da_z, step.x)
        grads.u_z += np.outer(da_z, step.h_prev)
        grads.b_z += da_z

        grads.embedding[step.x_id] += (params.w_z.T @ da_z
                                       + params.w_r.T @ da_r
                                       + params.w_c.T @ da_c)
        dh_next = dh_prev + params.u_z.T @ da_z + params.u_r.T @ da_r

    # dh_next is now the gradient of the initial state; features are constants.
    grads.w_proj += np.outer(dh_next, np.asarray(feature, dtype=np.float64))
    grads.b_proj += dh_next


Batch = Sequence[tuple[np.ndarray, Sequence[int]]]


def _gradients_and_loss(params: GeneratorParams, batch: Batch) -> tuple[GeneratorParams, float]:
    if not batch:
        raise DataError("empty batch")
    grads = _zero_grads(params)
    scale = 1.0 / len(batch)
    total = 0.0
    for feature, target_ids in batch:
        nll, steps, _ = _forward_sequence(params, feature, target_ids, keep_cache=True)
        total += nll
        _backward_sequence(params, feature, steps, grads, scale)
    loss = total / len(batch)
    if not math.isfinite(loss) or not grads.all_finite():
        raise TrainingDiverged("non-finite loss or gradients")
    return grads, loss


def gradients(params: GeneratorParams, batch: Batch) -> GeneratorParams:
    """Exact backpropagation-through-time gradients of the mean batch loss."""
    grads, _ = _gradients_and_loss(params, batch)
    return grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    """Bookkeeping of one training run; the returned model is ``best_params``."""

    epoch: int
    best_val_nll: float
    checks_since_improvement: int
    best_params: GeneratorParams
    train_nll_history: list[float] = field(default_factory=list)
    val_nll_history: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)


def training_pairs(records: Sequence[ImageRecord],
                   vocab: Vocabulary) -> list[tuple[np.ndarray, list[int]]]:
    """One (feature, sentinel-wrapped id sequence) pair per reference question."""
    return [(rec.features, encode(ref.question, vocab, add_sentinels=True))
            for rec in records for ref in rec.references]


def mean_nll(params: GeneratorParams, pairs: Batch) -> float:
    if not pairs:
        raise DataError("no sequences to score")
    return sum(sequence_nll(params, f, t) for f, t in pairs) / len(pairs)


def train(cfg: GeneratorConfig, train_records: Sequence[ImageRecord],
          val_records: Sequence[ImageRecord]) -> tuple[GeneratorParams, TrainState]:
    """Plain SGD with clipping, plateau decay and early stopping.

    After each epoch the validation loss is checked; every epoch without
    improvement decays the learning rate, and ``patience`` consecutive
    non-improvements stop training. The best-validation snapshot is
    returned. Per-epoch shuffles come from a dedicated stream of
    ``cfg.seed``, so the loss history is seed-reproducible.
    """
    pairs = training_pairs(train_records, cfg.vocab)
    val_pairs = training_pairs(val_records, cfg.vocab)
    if not pairs or not val_pairs:
        raise DataError("both train and validation splits must be non-empty")
    for feature, _ in pairs[:1]:
        if feature.shape[0] != cfg.feature_dim:
            raise DataError(
                f"feature dimension {feature.shape[0]} != config {cfg.feature_dim}")

    params = init_parameters(cfg)
    rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle"))
    lr = cfg.learning_rate
    state = TrainState(epoch=0, best_val_nll=math.inf,
                       checks_since_improvement=0, best_params=params.copy())

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(pairs))
        seen = 0
        loss_sum = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [pairs[i] for i in order[start:start + cfg.batch_size]]
            try:
                grads, loss = _gradients_and_loss(params, batch)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from None
            loss_sum += loss * len(batch)
            seen += len(batch)
            if cfg.grad_clip_norm > 0:
                norm = grads.global_norm()
                if norm > cfg.grad_clip_norm:
                    factor = cfg.grad_clip_norm / norm
                    for tensor in grads.tensors().values():
                        tensor *= factor
            for name, grad in grads.tensors().items():
                getattr(params, name)[...] -= lr * grad

        val_nll = mean_nll(params, val_pairs)
        if not math.isfinite(val_nll):
            raise TrainingDiverged(f"epoch {epoch}: non-finite validation loss")
        state.epoch = epoch
        state.train_nll_history.append(loss_sum / seen)
        state.val_nll_history.append(val_nll)
        state.learning_rates.append(lr)
        if val_nll < state.best_val_nll:
            state.best_val_nll = val_nll
            state.best_params = params.copy()
            state.checks_since_improvement = 0
        else:
            state.checks_since_improvement += 1
            lr *= cfg.lr_decay
            if state.checks_since_improvement >= cfg.patience:
                break

    return state.best_params, state


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecoderHypothesis:
    token_ids: tuple[int, ...]
    log_prob: float
    state: np.ndarray
    finished: bool = False   # ended on </s>
    truncated: bool = False  # hit the length cap without </s>


@dataclass(frozen=True)
class DecodedQuestion:
    tokens: tuple[str, ...]
    token_ids: tuple[int, ...]
    log_prob: float
    truncated: bool


def beam_decode(params: GeneratorParams, feature, cfg: GeneratorConfig) -> DecodedQuestion:
    """Beam search of width ``cfg.beam_size`` over summed log-probabilities.

    ``<unk>`` and ``<s>`` are masked before ranking and never emitted.
    Hypotheses that emit ``</s>`` are frozen but keep competing on score;
    the best finished one wins, with ties broken toward the
    lexicographically smaller id sequence. If nothing finishes within
    ``max_decode_len`` steps the best hypothesis is returned truncated.
    Sentinels are stripped from the result.
    """
    masked = (BOS_ID, UNK_ID)

    def rank_key(hyp: DecoderHypothesis):
        if cfg.length_normalize:
            steps = len(hyp.token_ids) + (1 if hyp.finished else 0)
            return (-hyp.log_prob / max(steps, 1), hyp.token_ids)
        return (-hyp.log_prob, hyp.token_ids)

    beams = [DecoderHypothesis(token_ids=(), log_prob=0.0,
                               state=initial_state(params, feature))]
    while any(not (h.finished or h.truncated) for h in beams):
        candidates: list[DecoderHypothesis] = []
        for hyp in beams:
            if hyp.finished or hyp.truncated:
                candidates.append(hyp)
                continue
            inp = hyp.token_ids[-1] if hyp.token_ids else BOS_ID
            h_new = gru_step(params, params.embedding[inp], hyp.state)
            log_probs = _log_softmax(params.w_out @ h_new + params.b_out)
            # Only the per-hypothesis best extensions can reach the global
            # top; the stable sort keeps smaller ids first on score ties,
            # matching the tie-break rule, so this pruning is lossless.
            # (Normalized scoring reranks by length, so prune only without it.)
            order = np.argsort(-log_probs, kind="stable")
            if not cfg.length_normalize:
                order = order[:cfg.beam_size + len(masked)]
            for token_id in order:
                token_id = int(token_id)
                if token_id in masked:
                    continue
                score = hyp.log_prob + float(log_probs[token_id])
                if token_id == EOS_ID:
                    candidates.append(DecoderHypothesis(
                        hyp.token_ids, score, h_new, finished=True))
                else:
                    ids = hyp.token_ids + (token_id,)
                    candidates.append(DecoderHypothesis(
                        ids, score, h_new,
                        truncated=len(ids) >= cfg.max_decode_len))
        candidates.sort(key=rank_key)
        beams = candidates[:cfg.beam_size]

    finished = [h for h in beams if h.finished]
    pool = finished if finished else beams
    best = min(pool, key=rank_key)
    tokens = tuple(cfg.vocab.token(i) for i in best.token_ids)
    return DecodedQuestion(tokens=tokens, token_ids=best.token_ids,
                           log_prob=best.log_prob, truncated=not best.finished)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CHECKPOINT_MAGIC = "vqgen-checkpoint"
_CHECKPOINT_VERSION = 1

_CONFIG_SCALARS = ("feature_dim", "hidden_dim", "embed_dim", "beam_size",
                   "max_decode_len", "learning_rate", "lr_decay", "patience",
                   "grad_clip_norm", "max_epochs", "batch_size", "seed",
                   "length_normalize")


def save_checkpoint(path, cfg: GeneratorConfig, params: GeneratorParams) -> None:
    """Write config, vocabulary and all tensors to a versioned container.

    The layout is one JSON header line followed by the raw float64 bytes
    of every tensor in declaration order; identical inputs produce
    identical bytes.
    """
    header = {
        "format": _CHECKPOINT_MAGIC,
        "version": _CHECKPOINT_VERSION,
        "config": {name: getattr(cfg, name) for name in _CONFIG_SCALARS},
        "vocab": cfg.vocab.to_dict(),
        "tensors": [[name, list(params.tensors()[name].shape)] for name in PARAM_NAMES],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(params.tensors()[name]).tobytes())


def load_checkpoint(path) -> tuple[GeneratorConfig, GeneratorParams]:
    """Read a checkpoint, validating version and tensor shapes against config."""
    with open(path, "rb") as fh:
        try:
            header = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise DataError(f"{path}: not a checkpoint file") from None
        if header.get("format") != _CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        if header.get("version") != _CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {header.get('version')}")
        vocab = Vocabulary.from_dict(header["vocab"])
        cfg = GeneratorConfig(vocab=vocab, **header["config"])
        shapes = expected_shapes(cfg)
        tensors = {}
        for name, shape in header["tensors"]:
            shape = tuple(shape)
            if name not in shapes or shapes[name] != shape:
                raise DataError(
                    f"{path}: tensor {name!r} with shape {shape} does not match config")
            n_bytes = int(np.prod(shape)) * 8
            raw = fh.read(n_bytes)
            if len(raw) != n_bytes:
                raise DataError(f"{path}: truncated tensor data for {name!r}")
            tensors[name] = np.frombuffer(raw, dtype=np.float64).reshape(shape).copy()
        if set(tensors) != set(PARAM_NAMES):
            raise DataError(f"{path}: checkpoint is missing tensors")
    return cfg, GeneratorParams(**tensors)
