"""
Downstream Evaluation

Fine-tuning protocols on top of a pre-trained encoder. The [CLS] embedding is
the dialogue representation throughout:

    intent             [CLS] of the first user utterance -> softmax over intents + "out"
    dialogue act       [CLS] of the history up to a system turn -> per-act sigmoid
    response selection dual encoder, dot product of history and response [CLS]
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .dialogue_data import SYSTEM, Dialogue, DialogueLabels, Turn, serialize, utterance_ids
from .encoder import CLS_ID, SEP_ID, EncoderWeights, Vocab, cls_embedding, encode, pad_sequences
from .errors import ConfigError, DataError
from .metrics import MetricsReport, f1_metrics, intent_metrics, k_to_100, multilabel_counts, rank_of_truth
from .tensor import (
    Tensor,
    add_bias,
    backward,
    binary_cross_entropy_with_logits,
    matmul,
    no_grad,
    softmax_cross_entropy,
    transpose,
)
from .trainer import Adam

logger = logging.getLogger(__name__)

OUT_LABEL = "out"
TASKS = ("intent", "act", "response-selection")


@dataclass
class FinetuneConfig:
    """Shared fine-tuning hyperparameters; steps=0 evaluates the frozen encoder"""
    lr: float = 3e-4
    steps: int = 200
    batch_size: int = 16
    seed: int = 0
    shots_per_intent: Optional[int] = None
    train_fraction: float = 1.0
    pool_size: int = 100
    k_list: Tuple[int, ...] = (1, 3)
    eval_batch_size: int = 64
    show_progress: bool = False

    def validate(self):
        if self.lr <= 0:
            raise ConfigError(f"eval.lr must be > 0, got {self.lr}")
        if self.steps < 0:
            raise ConfigError(f"eval.steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"eval.batch_size must be >= 1, got {self.batch_size}")
        if self.shots_per_intent is not None and self.shots_per_intent < 1:
            raise ConfigError(f"eval.shots_per_intent must be >= 1, got {self.shots_per_intent}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError(f"eval.train_fraction must be in (0, 1], got {self.train_fraction}")
        if self.pool_size < 2:
            raise ConfigError(f"eval.pool_size must be >= 2, got {self.pool_size}")
        if not self.k_list or any(k < 1 or k > self.pool_size for k in self.k_list):
            raise ConfigError(f"eval.k_list values must be in [1, {self.pool_size}], got {self.k_list}")


@dataclass
class ClassifierHead:
    """Affine layer on top of [CLS]; loss is softmax-ce or binary-ce"""
    labels: List[str]
    weight: Tensor
    bias: Tensor
    loss: str = "softmax-ce"

    @classmethod
    def init(cls, labels: Sequence[str], hidden_dim: int, seed: int, loss: str = "softmax-ce",
             init_std: float = 0.02) -> "ClassifierHead":
        rng = np.random.default_rng([seed, 6])
        weight = Tensor(rng.normal(0.0, init_std, size=(hidden_dim, len(labels))), requires_grad=True,
                        name="head.weight")
        bias = Tensor(np.zeros(len(labels)), requires_grad=True, name="head.bias")
        return cls(list(labels), weight, bias, loss)

    @property
    def params(self) -> Dict[str, Tensor]:
        return {"head.weight": self.weight, "head.bias": self.bias}

    def __call__(self, features: Tensor) -> Tensor:
        if features.shape[-1] != self.weight.shape[0]:
            raise DataError(f"head expects {self.weight.shape[0]} features, got {features.shape[-1]}")
        return add_bias(matmul(features, self.weight), self.bias)


@dataclass
class FinetuneResult:
    report: MetricsReport
    encoder: EncoderWeights
    head: Optional[ClassifierHead] = None
    losses: List[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def fit_length(ids: Sequence[int], max_len: int, keep: str = "tail") -> List[int]:
    """Clip to max_len keeping [CLS] first and [SEP] last; keep the tail for histories"""
    if len(ids) <= max_len:
        return list(ids)
    body = list(ids[1:-1])
    room = max_len - 2
    body = body[-room:] if keep == "tail" else body[:room]
    return [CLS_ID] + body + [SEP_ID]


def utterance_sequence(turn: Turn, vocab: Vocab) -> List[int]:
    return [CLS_ID] + utterance_ids(turn, vocab) + [SEP_ID]


def response_sequence(text: str, vocab: Vocab, max_len: int) -> List[int]:
    return fit_length(utterance_sequence(Turn(SYSTEM, text), vocab), max_len, keep="head")


def encode_cls(sequences: Sequence[Sequence[int]], encoder: EncoderWeights, train_mode: bool = False,
               rng: Optional[np.random.Generator] = None) -> Tensor:
    ids, mask = pad_sequences(sequences)
    return cls_embedding(encode(ids, mask, encoder, train_mode, rng), encoder)


def embed_sequences(sequences: Sequence[Sequence[int]], encoder: EncoderWeights,
                    batch_size: int = 64) -> np.ndarray:
    """Eval-mode [CLS] embeddings as an n x d array"""
    chunks = []
    with no_grad():
        for start in range(0, len(sequences), batch_size):
            chunks.append(encode_cls(sequences[start:start + batch_size], encoder).data)
    if not chunks:
        return np.zeros((0, encoder.config.hidden_dim))
    return np.concatenate(chunks, axis=0)


def subsample_fraction(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Seeded subset of ceil(fraction * n) indices (at least one), in original order"""
    if fraction >= 1.0:
        return np.arange(n)
    keep = max(1, math.ceil(fraction * n))
    return np.sort(rng.choice(n, size=keep, replace=False))


def few_shot_indices(labels: Sequence[str], shots: Optional[int], rng: np.random.Generator) -> np.ndarray:
    """Up to `shots` seeded examples per label, in original order"""
    if shots is None:
        return np.arange(len(labels))
    order = rng.permutation(len(labels))
    taken: Dict[str, int] = {}
    picked = []
    for index in order:
        label = labels[index]
        if taken.get(label, 0) < shots:
            taken[label] = taken.get(label, 0) + 1
            picked.append(index)
    return np.sort(np.asarray(picked, dtype=np.int64))


def _finetune_loop(encoder: EncoderWeights, head_params: Dict[str, Tensor], num_examples: int,
                   loss_fn, cfg: FinetuneConfig, desc: str) -> List[float]:
    """Adam over encoder + head on random mini-batches; loss_fn(indices, rng) builds the loss"""
    if cfg.steps == 0 or num_examples == 0:
        return []
    params = dict(encoder.params)
    params.update(head_params)
    optimizer = Adam(cfg.lr)
    batch_rng = np.random.default_rng([cfg.seed, 7])
    dropout_rng = np.random.default_rng([cfg.seed, 8])
    losses = []
    for _ in tqdm(range(cfg.steps), desc=desc, disable=not cfg.show_progress):
        size = min(cfg.batch_size, num_examples)
        indices = batch_rng.choice(num_examples, size=size, replace=False)
        loss = loss_fn(indices, dropout_rng)
        grads_by_leaf = backward(loss, leaves=params.values())
        grads = {name: grads_by_leaf[p] for name, p in params.items()}
        for p in params.values():
            p.zero_grad()
        optimizer.step(params, grads)
        losses.append(loss.item())
    logger.info(f"{desc}: fine-tuned {cfg.steps} steps, final loss {losses[-1]:.4f}")
    return losses


# ---------------------------------------------------------------------------
# Intent recognition
# ---------------------------------------------------------------------------

def _intent_label(intent: str, in_domain: Sequence[str], ood: Sequence[str], dialogue_id: str) -> str:
    if intent in ood:
        return OUT_LABEL
    if intent not in in_domain:
        raise DataError(f"dialogue '{dialogue_id}' has intent '{intent}' outside the declared label space")
    return intent


def finetune_intent(encoder: EncoderWeights, vocab: Vocab, train: Sequence[Dialogue],
                    test: Sequence[Dialogue], labels: Dict[str, DialogueLabels],
                    in_domain_intents: Sequence[str], ood_intents: Sequence[str],
                    cfg: FinetuneConfig) -> FinetuneResult:
    """Softmax head over the in-domain intents plus one "out" class"""
    cfg.validate()
    overlap = set(in_domain_intents) & set(ood_intents)
    if overlap:
        raise DataError(f"intents declared both in-domain and out-of-domain: {sorted(overlap)}")
    classes = list(in_domain_intents) + [OUT_LABEL]
    class_index = {c: i for i, c in enumerate(classes)}
    max_len = encoder.config.max_len

    def examples(dialogues):
        seqs, ys = [], []
        for d in dialogues:
            if d.id not in labels:
                raise DataError(f"no intent label for dialogue '{d.id}'")
            seqs.append(fit_length(utterance_sequence(d.turns[0], vocab), max_len, keep="head"))
            ys.append(_intent_label(labels[d.id].intent, in_domain_intents, ood_intents, d.id))
        return seqs, ys

    train_seqs, train_y = examples(train)
    test_seqs, test_y = examples(test)
    picked = few_shot_indices(train_y, cfg.shots_per_intent, np.random.default_rng([cfg.seed, 9]))
    train_seqs = [train_seqs[i] for i in picked]
    train_targets = np.asarray([class_index[train_y[i]] for i in picked], dtype=np.int64)

    encoder = encoder.copy()
    head = ClassifierHead.init(classes, encoder.config.hidden_dim, cfg.seed)

    def loss_fn(indices, rng):
        features = encode_cls([train_seqs[i] for i in indices], encoder, True, rng)
        return softmax_cross_entropy(head(features), train_targets[indices])

    losses = _finetune_loop(encoder, head.params, len(train_seqs), loss_fn, cfg, "intent")

    with no_grad():
        logits = head(Tensor(embed_sequences(test_seqs, encoder, cfg.eval_batch_size))).data
    predictions = [classes[i] for i in logits.argmax(axis=1)]
    metrics = intent_metrics(test_y, predictions, OUT_LABEL)
    report = MetricsReport("intent", metrics, {
        "seed": cfg.seed, "train_examples": len(train_seqs), "test_examples": len(test_seqs),
        "classes": len(classes), "shots_per_intent": cfg.shots_per_intent, "steps": cfg.steps,
    })
    return FinetuneResult(report, encoder, head, losses)


# ---------------------------------------------------------------------------
# Dialogue act prediction
# ---------------------------------------------------------------------------

def act_examples(dialogues: Sequence[Dialogue], labels: Dict[str, DialogueLabels], acts: Sequence[str],
                 vocab: Vocab, max_len: int) -> Tuple[List[List[int]], np.ndarray]:
    """One example per system turn: history through that turn, multi-hot act targets"""
    act_index = {a: i for i, a in enumerate(acts)}
    seqs, targets = [], []
    for d in dialogues:
        if d.id not in labels:
            raise DataError(f"no act labels for dialogue '{d.id}'")
        turn_acts = labels[d.id].acts
        if len(turn_acts) != d.num_pairs:
            raise DataError(f"dialogue '{d.id}' has {d.num_pairs} system turns but {len(turn_acts)} act lists")
        for t, names in enumerate(turn_acts, 1):
            row = np.zeros(len(acts))
            for name in names:
                if name not in act_index:
                    raise DataError(f"dialogue '{d.id}' turn {t}: unknown act '{name}'")
                row[act_index[name]] = 1.0
            seqs.append(fit_length(serialize(d, t, vocab), max_len))
            targets.append(row)
    return seqs, np.asarray(targets).reshape(len(targets), len(acts))


def finetune_dialogue_act(encoder: EncoderWeights, vocab: Vocab, train: Sequence[Dialogue],
                          test: Sequence[Dialogue], labels: Dict[str, DialogueLabels],
                          acts: Sequence[str], cfg: FinetuneConfig) -> FinetuneResult:
    """Multi-label head trained with binary cross-entropy; an act fires at sigmoid > 0.5"""
    cfg.validate()
    max_len = encoder.config.max_len
    train_seqs, train_targets = act_examples(train, labels, acts, vocab, max_len)
    test_seqs, test_targets = act_examples(test, labels, acts, vocab, max_len)
    picked = subsample_fraction(len(train_seqs), cfg.train_fraction, np.random.default_rng([cfg.seed, 9]))
    train_seqs = [train_seqs[i] for i in picked]
    train_targets = train_targets[picked]

    encoder = encoder.copy()
    head = ClassifierHead.init(acts, encoder.config.hidden_dim, cfg.seed, loss="binary-ce")

    def loss_fn(indices, rng):
        features = encode_cls([train_seqs[i] for i in indices], encoder, True, rng)
        return binary_cross_entropy_with_logits(head(features), train_targets[indices])

    losses = _finetune_loop(encoder, head.params, len(train_seqs), loss_fn, cfg, "act")

    with no_grad():
        logits = head(Tensor(embed_sequences(test_seqs, encoder, cfg.eval_batch_size))).data
    f1 = f1_metrics(multilabel_counts(test_targets > 0.5, logits > 0.0))
    report = MetricsReport("act", {"micro_f1": f1.micro_f1, "macro_f1": f1.macro_f1}, {
        "seed": cfg.seed, "train_examples": len(train_seqs), "test_examples": len(test_seqs),
        "acts": len(acts), "train_fraction": cfg.train_fraction, "steps": cfg.steps,
        "degenerate": f1.degenerate,
    })
    return FinetuneResult(report, encoder, head, losses)


# ---------------------------------------------------------------------------
# Response selection
# ---------------------------------------------------------------------------

def response_pairs(dialogues: Sequence[Dialogue], vocab: Vocab,
                   max_len: int) -> Tuple[List[List[int]], List[str]]:
    """(history up to U_t, true response text S_t) for every turn pair"""
    histories, responses = [], []
    for d in dialogues:
        for t in range(1, d.num_pairs + 1):
            histories.append(fit_length(serialize(d, t, vocab, context_only=True), max_len))
            responses.append(d.turns[2 * t - 1].text)
    return histories, responses


def draw_candidates(truth: str, pool: Sequence[str], pool_size: int,
                    rng: np.random.Generator) -> Tuple[List[int], int]:
    """
    Pool indices of pool_size - 1 distinct distractors whose text differs from the
    truth, with the truth (index -1) inserted at a random position.
    """
    eligible = [i for i, text in enumerate(pool) if text != truth]
    if len(eligible) < pool_size - 1:
        raise DataError(
            f"response pool too small: {len(eligible)} distractors available, {pool_size - 1} needed"
        )
    distractors = [eligible[i] for i in rng.choice(len(eligible), size=pool_size - 1, replace=False)]
    position = int(rng.integers(pool_size))
    return distractors[:position] + [-1] + distractors[position:], position


def response_selection_eval(encoder: EncoderWeights, vocab: Vocab, train: Sequence[Dialogue],
                            test: Sequence[Dialogue], cfg: FinetuneConfig) -> FinetuneResult:
    """
    Fine-tune the dual encoder with in-batch negatives, then rank each true
    response against pool_size - 1 random system responses of the test split.
    """
    cfg.validate()
    max_len = encoder.config.max_len
    pool = [text for d in test for text in d.system_utterances()]
    if len(pool) < cfg.pool_size:
        raise DataError(f"response selection needs >= {cfg.pool_size} system responses, test split has {len(pool)}")

    train_hist, train_resp = response_pairs(train, vocab, max_len)
    picked = subsample_fraction(len(train_hist), cfg.train_fraction, np.random.default_rng([cfg.seed, 9]))
    train_hist = [train_hist[i] for i in picked]
    train_resp_ids = [response_sequence(train_resp[i], vocab, max_len) for i in picked]

    encoder = encoder.copy()

    def loss_fn(indices, rng):
        h = encode_cls([train_hist[i] for i in indices], encoder, True, rng)
        r = encode_cls([train_resp_ids[i] for i in indices], encoder, True, rng)
        scores = matmul(h, transpose(r))
        return softmax_cross_entropy(scores, np.arange(len(indices)))

    losses = _finetune_loop(encoder, {}, len(train_hist), loss_fn, cfg, "response-selection")

    test_hist, test_resp = response_pairs(test, vocab, max_len)
    pool_ids = [response_sequence(text, vocab, max_len) for text in pool]
    pool_vectors = embed_sequences(pool_ids, encoder, cfg.eval_batch_size)
    truth_ids = [response_sequence(text, vocab, max_len) for text in test_resp]
    truth_vectors = embed_sequences(truth_ids, encoder, cfg.eval_batch_size)
    history_vectors = embed_sequences(test_hist, encoder, cfg.eval_batch_size)

    rng = np.random.default_rng([cfg.seed, 10])
    ranks = []
    for i, truth in enumerate(test_resp):
        candidates, position = draw_candidates(truth, pool, cfg.pool_size, rng)
        vectors = np.stack([truth_vectors[i] if c == -1 else pool_vectors[c] for c in candidates])
        ranks.append(rank_of_truth(vectors @ history_vectors[i], position))

    metrics = {f"{k}_to_{cfg.pool_size}": k_to_100(ranks, k) for k in cfg.k_list}
    report = MetricsReport("response-selection", metrics, {
        "seed": cfg.seed, "train_examples": len(train_hist), "test_examples": len(test_hist),
        "pool_size": cfg.pool_size, "train_fraction": cfg.train_fraction, "steps": cfg.steps,
        "mean_rank": float(np.mean(ranks)),
    })
    return FinetuneResult(report, encoder, None, losses)


# ---------------------------------------------------------------------------
# Task dispatch
# ---------------------------------------------------------------------------

@dataclass
class DownstreamData:
    """Labeled splits and label inventories shared by the three protocols"""
    train: List[Dialogue]
    test: List[Dialogue]
    labels: Dict[str, DialogueLabels]
    intents: List[str]
    ood_intents: List[str]
    acts: List[str]

    @property
    def in_domain_intents(self) -> List[str]:
        return [i for i in self.intents if i not in self.ood_intents]


def run_task(task: str, encoder: EncoderWeights, vocab: Vocab, data: DownstreamData,
             cfg: FinetuneConfig) -> FinetuneResult:
    if task == "intent":
        return finetune_intent(encoder, vocab, data.train, data.test, data.labels,
                               data.in_domain_intents, data.ood_intents, cfg)
    if task == "act":
        return finetune_dialogue_act(encoder, vocab, data.train, data.test, data.labels, data.acts, cfg)
    if task == "response-selection":
        return response_selection_eval(encoder, vocab, data.train, data.test, cfg)
    raise ConfigError(f"unknown task '{task}', expected one of {TASKS}")
