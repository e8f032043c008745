"""
Dialogue Encoder

Word-level vocabulary, tokenizer and a small pre-norm transformer encoder that
returns the hidden states of every layer.
"""

import logging
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .tensor import (
    Tensor,
    add,
    add_bias,
    add_positions,
    dropout,
    embedding,
    gelu,
    layer_norm,
    masked_fill,
    matmul,
    reshape,
    scale,
    softmax,
    take,
    transpose,
)

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK, USR, SYS = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[USR]", "[SYS]"
RESERVED_TOKENS = [PAD, UNK, CLS, SEP, MASK, USR, SYS]
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID, USR_ID, SYS_ID = range(len(RESERVED_TOKENS))
NUM_RESERVED = len(RESERVED_TOKENS)

ATTENTION_FILL = -1e9

_TOKEN_PATTERN = re.compile(r"\w+|[^\w\s]", re.UNICODE)


@dataclass
class Vocab:
    """Token list whose index is the token id"""
    tokens: List[str]
    min_freq: int = 1
    index: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.tokens[:NUM_RESERVED] != RESERVED_TOKENS:
            raise DataError("vocabulary must start with the reserved tokens in their fixed order")
        self.index = {token: i for i, token in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, min_freq: int = 1) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line for line in lines if line], min_freq=min_freq)


def split_words(text: str) -> List[str]:
    """Lowercase and split on whitespace and punctuation boundaries"""
    return _TOKEN_PATTERN.findall(text.lower())


def build_vocab(corpus: Iterable, min_freq: int = 1) -> Vocab:
    """Reserved tokens, then tokens with count >= min_freq by frequency desc, then lexicographically"""
    counts: Counter = Counter()
    dialogues = 0
    for dialogue in corpus:
        dialogues += 1
        for turn in dialogue.turns:
            counts.update(split_words(turn.text))
    if dialogues == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")

    kept = sorted(
        (token for token, count in counts.items() if count >= min_freq and token not in RESERVED_TOKENS),
        key=lambda token: (-counts[token], token),
    )
    logger.info(f"Built vocabulary: {len(kept)} tokens (min_freq={min_freq}, {len(counts)} distinct)")
    return Vocab(RESERVED_TOKENS + kept, min_freq=min_freq)


def tokenize(text: str, vocab: Vocab) -> List[int]:
    return [vocab.id_of(word) for word in split_words(text)]


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------

@dataclass
class EncoderConfig:
    """Transformer encoder hyperparameters (desk-scale defaults)"""
    vocab_size: int = 0
    num_layers: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    max_len: int = 128
    dropout_p: float = 0.2
    layer_norm_eps: float = 1e-5
    init_std: float = 0.02

    def validate(self):
        if self.num_layers < 1:
            raise ConfigError(f"encoder.num_layers must be >= 1, got {self.num_layers}")
        if self.hidden_dim < 1 or self.num_heads < 1 or self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"encoder.hidden_dim ({self.hidden_dim}) must be divisible by num_heads ({self.num_heads})"
            )
        if self.max_len < 8:
            raise ConfigError(f"encoder.max_len must be >= 8, got {self.max_len}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"encoder.dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.ffn_dim < 1:
            raise ConfigError(f"encoder.ffn_dim must be >= 1, got {self.ffn_dim}")

    def with_vocab(self, vocab_size: int) -> "EncoderConfig":
        return replace(self, vocab_size=vocab_size)


@dataclass
class EncoderWeights:
    """All encoder parameters keyed by dotted name"""
    config: EncoderConfig
    params: Dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def copy(self) -> "EncoderWeights":
        return EncoderWeights(
            self.config,
            {name: Tensor(p.data.copy(), requires_grad=True, name=name) for name, p in self.params.items()},
        )


def init_encoder_weights(config: EncoderConfig, seed: int) -> EncoderWeights:
    """Seeded N(0, init_std) weights, unit layer-norm gains, zero biases"""
    config.validate()
    if config.vocab_size <= NUM_RESERVED:
        raise ConfigError(f"encoder.vocab_size must exceed the {NUM_RESERVED} reserved tokens")

    rng = np.random.default_rng([seed, 0])
    d, f = config.hidden_dim, config.ffn_dim
    shapes: Dict[str, tuple] = {
        "embeddings.token": (config.vocab_size, d),
        "embeddings.position": (config.max_len, d),
    }
    for i in range(config.num_layers):
        prefix = f"layers.{i}"
        shapes.update({
            f"{prefix}.attn_norm.gain": (d,), f"{prefix}.attn_norm.bias": (d,),
            f"{prefix}.attn.query.weight": (d, d), f"{prefix}.attn.query.bias": (d,),
            f"{prefix}.attn.key.weight": (d, d), f"{prefix}.attn.key.bias": (d,),
            f"{prefix}.attn.value.weight": (d, d), f"{prefix}.attn.value.bias": (d,),
            f"{prefix}.attn.output.weight": (d, d), f"{prefix}.attn.output.bias": (d,),
            f"{prefix}.ffn_norm.gain": (d,), f"{prefix}.ffn_norm.bias": (d,),
            f"{prefix}.ffn.inner.weight": (d, f), f"{prefix}.ffn.inner.bias": (f,),
            f"{prefix}.ffn.outer.weight": (f, d), f"{prefix}.ffn.outer.bias": (d,),
        })
    shapes.update({"final_norm.gain": (d,), "final_norm.bias": (d,), "mlm.bias": (config.vocab_size,)})

    params = {}
    for name, shape in shapes.items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, config.init_std, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return EncoderWeights(config, params)


@dataclass
class LayerStates:
    """Hidden states: index 0 is the embedding output, 1..L the block outputs"""
    states: List[Tensor]

    def __len__(self) -> int:
        return len(self.states)

    def __getitem__(self, layer: int) -> Tensor:
        return self.states[layer]

    @property
    def num_layers(self) -> int:
        return len(self.states) - 1

    @property
    def top(self) -> Tensor:
        return self.states[-1]


def _linear(x: Tensor, weights: EncoderWeights, name: str) -> Tensor:
    return add_bias(matmul(x, weights[f"{name}.weight"]), weights[f"{name}.bias"])


def _self_attention(x: Tensor, key_mask: np.ndarray, weights: EncoderWeights, prefix: str,
                    train_mode: bool, rng: Optional[np.random.Generator]) -> Tensor:
    config = weights.config
    batch, seq, d = x.shape
    heads = config.num_heads
    head_dim = d // heads

    def split_heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (batch, seq, heads, head_dim)), (0, 2, 1, 3))

    q = split_heads(_linear(x, weights, f"{prefix}.query"))
    k = split_heads(_linear(x, weights, f"{prefix}.key"))
    v = split_heads(_linear(x, weights, f"{prefix}.value"))

    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(head_dim))
    scores = masked_fill(scores, key_mask[:, None, None, :], ATTENTION_FILL)
    probs = dropout(softmax(scores), config.dropout_p, rng, train_mode)
    context = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), (batch, seq, d))
    return _linear(context, weights, f"{prefix}.output")


def encode(ids: np.ndarray, attn_mask: np.ndarray, weights: EncoderWeights,
           train_mode: bool = False, rng: Optional[np.random.Generator] = None) -> LayerStates:
    """
    Run the pre-norm transformer stack over a padded batch.

    Args:
        ids: batch x seq token ids
        attn_mask: batch x seq booleans, True on real tokens
        weights: encoder parameters
        train_mode: enables dropout (needs rng)

    Returns:
        LayerStates with num_layers + 1 tensors of shape batch x seq x hidden_dim
    """
    config = weights.config
    ids = np.asarray(ids, dtype=np.int64)
    attn_mask = np.asarray(attn_mask, dtype=bool)
    if ids.ndim != 2 or attn_mask.shape != ids.shape:
        raise DimensionError(f"encode: ids {ids.shape} and attention mask {attn_mask.shape} must be batch x seq")
    if ids.shape[1] > config.max_len:
        raise DimensionError(f"encode: sequence length {ids.shape[1]} exceeds max_len {config.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise DimensionError(f"encode: token id out of range for vocab_size {config.vocab_size}")

    p = config.dropout_p
    seq = ids.shape[1]
    positions = take(weights["embeddings.position"], slice(0, seq))
    x = add_positions(embedding(weights["embeddings.token"], ids), positions)
    x = dropout(x, p, rng, train_mode)
    states = [x]

    for i in range(config.num_layers):
        prefix = f"layers.{i}"
        normed = layer_norm(x, weights[f"{prefix}.attn_norm.gain"], weights[f"{prefix}.attn_norm.bias"],
                            config.layer_norm_eps)
        attended = _self_attention(normed, attn_mask, weights, f"{prefix}.attn", train_mode, rng)
        x = add(x, dropout(attended, p, rng, train_mode))

        normed = layer_norm(x, weights[f"{prefix}.ffn_norm.gain"], weights[f"{prefix}.ffn_norm.bias"],
                            config.layer_norm_eps)
        hidden = gelu(_linear(normed, weights, f"{prefix}.ffn.inner"))
        x = add(x, dropout(_linear(hidden, weights, f"{prefix}.ffn.outer"), p, rng, train_mode))
        states.append(x)

    return LayerStates(states)


def final_norm(x: Tensor, weights: EncoderWeights) -> Tensor:
    return layer_norm(x, weights["final_norm.gain"], weights["final_norm.bias"], weights.config.layer_norm_eps)


def cls_embedding(states: LayerStates, weights: EncoderWeights) -> Tensor:
    """Final-norm'd position-0 state: the dialogue representation used downstream"""
    return final_norm(take(states.top, (slice(None), 0)), weights)


def pad_sequences(sequences: Sequence[Sequence[int]], length: Optional[int] = None):
    """Right-pad id lists with [PAD]; returns (ids, mask)"""
    length = length or max(len(s) for s in sequences)
    ids = np.full((len(sequences), length), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(sequences), length), dtype=bool)
    for row, seq in enumerate(sequences):
        ids[row, :len(seq)] = seq
        mask[row, :len(seq)] = True
    return ids, mask
