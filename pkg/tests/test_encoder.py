import numpy as np
import pytest

from src.boottod.encoder import (
    CLS_ID,
    NUM_RESERVED,
    PAD_ID,
    RESERVED_TOKENS,
    UNK_ID,
    EncoderConfig,
    EncoderWeights,
    Vocab,
    build_vocab,
    cls_embedding,
    encode,
    init_encoder_weights,
    pad_sequences,
    split_words,
    tokenize,
)
from src.boottod.errors import ConfigError, DataError, DimensionError
from src.boottod.tensor import Tensor, grad_check, tensor_sum


# Vocabulary
def test_split_words_lowercases_and_splits_punctuation():
    assert split_words("Book a Table, please!") == ["book", "a", "table", ",", "please", "!"]


def test_build_vocab_orders_by_frequency_then_token(make_dialogue):
    corpus = [make_dialogue("a", [("b a a", "c c c")])]
    vocab = build_vocab(corpus)
    assert vocab.tokens[:NUM_RESERVED] == RESERVED_TOKENS
    assert vocab.tokens[NUM_RESERVED:] == ["c", "a", "b"]


def test_build_vocab_min_freq(make_dialogue):
    vocab = build_vocab([make_dialogue("a", [("x y y", "z z z")])], min_freq=2)
    assert "x" not in vocab.index
    assert tokenize("x y", vocab) == [UNK_ID, vocab.id_of("y")]


def test_build_vocab_empty_corpus():
    with pytest.raises(DataError):
        build_vocab([])


def test_vocab_requires_reserved_prefix():
    with pytest.raises(DataError):
        Vocab(["hello"] + RESERVED_TOKENS)


def test_vocab_save_load(tmp_path, small_vocab):
    small_vocab.save(tmp_path / "vocab.txt")
    assert Vocab.load(tmp_path / "vocab.txt").tokens == small_vocab.tokens


# Config
def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        EncoderConfig(hidden_dim=30, num_heads=4).validate()


def test_init_requires_vocab_beyond_reserved():
    with pytest.raises(ConfigError):
        init_encoder_weights(EncoderConfig(vocab_size=NUM_RESERVED), seed=0)


def test_init_is_seeded(tiny_config):
    a = init_encoder_weights(tiny_config, seed=3)
    b = init_encoder_weights(tiny_config, seed=3)
    c = init_encoder_weights(tiny_config, seed=4)
    np.testing.assert_array_equal(a["embeddings.token"].data, b["embeddings.token"].data)
    assert not np.array_equal(a["embeddings.token"].data, c["embeddings.token"].data)
    assert np.all(a["layers.0.attn_norm.gain"].data == 1.0)


def test_copy_is_independent(tiny_encoder):
    clone = tiny_encoder.copy()
    clone["mlm.bias"].data += 1.0
    assert np.all(tiny_encoder["mlm.bias"].data == 0.0)
    assert clone.parameter_count() == tiny_encoder.parameter_count()


# Forward pass
def test_encode_returns_every_layer(tiny_encoder, tiny_config):
    ids, mask = pad_sequences([[CLS_ID, 8, 9], [CLS_ID, 10]])
    states = encode(ids, mask, tiny_encoder)
    assert states.num_layers == tiny_config.num_layers
    assert len(states) == tiny_config.num_layers + 1
    assert states.top.shape == (2, 3, tiny_config.hidden_dim)


def test_padding_does_not_change_real_positions(tiny_encoder):
    short_ids, short_mask = pad_sequences([[CLS_ID, 8, 9]])
    long_ids, long_mask = pad_sequences([[CLS_ID, 8, 9]], length=6)
    short = encode(short_ids, short_mask, tiny_encoder).top.data
    long = encode(long_ids, long_mask, tiny_encoder).top.data
    np.testing.assert_allclose(short[0], long[0, :3], atol=1e-10)


def test_eval_mode_is_deterministic(tiny_encoder):
    ids, mask = pad_sequences([[CLS_ID, 8, 9, 10]])
    first = cls_embedding(encode(ids, mask, tiny_encoder), tiny_encoder).data
    second = cls_embedding(encode(ids, mask, tiny_encoder), tiny_encoder).data
    np.testing.assert_array_equal(first, second)


def test_train_mode_uses_dropout(tiny_encoder):
    ids, mask = pad_sequences([[CLS_ID, 8, 9, 10]])
    eval_out = encode(ids, mask, tiny_encoder).top.data
    train_out = encode(ids, mask, tiny_encoder, train_mode=True, rng=np.random.default_rng(1)).top.data
    assert not np.allclose(eval_out, train_out)


def test_encode_is_invariant_to_batch_order(tiny_encoder):
    ids, mask = pad_sequences([[CLS_ID, 8, 9, 10], [CLS_ID, 11], [CLS_ID, 12, 13]])
    order = np.array([2, 0, 1])
    states = encode(ids, mask, tiny_encoder)
    permuted = encode(ids[order], mask[order], tiny_encoder)
    for layer in range(len(states)):
        np.testing.assert_allclose(permuted[layer].data, states[layer].data[order], rtol=0, atol=1e-12)


@pytest.mark.parametrize("name", [
    "embeddings.position", "layers.0.attn.query.weight", "layers.0.attn.value.bias",
    "layers.0.attn_norm.gain", "layers.0.ffn.inner.weight",
])
def test_grad_check_through_encoder(one_layer_config, name):
    weights = init_encoder_weights(one_layer_config, seed=0)
    ids, mask = pad_sequences([[CLS_ID, 8, 9, 10], [CLS_ID, 11]])
    readout = Tensor(np.random.default_rng(1).normal(size=(2, 4, one_layer_config.hidden_dim)))

    def f(x):
        states = encode(ids, mask, EncoderWeights(one_layer_config, {**weights.params, name: x}))
        return tensor_sum(states.top * readout)

    assert grad_check(f, weights[name].data, max_coords=48) < 1e-4


def test_encode_rejects_overlong_sequence(tiny_encoder, tiny_config):
    ids, mask = pad_sequences([[CLS_ID] * (tiny_config.max_len + 1)])
    with pytest.raises(DimensionError):
        encode(ids, mask, tiny_encoder)


def test_encode_rejects_out_of_range_id(tiny_encoder, tiny_config):
    ids, mask = pad_sequences([[CLS_ID, tiny_config.vocab_size]])
    with pytest.raises(DimensionError):
        encode(ids, mask, tiny_encoder)


def test_pad_sequences():
    ids, mask = pad_sequences([[1, 2, 3], [4]])
    np.testing.assert_array_equal(ids, [[1, 2, 3], [4, PAD_ID, PAD_ID]])
    np.testing.assert_array_equal(mask, [[True, True, True], [True, False, False]])
