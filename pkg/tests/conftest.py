import os

import numpy as np
import pytest

from src.boottod.dialogue_data import SYSTEM, USER, Dialogue, Turn
from src.boottod.encoder import EncoderConfig, build_vocab, init_encoder_weights
from src.boottod.synthetic import SyntheticConfig, generate_synthetic_corpus


def pytest_collection_modifyitems(config, items):
    if os.environ.get("BOOTTOD_RUN_SLOW"):
        return
    skip_slow = pytest.mark.skip(reason="set BOOTTOD_RUN_SLOW=1 to run training end to end")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_dialogue(dialogue_id, pairs):
    turns = []
    for user_text, system_text in pairs:
        turns.append(Turn(USER, user_text))
        turns.append(Turn(SYSTEM, system_text))
    return Dialogue(dialogue_id, turns)


@pytest.fixture(name="make_dialogue")
def make_dialogue_fixture():
    return make_dialogue


@pytest.fixture
def three_pair_dialogue():
    return make_dialogue("d1", [
        ("i need a table for two", "sure what time"),
        ("at seven please", "booked a table at seven"),
        ("thanks a lot", "anything else"),
    ])


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(SyntheticConfig(num_intents=4, dialogues=60, seed=3))


@pytest.fixture(scope="session")
def default_corpus():
    return generate_synthetic_corpus(SyntheticConfig())


@pytest.fixture(scope="session")
def default_vocab(default_corpus):
    return build_vocab(default_corpus.all_dialogues)


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return build_vocab(small_corpus.all_dialogues)


@pytest.fixture(scope="session")
def tiny_config(small_vocab):
    return EncoderConfig(num_layers=2, hidden_dim=16, num_heads=2, ffn_dim=32, max_len=64,
                         dropout_p=0.1).with_vocab(len(small_vocab))


@pytest.fixture(scope="session")
def one_layer_config(small_vocab):
    return EncoderConfig(num_layers=1, hidden_dim=8, num_heads=2, ffn_dim=16, max_len=64,
                         dropout_p=0.1).with_vocab(len(small_vocab))


@pytest.fixture
def tiny_encoder(tiny_config):
    return init_encoder_weights(tiny_config, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
