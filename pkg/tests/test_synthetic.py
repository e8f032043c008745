import pytest

from src.boottod.dialogue_data import SYSTEM, USER
from src.boottod.errors import ConfigError
from src.boottod.synthetic import ACTS, SyntheticConfig, generate_synthetic_corpus, nearest_template_intent


def test_same_seed_same_corpus():
    a = generate_synthetic_corpus(SyntheticConfig(dialogues=40, seed=11))
    b = generate_synthetic_corpus(SyntheticConfig(dialogues=40, seed=11))
    assert [d.to_dict() for d in a.all_dialogues] == [d.to_dict() for d in b.all_dialogues]
    assert a.labels == b.labels


def test_different_seed_different_corpus():
    a = generate_synthetic_corpus(SyntheticConfig(dialogues=40, seed=1))
    b = generate_synthetic_corpus(SyntheticConfig(dialogues=40, seed=2))
    assert [d.to_dict() for d in a.all_dialogues] != [d.to_dict() for d in b.all_dialogues]


def test_splits_partition_the_corpus(small_corpus):
    ids = [d.id for d in small_corpus.all_dialogues]
    assert len(ids) == len(set(ids)) == 60
    assert len(small_corpus.test) == 12
    assert len(small_corpus.dev) == 6


def test_dialogues_alternate_and_labels_line_up(small_corpus):
    for dialogue in small_corpus.all_dialogues:
        dialogue.validate()
        assert dialogue.turns[0].role == USER and dialogue.turns[-1].role == SYSTEM
        label = small_corpus.labels[dialogue.id]
        assert label.intent in small_corpus.intents
        assert len(label.acts) == dialogue.num_pairs
        assert all(1 <= len(acts) <= 2 and set(acts) <= set(ACTS) for acts in label.acts)


def test_ood_intents_are_the_last_ones():
    corpus = generate_synthetic_corpus(SyntheticConfig(num_intents=6, num_ood_intents=2, dialogues=30))
    assert corpus.ood_intents == corpus.intents[-2:]


def test_intents_are_recoverable_from_user_turns():
    corpus = generate_synthetic_corpus(SyntheticConfig(num_intents=5, dialogues=50, slot_noise=0.0, seed=4))
    hits = sum(
        nearest_template_intent(d.turns[0].text, corpus.templates) == corpus.labels[d.id].intent
        for d in corpus.all_dialogues
    )
    assert hits / 50 >= 0.9


@pytest.mark.parametrize("changes", [
    {"num_intents": 1},
    {"num_ood_intents": 7},
    {"dev_fraction": 0.5, "test_fraction": 0.5},
    {"min_turn_pairs": 3, "max_turn_pairs": 2},
])
def test_invalid_settings(changes):
    with pytest.raises(ConfigError):
        SyntheticConfig(**changes).validate()
