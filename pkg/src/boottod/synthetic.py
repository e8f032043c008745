"""
Synthetic Task-Oriented Corpus

Seeded generator of intent-driven user/system dialogues with per-dialogue
intent labels and per-system-turn dialogue acts. Stands in for a real
pre-training corpus at desk scale.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .dialogue_data import SYSTEM, USER, Dialogue, DialogueLabels, Turn
from .encoder import split_words
from .errors import ConfigError

logger = logging.getLogger(__name__)

SLOT = "{slot}"

TOPICS: List[Tuple[str, List[str]]] = [
    ("restaurant", ["table", "dinner", "menu", "cuisine"]),
    ("hotel", ["room", "night", "stay", "suite"]),
    ("taxi", ["ride", "pickup", "driver", "cab"]),
    ("train", ["ticket", "departure", "platform", "journey"]),
    ("flight", ["plane", "boarding", "seat", "airline"]),
    ("weather", ["forecast", "rain", "temperature", "sunshine"]),
    ("music", ["song", "playlist", "album", "artist"]),
    ("bank", ["balance", "transfer", "account", "deposit"]),
    ("alarm", ["wakeup", "snooze", "morning", "timer"]),
    ("calendar", ["meeting", "schedule", "event", "appointment"]),
    ("shopping", ["order", "cart", "delivery", "package"]),
    ("movie", ["cinema", "showtime", "film", "screening"]),
]

OPENERS = ["i need", "can you help me with", "i would like", "please find", "i am looking for",
           "could you get me", "help me with", "i want"]
CONNECTORS = ["for", "in", "near", "on", "at", "around"]
ACKS = ["sure", "okay", "certainly", "alright", "of course", "no problem"]
SLOT_VALUES = ["london", "paris", "cambridge", "boston", "tokyo", "monday", "friday", "noon",
               "seven", "two", "four", "downtown", "north", "south", "tonight", "tomorrow"]
FILLERS = ["um", "please", "actually", "thanks", "well", "maybe"]

ACT_PHRASES: Dict[str, str] = {
    "inform": "it is available " + SLOT,
    "request": "what time would you like",
    "confirm": "shall i book that for you",
    "offer": "i found a great option",
    "recommend": "i recommend the one " + SLOT,
    "reqmore": "is there anything else",
    "select": "which one do you prefer",
    "nooffer": "sorry nothing matches " + SLOT,
}
ACTS = list(ACT_PHRASES)


@dataclass
class SyntheticConfig:
    """Generator settings; identical settings always produce identical corpora"""
    num_intents: int = 8
    templates_per_intent: int = 4
    dialogues: int = 500
    min_turn_pairs: int = 1
    max_turn_pairs: int = 4
    slot_noise: float = 0.1
    num_ood_intents: int = 0
    dev_fraction: float = 0.1
    test_fraction: float = 0.2
    seed: int = 7

    def validate(self):
        if self.num_intents < 2:
            raise ConfigError(f"corpus.num_intents must be >= 2, got {self.num_intents}")
        if self.templates_per_intent < 1:
            raise ConfigError("corpus.templates_per_intent must be >= 1")
        if self.dialogues < 3:
            raise ConfigError(f"corpus.dialogues must be >= 3, got {self.dialogues}")
        if not 1 <= self.min_turn_pairs <= self.max_turn_pairs:
            raise ConfigError(
                f"corpus turn-pair range [{self.min_turn_pairs}, {self.max_turn_pairs}] is empty"
            )
        if not 0.0 <= self.slot_noise <= 1.0:
            raise ConfigError(f"corpus.slot_noise must be in [0, 1], got {self.slot_noise}")
        if not 0 <= self.num_ood_intents <= self.num_intents - 2:
            raise ConfigError("corpus.num_ood_intents must leave at least two in-domain intents")
        if self.dev_fraction < 0 or self.test_fraction < 0 or self.dev_fraction + self.test_fraction >= 1:
            raise ConfigError("corpus dev/test fractions must be non-negative and sum below 1")


@dataclass
class IntentTemplates:
    intent: str
    topic_words: List[str]
    user: List[List[str]]
    system: List[List[str]]
    system_acts: List[List[str]]


@dataclass
class SyntheticCorpus:
    train: List[Dialogue]
    dev: List[Dialogue]
    test: List[Dialogue]
    labels: Dict[str, DialogueLabels]
    intents: List[str]
    ood_intents: List[str]
    acts: List[str]
    templates: List[IntentTemplates] = field(repr=False)

    @property
    def all_dialogues(self) -> List[Dialogue]:
        return self.train + self.dev + self.test


def _topic(index: int) -> Tuple[str, List[str]]:
    name, words = TOPICS[index % len(TOPICS)]
    round_ = index // len(TOPICS)
    if round_ == 0:
        return name, words
    return f"{name}{round_}", [f"{w}{round_}" for w in words]


def _build_templates(cfg: SyntheticConfig, rng: np.random.Generator) -> List[IntentTemplates]:
    tables = []
    for i in range(cfg.num_intents):
        name, words = _topic(i)
        user, system, system_acts = [], [], []
        for _ in range(cfg.templates_per_intent):
            opener = OPENERS[int(rng.integers(len(OPENERS)))].split()
            noun = words[int(rng.integers(len(words)))]
            connector = CONNECTORS[int(rng.integers(len(CONNECTORS)))]
            user.append(opener + ["a", noun, connector, SLOT])

            ack = ACKS[int(rng.integers(len(ACKS)))].split()
            picked = rng.choice(len(ACTS), size=int(rng.integers(1, 3)), replace=False)
            acts = [ACTS[a] for a in sorted(picked)]
            reply = ack + ["the", noun]
            for act in acts:
                reply += ACT_PHRASES[act].split()
            system.append(reply)
            system_acts.append(acts)
        tables.append(IntentTemplates(f"{name}_request", list(words), user, system, system_acts))
    return tables


def _fill(template: List[str], slot: str) -> str:
    return " ".join(slot if word == SLOT else word for word in template)


def _noisy(words: str, cfg: SyntheticConfig, rng: np.random.Generator) -> str:
    if cfg.slot_noise > 0 and rng.random() < cfg.slot_noise:
        tokens = words.split()
        at = int(rng.integers(len(tokens) + 1))
        tokens.insert(at, FILLERS[int(rng.integers(len(FILLERS)))])
        return " ".join(tokens)
    return words


def generate_synthetic_corpus(cfg: SyntheticConfig) -> SyntheticCorpus:
    """
    Sample dialogues from per-intent templates.

    Each dialogue draws one latent intent. User turns come from the intent's user
    templates with a slot value (replaced by a random one with probability
    slot_noise); the system reply uses the matching system template (a random one
    of the intent with probability slot_noise) and echoes the slot. Acts of a
    system turn are the acts of its template.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    tables = _build_templates(cfg, rng)
    intents = [table.intent for table in tables]
    ood = intents[len(intents) - cfg.num_ood_intents:] if cfg.num_ood_intents else []

    dialogues, labels = [], {}
    for index in range(cfg.dialogues):
        table = tables[int(rng.integers(len(tables)))]
        pairs = int(rng.integers(cfg.min_turn_pairs, cfg.max_turn_pairs + 1))
        turns, acts = [], []
        for _ in range(pairs):
            u = int(rng.integers(len(table.user)))
            slot = SLOT_VALUES[int(rng.integers(len(SLOT_VALUES)))]
            s = u
            if cfg.slot_noise > 0 and rng.random() < cfg.slot_noise:
                s = int(rng.integers(len(table.system)))
                slot_reply = SLOT_VALUES[int(rng.integers(len(SLOT_VALUES)))]
            else:
                slot_reply = slot
            turns.append(Turn(USER, _noisy(_fill(table.user[u], slot), cfg, rng)))
            turns.append(Turn(SYSTEM, _fill(table.system[s], slot_reply)))
            acts.append(list(table.system_acts[s]))
        dialogue = Dialogue(f"syn-{index:05d}", turns)
        dialogues.append(dialogue)
        labels[dialogue.id] = DialogueLabels(dialogue.id, table.intent, acts)

    order = rng.permutation(len(dialogues))
    n_test = int(round(cfg.test_fraction * len(dialogues)))
    n_dev = int(round(cfg.dev_fraction * len(dialogues)))
    test = [dialogues[i] for i in sorted(order[:n_test])]
    dev = [dialogues[i] for i in sorted(order[n_test:n_test + n_dev])]
    train = [dialogues[i] for i in sorted(order[n_test + n_dev:])]

    logger.info(
        f"Generated {len(dialogues)} synthetic dialogues over {len(intents)} intents "
        f"({len(train)} train / {len(dev)} dev / {len(test)} test)"
    )
    return SyntheticCorpus(train, dev, test, labels, intents, ood, ACTS, tables)


def nearest_template_intent(text: str, templates: List[IntentTemplates]) -> str:
    """Intent whose best user template shares the most (non-slot) words with the text"""
    words = set(split_words(text))
    best_intent, best_overlap = templates[0].intent, -1
    for table in templates:
        for template in table.user:
            overlap = len(words & {w for w in template if w != SLOT})
            if overlap > best_overlap:
                best_intent, best_overlap = table.intent, overlap
    return best_intent
