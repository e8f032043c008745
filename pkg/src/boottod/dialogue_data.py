"""
Dialogue Data Pipeline

Corpus ingestion, role-token serialization, context/response splitting with
response-target sampling, context-only masking and two-stream batch assembly.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .encoder import (
    CLS_ID,
    MASK_ID,
    NUM_RESERVED,
    SEP_ID,
    SYS_ID,
    USR_ID,
    Vocab,
    pad_sequences,
    tokenize,
)
from .errors import ConfigError, CorpusFormatError, DataError

logger = logging.getLogger(__name__)

USER, SYSTEM = "user", "system"
ROLE_TOKEN_IDS = {USER: USR_ID, SYSTEM: SYS_ID}
ALL = "all"


@dataclass
class Turn:
    role: str
    text: str


@dataclass
class Dialogue:
    """Alternating user/system utterances U1, S1, ..., Un, Sn"""
    id: str
    turns: List[Turn]

    @property
    def num_pairs(self) -> int:
        return len(self.turns) // 2

    def validate(self):
        if not self.turns or len(self.turns) % 2:
            raise DataError(f"dialogue '{self.id}' must have an even, non-zero number of turns")
        for position, turn in enumerate(self.turns):
            if not isinstance(turn.role, str) or not isinstance(turn.text, str):
                raise CorpusFormatError(
                    f"dialogue '{self.id}' turn {position}: role and text must be strings, "
                    f"got {type(turn.role).__name__} and {type(turn.text).__name__}"
                )
            expected = USER if position % 2 == 0 else SYSTEM
            if turn.role != expected:
                raise DataError(
                    f"dialogue '{self.id}' breaks user/system alternation at turn {position} "
                    f"(expected {expected}, got {turn.role})"
                )

    def system_utterances(self) -> List[str]:
        return [turn.text for turn in self.turns if turn.role == SYSTEM]

    def to_dict(self) -> dict:
        return {"id": self.id, "turns": [asdict(turn) for turn in self.turns]}

    @classmethod
    def from_dict(cls, record: dict) -> "Dialogue":
        return cls(
            id=str(record["id"]),
            turns=[Turn(role=t["role"], text=t["text"]) for t in record["turns"]],
        )


@dataclass
class DialogueLabels:
    """Downstream labels: one intent per dialogue, an act list per system turn"""
    id: str
    intent: str
    acts: List[List[str]]


# ---------------------------------------------------------------------------
# Corpus I/O
# ---------------------------------------------------------------------------

def _read_jsonl(path) -> List[Tuple[int, dict]]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append((line_number, json.loads(line)))
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f"{path}: malformed JSON on line {line_number}: {e.msg}")
    return records


def load_corpus(path) -> List[Dialogue]:
    """Parse a JSONL corpus and validate role alternation"""
    records = _read_jsonl(path)
    if not records:
        logger.warning(f"⚠️  Corpus {path} is empty")
        return []

    dialogues = []
    for line_number, record in records:
        try:
            dialogue = Dialogue.from_dict(record)
        except (KeyError, TypeError) as e:
            raise CorpusFormatError(f"{path}: line {line_number} is missing field {e}")
        dialogue.validate()
        dialogues.append(dialogue)
    logger.info(f"Loaded {len(dialogues)} dialogues from {path}")
    return dialogues


def write_corpus(dialogues: Iterable[Dialogue], path):
    with open(path, "w", encoding="utf-8") as f:
        for dialogue in dialogues:
            f.write(json.dumps(dialogue.to_dict(), ensure_ascii=False) + "\n")


def load_labels(path) -> Dict[str, DialogueLabels]:
    labels = {}
    for line_number, record in _read_jsonl(path):
        try:
            labels[str(record["id"])] = DialogueLabels(
                id=str(record["id"]), intent=record["intent"], acts=[list(a) for a in record["acts"]]
            )
        except (KeyError, TypeError) as e:
            raise CorpusFormatError(f"{path}: labels line {line_number} is missing field {e}")
    return labels


def write_labels(labels: Iterable[DialogueLabels], path):
    with open(path, "w", encoding="utf-8") as f:
        for label in labels:
            f.write(json.dumps(asdict(label), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def utterance_ids(turn: Turn, vocab: Vocab) -> List[int]:
    return [ROLE_TOKEN_IDS[turn.role]] + tokenize(turn.text, vocab)


def serialize(dialogue: Dialogue, upto_turn_pair: Union[int, str], vocab: Vocab,
              context_only: bool = False) -> List[int]:
    """
    [CLS] [USR] U1 [SYS] S1 ... [SEP]

    With context_only the sequence stops after the user utterance of turn pair
    `upto_turn_pair` (the context C = U1, S1, ..., Ut).
    """
    n = dialogue.num_pairs
    upto = n if upto_turn_pair == ALL else int(upto_turn_pair)
    if not 1 <= upto <= n:
        raise DataError(f"dialogue '{dialogue.id}': turn pair {upto_turn_pair} outside 1..{n}")
    count = 2 * upto - 1 if context_only else 2 * upto
    ids = [CLS_ID]
    for turn in dialogue.turns[:count]:
        ids.extend(utterance_ids(turn, vocab))
    return ids + [SEP_ID]


# ---------------------------------------------------------------------------
# Splitting and response-target sampling
# ---------------------------------------------------------------------------

class PMode(str, Enum):
    ZERO = "zero"
    CAP = "cap"
    ALL = "all"
    FIX = "fix"


@dataclass
class SamplerConfig:
    """Maximum response length P: zero, cap(k), all or fix"""
    p_mode: str = "all"
    p_cap: Optional[int] = None
    seed: int = 0

    @property
    def mode(self) -> PMode:
        return PMode(self.p_mode)

    @property
    def label(self) -> str:
        return f"cap{self.p_cap}" if self.mode is PMode.CAP else self.mode.value

    def validate(self):
        try:
            mode = PMode(self.p_mode)
        except ValueError:
            raise ConfigError(f"sampler.p_mode must be one of zero/cap/all/fix, got '{self.p_mode}'")
        if mode is PMode.CAP and (self.p_cap is None or self.p_cap < 1):
            raise ConfigError(f"sampler.p_cap must be >= 1 in cap mode, got {self.p_cap}")
        if mode is not PMode.CAP and self.p_cap is not None:
            raise ConfigError(f"sampler.p_cap={self.p_cap} conflicts with p_mode '{self.p_mode}'")

    @classmethod
    def parse(cls, value: str, seed: int = 0) -> "SamplerConfig":
        """Accept '0', 'zero', 'all', 'fix', 'cap3' or a bare cap like '3'"""
        text = str(value).strip().lower()
        if text in ("0", "zero"):
            return cls("zero", None, seed)
        if text in ("all", "fix"):
            return cls(text, None, seed)
        digits = text[3:] if text.startswith("cap") else text
        if digits.isdigit() and int(digits) >= 1:
            return cls("cap", int(digits), seed)
        raise ConfigError(f"cannot parse response-length setting '{value}'")


@dataclass
class SplitSample:
    """One pre-training instance: the context and the context + sampled response"""
    dialogue_id: str
    t: int
    response_len_utts: int
    mode: str
    context_utts: List[List[int]]
    response_utts: List[List[int]]
    response_roles: List[str] = field(default_factory=list)

    @property
    def context_ids(self) -> List[int]:
        return [CLS_ID] + [i for utt in self.context_utts for i in utt] + [SEP_ID]

    @property
    def full_ids(self) -> List[int]:
        return ([CLS_ID] + [i for utt in self.context_utts for i in utt]
                + [i for utt in self.response_utts for i in utt] + [SEP_ID])


def response_candidates(dialogue: Dialogue, t: int, cfg: SamplerConfig) -> List[int]:
    """Admissible response lengths (utterance counts) for a split at turn pair t"""
    future = 2 * (dialogue.num_pairs - t) + 1
    odd_lengths = list(range(1, future + 1, 2))
    mode = cfg.mode
    if mode is PMode.ZERO:
        return [0]
    if mode is PMode.FIX:
        return [future]
    if mode is PMode.CAP:
        return [length for length in odd_lengths if length <= cfg.p_cap]
    return odd_lengths


def split_and_sample(dialogue: Dialogue, cfg: SamplerConfig, rng: np.random.Generator,
                     vocab: Vocab) -> SplitSample:
    """Split at t ~ Uniform{1..n} and draw a response target ending on a system turn"""
    n = dialogue.num_pairs
    if n < 1:
        raise DataError(f"dialogue '{dialogue.id}' has no turn pairs")
    t = int(rng.integers(1, n + 1))
    candidates = response_candidates(dialogue, t, cfg)
    if cfg.mode in (PMode.CAP, PMode.ALL):
        length = candidates[int(rng.integers(len(candidates)))]
    else:
        length = candidates[0]

    context_turns = dialogue.turns[:2 * t - 1]
    response_turns = dialogue.turns[2 * t - 1:2 * t - 1 + length]
    return SplitSample(
        dialogue_id=dialogue.id,
        t=t,
        response_len_utts=length,
        mode=cfg.label,
        context_utts=[utterance_ids(turn, vocab) for turn in context_turns],
        response_utts=[utterance_ids(turn, vocab) for turn in response_turns],
        response_roles=[turn.role for turn in response_turns],
    )


def truncate_sample(sample: SplitSample, max_len: int) -> Tuple[SplitSample, bool]:
    """
    Fit a sample into max_len tokens.

    Oldest context utterances go first (the final user utterance always stays),
    then trailing user/system pairs of the response, then tokens from the end of
    the remaining response and, last, from the end of the final context utterance.
    """
    context = [list(u) for u in sample.context_utts]
    response = [list(u) for u in sample.response_utts]
    roles = list(sample.response_roles)

    def total() -> int:
        return 2 + sum(map(len, context)) + sum(map(len, response))

    if total() <= max_len:
        return sample, False

    while total() > max_len and len(context) > 1:
        context.pop(0)
    while total() > max_len and len(response) >= 3:
        del response[-2:]
        del roles[-2:]
    if total() > max_len and response:
        overflow = total() - max_len
        response[-1] = response[-1][:max(1, len(response[-1]) - overflow)]
    if total() > max_len:
        overflow = total() - max_len
        context[-1] = context[-1][:max(1, len(context[-1]) - overflow)]
    if total() > max_len and response:
        response, roles = [], []

    truncated = SplitSample(
        dialogue_id=sample.dialogue_id,
        t=sample.t,
        response_len_utts=len(response),
        mode=sample.mode,
        context_utts=context,
        response_utts=response,
        response_roles=roles,
    )
    return truncated, True


# ---------------------------------------------------------------------------
# Masking and batches
# ---------------------------------------------------------------------------

@dataclass
class MaskingResult:
    masked_ids: List[int]
    positions: List[int]
    labels: List[int]
    flagged: bool


def apply_masking(context_ids: Sequence[int], ratio: float, rng: np.random.Generator,
                  scheme: str = "mask", vocab_size: Optional[int] = None) -> MaskingResult:
    """
    Mask round-half-up(ratio * maskable) content tokens, at least one when any exist.

    Reserved tokens ([CLS], [SEP], [PAD], [USR], [SYS], ...) are never selected.
    The 'bert' scheme keeps 10% of selections unchanged and swaps 10% for random
    content tokens; labels always hold the original ids.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must be in (0, 1), got {ratio}")
    ids = list(context_ids)
    maskable = [i for i, token in enumerate(ids) if token >= NUM_RESERVED]
    if not maskable:
        return MaskingResult(ids, [], [], flagged=True)

    count = max(1, int(np.floor(ratio * len(maskable) + 0.5)))
    positions = sorted(int(p) for p in rng.choice(maskable, size=count, replace=False))
    labels = [ids[p] for p in positions]
    for p in positions:
        if scheme == "bert":
            draw = rng.random()
            if draw < 0.8:
                ids[p] = MASK_ID
            elif draw < 0.9:
                if vocab_size is None:
                    raise ConfigError("bert masking scheme needs the vocabulary size")
                ids[p] = int(rng.integers(NUM_RESERVED, vocab_size))
        else:
            ids[p] = MASK_ID
    return MaskingResult(ids, positions, labels, flagged=False)


@dataclass
class MaskedBatch:
    """Two padded streams; masking touches the context stream only"""
    context_ids: np.ndarray
    context_mask: np.ndarray
    full_ids: np.ndarray
    full_mask: np.ndarray
    mask_rows: np.ndarray
    mask_positions: np.ndarray
    mlm_labels: np.ndarray
    context_lengths: List[int]
    full_lengths: List[int]
    unmasked_context_ids: np.ndarray
    flagged: List[str] = field(default_factory=list)
    truncated: int = 0

    @property
    def size(self) -> int:
        return self.context_ids.shape[0]

    @property
    def mask_count(self) -> int:
        return int(self.mask_positions.size)


def make_pretrain_batch(samples: Sequence[SplitSample], ratio: float, vocab: Vocab,
                        rng: np.random.Generator, max_len: int = 128,
                        scheme: str = "mask") -> MaskedBatch:
    if not samples:
        raise DataError("cannot build a batch from zero samples")

    contexts, masked, fulls = [], [], []
    rows, positions, labels, flagged = [], [], [], []
    truncated = 0
    for row, sample in enumerate(samples):
        sample, was_truncated = truncate_sample(sample, max_len)
        truncated += int(was_truncated)
        context = sample.context_ids
        result = apply_masking(context, ratio, rng, scheme, len(vocab))
        if result.flagged:
            flagged.append(sample.dialogue_id)
        contexts.append(context)
        masked.append(result.masked_ids)
        fulls.append(sample.full_ids)
        rows.extend([row] * len(result.positions))
        positions.extend(result.positions)
        labels.extend(result.labels)

    if truncated:
        logger.debug(f"Truncated {truncated} of {len(samples)} samples to {max_len} tokens")

    context_ids, context_mask = pad_sequences(masked)
    unmasked_ids, _ = pad_sequences(contexts)
    full_ids, full_mask = pad_sequences(fulls)
    return MaskedBatch(
        context_ids=context_ids,
        context_mask=context_mask,
        full_ids=full_ids,
        full_mask=full_mask,
        mask_rows=np.asarray(rows, dtype=np.int64),
        mask_positions=np.asarray(positions, dtype=np.int64),
        mlm_labels=np.asarray(labels, dtype=np.int64),
        context_lengths=[len(c) for c in contexts],
        full_lengths=[len(f) for f in fulls],
        unmasked_context_ids=unmasked_ids,
        flagged=flagged,
        truncated=truncated,
    )
