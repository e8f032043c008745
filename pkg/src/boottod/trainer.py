"""
Pre-training Loop

Adam updates over re-sampled context/response splits, with dev-perplexity
early stopping. Splits, response targets and masks are drawn afresh every
epoch so each pass over the corpus sees different targets.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from .dialogue_data import Dialogue, MaskedBatch, SamplerConfig, make_pretrain_batch, split_and_sample
from .encoder import EncoderConfig, EncoderWeights, Vocab, init_encoder_weights
from .errors import ConfigError, DataError, NumericalError
from .objective import (
    AlignmentConfig,
    PredictorWeights,
    dev_mlm_loss,
    init_predictor_weights,
    pretrain_step,
)
from .tensor import Tensor

logger = logging.getLogger(__name__)

LR_SCHEDULES = ("constant", "linear")
MASK_SCHEMES = ("mask", "bert")

# Independent random streams derived from the run seed
STREAM_SHUFFLE, STREAM_MASK, STREAM_DROPOUT, STREAM_DEV = 2, 3, 4, 5


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: OptimizerState, lr: float) -> Dict[str, np.ndarray]:
    """Bias-corrected Adam update, applied in place to the arrays in `params`"""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter '{name}'")
        if name in params and np.shape(g) != np.shape(params[name]):
            raise NumericalError(
                f"gradient shape {np.shape(g)} does not match parameter '{name}' {np.shape(params[name])}"
            )

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step

    for name, param in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(param)
            state.v[name] = np.zeros_like(param)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        param -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


class Adam:
    """Adam over named tensors"""

    def __init__(self, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {lr}")
        self.lr = lr
        self.state = OptimizerState(beta1=beta1, beta2=beta2, eps=eps)

    def step(self, params: Dict[str, Tensor], grads: Dict[str, np.ndarray]):
        adam_step({name: p.data for name, p in params.items()}, grads, self.state, self.lr)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 16
    max_steps: int = 500
    eval_every: int = 50
    patience: int = 3
    seed: int = 0
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    mask_ratio: float = 0.15
    mask_scheme: str = "mask"
    lr_schedule: str = "constant"
    dev_batches: int = 8
    prefetch: bool = False
    log_path: Optional[str] = None
    show_progress: bool = False

    def validate(self, num_layers: Optional[int] = None):
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be > 0, got {self.lr}")
        if self.patience < 1:
            raise ConfigError(f"train.patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 0:
            raise ConfigError(f"train.max_steps must be >= 0, got {self.max_steps}")
        if self.eval_every < 1:
            raise ConfigError(f"train.eval_every must be >= 1, got {self.eval_every}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"train.mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if self.mask_scheme not in MASK_SCHEMES:
            raise ConfigError(f"train.mask_scheme must be one of {MASK_SCHEMES}, got {self.mask_scheme!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"train.lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if self.dev_batches < 1:
            raise ConfigError(f"train.dev_batches must be >= 1, got {self.dev_batches}")
        self.sampler.validate()
        self.alignment.validate(num_layers)

    def learning_rate(self, step: int) -> float:
        """Rate for the update that produces `step` (1-based)"""
        if self.lr_schedule == "linear" and self.max_steps > 0:
            return self.lr * max(0.0, 1.0 - (step - 1) / self.max_steps)
        return self.lr


class EarlyStopper:
    """Tracks the best (lowest) dev metric and counts evals without improvement"""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_value = math.inf
        self.best_step: Optional[int] = None
        self.bad_evals = 0

    def update(self, step: int, value: float) -> bool:
        """Record an eval; returns True when it is a new best"""
        if value < self.best_value:
            self.best_value, self.best_step, self.bad_evals = value, step, 0
            return True
        self.bad_evals += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_evals >= self.patience


@dataclass
class TrainResult:
    encoder: EncoderWeights
    predictor: Optional[PredictorWeights]
    best_step: Optional[int]
    best_dev_ppl: Optional[float]
    steps: int
    stopped_early: bool
    log: List[dict] = field(default_factory=list)
    flagged_batches: int = 0


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

def iterate_epoch(dialogues: Sequence[Dialogue], cfg: TrainConfig, vocab: Vocab, max_len: int,
                  shuffle_rng: np.random.Generator, mask_rng: np.random.Generator) -> Iterator[MaskedBatch]:
    """One shuffled pass with fresh splits, response targets and masks"""
    order = shuffle_rng.permutation(len(dialogues))
    for start in range(0, len(order), cfg.batch_size):
        samples = [split_and_sample(dialogues[i], cfg.sampler, shuffle_rng, vocab)
                   for i in order[start:start + cfg.batch_size]]
        yield make_pretrain_batch(samples, cfg.mask_ratio, vocab, mask_rng, max_len, cfg.mask_scheme)


def _batches(dialogues: Sequence[Dialogue], cfg: TrainConfig, vocab: Vocab,
             max_len: int) -> Iterator[MaskedBatch]:
    shuffle_rng = np.random.default_rng([cfg.seed, STREAM_SHUFFLE])
    mask_rng = np.random.default_rng([cfg.seed, STREAM_MASK])
    epoch = 0
    while True:
        epoch += 1
        logger.debug(f"Starting epoch {epoch}")
        yield from iterate_epoch(dialogues, cfg, vocab, max_len, shuffle_rng, mask_rng)


def _prefetched(batches: Iterator[MaskedBatch], executor: ThreadPoolExecutor) -> Iterator[MaskedBatch]:
    """Build the next batch on one worker thread while the current step runs"""
    pending = executor.submit(next, batches, None)
    while True:
        batch = pending.result()
        if batch is None:
            return
        pending = executor.submit(next, batches, None)
        yield batch


def build_dev_batches(dialogues: Sequence[Dialogue], cfg: TrainConfig, vocab: Vocab,
                      max_len: int) -> List[MaskedBatch]:
    """Fixed dev batches, identical at every evaluation"""
    rng = np.random.default_rng([cfg.seed, STREAM_DEV])
    batches = []
    for start in range(0, len(dialogues), cfg.batch_size):
        if len(batches) >= cfg.dev_batches:
            break
        samples = [split_and_sample(d, cfg.sampler, rng, vocab) for d in dialogues[start:start + cfg.batch_size]]
        batches.append(make_pretrain_batch(samples, cfg.mask_ratio, vocab, rng, max_len, cfg.mask_scheme))
    return batches


def dev_perplexity(batches: Sequence[MaskedBatch], encoder: EncoderWeights) -> float:
    """exp of the mean dev MLM loss"""
    losses = [loss for loss in (dev_mlm_loss(b, encoder) for b in batches) if loss is not None]
    if not losses:
        raise DataError("dev split produced no masked tokens; cannot compute perplexity")
    return float(np.exp(np.mean(losses)))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class _LogWriter:
    def __init__(self, path: Optional[str]):
        self.records: List[dict] = []
        self._handle = None
        if path:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._handle = open(path, "w", encoding="utf-8")

    def write(self, record: dict):
        self.records.append(record)
        if self._handle:
            self._handle.write(json.dumps(record) + "\n")
            self._handle.flush()

    def close(self):
        if self._handle:
            self._handle.close()


def train(train_dialogues: Sequence[Dialogue], dev_dialogues: Sequence[Dialogue], vocab: Vocab,
          encoder_config: EncoderConfig, cfg: TrainConfig,
          encoder: Optional[EncoderWeights] = None,
          predictor: Optional[PredictorWeights] = None) -> TrainResult:
    """
    Pre-train an encoder (and predictor head) on the given dialogues.

    Every eval_every steps the dev MLM perplexity is measured in eval mode; the
    run stops once it fails to improve for `patience` consecutive evals and the
    best-perplexity weights are returned.
    """
    if not train_dialogues:
        raise DataError("training split is empty")
    if not dev_dialogues:
        raise DataError("dev split is empty; early stopping needs dev dialogues")

    encoder_config = encoder_config.with_vocab(len(vocab)) if encoder_config.vocab_size == 0 else encoder_config
    cfg.validate(encoder_config.num_layers)
    cfg.alignment.warn_if_unstable()
    if encoder is None:
        encoder = init_encoder_weights(encoder_config, cfg.seed)
    if predictor is None and cfg.alignment.use_predictor:
        predictor = init_predictor_weights(encoder_config.hidden_dim, cfg.seed, init_std=encoder_config.init_std)

    optimizer = Adam(cfg.lr)
    dropout_rng = np.random.default_rng([cfg.seed, STREAM_DROPOUT])
    max_len = encoder_config.max_len
    dev_batches = build_dev_batches(dev_dialogues, cfg, vocab, max_len)
    stopper = EarlyStopper(cfg.patience)
    log = _LogWriter(cfg.log_path)
    best = (encoder.copy(), predictor.copy() if predictor is not None else None)
    flagged = 0
    step = 0
    stopped_early = False

    logger.info(
        f"Pre-training {encoder.parameter_count()} encoder parameters on {len(train_dialogues)} dialogues "
        f"(P={cfg.sampler.label}, K={cfg.alignment.k}, max_steps={cfg.max_steps})"
    )

    executor = ThreadPoolExecutor(max_workers=1) if cfg.prefetch else None
    batches = _batches(train_dialogues, cfg, vocab, max_len)
    if executor is not None:
        batches = _prefetched(batches, executor)
    progress = tqdm(total=cfg.max_steps, desc="pretrain", disable=not cfg.show_progress)

    try:
        while step < cfg.max_steps:
            batch = next(batches)
            step += 1
            optimizer.lr = cfg.learning_rate(step)
            parts = pretrain_step(batch, encoder, predictor, cfg.alignment, optimizer, dropout_rng)
            flagged += int(parts.flagged)
            log.write(parts.to_record(step))
            progress.update(1)
            progress.set_postfix(loss=f"{parts.total:.4f}")

            if step % cfg.eval_every == 0 or step == cfg.max_steps:
                ppl = dev_perplexity(dev_batches, encoder)
                log.write({"step": step, "dev_ppl": ppl})
                if stopper.update(step, ppl):
                    best = (encoder.copy(), predictor.copy() if predictor is not None else None)
                    logger.info(f"✅ step {step}: dev perplexity {ppl:.3f} (new best)")
                else:
                    logger.info(f"step {step}: dev perplexity {ppl:.3f} "
                                f"({stopper.bad_evals}/{cfg.patience} without improvement)")
                if stopper.should_stop:
                    stopped_early = True
                    logger.info(f"Early stop at step {step}; best step {stopper.best_step}")
                    break
    finally:
        progress.close()
        log.close()
        if executor is not None:
            executor.shutdown(wait=True)

    if flagged:
        logger.warning(f"⚠️ {flagged} batches had no maskable tokens or were otherwise flagged")

    best_encoder, best_predictor = best
    return TrainResult(
        encoder=best_encoder,
        predictor=best_predictor,
        best_step=stopper.best_step,
        best_dev_ppl=None if stopper.best_step is None else stopper.best_value,
        steps=step,
        stopped_early=stopped_early,
        log=log.records,
        flagged_batches=flagged,
    )
