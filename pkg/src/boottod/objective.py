"""
Self-Bootstrapping Pre-training Objective

Two encoder passes per step: the masked context stream (online branch, through
the predictor head) and the context+response stream (target branch, detached).
Three losses are summed:

    l_cls   [CLS] alignment over the topmost K layers
    l_mask  masked-token alignment over the topmost K layers
    l_mlm   masked language modeling on the context stream
"""

import logging
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Dict, Optional, Protocol

import numpy as np

from .dialogue_data import MaskedBatch
from .encoder import EncoderWeights, LayerStates, encode, final_norm
from .errors import ConfigError, DataError, DimensionError, NumericalError
from .tensor import (
    Tensor,
    add,
    add_bias,
    backward,
    l2_distance,
    l2_normalize,
    matmul,
    no_grad,
    relu,
    softmax_cross_entropy,
    squared_distance,
    stop_gradient,
    take,
    tensor_mean,
    tensor_sum,
    transpose,
)

logger = logging.getLogger(__name__)

DISTANCES = ("euclidean", "squared")
REDUCTIONS = ("mean", "sum")


# ---------------------------------------------------------------------------
# Predictor head
# ---------------------------------------------------------------------------

@dataclass
class PredictorWeights:
    """Two-layer MLP h: d -> hidden -> d with a ReLU in between"""
    params: Dict[str, Tensor]

    @property
    def input_dim(self) -> int:
        return self.params["predictor.w1"].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.params["predictor.w1"].shape[1]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def copy(self) -> "PredictorWeights":
        return PredictorWeights(
            {name: Tensor(p.data.copy(), requires_grad=True, name=name) for name, p in self.params.items()}
        )


def predictor_hidden_dim(d: int) -> int:
    return max(8, (2 * d) // 3)


def init_predictor_weights(d: int, seed: int, hidden_dim: Optional[int] = None,
                           init_std: float = 0.02) -> PredictorWeights:
    hidden_dim = hidden_dim or predictor_hidden_dim(d)
    rng = np.random.default_rng([seed, 1])
    shapes = {
        "predictor.w1": (d, hidden_dim), "predictor.b1": (hidden_dim,),
        "predictor.w2": (hidden_dim, d), "predictor.b2": (d,),
    }
    params = {}
    for name, shape in shapes.items():
        data = np.zeros(shape) if name.startswith("predictor.b") else rng.normal(0.0, init_std, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return PredictorWeights(params)


def predictor_forward(x: Tensor, w: PredictorWeights) -> Tensor:
    if x.shape[-1] != w.input_dim:
        raise DimensionError(f"predictor: input last dim {x.shape[-1]} != predictor dim {w.input_dim}")
    hidden = relu(add_bias(matmul(x, w["predictor.w1"]), w["predictor.b1"]))
    return add_bias(matmul(hidden, w["predictor.w2"]), w["predictor.b2"])


# ---------------------------------------------------------------------------
# Configuration and results
# ---------------------------------------------------------------------------

@dataclass
class AlignmentConfig:
    """Loss switches; every component can be turned off for ablations"""
    k: int = 2
    use_stop_gradient: bool = True
    use_cls_align: bool = True
    use_mask_align: bool = True
    use_mlm: bool = True
    use_predictor: bool = True
    distance: str = "euclidean"
    normalize: bool = False
    reduction: str = "mean"
    target_dropout: bool = True

    def validate(self, num_layers: Optional[int] = None):
        if not (self.use_cls_align or self.use_mask_align or self.use_mlm):
            raise ConfigError("alignment: at least one of cls align, mask align and mlm must be enabled")
        if self.k < 1:
            raise ConfigError(f"alignment.k must be >= 1, got {self.k}")
        if num_layers is not None and self.k > num_layers:
            raise ConfigError(f"alignment.k ({self.k}) exceeds encoder num_layers ({num_layers})")
        if self.distance not in DISTANCES:
            raise ConfigError(f"alignment.distance must be one of {DISTANCES}, got {self.distance!r}")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"alignment.reduction must be one of {REDUCTIONS}, got {self.reduction!r}")

    def warn_if_unstable(self):
        if not self.use_mlm:
            logger.warning("⚠️ MLM disabled: pre-training without the MLM term is expected to fail to converge")


@dataclass
class LossBreakdown:
    """Per-term values of one step; disabled or undefined terms are None"""
    l_cls: Optional[float]
    l_mask: Optional[float]
    l_mlm: Optional[float]
    total: float
    mask_count: int
    layer_count: int
    flagged: bool = False
    total_tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def to_record(self, step: int) -> dict:
        return {"step": step, "l_cls": self.l_cls, "l_mask": self.l_mask, "l_mlm": self.l_mlm,
                "total": self.total}


class Optimizer(Protocol):
    def step(self, params: Dict[str, Tensor], grads: Dict[str, np.ndarray]) -> None:
        ...


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

def _distance(online: Tensor, target: Tensor, cfg: AlignmentConfig) -> Tensor:
    if cfg.normalize:
        online, target = l2_normalize(online), l2_normalize(target)
    if cfg.distance == "squared":
        return squared_distance(online, target)
    return l2_distance(online, target)


def _reduce(distances: Tensor, cfg: AlignmentConfig) -> Tensor:
    return tensor_sum(distances) if cfg.reduction == "sum" else tensor_mean(distances)


def _aligned_layers(ctx_states: LayerStates, full_states: LayerStates, cfg: AlignmentConfig):
    if ctx_states.num_layers != full_states.num_layers:
        raise DimensionError(
            f"alignment: context has {ctx_states.num_layers} layers, full stream {full_states.num_layers}"
        )
    if not 1 <= cfg.k <= ctx_states.num_layers:
        raise ConfigError(f"alignment.k ({cfg.k}) must be in [1, {ctx_states.num_layers}]")
    if ctx_states.top.shape[0] != full_states.top.shape[0]:
        raise DimensionError(
            f"alignment: batch sizes differ ({ctx_states.top.shape[0]} vs {full_states.top.shape[0]})"
        )
    top = ctx_states.num_layers
    return range(top - cfg.k + 1, top + 1)


def _online_and_target(online: Tensor, target: Tensor, w: Optional[PredictorWeights],
                       cfg: AlignmentConfig) -> Tensor:
    if cfg.use_predictor:
        if w is None:
            raise ConfigError("alignment.use_predictor is set but no predictor weights were given")
        online = predictor_forward(online, w)
    if cfg.use_stop_gradient:
        target = stop_gradient(target)
    return _distance(online, target, cfg)


def loss_cls(ctx_states: LayerStates, full_states: LayerStates, w: Optional[PredictorWeights],
             cfg: AlignmentConfig) -> Tensor:
    """Sum over the top-K layers of the batch-reduced [CLS] distance"""
    total = None
    for layer in _aligned_layers(ctx_states, full_states, cfg):
        online = take(ctx_states[layer], (slice(None), 0))
        target = take(full_states[layer], (slice(None), 0))
        term = _reduce(_online_and_target(online, target, w, cfg), cfg)
        total = term if total is None else add(total, term)
    return total


def loss_mask(ctx_states: LayerStates, full_states: LayerStates, mask_rows: np.ndarray,
              mask_positions: np.ndarray, w: Optional[PredictorWeights], cfg: AlignmentConfig) -> Tensor:
    """
    Masked-token alignment: the context state at a masked position is pulled
    towards the full stream's state at the same absolute position, where the
    token is unmasked. Returns a constant 0 when nothing is masked.
    """
    layers = _aligned_layers(ctx_states, full_states, cfg)
    rows = np.asarray(mask_rows, dtype=np.int64)
    positions = np.asarray(mask_positions, dtype=np.int64)
    if rows.shape != positions.shape:
        raise DimensionError(f"loss_mask: {rows.shape[0]} rows for {positions.shape[0]} positions")
    if positions.size == 0:
        return Tensor(0.0)

    batch, ctx_len = ctx_states.top.shape[:2]
    full_len = full_states.top.shape[1]
    if rows.min() < 0 or rows.max() >= batch:
        raise DimensionError(f"loss_mask: row index out of range for batch of {batch}")
    if positions.min() < 0 or positions.max() >= min(ctx_len, full_len):
        raise DimensionError(
            f"loss_mask: mask position {int(positions.max())} outside context length {ctx_len} "
            f"or full length {full_len}"
        )

    total = None
    for layer in layers:
        online = take(ctx_states[layer], (rows, positions))
        target = take(full_states[layer], (rows, positions))
        term = _reduce(_online_and_target(online, target, w, cfg), cfg)
        total = term if total is None else add(total, term)
    return total


def mlm_logits(hidden: Tensor, encoder: EncoderWeights) -> Tensor:
    """Vocabulary logits with the output projection tied to the token embedding"""
    normed = final_norm(hidden, encoder)
    return add_bias(matmul(normed, transpose(encoder["embeddings.token"])), encoder["mlm.bias"])


def loss_mlm(ctx_top_state: Tensor, mlm_labels: np.ndarray, mask_rows: np.ndarray,
             mask_positions: np.ndarray, encoder: EncoderWeights) -> Tensor:
    labels = np.asarray(mlm_labels, dtype=np.int64)
    if labels.size == 0:
        raise DataError("loss_mlm needs at least one masked position")
    if not (labels.shape == np.shape(mask_rows) == np.shape(mask_positions)):
        raise DimensionError(
            f"loss_mlm: {labels.shape[0]} labels for {np.shape(mask_positions)[0]} positions"
        )
    hidden = take(ctx_top_state, (np.asarray(mask_rows, dtype=np.int64),
                                  np.asarray(mask_positions, dtype=np.int64)))
    return softmax_cross_entropy(mlm_logits(hidden, encoder), labels)


def _value(term) -> Optional[float]:
    if term is None:
        return None
    return term.item() if isinstance(term, Tensor) else float(term)


def total_loss(l_cls, l_mask, l_mlm, cfg: AlignmentConfig, mask_count: int = 0,
               layer_count: Optional[int] = None, flagged: bool = False) -> LossBreakdown:
    """Unweighted sum of the enabled terms that were computed"""
    enabled = [
        term for term, on in ((l_cls, cfg.use_cls_align), (l_mask, cfg.use_mask_align), (l_mlm, cfg.use_mlm))
        if on and term is not None
    ]
    if all(isinstance(t, Tensor) for t in enabled) and enabled:
        total_tensor = enabled[0]
        for term in enabled[1:]:
            total_tensor = add(total_tensor, term)
        total = total_tensor.item()
    else:
        total_tensor = None
        total = float(sum(_value(t) for t in enabled))

    return LossBreakdown(
        l_cls=_value(l_cls) if cfg.use_cls_align else None,
        l_mask=_value(l_mask) if cfg.use_mask_align else None,
        l_mlm=_value(l_mlm) if cfg.use_mlm else None,
        total=total,
        mask_count=mask_count,
        layer_count=cfg.k if layer_count is None else layer_count,
        flagged=flagged,
        total_tensor=total_tensor,
    )


# ---------------------------------------------------------------------------
# Step
# ---------------------------------------------------------------------------

def compute_losses(batch: MaskedBatch, encoder: EncoderWeights, predictor: Optional[PredictorWeights],
                   cfg: AlignmentConfig, rng: Optional[np.random.Generator],
                   train_mode: bool = True) -> LossBreakdown:
    """Forward both streams and build the loss graph (no parameter update)"""
    ctx_states = encode(batch.context_ids, batch.context_mask, encoder, train_mode, rng)

    need_target = cfg.use_cls_align or cfg.use_mask_align
    full_states = None
    if need_target:
        # a detached target never needs its own graph
        detach = no_grad() if cfg.use_stop_gradient else nullcontext()
        with detach:
            full_states = encode(batch.full_ids, batch.full_mask, encoder,
                                 train_mode and cfg.target_dropout, rng)

    m = batch.mask_count
    l_cls = loss_cls(ctx_states, full_states, predictor, cfg) if cfg.use_cls_align else None
    l_mask = None
    if cfg.use_mask_align:
        l_mask = loss_mask(ctx_states, full_states, batch.mask_rows, batch.mask_positions, predictor, cfg)
    l_mlm = None
    if cfg.use_mlm and m > 0:
        l_mlm = loss_mlm(ctx_states.top, batch.mlm_labels, batch.mask_rows, batch.mask_positions, encoder)

    flagged = m == 0 or bool(batch.flagged)
    if m == 0:
        logger.debug("Batch has no masked tokens; mask alignment contributes 0 and MLM is absent")
    return total_loss(l_cls, l_mask, l_mlm, cfg, mask_count=m, layer_count=cfg.k, flagged=flagged)


def trainable_parameters(encoder: EncoderWeights, predictor: Optional[PredictorWeights],
                         cfg: AlignmentConfig) -> Dict[str, Tensor]:
    params = dict(encoder.params)
    if predictor is not None and cfg.use_predictor:
        params.update(predictor.params)
    return params


def pretrain_step(batch: MaskedBatch, encoder: EncoderWeights, predictor: Optional[PredictorWeights],
                  cfg: AlignmentConfig, optimizer: Optimizer,
                  rng: Optional[np.random.Generator]) -> LossBreakdown:
    """One forward, one backward and one optimizer update"""
    try:
        parts = compute_losses(batch, encoder, predictor, cfg, rng, train_mode=True)
    except NumericalError as e:
        raise NumericalError(
            f"pre-training step aborted: {e} (batch of {batch.size}, {batch.mask_count} masked tokens)"
        ) from e

    if parts.total_tensor is None or not parts.total_tensor.requires_grad:
        logger.warning("⚠️ No loss term could be computed for this batch; skipping update")
        return parts
    if not np.isfinite(parts.total):
        raise NumericalError(
            f"non-finite loss: l_cls={parts.l_cls} l_mask={parts.l_mask} l_mlm={parts.l_mlm}"
        )

    params = trainable_parameters(encoder, predictor, cfg)
    grads_by_leaf = backward(parts.total_tensor, leaves=params.values())
    grads = {name: grads_by_leaf[p] for name, p in params.items()}
    for p in params.values():
        p.zero_grad()
    optimizer.step(params, grads)
    parts.total_tensor = None
    return parts


def dev_mlm_loss(batch: MaskedBatch, encoder: EncoderWeights) -> Optional[float]:
    """Eval-mode MLM loss of one batch, None when nothing is masked"""
    if batch.mask_count == 0:
        return None
    with no_grad():
        states = encode(batch.context_ids, batch.context_mask, encoder, train_mode=False)
        return loss_mlm(states.top, batch.mlm_labels, batch.mask_rows, batch.mask_positions, encoder).item()
