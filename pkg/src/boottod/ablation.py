"""
Ablation Runner

Expands an axis (components, p or k) into cells, runs pre-training plus the
requested downstream tasks for each cell and seed, persists every finished
cell, and folds the results into one row per setting and metric.
"""

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dialogue_data import Dialogue, SamplerConfig
from .downstream import DownstreamData, FinetuneConfig, run_task
from .encoder import EncoderConfig, Vocab
from .errors import ConfigError
from .objective import AlignmentConfig
from .trainer import TrainConfig, train

logger = logging.getLogger(__name__)

AXES = ("components", "p", "k")

COMPONENT_SETTINGS: Dict[str, Dict[str, bool]] = {
    "full": {},
    "w/o-mask-align": {"use_mask_align": False},
    "w/o-cls-align": {"use_cls_align": False},
    "w/o-stop-gradient": {"use_stop_gradient": False},
    "w/o-mlp-head": {"use_predictor": False},
}
NO_MLM_SETTING = ("w/o-mlm", {"use_mlm": False})

CSV_COLUMNS = ["axis", "setting", "metric", "mean", "std", "n", "values"]


@dataclass
class AblationCell:
    axis: str
    setting: str
    seed: int
    alignment: AlignmentConfig
    sampler: SamplerConfig
    order: int = 0

    @property
    def key(self) -> str:
        return f"{self.axis}__{self.setting.replace('/', '')}__seed{self.seed}"


@dataclass
class AblationJob:
    """Everything a worker process needs to run one cell"""
    pretrain_dialogues: List[Dialogue]
    dev_dialogues: List[Dialogue]
    vocab: Vocab
    encoder_config: EncoderConfig
    train_config: TrainConfig
    finetune_config: FinetuneConfig
    data: DownstreamData
    tasks: Tuple[str, ...] = ("response-selection",)
    output_dir: Optional[str] = None


@dataclass
class CellResult:
    axis: str
    setting: str
    seed: int
    metrics: Dict[str, Optional[float]] = field(default_factory=dict)
    best_dev_ppl: Optional[float] = None
    steps: int = 0
    order: int = 0
    fingerprint: Optional[str] = None


def parse_k_values(text: Optional[str], num_layers: int) -> List[int]:
    """'1..L', '1..3' or '1,2'; defaults to every K from 1 to num_layers"""
    if not text:
        return list(range(1, num_layers + 1))
    text = text.strip()
    if ".." in text:
        low, high = text.split("..", 1)
        low = int(low) if low.strip() else 1
        high = num_layers if high.strip().upper() in ("", "L") else int(high)
        values = list(range(low, high + 1))
    else:
        try:
            values = [int(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"cannot parse K values '{text}'")
    bad = [k for k in values if not 1 <= k <= num_layers]
    if bad or not values:
        raise ConfigError(f"K values {values} must lie in [1, {num_layers}]")
    return values


def build_cells(axis: str, values: Optional[str], seeds: Sequence[int], alignment: AlignmentConfig,
                sampler: SamplerConfig, num_layers: int, include_no_mlm: bool = False) -> List[AblationCell]:
    """Cells in table order: settings outer, seeds inner"""
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis '{axis}', expected one of {AXES}")
    if not seeds:
        raise ConfigError("ablation needs at least one seed")

    settings: List[Tuple[str, AlignmentConfig, SamplerConfig]] = []
    if axis == "components":
        overrides = list(COMPONENT_SETTINGS.items())
        if include_no_mlm:
            overrides.append(NO_MLM_SETTING)
        for name, changes in overrides:
            settings.append((name, replace(alignment, **changes), sampler))
    elif axis == "p":
        for value in (values or "0,3,all,fix").split(","):
            parsed = SamplerConfig.parse(value, seed=sampler.seed)
            parsed.validate()
            settings.append((parsed.label, alignment, parsed))
    else:
        for k in parse_k_values(values, num_layers):
            settings.append((str(k), replace(alignment, k=k), sampler))

    pairs = [(setting, seed) for setting in settings for seed in seeds]
    return [AblationCell(axis, name, seed, align, samp, order)
            for order, ((name, align, samp), seed) in enumerate(pairs)]


def _cell_path(job: AblationJob, cell: AblationCell) -> Optional[Path]:
    if not job.output_dir:
        return None
    return Path(job.output_dir) / "cells" / f"{cell.key}.json"


def cell_fingerprint(cell: AblationCell, job: AblationJob) -> str:
    """SHA-256 over everything that decides a cell's metrics"""
    finetune = asdict(job.finetune_config)
    finetune.pop("show_progress", None)
    train = asdict(job.train_config)
    for volatile in ("log_path", "show_progress", "prefetch", "alignment", "sampler"):
        train.pop(volatile, None)
    payload = {
        "seed": cell.seed,
        "alignment": asdict(cell.alignment),
        "sampler": asdict(cell.sampler),
        "train": train,
        "encoder": asdict(job.encoder_config),
        "finetune": finetune,
        "tasks": list(job.tasks),
        "vocab_size": len(job.vocab),
        "dialogues": [len(job.pretrain_dialogues), len(job.dev_dialogues),
                      len(job.data.train), len(job.data.test)],
    }
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _load_cell(path: Path) -> Optional[CellResult]:
    try:
        with open(path, encoding="utf-8") as handle:
            return CellResult(**json.load(handle))
    except (json.JSONDecodeError, TypeError) as e:
        logger.warning(f"⚠️ Ignoring unreadable cell {path.name}: {e}")
        return None


def _save_cell(path: Path, result: CellResult):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(asdict(result), handle, indent=2, sort_keys=True)


def run_cell(cell: AblationCell, job: AblationJob) -> CellResult:
    """
    Pre-train with the cell's configuration, then run every downstream task.

    A persisted cell is reused only when its fingerprint matches the current
    configuration; otherwise it is run again and overwritten.
    """
    path = _cell_path(job, cell)
    fingerprint = cell_fingerprint(cell, job)
    if path is not None and path.exists():
        stored = _load_cell(path)
        if stored is not None and stored.fingerprint == fingerprint:
            logger.info(f"♻️ Reusing finished cell {cell.key}")
            if stored.order != cell.order:
                stored = replace(stored, order=cell.order)
                _save_cell(path, stored)
            return stored
        logger.info(f"Cell {cell.key} was run with a different configuration; running it again")

    train_cfg = replace(job.train_config, seed=cell.seed, alignment=cell.alignment, sampler=cell.sampler,
                        log_path=None, show_progress=False, prefetch=False)
    logger.info(f"Running cell {cell.key}")
    trained = train(job.pretrain_dialogues, job.dev_dialogues, job.vocab, job.encoder_config, train_cfg)

    finetune_cfg = replace(job.finetune_config, seed=cell.seed, show_progress=False)
    metrics: Dict[str, Optional[float]] = {}
    for task in job.tasks:
        report = run_task(task, trained.encoder, job.vocab, job.data, finetune_cfg).report
        metrics.update({f"{task}/{name}": value for name, value in report.metrics.items()})

    result = CellResult(cell.axis, cell.setting, cell.seed, metrics, trained.best_dev_ppl, trained.steps,
                        order=cell.order, fingerprint=fingerprint)
    if path is not None:
        _save_cell(path, result)
    logger.info(f"✅ Finished cell {cell.key}")
    return result


def run_ablation(cells: Sequence[AblationCell], job: AblationJob, parallel: int = 1) -> List[CellResult]:
    """Results come back in cell order whatever the worker count"""
    if parallel <= 1:
        return [run_cell(cell, job) for cell in cells]
    logger.info(f"Running {len(cells)} cells on {parallel} worker processes")
    with ProcessPoolExecutor(max_workers=parallel) as executor:
        futures = [executor.submit(run_cell, cell, job) for cell in cells]
        return [future.result() for future in futures]


def summarize(results: Sequence[CellResult]) -> List[dict]:
    """One row per (setting, metric) with the mean and population std over seeds"""
    grouped: Dict[Tuple[str, str, str], List[float]] = {}
    for result in results:
        metrics = dict(result.metrics)
        if result.best_dev_ppl is not None:
            metrics["pretrain/dev_ppl"] = result.best_dev_ppl
        for name, value in metrics.items():
            if value is None:
                continue
            grouped.setdefault((result.axis, result.setting, name), []).append(float(value))

    rows = []
    for (axis, setting, metric), values in grouped.items():
        rows.append({
            "axis": axis,
            "setting": setting,
            "metric": metric,
            "mean": float(np.mean(values)),
            "std": float(np.std(values)),
            "n": len(values),
            "values": ";".join(repr(v) for v in values),
        })
    return rows
