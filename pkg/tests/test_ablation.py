import json
import os
from dataclasses import asdict, replace
from unittest.mock import patch

import pytest

from src.boottod.ablation import (
    AblationCell,
    AblationJob,
    CellResult,
    build_cells,
    parse_k_values,
    run_ablation,
    run_cell,
    summarize,
)
from src.boottod.dialogue_data import SamplerConfig
from src.boottod.downstream import DownstreamData, FinetuneConfig
from src.boottod.errors import ConfigError
from src.boottod.objective import AlignmentConfig
from src.boottod.trainer import TrainConfig


@pytest.fixture
def job(tmp_path, small_corpus, small_vocab, tiny_config):
    return AblationJob(
        pretrain_dialogues=small_corpus.train,
        dev_dialogues=small_corpus.dev,
        vocab=small_vocab,
        encoder_config=tiny_config,
        train_config=TrainConfig(batch_size=4, max_steps=2, eval_every=1, dev_batches=1),
        finetune_config=FinetuneConfig(steps=0),
        data=DownstreamData(small_corpus.train, small_corpus.test, small_corpus.labels,
                            small_corpus.intents, small_corpus.ood_intents, small_corpus.acts),
        tasks=("act",),
        output_dir=str(tmp_path / "ablate"),
    )


# Cell expansion
def test_parse_k_values():
    assert parse_k_values("1..L", 4) == [1, 2, 3, 4]
    assert parse_k_values("2..3", 4) == [2, 3]
    assert parse_k_values("1,3", 4) == [1, 3]
    assert parse_k_values(None, 2) == [1, 2]
    with pytest.raises(ConfigError):
        parse_k_values("0..2", 4)
    with pytest.raises(ConfigError):
        parse_k_values("5", 4)


def test_component_cells():
    cells = build_cells("components", None, [1, 2], AlignmentConfig(), SamplerConfig(), 2)
    assert len(cells) == 10
    assert [c.setting for c in cells[::2]] == ["full", "w/o-mask-align", "w/o-cls-align",
                                                "w/o-stop-gradient", "w/o-mlp-head"]
    no_head = cells[8].alignment
    assert not no_head.use_predictor and no_head.use_cls_align


def test_component_cells_with_no_mlm_row():
    cells = build_cells("components", None, [0], AlignmentConfig(), SamplerConfig(), 2, include_no_mlm=True)
    assert cells[-1].setting == "w/o-mlm" and not cells[-1].alignment.use_mlm


def test_p_axis_cells():
    cells = build_cells("p", "0,3,all,fix", [0], AlignmentConfig(), SamplerConfig(), 2)
    assert [c.setting for c in cells] == ["zero", "cap3", "all", "fix"]
    assert cells[1].sampler.p_cap == 3


def test_k_axis_cells():
    cells = build_cells("k", "1..L", [0], AlignmentConfig(), SamplerConfig(), 3)
    assert [c.alignment.k for c in cells] == [1, 2, 3]


def test_unknown_axis():
    with pytest.raises(ConfigError):
        build_cells("lr", None, [0], AlignmentConfig(), SamplerConfig(), 2)


def test_cell_key_is_file_safe():
    cell = AblationCell("components", "w/o-mlp-head", 3, AlignmentConfig(), SamplerConfig())
    assert cell.key == "components__wo-mlp-head__seed3"


# Summaries
def test_summarize_mean_and_population_std():
    results = [
        CellResult("p", "all", 1, {"act/micro_f1": 0.5}, 10.0, 5),
        CellResult("p", "all", 2, {"act/micro_f1": 0.7}, 12.0, 5),
        CellResult("p", "zero", 1, {"act/micro_f1": 0.4, "intent/acc_out": None}, None, 5),
    ]
    rows = {(r["setting"], r["metric"]): r for r in summarize(results)}
    row = rows[("all", "act/micro_f1")]
    assert row["mean"] == pytest.approx(0.6)
    assert row["std"] == pytest.approx(0.1)
    assert row["n"] == 2
    assert rows[("all", "pretrain/dev_ppl")]["mean"] == pytest.approx(11.0)
    assert ("zero", "intent/acc_out") not in rows
    assert ("zero", "pretrain/dev_ppl") not in rows


# Running
def test_run_cell_persists_and_reuses(job):
    cell = build_cells("k", "1", [0], AlignmentConfig(), SamplerConfig(), 2)[0]
    result = run_cell(cell, job)
    assert set(result.metrics) == {"act/micro_f1", "act/macro_f1"}
    assert result.steps == 2

    path = f"{job.output_dir}/cells/{cell.key}.json"
    with open(path) as f:
        assert json.load(f)["setting"] == "1"

    with patch("src.boottod.ablation.train") as mock_train:
        again = run_cell(cell, job)
        mock_train.assert_not_called()
    assert again == result


def test_run_ablation_keeps_cell_order(job):
    cells = build_cells("components", None, [0], AlignmentConfig(), SamplerConfig(), 2)

    def fake(cell, _job):
        return CellResult(cell.axis, cell.setting, cell.seed, {})

    with patch("src.boottod.ablation.run_cell", side_effect=fake):
        results = run_ablation(cells, job, parallel=1)
    assert [r.setting for r in results] == [c.setting for c in cells]


@pytest.mark.parametrize("change", ["max_steps", "tasks"])
def test_run_cell_reruns_when_configuration_changed(job, change):
    cell = build_cells("k", "1", [0], AlignmentConfig(), SamplerConfig(), 2)[0]
    first = run_cell(cell, job)
    if change == "max_steps":
        changed = replace(job, train_config=replace(job.train_config, max_steps=3))
    else:
        changed = replace(job, tasks=("act", "intent"))

    again = run_cell(cell, changed)
    assert again.fingerprint != first.fingerprint
    if change == "max_steps":
        assert again.steps == 3
    else:
        assert "intent/acc_all" in again.metrics
    with open(f"{job.output_dir}/cells/{cell.key}.json") as f:
        assert json.load(f)["fingerprint"] == again.fingerprint


def test_run_cell_ignores_cell_without_fingerprint(job):
    cell = build_cells("k", "1", [0], AlignmentConfig(), SamplerConfig(), 2)[0]
    stale = CellResult("k", "1", 0, {"act/micro_f1": 0.99}, None, 2)
    path = f"{job.output_dir}/cells/{cell.key}.json"
    os.makedirs(os.path.dirname(path))
    with open(path, "w") as f:
        json.dump(asdict(stale), f)

    result = run_cell(cell, job)
    assert result.fingerprint is not None
    assert result.metrics != stale.metrics


def test_cells_carry_table_order():
    cells = build_cells("p", "0,all", [2, 10], AlignmentConfig(), SamplerConfig(), 2)
    assert [(c.setting, c.seed, c.order) for c in cells] == [
        ("zero", 2, 0), ("zero", 10, 1), ("all", 2, 2), ("all", 10, 3),
    ]
