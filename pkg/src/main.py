#!/usr/bin/env python3
"""
BootTOD command line.

    gen-corpus          write a seeded synthetic corpus with labels
    pretrain            self-bootstrapping pre-training, writes a checkpoint
    finetune / eval     downstream protocols (intent, act, response-selection)
    ablate              component / response-length / layer-count sweeps
    inspect-checkpoint  print and verify a checkpoint manifest

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from src.boottod.ablation import AXES, AblationJob, build_cells, run_ablation, summarize
from src.boottod.checkpoint import load_model, read_manifest, save_model, verify_checkpoint
from src.boottod.dialogue_data import load_corpus, load_labels, write_corpus, write_labels
from src.boottod.downstream import TASKS, DownstreamData, run_task
from src.boottod.encoder import build_vocab, init_encoder_weights
from src.boottod.errors import BootTODError, ConfigError, DataError, NumericalError
from src.boottod.synthetic import generate_synthetic_corpus
from src.boottod.trainer import train
from src.generate_report import (
    create_markdown_report,
    save_report_to_file,
    write_ablation_csv,
    write_metrics_report,
)
from src.utils.config_loader import ConfigurationLoader, RunConfig
from src.utils.general import ensure_dir, read_json, write_json, write_manifest, write_version_stamp

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
LOG_FORMAT = '%(asctime)s | %(levelname)s | %(name)s | %(message)s'

CORPUS_FILES = ("train.jsonl", "dev.jsonl", "test.jsonl", "labels.jsonl")


class UsageError(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    """argparse with usage errors raised instead of exiting with status 2"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def setup_logging(log_dir: Optional[str] = None, verbose: bool = False):
    """Stdout logging plus run.log inside the output directory when one is known"""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_dir:
        ensure_dir(log_dir)
        handlers.append(logging.FileHandler(Path(log_dir) / "run.log"))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="JSON config file (default: $BOOTTOD_CONFIG)")
    parser.add_argument("--seed", type=int, help="Run seed (default: $BOOTTOD_SEED or config)")
    parser.add_argument("--data-dir", help="Corpus directory (default: $BOOTTOD_DATA_DIR or config)")
    parser.add_argument("--output-dir", help="Output root (default: $BOOTTOD_OUTPUT_DIR or config)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Override any config key, e.g. --set encoder.hidden_dim=32")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")


def _add_training(parser: argparse.ArgumentParser):
    parser.add_argument("--p-mode", choices=["zero", "cap", "all", "fix"], help="Response-length mode P")
    parser.add_argument("--p-cap", type=int, help="Maximum response utterances (cap mode)")
    parser.add_argument("--k", type=int, help="Number of top layers aligned")
    parser.add_argument("--max-steps", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--no-mlm", action="store_true", help="Drop the MLM term (expected not to converge)")
    parser.add_argument("--no-cls-align", action="store_true")
    parser.add_argument("--no-mask-align", action="store_true")
    parser.add_argument("--no-stop-gradient", action="store_true")
    parser.add_argument("--no-predictor", action="store_true", help="Use the identity instead of the MLP head")
    parser.add_argument("--progress", action="store_true", help="Show progress bars")


def _add_downstream(parser: argparse.ArgumentParser, task_required: bool = True):
    if task_required:
        parser.add_argument("--task", required=True, choices=TASKS)
    parser.add_argument("--steps", type=int, help="Fine-tuning steps (0 = frozen encoder)")
    parser.add_argument("--shots", type=int, help="Examples per intent (few-shot intent recognition)")
    parser.add_argument("--train-fraction", type=float, help="Share of training examples used")
    parser.add_argument("--pool-size", type=int, help="Response-selection candidates per case")


def build_parser() -> CliParser:
    parser = CliParser(prog="boottod", description="Self-bootstrapping dialogue pre-training")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    gen = sub.add_parser("gen-corpus", help="Write a synthetic task-oriented corpus")
    _add_common(gen)
    gen.add_argument("--intents", type=int)
    gen.add_argument("--dialogues", type=int)
    gen.add_argument("--ood-intents", type=int)
    gen.add_argument("--slot-noise", type=float)

    pre = sub.add_parser("pretrain", help="Pre-train an encoder")
    _add_common(pre)
    _add_training(pre)

    for name in ("finetune", "eval"):
        cmd = sub.add_parser(name, help=f"{name.capitalize()} on a downstream task")
        _add_common(cmd)
        _add_downstream(cmd)
        source = cmd.add_mutually_exclusive_group(required=True)
        source.add_argument("--checkpoint", help="Pre-trained checkpoint directory")
        source.add_argument("--random-init", action="store_true", help="Untrained encoder baseline")

    abl = sub.add_parser("ablate", help="Run an ablation or sweep")
    _add_common(abl)
    _add_training(abl)
    _add_downstream(abl, task_required=False)
    abl.add_argument("--axis", required=True, choices=AXES)
    abl.add_argument("--values", help="Settings for p (e.g. 0,3,all,fix) or k (e.g. 1..L)")
    abl.add_argument("--seeds", help="Comma-separated seeds (default: the run seed)")
    abl.add_argument("--tasks", default="response-selection", help="Comma-separated downstream tasks")
    abl.add_argument("--parallel", type=int, default=1, help="Worker processes")
    abl.add_argument("--include-no-mlm", action="store_true", help="Add the w/o-mlm row")

    ins = sub.add_parser("inspect-checkpoint", help="Print a checkpoint manifest")
    ins.add_argument("path")
    ins.add_argument("--verify", action="store_true", help="Check size and SHA-256")
    ins.add_argument("--verbose", "-v", action="store_true")
    return parser


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def collect_overrides(args: argparse.Namespace, parser: CliParser) -> Dict[str, Any]:
    """Flags as dotted config keys; flags win over every other source"""
    overrides: Dict[str, Any] = {}
    for item in getattr(args, "set", []):
        if "=" not in item:
            parser.error(f"--set expects KEY=VALUE, got '{item}'")
        key, value = item.split("=", 1)
        overrides[key.strip()] = _parse_value(value)

    simple = {
        "seed": "seed", "data_dir": "paths.data_dir", "output_dir": "paths.output_dir",
        "intents": "corpus.num_intents", "dialogues": "corpus.dialogues",
        "ood_intents": "corpus.num_ood_intents", "slot_noise": "corpus.slot_noise",
        "k": "alignment.k", "max_steps": "train.max_steps", "lr": "train.lr",
        "batch_size": "train.batch_size", "steps": "eval.steps", "shots": "eval.shots_per_intent",
        "train_fraction": "eval.train_fraction", "pool_size": "eval.pool_size",
    }
    for attr, key in simple.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value

    switches = {
        "no_mlm": "alignment.use_mlm", "no_cls_align": "alignment.use_cls_align",
        "no_mask_align": "alignment.use_mask_align", "no_stop_gradient": "alignment.use_stop_gradient",
        "no_predictor": "alignment.use_predictor",
    }
    for attr, key in switches.items():
        if getattr(args, attr, False):
            overrides[key] = False
    if getattr(args, "progress", False):
        overrides["train.show_progress"] = True
        overrides["eval.show_progress"] = True

    p_mode, p_cap = getattr(args, "p_mode", None), getattr(args, "p_cap", None)
    if p_cap is not None and p_mode not in (None, "cap"):
        parser.error(f"--p-cap {p_cap} conflicts with --p-mode {p_mode}")
    if p_cap is not None:
        overrides["sampler.p_mode"], overrides["sampler.p_cap"] = "cap", p_cap
    elif p_mode is not None:
        if p_mode == "cap":
            parser.error("--p-mode cap needs --p-cap")
        overrides["sampler.p_mode"], overrides["sampler.p_cap"] = p_mode, None

    if args.command == "gen-corpus" and args.seed is not None:
        overrides["corpus.seed"] = args.seed
    return overrides


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def prepare_output(loader: ConfigurationLoader, output_dir, verbose: bool) -> Path:
    output_dir = ensure_dir(output_dir)
    setup_logging(str(output_dir), verbose)
    loader.save_resolved(output_dir)
    write_version_stamp(output_dir)
    return output_dir


def load_splits(data_dir) -> Dict[str, list]:
    data_dir = Path(data_dir)
    splits = {}
    for split in ("train", "dev", "test"):
        path = data_dir / f"{split}.jsonl"
        if not path.exists():
            raise DataError(f"missing corpus split {path}")
        splits[split] = load_corpus(path)
    return splits


def load_downstream_data(data_dir, splits: Dict[str, list]) -> DownstreamData:
    data_dir = Path(data_dir)
    labels_path = data_dir / "labels.jsonl"
    if not labels_path.exists():
        raise DataError(f"missing labels file {labels_path}")
    labels = load_labels(labels_path)

    inventory_path = data_dir / "inventory.json"
    if inventory_path.exists():
        inventory = read_json(inventory_path)
    else:
        logger.warning(f"⚠️ No inventory.json in {data_dir}; deriving label inventories from labels")
        inventory = {
            "intents": sorted({l.intent for l in labels.values()}),
            "ood_intents": [],
            "acts": sorted({a for l in labels.values() for turn in l.acts for a in turn}),
        }
    return DownstreamData(
        train=splits["train"], test=splits["test"], labels=labels,
        intents=list(inventory["intents"]), ood_intents=list(inventory.get("ood_intents", [])),
        acts=list(inventory["acts"]),
    )


def _train_dialogues(splits):
    if not splits["train"]:
        raise DataError("training split is empty")
    return splits["train"]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_corpus(loader: ConfigurationLoader, args) -> int:
    cfg = loader.run_config
    out = prepare_output(loader, cfg.paths.data_dir, args.verbose)
    corpus = generate_synthetic_corpus(cfg.corpus)

    write_corpus(corpus.train, out / "train.jsonl")
    write_corpus(corpus.dev, out / "dev.jsonl")
    write_corpus(corpus.test, out / "test.jsonl")
    write_labels([corpus.labels[d.id] for d in corpus.all_dialogues], out / "labels.jsonl")
    write_json({"intents": corpus.intents, "ood_intents": corpus.ood_intents, "acts": corpus.acts},
               out / "inventory.json")
    manifest = write_manifest([out / name for name in CORPUS_FILES + ("inventory.json",)],
                              out / "manifest.json", {"corpus": cfg.to_dict()["corpus"]})
    logger.info(f"✅ Corpus written to {out}")
    for name, digest in manifest["files"].items():
        print(f"{digest}  {name}")
    return EXIT_OK


def cmd_pretrain(loader: ConfigurationLoader, args) -> int:
    cfg = loader.run_config
    out = prepare_output(loader, Path(cfg.paths.output_dir) / f"pretrain-seed{cfg.seed}", args.verbose)
    splits = load_splits(cfg.paths.data_dir)
    train_dialogues = _train_dialogues(splits)
    vocab = build_vocab(train_dialogues, cfg.train.vocab_min_freq)
    encoder_config = cfg.encoder.with_vocab(len(vocab))

    result = train(train_dialogues, splits["dev"], vocab, encoder_config,
                   cfg.train_config(log_path=str(out / "train_log.jsonl")))
    checkpoint = save_model(out / "checkpoint", result.encoder, vocab, result.predictor, extra={
        "kind": "pretrain",
        "step": result.best_step,
        "metrics": {"best_dev_ppl": result.best_dev_ppl, "steps": result.steps,
                    "stopped_early": result.stopped_early},
        "run_config": cfg.to_dict(),
    }, storage_dtype=cfg.train.storage_dtype)
    print(f"checkpoint: {checkpoint}")
    print(f"best dev perplexity: {result.best_dev_ppl} (step {result.best_step})")
    return EXIT_OK


def _encoder_for(args, cfg: RunConfig, splits):
    if args.checkpoint:
        model = load_model(args.checkpoint, with_predictor=False)
        logger.info(f"Loaded encoder from {args.checkpoint} (predictor head dropped)")
        return model.encoder, model.vocab, Path(args.checkpoint).name
    vocab = build_vocab(_train_dialogues(splits), cfg.train.vocab_min_freq)
    encoder = init_encoder_weights(cfg.encoder.with_vocab(len(vocab)), cfg.seed)
    logger.info("Using a randomly initialised encoder baseline")
    return encoder, vocab, "random-init"


def cmd_finetune_eval(loader: ConfigurationLoader, args) -> int:
    cfg = loader.run_config
    out = prepare_output(loader, Path(cfg.paths.output_dir) / f"{args.command}-{args.task}-seed{cfg.seed}",
                         args.verbose)
    splits = load_splits(cfg.paths.data_dir)
    data = load_downstream_data(cfg.paths.data_dir, splits)
    encoder, vocab, source = _encoder_for(args, cfg, splits)

    result = run_task(args.task, encoder, vocab, data, cfg.finetune_config())
    result.report.metadata["checkpoint"] = source
    write_metrics_report(result.report, out)
    if args.command == "finetune":
        save_model(out / "checkpoint", result.encoder, vocab, extra={
            "kind": f"finetune-{args.task}", "metrics": result.report.metrics, "source": source,
        }, storage_dtype=cfg.train.storage_dtype)

    for name, value in result.report.metrics.items():
        print(f"{name}: {'absent' if value is None else f'{value:.4f}'}")
    return EXIT_OK


def cmd_ablate(loader: ConfigurationLoader, args) -> int:
    cfg = loader.run_config
    out = prepare_output(loader, Path(cfg.paths.output_dir) / f"ablate-{args.axis}", args.verbose)
    try:
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got '{args.seeds}'")
    tasks = tuple(t.strip() for t in args.tasks.split(",") if t.strip())
    unknown = [t for t in tasks if t not in TASKS]
    if unknown or not tasks:
        raise ConfigError(f"unknown tasks {unknown}, expected a subset of {TASKS}")

    splits = load_splits(cfg.paths.data_dir)
    train_dialogues = _train_dialogues(splits)
    vocab = build_vocab(train_dialogues, cfg.train.vocab_min_freq)
    cells = build_cells(args.axis, args.values, seeds, cfg.alignment, cfg.sampler,
                        cfg.encoder.num_layers, args.include_no_mlm)
    job = AblationJob(
        pretrain_dialogues=train_dialogues,
        dev_dialogues=splits["dev"],
        vocab=vocab,
        encoder_config=cfg.encoder.with_vocab(len(vocab)),
        train_config=cfg.train_config(),
        finetune_config=cfg.finetune_config(),
        data=load_downstream_data(cfg.paths.data_dir, splits),
        tasks=tasks,
        output_dir=str(out),
    )
    logger.info(f"Ablation over {args.axis}: {len(cells)} cells, seeds {seeds}, tasks {list(tasks)}")

    rows = summarize(run_ablation(cells, job, parallel=args.parallel))
    csv_path = write_ablation_csv(rows, out / "ablation.csv")
    save_report_to_file(create_markdown_report(rows), out)
    print(f"ablation table: {csv_path}")
    return EXIT_OK


def cmd_inspect_checkpoint(args) -> int:
    manifest = verify_checkpoint(args.path) if args.verify else read_manifest(args.path)
    tensors = manifest.get("tensors", [])
    count = 0
    for entry in tensors:
        size = 1
        for dim in entry["shape"]:
            size *= dim
        count += size
    print(f"format_version: {manifest['format_version']}")
    print(f"kind: {manifest.get('kind', 'unknown')}")
    print(f"storage_dtype: {manifest.get('storage_dtype')}")
    print(f"step: {manifest.get('step')}")
    print(f"tensors: {len(tensors)}")
    print(f"parameters: {count}")
    if manifest.get("metrics"):
        print(f"metrics: {json.dumps(manifest['metrics'], sort_keys=True)}")
    if args.verify:
        print("checksum: ok")
    return EXIT_OK


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune_eval,
    "eval": cmd_finetune_eval,
    "ablate": cmd_ablate,
}


def run(argv: Optional[List[str]] = None) -> int:
    """Parse, resolve configuration and dispatch; returns the exit code"""
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        setup_logging(None, getattr(args, "verbose", False))
        if args.command == "inspect-checkpoint":
            return cmd_inspect_checkpoint(args)
        overrides = collect_overrides(args, parser)
        loader = ConfigurationLoader(config_path=args.config, overrides=overrides)
        loader.load_all_configurations()
        return COMMANDS[args.command](loader, args)
    except UsageError as e:
        logger.error(f"❌ {e}")
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        logger.error(f"❌ Configuration error: {e}")
        return EXIT_USAGE
    except DataError as e:
        logger.error(f"❌ Data error: {e}")
        return EXIT_DATA
    except NumericalError as e:
        logger.error(f"❌ Numerical failure: {e}")
        return EXIT_NUMERICAL
    except OSError as e:
        logger.error(f"❌ File error: {e}")
        return EXIT_DATA
    except BootTODError as e:
        logger.error(f"❌ {e}")
        return EXIT_DATA
    except Exception as e:
        logger.error(f"Unexpected failure: {e}")
        raise


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
