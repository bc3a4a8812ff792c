#!/usr/bin/env python3
"""
Command-line entry point: one subcommand per pipeline stage.

    fewshot-aed ingest --ontology ontology.json --clips segments.csv --out data/manifest.jsonl
    fewshot-aed synth --events 20 --clips-per-event 40 --out data
    fewshot-aed experiment --preset desk --out runs/desk
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from pydantic import ValidationError

from api.dependencies import get_run_config
from config.settings import settings
from schemas.models import META_METHODS, SUPERVISED_METHODS, ExperimentSpec, RunConfig
from services.backbone import TrainStep
from services.baselines import FineTuneBaseline, NearestNeighborBaseline, pretrain_detector
from services.evaluation import evaluate_method
from services.exceptions import FewShotError, InvalidConfig
from services.experiments import (
    PreparedData, make_split, prepare_data, run_experiment, sample_to_file, stream_seed,
)
from services.features import extract_features, load_waveform
from services.meta_learners import build_learner, init_from_pretrained, new_meta_model, train_meta
from services.ontology import select_events, build_manifest
from services.reporting import emit_report, format_table, load_results, write_training_log
from services.sampler import build_meta_set
from services.synthetic import generate_synthetic_dataset, synthetic_ontology
from storage.checkpoints import load_checkpoint, save_checkpoint
from storage.feature_cache import save_dataset
from storage.manifests import (
    load_meta_set, load_ontology, read_clip_index, save_ontology, save_vocabulary, write_manifest,
    load_vocabulary, read_manifest,
)
from utils.logger import setup_logging

logger = logging.getLogger(__name__)

AUDIO_SUFFIXES = (".wav", ".flac", ".ogg", ".mp3")


def _config(args) -> RunConfig:
    config = get_run_config(getattr(args, "preset", None), getattr(args, "config", None))
    if getattr(args, "data", None):
        config.experiment.dataset = "disk"
    return config


def _load(args, config: RunConfig, seed: int) -> PreparedData:
    return prepare_data(config, seed, getattr(args, "data", None))


def _dump_resolved(config: RunConfig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    config.dump(str(path))
    logger.info(f"Resolved config -> {path}")
    return path


def _with_split(config: RunConfig, split: Optional[str]) -> RunConfig:
    if not split:
        return config
    spec = ExperimentSpec.model_validate({**config.experiment.model_dump(), "split": split})
    return config.model_copy(update={"experiment": spec})


# Dataset commands
def cmd_ingest(args):
    forest = load_ontology(args.ontology, args.quality)
    vocabulary = select_events(forest, args.threshold)
    built = build_manifest(vocabulary, read_clip_index(args.clips))
    out = Path(args.out)
    write_manifest(built.clips, str(out))
    save_vocabulary(vocabulary, str(out.parent / "vocabulary.json"))
    save_ontology(forest, str(out.parent / "ontology.json"))
    print(f"{len(vocabulary)} events, {len(built.clips)} clips ({built.dropped_clips} dropped) -> {out}")


def cmd_synth(args):
    config = _config(args)
    vocabulary, clips = generate_synthetic_dataset(args.events, args.clips_per_event, args.cooccurrence,
                                                   args.seed, args.domains, config.features)
    forest, _ = synthetic_ontology(args.events, args.domains)
    save_dataset(args.out, vocabulary, clips, forest)
    print(f"Synthetic dataset: {len(vocabulary)} events, {len(clips)} clips -> {args.out}")


def _audio_loader(audio_dir: str, config: RunConfig):
    root = Path(audio_dir)

    def load(clip):
        for suffix in AUDIO_SUFFIXES:
            path = root / f"{clip.clip_id}{suffix}"
            if path.exists():
                return load_waveform(str(path), config.features)
        raise InvalidConfig(f"No audio file for clip {clip.clip_id} under {audio_dir}")
    return load


def cmd_features(args):
    config = _config(args)
    base = Path(args.manifest).parent
    vocabulary = load_vocabulary(str(base / "vocabulary.json"))
    clips = read_manifest(args.manifest, vocabulary)
    forest = load_ontology(str(base / "ontology.json")) if (base / "ontology.json").exists() else None
    split = make_split(config, PreparedData(vocabulary, clips, {}, forest), args.seed)
    stats = extract_features(clips, _audio_loader(args.audio_dir, config), config.features,
                             fit_on=[clip.clip_id for clip in split.train.clips])
    save_dataset(args.out, vocabulary, clips, forest, stats)
    print(f"Features for {len(clips)} clips -> {args.out}")


def cmd_sample(args):
    config = _config(args)
    summary = sample_to_file(config, args.split, args.ways, args.shots, args.tasks, args.seed,
                             args.partition, args.out, args.data)
    print(f"{summary['tasks']} episodes from '{summary['partition']}' -> {summary['path']}")


# Training commands
def cmd_pretrain(args):
    config = _with_split(_config(args), args.split)
    data = _load(args, config, args.seed)
    split = make_split(config, data, args.seed)
    history: List[TrainStep] = []
    model = pretrain_detector(split.train, data.features, config.pretrain, config.backbone,
                              stream_seed(args.seed, "pretrain"), history)
    save_checkpoint(model, args.out, {"seed": args.seed, "events": split.train.events})
    write_training_log(history, str(Path(args.out).with_suffix(".log.csv")))
    _dump_resolved(config, Path(args.out).with_suffix(".resolved_config.json"))
    print(f"Pre-trained detector over {len(split.train.events)} events -> {args.out}")


def cmd_train(args):
    config = _with_split(_config(args), args.split)
    spec = config.experiment
    data = _load(args, config, args.seed)
    split = make_split(config, data, args.seed)
    spec = ExperimentSpec.model_validate({**spec.model_dump(), "ways": args.ways})
    config = config.model_copy(update={"experiment": spec})
    episode_config = spec.episode_config(args.shots, args.seed)
    meta_train = build_meta_set(split.train, episode_config, args.tasks or spec.n_train_tasks,
                                stream_seed(args.seed, "episodes", "train", args.shots), workers=settings.WORKERS)
    meta_val = build_meta_set(split.val, episode_config, spec.n_val_tasks,
                              stream_seed(args.seed, "episodes", "val", args.shots), workers=settings.WORKERS)

    model_seed = stream_seed(args.seed, "init", args.method, args.shots)
    if args.init.startswith("pretrained:"):
        pretrained = load_checkpoint(args.init.split(":", 1)[1])
        model = init_from_pretrained(pretrained, args.method, args.ways, config.backbone, model_seed)
    elif args.init == "random":
        model = new_meta_model(args.method, config.backbone, args.ways, model_seed)
    else:
        raise InvalidConfig("--init must be 'random' or 'pretrained:<path>'")

    learner = build_learner(args.method, model, config)
    outcome = train_meta(learner, meta_train, meta_val, data.features, config.meta_train)
    save_checkpoint(model, args.out, {"method": args.method, "init": args.init, "shots": args.shots,
                                      "seed": args.seed, "best_step": outcome.best_step,
                                      "meta_val_auc": outcome.best_auc})
    write_training_log(outcome.history, str(Path(args.out).with_suffix(".log.csv")))
    _dump_resolved(config, Path(args.out).with_suffix(".resolved_config.json"))
    print(f"{args.method}: best meta-val AUC {outcome.best_auc:.4f} at step {outcome.best_step} -> {args.out}")


# Evaluation commands
def _method_handle(method: str, checkpoint: str, config: RunConfig, args):
    model = load_checkpoint(checkpoint)
    if method in META_METHODS:
        return build_learner(method, model, config)
    if method == "nn":
        return NearestNeighborBaseline(model, getattr(args, "metric", None) or config.nn.metric)
    if method in SUPERVISED_METHODS:
        finetune = config.finetune
        if getattr(args, "epochs", None):
            finetune = finetune.model_copy(update={"epochs": args.epochs})
        return FineTuneBaseline(model, method.split("-", 1)[1], finetune, stream_seed(args.seed, "head"))
    raise InvalidConfig(f"Unknown method {method}")


def _evaluate_episodes(args, method: str):
    config = _config(args)
    episodes, meta = load_meta_set(args.episodes)
    data = _load(args, config, int(meta.get("seed", args.seed)))
    handle = _method_handle(method, args.checkpoint, config, args)
    setting = f"{meta['shots']}-shot" if "shots" in meta else ""
    result = evaluate_method(handle, episodes, data.features, setting=setting, seed=args.seed,
                             pooled=config.evaluation.pooled_auc, workers=config.evaluation.workers)
    result.method = method
    if args.out:
        emit_report([result], args.out)
        _dump_resolved(config, Path(args.out) / "resolved_config.json")
    print(format_table([result]))


def cmd_baseline(args):
    _evaluate_episodes(args, args.method)


def cmd_evaluate(args):
    _evaluate_episodes(args, args.method)


def cmd_report(args):
    results = load_results(args.in_dir)
    if args.out:
        emit_report(results, args.out)
    print(format_table(results))


def cmd_experiment(args):
    config = _config(args)
    report = run_experiment(config, out_dir=args.out, seed=args.seed, data_dir=args.data)
    print(format_table(report.results))
    print(f"Report written to {report.out_dir}")


def cmd_serve(args):
    from start import main as serve
    serve(port=args.port)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewshot-aed",
                                     description="Few-shot multi-label acoustic event detection")
    parser.add_argument("--log-level", default=None, help="Overrides LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, handler, help_text: str, run_config: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(handler=handler)
        if run_config:
            p.add_argument("--config", default=None, help="RunConfig JSON file")
            p.add_argument("--preset", default="main", help="Preset used when no config file is given")
            p.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
        return p

    p = command("ingest", cmd_ingest, "Filter the ontology and build the clip manifest", run_config=False)
    p.add_argument("--ontology", required=True)
    p.add_argument("--quality", default=None, help="Per-class annotation accuracy table (JSON or CSV)")
    p.add_argument("--clips", required=True, help="Clip index (JSONL or segments CSV)")
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--out", required=True)

    p = command("synth", cmd_synth, "Generate a synthetic dataset")
    p.add_argument("--events", type=int, default=20)
    p.add_argument("--clips-per-event", type=int, default=40)
    p.add_argument("--cooccurrence", type=float, default=0.0)
    p.add_argument("--domains", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(preset="desk")

    p = command("features", cmd_features, "Extract log-mel features and fit CMVN on the train partition")
    p.add_argument("--manifest", required=True)
    p.add_argument("--audio-dir", required=True)
    p.add_argument("--out", required=True)

    p = command("sample", cmd_sample, "Sample a frozen meta-set")
    p.add_argument("--data", default=None)
    p.add_argument("--split", default="random", help="random or domain:<id>")
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--tasks", type=int, default=200)
    p.add_argument("--partition", default="test", choices=["train", "val", "test", "held_out"])
    p.add_argument("--out", required=True)

    p = command("pretrain", cmd_pretrain, "Pre-train the detector on meta-training events")
    p.add_argument("--data", default=None)
    p.add_argument("--split", default=None)
    p.add_argument("--out", required=True)

    p = command("baseline", cmd_baseline, "Evaluate a supervised baseline on a frozen meta-set")
    p.add_argument("--method", required=True, choices=list(SUPERVISED_METHODS))
    p.add_argument("--metric", default=None, choices=["l2", "cosine", "dot", "sqeuclidean"])
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)

    p = command("train", cmd_train, "Meta-train proto, metaopt or maml")
    p.add_argument("--method", required=True, choices=list(META_METHODS))
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--init", default="random", help="random or pretrained:<checkpoint>")
    p.add_argument("--tasks", type=int, default=None, help="Meta-train episodes (defaults to the preset)")
    p.add_argument("--data", default=None)
    p.add_argument("--split", default=None)
    p.add_argument("--out", required=True)

    p = command("evaluate", cmd_evaluate, "Evaluate a checkpoint on a frozen meta-set")
    p.add_argument("--method", required=True, choices=list(SUPERVISED_METHODS) + list(META_METHODS))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)

    p = command("report", cmd_report, "Print (and optionally re-emit) a saved report", run_config=False)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", default=None)

    p = command("experiment", cmd_experiment, "Run a full experiment preset")
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(seed=None, preset="desk")

    p = command("serve", cmd_serve, "Start the HTTP service", run_config=False)
    p.add_argument("--port", type=int, default=settings.PORT)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        args.handler(args)
    except (FewShotError, ValidationError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
