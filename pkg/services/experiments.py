"""
End-to-end experiments: dataset -> class split -> meta-sets -> pre-training
and baselines -> meta-training -> evaluation -> report.

Every stage is wrapped so a failure surfaces as ExperimentStageError naming
the stage. All randomness derives from the run seed.
"""

import contextlib
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from config.settings import settings
from schemas.models import (
    META_METHODS, SUPERVISED_METHODS, BackboneConfig, EvaluationConfig, ExperimentSpec, FinetuneConfig,
    MetaTrainConfig, PretrainConfig, RunConfig, SyntheticConfig,
)
from services.baselines import FineTuneBaseline, NearestNeighborBaseline, pretrain_detector, select_metric
from services.backbone import EventDetector, TrainStep
from services.evaluation import EvalResult, evaluate_method
from services.exceptions import ExperimentStageError, FewShotError, InvalidConfig
from services.meta_learners import (
    MetaOptLearner, build_learner, init_from_pretrained, new_meta_model, select_lambda, train_meta,
)
from services.ontology import ClipRecord, EventVocabulary, OntologyForest
from services.reporting import emit_report, seed_means, write_json, write_training_log
from services.sampler import Episode, MetaSplit, build_meta_set, remove_events, split_by_domain, split_classes
from services.synthetic import SYNTHETIC_FEATURES, generate_synthetic_dataset, synthetic_ontology
from services.tasks import FewShotMethod, RandomScorer
from storage.checkpoints import save_checkpoint
from storage.feature_cache import load_dataset
from storage.manifests import save_meta_set

logger = logging.getLogger(__name__)

CHANCE_MARGIN = 0.55


# Presets
def main_config() -> RunConfig:
    return RunConfig(experiment=ExperimentSpec(name="main"))


def domain_config(target: str = "/m/04rlf") -> RunConfig:
    """Music (AudioSet id /m/04rlf) held out as the target domain"""
    return RunConfig(experiment=ExperimentSpec(name="domain", split=f"domain:{target}"))


def pretrain_study_config() -> RunConfig:
    return RunConfig(experiment=ExperimentSpec(name="pretrain", methods=list(META_METHODS),
                                               init=["random", "pretrained"]))


def desk_config(**overrides) -> RunConfig:
    """Synthetic desk-scale run: 20 events x 40 clips, 12/4/4 split, 2-way 1-shot, 300/50 tasks, 3 seeds"""
    experiment = dict(name="desk", dataset="synthetic", shots=[1], class_sizes=(12, 4, 4), ways=2,
                      query_positives=10, neg_support={1: 10, 5: 20}, neg_query=40,
                      n_train_tasks=300, n_val_tasks=50, n_test_tasks=50, seeds=[0, 1, 2])
    experiment.update(overrides)
    return RunConfig(
        features=SYNTHETIC_FEATURES,
        backbone=BackboneConfig.for_features(SYNTHETIC_FEATURES, channels=[16, 16, 32, 32], embedding_dim=32),
        synthetic=SyntheticConfig(n_events=20, clips_per_event=40, cooccurrence_rate=0.1),
        pretrain=PretrainConfig(epochs=10, patience=3),
        finetune=FinetuneConfig(epochs=20),
        meta_train=MetaTrainConfig(episodes=300, validate_every=100),
        experiment=ExperimentSpec(**experiment),
    )


def desk_domain_config(**overrides) -> RunConfig:
    """Three synthetic pattern families; the third is the unseen target domain"""
    config = desk_config(name="desk-domain", split="domain:syn_domain_2", **overrides)
    config.synthetic = SyntheticConfig(n_events=30, clips_per_event=40, cooccurrence_rate=0.1, n_domains=3)
    return config


PRESETS: Dict[str, Callable[[], RunConfig]] = {
    "main": main_config,
    "domain": domain_config,
    "pretrain": pretrain_study_config,
    "desk": desk_config,
    "desk-domain": desk_domain_config,
}


def preset_config(name: str) -> RunConfig:
    if name not in PRESETS:
        raise InvalidConfig(f"Unknown preset {name}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()


def stream_seed(seed: int, *parts) -> int:
    """Stable sub-seed for one named stream of a run"""
    tag = zlib.crc32("/".join(str(p) for p in parts).encode())
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except ExperimentStageError:
        raise
    except FewShotError as e:
        logger.error(f"Stage '{name}' failed: {e}")
        raise ExperimentStageError(name, e) from e


@dataclass
class PreparedData:
    vocabulary: EventVocabulary
    clips: List[ClipRecord]
    features: Mapping[str, np.ndarray]
    forest: Optional[OntologyForest] = None


@dataclass
class ExperimentReport:
    results: List[EvalResult]
    checks: Dict
    files: List[str] = field(default_factory=list)
    out_dir: str = ""


def prepare_data(config: RunConfig, seed: int, data_dir: Optional[str] = None) -> PreparedData:
    if config.experiment.dataset == "synthetic":
        syn = config.synthetic
        vocabulary, clips = generate_synthetic_dataset(syn.n_events, syn.clips_per_event, syn.cooccurrence_rate,
                                                       seed, syn.n_domains, config.features, syn.noise_std,
                                                       syn.pattern_gain)
        forest, _ = synthetic_ontology(syn.n_events, syn.n_domains)
        return PreparedData(vocabulary, clips, {clip.clip_id: clip.features for clip in clips}, forest)
    dataset = load_dataset(data_dir or settings.DATA_DIR)
    return PreparedData(dataset.vocabulary, dataset.clips, dataset.features, dataset.forest)


def make_split(config: RunConfig, data: PreparedData, seed: int) -> MetaSplit:
    spec = config.experiment
    if spec.target_domain is None:
        return split_classes(data.vocabulary, data.clips, spec.class_sizes, stream_seed(seed, "split"))
    split = split_by_domain(data.vocabulary, data.clips, spec.target_domain, seed=stream_seed(seed, "split"),
                            forest=data.forest, sizes=spec.class_sizes)
    if split.held_out is not None:
        # in-domain tasks carry no target-domain positive
        split.held_out = remove_events(split.held_out, split.test.events, name="held_out")
    return split


def _settings_for(spec: ExperimentSpec, shots: int) -> List[Tuple[str, str]]:
    """(setting label, partition name) pairs evaluated for one shot count"""
    if spec.target_domain is None:
        return [(f"{shots}-shot", "test")]
    return [(f"{shots}-shot in-domain", "held_out"), (f"{shots}-shot target", "test")]


def _evaluate(method: FewShotMethod, name: str, meta_sets: Dict[str, List[Episode]],
              evaluations: List[Tuple[str, str]], features, seed: int, evaluation: EvaluationConfig,
              extra: Optional[Dict] = None) -> List[EvalResult]:
    results = []
    for setting, partition in evaluations:
        result = evaluate_method(method, meta_sets[partition], features, setting=setting, seed=seed,
                                 pooled=evaluation.pooled_auc, workers=evaluation.workers,
                                 config={**method.describe(), **(extra or {})})
        result.method = name
        results.append(result)
    return results


def run_seed(config: RunConfig, seed: int, out_dir: Path, data_dir: Optional[str] = None) -> List[EvalResult]:
    spec = config.experiment
    seed_dir = out_dir / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(seed)

    with stage("dataset"):
        data = prepare_data(config, seed, data_dir)
    with stage("split"):
        split = make_split(config, data, seed)
        write_json(seed_dir / "split.json", {
            "summary": split.summary(), "dropped_clips": split.dropped_clips,
            "train": split.train.events, "val": split.val.events, "test": split.test.events,
            "held_out": split.held_out.events if split.held_out is not None else [],
        })

    pretrained: Optional[EventDetector] = None
    needs_pretraining = any(m in SUPERVISED_METHODS for m in spec.methods) or "pretrained" in spec.init
    if needs_pretraining:
        with stage("pretrain"):
            history: List[TrainStep] = []
            pretrained = pretrain_detector(split.train, data.features, config.pretrain, config.backbone,
                                           stream_seed(seed, "pretrain"), history)
            save_checkpoint(pretrained, str(seed_dir / "pretrained.pt"), {"seed": seed, "events": split.train.events})
            write_training_log(history, str(seed_dir / "pretrain_log.csv"))

    results: List[EvalResult] = []
    for shots in spec.shots:
        episode_config = spec.episode_config(shots, seed)
        evaluations = _settings_for(spec, shots)
        with stage(f"meta-sets {shots}-shot"):
            partitions = {"train": split.train, "val": split.val, "test": split.test}
            if split.held_out is not None:
                partitions["held_out"] = split.held_out
            sizes = {"train": spec.n_train_tasks, "val": spec.n_val_tasks,
                     "test": spec.n_test_tasks, "held_out": spec.n_test_tasks}
            meta_sets = {}
            for name, partition in partitions.items():
                if name == "train" and not any(m in META_METHODS for m in spec.methods):
                    continue
                meta_sets[name] = build_meta_set(partition, episode_config, sizes[name],
                                                 stream_seed(seed, "episodes", name, shots),
                                                 workers=settings.WORKERS)
                save_meta_set(meta_sets[name], str(seed_dir / f"meta_{name}_{shots}shot.jsonl"),
                              {"partition": name, "seed": seed, **episode_config.model_dump()})

        with stage(f"chance {shots}-shot"):
            for setting, partition in evaluations:
                chance = evaluate_method(RandomScorer(stream_seed(seed, "chance", shots)), meta_sets[partition],
                                         data.features, setting=setting, seed=seed)
                write_json(seed_dir / f"chance_{setting.replace(' ', '_')}.json", chance.to_dict())

        for method in spec.methods:
            if method in SUPERVISED_METHODS:
                with stage(f"{method} {shots}-shot"):
                    if method == "nn":
                        metric = config.nn.metric
                        if config.nn.select_on_validation:
                            metric, _ = select_metric(pretrained, meta_sets["val"], data.features)
                        scorer = NearestNeighborBaseline(pretrained, metric)
                    else:
                        scorer = FineTuneBaseline(pretrained, method.split("-", 1)[1], config.finetune,
                                                  stream_seed(seed, "head", shots))
                    results += _evaluate(scorer, method, meta_sets, evaluations, data.features, seed,
                                         config.evaluation, {"shots": shots})
                continue

            for init in spec.init:
                label = method if init == "random" else f"{method}+P"
                with stage(f"{label} {shots}-shot"):
                    model_seed = stream_seed(seed, "init", method, shots)
                    if init == "pretrained":
                        model = init_from_pretrained(pretrained, method, spec.ways, config.backbone, model_seed)
                    else:
                        model = new_meta_model(method, config.backbone, spec.ways, model_seed)
                    learner = build_learner(method, model, config)
                    outcome = train_meta(learner, meta_sets["train"], meta_sets["val"], data.features,
                                         config.meta_train)
                    write_training_log(outcome.history, str(seed_dir / f"{label}_{shots}shot_log.csv"))
                    save_checkpoint(model, str(seed_dir / f"{label}_{shots}shot.pt"),
                                    {"method": method, "init": init, "shots": shots, "seed": seed,
                                     "best_step": outcome.best_step, "meta_val_auc": outcome.best_auc})
                    if isinstance(learner, MetaOptLearner) and config.metaopt.select_lambda:
                        learner.lam, _ = select_lambda(model, meta_sets["val"], data.features, config.metaopt)
                    results += _evaluate(learner, label, meta_sets, evaluations, data.features, seed,
                                         config.evaluation, {"shots": shots, "init": init,
                                                             "meta_val_auc": outcome.best_auc})
    return results


def directional_checks(results: Sequence[EvalResult], spec: ExperimentSpec) -> Dict:
    """Seed-mean comparisons recorded alongside the report"""
    table = seed_means(results)
    checks: Dict = {"beats_chance": {}, "baseline_ordering": {}, "meta_beats_baselines": {}}
    for setting, row in sorted(table.items()):
        checks["beats_chance"][setting] = {m: auc > CHANCE_MARGIN for m, auc in sorted(row.items())}
        if all(m in row for m in SUPERVISED_METHODS):
            checks["baseline_ordering"][setting] = row["ft-all"] <= row["ft-linear"] <= row["nn"]
            metric_learners = [row[m] for m in ("proto", "metaopt") if m in row]
            if metric_learners:
                checks["meta_beats_baselines"][setting] = max(metric_learners) > max(
                    row[m] for m in SUPERVISED_METHODS)
    if spec.target_domain is not None:
        checks["domain_deterioration"] = {}
        for shots in spec.shots:
            target = table.get(f"{shots}-shot target", {})
            in_domain = table.get(f"{shots}-shot in-domain", {})
            checks["domain_deterioration"][f"{shots}-shot"] = {
                m: target[m] <= in_domain[m] for m in sorted(target) if m in in_domain
            }
    checks["seed_means"] = table
    return checks


def run_experiment(config: RunConfig, out_dir: Optional[str] = None, seed: Optional[int] = None,
                   data_dir: Optional[str] = None) -> ExperimentReport:
    """Run every seed of the experiment and write the report bundle to out_dir"""
    spec = config.experiment
    seeds = [seed] if seed is not None else list(spec.seeds)
    out = Path(out_dir or Path(settings.OUTPUT_DIR) / spec.name)
    out.mkdir(parents=True, exist_ok=True)
    config.dump(str(out / "resolved_config.json"))
    write_json(out / "seeds.json", {"seeds": seeds})
    logger.info(f"Experiment '{spec.name}' ({spec.split}, shots {spec.shots}, methods {spec.methods}, "
                f"init {spec.init}) seeds {seeds} -> {out}")

    results: List[EvalResult] = []
    for run_seed_value in seeds:
        results += run_seed(config, run_seed_value, out, data_dir)

    with stage("report"):
        files = emit_report(results, str(out))
        checks = directional_checks(results, spec)
        files.append(write_json(out / "checks.json", checks))
    logger.info(f"Experiment '{spec.name}' finished: {len(results)} results")
    return ExperimentReport(results=results, checks=checks, files=files, out_dir=str(out))


def sample_to_file(config: RunConfig, split: str, ways: int, shots: int, tasks: int, seed: int,
                   partition: str, out: str, data_dir: Optional[str] = None) -> Dict:
    """Build one frozen meta-set from a dataset split and write it as JSONL"""
    spec = ExperimentSpec.model_validate({**config.experiment.model_dump(), "split": split, "ways": ways})
    resolved = config.model_copy(update={"experiment": spec})
    with stage("dataset"):
        data = prepare_data(resolved, seed, data_dir)
    with stage("split"):
        meta_split = make_split(resolved, data, seed)
    with stage("sample"):
        episode_config = spec.episode_config(shots, seed)
        episodes = build_meta_set(meta_split.partition(partition), episode_config, tasks,
                                  stream_seed(seed, "episodes", partition, shots), workers=settings.WORKERS)
        path = save_meta_set(episodes, out, {"partition": partition, "split": split, "seed": seed,
                                             **episode_config.model_dump()})
    config_path = Path(out).with_suffix(".resolved_config.json")
    resolved.dump(str(config_path))
    return {"path": path, "tasks": len(episodes), "partition": partition, "split": meta_split.summary(),
            "config": str(config_path)}
