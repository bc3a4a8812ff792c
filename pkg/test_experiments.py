import json

import pytest

from schemas.models import EpisodeConfig, ExperimentSpec, MetaTrainConfig, PretrainConfig, RunConfig, SyntheticConfig
from services.evaluation import EvalResult
from services.exceptions import ExperimentStageError, InvalidConfig, InvalidSizes
from services.experiments import (
    PRESETS, desk_config, desk_domain_config, directional_checks, make_split, prepare_data, preset_config,
    run_experiment, sample_to_file, stage, stream_seed,
)
from services.sampler import remove_events
from storage.feature_cache import load_dataset
from storage.manifests import load_meta_set, read_json
from conftest import TINY_FEATURES


@pytest.fixture
def synthetic_run(tiny_backbone) -> RunConfig:
    # 1-way episodes: a 2-event val/test partition has negatives only for a single target
    return RunConfig(
        features=TINY_FEATURES,
        backbone=tiny_backbone,
        synthetic=SyntheticConfig(n_events=8, clips_per_event=12, n_domains=2),
        pretrain=PretrainConfig(epochs=1, batch_size=8),
        meta_train=MetaTrainConfig(validate_every=2),
        experiment=ExperimentSpec(name="tiny", dataset="synthetic", shots=[1], methods=["nn", "proto"],
                                  class_sizes=(4, 2, 2), ways=1, query_positives=3, neg_support={1: 3},
                                  neg_query=5, n_train_tasks=4, n_val_tasks=3, n_test_tasks=3, seeds=[0]),
    )


def test_presets():
    for name in PRESETS:
        assert preset_config(name).experiment.name == name
    assert preset_config("domain").experiment.target_domain == "/m/04rlf"
    assert preset_config("desk-domain").experiment.target_domain == "syn_domain_2"
    assert preset_config("pretrain").experiment.init == ["random", "pretrained"]
    main = preset_config("main").experiment
    assert main.episode_config(1) == EpisodeConfig.audioset(1)
    assert main.episode_config(5, seed=2) == EpisodeConfig.audioset(5, seed=2)
    with pytest.raises(InvalidConfig):
        preset_config("nope")


def test_stream_seeds_are_stable_and_distinct():
    assert stream_seed(0, "split") == stream_seed(0, "split")
    seeds = {stream_seed(0, "split"), stream_seed(1, "split"), stream_seed(0, "episodes", "train", 1),
             stream_seed(0, "episodes", "train", 5)}
    assert len(seeds) == 4


def test_stage_names_the_failing_step():
    with pytest.raises(ExperimentStageError) as info:
        with stage("split"):
            raise InvalidSizes("too many events")
    assert info.value.stage == "split"
    assert isinstance(info.value.cause, InvalidSizes)

    with pytest.raises(ExperimentStageError) as info:
        with stage("outer"):
            with stage("inner"):
                raise InvalidConfig("bad")
    assert info.value.stage == "inner"

    with pytest.raises(KeyError):
        with stage("lookup"):
            raise KeyError("x")


def test_directional_checks():
    aucs = {"ft-all": 0.6, "ft-linear": 0.65, "nn": 0.7, "proto": 0.75, "metaopt": 0.5}
    results = [EvalResult(m, [auc], "1-shot") for m, auc in aucs.items()]
    checks = directional_checks(results, ExperimentSpec())
    assert checks["beats_chance"]["1-shot"] == {"ft-all": True, "ft-linear": True, "metaopt": False,
                                                "nn": True, "proto": True}
    assert checks["baseline_ordering"]["1-shot"] is True
    assert checks["meta_beats_baselines"]["1-shot"] is True
    assert "domain_deterioration" not in checks

    domain = [EvalResult("nn", [0.7], "1-shot in-domain"), EvalResult("nn", [0.6], "1-shot target"),
              EvalResult("proto", [0.7], "1-shot in-domain"), EvalResult("proto", [0.8], "1-shot target")]
    checks = directional_checks(domain, ExperimentSpec(split="domain:x", shots=[1]))
    assert checks["domain_deterioration"] == {"1-shot": {"nn": True, "proto": False}}
    assert checks["baseline_ordering"] == {}


def test_run_experiment_writes_the_bundle(tmp_path, synthetic_run):
    report = run_experiment(synthetic_run, out_dir=str(tmp_path / "tiny"))
    assert [(r.method, r.setting, len(r.per_task_auc)) for r in report.results] == [
        ("nn", "1-shot", 3), ("proto", "1-shot", 3)]
    assert all(0.0 <= auc <= 1.0 for r in report.results for auc in r.per_task_auc)

    out = tmp_path / "tiny"
    assert RunConfig.from_file(str(out / "resolved_config.json")) == synthetic_run
    assert read_json(str(out / "seeds.json")) == {"seeds": [0]}
    assert set(report.checks["beats_chance"]["1-shot"]) == {"nn", "proto"}
    assert json.loads((out / "checks.json").read_text())["seed_means"]["1-shot"].keys() == {"nn", "proto"}
    for name in ("results.csv", "summary.csv", "per_task.jsonl", "results.json", "mean_auc.png"):
        assert (out / name).exists()

    seed_dir = out / "seed_0"
    split = read_json(str(seed_dir / "split.json"))
    assert split["summary"]["train"]["events"] == 4
    for name in ("pretrained.pt", "pretrain_log.csv", "proto_1shot.pt", "proto_1shot_log.csv",
                 "chance_1-shot.json", "meta_train_1shot.jsonl", "meta_test_1shot.jsonl"):
        assert (seed_dir / name).exists()
    chance = read_json(str(seed_dir / "chance_1-shot.json"))
    assert chance["method"] == "random" and len(chance["per_task_auc"]) == 3


def test_run_experiment_is_repeatable(tmp_path, synthetic_run):
    synthetic_run.experiment.methods = ["nn"]
    first = run_experiment(synthetic_run, out_dir=str(tmp_path / "a"))
    second = run_experiment(synthetic_run, out_dir=str(tmp_path / "b"))
    assert first.results[0].per_task_auc == second.results[0].per_task_auc
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()


def test_run_experiment_reports_the_failing_stage(tmp_path, synthetic_run):
    synthetic_run.experiment.class_sizes = (6, 2, 2)
    with pytest.raises(ExperimentStageError) as info:
        run_experiment(synthetic_run, out_dir=str(tmp_path / "bad"))
    assert info.value.stage == "split"


def test_sample_to_file_domain_split(tmp_path, small_run_config, tiny_data_dir):
    config = RunConfig.from_file(small_run_config)
    config.experiment.class_sizes = (2, 1, 1)
    out = str(tmp_path / "target.jsonl")
    summary = sample_to_file(config, "domain:syn_domain_1", 2, 1, 5, 3, "test", out, tiny_data_dir)

    target_events = load_dataset(tiny_data_dir).vocabulary.events_in_domain("syn_domain_1")
    assert summary["tasks"] == 5
    assert summary["split"]["test"]["events"] == len(target_events)
    assert summary["split"]["held_out"]["events"] == 1
    episodes, meta = load_meta_set(out)
    assert meta["split"] == "domain:syn_domain_1" and meta["seed"] == 3
    resolved = RunConfig.from_file(summary["config"])
    assert summary["config"] == str(tmp_path / "target.resolved_config.json")
    assert resolved.experiment.split == "domain:syn_domain_1" and resolved.experiment.ways == 2
    assert all(set(e.target_events) <= set(target_events) for e in episodes)

    with pytest.raises(ExperimentStageError) as info:
        sample_to_file(config, "domain:nowhere", 2, 1, 5, 3, "test", out, tiny_data_dir)
    assert info.value.stage == "split"


def test_domain_split_strips_target_events_from_the_in_domain_set(monkeypatch, small_run_config, tiny_data_dir):
    removed = []

    def recording_remove(partition, events, name=None):
        removed.append((partition.name, list(events), name))
        return remove_events(partition, events, name=name)

    monkeypatch.setattr("services.experiments.remove_events", recording_remove)
    config = RunConfig.from_file(small_run_config)
    config.experiment.split = "domain:syn_domain_1"
    config.experiment.class_sizes = (2, 1, 1)
    data = prepare_data(config, 3, tiny_data_dir)
    split = make_split(config, data, 3)

    assert removed == [("held_out", split.test.events, "held_out")]
    target_idx = [data.vocabulary.index_of[e] for e in split.test.events]
    assert split.held_out.name == "held_out" and len(split.held_out.events) == 1
    assert split.held_out.clips
    assert not any(clip.labels[target_idx].any() for clip in split.held_out.clips)


@pytest.mark.slow
def test_desk_run_beats_chance(tmp_path):
    config = desk_config(methods=["nn", "proto"], seeds=[0])
    report = run_experiment(config, out_dir=str(tmp_path / "desk"))
    assert report.checks["beats_chance"]["1-shot"]["nn"]
    assert report.checks["seed_means"]["1-shot"]["proto"] > 0.5


@pytest.mark.slow
def test_desk_run_orders_baselines_and_a_metric_learner_beats_them(tmp_path):
    config = desk_config(methods=["ft-all", "ft-linear", "nn", "proto", "metaopt"])
    report = run_experiment(config, out_dir=str(tmp_path / "desk"))
    checks = json.loads((tmp_path / "desk" / "checks.json").read_text())
    assert checks["baseline_ordering"] == {"1-shot": True}
    assert checks["meta_beats_baselines"] == {"1-shot": True}
    assert report.checks["baseline_ordering"] == checks["baseline_ordering"]


@pytest.mark.slow
def test_desk_domain_run_deteriorates_on_the_target_domain(tmp_path):
    config = desk_domain_config(methods=["nn", "proto"])
    run_experiment(config, out_dir=str(tmp_path / "desk-domain"))
    checks = json.loads((tmp_path / "desk-domain" / "checks.json").read_text())
    assert checks["domain_deterioration"] == {"1-shot": {"nn": True, "proto": True}}
    assert set(checks["seed_means"]) == {"1-shot in-domain", "1-shot target"}
