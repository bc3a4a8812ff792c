import json

import numpy as np
import pytest

from services.exceptions import CheckpointIoError, DimensionMismatch, InvalidConfig, MalformedOntology
from services.features import cmvn_fit
from services.ontology import ClipRecord, EventVocabulary
from services.sampler import build_meta_set
from services.synthetic import synthetic_ontology
from storage.feature_cache import FeatureStore, load_dataset, save_dataset
from storage.manifests import (
    load_meta_set, load_ontology, load_quality_table, read_clip_index, read_manifest, save_meta_set,
    write_manifest,
)
from conftest import TINY_EPISODES

DOCUMENT = [
    {"id": "root", "name": "Sounds", "child_ids": ["animal"]},
    {"id": "animal", "name": "Animal", "child_ids": ["dog"]},
    {"id": "dog", "name": "Dog", "annotation_accuracy": 0.5},
]


def test_quality_table_formats(tmp_path):
    as_json = tmp_path / "quality.json"
    as_json.write_text(json.dumps({"dog": 0.7, "guitar": 1}))
    assert load_quality_table(str(as_json)) == {"dog": 0.7, "guitar": 1.0}

    as_csv = tmp_path / "quality.csv"
    as_csv.write_text("label_id,quality_estimate\ndog,0.4\npiano, 0.85\n")
    assert load_quality_table(str(as_csv)) == {"dog": 0.4, "piano": 0.85}

    broken = tmp_path / "broken.csv"
    broken.write_text("name,score\ndog,0.4\n")
    with pytest.raises(MalformedOntology):
        load_quality_table(str(broken))


def test_load_ontology_with_quality_override(tmp_path):
    path = tmp_path / "ontology.json"
    path.write_text(json.dumps(DOCUMENT))
    quality = tmp_path / "quality.json"
    quality.write_text(json.dumps({"dog": 0.99}))
    forest = load_ontology(str(path), str(quality))
    assert forest.nodes["dog"].annotation_accuracy == 0.99

    path.write_text("[{not json")
    with pytest.raises(MalformedOntology):
        load_ontology(str(path))
    with pytest.raises(CheckpointIoError):
        load_ontology(str(tmp_path / "missing.json"))


def test_read_clip_index_csv_and_jsonl(tmp_path):
    segments = tmp_path / "segments.csv"
    segments.write_text(
        "# Segments csv created Sun Mar  5 10:54:31 2017\n"
        "# YTID, start_seconds, end_seconds, positive_labels\n"
        '--PJHxphWEs, 30.000, 40.000, "/m/09x0r,/t/dd00088"\n'
        "--ZhevVpy1s, 50.000, 60.000, \"/m/012xff\"\n"
    )
    assert read_clip_index(str(segments)) == [("--PJHxphWEs", ["/m/09x0r", "/t/dd00088"]),
                                              ("--ZhevVpy1s", ["/m/012xff"])]

    rows = tmp_path / "index.jsonl"
    rows.write_text('{"clip_id": "a", "event_ids": ["x", "y"]}\n\n{"clip_id": "b", "event_ids": ["z"]}\n')
    assert read_clip_index(str(rows)) == [("a", ["x", "y"]), ("b", ["z"])]

    wrong_key = tmp_path / "wrong_key.jsonl"
    wrong_key.write_text('{"clip_id": "a", "events": ["x"]}\n')
    with pytest.raises(InvalidConfig, match="event_ids"):
        read_clip_index(str(wrong_key))

    short = tmp_path / "short.csv"
    short.write_text("abc, 0.0, 10.0\n")
    with pytest.raises(InvalidConfig):
        read_clip_index(str(short))
    rows.write_text("{broken\n")
    with pytest.raises(InvalidConfig):
        read_clip_index(str(rows))


def test_manifest_round_trip_and_validation(tmp_path):
    vocabulary = EventVocabulary.build(["a", "b", "c"], {"a": "d0", "b": "d0", "c": "d1"})
    clips = [ClipRecord("one", [1, 0, 1]), ClipRecord("two", [0, 1, 0], source="synthetic", feature_path="f/two.npy")]
    path = str(tmp_path / "manifest.jsonl")
    write_manifest(clips, path)
    loaded = read_manifest(path, vocabulary)
    assert [c.clip_id for c in loaded] == ["one", "two"]
    assert loaded[0].labels.tolist() == [1, 0, 1]
    assert loaded[1].source.value == "synthetic" and loaded[1].feature_path == "f/two.npy"

    (tmp_path / "bad.jsonl").write_text('{"clip_id": "x", "labels": [5]}\n')
    with pytest.raises(InvalidConfig):
        read_manifest(str(tmp_path / "bad.jsonl"), vocabulary)


def test_meta_set_round_trip(tmp_path, tiny_split):
    episodes = build_meta_set(tiny_split.train, TINY_EPISODES, 4, seed=9)
    path = str(tmp_path / "meta.jsonl")
    save_meta_set(episodes, path, {"partition": "train", "seed": 9})
    loaded, meta = load_meta_set(path)
    assert meta == {"partition": "train", "seed": 9}
    assert len(loaded) == 4
    for original, restored in zip(episodes, loaded):
        assert restored.target_events == original.target_events
        assert [i.clip_id for i in restored.query] == [i.clip_id for i in original.query]
        np.testing.assert_array_equal(restored.support_labels(), original.support_labels())
        assert [i.role for i in restored.support] == [i.role for i in original.support]


def test_dataset_round_trip(tmp_path, tiny_dataset):
    vocabulary, clips = tiny_dataset
    forest, _ = synthetic_ontology(8, 2)
    cmvn = cmvn_fit(clip.features for clip in clips)
    save_dataset(str(tmp_path / "data"), vocabulary, clips, forest, cmvn)

    dataset = load_dataset(str(tmp_path / "data"))
    assert dataset.vocabulary.events == vocabulary.events
    assert [c.clip_id for c in dataset.clips] == [c.clip_id for c in clips]
    assert len(dataset.features) == len(clips)
    np.testing.assert_array_equal(dataset.features[clips[3].clip_id], clips[3].features.astype(np.float32))
    assert dataset.forest.roots == forest.roots
    assert dataset.forest.domain_of("syn_event_007") == "syn_domain_1"
    np.testing.assert_allclose(dataset.cmvn.mean, cmvn.mean)


def test_dataset_errors(tmp_path):
    with pytest.raises(CheckpointIoError):
        load_dataset(str(tmp_path))
    vocabulary = EventVocabulary.build(["a"], {"a": "d"})
    with pytest.raises(DimensionMismatch):
        save_dataset(str(tmp_path / "data"), vocabulary, [ClipRecord("one", [1])])


def test_feature_store_checks_shapes(tmp_path):
    store = FeatureStore(str(tmp_path / "features"), shape=(4, 3))
    store.save("ok", np.ones((4, 3)))
    assert "ok" in store and list(store) == ["ok"]
    assert store["ok"].dtype == np.float32
    with pytest.raises(DimensionMismatch):
        store.save("bad", np.ones((3, 3)))
    with pytest.raises(KeyError):
        store["missing"]
    np.save(tmp_path / "features" / "wrong.npy", np.ones((2, 2), dtype=np.float32))
    with pytest.raises(DimensionMismatch):
        FeatureStore(str(tmp_path / "features"), shape=(4, 3))["wrong"]
