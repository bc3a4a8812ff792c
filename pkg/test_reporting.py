import csv
import json

import pytest

from services.backbone import TrainStep
from services.evaluation import EvalResult
from services.exceptions import CheckpointIoError, InvalidConfig
from services.reporting import (
    emit_report, format_table, load_results, result_rows, seed_means, sort_results, summary_rows,
    write_training_log,
)

METHODS = ["maml", "nn", "ft-all", "proto", "ft-linear", "metaopt"]


def results_grid():
    results = []
    for setting, offset in (("test", 0.0), ("held_out", 0.05)):
        for index, method in enumerate(METHODS):
            aucs = [0.6 + offset + 0.01 * index, 0.7 + offset + 0.01 * index]
            results.append(EvalResult(method=method, per_task_auc=aucs, setting=setting, seed=0,
                                      config={"shots": 1}))
    return results


def test_rows_are_sorted_and_fixed_format():
    rows = result_rows(results_grid())
    assert len(rows) == 12
    assert [r["method"] for r in rows[:6]] == ["ft-all", "ft-linear", "nn", "proto", "metaopt", "maml"]
    assert rows[0]["setting"] == "held_out"
    assert rows[0]["mean_auc"] == "0.720000"
    assert all(len(r["std_error"].split(".")[1]) == 6 for r in rows)


def test_pretrained_variants_sort_next_to_their_method():
    results = [EvalResult("proto+P", [0.7], "test"), EvalResult("nn", [0.6], "test"), EvalResult("proto", [0.65], "test")]
    assert [r.method for r in sort_results(results)] == ["nn", "proto", "proto+P"]


def test_seed_means_average_over_seeds():
    results = [EvalResult("nn", [0.6], "test", seed=0), EvalResult("nn", [0.8], "test", seed=1)]
    assert seed_means(results) == {"test": {"nn": pytest.approx(0.7)}}
    assert summary_rows(results)[0]["n_seeds"] == 2


def test_emit_report_files_are_deterministic(tmp_path):
    first = emit_report(results_grid(), str(tmp_path / "a"))
    second = emit_report(list(reversed(results_grid())), str(tmp_path / "b"))
    names = [p.split("/")[-1] for p in first]
    assert names == ["results.csv", "summary.csv", "per_task.jsonl", "results.json", "mean_auc.png"]
    for name in names[:4]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    with open(tmp_path / "a" / "results.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 12
    assert list(rows[0]) == ["method", "setting", "seed", "n_tasks", "mean_auc", "std_error"]
    per_task = (tmp_path / "a" / "per_task.jsonl").read_text().splitlines()
    assert len(per_task) == 24
    assert json.loads(per_task[0])["task"] == 0


def test_load_results_round_trip(tmp_path):
    emit_report(results_grid(), str(tmp_path))
    loaded = load_results(str(tmp_path))
    assert loaded == sort_results(results_grid())
    with pytest.raises(CheckpointIoError):
        load_results(str(tmp_path / "missing"))


def test_single_result_has_no_chart_and_empty_is_rejected(tmp_path):
    written = emit_report([EvalResult("nn", [0.6, 0.7], "test")], str(tmp_path))
    assert not any(p.endswith(".png") for p in written)
    with pytest.raises(InvalidConfig):
        emit_report([], str(tmp_path))


def test_format_table_and_training_log(tmp_path):
    table = format_table(results_grid()).splitlines()
    assert len(table) == 13
    assert table[1].startswith("ft-all")
    path = write_training_log([TrainStep(0, 0.5, 1e-3), TrainStep(1, 0.25, 1e-3)], str(tmp_path / "log" / "x.csv"))
    assert open(path).read().splitlines() == ["step,loss,lr", "0,0.500000,0.001", "1,0.250000,0.001"]
