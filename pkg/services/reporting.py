"""
Report files for a set of EvalResults.

    results.csv     method, setting, seed, n_tasks, mean_auc, std_error (fixed formatting, sorted)
    summary.csv     seed-mean of mean_auc per (method, setting)
    per_task.jsonl  one line per (result, task)
    results.json    full EvalResult dumps, reloadable with load_results
    mean_auc.png    grouped bar chart (only when there is more than one result)
"""

import csv
import json
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from schemas.models import ALL_METHODS  # noqa: E402
from services.backbone import TrainStep  # noqa: E402
from services.evaluation import EvalResult  # noqa: E402
from services.exceptions import CheckpointIoError, InvalidConfig  # noqa: E402

logger = logging.getLogger(__name__)

RESULT_FIELDS = ["method", "setting", "seed", "n_tasks", "mean_auc", "std_error"]
SUMMARY_FIELDS = ["method", "setting", "n_seeds", "mean_auc", "seed_std"]


def _method_rank(method: str) -> tuple:
    base = method.replace("+P", "")
    return (ALL_METHODS.index(base) if base in ALL_METHODS else len(ALL_METHODS), method)


def sort_results(results: Sequence[EvalResult]) -> List[EvalResult]:
    return sorted(results, key=lambda r: (r.setting, _method_rank(r.method), r.seed))


def _write_csv(path: Path, fieldnames: List[str], rows: List[Dict]):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def result_rows(results: Sequence[EvalResult]) -> List[Dict]:
    return [{
        "method": r.method,
        "setting": r.setting,
        "seed": r.seed,
        "n_tasks": len(r.per_task_auc),
        "mean_auc": f"{r.mean_auc:.6f}",
        "std_error": f"{r.std_error:.6f}",
    } for r in sort_results(results)]


def summary_rows(results: Sequence[EvalResult]) -> List[Dict]:
    grouped: "OrderedDict[tuple, List[float]]" = OrderedDict()
    for r in sort_results(results):
        grouped.setdefault((r.method, r.setting), []).append(r.mean_auc)
    return [{
        "method": method,
        "setting": setting,
        "n_seeds": len(values),
        "mean_auc": f"{float(np.mean(values)):.6f}",
        "seed_std": f"{float(np.std(values)):.6f}",
    } for (method, setting), values in grouped.items()]


def seed_means(results: Sequence[EvalResult]) -> Dict[str, Dict[str, float]]:
    """{setting: {method: seed-mean of mean_auc}}"""
    table: Dict[str, Dict[str, float]] = {}
    for row in summary_rows(results):
        table.setdefault(row["setting"], {})[row["method"]] = float(row["mean_auc"])
    return table


def plot_mean_auc(results: Sequence[EvalResult], path: Path):
    """Bars per method grouped by setting, error bars = std-error (seed-mean when several seeds)"""
    table = seed_means(results)
    errors: Dict[tuple, List[float]] = {}
    for r in results:
        errors.setdefault((r.setting, r.method), []).append(r.std_error)
    settings_ = sorted(table)
    methods = sorted({m for row in table.values() for m in row}, key=_method_rank)
    width = 0.8 / max(1, len(methods))

    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(settings_) * len(methods) / 2), 4))
    x = np.arange(len(settings_))
    for i, method in enumerate(methods):
        heights = [table[s].get(method, np.nan) for s in settings_]
        errs = [float(np.mean(errors.get((s, method), [0.0]))) for s in settings_]
        ax.bar(x + (i - (len(methods) - 1) / 2) * width, heights, width, yerr=errs, capsize=2, label=method)
    ax.set_xticks(x)
    ax.set_xticklabels(settings_)
    ax.set_ylabel("Mean AUC")
    ax.set_ylim(0.4, 1.0)
    ax.legend(fontsize=8, ncol=min(len(methods), 6))
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def emit_report(results: Sequence[EvalResult], out_dir: str) -> List[str]:
    if not results:
        raise InvalidConfig("emit_report needs at least one result")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        ordered = sort_results(results)
        _write_csv(out / "results.csv", RESULT_FIELDS, result_rows(ordered))
        _write_csv(out / "summary.csv", SUMMARY_FIELDS, summary_rows(ordered))
        with open(out / "per_task.jsonl", "w", encoding="utf-8") as f:
            for r in ordered:
                for task, auc in enumerate(r.per_task_auc):
                    f.write(json.dumps({"method": r.method, "setting": r.setting, "seed": r.seed,
                                        "task": task, "auc": auc}, sort_keys=True) + "\n")
        with open(out / "results.json", "w", encoding="utf-8") as f:
            json.dump([r.to_dict() for r in ordered], f, indent=2, sort_keys=True)
        written = [str(out / name) for name in ("results.csv", "summary.csv", "per_task.jsonl", "results.json")]
        if len(ordered) > 1:
            plot_mean_auc(ordered, out / "mean_auc.png")
            written.append(str(out / "mean_auc.png"))
    except OSError as e:
        raise CheckpointIoError(f"Failed to write report to {out_dir}: {e}")
    logger.info(f"Wrote report for {len(results)} results to {out_dir}")
    return written


def load_results(in_dir: str) -> List[EvalResult]:
    path = Path(in_dir) / "results.json"
    try:
        data = json.loads(path.read_text())
    except (OSError, ValueError) as e:
        raise CheckpointIoError(f"Cannot read {path}: {e}")
    return [EvalResult.from_dict(item) for item in data]


def format_table(results: Sequence[EvalResult]) -> str:
    lines = [f"{'method':<12} {'setting':<20} {'seed':>4} {'tasks':>5}  mean AUC +/- s.e."]
    for row in result_rows(results):
        lines.append(f"{row['method']:<12} {row['setting']:<20} {row['seed']:>4} {row['n_tasks']:>5}  "
                     f"{row['mean_auc']} +/- {row['std_error']}")
    return "\n".join(lines)


def write_training_log(history: Sequence[TrainStep], path: str) -> str:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(target, ["step", "loss", "lr"],
               [{"step": h.step, "loss": f"{h.loss:.6f}", "lr": f"{h.lr:g}"} for h in history])
    return str(target)


def write_json(path: Path, payload) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return str(path)
