"""
JSON / JSONL files describing a dataset: ontology, annotation-quality table,
clip index, clip manifest, event vocabulary and frozen episode meta-sets.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from services.exceptions import CheckpointIoError, InvalidConfig, MalformedOntology
from services.ontology import ClipRecord, ClipSource, EventVocabulary, OntologyForest, parse_ontology
from services.sampler import Episode, EpisodeItem

logger = logging.getLogger(__name__)


def read_json(path: str):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except OSError as e:
        raise CheckpointIoError(f"Cannot read {path}: {e}")
    except ValueError as e:
        raise InvalidConfig(f"{path} is not valid JSON: {e}")


def write_json(path: str, payload) -> str:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return str(target)


def _write_jsonl(path: str, rows) -> str:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return str(target)


def _read_jsonl(path: str) -> Iterator[Dict]:
    try:
        with open(path, encoding="utf-8") as f:
            for number, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    yield json.loads(line)
                except ValueError as e:
                    raise InvalidConfig(f"{path}:{number} is not valid JSON: {e}")
    except OSError as e:
        raise CheckpointIoError(f"Cannot read {path}: {e}")


# Ontology
def load_quality_table(path: str) -> Dict[str, float]:
    """Per-class annotation accuracy from JSON {id: accuracy} or CSV (id/label_id, accuracy/quality_estimate)"""
    if path.endswith(".json"):
        return {str(k): float(v) for k, v in read_json(path).items()}
    table: Dict[str, float] = {}
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            key = row.get("id") or row.get("label_id")
            value = row.get("accuracy") or row.get("quality_estimate")
            if key is None or value is None:
                raise MalformedOntology(f"{path}: quality rows need id and accuracy columns")
            table[key.strip()] = float(value)
    return table


def load_ontology(path: str, quality_path: Optional[str] = None) -> OntologyForest:
    accuracies = load_quality_table(quality_path) if quality_path else None
    try:
        document = read_json(path)
    except InvalidConfig as e:
        raise MalformedOntology(str(e))
    return parse_ontology(document, accuracies)


def save_ontology(forest: OntologyForest, path: str) -> str:
    return write_json(path, [node.to_dict() for node in forest.nodes.values()])


# Clip index / manifest
def read_clip_index(path: str) -> List[Tuple[str, List[str]]]:
    """(clip_id, event ids) pairs from JSONL {"clip_id", "event_ids"} or an AudioSet segments CSV"""
    index: List[Tuple[str, List[str]]] = []
    if path.endswith(".jsonl"):
        for number, row in enumerate(_read_jsonl(path), 1):
            if "clip_id" not in row or "event_ids" not in row:
                raise InvalidConfig(f"{path}: record {number} needs clip_id and event_ids")
            index.append((str(row["clip_id"]), [str(e) for e in row["event_ids"]]))
        return index
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.reader(f, skipinitialspace=True):
            if not row or row[0].startswith("#"):
                continue
            if len(row) < 4:
                raise InvalidConfig(f"{path}: segment rows need YTID, start, end, positive_labels")
            index.append((row[0], [label.strip() for label in row[3].split(",") if label.strip()]))
    return index


def save_vocabulary(vocabulary: EventVocabulary, path: str) -> str:
    return write_json(path, vocabulary.to_dict())


def load_vocabulary(path: str) -> EventVocabulary:
    return EventVocabulary.from_dict(read_json(path))


def write_manifest(clips: Sequence[ClipRecord], path: str) -> str:
    written = _write_jsonl(path, (clip.manifest_row() for clip in clips))
    logger.info(f"Wrote manifest of {len(clips)} clips to {path}")
    return written


def read_manifest(path: str, vocabulary: EventVocabulary) -> List[ClipRecord]:
    clips = []
    for row in _read_jsonl(path):
        labels = np.zeros(len(vocabulary), dtype=np.uint8)
        positives = row["labels"]
        if any(not 0 <= int(i) < len(vocabulary) for i in positives):
            raise InvalidConfig(f"Clip {row['clip_id']} has a label outside the vocabulary")
        labels[[int(i) for i in positives]] = 1
        clips.append(ClipRecord(clip_id=row["clip_id"], labels=labels,
                                source=ClipSource(row.get("source", "real")), feature_path=row.get("feature_path")))
    return clips


# Meta-sets
def save_meta_set(episodes: Sequence[Episode], path: str, meta: Optional[Dict] = None) -> str:
    """One JSON object per episode; an optional first line {"meta": ...} records how the set was built"""
    def rows():
        if meta is not None:
            yield {"meta": meta}
        for index, episode in enumerate(episodes):
            yield {
                "index": index,
                "target_events": episode.target_events,
                "support": [{"clip_id": i.clip_id, "label": i.label.astype(int).tolist(), "role": i.role}
                            for i in episode.support],
                "query": [{"clip_id": i.clip_id, "label": i.label.astype(int).tolist(), "role": i.role}
                          for i in episode.query],
            }
    written = _write_jsonl(path, rows())
    logger.info(f"Saved {len(episodes)} episodes to {path}")
    return written


def load_meta_set(path: str) -> Tuple[List[Episode], Dict]:
    episodes: List[Episode] = []
    meta: Dict = {}
    for row in _read_jsonl(path):
        if "meta" in row:
            meta = row["meta"]
            continue

        def items(entries):
            return [EpisodeItem(e["clip_id"], np.asarray(e["label"], dtype=np.uint8), e["role"]) for e in entries]
        episodes.append(Episode(target_events=list(row["target_events"]),
                                support=items(row["support"]), query=items(row["query"])))
    return episodes, meta
