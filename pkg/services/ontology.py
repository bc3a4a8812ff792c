"""
Ontology ingestion: parse an AudioSet-style ontology, keep high-quality leaf
events and project clip labels onto the resulting vocabulary.
"""

import logging
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Any, Iterable

import numpy as np

from services.exceptions import MalformedOntology, EmptyVocabulary, InvalidConfig

logger = logging.getLogger(__name__)


@dataclass
class OntologyNode:
    """One ontology class"""
    id: str
    display_name: str
    child_ids: List[str] = field(default_factory=list)
    annotation_accuracy: Optional[float] = None

    @property
    def is_leaf(self) -> bool:
        return not self.child_ids

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class OntologyForest:
    """Parsed ontology; nodes keep document order"""
    nodes: Dict[str, OntologyNode]
    roots: List[str]
    parents: Dict[str, List[str]]

    def leaves(self) -> List[str]:
        return [node_id for node_id, node in self.nodes.items() if node.is_leaf]

    def descendants(self, node_id: str) -> List[str]:
        seen: List[str] = []
        stack = list(reversed(self.nodes[node_id].child_ids))
        while stack:
            current = stack.pop()
            if current in seen:
                continue
            seen.append(current)
            stack.extend(reversed(self.nodes[current].child_ids))
        return seen

    def domain_of(self, node_id: str) -> Optional[str]:
        """Child-of-root ancestor of a node (first one in document order for multi-parent nodes)"""
        if node_id in self.roots:
            return None
        current = node_id
        while True:
            parent = self.parents[current][0]
            if parent in self.roots:
                return current
            current = parent


@dataclass
class EventVocabulary:
    events: List[str]
    index_of: Dict[str, int]
    domain_of: Dict[str, str]
    names: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def build(cls, events: Sequence[str], domain_of: Dict[str, str],
              names: Optional[Dict[str, str]] = None) -> "EventVocabulary":
        events = list(events)
        if len(set(events)) != len(events):
            raise InvalidConfig("vocabulary events must be unique")
        return cls(
            events=events,
            index_of={event: i for i, event in enumerate(events)},
            domain_of={event: domain_of[event] for event in events},
            names={event: (names or {}).get(event, event) for event in events},
        )

    def __len__(self) -> int:
        return len(self.events)

    def indices(self, events: Iterable[str]) -> List[int]:
        return [self.index_of[event] for event in events]

    def events_in_domain(self, domain: str) -> List[str]:
        return [event for event in self.events if self.domain_of[event] == domain]

    def to_dict(self) -> Dict:
        return {"events": self.events, "domain_of": self.domain_of, "names": self.names}

    @classmethod
    def from_dict(cls, data: Dict) -> "EventVocabulary":
        return cls.build(data["events"], data["domain_of"], data.get("names"))


class ClipSource(str, Enum):
    REAL = "real"
    SYNTHETIC = "synthetic"


@dataclass
class ClipRecord:
    """One clip: feature matrix [frames x mel-bins] plus multi-hot labels over the vocabulary"""
    clip_id: str
    labels: np.ndarray
    source: ClipSource = ClipSource.REAL
    features: Optional[np.ndarray] = None
    feature_path: Optional[str] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 1 or not self.labels.any():
            raise InvalidConfig(f"Clip {self.clip_id} needs at least one positive label")
        self.source = ClipSource(self.source)

    @property
    def positives(self) -> List[int]:
        return np.flatnonzero(self.labels).tolist()

    def manifest_row(self) -> Dict[str, Any]:
        return {
            "clip_id": self.clip_id,
            "labels": self.positives,
            "source": self.source.value,
            "feature_path": self.feature_path,
        }


@dataclass
class ManifestBuild:
    clips: List[ClipRecord]
    dropped_clips: int = 0
    dropped_labels: int = 0


def _node_fields(raw: Dict[str, Any]) -> Tuple[str, str, List[str], Optional[float]]:
    try:
        node_id = str(raw["id"])
    except KeyError:
        raise MalformedOntology(f"Ontology node without id: {raw}")
    name = str(raw.get("name", raw.get("display_name", node_id)))
    child_ids = [str(child) for child in raw.get("child_ids", [])]
    accuracy = raw.get("annotation_accuracy")
    if accuracy is not None:
        accuracy = float(accuracy)
        if not 0.0 <= accuracy <= 1.0:
            raise MalformedOntology(f"Node {node_id} has accuracy {accuracy} outside [0, 1]")
    return node_id, name, child_ids, accuracy


def parse_ontology(raw: Any, accuracies: Optional[Dict[str, float]] = None) -> OntologyForest:
    """Parse an ontology document (a list of node objects, or {"nodes": [...]})

    Accuracy may come from the node objects or from a separate per-class table.
    """
    if isinstance(raw, dict):
        raw = raw.get("nodes", [])
    if not isinstance(raw, list):
        raise MalformedOntology("Ontology document must be a list of nodes")

    nodes: Dict[str, OntologyNode] = {}
    for item in raw:
        if not isinstance(item, dict):
            raise MalformedOntology(f"Ontology entry is not an object: {item!r}")
        node_id, name, child_ids, accuracy = _node_fields(item)
        if node_id in nodes:
            raise MalformedOntology(f"Duplicate ontology id: {node_id}")
        if accuracies and node_id in accuracies:
            accuracy = float(accuracies[node_id])
        nodes[node_id] = OntologyNode(node_id, name, child_ids, accuracy)

    parents: Dict[str, List[str]] = {node_id: [] for node_id in nodes}
    for node in nodes.values():
        for child in node.child_ids:
            if child not in nodes:
                raise MalformedOntology(f"Node {node.id} references missing child {child}")
            parents[child].append(node.id)

    # Iterative DFS with colors; any back edge is a cycle
    WHITE, GREY, BLACK = 0, 1, 2
    color = {node_id: WHITE for node_id in nodes}
    for start in nodes:
        if color[start] != WHITE:
            continue
        stack = [(start, iter(nodes[start].child_ids))]
        color[start] = GREY
        while stack:
            current, children = stack[-1]
            child = next(children, None)
            if child is None:
                color[current] = BLACK
                stack.pop()
            elif color[child] == GREY:
                raise MalformedOntology(f"Cycle through {current} -> {child}")
            elif color[child] == WHITE:
                color[child] = GREY
                stack.append((child, iter(nodes[child].child_ids)))

    roots = [node_id for node_id, node_parents in parents.items() if not node_parents]
    multi_parent = sum(1 for node_parents in parents.values() if len(node_parents) > 1)
    logger.info(f"Parsed ontology: {len(nodes)} nodes, {len(roots)} roots, "
                f"{sum(1 for n in nodes.values() if n.is_leaf)} leaves, {multi_parent} multi-parent nodes")
    return OntologyForest(nodes=nodes, roots=roots, parents=parents)


def select_events(forest: OntologyForest, accuracy_threshold: float) -> EventVocabulary:
    """Keep leaves whose annotation accuracy is >= threshold (inclusive)"""
    if not 0.0 <= accuracy_threshold <= 1.0:
        raise InvalidConfig(f"accuracy threshold {accuracy_threshold} outside [0, 1]")

    events: List[str] = []
    domains: Dict[str, str] = {}
    skipped_quality = 0
    for node_id in forest.leaves():
        node = forest.nodes[node_id]
        accuracy = node.annotation_accuracy
        if accuracy is None:
            accuracy = 1.0 if accuracy_threshold == 0.0 else 0.0
        if accuracy < accuracy_threshold:
            skipped_quality += 1
            continue
        domain = forest.domain_of(node_id)
        if domain is None:
            logger.warning(f"Skipping isolated root leaf {node_id}: it has no domain")
            continue
        events.append(node_id)
        domains[node_id] = domain

    if not events:
        raise EmptyVocabulary(f"No leaf event has annotation accuracy >= {accuracy_threshold}")
    logger.info(f"Selected {len(events)} leaf events (threshold {accuracy_threshold}, "
                f"{skipped_quality} below threshold)")
    names = {event: forest.nodes[event].display_name for event in events}
    return EventVocabulary.build(events, domains, names)


def build_manifest(vocabulary: EventVocabulary,
                   clip_index: Iterable[Tuple[str, Sequence[str]]],
                   source: ClipSource = ClipSource.REAL) -> ManifestBuild:
    """Project clip labels onto the vocabulary; clips left without labels are dropped"""
    clips: List[ClipRecord] = []
    dropped_clips = 0
    dropped_labels = 0
    for clip_id, event_ids in clip_index:
        labels = np.zeros(len(vocabulary), dtype=np.uint8)
        for event_id in event_ids:
            index = vocabulary.index_of.get(event_id)
            if index is None:
                dropped_labels += 1
            else:
                labels[index] = 1
        if not labels.any():
            dropped_clips += 1
            continue
        clips.append(ClipRecord(clip_id=clip_id, labels=labels, source=source))

    if dropped_clips or dropped_labels:
        logger.info(f"Manifest: kept {len(clips)} clips, dropped {dropped_clips} clips "
                    f"and {dropped_labels} off-vocabulary labels")
    return ManifestBuild(clips=clips, dropped_clips=dropped_clips, dropped_labels=dropped_labels)
