"""
Meta-set construction: class splitting, clip partitioning and sampling of
K-way N-shot detection episodes with separate positive and negative budgets.

Sampling inside one episode never reuses a clip (support and query are
disjoint, and no clip serves twice); clips may repeat across episodes.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from schemas.models import EpisodeConfig
from services.exceptions import (
    InvalidSizes, UnknownDomain, EmptyDomain, InsufficientPositives, InsufficientNegatives, InvalidConfig,
)
from services.ontology import ClipRecord, EventVocabulary, OntologyForest

logger = logging.getLogger(__name__)

# Redraws allowed when earlier targets consumed an event's fresh positives
MAX_DRAWS = 20


@dataclass
class Partition:
    """One class partition C_x together with its clips D_x"""
    name: str
    events: List[str]
    clips: List[ClipRecord]
    vocabulary: EventVocabulary
    _positives: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _labels: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self._positives = {}
        self._labels = (np.stack([clip.labels for clip in self.clips]) if self.clips
                        else np.zeros((0, len(self.vocabulary)), dtype=np.uint8))
        labels = self._labels
        for event in self.events:
            column = labels[:, self.vocabulary.index_of[event]]
            self._positives[event] = np.flatnonzero(column)

    def label_matrix(self) -> np.ndarray:
        return self._labels

    def positives(self, event: str) -> np.ndarray:
        return self._positives.get(event, np.zeros(0, dtype=np.int64))

    def clip_ids(self) -> Set[str]:
        return {clip.clip_id for clip in self.clips}


@dataclass
class MetaSplit:
    train: Partition
    val: Partition
    test: Partition
    dropped_clips: int = 0
    held_out: Optional[Partition] = None

    def partition(self, name: str) -> Partition:
        if name == "held_out" and self.held_out is not None:
            return self.held_out
        if name not in ("train", "val", "test"):
            raise InvalidConfig(f"unknown partition {name}")
        return getattr(self, name)

    def summary(self) -> Dict[str, Dict[str, int]]:
        parts = {"train": self.train, "val": self.val, "test": self.test}
        if self.held_out is not None:
            parts["held_out"] = self.held_out
        return {name: {"events": len(p.events), "clips": len(p.clips)} for name, p in parts.items()}


@dataclass
class EpisodeItem:
    clip_id: str
    label: np.ndarray
    role: str  # "positive" | "negative"


@dataclass
class Episode:
    target_events: List[str]
    support: List[EpisodeItem]
    query: List[EpisodeItem]

    @property
    def ways(self) -> int:
        return len(self.target_events)

    def support_labels(self) -> np.ndarray:
        return np.stack([item.label for item in self.support]).astype(np.float32)

    def query_labels(self) -> np.ndarray:
        return np.stack([item.label for item in self.query]).astype(np.float32)

    def to_rows(self, index: int) -> List[Dict]:
        rows = []
        for role, items in (("support", self.support), ("query", self.query)):
            for item in items:
                rows.append({"episode": index, "role": role, "clip_id": item.clip_id,
                             "kind": item.role, "target_events": self.target_events,
                             "label": item.label.astype(int).tolist()})
        return rows


def _assign_clips(clips: Sequence[ClipRecord], vocabulary: EventVocabulary,
                  groups: Dict[str, Set[str]]) -> Tuple[Dict[str, List[ClipRecord]], int]:
    """Route each clip to the single group holding all its positives; clips spanning groups are dropped"""
    group_of = {event: name for name, events in groups.items() for event in events}
    assigned: Dict[str, List[ClipRecord]] = {name: [] for name in groups}
    dropped = 0
    for clip in clips:
        owners = {group_of.get(vocabulary.events[i]) for i in clip.positives}
        if len(owners) == 1 and None not in owners:
            assigned[owners.pop()].append(clip)
        else:
            dropped += 1
    return assigned, dropped


def split_classes(vocabulary: EventVocabulary, clips: Sequence[ClipRecord],
                  sizes: Tuple[int, int, int], seed: int) -> MetaSplit:
    """Random disjoint C_train / C_val / C_test of the given sizes, clips routed by their positives"""
    if len(sizes) != 3 or any(s < 1 for s in sizes) or sum(sizes) > len(vocabulary):
        raise InvalidSizes(f"sizes {tuple(sizes)} invalid for {len(vocabulary)} events")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(vocabulary))
    n_train, n_val, n_test = sizes
    picks = {
        "train": order[:n_train],
        "val": order[n_train:n_train + n_val],
        "test": order[n_train + n_val:n_train + n_val + n_test],
    }
    groups = {name: {vocabulary.events[i] for i in sorted(idx)} for name, idx in picks.items()}
    assigned, dropped = _assign_clips(clips, vocabulary, groups)
    split = MetaSplit(
        train=Partition("train", [vocabulary.events[i] for i in sorted(picks["train"])], assigned["train"], vocabulary),
        val=Partition("val", [vocabulary.events[i] for i in sorted(picks["val"])], assigned["val"], vocabulary),
        test=Partition("test", [vocabulary.events[i] for i in sorted(picks["test"])], assigned["test"], vocabulary),
        dropped_clips=dropped,
    )
    logger.info(f"Class split {tuple(sizes)} seed={seed}: {split.summary()}, dropped {dropped} cross-partition clips")
    return split


def split_by_domain(vocabulary: EventVocabulary, clips: Sequence[ClipRecord], target_domain: str,
                    base: Optional[MetaSplit] = None, val_fraction: float = 0.15, seed: int = 0,
                    forest: Optional[OntologyForest] = None,
                    sizes: Optional[Tuple[int, int, int]] = None) -> MetaSplit:
    """Hold out every leaf under one root-child domain as the test classes

    With a base split, its train/val classes minus the target domain stay as
    train/val and its test classes minus the target domain become `held_out`
    (the in-domain comparison set). With `sizes` the remaining events are
    randomly split into train / val / held_out of those sizes. Otherwise they
    are split into train/val by val_fraction. Passing the ontology lets a
    domain that exists but lost all its leaves to filtering be reported as
    EmptyDomain.
    """
    domains = set(vocabulary.domain_of.values())
    if forest is not None:
        domains.update(child for root in forest.roots for child in forest.nodes[root].child_ids)
    if target_domain not in domains:
        raise UnknownDomain(f"Unknown domain {target_domain}")
    target = vocabulary.events_in_domain(target_domain)
    if not target:
        raise EmptyDomain(f"Domain {target_domain} has no events in the vocabulary")
    target_set = set(target)

    if base is not None:
        groups = {
            "train": {e for e in base.train.events if e not in target_set},
            "val": {e for e in base.val.events if e not in target_set},
            "held_out": {e for e in base.test.events if e not in target_set},
        }
    elif sizes is not None:
        rest = [e for e in vocabulary.events if e not in target_set]
        if len(sizes) != 3 or any(s < 1 for s in sizes) or sum(sizes) > len(rest):
            raise InvalidSizes(f"sizes {tuple(sizes)} invalid for {len(rest)} events outside {target_domain}")
        order = np.random.default_rng(seed).permutation(len(rest))
        n_train, n_val, n_held = sizes
        groups = {
            "train": {rest[i] for i in order[:n_train]},
            "val": {rest[i] for i in order[n_train:n_train + n_val]},
            "held_out": {rest[i] for i in order[n_train + n_val:n_train + n_val + n_held]},
        }
    else:
        rest = [e for e in vocabulary.events if e not in target_set]
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(rest))
        n_val = max(1, int(round(val_fraction * len(rest)))) if len(rest) > 1 else 0
        groups = {
            "train": {rest[i] for i in order[n_val:]},
            "val": {rest[i] for i in order[:n_val]},
        }
    groups["test"] = target_set
    if not groups["train"]:
        raise InvalidSizes(f"No training events remain once domain {target_domain} is removed")

    assigned, dropped = _assign_clips(clips, vocabulary, groups)

    def ordered(events: Set[str]) -> List[str]:
        return [e for e in vocabulary.events if e in events]

    split = MetaSplit(
        train=Partition("train", ordered(groups["train"]), assigned["train"], vocabulary),
        val=Partition("val", ordered(groups["val"]), assigned["val"], vocabulary),
        test=Partition("test", ordered(groups["test"]), assigned["test"], vocabulary),
        dropped_clips=dropped,
        held_out=Partition("held_out", ordered(groups["held_out"]), assigned["held_out"], vocabulary)
        if "held_out" in groups else None,
    )
    logger.info(f"Domain split on {target_domain}: {split.summary()}, dropped {dropped} clips")
    return split


def remove_events(partition: Partition, events: Iterable[str], name: Optional[str] = None) -> Partition:
    """Partition without the given events and without any clip positive for them"""
    removed = set(events)
    keep_events = [e for e in partition.events if e not in removed]
    removed_idx = [partition.vocabulary.index_of[e] for e in removed if e in partition.vocabulary.index_of]
    keep_clips = [clip for clip in partition.clips if not clip.labels[removed_idx].any()]
    return Partition(name or partition.name, keep_events, keep_clips, partition.vocabulary)


def _draw_positives(partition: Partition, targets: List[str], target_idx: List[int], config: EpisodeConfig,
                    rng: np.random.Generator):
    """Fill each target's support and query quotas, crediting clips already drawn for earlier targets

    Returns (used mask, support, query, shortfall); shortfall is (event, available, required)
    when an event ran out of fresh positives, else None.
    """
    used = np.zeros(len(partition.clips), dtype=bool)
    support: List[EpisodeItem] = []
    query: List[EpisodeItem] = []
    support_mass = np.zeros(len(targets), dtype=np.int64)
    query_mass = np.zeros(len(targets), dtype=np.int64)

    for k, event in enumerate(targets):
        need_support = max(config.shots - int(support_mass[k]), 0)
        need_query = max(config.query_positives - int(query_mass[k]), 0)
        if need_support + need_query == 0:
            continue
        pool = partition.positives(event)
        pool = pool[~used[pool]]
        if len(pool) < need_support + need_query:
            return used, support, query, (event, int(len(pool)), need_support + need_query)
        chosen = rng.choice(pool, size=need_support + need_query, replace=False)
        used[chosen] = True
        for rank, clip_index in enumerate(chosen):
            clip = partition.clips[clip_index]
            label = clip.labels[target_idx].copy()
            if rank < need_support:
                support.append(EpisodeItem(clip.clip_id, label, "positive"))
                support_mass += label
            else:
                query.append(EpisodeItem(clip.clip_id, label, "positive"))
                query_mass += label
    return used, support, query, None


def sample_episode(partition: Partition, config: EpisodeConfig, rng: np.random.Generator) -> Episode:
    """Sample one K-way N-shot episode: positives per event, then negatives free of every target"""
    if config.ways > len(partition.events):
        raise InvalidConfig(f"{config.ways} ways requested from {len(partition.events)} events")

    vocabulary = partition.vocabulary
    picked = rng.choice(len(partition.events), size=config.ways, replace=False)
    targets = [partition.events[i] for i in picked]
    target_idx = vocabulary.indices(targets)

    needed = config.shots + config.query_positives
    for event in targets:
        total = len(partition.positives(event))
        if total < needed:
            raise InsufficientPositives(event, total, needed)

    for _ in range(MAX_DRAWS):
        used, support, query, shortfall = _draw_positives(partition, targets, target_idx, config, rng)
        if shortfall is None:
            break
    else:
        raise InsufficientPositives(*shortfall)

    labels = partition.label_matrix()
    negative_pool = np.flatnonzero(~labels[:, target_idx].any(axis=1) & ~used)
    needed_negatives = config.neg_support + config.neg_query
    if len(negative_pool) < needed_negatives:
        raise InsufficientNegatives(int(len(negative_pool)), needed_negatives)
    chosen = rng.choice(negative_pool, size=needed_negatives, replace=False)
    for rank, clip_index in enumerate(chosen):
        clip = partition.clips[clip_index]
        item = EpisodeItem(clip.clip_id, np.zeros(config.ways, dtype=np.uint8), "negative")
        (support if rank < config.neg_support else query).append(item)

    return Episode(target_events=targets, support=support, query=query)


def task_generators(seed: int, n_tasks: int) -> List[np.random.Generator]:
    """Independent per-task streams spawned from the master seed"""
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(n_tasks)]


def build_meta_set(partition: Partition, config: EpisodeConfig, n_tasks: int, seed: int,
                   workers: int = 1) -> List[Episode]:
    """n_tasks independent episodes; task i uses the i-th spawned child of `seed`"""
    if n_tasks < 0:
        raise InvalidConfig("n_tasks must be >= 0")
    if n_tasks == 0:
        return []
    streams = task_generators(seed, n_tasks)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            episodes = list(pool.map(lambda rng: sample_episode(partition, config, rng), streams))
    else:
        episodes = [sample_episode(partition, config, rng) for rng in streams]
    logger.info(f"Built {len(episodes)} {config.ways}-way {config.shots}-shot episodes "
                f"from partition '{partition.name}' (seed={seed})")
    return episodes
