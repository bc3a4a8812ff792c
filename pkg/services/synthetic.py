"""
Synthetic few-shot detection data for desk-scale runs.

Each event is a parametric time-frequency pattern drawn directly in the
log-mel feature plane over Gaussian background noise. Events of one domain
share a pattern family, so a two-domain dataset has two disjoint families:

    tone   - narrow band (3 bins) held for half the clip, amplitude-modulated
    chirp  - 2-bin track sweeping up or down from the event band
    burst  - 7-bin block repeated as on/off bursts

Event i's band centre, modulation period and sweep slope are fixed
functions of i (see _event_pattern); only onset, gain jitter and noise vary
per clip.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from schemas.models import FeatureConfig
from services.exceptions import InvalidConfig
from services.ontology import ClipRecord, ClipSource, EventVocabulary, OntologyForest, parse_ontology

logger = logging.getLogger(__name__)

FAMILIES = ("tone", "chirp", "burst")
MODULATION_PERIODS = (4, 6, 8, 11, 16)
SYNTHETIC_FEATURES = FeatureConfig(clip_seconds=0.64, n_mels=32)


@dataclass
class EventPattern:
    family: str
    center_bin: int
    period: int
    slope: float


def _event_pattern(index: int, n_events: int, domain_index: int, n_mels: int) -> EventPattern:
    family = FAMILIES[domain_index % len(FAMILIES)]
    margin = 4
    span = max(n_mels - 2 * margin, 1)
    center = margin + int(round((index + 0.5) * span / n_events))
    period = MODULATION_PERIODS[index % len(MODULATION_PERIODS)]
    slope = (0.25 + 0.05 * (index % 4)) * (1 if index % 2 == 0 else -1)
    return EventPattern(family, min(center, n_mels - 1), period, slope)


def render_pattern(pattern: EventPattern, n_frames: int, n_mels: int, onset: int) -> np.ndarray:
    """Unit-gain pattern as a [frames x mels] mask"""
    out = np.zeros((n_frames, n_mels), dtype=np.float64)
    duration = max(n_frames // 2, 1)
    frames = np.arange(onset, min(onset + duration, n_frames))
    phase = frames - onset
    modulation = 0.5 + 0.5 * np.cos(2.0 * np.pi * phase / pattern.period)

    if pattern.family == "tone":
        low, high = max(pattern.center_bin - 1, 0), min(pattern.center_bin + 2, n_mels)
        out[frames, low:high] = modulation[:, None]
    elif pattern.family == "chirp":
        bins = np.clip(np.round(pattern.center_bin + pattern.slope * phase).astype(int), 0, n_mels - 2)
        out[frames, bins] = 1.0
        out[frames, bins + 1] = 1.0
    else:
        low, high = max(pattern.center_bin - 3, 0), min(pattern.center_bin + 4, n_mels)
        on = (phase % pattern.period) < max(pattern.period // 2, 1)
        out[frames[on], low:high] = 1.0
    return out


def synthetic_ontology(n_events: int, n_domains: int = 2) -> Tuple[OntologyForest, List[str]]:
    """One root, n_domains domain nodes, events split contiguously across domains"""
    event_ids = [f"syn_event_{i:03d}" for i in range(n_events)]
    groups = np.array_split(np.arange(n_events), n_domains)
    document = [{"id": "syn_root", "name": "Synthetic",
                 "child_ids": [f"syn_domain_{d}" for d in range(n_domains)]}]
    for d, members in enumerate(groups):
        document.append({
            "id": f"syn_domain_{d}",
            "name": f"{FAMILIES[d % len(FAMILIES)]} family {d}",
            "child_ids": [event_ids[i] for i in members],
        })
    for d, members in enumerate(groups):
        for i in members:
            document.append({"id": event_ids[i], "name": f"{FAMILIES[d % len(FAMILIES)]} {i}",
                             "child_ids": [], "annotation_accuracy": 1.0})
    return parse_ontology(document), event_ids


def generate_synthetic_dataset(n_events: int, clips_per_event: int, cooccurrence_rate: float,
                               seed: int, n_domains: int = 2,
                               feature_config: Optional[FeatureConfig] = None,
                               noise_std: float = 1.0,
                               pattern_gain: float = 3.0) -> Tuple[EventVocabulary, List[ClipRecord]]:
    """Deterministic synthetic (vocabulary, clips) for the given seed

    Exactly round(rate * total) clips, chosen uniformly, carry a second event.
    """
    if n_events < 2:
        raise InvalidConfig("n_events must be >= 2")
    if clips_per_event < 1:
        raise InvalidConfig("clips_per_event must be >= 1")
    if not 0.0 <= cooccurrence_rate <= 1.0:
        raise InvalidConfig("cooccurrence_rate must be in [0, 1]")
    if not 1 <= n_domains <= n_events:
        raise InvalidConfig("n_domains must be in [1, n_events]")

    config = feature_config or SYNTHETIC_FEATURES
    n_frames, n_mels = config.n_frames, config.n_mels
    forest, event_ids = synthetic_ontology(n_events, n_domains)
    domain_of = {event: forest.domain_of(event) for event in event_ids}
    names = {event: forest.nodes[event].display_name for event in event_ids}
    vocabulary = EventVocabulary.build(event_ids, domain_of, names)

    domain_index = {f"syn_domain_{d}": d for d in range(n_domains)}
    patterns = [_event_pattern(i, n_events, domain_index[domain_of[event]], n_mels)
                for i, event in enumerate(event_ids)]

    rng = np.random.default_rng(seed)
    total = n_events * clips_per_event
    primary = np.repeat(np.arange(n_events), clips_per_event)
    n_cooccurring = int(round(cooccurrence_rate * total))
    cooccurring = np.zeros(total, dtype=bool)
    cooccurring[rng.choice(total, size=n_cooccurring, replace=False)] = True

    max_onset = max(n_frames // 4, 1)
    clips: List[ClipRecord] = []
    for k in range(total):
        events = [int(primary[k])]
        if cooccurring[k]:
            other = int(rng.integers(n_events - 1))
            events.append(other if other < events[0] else other + 1)

        features = rng.normal(0.0, noise_std, size=(n_frames, n_mels))
        labels = np.zeros(n_events, dtype=np.uint8)
        for event in events:
            onset = int(rng.integers(max_onset))
            gain = pattern_gain * rng.uniform(0.8, 1.2)
            features += gain * render_pattern(patterns[event], n_frames, n_mels, onset)
            labels[event] = 1
        clips.append(ClipRecord(clip_id=f"syn_{k:05d}", labels=labels, source=ClipSource.SYNTHETIC,
                                features=features.astype(np.float32)))

    logger.info(f"Generated synthetic dataset: {n_events} events, {total} clips, "
                f"{n_cooccurring} with a second event, features {n_frames}x{n_mels}")
    return vocabulary, clips


def pattern_table(n_events: int, n_domains: int = 2, n_mels: int = 32) -> List[Dict]:
    """Documented pattern constants per event"""
    groups = np.array_split(np.arange(n_events), n_domains)
    rows = []
    for d, members in enumerate(groups):
        for i in members:
            pattern = _event_pattern(int(i), n_events, d, n_mels)
            rows.append({"event": f"syn_event_{i:03d}", "domain": f"syn_domain_{d}", **pattern.__dict__})
    return rows
