"""
Checkpoint container.

A checkpoint is a torch.save archive holding
    {"format_version": 1, "config": <BackboneConfig dump>, "head_width": int,
     "theta": embedder state_dict, "phi": head state_dict, "meta": {...}}
Parameters and batch-norm running statistics are stored as float32 tensors.
Writes go to a temporary file that is renamed into place.
"""

import logging
import os
import pickle
import tempfile
import zipfile
from pathlib import Path
from typing import Any, Dict, Optional

import torch

from schemas.models import BackboneConfig
from services.backbone import EventDetector
from services.exceptions import CheckpointIoError, VersionMismatch

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def save_checkpoint(model: EventDetector, path: str, meta: Optional[Dict[str, Any]] = None) -> str:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "config": model.config.model_dump(),
        "head_width": model.n_out,
        "theta": {k: v.detach().cpu().clone() for k, v in model.theta().items()},
        "phi": {k: v.detach().cpu().clone() for k, v in model.phi().items()},
        "meta": meta or {},
    }
    try:
        fd, tmp_name = tempfile.mkstemp(dir=str(target.parent), suffix=".tmp")
        os.close(fd)
        torch.save(payload, tmp_name)
        os.replace(tmp_name, target)
    except OSError as e:
        raise CheckpointIoError(f"Failed to write checkpoint {path}: {e}")
    logger.info(f"Saved checkpoint to {path}")
    return str(target)


def read_checkpoint(path: str) -> Dict[str, Any]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointIoError(f"Checkpoint {path} does not exist")
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError, zipfile.BadZipFile, ValueError) as e:
        raise CheckpointIoError(f"Checkpoint {path} is unreadable: {e}")
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointIoError(f"Checkpoint {path} is not a detector checkpoint")
    if payload["format_version"] != FORMAT_VERSION:
        raise VersionMismatch(f"Checkpoint version {payload['format_version']}, expected {FORMAT_VERSION}")
    return payload


def load_checkpoint(path: str) -> EventDetector:
    payload = read_checkpoint(path)
    try:
        model = EventDetector(BackboneConfig.model_validate(payload["config"]), n_out=int(payload["head_width"]))
        model.embedder.load_state_dict(payload["theta"])
        if model.head is not None:
            model.head.load_state_dict(payload["phi"])
    except (KeyError, RuntimeError) as e:
        raise CheckpointIoError(f"Checkpoint {path} has inconsistent contents: {e}")
    return model
