"""File-backed persistence: manifests, feature cache and checkpoints."""
