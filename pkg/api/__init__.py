"""API package for the few-shot acoustic event detection service."""
