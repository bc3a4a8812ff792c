"""API routes package for the few-shot acoustic event detection service."""
