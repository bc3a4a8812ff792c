"""Run configuration models and HTTP payloads."""
