"""Configuration package for the few-shot event detection toolkit."""
