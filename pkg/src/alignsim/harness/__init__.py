"""Synthetic worlds, toy experts, the staged pipeline and its CLI."""
