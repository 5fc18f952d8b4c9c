"""Reward search for quadruped gait skills: motion-aware frame selection,
online collection, offline reward relabeling and online fine-tuning."""

__version__ = "0.1.0"
