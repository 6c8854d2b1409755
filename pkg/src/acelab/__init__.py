"""Tabular RLVR lab for GRPO and confidence-aware negative advantages (ACE)."""

__version__ = "0.1.0"
