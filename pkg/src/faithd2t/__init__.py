"""Faithful data-to-text training: entity-replacement negatives, replacement
detection and unlikelihood losses, and entity-level evaluation."""

__version__ = "0.1.0"
