"""Dialogue modeling with utterance-level context flow and a reference-free
conversation quality metric."""

__version__ = "0.1.0"
