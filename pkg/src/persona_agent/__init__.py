"""Personalized LLM agents with episodic/semantic memory and test-time persona alignment."""

from persona_agent.core import (
    InteractionRecord,
    Metadata,
    ParseFailure,
    Prediction,
    TaskKind,
    parse_label,
)

__all__ = [
    "InteractionRecord",
    "Metadata",
    "ParseFailure",
    "Prediction",
    "TaskKind",
    "parse_label",
]

__version__ = "0.1.0"
