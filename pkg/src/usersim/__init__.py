"""Simulated users for embodied-agent dialogues, with a replay evaluation harness."""

from usersim.model import (
    Observe,
    Physical,
    Session,
    Speak,
    SpeakerRole,
    Step,
    StepKind,
    UserDecision,
    classify_step,
    session_stats,
    validate_session,
)
from usersim.taxonomy import DialogueAct, parse_act

__version__ = "0.1.0"

__all__ = [
    "DialogueAct",
    "Observe",
    "Physical",
    "Session",
    "Speak",
    "SpeakerRole",
    "Step",
    "StepKind",
    "UserDecision",
    "classify_step",
    "parse_act",
    "session_stats",
    "validate_session",
]
