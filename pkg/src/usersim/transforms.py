"""History transforms that drop robot move steps.

``exclude_moves`` removes every driver move. ``selective_removal`` removes
only the moves that come right after a robot question, where moves already
removed do not count as intervening steps; this makes the transform
idempotent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from usersim.model import Physical, Session, Speak, SpeakerRole, Step
from usersim.taxonomy import DialogueAct

DEFAULT_MOVE_VERBS = frozenset({
    "Forward", "Backward", "Turn Left", "Turn Right", "Look Up", "Look Down",
    "Pan Left", "Pan Right", "Stand", "Crouch", "move",
})

DEFAULT_QUESTION_ACTS = frozenset({
    DialogueAct.REQUEST_FOR_INSTRUCTION,
    DialogueAct.REQUEST_OTHER_INFO,
    DialogueAct.REQUEST_MORE,
    DialogueAct.REQUEST_FOR_OBJECT_LOCATION,
    DialogueAct.ALTERNATE_QUESTIONS,
    DialogueAct.CONFIRM,
})


class TransformMode(str, Enum):
    NONE = "none"
    EXCLUDE_MOVES = "no-moves"
    SELECTIVE_REMOVAL = "selective"


@dataclass(frozen=True)
class TransformSpec:
    mode: TransformMode = TransformMode.NONE
    move_verbs: frozenset[str] = DEFAULT_MOVE_VERBS
    question_acts: frozenset[DialogueAct] = DEFAULT_QUESTION_ACTS
    _folded: frozenset[str] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "mode", TransformMode(self.mode))
        object.__setattr__(self, "move_verbs", frozenset(self.move_verbs))
        object.__setattr__(self, "question_acts", frozenset(self.question_acts))
        if self.mode is not TransformMode.NONE and not self.move_verbs:
            raise ValueError("move_verbs must be non-empty when a transform is active")
        object.__setattr__(self, "_folded", frozenset(v.casefold() for v in self.move_verbs))

    def is_move(self, step: Step) -> bool:
        return (
            step.actor is SpeakerRole.DRIVER
            and isinstance(step.action, Physical)
            and step.action.verb.casefold() in self._folded
        )

    def is_question(self, step: Step) -> bool:
        return (
            step.actor is SpeakerRole.DRIVER
            and isinstance(step.action, Speak)
            and not self.question_acts.isdisjoint(step.action.acts)
        )

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "move_verbs": sorted(self.move_verbs),
            "question_acts": sorted(a.value for a in self.question_acts),
        }


def exclude_moves(session: Session, spec: TransformSpec) -> Session:
    return session.with_steps([s for s in session.steps if not spec.is_move(s)])


def removed_by_selective(session: Session, spec: TransformSpec) -> list[int]:
    """Indices of steps that selective removal drops."""
    removed = []
    last_kept = None
    for step in session.steps:
        if spec.is_move(step) and last_kept is not None and spec.is_question(last_kept):
            removed.append(step.index)
            continue
        last_kept = step
    return removed


def selective_removal(session: Session, spec: TransformSpec) -> Session:
    drop = set(removed_by_selective(session, spec))
    return session.with_steps([s for s in session.steps if s.index not in drop])


def apply_transform(session: Session, spec: TransformSpec) -> Session:
    if spec.mode is TransformMode.EXCLUDE_MOVES:
        return exclude_moves(session, spec)
    if spec.mode is TransformMode.SELECTIVE_REMOVAL:
        return selective_removal(session, spec)
    return session
