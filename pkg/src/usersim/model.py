"""Session model: an ordered list of (actor, action) steps under a goal."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Union

from usersim.taxonomy import DialogueAct


class InvalidStepError(ValueError):
    pass


class SpeakerRole(str, Enum):
    COMMANDER = "Commander"
    DRIVER = "Driver"

    @property
    def label(self) -> str:
        """Upper-case role name used in transcripts and prompts."""
        return self.value.upper()


class StepKind(str, Enum):
    USER_SPEAK = "UserSpeak"
    ROBOT_SPEAK = "RobotSpeak"
    ROBOT_PHYSICAL = "RobotPhysical"


SPLITS = ("train", "valid-seen", "valid-unseen", "test-seen", "test-unseen")


@dataclass(frozen=True)
class Speak:
    utterance: str
    acts: tuple[DialogueAct, ...]

    def __post_init__(self):
        acts = tuple(self.acts)
        object.__setattr__(self, "acts", acts)
        if not acts:
            raise ValueError("Speak needs at least one dialogue act")
        if len(set(acts)) != len(acts):
            raise ValueError(f"duplicate dialogue acts: {[str(a) for a in acts]}")
        if not all(isinstance(a, DialogueAct) for a in acts):
            raise TypeError("acts must be DialogueAct members")


@dataclass(frozen=True)
class Physical:
    verb: str
    target: Optional[str] = None

    def __post_init__(self):
        if not self.verb or not self.verb.strip():
            raise ValueError("Physical action needs a verb")


@dataclass(frozen=True)
class Observe:
    pass


ActionEvent = Union[Speak, Physical, Observe]


@dataclass(frozen=True)
class Step:
    index: int
    actor: SpeakerRole
    action: ActionEvent


@dataclass(frozen=True)
class Session:
    id: str
    goal: str
    steps: tuple[Step, ...] = ()
    split: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))

    def __len__(self) -> int:
        return len(self.steps)

    def with_steps(self, steps: Iterable[tuple[SpeakerRole, ActionEvent] | Step]) -> Session:
        """Copy with new steps, renumbered from 0."""
        return Session(self.id, self.goal, tuple(renumber(steps)), self.split)


@dataclass(frozen=True)
class Violation:
    index: Optional[int]
    message: str

    def __str__(self) -> str:
        where = "session" if self.index is None else f"step {self.index}"
        return f"{where}: {self.message}"


def renumber(steps: Iterable[tuple[SpeakerRole, ActionEvent] | Step]) -> list[Step]:
    out = []
    for i, item in enumerate(steps):
        if isinstance(item, Step):
            actor, action = item.actor, item.action
        else:
            actor, action = item
        out.append(Step(i, actor, action))
    return out


def make_session(
    id: str,
    goal: str,
    steps: Iterable[tuple[SpeakerRole, ActionEvent]],
    split: Optional[str] = None,
) -> Session:
    return Session(id, goal, tuple(renumber(steps)), split)


def classify_step(step: Step) -> StepKind:
    action = step.action
    if step.actor is SpeakerRole.COMMANDER:
        if isinstance(action, Speak):
            return StepKind.USER_SPEAK
        raise InvalidStepError(f"step {step.index}: commander steps must be speech, got {action!r}")
    if isinstance(action, Speak):
        return StepKind.ROBOT_SPEAK
    if isinstance(action, Physical):
        return StepKind.ROBOT_PHYSICAL
    raise InvalidStepError(f"step {step.index}: observe is never stored as a step")


def validate_session(session: Session) -> list[Violation]:
    """Every invariant violation in the session; an empty list means valid."""
    problems = []
    if not session.goal or not session.goal.strip():
        problems.append(Violation(None, "goal is empty"))
    for pos, step in enumerate(session.steps):
        if step.index != pos:
            problems.append(Violation(pos, f"index {step.index} out of sequence"))
        if not isinstance(step.actor, SpeakerRole):
            problems.append(Violation(pos, f"unknown actor {step.actor!r}"))
        elif isinstance(step.action, Observe):
            problems.append(Violation(pos, "observe stored as a step"))
        elif step.actor is SpeakerRole.COMMANDER and isinstance(step.action, Physical):
            problems.append(Violation(pos, "commander performed a physical action"))
    return problems


def session_stats(session: Session) -> dict[StepKind, int]:
    counts = Counter({kind: 0 for kind in StepKind})
    for step in session.steps:
        counts[classify_step(step)] += 1
    return dict(counts)


@dataclass(frozen=True)
class UserDecision:
    """The simulator's output for one step: observe (no acts) or speak."""

    acts: tuple[DialogueAct, ...] = ()
    utterance: Optional[str] = None
    # provenance; not part of the decision's identity
    source: str = field(default="", compare=False)
    prompt_hash: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        acts = tuple(self.acts)
        object.__setattr__(self, "acts", acts)
        if len(set(acts)) != len(acts):
            raise ValueError("duplicate dialogue acts in decision")
        if not acts and self.utterance is not None:
            raise ValueError("an observe decision carries no utterance")

    @classmethod
    def observe(cls, **kw) -> UserDecision:
        return cls((), None, **kw)

    @classmethod
    def speak(cls, acts: Iterable[DialogueAct], utterance: Optional[str] = None, **kw) -> UserDecision:
        acts = tuple(acts)
        if not acts:
            raise ValueError("a speak decision needs at least one act")
        return cls(acts, utterance, **kw)

    @property
    def is_observe(self) -> bool:
        return not self.acts

    @property
    def is_speak(self) -> bool:
        return bool(self.acts)

    def render(self) -> str:
        """Answer token as written in prompts: OBSERVE or comma-joined act names."""
        if self.is_observe:
            return "OBSERVE"
        return ",".join(a.value for a in self.acts)
