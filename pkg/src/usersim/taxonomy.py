"""Closed registry of the 18 TEACh dialogue acts.

Each act carries its category, a short explanation used in prompts, an
example utterance and a flag marking acts that are normally produced by the
robot rather than the user. The registry order is fixed and drives every
rendering that lists acts.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class UnknownActError(ValueError):
    """Raised when a string does not name any dialogue act."""

    def __init__(self, text: str):
        super().__init__(f"unknown dialogue act: {text!r}")
        self.text = text


class Category(str, Enum):
    INSTRUCTION = "Instruction"
    OBJECT_LOCATION = "Object/Location"
    GENERIC = "Generic"
    FEEDBACK = "Feedback"
    INTERFACE = "Interface"


class DialogueAct(str, Enum):
    """A dialogue act; the value is the canonical name used in transcripts."""

    INSTRUCTION = "Instruction"
    REQUEST_FOR_INSTRUCTION = "RequestForInstruction"
    REQUEST_OTHER_INFO = "RequestOtherInfo"
    REQUEST_MORE = "RequestMore"
    INFORMATION_ON_OBJECT_DETAILS = "InformationOnObjectDetails"
    REQUEST_FOR_OBJECT_LOCATION = "RequestForObjectLocationAndOtherDetails"
    INFORMATION_OTHER = "InformationOther"
    ALTERNATE_QUESTIONS = "AlternateQuestions"
    ACKNOWLEDGE = "Acknowledge"
    GREETINGS = "Greetings/Salutations"
    CONFIRM = "Confirm"
    MISC_OTHER = "MiscOther"
    AFFIRM = "Affirm"
    DENY = "Deny"
    FEEDBACK_POSITIVE = "FeedbackPositive"
    FEEDBACK_NEGATIVE = "FeedbackNegative"
    OTHER_INTERFACE_COMMENT = "OtherInterfaceComment"
    NOTIFY_FAILURE = "NotifyFailure"

    def __str__(self) -> str:
        return self.value

    @property
    def canonical_name(self) -> str:
        return self.value

    @property
    def info(self) -> ActInfo:
        return _REGISTRY[self]

    @property
    def category(self) -> Category:
        return _REGISTRY[self].category

    @property
    def aliases(self) -> tuple[str, ...]:
        return _REGISTRY[self].aliases

    @property
    def explanation(self) -> str:
        return _REGISTRY[self].explanation

    @property
    def example_utterance(self) -> str:
        return _REGISTRY[self].example_utterance

    @property
    def robot_typical(self) -> bool:
        return _REGISTRY[self].robot_typical


@dataclass(frozen=True)
class ActInfo:
    category: Category
    explanation: str
    example_utterance: str
    aliases: tuple[str, ...] = ()
    robot_typical: bool = False


A = DialogueAct
C = Category

_REGISTRY: dict[DialogueAct, ActInfo] = {
    A.INSTRUCTION: ActInfo(
        C.INSTRUCTION,
        "The COMMANDER tells the DRIVER what to do next.",
        "fill the mug with coffee",
    ),
    A.REQUEST_FOR_INSTRUCTION: ActInfo(
        C.INSTRUCTION,
        "The speaker asks what task or step should be done.",
        "what should I do today?",
        aliases=("ReqForInstruction",),
    ),
    A.REQUEST_OTHER_INFO: ActInfo(
        C.INSTRUCTION,
        "The speaker asks for some other detail needed to carry out the task.",
        "How many slices of tomato?",
        robot_typical=True,
    ),
    A.REQUEST_MORE: ActInfo(
        C.INSTRUCTION,
        "The speaker asks whether there is anything else to do.",
        "Is there anything else to do",
        robot_typical=True,
    ),
    A.INFORMATION_ON_OBJECT_DETAILS: ActInfo(
        C.OBJECT_LOCATION,
        "The speaker gives the location or other details of an object.",
        "knife is behind the sink",
        aliases=("InfoObjectLocAndOD",),
    ),
    A.REQUEST_FOR_OBJECT_LOCATION: ActInfo(
        C.OBJECT_LOCATION,
        "The speaker asks where an object is or for other details about it.",
        "where is the mug?",
        aliases=("ReqForObjLocAndOD",),
    ),
    A.INFORMATION_OTHER: ActInfo(
        C.OBJECT_LOCATION,
        "The speaker gives information that is not about an object's location.",
        "Mug is already clean",
    ),
    A.ALTERNATE_QUESTIONS: ActInfo(
        C.OBJECT_LOCATION,
        "The speaker asks the listener to choose between options.",
        "yellow or blue mug?",
    ),
    A.ACKNOWLEDGE: ActInfo(
        C.GENERIC,
        "The speaker acknowledges what the other party said or did.",
        "perfect",
    ),
    A.GREETINGS: ActInfo(
        C.GENERIC,
        "The speaker greets the other party or says goodbye.",
        "hello",
        aliases=("Greetings", "Salutations"),
    ),
    A.CONFIRM: ActInfo(
        C.GENERIC,
        "The speaker asks for confirmation before doing something.",
        "Should I clean the cup?",
    ),
    A.MISC_OTHER: ActInfo(
        C.GENERIC,
        "Any other utterance that fits no other act.",
        "ta-da",
    ),
    A.AFFIRM: ActInfo(
        C.GENERIC,
        "The speaker answers a question positively.",
        "Yes",
    ),
    A.DENY: ActInfo(
        C.GENERIC,
        "The speaker answers a question negatively.",
        "No",
    ),
    A.FEEDBACK_POSITIVE: ActInfo(
        C.FEEDBACK,
        "The COMMANDER praises the DRIVER's progress.",
        "great job",
    ),
    A.FEEDBACK_NEGATIVE: ActInfo(
        C.FEEDBACK,
        "The COMMANDER tells the DRIVER that something is wrong.",
        "that is not correct",
    ),
    A.OTHER_INTERFACE_COMMENT: ActInfo(
        C.INTERFACE,
        "The speaker comments on or asks about the simulator interface.",
        "Which button opens drawer",
        robot_typical=True,
    ),
    A.NOTIFY_FAILURE: ActInfo(
        C.INTERFACE,
        "The speaker reports that an action could not be completed.",
        "not able to do it",
    ),
}

del A, C

ALL_ACTS: tuple[DialogueAct, ...] = tuple(DialogueAct)

_BRACKETS = "<>[](){}\"'`"


def _normalize(text: str) -> str:
    return text.strip().strip(_BRACKETS).strip().casefold()


def _build_lookup() -> dict[str, DialogueAct]:
    lookup: dict[str, DialogueAct] = {}
    for act in ALL_ACTS:
        for name in (act.value, *_REGISTRY[act].aliases):
            key = _normalize(name)
            if key in lookup:
                raise RuntimeError(f"act name collision: {name!r}")
            lookup[key] = act
    return lookup


_LOOKUP = _build_lookup()


def parse_act(text: str) -> DialogueAct:
    """Resolve a canonical name or alias, ignoring case, padding and brackets."""
    act = _LOOKUP.get(_normalize(text))
    if act is None:
        raise UnknownActError(text)
    return act


def robot_typical(act: DialogueAct) -> bool:
    return _REGISTRY[act].robot_typical


def explanation_block() -> str:
    lines = ["Dialogue acts:"]
    for act in ALL_ACTS:
        info = _REGISTRY[act]
        lines.append(f'{act.value}: {info.explanation} Example: "{info.example_utterance}"')
    return "\n".join(lines)


def registry_records() -> list[dict]:
    """Registry as plain records, for export."""
    return [
        {
            "canonical_name": act.value,
            "aliases": list(_REGISTRY[act].aliases),
            "category": _REGISTRY[act].category.value,
            "explanation": _REGISTRY[act].explanation,
            "example_utterance": _REGISTRY[act].example_utterance,
            "robot_typical": _REGISTRY[act].robot_typical,
        }
        for act in ALL_ACTS
    ]
