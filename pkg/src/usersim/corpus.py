"""Corpus parsing and serialization.

Two formats are supported:

* the plain-text transcript used inside prompts::

      Goal: Prepare coffee in a clean mug.
      COMMANDER: <observe>
      DRIVER: <toggle on CoffeeMachine>
      COMMANDER: dont <<Deny>>
      DRIVER: <observe>

* the canonical corpus file: UTF-8 JSON lines, one session per line, each
  carrying ``schema_version``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

from usersim.model import (
    SPLITS,
    ActionEvent,
    Observe,
    Physical,
    Session,
    Speak,
    SpeakerRole,
    Step,
    StepKind,
    Violation,
    classify_step,
    validate_session,
)
from usersim.taxonomy import UnknownActError, parse_act

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RESPONSE_LINE = "COMMANDER response:"
OBSERVE_TOKEN = "<observe>"


class TranscriptError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class CorpusError(ValueError):
    pass


class SchemaVersionError(CorpusError):
    pass


class CorpusValidationError(CorpusError):
    def __init__(self, issues: Mapping[str, list[Violation]]):
        lines = [f"{sid}: {v}" for sid, vs in issues.items() for v in vs]
        super().__init__("invalid sessions:\n" + "\n".join(lines))
        self.issues = dict(issues)


# -- transcript payloads ---------------------------------------------------


def render_payload(event: ActionEvent) -> str:
    if isinstance(event, Observe):
        return OBSERVE_TOKEN
    if isinstance(event, Physical):
        return f"<{event.verb} {event.target}>" if event.target else f"<{event.verb}>"
    acts = ",".join(a.value for a in event.acts)
    if event.utterance:
        return f"{event.utterance} <<{acts}>>"
    return f"<<{acts}>>"


def parse_physical(content: str) -> Physical:
    """Split bracket content into verb and target.

    The verb is the leading run of tokens that do not start with a capital
    letter; the remaining tokens form the target. Content that starts with a
    capital (TEACh navigation verbs such as ``Turn Left``) is a target-less verb.
    """
    tokens = content.split()
    if not tokens:
        raise ValueError("empty action")
    n = 0
    while n < len(tokens) and not tokens[n][0].isupper():
        n += 1
    if n == 0 or n == len(tokens):
        return Physical(" ".join(tokens))
    return Physical(" ".join(tokens[:n]), " ".join(tokens[n:]))


def parse_payload(payload: str) -> ActionEvent:
    payload = payload.strip()
    if not payload:
        raise ValueError("empty payload")
    if "<<" in payload or ">>" in payload:
        start = payload.rfind("<<")
        if start < 0 or not payload.endswith(">>") or payload.count(">>") != 1:
            raise ValueError(f"malformed dialogue-act brackets in {payload!r}")
        names = [n for n in payload[start + 2:-2].split(",")]
        if not any(n.strip() for n in names):
            raise ValueError("utterance has no dialogue acts")
        acts = tuple(parse_act(n) for n in names)
        utterance = payload[:start].rstrip()
        if "<" in utterance or ">" in utterance:
            raise ValueError(f"stray angle bracket in utterance {utterance!r}")
        return Speak(utterance, tuple(dict.fromkeys(acts)))
    if payload.startswith("<"):
        if not payload.endswith(">") or payload.count("<") != 1 or payload.count(">") != 1:
            raise ValueError(f"malformed action brackets in {payload!r}")
        content = payload[1:-1].strip()
        if content == "observe":
            return Observe()
        return parse_physical(content)
    raise ValueError(f"utterance without dialogue acts: {payload!r}")


def transcript_safe(event: ActionEvent) -> bool:
    """True if the event survives a render/parse cycle unchanged."""
    rendered = render_payload(event)
    if "\n" in rendered or "\r" in rendered:
        return False
    try:
        return parse_payload(rendered) == event
    except ValueError:
        return False


# -- transcripts -----------------------------------------------------------


def render_step_lines(step: Step) -> tuple[str, str]:
    mine = f"{step.actor.label}: {render_payload(step.action)}"
    other_role = SpeakerRole.DRIVER if step.actor is SpeakerRole.COMMANDER else SpeakerRole.COMMANDER
    other = f"{other_role.label}: {OBSERVE_TOKEN}"
    if step.actor is SpeakerRole.COMMANDER:
        return mine, other
    return other, mine


def render_history(steps: Iterable[Step]) -> list[str]:
    lines = []
    for step in steps:
        lines.extend(render_step_lines(step))
    return lines


def render_transcript(session: Session) -> str:
    return "\n".join([f"Goal: {session.goal}", *render_history(session.steps)]) + "\n"


def _split_role(line: str, role: SpeakerRole, line_no: int) -> str:
    prefix = role.label + ":"
    if not line.startswith(prefix):
        raise TranscriptError(line_no, f"expected {prefix!r} line, got {line!r}")
    return line[len(prefix):]


def parse_transcript(text: str, id: str = "transcript", split: Optional[str] = None) -> Session:
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if lines and lines[-1].strip() == RESPONSE_LINE:
        lines.pop()
    if not lines or not lines[0].startswith("Goal:"):
        raise TranscriptError(1, "transcript must start with a 'Goal:' line")
    goal = lines[0][len("Goal:"):].strip()
    body = lines[1:]
    if len(body) % 2:
        raise TranscriptError(len(lines), "unpaired COMMANDER/DRIVER line")
    steps = []
    for k in range(0, len(body), 2):
        c_no, d_no = k + 2, k + 3
        events = []
        for role, line, no in ((SpeakerRole.COMMANDER, body[k], c_no), (SpeakerRole.DRIVER, body[k + 1], d_no)):
            payload = _split_role(line.rstrip(), role, no)
            try:
                events.append(parse_payload(payload))
            except UnknownActError as exc:
                raise TranscriptError(no, f"unknown dialogue act {exc.text.strip()!r}") from exc
            except ValueError as exc:
                raise TranscriptError(no, str(exc)) from exc
        c_event, d_event = events
        c_obs, d_obs = isinstance(c_event, Observe), isinstance(d_event, Observe)
        if c_obs and d_obs:
            raise TranscriptError(c_no, "both roles observe in the same step")
        if not c_obs and not d_obs:
            raise TranscriptError(c_no, "both roles act in the same step")
        if c_obs:
            steps.append(Step(len(steps), SpeakerRole.DRIVER, d_event))
        else:
            steps.append(Step(len(steps), SpeakerRole.COMMANDER, c_event))
    return Session(id, goal, tuple(steps), split)


# -- corpus ------------------------------------------------------------------


@dataclass(frozen=True)
class Corpus:
    sessions: tuple[Session, ...]
    issues: Mapping[str, list[Violation]] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "sessions", tuple(self.sessions))
        seen = set()
        for s in self.sessions:
            if s.id in seen:
                raise CorpusError(f"duplicate session id {s.id!r}")
            seen.add(s.id)

    @property
    def split_index(self) -> dict[str, list[str]]:
        index: dict[str, list[str]] = {}
        for s in self.sessions:
            if s.split is not None:
                index.setdefault(s.split, []).append(s.id)
        return index

    def __len__(self) -> int:
        return len(self.sessions)

    def __iter__(self):
        return iter(self.sessions)

    def get(self, session_id: str) -> Session:
        for s in self.sessions:
            if s.id == session_id:
                return s
        raise KeyError(session_id)

    def select(self, split: Optional[str]) -> Corpus:
        """Sessions of one split; ``None`` keeps everything."""
        if split is None:
            return self
        if split not in SPLITS and split not in self.split_index:
            raise CorpusError(f"unknown split {split!r}")
        return Corpus(tuple(s for s in self.sessions if s.split == split))


def session_to_record(session: Session) -> dict:
    steps = []
    for step in session.steps:
        a = step.action
        rec: dict = {"actor": step.actor.value}
        if isinstance(a, Speak):
            rec.update(kind="speak", utterance=a.utterance, acts=[x.value for x in a.acts])
        elif isinstance(a, Physical):
            rec.update(kind="physical", verb=a.verb)
            if a.target is not None:
                rec["target"] = a.target
        else:
            rec["kind"] = "observe"
        steps.append(rec)
    return {
        "schema_version": SCHEMA_VERSION,
        "id": session.id,
        "split": session.split,
        "goal": session.goal,
        "steps": steps,
    }


def session_from_record(rec: Mapping) -> Session:
    version = rec.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    steps = []
    for i, st in enumerate(rec["steps"]):
        actor = SpeakerRole(st["actor"])
        kind = st["kind"]
        if kind == "speak":
            action: ActionEvent = Speak(st.get("utterance", ""), tuple(parse_act(a) for a in st["acts"]))
        elif kind == "physical":
            action = Physical(st["verb"], st.get("target"))
        elif kind == "observe":
            action = Observe()
        else:
            raise CorpusError(f"step {i}: unknown kind {kind!r}")
        steps.append(Step(i, actor, action))
    return Session(str(rec["id"]), rec["goal"], tuple(steps), rec.get("split"))


def dumps_session(session: Session) -> str:
    return json.dumps(session_to_record(session), ensure_ascii=False)


def save_corpus(corpus: Corpus | Iterable[Session], path: str | Path) -> None:
    sessions = corpus.sessions if isinstance(corpus, Corpus) else tuple(corpus)
    with open(path, "w", encoding="utf-8") as f:
        for s in sessions:
            f.write(dumps_session(s) + "\n")


def check_session(session: Session) -> list[Violation]:
    """Model invariants plus transcript round-trip safety of every event."""
    problems = validate_session(session)
    for step in session.steps:
        if isinstance(step.action, Observe) or not isinstance(step.actor, SpeakerRole):
            continue
        if not transcript_safe(step.action):
            problems.append(Violation(step.index, f"event does not round-trip through the transcript format: {step.action!r}"))
    return problems


def load_corpus(path: str | Path, strict: bool = False) -> Corpus:
    sessions = []
    issues: dict[str, list[Violation]] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{line_no}: invalid JSON ({exc.msg})") from exc
            try:
                session = session_from_record(rec)
            except SchemaVersionError:
                raise
            except (KeyError, ValueError, TypeError) as exc:
                raise CorpusError(f"{path}:{line_no}: bad record ({exc})") from exc
            problems = check_session(session)
            if problems:
                issues[session.id] = problems
                log.warning("session %s has %d violation(s)", session.id, len(problems))
            sessions.append(session)
    if strict and issues:
        raise CorpusValidationError(issues)
    return Corpus(tuple(sessions), issues)


# -- statistics --------------------------------------------------------------


@dataclass(frozen=True)
class CorpusStats:
    n_sessions: int
    n_steps: int
    frac_user_speak: float
    frac_robot_speak: float
    frac_robot_physical: float
    counts: Mapping[StepKind, int] = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        return {
            "n_sessions": self.n_sessions,
            "n_steps": self.n_steps,
            "frac_user_speak": self.frac_user_speak,
            "frac_robot_speak": self.frac_robot_speak,
            "frac_robot_physical": self.frac_robot_physical,
            "counts": {k.value: v for k, v in self.counts.items()},
        }


def corpus_stats(corpus: Corpus, split: Optional[str] = None) -> CorpusStats:
    sessions = corpus.select(split).sessions
    counts = {kind: 0 for kind in StepKind}
    for s in sessions:
        for step in s.steps:
            counts[classify_step(step)] += 1
    n = sum(counts.values())

    def frac(kind: StepKind) -> float:
        return counts[kind] / n if n else 0.0

    return CorpusStats(
        n_sessions=len(sessions),
        n_steps=n,
        frac_user_speak=frac(StepKind.USER_SPEAK),
        frac_robot_speak=frac(StepKind.ROBOT_SPEAK),
        frac_robot_physical=frac(StepKind.ROBOT_PHYSICAL),
        counts=counts,
    )


def fixture_path() -> Path:
    """Path of the bundled three-session synthetic corpus."""
    return Path(__file__).parent / "data" / "fixture_corpus.jsonl"


def load_fixture() -> Corpus:
    return load_corpus(fixture_path(), strict=True)
