"""Closed-loop simulation of a user against an embodied agent.

Each round the user policy decides first. If it speaks, the utterance is
appended as a commander step. If it observes, the agent is asked for its next
event: an action is appended as a driver step, ``Idle`` counts towards the
observe limit, ``Done`` ends the session. After ``max_consecutive_observes``
idle rounds in a row the policy is re-queried with observing forbidden and
the forced turn is appended in the same round.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence, Union

import httpx

from usersim.corpus import dumps_session, parse_payload, render_payload, render_transcript
from usersim.model import ActionEvent, Observe, Physical, Session, Speak, SpeakerRole, Step
from usersim.policies import FORCED, FREE, Policy, TemplateStore, realize


@dataclass(frozen=True)
class AgentAct:
    event: ActionEvent

    def __post_init__(self):
        if isinstance(self.event, Observe):
            raise ValueError("an agent act cannot be an observe")


@dataclass(frozen=True)
class AgentIdle:
    pass


@dataclass(frozen=True)
class AgentDone:
    success: bool = True


AgentEvent = Union[AgentAct, AgentIdle, AgentDone]


class Agent(Protocol):
    def next_event(self, history: Sequence[Step]) -> AgentEvent: ...


class AgentConnectionError(RuntimeError):
    pass


class Termination(str, Enum):
    AGENT_DONE = "AgentDone"
    STEP_CAP = "StepCap"


@dataclass(frozen=True)
class SimLimits:
    max_steps: int = 500
    max_consecutive_observes: int = 10

    def __post_init__(self):
        if self.max_steps < 1 or self.max_consecutive_observes < 1:
            raise ValueError("simulation limits must be >= 1")


@dataclass(frozen=True)
class StepRecord:
    source: str
    forced: bool = False
    prompt_hash: Optional[str] = None
    latency: float = field(default=0.0, compare=False)


@dataclass(frozen=True)
class RoundTrace:
    """One policy query: its decision and what the agent answered, if asked."""

    round: int
    speak: bool
    forced: bool
    agent: Optional[str] = None


@dataclass
class SimLog:
    session: Session
    records: list[StepRecord] = field(default_factory=list)
    trace: list[RoundTrace] = field(default_factory=list)
    termination: Optional[Termination] = None
    success: Optional[bool] = None

    def metadata(self) -> dict:
        return {
            "session_id": self.session.id,
            "termination": self.termination.value if self.termination else None,
            "success": self.success,
            "steps": [
                {"source": r.source, "forced": r.forced, "prompt_hash": r.prompt_hash, "latency": round(r.latency, 6)}
                for r in self.records
            ],
        }

    def save(self, directory: str | Path, config: Optional[dict] = None) -> dict[str, Path]:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "corpus": out / f"{self.session.id}.jsonl",
            "metadata": out / f"{self.session.id}.meta.json",
            "transcript": out / f"{self.session.id}.txt",
        }
        paths["corpus"].write_text(dumps_session(self.session) + "\n", encoding="utf-8")
        meta = self.metadata()
        meta["config"] = config or {}
        paths["metadata"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        paths["transcript"].write_text(render_transcript(self.session), encoding="utf-8")
        return paths


class SimulationAborted(RuntimeError):
    def __init__(self, message: str, log: SimLog):
        super().__init__(message)
        self.log = log


def run_session(
    goal: str,
    policy: Policy,
    agent: Agent,
    limits: SimLimits = SimLimits(),
    template_store: Optional[TemplateStore] = None,
    seed: int = 0,
    session_id: str = "sim",
    clock: Callable[[], float] = time.perf_counter,
) -> SimLog:
    steps: list[Step] = []
    log = SimLog(Session(session_id, goal))
    idle = 0

    def commit(actor: SpeakerRole, action: ActionEvent, record: StepRecord) -> None:
        steps.append(Step(len(steps), actor, action))
        log.records.append(record)
        log.session = Session(session_id, goal, tuple(steps))

    def user_turn(rnd: int, forced: bool) -> bool:
        t0 = clock()
        history = tuple(steps)
        decision = policy.decide(goal, history, FORCED if forced else FREE, point_id=f"{session_id}:{len(steps)}")
        latency = clock() - t0
        if forced and decision.is_observe:
            raise RuntimeError(f"policy {policy.name!r} observed on a forced turn")
        if decision.is_observe:
            log.trace.append(RoundTrace(rnd, False, forced))
            return False
        utterance = decision.utterance
        if utterance is None:
            utterance = realize(decision.acts, template_store, rng_seed=seed * 1_000_003 + len(steps))
        commit(SpeakerRole.COMMANDER, Speak(utterance, decision.acts),
               StepRecord(decision.source or policy.name, forced, decision.prompt_hash, latency))
        log.trace.append(RoundTrace(rnd, True, forced))
        return True

    try:
        for rnd in range(1, limits.max_steps + 1):
            if user_turn(rnd, forced=False):
                idle = 0
                continue
            event = agent.next_event(tuple(steps))
            if isinstance(event, AgentDone):
                log.trace[-1] = RoundTrace(rnd, False, False, "done")
                log.termination = Termination.AGENT_DONE
                log.success = event.success
                return log
            if isinstance(event, AgentAct):
                log.trace[-1] = RoundTrace(rnd, False, False, "act")
                commit(SpeakerRole.DRIVER, event.event, StepRecord("agent"))
                idle = 0
                continue
            log.trace[-1] = RoundTrace(rnd, False, False, "idle")
            idle += 1
            if idle >= limits.max_consecutive_observes:
                user_turn(rnd, forced=True)
                idle = 0
    except Exception as exc:
        raise SimulationAborted(f"simulation aborted after {len(steps)} steps: {exc}", log) from exc
    log.termination = Termination.STEP_CAP
    return log


class ReplayAgent:
    """Replays the driver side of a gold session.

    The agent walks the gold steps in order. Gold commander steps are waiting
    points: the agent stays idle until the user has spoken, consuming one gold
    commander step per user utterance since its previous call.
    """

    def __init__(self, session: Session):
        self.gold = session.steps
        self.pos = 0
        self._seen = 0

    def next_event(self, history: Sequence[Step]) -> AgentEvent:
        new = history[self._seen:]
        self._seen = len(history)
        credit = sum(1 for s in new if s.actor is SpeakerRole.COMMANDER)
        while self.pos < len(self.gold):
            step = self.gold[self.pos]
            if step.actor is SpeakerRole.DRIVER:
                self.pos += 1
                self._seen += 1
                return AgentAct(step.action)
            if credit == 0:
                return AgentIdle()
            credit -= 1
            self.pos += 1
        return AgentDone(True)


def replay_agent(session: Session) -> ReplayAgent:
    return ReplayAgent(session)


class IdleAgent:
    def next_event(self, history):
        return AgentIdle()


class HttpAgent:
    """Agent adapter over HTTP.

    Each call POSTs ``{"history": [{"actor", "payload"}, ...]}`` to ``url``
    and expects ``{"type": "act", "payload": "<pickup Mug>"}``,
    ``{"type": "idle"}`` or ``{"type": "done", "success": true}``. Payloads
    use the transcript notation.
    """

    def __init__(self, url: str, timeout: float = 30.0, transport: Optional[httpx.BaseTransport] = None):
        self.url = url
        self._http = httpx.Client(timeout=timeout, transport=transport)

    def next_event(self, history: Sequence[Step]) -> AgentEvent:
        body = {"history": [{"actor": s.actor.value, "payload": render_payload(s.action)} for s in history]}
        try:
            resp = self._http.post(self.url, json=body)
            resp.raise_for_status()
            data = resp.json()
        except (httpx.HTTPError, ValueError) as exc:
            raise AgentConnectionError(f"agent at {self.url} failed: {exc}") from exc
        kind = data.get("type")
        if kind == "idle":
            return AgentIdle()
        if kind == "done":
            return AgentDone(bool(data.get("success", True)))
        if kind == "act":
            event = parse_payload(data["payload"])
            if not isinstance(event, (Speak, Physical)):
                raise AgentConnectionError(f"agent returned a non-action payload {data['payload']!r}")
            return AgentAct(event)
        raise AgentConnectionError(f"agent returned unknown event type {kind!r}")
