"""User-decision policies.

A policy maps ``(goal, history, constraints)`` to a :class:`UserDecision`:
observe, or speak with one or more dialogue acts. History is the list of
steps so far; the decision is for the next step.
"""

from __future__ import annotations

import json
import logging
import random
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from usersim.corpus import Corpus
from usersim.llm import Backend, CompletionRequest, LLMError
from usersim.model import Session, Speak, SpeakerRole, Step, UserDecision
from usersim.prompting import (
    RESPONSE_LINE,
    FewShotExample,
    PromptMode,
    PromptSpec,
    build_prompt,
    prompt_hash,
    select_examples,
)
from usersim.taxonomy import Category, DialogueAct, UnknownActError, parse_act

log = logging.getLogger(__name__)

RETRY_SUFFIX = "Return only one word/phrase."
FORCED_SUFFIX = "OBSERVE is not allowed now. Return one dialogue act."


class PolicyError(RuntimeError):
    pass


class ResponseParseError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConstraints:
    forbid_observe: bool = False


FREE = PolicyConstraints()
FORCED = PolicyConstraints(forbid_observe=True)


class Policy:
    name = "policy"

    def decide(self, goal: str, history: Sequence[Step], constraints: PolicyConstraints = FREE,
               point_id: Optional[str] = None) -> UserDecision:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"name": self.name}


def _robot_spoke_last(history: Sequence[Step]) -> bool:
    return bool(history) and history[-1].actor is SpeakerRole.DRIVER and isinstance(history[-1].action, Speak)


def reactive_predict(history: Sequence[Step], constraints: PolicyConstraints = FREE,
                     act: DialogueAct = DialogueAct.INSTRUCTION) -> UserDecision:
    """Speak only right after the robot spoke."""
    if constraints.forbid_observe or _robot_spoke_last(history):
        return UserDecision.speak((act,), source="reactive")
    return UserDecision.observe(source="reactive")


class ReactivePolicy(Policy):
    name = "reactive"

    def __init__(self, act: DialogueAct = DialogueAct.INSTRUCTION):
        self.act = act

    def decide(self, goal, history, constraints=FREE, point_id=None):
        return reactive_predict(history, constraints, self.act)

    def describe(self):
        return {"name": self.name, "act": self.act.value}


def majority_act(sessions: Iterable[Session] | Corpus) -> DialogueAct:
    """Most frequent act over user speak turns; ties go to the smaller name."""
    counts: Counter[DialogueAct] = Counter()
    for s in sessions:
        for step in s.steps:
            if step.actor is SpeakerRole.COMMANDER and isinstance(step.action, Speak):
                counts.update(set(step.action.acts))
    if not counts:
        raise ValueError("no user speak turns to take a majority over")
    return min(counts, key=lambda a: (-counts[a], a.value))


class MajorityPolicy(ReactivePolicy):
    """Reactive timing; always speaks the majority act of a training split."""

    name = "majority"

    @classmethod
    def from_corpus(cls, sessions: Iterable[Session] | Corpus) -> MajorityPolicy:
        return cls(majority_act(sessions))


class ObservePolicy(Policy):
    """Never speaks unless forced."""

    name = "observe"

    def __init__(self, act: DialogueAct = DialogueAct.INSTRUCTION):
        self.act = act

    def decide(self, goal, history, constraints=FREE, point_id=None):
        if constraints.forbid_observe:
            return UserDecision.speak((self.act,), source=self.name)
        return UserDecision.observe(source=self.name)


class ScriptedPolicy(Policy):
    """Plays back a fixed list of decisions in order."""

    name = "scripted"

    def __init__(self, decisions: Iterable[UserDecision]):
        self._decisions = list(decisions)
        self._pos = 0

    @classmethod
    def from_session(cls, session: Session) -> ScriptedPolicy:
        """Decisions that reproduce the commander side of ``session``."""
        out = []
        for step in session.steps:
            if step.actor is SpeakerRole.COMMANDER and isinstance(step.action, Speak):
                out.append(UserDecision.speak(step.action.acts, step.action.utterance))
            else:
                out.append(UserDecision.observe())
        out.append(UserDecision.observe())
        return cls(out)

    def decide(self, goal, history, constraints=FREE, point_id=None):
        if self._pos >= len(self._decisions):
            raise PolicyError("scripted policy ran out of decisions")
        d = self._decisions[self._pos]
        self._pos += 1
        if constraints.forbid_observe and d.is_observe:
            raise PolicyError("scripted policy has no speak decision for a forced turn")
        return replace(d, source=self.name)


# -- LLM responses -----------------------------------------------------------

_WRAPPERS = "\"'`<>[](){}*"
_TRAILING = ".!?;:"


def parse_llm_response(text: str) -> UserDecision:
    s = text.strip()
    if s.startswith(RESPONSE_LINE):
        s = s[len(RESPONSE_LINE):]
    s = s.strip().strip(_WRAPPERS).strip().rstrip(_TRAILING).strip().strip(_WRAPPERS).strip()
    if not s:
        raise ResponseParseError(f"empty response {text!r}")
    if s.casefold() == "observe":
        return UserDecision.observe()
    try:
        acts = [parse_act(part) for part in s.split(",")]
    except UnknownActError as exc:
        raise ResponseParseError(f"cannot read a decision from {text!r}") from exc
    return UserDecision.speak(dict.fromkeys(acts))


class LLMPolicy(Policy):
    """Prompt a completion backend and parse its answer.

    An unreadable answer, or OBSERVE on a forced turn, is retried up to
    ``retries`` times with a correction appended to the prompt; after that the
    policy falls back to observing, or to ``fallback_act`` on a forced turn.
    """

    name = "llm"

    def __init__(
        self,
        client: Backend,
        spec: PromptSpec = PromptSpec(),
        examples_corpus: Optional[Corpus] = None,
        model_id: str = "gpt-4",
        temperature: float = 0.0,
        max_tokens: int = 16,
        retries: int = 2,
        fallback_act: DialogueAct = DialogueAct.INSTRUCTION,
    ):
        self.client = client
        self.spec = spec
        self.examples_corpus = examples_corpus
        self.model_id = model_id
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.retries = retries
        self.fallback_act = fallback_act
        self.examples: Optional[list[FewShotExample]] = None
        if spec.mode is PromptMode.FEW_SHOT:
            if examples_corpus is None:
                raise ValueError("few-shot prompting needs an examples corpus")
            if not spec.resample_per_query:
                self.examples = select_examples(examples_corpus, spec)

    def prompt_for(self, goal: str, history: Sequence[Step], point_id: Optional[str] = None) -> str:
        examples = self.examples
        if self.spec.mode is PromptMode.FEW_SHOT and examples is None:
            seed = random.Random(f"{self.spec.rng_seed}:{point_id}:{len(history)}").getrandbits(32)
            examples = select_examples(self.examples_corpus, self.spec, seed=seed)
        return build_prompt(self.spec, goal, history, examples, self.examples_corpus)

    def decide(self, goal, history, constraints=FREE, point_id=None):
        prompt = self.prompt_for(goal, history, point_id)
        digest = prompt_hash(prompt)
        current = prompt
        for attempt in range(self.retries + 1):
            request = CompletionRequest(current, self.model_id, self.temperature, self.max_tokens)
            try:
                text = self.client.complete(request)
            except LLMError as exc:
                raise PolicyError(f"completion failed (prompt {digest}, point {point_id}): {exc}") from exc
            try:
                decision = parse_llm_response(text)
            except ResponseParseError:
                suffix = RETRY_SUFFIX
            else:
                if not (constraints.forbid_observe and decision.is_observe):
                    source = "llm" if attempt == 0 else f"llm-retry{attempt}"
                    return replace(decision, source=source, prompt_hash=digest)
                suffix = FORCED_SUFFIX
            current = f"{current}\n{text.strip()}\n{suffix}\n{RESPONSE_LINE}"
        log.info("falling back after %d unusable answers (prompt %s, point %s)", self.retries + 1, digest, point_id)
        if constraints.forbid_observe:
            return UserDecision.speak((self.fallback_act,), source="llm-fallback", prompt_hash=digest)
        return UserDecision.observe(source="llm-fallback", prompt_hash=digest)

    def describe(self):
        return {
            "name": self.name,
            "model_id": self.model_id,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "retries": self.retries,
            "fallback_act": self.fallback_act.value,
            "prompt": self.spec.to_dict(),
            "examples": [
                {"session": e.source_session_id, "prefix_length": e.prefix_length, "answer": e.answer.render()}
                for e in (self.examples or [])
            ],
        }


# -- utterance templates -----------------------------------------------------

CATEGORY_STUBS = {
    Category.INSTRUCTION: "please continue with the task",
    Category.OBJECT_LOCATION: "it should be around there",
    Category.GENERIC: "okay",
    Category.FEEDBACK: "let me check that",
    Category.INTERFACE: "i am not sure how that works",
}


@dataclass
class TemplateStore:
    """Gold user utterances grouped by their ordered act set, with counts."""

    templates: dict[tuple[DialogueAct, ...], Counter] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.templates)

    def total(self) -> int:
        return sum(sum(c.values()) for c in self.templates.values())

    def add(self, acts: Sequence[DialogueAct], utterance: str) -> None:
        self.templates.setdefault(tuple(acts), Counter())[utterance] += 1

    def to_dict(self) -> dict:
        return {
            "templates": [
                {"acts": [a.value for a in key], "utterances": dict(sorted(c.items()))}
                for key, c in sorted(self.templates.items(), key=lambda kv: [a.value for a in kv[0]])
            ]
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> TemplateStore:
        store = cls()
        for item in data["templates"]:
            key = tuple(parse_act(a) for a in item["acts"])
            if not key or not item["utterances"]:
                raise ValueError("template entries need acts and at least one utterance")
            store.templates[key] = Counter({u: int(n) for u, n in item["utterances"].items()})
        return store

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> TemplateStore:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_template_store(sessions: Iterable[Session] | Corpus) -> TemplateStore:
    store = TemplateStore()
    for s in sessions:
        for step in s.steps:
            if step.actor is SpeakerRole.COMMANDER and isinstance(step.action, Speak) and step.action.utterance:
                store.add(step.action.acts, step.action.utterance)
    if not store.templates:
        raise ValueError("no user utterances to build templates from")
    return store


def realize(acts: Sequence[DialogueAct], store: Optional[TemplateStore], rng_seed: int = 0) -> str:
    """Pick an utterance for ``acts``: exact act set, else first act, else a stub."""
    acts = tuple(acts)
    if store is not None:
        for key in (acts, acts[:1]):
            counter = store.templates.get(key)
            if counter:
                texts = sorted(counter)
                return random.Random(rng_seed).choices(texts, weights=[counter[t] for t in texts])[0]
    return CATEGORY_STUBS[acts[0].category]
