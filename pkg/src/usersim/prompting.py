"""Zero-shot and few-shot prompt construction.

A prompt is the role description, the dialogue-act explanations, optional
worked examples, the task description and finally the scenario to answer::

    <role>

    <explanations>

    Example :            (few-shot only, one block per example)
    Goal: ...
    COMMANDER: ...
    DRIVER: ...
    COMMANDER response:
    OBSERVE

    <task>

    Goal: ...
    ...
    COMMANDER response:
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Optional, Sequence

from usersim.corpus import RESPONSE_LINE, Corpus, render_history, render_payload
from usersim.model import Session, Speak, SpeakerRole, Step, UserDecision
from usersim.taxonomy import explanation_block

TEMPLATE_VERSION = "v1"
EXAMPLE_HEADER = "Example :"


class PromptError(ValueError):
    pass


class SelectionInfeasibleError(PromptError):
    pass


class PromptMode(str, Enum):
    ZERO_SHOT = "zs"
    FEW_SHOT = "fs"


@dataclass(frozen=True)
class PromptSpec:
    mode: PromptMode = PromptMode.ZERO_SHOT
    n_examples: int = 5
    max_observe_answer_examples: int = 2
    max_observe_turn_fraction: float = 0.35
    rng_seed: int = 0
    redraw_limit: int = 1000
    # "per-example" checks the observe fraction of each example on its own;
    # "aggregate" checks it over all selected examples together
    observe_fraction_scope: str = "per-example"
    resample_per_query: bool = False
    template_version: str = TEMPLATE_VERSION

    def __post_init__(self):
        object.__setattr__(self, "mode", PromptMode(self.mode))
        if self.n_examples < 0:
            raise ValueError("n_examples must be >= 0")
        if not 0.0 <= self.max_observe_turn_fraction <= 1.0:
            raise ValueError("max_observe_turn_fraction must lie in [0, 1]")
        if self.observe_fraction_scope not in ("per-example", "aggregate"):
            raise ValueError(f"unknown observe_fraction_scope {self.observe_fraction_scope!r}")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "n_examples": self.n_examples,
            "max_observe_answer_examples": self.max_observe_answer_examples,
            "max_observe_turn_fraction": self.max_observe_turn_fraction,
            "rng_seed": self.rng_seed,
            "redraw_limit": self.redraw_limit,
            "observe_fraction_scope": self.observe_fraction_scope,
            "resample_per_query": self.resample_per_query,
            "template_version": self.template_version,
        }


@dataclass(frozen=True)
class FewShotExample:
    source_session_id: str
    prefix_length: int
    answer: UserDecision

    @property
    def observe_answer(self) -> bool:
        return self.answer.is_observe


@lru_cache(maxsize=None)
def load_template(name: str, version: str = TEMPLATE_VERSION) -> str:
    return resources.files("usersim").joinpath("templates", version, f"{name}.txt").read_text(encoding="utf-8")


def render_event_line(role: SpeakerRole, event) -> str:
    return f"{role.label}: {render_payload(event)}"


def gold_decision(step: Step) -> UserDecision:
    """What the commander did at this step."""
    if step.actor is SpeakerRole.COMMANDER and isinstance(step.action, Speak):
        return UserDecision.speak(step.action.acts, step.action.utterance)
    return UserDecision.observe()


def render_scenario(goal: str, history: Sequence[Step]) -> str:
    return "\n".join([f"Goal: {goal}", *render_history(history), RESPONSE_LINE])


def render_example(example: FewShotExample, corpus: Corpus | Session) -> str:
    session = corpus if isinstance(corpus, Session) else corpus.get(example.source_session_id)
    n = example.prefix_length
    if n < 0 or n >= len(session.steps):
        raise PromptError(
            f"prefix of {n} steps leaves no answer step in session {session.id!r} ({len(session.steps)} steps)"
        )
    return render_scenario(session.goal, session.steps[:n]) + "\n" + example.answer.render()


def _observe_count(session: Session, length: int) -> int:
    return sum(1 for s in session.steps[:length] if gold_decision(s).is_observe)


def select_examples(corpus: Corpus, spec: PromptSpec, seed: Optional[int] = None) -> list[FewShotExample]:
    """Draw ``spec.n_examples`` examples, redrawing any that break the limits.

    Each draw picks a session uniformly and an example length uniformly in
    ``[1, len(session)]``; the last step of the example is its answer and the
    steps before it are the shown prefix. Every step is a commander decision
    (speak, or observe while the driver acts).
    """
    rng = random.Random(spec.rng_seed if seed is None else seed)
    candidates = [s for s in corpus.sessions if s.steps]
    if spec.n_examples and not candidates:
        raise SelectionInfeasibleError("no non-empty sessions to draw examples from")
    chosen: list[FewShotExample] = []
    n_observe_answers = 0
    total_obs = total_decisions = 0
    redraws = 0
    while len(chosen) < spec.n_examples:
        session = rng.choice(candidates)
        length = rng.randint(1, len(session.steps))
        answer = gold_decision(session.steps[length - 1])
        obs = _observe_count(session, length)
        if spec.observe_fraction_scope == "per-example":
            frac_ok = obs / length <= spec.max_observe_turn_fraction
        else:
            frac_ok = (total_obs + obs) / (total_decisions + length) <= spec.max_observe_turn_fraction
        answer_ok = not answer.is_observe or n_observe_answers < spec.max_observe_answer_examples
        if frac_ok and answer_ok:
            chosen.append(FewShotExample(session.id, length - 1, answer))
            n_observe_answers += answer.is_observe
            total_obs += obs
            total_decisions += length
            continue
        redraws += 1
        if redraws > spec.redraw_limit:
            raise SelectionInfeasibleError(
                f"could not draw {spec.n_examples} examples within {spec.redraw_limit} redraws"
            )
    return chosen


def build_prompt(
    spec: PromptSpec,
    goal: str,
    history: Sequence[Step],
    examples: Optional[Sequence[FewShotExample]] = None,
    corpus: Optional[Corpus] = None,
) -> str:
    """Assemble the full prompt text.

    For few-shot prompts either pass pre-selected ``examples`` together with
    the ``corpus`` they come from, or only the corpus, in which case examples
    are selected with ``spec.rng_seed``.
    """
    parts = [load_template("role", spec.template_version), explanation_block()]
    if spec.mode is PromptMode.FEW_SHOT:
        if corpus is None:
            raise PromptError("few-shot prompts need a source corpus")
        if examples is None:
            examples = select_examples(corpus, spec)
        if len(examples) != spec.n_examples:
            raise PromptError(f"expected {spec.n_examples} examples, got {len(examples)}")
        parts.extend(f"{EXAMPLE_HEADER}\n{render_example(ex, corpus)}" for ex in examples)
    parts.append(load_template("task", spec.template_version))
    parts.append(render_scenario(goal, history))
    return "\n\n".join(parts)


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]
