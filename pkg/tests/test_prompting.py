from collections import Counter

import pytest

from usersim.corpus import Corpus
from usersim.model import Observe, Physical, Speak, SpeakerRole, UserDecision, make_session
from usersim.prompting import (
    EXAMPLE_HEADER,
    FewShotExample,
    PromptError,
    PromptMode,
    PromptSpec,
    SelectionInfeasibleError,
    build_prompt,
    gold_decision,
    load_template,
    render_event_line,
    render_example,
    select_examples,
)
from usersim.taxonomy import DialogueAct as A, parse_act
from usersim.transforms import TransformMode, TransformSpec, exclude_moves
from conftest import GOLDEN

ZS = PromptSpec(PromptMode.ZERO_SHOT)
FS = PromptSpec(PromptMode.FEW_SHOT)


def golden(name):
    return (GOLDEN / name).read_text(encoding="utf-8")


def test_event_lines():
    assert render_event_line(SpeakerRole.DRIVER, Physical("pickup", "Bread")) == "DRIVER: <pickup Bread>"
    assert render_event_line(SpeakerRole.COMMANDER, Observe()) == "COMMANDER: <observe>"
    text = "i would like the remote put on the side table"
    assert render_event_line(SpeakerRole.COMMANDER, Speak(text, (A.INSTRUCTION,))) == \
        f"COMMANDER: {text} <<Instruction>>"


def test_templates_match_frozen_text():
    assert load_template("role") == golden("role.txt").rstrip("\n")
    assert load_template("task") == golden("task.txt").rstrip("\n")


def test_zero_shot_golden(coffee):
    prompt = build_prompt(ZS, coffee.goal, coffee.steps)
    assert prompt == golden("prompt_zs_coffee.txt")
    assert prompt.endswith("COMMANDER response:")
    assert EXAMPLE_HEADER not in prompt


def test_breakfast_example_render(fixture_corpus):
    ex = FewShotExample("breakfast", 5, UserDecision.observe())
    expected = golden("breakfast_example.txt").rstrip("\n").split("\n", 1)[1]
    assert render_example(ex, fixture_corpus) == expected
    assert render_example(ex, fixture_corpus).endswith("COMMANDER response:\nOBSERVE")


def test_example_with_act_answer(breakfast):
    ex = FewShotExample("breakfast", 2, gold_decision(breakfast.steps[2]))
    assert render_example(ex, breakfast).endswith("COMMANDER response:\nInstruction")


def test_zero_length_prefix(breakfast):
    ex = FewShotExample("breakfast", 0, UserDecision.observe())
    assert render_example(ex, breakfast) == "Goal: Prepare breakfast.\nCOMMANDER response:\nOBSERVE"


def test_prefix_out_of_bounds(breakfast):
    with pytest.raises(PromptError):
        render_example(FewShotExample("breakfast", len(breakfast.steps), UserDecision.observe()), breakfast)


def test_few_shot_golden_breakfast_books(fixture_corpus, books):
    history = exclude_moves(books, TransformSpec(TransformMode.EXCLUDE_MOVES)).steps[:-1]
    spec = PromptSpec(PromptMode.FEW_SHOT, n_examples=1)
    ex = [FewShotExample("breakfast", 5, UserDecision.observe())]
    assert build_prompt(spec, books.goal, history, ex, fixture_corpus) == golden("prompt_fs_breakfast_books.txt")


def test_few_shot_seeded_golden(fixture_corpus, coffee):
    spec = PromptSpec(PromptMode.FEW_SHOT, rng_seed=7)
    prompt = build_prompt(spec, coffee.goal, coffee.steps[:3], corpus=fixture_corpus)
    assert prompt == golden("prompt_fs_seed7_coffee3.txt")
    assert prompt.count(EXAMPLE_HEADER) == 5
    assert build_prompt(spec, coffee.goal, coffee.steps[:3], corpus=fixture_corpus) == prompt


def test_act_names_in_prompts_parse(fixture_corpus, coffee):
    prompt = build_prompt(FS, coffee.goal, coffee.steps, corpus=fixture_corpus)
    for line in prompt.splitlines():
        if "<<" in line:
            for name in line[line.rfind("<<") + 2:-2].split(","):
                parse_act(name)


def test_wrong_example_count(fixture_corpus, coffee):
    with pytest.raises(PromptError):
        build_prompt(FS, coffee.goal, coffee.steps, [], fixture_corpus)
    with pytest.raises(PromptError):
        build_prompt(FS, coffee.goal, coffee.steps)


def _observe_fraction(corpus, ex):
    session = corpus.get(ex.source_session_id)
    prefix = session.steps[:ex.prefix_length + 1]
    return sum(gold_decision(s).is_observe for s in prefix) / len(prefix)


def test_selection_is_deterministic(fixture_corpus):
    assert select_examples(fixture_corpus, FS, seed=3) == select_examples(fixture_corpus, FS, seed=3)


def test_selection_constraints_over_seeds(fixture_corpus):
    for seed in range(1000):
        chosen = select_examples(fixture_corpus, FS, seed=seed)
        assert len(chosen) == 5
        assert sum(e.answer.is_observe for e in chosen) <= 2
        assert all(_observe_fraction(fixture_corpus, e) <= 0.35 for e in chosen)


def test_selection_answers_are_gold(fixture_corpus):
    for e in select_examples(fixture_corpus, FS, seed=11):
        step = fixture_corpus.get(e.source_session_id).steps[e.prefix_length]
        assert e.answer == gold_decision(step)


def test_selection_draws_lengths_uniformly():
    # one session of 4 user turns: every length is admissible, so draws are undisturbed
    s = make_session("u", "g", [(SpeakerRole.COMMANDER, Speak("go", (A.INSTRUCTION,)))] * 4)
    corpus = Corpus((s,))
    counts = Counter()
    for seed in range(400):
        counts.update(e.prefix_length for e in select_examples(corpus, FS, seed=seed))
    assert set(counts) == {0, 1, 2, 3}
    assert min(counts.values()) > 400


def test_all_observe_corpus_is_infeasible():
    s = make_session("o", "g", [(SpeakerRole.DRIVER, Physical("Forward"))] * 6)
    with pytest.raises(SelectionInfeasibleError):
        select_examples(Corpus((s,)), PromptSpec(PromptMode.FEW_SHOT, redraw_limit=50))


def test_aggregate_scope(fixture_corpus):
    spec = PromptSpec(PromptMode.FEW_SHOT, observe_fraction_scope="aggregate")
    for seed in range(50):
        chosen = select_examples(fixture_corpus, spec, seed=seed)
        lengths = [e.prefix_length + 1 for e in chosen]
        obs = [_observe_fraction(fixture_corpus, e) * n for e, n in zip(chosen, lengths)]
        assert sum(obs) / sum(lengths) <= 0.35 + 1e-12


def test_spec_validation():
    with pytest.raises(ValueError):
        PromptSpec(PromptMode.FEW_SHOT, n_examples=-1)
    with pytest.raises(ValueError):
        PromptSpec(PromptMode.FEW_SHOT, max_observe_turn_fraction=1.5)


def test_zero_examples(fixture_corpus, coffee):
    spec = PromptSpec(PromptMode.FEW_SHOT, n_examples=0)
    assert build_prompt(spec, coffee.goal, coffee.steps, corpus=fixture_corpus) == golden("prompt_zs_coffee.txt")
