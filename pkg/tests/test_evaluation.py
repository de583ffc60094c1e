import json
import random

import pytest

from usersim.evaluation import (
    PRF,
    EvalReport,
    EvaluationAborted,
    PredictionPoint,
    PrevRobot,
    build_report,
    confusion,
    da_metrics,
    enumerate_points,
    render_comparison,
    render_report,
    replay_evaluate,
    speak_metrics,
)
from usersim.llm import ScriptedBackend
from usersim.model import UserDecision
from usersim.policies import LLMPolicy, MajorityPolicy, ReactivePolicy
from usersim.prompting import PromptMode, PromptSpec
from usersim.taxonomy import DialogueAct as A
from usersim.transforms import TransformMode, TransformSpec
import oracle

S, O = UserDecision.speak, UserDecision.observe


def pt(i, prev, gold):
    return PredictionPoint("h", i, "g", gold, (), prev)


# six hand-scored points: (prev robot, gold, timing decision, content decision)
HAND = [
    (PrevRobot.SESSION_START, O(), S([A.INSTRUCTION]), S([A.INSTRUCTION])),
    (PrevRobot.PHYSICAL, S([A.INSTRUCTION]), S([A.INSTRUCTION]), S([A.INSTRUCTION])),
    (PrevRobot.OBSERVE, S([A.DENY]), O(), S([A.AFFIRM])),
    (PrevRobot.SPEAK, S([A.GREETINGS, A.REQUEST_FOR_INSTRUCTION]), S([A.GREETINGS]), S([A.GREETINGS])),
    (PrevRobot.SPEAK, O(), O(), O()),
    (PrevRobot.PHYSICAL, O(), S([A.INSTRUCTION]), S([A.INSTRUCTION])),
]


def hand_report():
    points = [pt(i, prev, gold) for i, (prev, gold, _, _) in enumerate(HAND)]
    return build_report(points, [h[2] for h in HAND], [h[3] for h in HAND])


def test_hand_scored_speak():
    r = hand_report()
    assert r.confusion.to_dict() == {"tp": 2, "fp": 2, "fn": 1, "tn": 1}
    assert r.speak.overall == PRF(2, 2, 1)
    assert r.speak.overall.f1 == pytest.approx(4 / 7, abs=1e-12)
    assert r.speak.buckets[PrevRobot.PHYSICAL] == PRF(1, 1, 0)
    assert r.speak.buckets[PrevRobot.PHYSICAL].f1 == pytest.approx(2 / 3, abs=1e-12)
    assert r.speak.buckets[PrevRobot.OBSERVE] == PRF(0, 0, 1)
    assert r.speak.buckets[PrevRobot.SPEAK] == PRF(1, 0, 0)
    assert PrevRobot.SESSION_START not in r.speak.buckets


def test_hand_scored_da():
    da = hand_report().da
    assert da.n_points == 3
    assert da.per_act == {A.INSTRUCTION: PRF(1, 0, 0), A.REQUEST_FOR_INSTRUCTION: PRF(0, 0, 1),
                          A.GREETINGS: PRF(1, 0, 0), A.AFFIRM: PRF(0, 1, 0), A.DENY: PRF(0, 0, 1)}
    assert da.micro == PRF(2, 1, 2)
    assert da.micro_f1 == pytest.approx(4 / 7, abs=1e-12)
    assert da.macro_f1 == pytest.approx(0.5, abs=1e-12)
    assert da.weighted_f1 == pytest.approx(0.5, abs=1e-12)
    assert da.accuracy == pytest.approx(2 / 3) and da.exact_accuracy == pytest.approx(1 / 3)


def test_zero_denominators():
    assert PRF().f1 == 0.0 and PRF(0, 3, 0).precision == 0.0 and PRF(0, 0, 3).recall == 0.0
    empty = build_report([], [], [])
    assert empty.speak.overall.f1 == 0.0 and empty.da.macro_f1 == 0.0 and empty.da.accuracy == 0.0


def test_misaligned_inputs():
    with pytest.raises(ValueError):
        speak_metrics([pt(0, PrevRobot.SESSION_START, O())], [])


def test_against_oracle():
    rng = random.Random(1234)
    for _ in range(200):
        points, decisions = oracle.random_instance(rng)
        sp, da, cf = speak_metrics(points, decisions), da_metrics(points, decisions), confusion(points, decisions)
        tp, fp, fn, tn = oracle.speak_counts(points, decisions)
        assert (cf.tp, cf.fp, cf.fn, cf.tn) == (tp, fp, fn, tn)
        assert abs(sp.overall.f1 - oracle.f_score(tp, fp, fn)) <= 1e-12
        for bucket, prf in sp.buckets.items():
            assert (prf.tp, prf.fp, prf.fn) == oracle.speak_counts(points, decisions, bucket)[:3]
        per_act, micro, n, overlap, exact = oracle.da_counts(points, decisions)
        assert {a: (v.tp, v.fp, v.fn) for a, v in da.per_act.items()} == per_act
        assert (da.micro.tp, da.micro.fp, da.micro.fn) == micro
        assert (da.n_points, da.any_overlap, da.exact_match) == (n, overlap, exact)
        macro, weighted = oracle.da_averages(per_act)
        assert abs(da.macro_f1 - macro) <= 1e-12 and abs(da.weighted_f1 - weighted) <= 1e-12


def test_points_and_prev_robot(coffee, fixture_corpus):
    points = enumerate_points(fixture_corpus.select("valid-seen"))
    assert len(points) == 28
    assert [p.session_id for p in points[:17]] == ["books"] * 17
    cp = [p for p in points if p.session_id == "coffee"]
    assert [p.prev_robot for p in cp[:6]] == [PrevRobot.SESSION_START, PrevRobot.SPEAK, PrevRobot.OBSERVE,
                                              PrevRobot.OBSERVE, PrevRobot.SPEAK, PrevRobot.PHYSICAL]
    assert cp[3].context == coffee.steps[:3]
    moved = enumerate_points(fixture_corpus.select("valid-seen"), TransformSpec(TransformMode.EXCLUDE_MOVES))
    assert len(moved) == 28 - 5


def test_reactive_on_fixture(fixture_corpus):
    r = replay_evaluate(fixture_corpus.select("valid-seen"), ReactivePolicy())
    assert r.confusion.to_dict() == {"tp": 3, "fp": 4, "fn": 7, "tn": 14}
    assert r.speak.overall.f1 == pytest.approx(6 / 17, abs=1e-12)
    assert r.speak.buckets[PrevRobot.SPEAK].f1 == pytest.approx(0.6, abs=1e-12)
    assert r.speak.buckets[PrevRobot.PHYSICAL].f1 == 0.0
    assert r.speak.buckets[PrevRobot.OBSERVE].f1 == 0.0


def test_majority_on_fixture(fixture_corpus):
    policy = MajorityPolicy.from_corpus(fixture_corpus.select("train"))
    da = replay_evaluate(fixture_corpus.select("valid-seen"), policy).da
    assert da.micro_f1 == pytest.approx(3 / 10, abs=1e-12)
    assert da.macro_f1 == pytest.approx(1 / 13, abs=1e-12)
    assert da.weighted_f1 == pytest.approx(9 / 65, abs=1e-12)


def keyed_responder(request):
    tail = request.prompt.rsplit("Goal:", 1)[1]
    if "OBSERVE is not allowed" in tail:
        return "InformationOther"
    return "Instruction" if tail.rstrip().endswith(">>\nCOMMANDER response:") else "OBSERVE"


def test_parallel_equals_sequential(fixture_corpus):
    spec = PromptSpec(PromptMode.FEW_SHOT, rng_seed=3)
    reports = []
    for jobs in (1, 4):
        policy = LLMPolicy(ScriptedBackend(keyed_responder), spec, fixture_corpus.select("train"))
        reports.append(replay_evaluate(fixture_corpus, policy, jobs=jobs).to_dict())
    assert reports[0] == reports[1]


def test_checkpoint_resume(tmp_path, fixture_corpus):
    ckpt = tmp_path / "ck.jsonl"
    answers = ["OBSERVE"] * 10
    with pytest.raises(EvaluationAborted) as info:
        replay_evaluate(fixture_corpus, LLMPolicy(ScriptedBackend(answers)), checkpoint=ckpt)
    assert info.value.checkpoint == ckpt and 0 < info.value.done < 46
    done = len(ckpt.read_text().splitlines())
    backend = ScriptedBackend(keyed_responder)
    resumed = replay_evaluate(fixture_corpus, LLMPolicy(backend), checkpoint=ckpt)
    assert resumed.n_points == 46
    assert backend.calls < 46 + 15
    assert len(ckpt.read_text().splitlines()) == 46 and done == info.value.done


def test_report_round_trip_and_rendering():
    r = hand_report()
    r.metadata["config"] = {"policy": "hand"}
    again = EvalReport.from_dict(json.loads(render_report(r, "json")))
    assert again.to_dict() == r.to_dict()
    table = render_report(r, "table")
    for label in ("P: R action", "P: R observe", "P: R speak", "micro", "macro", "weighted", "gold speak"):
        assert label in table
    comparison = render_comparison([r, again])
    assert "Speak-F1 none" in comparison and "57.14%" in comparison
    with pytest.raises(ValueError):
        EvalReport.from_dict({"report_version": 0})


def test_closest_averaging():
    r = hand_report()
    assert r.closest_averaging(0.57)[0] == "micro"
    assert r.closest_averaging(0.49)[0] in ("macro", "weighted")
