"""Replay evaluation against gold sessions.

Every step of every (transformed) gold session is a prediction point: the
policy sees the steps before it and decides whether the user speaks there.
Timing is scored with Speak-F1 (positive class = speak), broken down by what
the robot did at the previous step. Content is scored at gold user turns
only; when the policy chose to observe at such a point it is asked again with
observing forbidden, so what-to-say is judged independently of when-to-speak.
"""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from usersim.corpus import Corpus
from usersim.model import Session, Speak, SpeakerRole, Step, UserDecision
from usersim.policies import FORCED, FREE, Policy, ResponseParseError, parse_llm_response
from usersim.prompting import gold_decision
from usersim.taxonomy import ALL_ACTS, DialogueAct, parse_act
from usersim.transforms import TransformSpec, apply_transform

log = logging.getLogger(__name__)

REPORT_VERSION = 1


class PrevRobot(str, Enum):
    PHYSICAL = "Physical"
    OBSERVE = "Observe"
    SPEAK = "Speak"
    SESSION_START = "SessionStart"


BUCKET_LABELS = {
    PrevRobot.PHYSICAL: "P: R action",
    PrevRobot.OBSERVE: "P: R observe",
    PrevRobot.SPEAK: "P: R speak",
}


class EvaluationAborted(RuntimeError):
    def __init__(self, message: str, checkpoint: Optional[Path], done: int):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.done = done


@dataclass(frozen=True)
class PredictionPoint:
    session_id: str
    index: int
    goal: str
    gold: UserDecision
    context: tuple[Step, ...]
    prev_robot: PrevRobot

    @property
    def key(self) -> str:
        return f"{self.session_id}:{self.index}"


def prev_robot_of(steps: Sequence[Step], index: int) -> PrevRobot:
    if index == 0:
        return PrevRobot.SESSION_START
    prev = steps[index - 1]
    if prev.actor is SpeakerRole.COMMANDER:
        return PrevRobot.OBSERVE
    if isinstance(prev.action, Speak):
        return PrevRobot.SPEAK
    return PrevRobot.PHYSICAL


def session_points(session: Session) -> list[PredictionPoint]:
    return [
        PredictionPoint(session.id, i, session.goal, gold_decision(step), session.steps[:i],
                        prev_robot_of(session.steps, i))
        for i, step in enumerate(session.steps)
    ]


def enumerate_points(corpus: Corpus | Iterable[Session], transform: TransformSpec = TransformSpec()) -> list[PredictionPoint]:
    points = []
    for session in sorted(corpus, key=lambda s: s.id):
        points.extend(session_points(apply_transform(session, transform)))
    return points


# -- metrics -----------------------------------------------------------------


@dataclass(frozen=True)
class PRF:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def support(self) -> int:
        return self.tp + self.fn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn,
                "precision": self.precision, "recall": self.recall, "f1": self.f1}

    @classmethod
    def from_dict(cls, d: Mapping) -> PRF:
        return cls(int(d["tp"]), int(d["fp"]), int(d["fn"]))


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


@dataclass(frozen=True)
class SpeakSection:
    overall: PRF
    buckets: Mapping[PrevRobot, PRF]

    def to_dict(self) -> dict:
        return {"overall": self.overall.to_dict(),
                "buckets": {k.value: v.to_dict() for k, v in self.buckets.items()}}

    @classmethod
    def from_dict(cls, d: Mapping) -> SpeakSection:
        return cls(PRF.from_dict(d["overall"]),
                   {PrevRobot(k): PRF.from_dict(v) for k, v in d["buckets"].items()})


@dataclass(frozen=True)
class DASection:
    per_act: Mapping[DialogueAct, PRF]
    micro: PRF
    n_points: int
    any_overlap: int
    exact_match: int

    @property
    def macro_f1(self) -> float:
        scored = [v.f1 for v in self.per_act.values() if v.support > 0]
        return sum(scored) / len(scored) if scored else 0.0

    @property
    def weighted_f1(self) -> float:
        total = sum(v.support for v in self.per_act.values())
        return sum(v.f1 * v.support for v in self.per_act.values()) / total if total else 0.0

    @property
    def micro_f1(self) -> float:
        return self.micro.f1

    @property
    def accuracy(self) -> float:
        return self.any_overlap / self.n_points if self.n_points else 0.0

    @property
    def exact_accuracy(self) -> float:
        return self.exact_match / self.n_points if self.n_points else 0.0

    def averages(self) -> dict[str, float]:
        return {"micro": self.micro_f1, "macro": self.macro_f1, "weighted": self.weighted_f1}

    def to_dict(self) -> dict:
        return {
            "n_points": self.n_points,
            "micro": self.micro.to_dict(),
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
            "accuracy": self.accuracy,
            "exact_accuracy": self.exact_accuracy,
            "any_overlap": self.any_overlap,
            "exact_match": self.exact_match,
            "per_act": {a.value: dict(v.to_dict(), support=v.support, robot_typical=a.robot_typical)
                        for a, v in self.per_act.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> DASection:
        return cls(
            {parse_act(k): PRF.from_dict(v) for k, v in d["per_act"].items()},
            PRF.from_dict(d["micro"]),
            int(d["n_points"]),
            int(d["any_overlap"]),
            int(d["exact_match"]),
        )


def _check_aligned(points: Sequence, decisions: Sequence) -> None:
    if len(points) != len(decisions):
        raise ValueError(f"{len(points)} points but {len(decisions)} decisions")


def speak_metrics(points: Sequence[PredictionPoint], decisions: Sequence[UserDecision]) -> SpeakSection:
    _check_aligned(points, decisions)
    counts = {b: [0, 0, 0] for b in PrevRobot}
    for point, decision in zip(points, decisions):
        c = counts[point.prev_robot]
        if decision.is_speak and point.gold.is_speak:
            c[0] += 1
        elif decision.is_speak:
            c[1] += 1
        elif point.gold.is_speak:
            c[2] += 1
    overall = PRF(*(sum(c[i] for c in counts.values()) for i in range(3)))
    buckets = {b: PRF(*counts[b]) for b in BUCKET_LABELS}
    return SpeakSection(overall, buckets)


def confusion(points: Sequence[PredictionPoint], decisions: Sequence[UserDecision]) -> Confusion:
    _check_aligned(points, decisions)
    tp = fp = fn = tn = 0
    for point, decision in zip(points, decisions):
        if decision.is_speak:
            if point.gold.is_speak:
                tp += 1
            else:
                fp += 1
        elif point.gold.is_speak:
            fn += 1
        else:
            tn += 1
    return Confusion(tp, fp, fn, tn)


def da_metrics(points: Sequence[PredictionPoint], decisions: Sequence[UserDecision]) -> DASection:
    """Multi-label act scores over gold user turns; other points are ignored."""
    _check_aligned(points, decisions)
    tp: dict[DialogueAct, int] = {}
    fp: dict[DialogueAct, int] = {}
    fn: dict[DialogueAct, int] = {}
    n = overlap = exact = 0
    for point, decision in zip(points, decisions):
        if not point.gold.is_speak:
            continue
        n += 1
        gold, pred = set(point.gold.acts), set(decision.acts)
        overlap += bool(gold & pred)
        exact += gold == pred
        for a in gold & pred:
            tp[a] = tp.get(a, 0) + 1
        for a in pred - gold:
            fp[a] = fp.get(a, 0) + 1
        for a in gold - pred:
            fn[a] = fn.get(a, 0) + 1
    seen = set(tp) | set(fp) | set(fn)
    per_act = {a: PRF(tp.get(a, 0), fp.get(a, 0), fn.get(a, 0)) for a in ALL_ACTS if a in seen}
    micro = PRF(sum(tp.values()), sum(fp.values()), sum(fn.values()))
    return DASection(per_act, micro, n, overlap, exact)


# -- report ------------------------------------------------------------------


@dataclass
class EvalReport:
    speak: SpeakSection
    da: DASection
    confusion: Confusion
    n_points: int
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "report_version": REPORT_VERSION,
            "n_points": self.n_points,
            "speak": self.speak.to_dict(),
            "da": self.da.to_dict(),
            "confusion": self.confusion.to_dict(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> EvalReport:
        if d.get("report_version") != REPORT_VERSION:
            raise ValueError(f"unsupported report_version {d.get('report_version')!r}")
        c = d["confusion"]
        return cls(
            SpeakSection.from_dict(d["speak"]),
            DASection.from_dict(d["da"]),
            Confusion(int(c["tp"]), int(c["fp"]), int(c["fn"]), int(c["tn"])),
            int(d["n_points"]),
            dict(d.get("metadata") or {}),
        )

    def closest_averaging(self, target: float) -> tuple[str, float]:
        """DA-F1 averaging whose value is nearest ``target`` (a fraction)."""
        name, value = min(self.da.averages().items(), key=lambda kv: abs(kv[1] - target))
        return name, value


def build_report(points: Sequence[PredictionPoint], timing: Sequence[UserDecision],
                 content: Sequence[UserDecision], metadata: Optional[dict] = None) -> EvalReport:
    return EvalReport(
        speak_metrics(points, timing),
        da_metrics(points, content),
        confusion(points, timing),
        len(points),
        dict(metadata or {}),
    )


@dataclass(frozen=True)
class PointResult:
    timing: UserDecision
    content: UserDecision


def _evaluate_point(policy: Policy, point: PredictionPoint) -> PointResult:
    timing = policy.decide(point.goal, point.context, FREE, point_id=point.key)
    content = timing
    if point.gold.is_speak and timing.is_observe:
        content = policy.decide(point.goal, point.context, FORCED, point_id=point.key)
    return PointResult(timing, content)


def _decision_from_text(text: str) -> UserDecision:
    try:
        return parse_llm_response(text)
    except ResponseParseError as exc:
        raise ValueError(f"corrupt checkpoint entry {text!r}") from exc


def _load_checkpoint(path: Path) -> dict[str, PointResult]:
    done = {}
    if not path.exists():
        return done
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                done[rec["point"]] = PointResult(_decision_from_text(rec["timing"]),
                                                 _decision_from_text(rec["content"]))
    return done


def replay_evaluate(
    corpus: Corpus | Iterable[Session],
    policy: Policy,
    transform: TransformSpec = TransformSpec(),
    metadata: Optional[dict] = None,
    jobs: int = 1,
    checkpoint: Optional[str | Path] = None,
) -> EvalReport:
    points = enumerate_points(corpus, transform)
    ckpt = Path(checkpoint) if checkpoint else None
    results: dict[str, PointResult] = _load_checkpoint(ckpt) if ckpt else {}
    if results:
        log.info("resuming: %d of %d points already evaluated", len(results), len(points))
    todo = [p for p in points if p.key not in results]
    lock = threading.Lock()
    sink = open(ckpt, "a", encoding="utf-8") if ckpt else None

    def work(point: PredictionPoint) -> None:
        res = _evaluate_point(policy, point)
        with lock:
            results[point.key] = res
            if sink:
                sink.write(json.dumps({"point": point.key, "timing": res.timing.render(),
                                       "content": res.content.render()}) + "\n")
                sink.flush()

    try:
        if jobs <= 1:
            for p in todo:
                work(p)
        else:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                for fut in [pool.submit(work, p) for p in todo]:
                    fut.result()
    except Exception as exc:
        raise EvaluationAborted(f"evaluation stopped after {len(results)}/{len(points)} points: {exc}",
                                ckpt, len(results)) from exc
    finally:
        if sink:
            sink.close()
    ordered = [results[p.key] for p in points]
    meta = dict(metadata or {})
    meta.setdefault("policy", policy.describe())
    meta.setdefault("transform", transform.to_dict())
    return build_report(points, [r.timing for r in ordered], [r.content for r in ordered], meta)


# -- rendering ---------------------------------------------------------------


def _pct(x: float, digits: int = 1) -> str:
    return f"{100 * x:.{digits}f}%"


def render_table(report: EvalReport, omit_robot_acts: bool = False) -> str:
    s = report.speak
    lines = ["Speak-F1 by previous robot action",
             f"{'Condition':<14}{'Precision':>11}{'Recall':>9}{'F1':>9}{'Gold':>7}"]
    rows = [(BUCKET_LABELS[b], s.buckets[b]) for b in BUCKET_LABELS] + [("Overall", s.overall)]
    for label, prf in rows:
        lines.append(f"{label:<14}{_pct(prf.precision):>11}{_pct(prf.recall):>9}{_pct(prf.f1):>9}{prf.support:>7}")
    d = report.da
    lines += ["", f"DA-F1 over {d.n_points} gold user turns",
              f"{'Averaging':<14}{'DA-F1':>9}"]
    for name, value in d.averages().items():
        lines.append(f"{name:<14}{_pct(value, 2):>9}")
    lines += [f"{'DA accuracy':<14}{_pct(d.accuracy, 2):>9}  (any overlap)",
              f"{'DA exact':<14}{_pct(d.exact_accuracy, 2):>9}  (exact act set)",
              "", "Per-act F1 (* = usually a robot act)",
              f"{'Act':<42}{'Gold':>6}{'P':>9}{'R':>9}{'F1':>9}"]
    for act, prf in d.per_act.items():
        if omit_robot_acts and act.robot_typical:
            continue
        name = act.value + ("*" if act.robot_typical else "")
        lines.append(f"{name:<42}{prf.support:>6}{_pct(prf.precision):>9}{_pct(prf.recall):>9}{_pct(prf.f1):>9}")
    c = report.confusion
    lines += ["", "Speak/observe confusion",
              f"{'':<16}{'gold speak':>12}{'gold observe':>14}",
              f"{'pred speak':<16}{c.tp:>12}{c.fp:>14}",
              f"{'pred observe':<16}{c.fn:>12}{c.tn:>14}"]
    return "\n".join(lines) + "\n"


def render_report(report: EvalReport, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if fmt == "table":
        return render_table(report)
    raise ValueError(f"unknown report format {fmt!r}")


def _run_label(report: EvalReport) -> tuple[str, str]:
    meta = report.metadata
    policy = meta.get("policy", {})
    name = policy.get("name", "?")
    if name == "llm":
        name = f"{policy.get('model_id', 'llm')}-{policy.get('prompt', {}).get('mode', '?').upper()}"
    return name, meta.get("transform", {}).get("mode", "none")


def render_comparison(reports: Sequence[EvalReport]) -> str:
    """Speak-F1 / DA-F1 / DA accuracy per run, one row per policy, one column group per transform."""
    transforms: list[str] = []
    table: dict[str, dict[str, EvalReport]] = {}
    for r in reports:
        name, tmode = _run_label(r)
        if tmode not in transforms:
            transforms.append(tmode)
        table.setdefault(name, {})[tmode] = r
    metrics = [("Speak-F1", lambda r: r.speak.overall.f1), ("DA-F1", lambda r: r.da.micro_f1),
               ("DA-acc", lambda r: r.da.accuracy)]
    header = f"{'Run':<20}" + "".join(f"{m + ' ' + t:>24}" for m, _ in metrics for t in transforms)
    lines = [header]
    for name, by_t in table.items():
        cells = []
        for _, fn in metrics:
            for t in transforms:
                cells.append(f"{_pct(fn(by_t[t]), 2) if t in by_t else '-':>24}")
        lines.append(f"{name:<20}" + "".join(cells))
    return "\n".join(lines) + "\n"
