"""Converter from TEACh game files plus dialogue-act annotations.

Expected inputs (best effort against the public release):

* game files ``<split>/<game_id>.game.json`` holding ``tasks[0].desc`` and
  ``tasks[0].episodes[0].interactions``; each interaction has ``agent_id``
  (0 commander, 1 driver), ``action_id`` and, depending on the action,
  ``utterance`` or ``oid``. Action names come from the file's
  ``definitions.actions`` when present, else from the built-in table.
* annotation files (``*.json``) mapping ``game_id`` to either a list of act
  lists (one per utterance, in order) or a mapping from interaction index to
  an act list. Interactions may also carry acts inline under ``das``,
  ``dialog_acts`` or ``acts``.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

from usersim.corpus import Corpus, check_session
from usersim.model import ActionEvent, Physical, Session, Speak, SpeakerRole, renumber
from usersim.taxonomy import parse_act

log = logging.getLogger(__name__)

DEFAULT_ACTIONS: dict[int, tuple[str, str]] = {
    0: ("Stop", "Motion"),
    1: ("Move to", "Motion"),
    2: ("Forward", "Motion"),
    3: ("Backward", "Motion"),
    4: ("Turn Left", "Motion"),
    5: ("Turn Right", "Motion"),
    6: ("Look Up", "Motion"),
    7: ("Look Down", "Motion"),
    8: ("Pan Left", "Motion"),
    9: ("Pan Right", "Motion"),
    10: ("Move Up", "Motion"),
    11: ("Move Down", "Motion"),
    12: ("Double Forward", "Motion"),
    13: ("Double Backward", "Motion"),
    100: ("Text", "Text"),
    101: ("Speech", "Text"),
    200: ("Pickup", "ObjectInteraction"),
    201: ("Place", "ObjectInteraction"),
    202: ("Open", "ObjectInteraction"),
    203: ("Close", "ObjectInteraction"),
    204: ("ToggleOn", "ObjectInteraction"),
    205: ("ToggleOff", "ObjectInteraction"),
    206: ("Slice", "ObjectInteraction"),
    207: ("Dirty", "ObjectInteraction"),
    208: ("Clean", "ObjectInteraction"),
    209: ("Fill", "ObjectInteraction"),
    210: ("Empty", "ObjectInteraction"),
    211: ("Pour", "ObjectInteraction"),
    212: ("Break", "ObjectInteraction"),
    300: ("Navigation", "ChangeCamera"),
    500: ("OpenProgressCheck", "ProgressCheck"),
    501: ("SelectOid", "ProgressCheck"),
    502: ("SearchObject", "ProgressCheck"),
}

# manipulation names as they appear in transcripts
VERB_NAMES = {
    "Pickup": "pickup",
    "Place": "putdown",
    "ToggleOn": "toggle on",
    "ToggleOff": "toggle off",
}

SPLIT_NAMES = {
    "train": "train",
    "valid_seen": "valid-seen",
    "valid_unseen": "valid-unseen",
    "test_seen": "test-seen",
    "test_unseen": "test-unseen",
}

_INLINE_ACT_KEYS = ("das", "dialog_acts", "acts")


class ConversionError(ValueError):
    pass


@dataclass
class IngestReport:
    ingested: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)
    dropped_interactions: int = 0


def _camel_words(name: str) -> str:
    return re.sub(r"(?<=[a-z])(?=[A-Z])", " ", name).lower()


def object_type(oid: str) -> str:
    """``Mug|+01.23|...`` -> ``Mug``."""
    return oid.split("|", 1)[0].split("_", 1)[0]


def _action_table(game: Mapping) -> dict[int, tuple[str, str]]:
    table = dict(DEFAULT_ACTIONS)
    for a in game.get("definitions", {}).get("actions", []) or []:
        try:
            table[int(a["action_id"])] = (a["action_name"], a.get("action_type", ""))
        except (KeyError, TypeError, ValueError):
            continue
    return table


def _clean_utterance(text: str) -> str:
    return " ".join(text.replace("<", " ").replace(">", " ").split())


def _acts_from(value) -> tuple:
    if isinstance(value, str):
        value = value.split(",")
    acts = tuple(dict.fromkeys(parse_act(v) for v in value if str(v).strip()))
    if not acts:
        raise ConversionError("empty act annotation")
    return acts


def convert_game(
    game: Mapping,
    game_id: str,
    annotations: Optional[object] = None,
    split: Optional[str] = None,
    report: Optional[IngestReport] = None,
) -> Session:
    try:
        task = game["tasks"][0]
        interactions = task["episodes"][0]["interactions"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ConversionError(f"missing tasks/episodes/interactions ({exc})") from exc
    goal = task.get("desc") or task.get("task_name") or ""
    table = _action_table(game)
    steps: list[tuple[SpeakerRole, ActionEvent]] = []
    utterance_no = 0
    for pos, it in enumerate(interactions):
        role = SpeakerRole.COMMANDER if int(it.get("agent_id", 1)) == 0 else SpeakerRole.DRIVER
        name, kind = table.get(int(it.get("action_id", -1)), ("", ""))
        if kind == "Text" or "utterance" in it:
            acts = None
            for k in _INLINE_ACT_KEYS:
                if k in it:
                    acts = _acts_from(it[k])
            if acts is None and isinstance(annotations, Mapping):
                raw = annotations.get(str(pos), annotations.get(pos))
                if raw is not None:
                    acts = _acts_from(raw)
            elif acts is None and isinstance(annotations, list) and utterance_no < len(annotations):
                acts = _acts_from(annotations[utterance_no])
            if acts is None:
                raise ConversionError(f"interaction {pos}: utterance has no dialogue-act annotation")
            utterance_no += 1
            steps.append((role, Speak(_clean_utterance(str(it.get("utterance", ""))), acts)))
        elif role is SpeakerRole.DRIVER and kind in ("Motion", "ObjectInteraction", "ChangeCamera"):
            if kind == "ObjectInteraction":
                verb = VERB_NAMES.get(name, _camel_words(name))
                target = object_type(it["oid"]) if it.get("oid") else None
                steps.append((role, Physical(verb, target)))
            else:
                steps.append((role, Physical(name)))
        else:
            # commander interface actions (progress checks, object search) and unknown ids
            if report is not None:
                report.dropped_interactions += 1
    return Session(game_id, goal, tuple(renumber(steps)), split)


def load_annotations(paths: Iterable[Path]) -> dict[str, object]:
    merged: dict[str, object] = {}
    for p in paths:
        with open(p, encoding="utf-8") as f:
            data = json.load(f)
        if not isinstance(data, Mapping):
            raise ConversionError(f"{p}: annotation file must map game ids to acts")
        for gid, value in data.items():
            merged[_game_id(gid)] = value
    return merged


def _game_id(name: str) -> str:
    for suffix in (".game.json", ".json"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def _split_of(path: Path) -> Optional[str]:
    for part in reversed(path.parts[:-1]):
        if part in SPLIT_NAMES:
            return SPLIT_NAMES[part]
    return None


def ingest_teach(game_dir: str | Path, annotation_paths: Iterable[str | Path] = ()) -> tuple[Corpus, IngestReport]:
    game_dir = Path(game_dir)
    annotations = load_annotations(Path(p) for p in annotation_paths)
    report = IngestReport()
    sessions = []
    for path in sorted(game_dir.rglob("*.json")):
        gid = _game_id(path.name)
        try:
            with open(path, encoding="utf-8") as f:
                game = json.load(f)
            session = convert_game(game, gid, annotations.get(gid), _split_of(path.relative_to(game_dir)), report)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            report.failed[gid] = str(exc)
            log.warning("skipping %s: %s", path, exc)
            continue
        problems = check_session(session)
        if problems:
            report.failed[gid] = "; ".join(map(str, problems))
            continue
        sessions.append(session)
        report.ingested.append(gid)
    return Corpus(tuple(sessions)), report
