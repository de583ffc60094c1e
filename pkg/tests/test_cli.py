import json
import shutil
import subprocess
import sys

import pytest

from usersim.cli import main
from usersim.corpus import load_fixture, save_corpus
from conftest import DATA, GOLDEN

E2E_ARGS = ["evaluate", "--policy", "llm", "--mode", "fs", "--seed", "3", "--scripted-responses", "responses.json",
            "--cache-dir", "cache", "--jobs", "1", "--out", "out"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_stats_default_fixture(capsys):
    code, out, _ = run(capsys, "stats")
    assert code == 0
    assert "sessions: 3" in out and "steps: 46" in out
    assert "user speak: 32.6%" in out and "robot speak: 21.7%" in out and "robot physical: 45.7%" in out


def test_stats_json_split(capsys):
    code, out, _ = run(capsys, "stats", "--split", "valid-seen", "--json")
    data = json.loads(out)
    assert code == 0 and data["n_sessions"] == 2 and data["n_steps"] == 28 and data["split"] == "valid-seen"


def test_config_file_and_override(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nsplit = valid-seen\njson = true\n")
    code, out, _ = run(capsys, "--config", str(cfg), "stats")
    assert code == 0 and json.loads(out)["n_sessions"] == 2
    code, out, _ = run(capsys, "--config", str(cfg), "stats", "--split", "train")
    assert json.loads(out)["n_sessions"] == 1
    code, out, _ = run(capsys, "--config", str(cfg), "--print-config", "stats")
    assert code == 0 and "split = valid-seen" in out and "json = True" in out


def test_config_satisfies_required_option(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"out = {tmp_path / 'ev'}\npolicy = reactive\n")
    code, _, _ = run(capsys, "--config", str(cfg), "evaluate", "--split", "valid-seen")
    assert code == 0 and (tmp_path / "ev" / "report.json").exists()


def test_usage_errors(capsys, tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["evaluate", "--policy", "oracle", "--out", str(tmp_path)])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["nonsense"])
    assert info.value.code == 2
    code, _, err = run(capsys, "evaluate", "--policy", "llm", "--out", str(tmp_path))
    assert code == 2 and "base-url" in err
    bad = tmp_path / "bad.cfg"
    bad.write_text("no equals sign\n")
    with pytest.raises(SystemExit) as info:
        main(["--config", str(bad), "stats"])
    assert info.value.code == 2


def test_runtime_errors(capsys, tmp_path):
    code, _, err = run(capsys, "stats", "--corpus", str(tmp_path / "missing.jsonl"))
    assert code == 1 and "error" in err
    code, _, err = run(capsys, "evaluate", "--policy", "llm", "--offline", "--cache-dir", str(tmp_path / "c"),
                       "--out", str(tmp_path / "o"), "--jobs", "1", "--checkpoint", str(tmp_path / "ck.jsonl"))
    assert code == 1 and "--checkpoint" in err


def test_dump_prompt_matches_golden(tmp_path, capsys):
    out = tmp_path / "p.txt"
    assert run(capsys, "dump-prompt", "--session", "coffee", "--out", str(out))[0] == 0
    assert out.read_text() == (GOLDEN / "prompt_zs_coffee.txt").read_text()
    code, text, _ = run(capsys, "dump-prompt", "--session", "coffee", "--step", "3", "--mode", "fs", "--seed", "1")
    assert code == 0 and text.count("Example :") == 5
    code, _, _ = run(capsys, "dump-prompt", "--session", "coffee", "--step", "99")
    assert code == 2


def test_evaluate_reactive_and_majority(tmp_path, capsys):
    code, out, _ = run(capsys, "evaluate", "--policy", "reactive", "--split", "valid-seen", "--out", str(tmp_path / "r"))
    assert code == 0 and "P: R speak" in out
    rep = json.loads((tmp_path / "r" / "report.json").read_text())
    assert rep["confusion"] == {"tp": 3, "fp": 4, "fn": 7, "tn": 14}
    assert rep["metadata"]["config"]["policy"] == "reactive" and rep["metadata"]["seed"] == 0
    assert (tmp_path / "r" / "report.txt").read_text().startswith("# config: ")
    code, _, _ = run(capsys, "evaluate", "--policy", "majority", "--split", "valid-seen", "--reference-da-f1", "26.53",
                     "--out", str(tmp_path / "m"))
    rep = json.loads((tmp_path / "m" / "report.json").read_text())
    assert code == 0
    assert rep["metadata"]["da_reference"]["closest_averaging"] == "micro"
    assert rep["metadata"]["policy"] == {"name": "majority", "act": "Instruction"}


def test_evaluate_transform_flags(tmp_path, capsys):
    code, _, _ = run(capsys, "evaluate", "--transform", "no-moves", "--move-verbs", "Forward,Turn Left",
                     "--out", str(tmp_path))
    rep = json.loads((tmp_path / "report.json").read_text())
    # books: Forward x3, Turn Left x1; breakfast: Forward x2, Turn Left x1
    assert code == 0 and rep["n_points"] == 46 - 7
    assert rep["metadata"]["transform"]["move_verbs"] == ["Forward", "Turn Left"]


@pytest.fixture
def e2e_dir(tmp_path, monkeypatch):
    shutil.copy(DATA / "scripted_responses.json", tmp_path / "responses.json")
    monkeypatch.chdir(tmp_path)
    return tmp_path


def test_scripted_end_to_end_matches_frozen_report(e2e_dir, capsys):
    assert run(capsys, *E2E_ARGS)[0] == 0
    assert (e2e_dir / "out" / "report.json").read_bytes() == (GOLDEN / "scripted_fixture_report.json").read_bytes()
    assert (e2e_dir / "out" / "report.txt").read_bytes() == (GOLDEN / "scripted_fixture_report.txt").read_bytes()


def test_cached_reruns_are_byte_identical(e2e_dir, capsys):
    assert run(capsys, *E2E_ARGS)[0] == 0
    offline = E2E_ARGS[:-1] + ["replay", "--offline"]
    outputs = []
    for _ in range(2):
        assert run(capsys, *offline)[0] == 0
        outputs.append({p: (e2e_dir / "replay" / p).read_bytes() for p in ("report.json", "report.txt")})
    assert outputs[0] == outputs[1]
    live = json.loads((e2e_dir / "out" / "report.json").read_text())
    replay = json.loads(outputs[0]["report.json"])
    assert replay["confusion"] == live["confusion"] and replay["da"] == live["da"]


def test_cache_export_import(tmp_path, capsys, e2e_dir):
    run(capsys, *E2E_ARGS)
    code, out, _ = run(capsys, "cache", "export", "--cache-dir", "cache", "--file", "dump.jsonl")
    assert code == 0 and "exported" in out
    code, out, _ = run(capsys, "cache", "import", "--cache-dir", "other", "--file", "dump.jsonl")
    assert code == 0 and "skipped 0" in out
    assert (e2e_dir / "other" / "responses.jsonl").exists()


def test_report_command(tmp_path, capsys):
    for t in ("none", "no-moves"):
        run(capsys, "evaluate", "--transform", t, "--out", str(tmp_path / t))
    paths = [str(tmp_path / t / "report.json") for t in ("none", "no-moves")]
    code, out, _ = run(capsys, "report", "--format", "compare", *paths)
    assert code == 0 and "Speak-F1 none" in out and "Speak-F1 no-moves" in out
    code, out, _ = run(capsys, "report", paths[0])
    assert code == 0 and "Speak/observe confusion" in out


def test_taxonomy_export(tmp_path, capsys):
    code, out, _ = run(capsys, "taxonomy")
    assert code == 0 and len(json.loads(out)) == 18


def test_simulate_replay(tmp_path, capsys):
    code, out, _ = run(capsys, "simulate", "--session", "coffee", "--policy", "reactive", "--out", str(tmp_path))
    assert code == 0 and "terminated by AgentDone" in out
    meta = json.loads((tmp_path / "sim-coffee-0.meta.json").read_text())
    assert meta["config"]["policy"] == "reactive"
    code, _, _ = run(capsys, "simulate", "--goal", "Make toast.", "--agent", "idle", "--max-steps", "25",
                     "--max-observes", "5", "--policy", "observe", "--out", str(tmp_path / "idle"))
    assert code == 0
    log = (tmp_path / "idle" / "sim-goal-0.txt").read_text().splitlines()
    assert sum(1 for line in log if line.startswith("COMMANDER:") and "<observe>" not in line) == 5


def test_ingest(tmp_path, capsys):
    game = {"tasks": [{"desc": "Make coffee.", "episodes": [{"interactions": [
        {"agent_id": 0, "action_id": 100, "utterance": "make coffee", "das": ["Instruction"]},
        {"agent_id": 1, "action_id": 2}]}]}]}
    (tmp_path / "g" / "train").mkdir(parents=True)
    (tmp_path / "g" / "train" / "a.game.json").write_text(json.dumps(game))
    out = tmp_path / "c.jsonl"
    code, text, _ = run(capsys, "ingest", "--games", str(tmp_path / "g"), "--out", str(out))
    assert code == 0 and "ingested 1" in text and "train: 1" in text
    code, text, _ = run(capsys, "stats", "--corpus", str(out))
    assert "steps: 2" in text
    (tmp_path / "empty").mkdir()
    assert run(capsys, "ingest", "--games", str(tmp_path / "empty"), "--out", str(out))[0] == 1


def test_console_script_entry_point(tmp_path):
    corpus = tmp_path / "c.jsonl"
    save_corpus(load_fixture(), corpus)
    proc = subprocess.run([sys.executable, "-m", "usersim.cli", "stats", "--corpus", str(corpus)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "steps: 46" in proc.stdout
