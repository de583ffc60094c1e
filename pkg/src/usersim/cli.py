"""Command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 usage error.

Options can also come from a flat ``key = value`` config file given with
``--config``; flags on the command line override file values, and
``--print-config`` shows the effective settings.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from usersim.corpus import Corpus, CorpusError, corpus_stats, load_corpus, load_fixture, save_corpus
from usersim.evaluation import (
    EvalReport,
    EvaluationAborted,
    render_comparison,
    render_report,
    replay_evaluate,
)
from usersim.llm import (
    CachingBackend,
    LLMError,
    RemoteBackend,
    ResponseCache,
    ScriptedBackend,
)
from usersim.policies import (
    LLMPolicy,
    MajorityPolicy,
    ObservePolicy,
    Policy,
    PolicyError,
    ReactivePolicy,
    TemplateStore,
    build_template_store,
    majority_act,
)
from usersim.prompting import PromptError, PromptMode, PromptSpec, build_prompt, select_examples
from usersim.simulation import (
    AgentConnectionError,
    HttpAgent,
    IdleAgent,
    SimLimits,
    SimulationAborted,
    replay_agent,
    run_session,
)
from usersim.taxonomy import DialogueAct, parse_act, registry_records
from usersim.teach import ingest_teach
from usersim.transforms import DEFAULT_MOVE_VERBS, DEFAULT_QUESTION_ACTS, TransformMode, TransformSpec, apply_transform

log = logging.getLogger("usersim")

POLICIES = ("reactive", "majority", "observe", "llm")
CACHE_FILE = "responses.jsonl"


class UsageError(Exception):
    pass


def read_config_file(path: str) -> dict[str, str]:
    values = {}
    with open(path, encoding="utf-8") as f:
        for no, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{no}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


# -- shared option groups ------------------------------------------------------


def _add_corpus(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", help="canonical corpus file (default: bundled fixture)")
    p.add_argument("--split", help="split to use (default: all sessions)")


def _add_transform(p: argparse.ArgumentParser) -> None:
    p.add_argument("--transform", choices=[m.value for m in TransformMode], default="none")
    p.add_argument("--move-verbs", help="comma-separated move verbs")
    p.add_argument("--question-acts", help="comma-separated robot question acts")


def _add_policy(p: argparse.ArgumentParser) -> None:
    p.add_argument("--policy", default="reactive", help="|".join(POLICIES))
    p.add_argument("--mode", choices=[m.value for m in PromptMode], default="zs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-examples", type=int, default=5)
    p.add_argument("--resample-per-query", action="store_true")
    p.add_argument("--examples-split", default="train", help="split examples and majority act come from")
    p.add_argument("--model", default="gpt-4")
    p.add_argument("--base-url", help="chat-completion endpoint base URL")
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--max-tokens", type=int, default=16)
    p.add_argument("--cache-dir", help="directory holding the response cache")
    p.add_argument("--offline", action="store_true", help="serve only from the cache")
    p.add_argument("--scripted-responses", help="JSON list of canned completions")
    p.add_argument("--max-in-flight", type=int, default=4)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="usersim", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--print-config", action="store_true", help="print effective settings and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["ingest"] = sub.add_parser("ingest", help="convert TEACh game files to the canonical corpus")
    p.add_argument("--games", required=True, help="directory of TEACh game files")
    p.add_argument("--annotations", action="append", default=[], help="dialogue-act annotation file (repeatable)")
    p.add_argument("--out", required=True)

    p = subs["stats"] = sub.add_parser("stats", help="corpus statistics")
    _add_corpus(p)
    p.add_argument("--json", action="store_true")

    p = subs["dump-prompt"] = sub.add_parser("dump-prompt", help="write the exact prompt for one prediction point")
    _add_corpus(p)
    _add_transform(p)
    _add_policy(p)
    p.add_argument("--session", required=True)
    p.add_argument("--step", type=int, help="predict this step (default: after the last step)")
    p.add_argument("--out")

    p = subs["evaluate"] = sub.add_parser("evaluate", help="replay evaluation against gold sessions")
    _add_corpus(p)
    _add_transform(p)
    _add_policy(p)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--checkpoint", help="per-point results file for resuming")
    p.add_argument("--reference-da-f1", type=float, help="record which DA-F1 averaging is closest to this value (%%)")
    p.add_argument("--out", required=True, help="output directory")

    p = subs["simulate"] = sub.add_parser("simulate", help="run a live session against an agent")
    _add_corpus(p)
    _add_policy(p)
    p.add_argument("--agent", choices=["replay", "idle", "http"], default="replay")
    p.add_argument("--agent-url")
    p.add_argument("--session", help="gold session to replay (replay agent) or take the goal from")
    p.add_argument("--goal")
    p.add_argument("--max-steps", type=int, default=500)
    p.add_argument("--max-observes", type=int, default=10)
    p.add_argument("--templates", help="template store file (default: built from the examples split)")
    p.add_argument("--out", required=True)

    p = subs["cache"] = sub.add_parser("cache", help="export or import the response cache")
    p.add_argument("action", choices=["export", "import"])
    p.add_argument("--cache-dir", required=True)
    p.add_argument("--file", required=True)

    p = subs["report"] = sub.add_parser("report", help="render saved reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--format", choices=["table", "json", "compare"], default="table")

    p = subs["taxonomy"] = sub.add_parser("taxonomy", help="export the dialogue-act registry")
    p.add_argument("--out")
    return parser, subs


def parse_args(argv: Optional[Sequence[str]]) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            values = read_config_file(known.config)
        except (OSError, UsageError) as exc:
            parser.error(str(exc))
        for sp in subs.values():
            dests = {a.dest: a for a in sp._actions}
            defaults = {}
            for k, v in values.items():
                if k not in dests:
                    continue
                act = dests[k]
                if act.nargs == 0:
                    defaults[k] = v.lower() in ("1", "true", "yes", "on")
                elif isinstance(act, argparse._AppendAction):
                    defaults[k] = [x.strip() for x in v.split(",") if x.strip()]
                else:
                    defaults[k] = v
            sp.set_defaults(**defaults)
            # a required option satisfied by the config file is no longer required
            for k in defaults:
                dests[k].required = False
    args = parser.parse_args(argv)
    if args.command in ("evaluate", "simulate", "dump-prompt") and args.policy not in POLICIES:
        subs[args.command].error(f"unknown policy {args.policy!r} (choose from {', '.join(POLICIES)})")
    return args


def run_config(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("print_config", "verbose", "config")}


# -- builders ------------------------------------------------------------------


def _corpus(args) -> Corpus:
    return load_corpus(args.corpus) if args.corpus else load_fixture()


def _transform(args) -> TransformSpec:
    verbs = DEFAULT_MOVE_VERBS
    acts = DEFAULT_QUESTION_ACTS
    if getattr(args, "move_verbs", None):
        verbs = frozenset(v.strip() for v in args.move_verbs.split(",") if v.strip())
    if getattr(args, "question_acts", None):
        acts = frozenset(parse_act(a) for a in args.question_acts.split(",") if a.strip())
    return TransformSpec(TransformMode(getattr(args, "transform", "none")), verbs, acts)


def _examples_corpus(corpus: Corpus, args, transform: TransformSpec) -> Corpus:
    source = corpus.select(args.examples_split) if args.examples_split in corpus.split_index else Corpus(())
    return Corpus(tuple(apply_transform(s, transform) for s in source.sessions))


def _backend(args):
    cache = ResponseCache(Path(args.cache_dir) / CACHE_FILE) if args.cache_dir else None
    upstream = None
    if args.scripted_responses:
        with open(args.scripted_responses, encoding="utf-8") as f:
            upstream = ScriptedBackend(json.load(f))
    elif not args.offline:
        if not args.base_url:
            raise UsageError("--policy llm needs --base-url, --scripted-responses or --offline with --cache-dir")
        upstream = RemoteBackend(args.base_url, max_in_flight=args.max_in_flight)
    if cache is None:
        if upstream is None:
            raise UsageError("--offline needs --cache-dir")
        return upstream, None
    return CachingBackend(cache, None if args.offline else upstream), cache


def build_policy(args, corpus: Corpus, transform: TransformSpec) -> tuple[Policy, Optional[ResponseCache]]:
    train = corpus.select(args.examples_split) if args.examples_split in corpus.split_index else Corpus(())
    if args.policy == "reactive":
        return ReactivePolicy(), None
    if args.policy == "observe":
        return ObservePolicy(), None
    if args.policy == "majority":
        if not len(train):
            raise UsageError(f"majority policy needs sessions in split {args.examples_split!r}")
        return MajorityPolicy.from_corpus(train), None
    backend, cache = _backend(args)
    try:
        fallback = majority_act(train)
    except ValueError:
        fallback = DialogueAct.INSTRUCTION
    spec = PromptSpec(PromptMode(args.mode), n_examples=args.n_examples, rng_seed=args.seed,
                      resample_per_query=args.resample_per_query)
    examples = _examples_corpus(corpus, args, transform) if spec.mode is PromptMode.FEW_SHOT else None
    policy = LLMPolicy(backend, spec, examples, model_id=args.model, temperature=args.temperature,
                       max_tokens=args.max_tokens, fallback_act=fallback)
    return policy, cache


# -- commands ------------------------------------------------------------------


def cmd_ingest(args) -> int:
    corpus, report = ingest_teach(args.games, args.annotations)
    for gid, reason in sorted(report.failed.items()):
        print(f"skipped {gid}: {reason}", file=sys.stderr)
    print(f"ingested {len(report.ingested)} session(s), skipped {len(report.failed)}, "
          f"dropped {report.dropped_interactions} non-dialogue commander interaction(s)")
    if not report.ingested:
        print("error: no sessions ingested", file=sys.stderr)
        return 1
    save_corpus(corpus, args.out)
    for split, ids in sorted(corpus.split_index.items()):
        print(f"  {split}: {len(ids)}")
    return 0


def cmd_stats(args) -> int:
    corpus = _corpus(args)
    stats = corpus_stats(corpus, args.split)
    if args.json:
        print(json.dumps(dict(stats.to_dict(), split=args.split), indent=2, sort_keys=True))
        return 0
    print(f"split: {args.split or 'all'}")
    print(f"sessions: {stats.n_sessions}")
    print(f"steps: {stats.n_steps}")
    print(f"user speak: {100 * stats.frac_user_speak:.1f}%")
    print(f"robot speak: {100 * stats.frac_robot_speak:.1f}%")
    print(f"robot physical: {100 * stats.frac_robot_physical:.1f}%")
    return 0


def cmd_dump_prompt(args) -> int:
    corpus = _corpus(args)
    transform = _transform(args)
    session = apply_transform(corpus.get(args.session), transform)
    step = len(session.steps) if args.step is None else args.step
    if not 0 <= step <= len(session.steps):
        raise UsageError(f"--step must lie in [0, {len(session.steps)}]")
    spec = PromptSpec(PromptMode(args.mode), n_examples=args.n_examples, rng_seed=args.seed)
    examples_corpus = _examples_corpus(corpus, args, transform) if spec.mode is PromptMode.FEW_SHOT else None
    examples = select_examples(examples_corpus, spec) if examples_corpus is not None else None
    text = build_prompt(spec, session.goal, session.steps[:step], examples, examples_corpus)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text + "\n")
    return 0


def cmd_evaluate(args) -> int:
    corpus = _corpus(args).select(args.split)
    full = _corpus(args)
    transform = _transform(args)
    policy, cache = build_policy(args, full, transform)
    jobs = 1 if args.scripted_responses else max(1, args.jobs)
    config = run_config(args)
    meta = {"config": config, "split": args.split, "seed": args.seed}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        report = replay_evaluate(corpus, policy, transform, metadata=meta, jobs=jobs, checkpoint=args.checkpoint)
    except EvaluationAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.checkpoint:
            print(f"resume with --checkpoint {exc.checkpoint}", file=sys.stderr)
        return 1
    if cache is not None:
        report.metadata["cache"] = cache.stats()
    if args.reference_da_f1 is not None:
        name, value = report.closest_averaging(args.reference_da_f1 / 100)
        report.metadata["da_reference"] = {"target": args.reference_da_f1, "closest_averaging": name, "value": value}
    (out / "report.json").write_text(render_report(report, "json"), encoding="utf-8")
    header = "# config: " + json.dumps(config, sort_keys=True) + "\n"
    (out / "report.txt").write_text(header + render_report(report, "table"), encoding="utf-8")
    sys.stdout.write(render_report(report, "table"))
    return 0


def cmd_simulate(args) -> int:
    corpus = _corpus(args)
    policy, _ = build_policy(args, corpus, TransformSpec())
    gold = corpus.get(args.session) if args.session else None
    goal = args.goal or (gold.goal if gold else None)
    if not goal:
        raise UsageError("simulate needs --goal or --session")
    if args.agent == "replay":
        if gold is None:
            raise UsageError("the replay agent needs --session")
        agent = replay_agent(gold)
    elif args.agent == "http":
        if not args.agent_url:
            raise UsageError("the http agent needs --agent-url")
        agent = HttpAgent(args.agent_url)
    else:
        agent = IdleAgent()
    if args.templates:
        store = TemplateStore.load(args.templates)
    else:
        train = corpus.select(args.examples_split) if args.examples_split in corpus.split_index else corpus
        try:
            store = build_template_store(train)
        except ValueError:
            store = None
    limits = SimLimits(args.max_steps, args.max_observes)
    sim_id = f"sim-{args.session or 'goal'}-{args.seed}"
    try:
        log_ = run_session(goal, policy, agent, limits, store, args.seed, session_id=sim_id)
    except SimulationAborted as exc:
        exc.log.save(args.out, run_config(args))
        print(f"error: {exc}; partial log written to {args.out}", file=sys.stderr)
        return 1
    paths = log_.save(args.out, run_config(args))
    print(f"{len(log_.session.steps)} steps, terminated by {log_.termination.value}")
    for kind, path in paths.items():
        print(f"  {kind}: {path}")
    return 0


def cmd_cache(args) -> int:
    cache = ResponseCache(Path(args.cache_dir) / CACHE_FILE)
    if args.action == "export":
        n = cache.export_cache(args.file)
        print(f"exported {n} entr{'y' if n == 1 else 'ies'}")
    else:
        merged, corrupt = cache.import_cache(args.file)
        print(f"merged {merged} entr{'y' if merged == 1 else 'ies'}, skipped {corrupt} corrupt record(s)")
    return 0


def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        with open(path, encoding="utf-8") as f:
            reports.append(EvalReport.from_dict(json.load(f)))
    if args.format == "compare":
        sys.stdout.write(render_comparison(reports))
    else:
        for r in reports:
            sys.stdout.write(render_report(r, args.format))
    return 0


def cmd_taxonomy(args) -> int:
    text = json.dumps(registry_records(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "stats": cmd_stats,
    "dump-prompt": cmd_dump_prompt,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "cache": cmd_cache,
    "report": cmd_report,
    "taxonomy": cmd_taxonomy,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_config:
        print("\n".join(f"{k} = {v}" for k, v in run_config(args).items()))
        return 0
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (OSError, CorpusError, PromptError, PolicyError, LLMError, AgentConnectionError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
