"""Command-line entry point: ``persona-agent {bench,align,analyze,inspect}``."""

from __future__ import annotations

import argparse
import difflib
import json
import logging
import sys
from pathlib import Path

from persona_agent.agent import Persona, init_persona, load_persona, read_trajectory, save_persona
from persona_agent.alignment import AgentContext, align
from persona_agent.analysis import TOKENIZATION, export_embeddings, jaccard_matrix
from persona_agent.core import PersonaAgentError
from persona_agent.embedding import HashedTfIdfEncoder
from persona_agent.memory import (
    PERSONA_FILE,
    EpisodicBuffer,
    SummarizationPrompt,
    load_buffer,
    load_profile,
    save_buffer,
    save_profile,
    summarize_profile,
    user_dir,
)

log = logging.getLogger("persona_agent")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="persona-agent", description="Personalized LLM agent benchmark and analysis tools.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    b = sub.add_parser("bench", help="run an experiment from a TOML config")
    b.add_argument("--config", required=True, type=Path)

    a = sub.add_parser("align", help="align one user's persona and print the diff")
    a.add_argument("--config", required=True, type=Path)
    a.add_argument("--user", required=True)
    a.add_argument("--store", type=Path, help="store root (defaults to [run].store_root)")
    a.add_argument("--allow-self-retrieval", action="store_true")

    an = sub.add_parser("analyze", help="persona analysis")
    an_sub = an.add_subparsers(dest="analysis", parser_class=_Parser)
    s = an_sub.add_parser("similarity", help="Jaccard similarity matrix of stored personas")
    s.add_argument("--store", required=True, type=Path)
    s.add_argument("--out", type=Path)
    e = an_sub.add_parser("embeddings", help="export persona embeddings as CSV")
    e.add_argument("--store", required=True, type=Path)
    e.add_argument("--out", required=True, type=Path)
    e.add_argument("--dim", type=int, default=256)
    e.add_argument("--seed", type=int, default=0)

    i = sub.add_parser("inspect", help="pretty-print a trajectory file")
    i.add_argument("path", type=Path)
    return p


def _stored_personas(store: Path) -> list[Persona]:
    if not store.is_dir():
        raise PersonaAgentError(f"store {store} does not exist")
    return [
        Persona.from_json(json.loads(d.joinpath(PERSONA_FILE).read_text(encoding="utf-8")))
        for d in sorted(store.iterdir())
        if d.joinpath(PERSONA_FILE).is_file()
    ]


def cmd_bench(args) -> int:
    from persona_agent.benchmark import run_experiment
    from persona_agent.config import ExperimentConfig

    cfg = ExperimentConfig.load(args.config)
    run_dir = run_experiment(cfg)
    results = json.loads((run_dir / "results.json").read_text())
    for rep in results["reports"]:
        metrics = "  ".join(
            f"{k}={rep[k]:.4f}" for k in ("accuracy", "f1", "mae", "rmse") if rep.get(k) is not None
        )
        print(f"{rep['method']:<32} n={rep['n_examples']:<5} {metrics}")
    print(f"results written to {run_dir / 'results.json'}")
    return EXIT_OK


def cmd_align(args) -> int:
    from persona_agent.benchmark import load_dataset, load_task_definition
    from persona_agent.config import ExperimentConfig

    cfg = ExperimentConfig.load(args.config)
    store = args.store or cfg.store_root
    if store is None:
        raise PersonaAgentError("no store root: pass --store or set [run].store_root")
    encoder = cfg.make_encoder()
    llm = cfg.make_backend()
    task_def = load_task_definition(cfg.task_definition)
    if (user_dir(store, args.user) / "episodic.jsonl").is_file():
        buffer = load_buffer(store, args.user, encoder)
    else:
        match = [d for d in load_dataset(cfg.dataset, task_def) if d.user == args.user]
        if not match:
            raise PersonaAgentError(f"user {args.user!r} not found in {cfg.dataset}")
        buffer = EpisodicBuffer.from_records(args.user, match[0].profile_records, encoder)
        save_buffer(buffer, store)
    if (user_dir(store, args.user) / PERSONA_FILE).is_file():
        persona = load_persona(store, args.user)
    else:
        try:
            profile = load_profile(store, args.user)
        except FileNotFoundError:
            profile = summarize_profile(buffer, SummarizationPrompt(), llm, task_def.task, params=cfg.params)
            save_profile(profile, store)
        persona = init_persona(args.user, profile)
    align_cfg = cfg.align_config
    if args.allow_self_retrieval:
        from dataclasses import replace

        align_cfg = replace(align_cfg, allow_self_retrieval=True)
    ctx = AgentContext(llm=llm, encoder=encoder, knowledge=cfg.make_knowledge(), run_config=cfg.run_config,
                       params=cfg.params)
    new = align(buffer, persona, align_cfg, ctx, audit_log=cfg.run_dir / args.user / "align.log.jsonl")
    save_persona(new, store)
    diff = difflib.unified_diff(
        persona.text.splitlines(), new.text.splitlines(),
        f"persona v{persona.version}", f"persona v{new.version}", lineterm="",
    )
    text = "\n".join(diff)
    print(text if text else f"persona v{persona.version} -> v{new.version}: no textual change")
    return EXIT_OK


def cmd_analyze(args) -> int:
    personas = _stored_personas(args.store)
    if not personas:
        raise PersonaAgentError(f"no personas found under {args.store}")
    if args.analysis == "similarity":
        matrix = jaccard_matrix(personas)
        text = matrix.to_csv()
        if args.out:
            args.out.write_text(text, encoding="utf-8")
        print(text, end="")
        print(f"# jaccard over {TOKENIZATION}", file=sys.stderr)
        if matrix.empty_pairs:
            print(f"# {len(matrix.empty_pairs)} pair(s) of empty personas scored 1.0", file=sys.stderr)
        return EXIT_OK
    path = export_embeddings(personas, HashedTfIdfEncoder(args.dim, args.seed), args.out)
    print(f"wrote {len(personas)} embeddings to {path}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    for n, step in enumerate(read_trajectory(args.path)):
        kind = step.get("kind")
        if kind == "action":
            if step.get("thought"):
                print(f"[{n}] thought: {step['thought']}")
            print(f"[{n}] action: {step['tool']}({step['input']!r})")
        elif kind == "observation":
            flag = "" if step.get("ok") else " (failed)"
            print(f"[{n}] observation{flag}:")
            for line in str(step.get("output", "")).splitlines():
                print(f"      {line}")
        elif kind == "final_answer":
            forced = f" [forced: {step.get('forced_reason')}]" if step.get("forced") else ""
            print(f"[{n}] final answer{forced}: {step['text']}")
        else:
            print(f"[{n}] thought: {step.get('text', '')}")
    return EXIT_OK


COMMANDS = {"bench": cmd_bench, "align": cmd_align, "analyze": cmd_analyze, "inspect": cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None or (args.command == "analyze" and args.analysis is None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (PersonaAgentError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
