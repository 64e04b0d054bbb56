"""Run a configured set of methods over a dataset and write results."""

from __future__ import annotations

import contextvars
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

from persona_agent.config import ConfigError, ExperimentConfig
from persona_agent.llm import CallRecord, ChatBackend
from persona_agent.agent import save_persona

from persona_agent.benchmark.data import UserDataset, load_dataset, load_task_definition, select_top_users
from persona_agent.benchmark.methods import BenchContext, Method, parse_method, run_method
from persona_agent.benchmark.metrics import F1_AVERAGE, IMPUTED_RATING, compute_metrics

log = logging.getLogger(__name__)

RESULTS_FILE = "results.json"
PER_USER_FILE = "per_user.jsonl"


def _gold(ds: UserDataset) -> list:
    if ds.task.is_rating:
        return [int(r.ground_truth) for r in ds.test_records]
    return [r.ground_truth for r in ds.test_records]


def run_experiment(config: ExperimentConfig, *, backend: ChatBackend | None = None) -> Path:
    """Evaluate every configured method and write ``results.json`` and ``per_user.jsonl``.

    Users are evaluated in ``config.workers`` threads; output order is fixed by
    user order so results do not depend on scheduling.
    """
    try:
        methods = [parse_method(n) for n in config.methods]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not methods:
        raise ConfigError("no methods configured")
    task_def = load_task_definition(config.task_definition)
    users = select_top_users(load_dataset(config.dataset, task_def), config.top_users)
    if not users:
        raise ConfigError(f"{config.dataset}: no users")

    llm = backend if backend is not None else config.make_backend()
    ctx = BenchContext(
        llm=llm,
        encoder=config.make_encoder(),
        knowledge=config.make_knowledge(),
        run_config=config.run_config,
        align_config=config.align_config,
        params=config.params,
        seed=config.seed,
        pool=users,
        run_dir=config.run_dir,
        store_root=config.store_root,
    )
    config.run_dir.mkdir(parents=True, exist_ok=True)

    reports = []
    per_user = []
    for method in methods:
        preds_by_user = _run_users(method, users, ctx, config.workers)
        all_preds, all_gold = [], []
        for ds, preds in zip(users, preds_by_user):
            all_preds += preds
            all_gold += _gold(ds)
            row = {"method": method.name, "user_id": ds.user}
            if ds.test_records:
                row.update(compute_metrics(preds, _gold(ds), ds.task, ds.label_set).to_json())
            persona = ctx.personas.get((method.name, ds.user))
            if persona is not None:
                row["persona_version"] = persona.version
            row["predictions"] = [p.label for p in preds]
            per_user.append(row)
        if all_preds:
            report = compute_metrics(all_preds, all_gold, task_def.task, task_def.label_set).to_json()
        else:
            report = {"task": task_def.task.value, "n_examples": 0, "n_parse_failures": 0}
        reports.append({"method": method.name, **report})

    if config.store_root is not None:
        for ds in users:
            persona = ctx.personas.get(("persona_agent", ds.user))
            if persona is not None:
                save_persona(persona, config.store_root)

    results = {
        "metadata": {
            "created_at": int(time.time()),
            "task": task_def.task.value,
            "methods": [m.name for m in methods],
            "n_users": len(users),
            "f1_average": F1_AVERAGE,
            "parse_failure_policy": {"classification": "incorrect", "rating_imputed": IMPUTED_RATING},
            "membank": "membank-like approximation",
            "seed": config.seed,
            "alignment": {
                "batch_size": config.align_config.batch_size,
                "iterations": config.align_config.iterations,
                "allow_self_retrieval": config.align_config.allow_self_retrieval,
            },
            "agent": {
                "max_steps": config.run_config.max_steps,
                "min_tool_calls": config.run_config.min_tool_calls,
                "k_memory": config.run_config.k_memory,
            },
            "temperature": config.params.temperature,
        },
        "reports": reports,
    }
    out = config.run_dir / RESULTS_FILE
    out.write_text(json.dumps(results, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with (config.run_dir / PER_USER_FILE).open("w", encoding="utf-8") as fh:
        for row in per_user:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return config.run_dir


def _run_users(method: Method, users: Sequence[UserDataset], ctx: BenchContext, workers: int):
    if workers <= 1:
        return [run_method(method, ds, ctx) for ds in users]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(contextvars.copy_context().run, run_method, method, ds, ctx) for ds in users]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# leakage audits over a backend call log
# ---------------------------------------------------------------------------


def find_temporal_leaks(calls: Sequence[CallRecord], datasets: Sequence[UserDataset]) -> list[tuple]:
    """Calls whose prompt contains a test query outside that query's own evaluation turn.

    Returns ``(user, test_index, call_position)`` triples; empty means no leak.
    """
    leaks = []
    for ds in datasets:
        for i, rec in enumerate(ds.test_records):
            for pos, call in enumerate(calls):
                if rec.query not in call.prompt:
                    continue
                s = call.scope
                own_turn = s.get("phase") == "eval" and s.get("user") == ds.user and s.get("query_index") == i
                if not own_turn:
                    leaks.append((ds.user, i, pos))
    return leaks


def find_self_retrievals(calls: Sequence[CallRecord], datasets: Sequence[UserDataset]) -> list[tuple]:
    """Alignment simulation calls that can see the very record being simulated."""
    by_user = {ds.user: ds for ds in datasets}
    hits = []
    for pos, call in enumerate(calls):
        s = call.scope
        if s.get("phase") != "simulate" or s.get("user") not in by_user:
            continue
        rec = by_user[s["user"]].profile_records[s["record_index"]]
        if f"Past Q: {rec.query}\nUser's answer: {rec.ground_truth}" in call.prompt:
            hits.append((s["user"], s["record_index"], pos))
    return hits
