"""Dataset ingestion: one user per JSON line, chronologically split into profile and test sets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from persona_agent.core import (
    InteractionRecord,
    Metadata,
    TaskKind,
    UserId,
    label_set_for,
    user_id,
)
from persona_agent.memory import FormatError


@dataclass(frozen=True)
class TaskDefinition:
    task: TaskKind
    labels: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.task.is_rating and not self.labels:
            raise ValueError(f"{self.task.value} needs a non-empty label set")

    @property
    def label_set(self) -> list[str]:
        return label_set_for(self.task, self.labels)


def load_task_definition(path: str | Path) -> TaskDefinition:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return TaskDefinition(TaskKind.parse(obj["task"]), tuple(obj.get("labels") or ()))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid task definition: {exc}") from exc


@dataclass(frozen=True)
class UserDataset:
    user: UserId
    task: TaskKind
    profile_records: tuple[InteractionRecord, ...]
    test_records: tuple[InteractionRecord, ...]
    label_set: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.profile_records and self.test_records:
            if self.profile_records[-1].timestamp > self.test_records[0].timestamp:
                raise ValueError(f"user {self.user}: profile records must precede test records")
        if not self.task.is_rating and not self.label_set:
            raise ValueError(f"user {self.user}: label set is empty")

    @property
    def size(self) -> int:
        return len(self.profile_records) + len(self.test_records)


def _parse_record(obj, idx: int, where: str) -> InteractionRecord:
    if not isinstance(obj, dict):
        raise FormatError(f"{where}: record {idx} is not an object")
    for key in ("query", "ground_truth"):
        if not isinstance(obj.get(key), str) or not obj[key]:
            raise FormatError(f"{where}: record {idx} is missing a non-empty {key!r}")
    ts = obj.get("timestamp", idx)
    if isinstance(ts, bool) or not isinstance(ts, int) or ts < 0:
        raise FormatError(f"{where}: record {idx} has invalid timestamp {ts!r}")
    extra = obj.get("extra") or {}
    return InteractionRecord(
        obj["query"],
        obj["ground_truth"],
        Metadata(ts, obj.get("session_id"), {str(k): str(v) for k, v in extra.items()}),
    )


def load_dataset(path: str | Path, task_def: TaskDefinition) -> list[UserDataset]:
    """Parse a users file.

    Records are sorted by timestamp (stable) before ``split_index`` cuts them
    into profile and test sets; missing timestamps default to the record index.

    Raises:
        FormatError: with ``file:line`` context on any schema violation.
    """
    path = Path(path)
    labels = {lab.lower() for lab in task_def.label_set}
    out: list[UserDataset] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{where}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise FormatError(f"{where}: expected a JSON object")
            try:
                uid = user_id(str(obj.get("user_id", "")))
            except ValueError as exc:
                raise FormatError(f"{where}: {exc}") from exc
            if uid in seen:
                raise FormatError(f"{where}: duplicate user id {uid!r}")
            seen.add(uid)
            raw = obj.get("records")
            if not isinstance(raw, list):
                raise FormatError(f"{where}: 'records' must be a list")
            records = [_parse_record(r, i, where) for i, r in enumerate(raw)]
            records.sort(key=lambda r: r.timestamp)
            split = obj.get("split_index")
            if isinstance(split, bool) or not isinstance(split, int) or not 0 <= split <= len(records):
                raise FormatError(f"{where}: split_index must be an integer in [0, {len(records)}]")
            test = records[split:]
            for i, rec in enumerate(test):
                if rec.ground_truth.strip().lower() not in labels:
                    raise FormatError(f"{where}: test record {i} label {rec.ground_truth!r} not in label set")
            out.append(
                UserDataset(uid, task_def.task, tuple(records[:split]), tuple(test), tuple(task_def.label_set))
            )
    return out


def select_top_users(datasets: Sequence[UserDataset], count: int = 100) -> list[UserDataset]:
    """The ``count`` users with the most records; ties go to the smaller user id."""
    ranked = sorted(datasets, key=lambda d: (-d.size, d.user))
    return ranked[: max(0, count)]


def write_dataset(datasets: Sequence[UserDataset], path: str | Path) -> Path:
    """Inverse of :func:`load_dataset` (used to build fixtures)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for d in datasets:
            recs = [
                {k: v for k, v in r.to_json().items() if v not in (None, {})}
                for r in d.profile_records + d.test_records
            ]
            fh.write(
                json.dumps({"user_id": d.user, "records": recs, "split_index": len(d.profile_records)}) + "\n"
            )
    return path
