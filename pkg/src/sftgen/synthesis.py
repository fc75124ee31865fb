"""Answer generation and dataset emission.

Dataset lines never carry wall-clock timestamps, so identical inputs produce
byte-identical files; timing lives in the run's work spool instead.
"""
from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .core import Instruction, Provenance, SftRecord, canonicalize
from .errors import EmptyAnswerError, RecordValidationError
from .gateway import ChatResponse, Gateway
from .templates import PromptTemplate

logger = logging.getLogger(__name__)

EXPORT_FORMATS = ("pairs_jsonl", "chat_jsonl")
DEFAULT_MAX_ANSWER_CHARS = 8000
_UNGROUNDED_PLACEHOLDER = "(no evidence provided)"


@dataclass(frozen=True)
class AnswerResult:
    text: str
    response: ChatResponse
    temperature_bumped: bool


def generate_answer(
    instruction: Instruction,
    assembled_context: str,
    gateway: Gateway,
    template: PromptTemplate,
) -> AnswerResult:
    """One grounded completion; an empty reply earns a single retry at
    temperature +0.3 (capped at 1.0) before EmptyAnswerError."""
    values = {"instruction": instruction.text, "context": assembled_context or _UNGROUNDED_PLACEHOLDER}
    response = gateway.complete(template.build_request(values))
    text = response.text.strip()
    if text:
        return AnswerResult(text=text, response=response, temperature_bumped=False)
    bumped = min(template.temperature + 0.3, 1.0)
    logger.warning("empty answer for %s; retrying at temperature %.2f", instruction.id[:12], bumped)
    response = gateway.complete(template.build_request(values, temperature=bumped))
    text = response.text.strip()
    if not text:
        raise EmptyAnswerError(f"empty answer after retry for instruction {instruction.id[:12]}")
    return AnswerResult(text=text, response=response, temperature_bumped=True)


def dataset_line(record: SftRecord) -> dict:
    """Deterministic dataset row; timestamps are deliberately excluded."""
    return {
        "id": record.instruction.id,
        "instruction": record.instruction.text,
        "output": record.answer,
        "stage": record.instruction.stage,
        "context_ids": list(record.context_ids),
        "provenance": {
            "provider": record.provenance.provider,
            "model": record.provenance.model,
            "template_id": record.provenance.template_id,
            "input_tokens": record.provenance.input_tokens,
            "output_tokens": record.provenance.output_tokens,
            "ungrounded": record.provenance.ungrounded,
        },
    }


_append_lock = threading.Lock()


def append_jsonl_atomic(path: str | Path, row: dict) -> None:
    """Append one line via write-temp-then-rename: a crash before the rename
    leaves the original file untouched."""
    path = Path(path)
    with _append_lock:
        existing = path.read_bytes() if path.exists() else b""
        line = json.dumps(row, ensure_ascii=False, sort_keys=True).encode("utf-8") + b"\n"
        tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
        tmp.write_bytes(existing + line)
        os.replace(tmp, path)


def write_jsonl_atomic(path: str | Path, rows: Iterable[dict]) -> None:
    path = Path(path)
    payload = "".join(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n" for row in rows)
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    tmp.write_text(payload, encoding="utf-8")
    os.replace(tmp, path)


def emit_record(
    instruction: Instruction,
    answer: str,
    context_ids: Sequence[str],
    provenance: Provenance,
    path: str | Path | None = None,
    max_answer_chars: int = DEFAULT_MAX_ANSWER_CHARS,
) -> SftRecord:
    """Validate and construct a training pair; optionally append it atomically
    to the stage's dataset file."""
    if not answer:
        raise RecordValidationError("empty", "answer text is empty")
    if canonicalize(answer) == instruction.text:
        raise RecordValidationError("echo", "answer merely repeats the instruction")
    if len(answer) > max_answer_chars:
        raise RecordValidationError("overlength", f"{len(answer)} chars > {max_answer_chars}")
    record = SftRecord(
        instruction=instruction,
        answer=answer,
        context_ids=tuple(context_ids),
        provenance=provenance,
    )
    if path is not None:
        append_jsonl_atomic(path, dataset_line(record))
    return record


def export_dataset(rows: Sequence[dict], fmt: str, path: str | Path) -> Path:
    """Write dataset rows as flat pairs or chat messages, ordered by id."""
    if fmt not in EXPORT_FORMATS:
        raise ValueError(f"format must be one of {EXPORT_FORMATS}")
    ordered = sorted(rows, key=lambda r: r["id"])
    if fmt == "pairs_jsonl":
        out_rows = [
            {"instruction": r["instruction"], "output": r["output"], "stage": r["stage"], "id": r["id"]}
            for r in ordered
        ]
    else:
        out_rows = [
            {
                "messages": [
                    {"role": "user", "content": r["instruction"]},
                    {"role": "assistant", "content": r["output"]},
                ]
            }
            for r in ordered
        ]
    write_jsonl_atomic(path, out_rows)
    return Path(path)


def import_pairs(path: str | Path) -> list[dict]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            row = json.loads(line)
            rows.append(
                {"instruction": row["instruction"], "output": row["output"], "stage": row["stage"], "id": row["id"]}
            )
    return rows


def import_chat(path: str | Path) -> list[dict]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        messages = json.loads(line)["messages"]
        user = next(m["content"] for m in messages if m["role"] == "user")
        assistant = next(m["content"] for m in messages if m["role"] == "assistant")
        rows.append({"instruction": user, "output": assistant})
    return rows
