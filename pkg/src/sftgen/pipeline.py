"""End-to-end orchestration: expansion, per-instruction grounding and
synthesis, durable checkpoints, and per-stage accounting.

Durability model: every completed item writes its own spool file under
``work/`` (atomic rename), then the checkpoint is rewritten. Output files are
materialized from the spool in instruction-id order, so worker completion
order never shows up in the bytes, and a resumed run reproduces an
uninterrupted run exactly.
"""
from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

from .config import RunConfig, config_hash
from .core import Instruction, InstructionPool, Provenance, RetrievedContext
from .editing import capture_baseline, emit_triple, revise_answer
from .errors import (
    CheckpointMismatchError,
    ConfigError,
    EmptyAnswerError,
    MalformedResponseError,
    NoEvidenceError,
    ProviderError,
    RecordValidationError,
    RetryExhaustedError,
)
from .expansion import ExpansionReport, IterationCounts, export_pool, load_pool_members, run_expansion
from .filtering import assemble_context, llm_rank_chunks, rule_clean_context
from .gateway import Gateway
from .retrieval import (
    CorpusIndex,
    ExternalApiClient,
    Retriever,
    WebSearchClient,
    rewrite_query,
)
from .seeds import export_seeds, load_seeds
from .synthesis import dataset_line, emit_record, generate_answer, write_jsonl_atomic
from .templates import TemplateStore

logger = logging.getLogger(__name__)

_FAIL_SOFT_ERRORS = (
    RetryExhaustedError,
    ProviderError,
    MalformedResponseError,
    EmptyAnswerError,
    RecordValidationError,
)


def _write_json_atomic(path: Path, obj: dict) -> None:
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    tmp.write_text(json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)


@dataclass
class PhaseCounts:
    attempted: int = 0
    succeeded: int = 0
    failed: int = 0
    skipped: int = 0

    def to_json(self) -> dict:
        return {
            "attempted": self.attempted,
            "succeeded": self.succeeded,
            "failed": self.failed,
            "skipped": self.skipped,
        }


@dataclass
class RunReport:
    run_id: str
    flow: str
    phases: dict[str, PhaseCounts] = field(default_factory=dict)
    extras: dict[str, int] = field(default_factory=dict)
    failures: list[tuple[str, str]] = field(default_factory=list)
    expansion: ExpansionReport | None = None
    output_dir: str = ""

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "flow": self.flow,
            "phases": {name: counts.to_json() for name, counts in sorted(self.phases.items())},
            "extras": dict(sorted(self.extras.items())),
            "failures": sorted(self.failures),
            "expansion": self.expansion.to_json() if self.expansion else None,
        }


class _Checkpoint:
    def __init__(self, run_id: str, cfg_hash: str, flow: str):
        self.run_id = run_id
        self.config_hash = cfg_hash
        self.flow = flow
        self.expansion_done = False
        self.expansion_iterations = 0
        self.expansion_report_rows: list[dict] = []
        self.items: set[str] = set()

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "flow": self.flow,
            "expansion_done": self.expansion_done,
            "expansion_iterations": self.expansion_iterations,
            "expansion_report": self.expansion_report_rows,
            "items": sorted(self.items),
        }

    @classmethod
    def from_json(cls, row: dict) -> "_Checkpoint":
        cp = cls(row["run_id"], row["config_hash"], row.get("flow", "generate"))
        cp.expansion_done = bool(row.get("expansion_done", False))
        cp.expansion_iterations = int(row.get("expansion_iterations", 0))
        cp.expansion_report_rows = list(row.get("expansion_report", []))
        cp.items = set(row.get("items", []))
        return cp


class Runner:
    """Executes one pipeline run (generate or edit flow) against one output dir."""

    def __init__(
        self,
        config: RunConfig,
        gateways: dict[str, Gateway] | None = None,
        template_store: TemplateStore | None = None,
        retriever: Retriever | None = None,
    ):
        self.config = config
        self.out_dir = Path(config.paths.output_dir)
        if not config.paths.output_dir:
            raise ConfigError("paths.output_dir is required")
        self.gateways = gateways if gateways is not None else {
            role: Gateway(cfg) for role, cfg in config.providers.items()
        }
        self.templates = template_store or TemplateStore(
            config.paths.templates_dir, temperatures=config.temperatures
        )
        self._retriever = retriever
        self._checkpoint_lock = threading.Lock()
        self._cfg_hash = config_hash(config)

    # Instrumentation point: called with an event label after each durable
    # step. Tests monkeypatch this to simulate crashes at exact boundaries.
    def _event(self, name: str) -> None:
        logger.debug("event: %s", name)

    # -- checkpoint plumbing ------------------------------------------------

    @property
    def _checkpoint_path(self) -> Path:
        return self.out_dir / "checkpoint.json"

    def _save_checkpoint(self, checkpoint: _Checkpoint) -> None:
        tmp = self._checkpoint_path.with_suffix(f".tmp-{os.getpid()}")
        tmp.write_text(json.dumps(checkpoint.to_json(), ensure_ascii=False, sort_keys=True), encoding="utf-8")
        os.replace(tmp, self._checkpoint_path)

    def _open_checkpoint(self, resume: bool, flow: str) -> _Checkpoint:
        path = self._checkpoint_path
        if resume:
            if not path.is_file():
                raise CheckpointMismatchError(f"--resume given but no checkpoint exists at {path}")
            checkpoint = _Checkpoint.from_json(json.loads(path.read_text(encoding="utf-8")))
            if checkpoint.config_hash != self._cfg_hash:
                raise CheckpointMismatchError(
                    "checkpoint was produced by a different configuration "
                    f"(stored {checkpoint.config_hash[:12]}, live {self._cfg_hash[:12]}); "
                    "resume refused to protect output determinism"
                )
            if checkpoint.flow != flow:
                raise CheckpointMismatchError(
                    f"checkpoint belongs to the {checkpoint.flow!r} flow, not {flow!r}"
                )
            return checkpoint
        # Fresh run: clear any stale run state in this output dir.
        if path.exists():
            path.unlink()
        work = self.out_dir / "work"
        if work.exists():
            for sub in sorted(work.rglob("*"), reverse=True):
                if sub.is_file():
                    sub.unlink()
        return _Checkpoint(self.config.run_id, self._cfg_hash, flow)

    # -- shared phase helpers -----------------------------------------------

    def _build_retriever(self) -> Retriever:
        if self._retriever is not None:
            return self._retriever
        rcfg = self.config.retrieval
        index = None
        embed_gateway = None
        web_client = None
        api_client = None
        limiter = self.gateways["rewriter"].limiter if "rewriter" in self.gateways else None
        if rcfg.provider in ("local_bm25", "local_dense"):
            if not self.config.paths.corpus:
                raise ConfigError(f"retrieval provider {rcfg.provider} requires paths.corpus")
            index = CorpusIndex.build_from_jsonl(
                self.config.paths.corpus, rcfg.chunk_size_tokens, rcfg.chunk_overlap_tokens
            )
        if rcfg.provider == "local_dense":
            if "embedder" not in self.gateways:
                raise ConfigError("local_dense retrieval requires an 'embedder' provider")
            embed_gateway = self.gateways["embedder"]
        if rcfg.provider == "web_search":
            if rcfg.web_search is None:
                raise ConfigError("web_search retrieval requires a [retrieval.web_search] table")
            web_client = WebSearchClient(rcfg.web_search, limiter=limiter)
        if rcfg.provider == "external_api":
            if rcfg.external_api is None:
                raise ConfigError("external_api retrieval requires a [retrieval.external_api] table")
            api_client = ExternalApiClient(rcfg.external_api, limiter=limiter)
        return Retriever(rcfg, index=index, embed_gateway=embed_gateway, web_client=web_client, api_client=api_client)

    def _filter_contexts(
        self, member: Instruction, raw_contexts: list[RetrievedContext]
    ) -> tuple[list[RetrievedContext], list[RetrievedContext]]:
        """Returns (kept, all_contexts_with_final_statuses)."""
        cleaned = [rule_clean_context(c) for c in raw_contexts]
        alive: list[RetrievedContext] = []
        finished: list[RetrievedContext] = []
        for context in cleaned:
            if len(context.chunk_text) < self.config.filter.min_chunk_chars:
                finished.append(replace(context, filter_status="dropped"))
            else:
                alive.append(context)
        if alive:
            if self.config.filter.mode == "rules_then_llm":
                kept = llm_rank_chunks(
                    member, alive, self.gateways["rewriter"], self.templates.get("rank"), self.config.filter.max_keep
                )
            else:
                ordered = sorted(alive, key=lambda c: c.rank)[: self.config.filter.max_keep]
                kept = [replace(c, filter_status="kept") for c in ordered]
        else:
            kept = []
        kept_ids = {c.context_id for c in kept}
        finished.extend(replace(c, filter_status="dropped") for c in alive if c.context_id not in kept_ids)
        finished.extend(kept)
        finished.sort(key=lambda c: c.rank)
        return kept, finished

    def _spool_write(self, subdir: str, item_id: str, payload: dict) -> None:
        directory = self.out_dir / "work" / subdir
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"{item_id}.json"
        tmp = path.with_suffix(f".tmp-{os.getpid()}-{threading.get_ident()}")
        tmp.write_text(json.dumps(payload, ensure_ascii=False, sort_keys=True), encoding="utf-8")
        os.replace(tmp, path)

    def _spool_read(self, subdir: str, item_id: str) -> dict:
        path = self.out_dir / "work" / subdir / f"{item_id}.json"
        return json.loads(path.read_text(encoding="utf-8"))

    def _run_items(
        self,
        members: list[Instruction],
        checkpoint: _Checkpoint,
        worker,
        counts: PhaseCounts,
        report: RunReport,
    ) -> None:
        todo = [m for m in members if m.id not in checkpoint.items]
        counts.attempted = len(todo)
        if not todo:
            return
        with ThreadPoolExecutor(max_workers=self.config.parallelism) as pool:
            futures = {pool.submit(worker, member): member for member in todo}
            for future in as_completed(futures):
                outcome = future.result()
                status = outcome["status"]
                if status == "succeeded":
                    counts.succeeded += 1
                elif status == "skipped":
                    counts.skipped += 1
                else:
                    counts.failed += 1
                    report.failures.append((outcome["id"], outcome.get("error", "")))
                with self._checkpoint_lock:
                    checkpoint.items.add(outcome["id"])
                    self._save_checkpoint(checkpoint)
                self._event(f"item_done:{outcome['id']}")

    # -- generate flow --------------------------------------------------------

    def run(self, resume: bool = False) -> RunReport:
        self.config.require_roles(("rewriter", "answerer"))
        if self.config.expansion.m > 0 and self.config.expansion.k > 0:
            self.config.require_roles(("expander",))
        self.out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint = self._open_checkpoint(resume, "generate")
        report = RunReport(run_id=self.config.run_id, flow="generate", output_dir=str(self.out_dir))

        pool = load_seeds(self.config.paths.seeds, default_stage=self.config.stage)
        export_seeds(pool, self.out_dir / "seeds.jsonl")

        pool, expansion_report = self._expansion_phase(pool, checkpoint)
        report.expansion = expansion_report

        retriever = self._build_retriever()
        counts = PhaseCounts()
        report.phases["instructions"] = counts

        def worker(member: Instruction) -> dict:
            return self._process_generate_item(member, retriever)

        self._run_items(list(pool.members()), checkpoint, worker, counts, report)
        self._materialize_generate(pool, checkpoint, report)
        self._event("materialized")
        return report

    @staticmethod
    def _restore_expanded(pool: InstructionPool, pool_path: Path) -> None:
        # Parents always come from earlier iterations (or seeds), so inserting
        # in iteration order keeps every parent visible before its children.
        members = [m for m in load_pool_members(pool_path) if m.origin == "expanded"]
        for member in sorted(members, key=lambda m: (m.iteration, m.id)):
            if not pool.has_id(member.id):
                pool.add_expanded(member)

    def run_expand_only(self, resume: bool = False) -> tuple[InstructionPool, ExpansionReport]:
        """Seed loading plus expansion, without the grounding/answer phases."""
        if self.config.expansion.m > 0 and self.config.expansion.k > 0:
            self.config.require_roles(("expander",))
        self.out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint = self._open_checkpoint(resume, "generate")
        pool = load_seeds(self.config.paths.seeds, default_stage=self.config.stage)
        export_seeds(pool, self.out_dir / "seeds.jsonl")
        return self._expansion_phase(pool, checkpoint)

    def _expansion_phase(self, pool: InstructionPool, checkpoint: _Checkpoint):
        cfg = self.config.expansion
        pool_path = self.out_dir / "pool.jsonl"
        report = ExpansionReport(
            iterations=[IterationCounts(**row) for row in checkpoint.expansion_report_rows]
        )
        if checkpoint.expansion_done or checkpoint.expansion_iterations >= cfg.m:
            if pool_path.is_file():
                self._restore_expanded(pool, pool_path)
            if not checkpoint.expansion_done:
                checkpoint.expansion_done = True
                self._save_checkpoint(checkpoint)
            export_pool(pool, pool_path)
            _write_json_atomic(self.out_dir / "expansion_report.json", report.to_json())
            return pool, report

        # Rebuild partial expansion state from the previous run, if any.
        if checkpoint.expansion_iterations > 0 and pool_path.is_file():
            self._restore_expanded(pool, pool_path)

        def on_iteration(t: int, live_pool: InstructionPool, live_report: ExpansionReport) -> None:
            export_pool(live_pool, pool_path)
            checkpoint.expansion_iterations = t
            checkpoint.expansion_report_rows = [it.to_json() for it in live_report.iterations]
            self._save_checkpoint(checkpoint)
            self._event(f"expansion_iteration:{t}")

        pool, report = run_expansion(
            pool,
            cfg,
            self.gateways.get("expander"),
            self.templates.get("expansion"),
            stage=self.config.stage,
            start_iteration=checkpoint.expansion_iterations + 1,
            report=report,
            on_iteration=on_iteration,
        )
        checkpoint.expansion_done = True
        self._save_checkpoint(checkpoint)
        export_pool(pool, pool_path)
        _write_json_atomic(self.out_dir / "expansion_report.json", report.to_json())
        self._event("expansion_done")
        return pool, report

    def _process_generate_item(self, member: Instruction, retriever: Retriever) -> dict:
        started = time.time()
        context_rows: list[dict] = []
        try:
            query = rewrite_query(member, self.gateways["rewriter"], self.templates.get("rewrite"))
            raw_contexts = retriever.retrieve(query)
            kept, finished = self._filter_contexts(member, raw_contexts)
            context_rows = [c.to_json() for c in finished]
            assembled, used_ids = assemble_context(kept, self.config.filter.context_token_budget)
            ungrounded = not used_ids
            if ungrounded and not self.config.allow_ungrounded:
                payload = {
                    "id": member.id,
                    "status": "skipped",
                    "reason": "ungrounded",
                    "contexts": context_rows,
                    "timestamp": started,
                }
                self._spool_write("items", member.id, payload)
                return payload
            answer = generate_answer(member, assembled, self.gateways["answerer"], self.templates.get("answer"))
            provenance = Provenance(
                provider=answer.response.provider,
                model=answer.response.model,
                template_id="answer",
                timestamp=started,
                input_tokens=answer.response.input_tokens,
                output_tokens=answer.response.output_tokens,
                ungrounded=ungrounded,
            )
            record = emit_record(
                member, answer.text, used_ids, provenance, max_answer_chars=self.config.max_answer_chars
            )
            payload = {
                "id": member.id,
                "status": "succeeded",
                "record": dataset_line(record),
                "contexts": context_rows,
                "timestamp": started,
                "completed_at": time.time(),
            }
            self._spool_write("items", member.id, payload)
            return payload
        except _FAIL_SOFT_ERRORS as exc:
            logger.warning("item %s failed: %s", member.id[:12], exc)
            payload = {
                "id": member.id,
                "status": "failed",
                "error": f"{type(exc).__name__}: {exc}",
                "contexts": context_rows,
                "timestamp": started,
            }
            self._spool_write("items", member.id, payload)
            return payload

    def _materialize_generate(self, pool: InstructionPool, checkpoint: _Checkpoint, report: RunReport) -> None:
        records: list[dict] = []
        contexts: list[dict] = []
        for member in pool.members():
            if member.id not in checkpoint.items:
                continue
            payload = self._spool_read("items", member.id)
            contexts.extend(payload.get("contexts", []))
            if payload["status"] == "succeeded":
                records.append(payload["record"])
        records.sort(key=lambda r: r["id"])
        dataset_path = self.out_dir / f"dataset.stage{self.config.stage}.jsonl"
        write_jsonl_atomic(dataset_path, records)
        write_jsonl_atomic(self.out_dir / "contexts.jsonl", contexts)
        _write_json_atomic(
            self.out_dir / "manifest.json",
            {
                "stage_counts": {str(self.config.stage): len(records)},
                "total": len(records),
                "created_at": datetime.now(timezone.utc).isoformat(),
                "config_hash": self._cfg_hash,
            },
        )
        _write_json_atomic(self.out_dir / "report.json", report.to_json())

    # -- edit flow ------------------------------------------------------------

    def run_edit(self, resume: bool = False) -> RunReport:
        self.config.require_roles(("base", "editor", "rewriter"))
        if not self.config.paths.edit_seeds:
            raise ConfigError("edit flow requires paths.edit_seeds")
        self.out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint = self._open_checkpoint(resume, "edit")
        report = RunReport(run_id=self.config.run_id, flow="edit", output_dir=str(self.out_dir))

        pool = load_seeds(self.config.paths.edit_seeds, default_stage=self.config.stage)
        export_seeds(pool, self.out_dir / "seeds.jsonl")
        members = [s.as_instruction() for s in pool.seeds]

        retriever = self._build_retriever()
        counts = PhaseCounts()
        report.phases["edit_items"] = counts

        def worker(member: Instruction) -> dict:
            return self._process_edit_item(member, retriever)

        self._run_items(members, checkpoint, worker, counts, report)
        self._materialize_edit(members, checkpoint, report)
        self._event("materialized")
        return report

    def _process_edit_item(self, member: Instruction, retriever: Retriever) -> dict:
        started = time.time()
        context_rows: list[dict] = []
        try:
            rejected = capture_baseline(member, self.gateways["base"], self.templates.get("plain"))
            query = rewrite_query(member, self.gateways["rewriter"], self.templates.get("rewrite"))
            raw_contexts = retriever.retrieve(query)
            kept, finished = self._filter_contexts(member, raw_contexts)
            context_rows = [c.to_json() for c in finished]
            assembled, used_ids = assemble_context(kept, self.config.filter.context_token_budget)
            if not used_ids:
                raise NoEvidenceError("retrieval produced no usable evidence")
            chosen = revise_answer(member, rejected, assembled, self.gateways["editor"], self.templates.get("edit"))
            triple = emit_triple(member, rejected, chosen, used_ids, max_ratio=self.config.max_edit_ratio)
            payload = {
                "id": member.id,
                "status": "succeeded",
                "route": "main" if triple.flag is None else "quarantine",
                "flag": triple.flag,
                "triple": triple.to_json(),
                "contexts": context_rows,
                "timestamp": started,
            }
            self._spool_write("edits", member.id, payload)
            return payload
        except NoEvidenceError as exc:
            payload = {
                "id": member.id,
                "status": "skipped",
                "reason": "no_evidence",
                "error": str(exc),
                "contexts": context_rows,
                "timestamp": started,
            }
            self._spool_write("edits", member.id, payload)
            return payload
        except _FAIL_SOFT_ERRORS as exc:
            logger.warning("edit item %s failed: %s", member.id[:12], exc)
            payload = {
                "id": member.id,
                "status": "failed",
                "error": f"{type(exc).__name__}: {exc}",
                "contexts": context_rows,
                "timestamp": started,
            }
            self._spool_write("edits", member.id, payload)
            return payload

    def _materialize_edit(self, members: list[Instruction], checkpoint: _Checkpoint, report: RunReport) -> None:
        main_rows: list[dict] = []
        quarantine_rows: list[dict] = []
        contexts: list[dict] = []
        extras = {"main_triples": 0, "quarantined": 0, "no_change_needed": 0}
        for member in sorted(members, key=lambda m: m.id):
            if member.id not in checkpoint.items:
                continue
            payload = self._spool_read("edits", member.id)
            contexts.extend(payload.get("contexts", []))
            if payload["status"] != "succeeded":
                continue
            if payload["route"] == "main":
                main_rows.append(payload["triple"])
                extras["main_triples"] += 1
            else:
                quarantine_rows.append(payload["triple"])
                extras["quarantined"] += 1
                if payload.get("flag") == "no_change_needed":
                    extras["no_change_needed"] += 1
        write_jsonl_atomic(self.out_dir / "preferences.jsonl", main_rows)
        write_jsonl_atomic(self.out_dir / "quarantine.jsonl", quarantine_rows)
        write_jsonl_atomic(self.out_dir / "contexts.jsonl", contexts)
        report.extras.update(extras)
        _write_json_atomic(
            self.out_dir / "edit_summary.json",
            {
                "created_at": datetime.now(timezone.utc).isoformat(),
                "config_hash": self._cfg_hash,
                **extras,
            },
        )
        _write_json_atomic(self.out_dir / "report.json", report.to_json())


_DATASET_FILE_RE = re.compile(r"^dataset\.stage(\d+)\.jsonl$")


def stage_summary(root: str | Path) -> dict:
    """Aggregate per-stage sample counts across one or more runs under root.

    Prefers manifest files (one per run); falls back to counting dataset
    lines when no manifest exists.
    """
    root = Path(root)
    counts: dict[int, int] = {}
    manifests = sorted(root.rglob("manifest.json"))
    if manifests:
        for manifest_path in manifests:
            data = json.loads(manifest_path.read_text(encoding="utf-8"))
            for stage_str, n in (data.get("stage_counts") or {}).items():
                counts[int(stage_str)] = counts.get(int(stage_str), 0) + int(n)
    else:
        dataset_files = [p for p in sorted(root.rglob("dataset.stage*.jsonl")) if _DATASET_FILE_RE.match(p.name)]
        if not dataset_files:
            raise ConfigError(f"no manifest.json or dataset.stage*.jsonl files found under {root}")
        for path in dataset_files:
            stage = int(_DATASET_FILE_RE.match(path.name).group(1))
            n = sum(1 for line in path.read_text(encoding="utf-8").splitlines() if line.strip())
            counts[stage] = counts.get(stage, 0) + n
    return {"stage_counts": counts, "total": sum(counts.values())}
