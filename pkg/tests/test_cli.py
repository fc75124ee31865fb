from __future__ import annotations

import json
import re
from pathlib import Path

import pytest
from click.testing import CliRunner

import toyrun
from sftgen.cli import main
from sftgen.gateway import prompt_hash
from sftgen.templates import TemplateStore


def toml_escape(value: str) -> str:
    return (
        value.replace("\\", "\\\\")
        .replace('"', '\\"')
        .replace("\n", "\\n")
        .replace("\r", "\\r")
        .replace("\t", "\\t")
    )


def base_config_text(extra: str = "") -> str:
    return f"""
run_id = "cli-toy"
stage = 1
allow_ungrounded = true
parallelism = 2

[expansion]
m = 2
n = 2
k = 2
rng_seed = 7

[retrieval]
provider = "local_bm25"
top_k = 3
chunk_size_tokens = 32
chunk_overlap_tokens = 8

[filter]
mode = "rules_only"
max_keep = 2
context_token_budget = 200
min_chunk_chars = 5

[paths]
seeds = "seeds.jsonl"
corpus = "corpus.jsonl"
output_dir = "out"

[providers.expander]
kind = "mock"

[providers.rewriter]
kind = "mock"

[providers.answerer]
kind = "mock"

[providers.base]
kind = "mock"

[providers.editor]
kind = "mock"
{extra}
"""


@pytest.fixture()
def workdir(tmp_path):
    toyrun.write_toy_inputs(tmp_path)
    (tmp_path / "config.toml").write_text(base_config_text(), encoding="utf-8")
    return tmp_path


def invoke(*args):
    return CliRunner().invoke(main, list(args))


class TestExpandCommand:
    def test_valid_invocation_exit_zero(self, workdir):
        out = workdir / "out_expand"
        result = invoke("expand", "--config", str(workdir / "config.toml"), "--out", str(out))
        assert result.exit_code == 0, result.output
        assert (out / "pool.jsonl").is_file()
        assert "== summary ==" in result.output

    def test_missing_seeds_file_exit_two_names_path(self, workdir):
        missing = workdir / "nope.jsonl"
        result = invoke(
            "expand",
            "--config",
            str(workdir / "config.toml"),
            "--seeds",
            str(missing),
            "--out",
            str(workdir / "o"),
        )
        assert result.exit_code == 2
        assert "nope.jsonl" in result.output

    def test_m_zero_pool_equals_seeds(self, workdir):
        out = workdir / "out_m0"
        result = invoke("expand", "--config", str(workdir / "config.toml"), "--out", str(out), "--m", "0")
        assert result.exit_code == 0, result.output
        rows = [json.loads(l) for l in (out / "pool.jsonl").read_text().splitlines()]
        assert len(rows) == len(toyrun.TOY_SEEDS)
        assert all(r["origin"] == "seed" for r in rows)


class TestGenerateCommand:
    def test_fresh_run_exit_zero(self, workdir):
        out = workdir / "out_gen"
        result = invoke("generate", "--config", str(workdir / "config.toml"), "--out", str(out))
        assert result.exit_code == 0, result.output
        assert (out / "dataset.stage1.jsonl").is_file()
        assert (out / "manifest.json").is_file()
        assert (out / "config.echo.json").is_file()

    def test_resume_without_checkpoint_exit_two(self, workdir):
        result = invoke(
            "generate", "--config", str(workdir / "config.toml"), "--out", str(workdir / "empty_out"), "--resume"
        )
        assert result.exit_code == 2
        assert "checkpoint" in result.output

    def test_resume_with_changed_config_exit_two(self, workdir):
        out = workdir / "out_resume"
        first = invoke("generate", "--config", str(workdir / "config.toml"), "--out", str(out))
        assert first.exit_code == 0
        # parallelism is excluded from the hash, so force a real change.
        changed = invoke(
            "generate",
            "--config",
            str(workdir / "config.toml"),
            "--out",
            str(out),
            "--resume",
            "--allow-ungrounded",
        )
        assert changed.exit_code == 0  # allow_ungrounded already true in config: same hash
        (workdir / "config2.toml").write_text(
            base_config_text().replace("rng_seed = 7", "rng_seed = 8"), encoding="utf-8"
        )
        mismatched = invoke(
            "generate", "--config", str(workdir / "config2.toml"), "--out", str(out), "--resume"
        )
        assert mismatched.exit_code == 2
        assert "different configuration" in mismatched.output

    def test_two_invocations_byte_identical(self, workdir):
        out1 = workdir / "det1"
        out2 = workdir / "det2"
        res1 = invoke("generate", "--config", str(workdir / "config.toml"), "--out", str(out1))
        res2 = invoke("generate", "--config", str(workdir / "config.toml"), "--out", str(out2))
        assert res1.exit_code == res2.exit_code == 0
        for name in toyrun.DATA_FILES_GENERATE:
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name
        summary1 = res1.output[res1.output.index("== summary ==") :]
        summary2 = res2.output[res2.output.index("== summary ==") :]
        assert summary1 == summary2


def edit_seed_rewrite_script(edit_seeds_path: Path) -> str:
    """Script the rewrite prompt of every edit seed to hit corpus vocabulary."""
    store = TemplateStore()
    template = store.get("rewrite")
    entries = []
    for line in edit_seeds_path.read_text().splitlines():
        if not line.strip():
            continue
        text = " ".join(json.loads(line)["text"].split())
        request = template.build_request({"instruction": text})
        entries.append((prompt_hash(request.user_prompt), "saffron rice"))
    body = "\n".join(f'"{h}" = "{toml_escape(reply)}"' for h, reply in entries)
    return f"[providers.rewriter.mock_script]\n{body}\n"


@pytest.fixture()
def edit_workdir(tmp_path):
    toyrun.write_toy_inputs(tmp_path)
    few_seeds = tmp_path / "edit_seeds.jsonl"
    rows = toyrun.EDIT_SEEDS[:3]
    few_seeds.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
    config_text = base_config_text(edit_seed_rewrite_script(few_seeds))
    config_text = config_text.replace('seeds = "seeds.jsonl"', 'seeds = "seeds.jsonl"\nedit_seeds = "edit_seeds.jsonl"')
    (tmp_path / "config.toml").write_text(config_text, encoding="utf-8")
    return tmp_path


class TestEditCommand:
    def test_fresh_run_exit_zero(self, edit_workdir):
        out = edit_workdir / "out_edit"
        result = invoke("edit", "--config", str(edit_workdir / "config.toml"), "--out", str(out))
        assert result.exit_code == 0, result.output
        assert (out / "preferences.jsonl").is_file()
        assert (out / "quarantine.jsonl").is_file()
        # Unscripted base/editor fallbacks are single distinct tokens: every
        # triple is a full rewrite and lands in quarantine.
        assert (out / "preferences.jsonl").read_text() == ""
        assert len((out / "quarantine.jsonl").read_text().splitlines()) == 3

    def test_max_edit_ratio_flag_moves_split(self, edit_workdir):
        out = edit_workdir / "out_edit_ratio"
        result = invoke(
            "edit",
            "--config",
            str(edit_workdir / "config.toml"),
            "--out",
            str(out),
            "--max-edit-ratio",
            "1.0",
        )
        assert result.exit_code == 0, result.output
        assert len((out / "preferences.jsonl").read_text().splitlines()) == 3
        assert (out / "quarantine.jsonl").read_text() == ""

    def test_missing_editor_provider_exit_two(self, edit_workdir):
        config_text = (edit_workdir / "config.toml").read_text()
        trimmed = config_text.replace("[providers.editor]\nkind = \"mock\"\n", "")
        (edit_workdir / "config_no_editor.toml").write_text(trimmed, encoding="utf-8")
        result = invoke(
            "edit",
            "--config",
            str(edit_workdir / "config_no_editor.toml"),
            "--out",
            str(edit_workdir / "oe"),
        )
        assert result.exit_code == 2
        assert "editor" in result.output


class TestStatsAndExport:
    def test_stats_totals_match_stage_sums(self, tmp_path):
        for stage, count in ((1, 4273), (2, 2886), (3, 1773)):
            run_dir = tmp_path / f"s{stage}"
            run_dir.mkdir()
            (run_dir / "manifest.json").write_text(
                json.dumps({"stage_counts": {str(stage): count}, "total": count}), encoding="utf-8"
            )
        result = invoke("stats", "--out", str(tmp_path))
        assert result.exit_code == 0
        payload = json.loads(result.output)
        assert payload["total"] == 8932
        assert payload["stage_counts"] == {"1": 4273, "2": 2886, "3": 1773}

    def test_stats_empty_dir_exit_two(self, tmp_path):
        result = invoke("stats", "--out", str(tmp_path))
        assert result.exit_code == 2

    def test_export_deterministic_across_invocations(self, workdir):
        out = workdir / "out_export"
        assert invoke("generate", "--config", str(workdir / "config.toml"), "--out", str(out)).exit_code == 0
        res1 = invoke("export", "--out", str(out), "--format", "pairs")
        first = (out / "export.pairs.jsonl").read_bytes()
        res2 = invoke("export", "--out", str(out), "--format", "pairs")
        assert res1.exit_code == res2.exit_code == 0
        assert (out / "export.pairs.jsonl").read_bytes() == first
        assert res1.output == res2.output

    def test_export_chat_shape(self, workdir):
        out = workdir / "out_export_chat"
        assert invoke("generate", "--config", str(workdir / "config.toml"), "--out", str(out)).exit_code == 0
        assert invoke("export", "--out", str(out), "--format", "chat").exit_code == 0
        first = json.loads((out / "export.chat.jsonl").read_text().splitlines()[0])
        assert [m["role"] for m in first["messages"]] == ["user", "assistant"]

    def test_unknown_format_exit_two(self, workdir):
        result = invoke("export", "--out", str(workdir), "--format", "parquet")
        assert result.exit_code == 2

    def test_export_without_datasets_exit_two(self, tmp_path):
        result = invoke("export", "--out", str(tmp_path), "--format", "pairs")
        assert result.exit_code == 2


EXPECTED_FLAGS = {
    "expand": {"--seeds", "--config", "--out", "--n", "--k", "--m", "--dedup-threshold", "--rng-seed", "--help"},
    "generate": {"--config", "--out", "--allow-ungrounded", "--parallelism", "--resume", "--help"},
    "edit": {"--edit-seeds", "--config", "--out", "--max-edit-ratio", "--resume", "--help"},
    "stats": {"--out", "--help"},
    "export": {"--out", "--format", "--help"},
}


class TestHelp:
    @pytest.mark.parametrize("command", sorted(EXPECTED_FLAGS))
    def test_every_flag_documented(self, command):
        result = invoke(command, "--help")
        assert result.exit_code == 0
        documented = set(re.findall(r"--[a-z][a-z-]*", result.output))
        assert documented == EXPECTED_FLAGS[command]

    def test_top_level_lists_all_commands(self):
        result = invoke("--help")
        for command in EXPECTED_FLAGS:
            assert command in result.output
