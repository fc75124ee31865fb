"""Command-line entry point.

Exit codes: 0 = success (individual item failures permitted), 2 = usage or
configuration error, 3 = provider retries exhausted at phase level. All
defaults live in the config file; flags override; the effective config is
echoed into the output directory for provenance.
"""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .config import config_hash, config_to_dict, load_run_config
from .errors import (
    AuthError,
    CheckpointMismatchError,
    ConfigError,
    EmptySeedSetError,
    IndexNotBuiltError,
    RetryExhaustedError,
    SeedParseError,
    TemplateError,
)
from .pipeline import Runner, stage_summary
from .synthesis import export_dataset

logger = logging.getLogger(__name__)

_CONFIG_ERRORS = (
    ConfigError,
    CheckpointMismatchError,
    SeedParseError,
    EmptySeedSetError,
    TemplateError,
    IndexNotBuiltError,
    AuthError,
    FileNotFoundError,
)


def _setup_logging(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    root = logging.getLogger()
    root.setLevel(logging.INFO)
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    file_handler = logging.FileHandler(out_dir / "run.log", encoding="utf-8")
    file_handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(file_handler)
    stderr_handler = logging.StreamHandler(sys.stderr)
    stderr_handler.setLevel(logging.WARNING)
    stderr_handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    root.addHandler(stderr_handler)


def _echo_effective_config(config, out_dir: Path) -> None:
    payload = {"config_hash": config_hash(config), "config": config_to_dict(config)}
    (out_dir / "config.echo.json").write_text(
        json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _print_summary(pairs: dict) -> None:
    click.echo("== summary ==")
    for key in sorted(pairs):
        click.echo(f"{key}={pairs[key]}")


def _guard(fn) -> None:
    try:
        fn()
    except _CONFIG_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    except RetryExhaustedError as exc:
        click.echo(f"error: provider retries exhausted: {exc}", err=True)
        sys.exit(3)


@click.group()
def main():
    """Build grounded SFT datasets and minimal-edit preference triples."""


@main.command()
@click.option("--seeds", "seeds_path", type=str, default=None, help="Seed JSONL file (overrides paths.seeds).")
@click.option("--config", "config_path", type=str, required=True, help="Run config TOML file.")
@click.option("--out", "out_dir", type=str, required=True, help="Output directory (overrides paths.output_dir).")
@click.option("--n", type=int, default=None, help="Seeds sampled per expansion call.")
@click.option("--k", type=int, default=None, help="New instructions requested per call.")
@click.option("--m", type=int, default=None, help="Number of expansion iterations.")
@click.option("--dedup-threshold", type=float, default=None, help="Near-duplicate rejection threshold in [0,1].")
@click.option("--rng-seed", type=int, default=None, help="Sampling seed for reproducible subsets.")
def expand(seeds_path, config_path, out_dir, n, k, m, dedup_threshold, rng_seed):
    """Load seeds and grow the instruction pool; writes pool.jsonl and a report."""

    def body():
        overrides = {
            "paths.seeds": seeds_path,
            "paths.output_dir": out_dir,
            "expansion.n": n,
            "expansion.k": k,
            "expansion.m": m,
            "expansion.dedup_threshold": dedup_threshold,
            "expansion.rng_seed": rng_seed,
        }
        config = load_run_config(config_path, overrides)
        if not config.paths.seeds or not Path(config.paths.seeds).is_file():
            raise ConfigError(f"seeds file not found: {config.paths.seeds!r}")
        out = Path(config.paths.output_dir)
        _setup_logging(out)
        _echo_effective_config(config, out)
        pool, report = Runner(config).run_expand_only()
        totals = report.totals()
        _print_summary(
            {
                "seeds": len(pool.seeds),
                "expanded": len(pool.expanded),
                "pool_total": len(pool),
                **{f"expansion_{k_}": v for k_, v in totals.items()},
            }
        )

    _guard(body)


@main.command()
@click.option("--config", "config_path", type=str, required=True, help="Run config TOML file.")
@click.option("--out", "out_dir", type=str, required=True, help="Output directory (overrides paths.output_dir).")
@click.option("--allow-ungrounded", is_flag=True, default=None, help="Emit answers even when retrieval found nothing.")
@click.option("--parallelism", type=int, default=None, help="Bounded worker count for the per-instruction phase.")
@click.option("--resume", is_flag=True, default=False, help="Resume from the checkpoint in --out.")
def generate(config_path, out_dir, allow_ungrounded, parallelism, resume):
    """Run the full pipeline: seeds, expansion, retrieval, filtering, answers."""

    def body():
        overrides = {
            "paths.output_dir": out_dir,
            "allow_ungrounded": allow_ungrounded,
            "parallelism": parallelism,
        }
        config = load_run_config(config_path, overrides)
        out = Path(config.paths.output_dir)
        _setup_logging(out)
        _echo_effective_config(config, out)
        report = Runner(config).run(resume=resume)
        counts = report.phases["instructions"]
        totals = report.expansion.totals() if report.expansion else {}
        _print_summary(
            {
                "attempted": counts.attempted,
                "succeeded": counts.succeeded,
                "failed": counts.failed,
                "skipped": counts.skipped,
                **{f"expansion_{k_}": v for k_, v in totals.items()},
            }
        )

    _guard(body)


@main.command()
@click.option("--edit-seeds", "edit_seeds_path", type=str, default=None, help="Edit seed JSONL (overrides paths.edit_seeds).")
@click.option("--config", "config_path", type=str, required=True, help="Run config TOML file.")
@click.option("--out", "out_dir", type=str, required=True, help="Output directory (overrides paths.output_dir).")
@click.option("--max-edit-ratio", type=float, default=None, help="Quarantine triples whose edit ratio exceeds this.")
@click.option("--resume", is_flag=True, default=False, help="Resume from the checkpoint in --out.")
def edit(edit_seeds_path, config_path, out_dir, max_edit_ratio, resume):
    """Build preference triples: baseline answer, evidence, minimal revision."""

    def body():
        overrides = {
            "paths.edit_seeds": edit_seeds_path,
            "paths.output_dir": out_dir,
            "max_edit_ratio": max_edit_ratio,
        }
        config = load_run_config(config_path, overrides)
        out = Path(config.paths.output_dir)
        _setup_logging(out)
        _echo_effective_config(config, out)
        report = Runner(config).run_edit(resume=resume)
        counts = report.phases["edit_items"]
        _print_summary(
            {
                "attempted": counts.attempted,
                "succeeded": counts.succeeded,
                "failed": counts.failed,
                "skipped": counts.skipped,
                **report.extras,
            }
        )

    _guard(body)


@main.command()
@click.option("--out", "out_dir", type=str, required=True, help="Directory holding one or more runs.")
def stats(out_dir):
    """Aggregate per-stage sample counts across runs under --out."""

    def body():
        summary = stage_summary(out_dir)
        click.echo(
            json.dumps(
                {"stage_counts": {str(k): v for k, v in sorted(summary["stage_counts"].items())}, "total": summary["total"]},
                ensure_ascii=False,
                sort_keys=True,
                indent=2,
            )
        )

    _guard(body)


@main.command()
@click.option("--out", "out_dir", type=str, required=True, help="Run output directory holding dataset files.")
@click.option("--format", "fmt", type=click.Choice(["pairs", "chat"]), required=True, help="Export shape.")
def export(out_dir, fmt):
    """Re-shape dataset files into flat pairs or chat-message JSONL."""

    def body():
        out = Path(out_dir)
        rows = []
        dataset_files = sorted(out.glob("dataset.stage*.jsonl"))
        if not dataset_files:
            raise ConfigError(f"no dataset.stage*.jsonl files under {out}")
        for path in dataset_files:
            for line in path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    rows.append(json.loads(line))
        target = out / f"export.{fmt}.jsonl"
        export_dataset(rows, "pairs_jsonl" if fmt == "pairs" else "chat_jsonl", target)
        _print_summary({"exported": len(rows), "path": str(target)})

    _guard(body)


if __name__ == "__main__":
    main()
