# Файл: main.py
# Точка входа CLI: run, eval, ablate, report

import argparse
import asyncio
import logging
import os
import sys
from logging.handlers import RotatingFileHandler
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from app.core.chat_api_manager import ProviderError
from app.core.evaluation import DEFAULT_THRESHOLD, EvaluationError, ReportConflictError
from app.core.prompt_manager import TemplateRenderError
from app.core.run_config import ConfigError, LoggingSettings, RunConfig, load_config, parse_ablation_flags
from app.core.scripted_api_manager import ScriptLoadError
from app.database.corpus_index import DuplicateDocumentError
from app.database.dataset_loader import DatasetError, DatasetValidationFailed
from app.database.run_store import RunFileError
from app.integrations.cli_commands import (
    ExitCode,
    ProviderUnreachableError,
    cmd_ablate,
    cmd_eval,
    cmd_report,
    cmd_run,
)


def setup_logging(settings: LoggingSettings):
    """Настройка логирования: файл с ротацией + stderr (stdout остаётся для таблиц)"""

    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if settings.file:
        log_dir = os.path.dirname(settings.file)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
        handlers.append(RotatingFileHandler(
            settings.file,
            maxBytes=settings.max_file_size_mb * 1024 * 1024,
            backupCount=settings.backup_count,
            encoding="utf-8",
        ))

    logging.basicConfig(
        level=getattr(logging, settings.level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="verifact", description="VeriFact-CoT runs and evaluation")
    parser.add_argument("--config", help="JSON config (default: config/config.json if present)")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p: argparse.ArgumentParser):
        p.add_argument("--dataset")
        p.add_argument("--corpus")
        p.add_argument("--method", choices=["verifact", "standard_cot", "cot_rag"])
        p.add_argument("--ablate", help="comma list of claim-extraction|verification|refinement")
        p.add_argument("--out")
        p.add_argument("--threshold", type=float)
        p.add_argument("--k", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--model", help="override provider.model")
        p.add_argument("--script", help="scripted provider file (provider.kind=mock)")
        p.add_argument("--format", choices=["plain", "delimited"], default="plain")

    run = sub.add_parser("run", help="execute a method over a dataset")
    run_flags(run)

    ablate = sub.add_parser("ablate", help="run the four method variants and compare them")
    run_flags(ablate)
    ablate.add_argument("--with-baseline", action="store_true", help="also run Standard CoT")

    evaluate = sub.add_parser("eval", help="score a run file against a dataset")
    evaluate.add_argument("runs", help="run file (JSONL)")
    evaluate.add_argument("--dataset")
    evaluate.add_argument("--threshold", type=float)
    evaluate.add_argument("--out", help="report file (default: <runs>.report.json)")
    evaluate.add_argument("--format", choices=["plain", "delimited"], default="plain")
    evaluate.add_argument("--show-cost", action="store_true")

    report = sub.add_parser("report", help="merge report files into one table")
    report.add_argument("reports", nargs="+")
    report.add_argument("--format", choices=["plain", "delimited"], default="plain")
    report.add_argument("--show-cost", action="store_true")

    return parser


def cli_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Флаги CLI -> вложенный словарь поверх файла конфигурации"""
    run: Dict[str, Any] = {}
    for name in ("dataset", "corpus", "method", "out", "threshold", "k", "workers"):
        value = getattr(args, name, None)
        if value is not None:
            run[name] = value
    if getattr(args, "ablate", None):
        run["ablation"] = parse_ablation_flags(args.ablate).model_dump()

    overrides: Dict[str, Any] = {"run": run} if run else {}
    provider: Dict[str, Any] = {}
    if getattr(args, "model", None):
        provider["model"] = args.model
    if getattr(args, "script", None):
        provider.update(kind="mock", script_path=args.script)
    if provider:
        overrides["provider"] = provider
    return overrides


def exit_code_for(error: Exception) -> int:
    if isinstance(error, (DatasetValidationFailed, EvaluationError, ReportConflictError, DuplicateDocumentError)):
        return ExitCode.VALIDATION
    if isinstance(error, (ProviderUnreachableError, ProviderError)):
        return ExitCode.PROVIDER
    return ExitCode.CONFIG


async def dispatch(args: argparse.Namespace) -> int:
    if args.command == "report":
        setup_logging(LoggingSettings(file=None))
        return await cmd_report(args.reports, args.format, args.show_cost)

    if args.command == "eval":
        config: Optional[RunConfig] = None
        try:
            config = load_config(args.config)
        except ConfigError:
            # eval обходится без провайдера
            if args.config:
                raise
        setup_logging(config.logging if config else LoggingSettings(file=None))
        dataset = args.dataset or (config.run.dataset if config else None)
        if not dataset:
            raise ConfigError("eval needs --dataset")
        threshold = args.threshold or (config.run.threshold if config else DEFAULT_THRESHOLD)
        return await cmd_eval(args.runs, dataset, threshold, args.out, args.format, args.show_cost)

    config = load_config(args.config, cli_overrides(args))
    setup_logging(config.logging)
    logging.getLogger(__name__).info(
        f"Запуск {args.command}: method={config.run.method.value}, model={config.provider.model}"
    )

    if args.command == "run":
        return await cmd_run(config)
    return await cmd_ablate(config, with_baseline=args.with_baseline, fmt=args.format)


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)

    try:
        return int(asyncio.run(dispatch(args)))
    except (ConfigError, DatasetError, RunFileError, ScriptLoadError, TemplateRenderError,
            EvaluationError, ReportConflictError, ProviderUnreachableError, ProviderError,
            DuplicateDocumentError, OSError) as e:
        print(f"❌ {e}", file=sys.stderr)
        logging.getLogger(__name__).error(f"{args.command} failed: {e}")
        return exit_code_for(e)
    except KeyboardInterrupt:
        print("\n👋 Прервано", file=sys.stderr)
        return ExitCode.CONFIG


if __name__ == "__main__":
    sys.exit(main())
