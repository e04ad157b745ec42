"""
Команды CLI: run, eval, ablate, report
"""

import asyncio
import logging
from enum import IntEnum
from pathlib import Path
from typing import Callable, List, Optional, Sequence

from pydantic import ValidationError

from ..core.chat_api_manager import CompletionProvider, create_api_manager
from ..core.evaluation import (
    EvaluationError,
    ReportConflictError,
    evaluate_runs,
    merge_reports,
    render_ablation_table,
    render_report,
)
from ..core.models import AblationConfig, EvalReport, Method, RunRecord, TaskInstance
from ..core.prompt_manager import PromptManager
from ..core.run_config import ConfigError, RunConfig
from ..core.verifact_pipeline import VerifactPipeline
from ..database.corpus_index import index_corpus
from ..database.dataset_loader import load_corpus, load_dataset
from ..database.run_store import OrderedRunWriter, RunFileError, RunStore

logger = logging.getLogger(__name__)

FAIL_FAST_KINDS = {"provider_transport", "provider_timeout", "provider_status"}

ABLATION_VARIANTS = [
    ("full", AblationConfig()),
    ("no_claim_extraction", AblationConfig(skip_claim_extraction=True)),
    ("no_verification", AblationConfig(skip_verification=True)),
    ("no_refinement", AblationConfig(skip_refinement=True)),
]


class ExitCode(IntEnum):
    OK = 0
    CONFIG = 1
    PROVIDER = 2
    VALIDATION = 3


class ProviderUnreachableError(Exception):
    """Первый же вызов провайдера не прошёл - дальше не идём"""


class RunSummary:
    def __init__(self, out: Path, total: int, written: int, already_present: int, failed: int):
        self.out = out
        self.total = total
        self.written = written
        self.already_present = already_present
        self.failed = failed

    def __str__(self) -> str:
        return (
            f"{self.written} run records written, {self.already_present} already present, "
            f"{self.failed} with stage failures ({self.total} tasks) -> {self.out}"
        )


ProviderFactory = Callable[[], CompletionProvider]


def _provider_factory(config: RunConfig, provider_factory: Optional[ProviderFactory]) -> ProviderFactory:
    return provider_factory or (lambda: create_api_manager(config.provider))


def _require_dataset(config: RunConfig) -> List[TaskInstance]:
    if not config.run.dataset:
        raise ConfigError("run.dataset is not set (use --dataset)")
    return load_dataset(config.run.dataset)


async def execute_runs(
    config: RunConfig,
    tasks: Sequence[TaskInstance],
    method: Method,
    ablation: AblationConfig,
    out: str,
    provider: CompletionProvider,
) -> RunSummary:
    """
    Выполняет метод по всем задачам, которых ещё нет в файле прогонов.
    Воркеры ограничены семафором, запись - через единственного писателя в порядке task id.
    """
    store = RunStore(out)
    store.repair_torn_tail()
    done = store.completed_task_ids()
    # Файл прогонов упорядочен по task id независимо от порядка в датасете
    pending = sorted((task for task in tasks if task.id not in done), key=lambda task: task.id)
    if done:
        logger.info(f"Продолжение: {len(done)} задач уже в {out}, осталось {len(pending)}")

    corpus = None
    if method == Method.COT_RAG:
        corpus = index_corpus(load_corpus(config.run.corpus))

    pipeline = VerifactPipeline(
        provider=provider,
        prompts=PromptManager(config.prompts.dir),
        params=config.provider.completion_params(),
        corpus=corpus,
        k=config.run.k,
    )
    writer = OrderedRunWriter(store)
    failed = 0

    async def run_one(index: int, task: TaskInstance) -> RunRecord:
        try:
            record = await pipeline.run_task(task, method, ablation)
        except Exception:
            await writer.skip(index)
            raise
        await writer.submit(index, record)
        return record

    if pending:
        first = await pipeline.run_task(pending[0], method, ablation)
        first_failure = first.stages[0].failure if first.stages else None
        if first_failure is not None and first_failure.kind in FAIL_FAST_KINDS:
            raise ProviderUnreachableError(f"provider failed on the first call: {first_failure.message}")
        await writer.submit(0, first)
        failed += not first.succeeded

        semaphore = asyncio.Semaphore(config.run.workers)

        async def bounded(index: int, task: TaskInstance) -> RunRecord:
            async with semaphore:
                return await run_one(index, task)

        results = await asyncio.gather(
            *(bounded(i, task) for i, task in enumerate(pending) if i > 0), return_exceptions=True
        )
        errors = [result for result in results if isinstance(result, BaseException)]
        failed += sum(1 for result in results if isinstance(result, RunRecord) and not result.succeeded)
        if errors:
            logger.error(f"❌ {len(errors)} задач завершились исключением, остальные записаны в {out}")
            raise errors[0]

    return RunSummary(Path(out), len(tasks), writer.written, len(done), failed)


async def cmd_run(config: RunConfig, provider_factory: Optional[ProviderFactory] = None) -> int:
    tasks = _require_dataset(config)
    provider = _provider_factory(config, provider_factory)()
    summary = await execute_runs(config, tasks, config.run.method, config.run.ablation, config.run.out, provider)
    print(f"✅ run: {summary}")
    return ExitCode.OK


def default_report_path(run_path: str) -> Path:
    path = Path(run_path)
    return path.with_name(path.stem + ".report.json")


def write_report(report: EvalReport, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")


async def cmd_eval(
    run_path: str,
    dataset_path: str,
    threshold: float,
    report_out: Optional[str] = None,
    fmt: str = "plain",
    show_cost: bool = False,
) -> int:
    runs = RunStore(run_path).read_runs()
    tasks = load_dataset(dataset_path)
    if not runs:
        logger.warning(f"⚠️ {run_path}: прогонов нет, отчёт будет пустым")

    report = evaluate_runs(runs, tasks, threshold)
    out = Path(report_out) if report_out else default_report_path(run_path)
    write_report(report, out)

    print(render_report(report, fmt, show_cost), end="")
    if report.skipped_runs:
        print(f"⚠️ skipped runs without a final answer: {', '.join(report.skipped_runs)}")
    return ExitCode.OK


def variant_out_path(out: str, variant: str) -> str:
    path = Path(out)
    return str(path.with_name(f"{path.stem}.{variant}{path.suffix or '.jsonl'}"))


async def cmd_ablate(
    config: RunConfig,
    provider_factory: Optional[ProviderFactory] = None,
    with_baseline: bool = False,
    fmt: str = "plain",
) -> int:
    """Четыре варианта метода (и базовый Standard CoT по запросу), затем сравнительная таблица"""
    if config.run.method != Method.VERIFACT:
        raise ConfigError("ablate requires run.method=verifact")

    tasks = _require_dataset(config)
    factory = _provider_factory(config, provider_factory)

    variants = [(name, Method.VERIFACT, ablation) for name, ablation in ABLATION_VARIANTS]
    if with_baseline:
        variants.insert(0, ("standard_cot", Method.STANDARD_COT, AblationConfig()))

    runs: List[RunRecord] = []
    for name, method, ablation in variants:
        out = variant_out_path(config.run.out, name)
        summary = await execute_runs(config, tasks, method, ablation, out, factory())
        print(f"✅ {name}: {summary}")
        runs.extend(RunStore(out).read_runs())

    report = evaluate_runs(runs, tasks, config.run.threshold)
    write_report(report, Path(variant_out_path(config.run.out, "ablation")).with_suffix(".report.json"))
    print(render_ablation_table(report, fmt, show_cost=True), end="")
    return ExitCode.OK


def load_report(path: str) -> EvalReport:
    try:
        return EvalReport.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise RunFileError(f"cannot read report {path}: {e}") from e
    except ValidationError as e:
        raise EvaluationError(f"report {path} does not match the report schema: {e}") from e


async def cmd_report(report_paths: Sequence[str], fmt: str = "plain", show_cost: bool = False) -> int:
    reports = [load_report(path) for path in report_paths]
    merged = merge_reports(reports)
    print(render_report(merged, fmt, show_cost), end="")
    return ExitCode.OK


__all__ = [
    "ExitCode",
    "ProviderUnreachableError",
    "ReportConflictError",
    "cmd_ablate",
    "cmd_eval",
    "cmd_report",
    "cmd_run",
    "execute_runs",
]
