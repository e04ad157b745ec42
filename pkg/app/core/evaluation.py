"""
Метрики качества прогонов: фактическая точность, доля галлюцинаций, качество цитирования.

Утверждения сопоставляются с эталонными фактами по Jaccard-сходству множеств токенов.
Доли считаются в рациональной арифметике (Fraction) и только в конце переводятся во float.
"""

import logging
import re
from enum import Enum
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import pandas as pd

from .models import (
    TASK_TYPE_LABELS,
    AblationConfig,
    EvalReport,
    FactLabel,
    FrozenModel,
    GoldFact,
    GroupRow,
    Method,
    MetricRow,
    RunRecord,
    TaskInstance,
    TaskType,
    VerificationRecord,
)
from .stage_parsers import normalize_whitespace

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.6

METRIC_COLUMNS = [
    "factual_accuracy",
    "hallucination_rate",
    "neutral_rate",
    "citation_precision",
    "citation_recall",
    "citation_f1",
    "provider_calls",
    "total_tokens",
    "latency_ms",
]

SENTENCE_BOUNDARY = re.compile(r"(?<=[.!?])\s+(?=[A-Z])")
MARKER_RE = re.compile(r"\[(\d+)\]")
PUNCTUATION_RE = re.compile(r"[^\w\s]")


class EvaluationError(Exception):
    """Прогон нельзя оценить: неизвестная задача или нарушена схема"""


class ReportConflictError(Exception):
    """Одна и та же группа (метод, тип задачи) встречается в нескольких отчётах"""


class Bucket(str, Enum):
    CORRECT = "correct"
    HALLUCINATED = "hallucinated"
    NEUTRAL = "neutral"


class ClaimMatch(FrozenModel):
    claim_id: int
    matched_fact_id: Optional[str] = None
    overlap_score: float = 0.0
    bucket: Bucket


# ---------------------------------------------------------------- варианты метода

VARIANT_FLAGS = (
    ("skip_claim_extraction", "no_claim_extraction", "Claim Extraction"),
    ("skip_verification", "no_verification", "Verification Simulation"),
    ("skip_refinement", "no_refinement", "Refinement & Integration"),
)

METHOD_LABELS = {
    Method.STANDARD_COT.value: "Standard CoT",
    Method.COT_RAG.value: "CoT + Basic RAG",
    Method.VERIFACT.value: "VeriFact-CoT",
}

ABLATION_ORDER = [
    Method.STANDARD_COT.value,
    "verifact/no_claim_extraction",
    "verifact/no_verification",
    "verifact/no_refinement",
    Method.VERIFACT.value,
]

ABLATION_LABELS = {
    Method.STANDARD_COT.value: "Standard CoT (Baseline)",
    Method.VERIFACT.value: "VeriFact-CoT (Full)",
}


def method_key(method: Method, ablation: AblationConfig) -> str:
    """Ключ метода для группировки: verifact/no_verification и т.п."""
    if method != Method.VERIFACT or ablation.is_full:
        return method.value
    skipped = [key for flag, key, _ in VARIANT_FLAGS if getattr(ablation, flag)]
    return "verifact/" + "+".join(skipped)


def method_label(key: str, ablation_table: bool = False) -> str:
    if ablation_table and key in ABLATION_LABELS:
        return ABLATION_LABELS[key]
    if key in METHOD_LABELS:
        return METHOD_LABELS[key]
    if key.startswith("verifact/"):
        names = {variant: name for _, variant, name in VARIANT_FLAGS}
        skipped = [names.get(part, part) for part in key.split("/", 1)[1].split("+")]
        return "VeriFact-CoT w/o " + ", ".join(skipped)
    return key


def task_type_label(value: str) -> str:
    try:
        return TASK_TYPE_LABELS[TaskType(value)]
    except ValueError:
        return value


# ---------------------------------------------------------------- сопоставление


def normalize(text: str) -> str:
    """Нижний регистр, без пунктуации, схлопнутые пробелы"""
    return " ".join(PUNCTUATION_RE.sub("", text.lower()).split())


def jaccard(left: str, right: str) -> Fraction:
    a, b = set(normalize(left).split()), set(normalize(right).split())
    union = a | b
    if not union:
        return Fraction(0)
    return Fraction(len(a & b), len(union))


def as_fraction(threshold: float) -> Fraction:
    return Fraction(str(threshold))


def match_claim(claim_text: str, gold_facts: Sequence[GoldFact], threshold: float = DEFAULT_THRESHOLD,
                claim_id: int = 0) -> ClaimMatch:
    """Лучший эталонный факт с overlap >= threshold; при равенстве - первый по порядку"""
    limit = as_fraction(threshold)
    best: Optional[GoldFact] = None
    best_score = Fraction(0)

    for fact in gold_facts:
        score = jaccard(claim_text, fact.statement)
        if score >= limit and (best is None or score > best_score):
            best, best_score = fact, score

    if best is None:
        return ClaimMatch(claim_id=claim_id, bucket=Bucket.HALLUCINATED)

    bucket = {
        FactLabel.SUPPORTED: Bucket.CORRECT,
        FactLabel.REFUTED: Bucket.HALLUCINATED,
        FactLabel.NEUTRAL: Bucket.NEUTRAL,
    }[best.label]
    return ClaimMatch(claim_id=claim_id, matched_fact_id=best.fact_id, overlap_score=float(best_score), bucket=bucket)


def segment_sentences(text: str) -> List[str]:
    """Предложения: граница - . ! ? и пробел перед заглавной буквой"""
    return [part.strip() for part in SENTENCE_BOUNDARY.split(text.strip()) if part.strip()]


def strip_markers(text: str) -> str:
    return " ".join(MARKER_RE.sub("", text).split())


# ---------------------------------------------------------------- оценка прогона


def citation_f1(precision: Fraction, recall: Fraction, markers: int, required: int) -> Fraction:
    if markers == 0 and required == 0:
        return Fraction(1)
    if precision + recall == 0:
        return Fraction(0)
    return 2 * precision * recall / (precision + recall)


def _candidate_claims(run: RunRecord, record: VerificationRecord) -> List[int]:
    """claim_id всех записей проверки с тем же источником; запись самого маркера - первой"""
    key = normalize_whitespace(record.source)
    candidates = [record.claim_id]
    for other in run.citation_records:
        if other.unattributed or other.claim_id is None or other.claim_id in candidates:
            continue
        if normalize_whitespace(other.source) == key:
            candidates.append(other.claim_id)
    return candidates


def _scored_claims(run: RunRecord) -> Tuple[List[Tuple[int, str]], Dict[int, List[int]]]:
    """
    Утверждения для оценки и привязка маркер -> кандидаты claim_id.

    Извлечённые утверждения берутся как есть, маркер привязан через claim_id записи.
    Один источник может стоять у нескольких записей: кандидатами считаются все они.
    Иначе ответ режется на предложения, маркер привязан к предложению, где он стоит.
    """
    answer = run.final.answer
    if run.claims and not run.synthetic_claims:
        claims = [(claim.claim_id, claim.text) for claim in run.claims]
        marker_claims = {}
        for marker in answer.markers:
            record = run.citation_records[marker.source_ref]
            if not record.unattributed and record.claim_id is not None:
                marker_claims[marker.marker_index] = _candidate_claims(run, record)
        return claims, marker_claims

    claims = []
    marker_claims = {}
    for position, sentence in enumerate(segment_sentences(answer.text), start=1):
        claims.append((position, strip_markers(sentence)))
        for index in MARKER_RE.findall(sentence):
            marker_claims.setdefault(int(index), [position])

    unattributed = {m.marker_index for m in answer.markers if run.citation_records[m.source_ref].unattributed}
    return claims, {i: cid for i, cid in marker_claims.items() if i not in unattributed}


def score_run(run: RunRecord, task: TaskInstance, threshold: float = DEFAULT_THRESHOLD) -> MetricRow:
    if run.final is None:
        raise EvaluationError(f"run for task {run.task_id!r} has no final answer")

    claims, marker_claims = _scored_claims(run)
    matches = {cid: match_claim(text, task.gold_facts, threshold, claim_id=cid) for cid, text in claims}
    facts = {fact.fact_id: fact for fact in task.gold_facts}

    total = len(matches)
    counts = {bucket: sum(1 for m in matches.values() if m.bucket == bucket) for bucket in Bucket}
    if total:
        accuracy = Fraction(counts[Bucket.CORRECT], total)
        hallucination = Fraction(counts[Bucket.HALLUCINATED], total)
        neutral = Fraction(counts[Bucket.NEUTRAL], total)
    else:
        logger.warning(f"[{run.task_id}] нет утверждений для оценки")
        accuracy, hallucination, neutral = Fraction(0), Fraction(0), Fraction(1)

    markers = run.final.answer.markers
    covered = set()
    credited = 0
    for marker in markers:
        source = normalize(run.citation_records[marker.source_ref].source)
        for claim_id in marker_claims.get(marker.marker_index, []):
            match = matches.get(claim_id)
            if match is None or match.bucket != Bucket.CORRECT:
                continue
            allowed = [normalize(s) for s in facts[match.matched_fact_id].allowed_sources]
            if any(a and a in source for a in allowed):
                credited += 1
                covered.add(match.matched_fact_id)
                break

    required = [fact.fact_id for fact in task.gold_facts if fact.requires_citation]
    precision = Fraction(credited, len(markers)) if markers else Fraction(0)
    recall = Fraction(sum(1 for fid in required if fid in covered), len(required)) if required else Fraction(1)
    f1 = citation_f1(precision, recall, len(markers), len(required))

    return MetricRow(
        task_id=run.task_id,
        method=method_key(run.method, run.ablation),
        task_type=task.task_type.value,
        factual_accuracy=float(accuracy),
        hallucination_rate=float(hallucination),
        neutral_rate=float(neutral),
        citation_precision=float(precision),
        citation_recall=float(recall),
        citation_f1=float(f1),
        claim_count=total,
        empty_claims=total == 0,
        provider_calls=run.provider_calls,
        total_tokens=run.total_usage.total_tokens,
        latency_ms=run.duration_ms,
    )


def evaluate_runs(runs: Iterable[RunRecord], tasks: Sequence[TaskInstance],
                  threshold: float = DEFAULT_THRESHOLD) -> EvalReport:
    """Оценивает прогоны против датасета; прогоны без финального ответа пропускаются"""
    by_id = {task.id: task for task in tasks}
    rows: List[MetricRow] = []
    skipped: List[str] = []

    for run in runs:
        task = by_id.get(run.task_id)
        if task is None:
            raise EvaluationError(f"run references unknown task id {run.task_id!r}")
        if run.final is None:
            logger.warning(f"[{run.task_id}] прогон без финального ответа пропущен (стадия {run.failed_stage})")
            skipped.append(run.task_id)
            continue
        rows.append(score_run(run, task, threshold))

    report = aggregate(rows)
    return report.model_copy(update={"skipped_runs": skipped})


# ---------------------------------------------------------------- агрегация


def _order_key(method: str, task_type: str) -> Tuple:
    type_order = [t.value for t in TaskType]
    method_order = [Method.STANDARD_COT.value, Method.COT_RAG.value] + ABLATION_ORDER[1:-1] + [Method.VERIFACT.value]
    return (
        type_order.index(task_type) if task_type in type_order else len(type_order),
        task_type,
        method_order.index(method) if method in method_order else len(method_order),
        method,
    )


def _group_rows(frame: pd.DataFrame, keys: List[str]) -> List[GroupRow]:
    groups = []
    for key, group in frame.groupby(keys, sort=False):
        if group.empty:
            logger.warning(f"Пустая группа {key} пропущена")
            continue
        means = group[METRIC_COLUMNS].mean()
        values = dict(zip(keys, key if isinstance(key, tuple) else (key,)))
        groups.append(GroupRow(
            method=values.get("method", "all"),
            task_type=values.get("task_type", "all"),
            n_tasks=len(group),
            claim_count=int(group["claim_count"].sum()),
            empty_claims=bool(group["empty_claims"].all()),
            **{column: min(max(float(means[column]), 0.0), 1.0) if column in METRIC_COLUMNS[:6]
               else float(means[column]) for column in METRIC_COLUMNS},
        ))
    return groups


def aggregate(rows: Sequence[MetricRow]) -> EvalReport:
    """Невзвешенное среднее метрик по группам метод x тип задачи плюс общая строка"""
    ordered = sorted(rows, key=lambda row: (row.task_id, row.method))
    if not ordered:
        return EvalReport()

    frame = pd.DataFrame([row.model_dump() for row in ordered])
    groups = _group_rows(frame, ["method", "task_type"])
    groups.sort(key=lambda g: _order_key(g.method, g.task_type))

    frame["all"] = "all"
    overall = _group_rows(frame, ["all"])[0]
    overall = overall.model_copy(update={"method": "all", "task_type": "all"})

    return EvalReport(rows=ordered, groups=groups, overall=overall)


def aggregate_by_method(rows: Sequence[MetricRow]) -> List[GroupRow]:
    """Средние по методу поверх всех типов задач (таблица абляций)"""
    if not rows:
        return []
    frame = pd.DataFrame([row.model_dump() for row in rows])
    groups = _group_rows(frame, ["method"])
    return sorted(groups, key=lambda g: _order_key(g.method, "all")[2:])


def merge_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Объединяет отчёты; повтор группы (метод, тип задачи) - конфликт"""
    seen: Dict[Tuple[str, str], int] = {}
    groups: List[GroupRow] = []
    rows: List[MetricRow] = []
    skipped: List[str] = []

    for index, report in enumerate(reports):
        for group in report.groups:
            key = (group.method, group.task_type)
            if key in seen:
                raise ReportConflictError(
                    f"group {method_label(group.method)} / {task_type_label(group.task_type)} "
                    f"appears in reports {seen[key] + 1} and {index + 1}"
                )
            seen[key] = index
            groups.append(group)
        rows.extend(report.rows)
        skipped.extend(report.skipped_runs)

    merged = aggregate(rows) if rows else EvalReport()
    groups.sort(key=lambda g: _order_key(g.method, g.task_type))
    return merged.model_copy(update={"groups": groups, "skipped_runs": skipped})


# ---------------------------------------------------------------- вывод


def percent(value: float) -> str:
    return str(round(value * 100))


def quality(value: float) -> str:
    return f"{value:.2f}"


def _table(header: List[str], rows: List[List[str]], fmt: str) -> str:
    if fmt == "delimited":
        return "\n".join("\t".join(cells) for cells in [header] + rows) + "\n"
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines.extend("| " + " | ".join(cells) + " |" for cells in rows)
    return "\n".join(lines) + "\n"


def _cost_cells(group: GroupRow) -> List[str]:
    return [f"{group.provider_calls:.2f}", f"{group.total_tokens:.0f}", f"{group.latency_ms:.0f}"]


COST_HEADER = ["Calls", "Tokens", "Latency (ms)"]


def render_report(report: EvalReport, fmt: str = "plain", show_cost: bool = False) -> str:
    """
    Таблица: Task Type | Method | Factual ACC | Hallucination (↓) | Citation Quality.
    Проценты - целые (round), качество цитирования - два знака.

    Args:
        fmt: "plain" (таблица с | ) или "delimited" (табуляция)
        show_cost: добавить средние вызовы, токены и задержку
    """
    header = ["Task Type", "Method", "Factual ACC", "Hallucination (↓)", "Citation Quality"]
    if show_cost:
        header += COST_HEADER

    rows = []
    for group in report.groups:
        cells = [
            task_type_label(group.task_type),
            method_label(group.method),
            percent(group.factual_accuracy),
            percent(group.hallucination_rate),
            quality(group.citation_f1),
        ]
        if show_cost:
            cells += _cost_cells(group)
        rows.append(cells)
    return _table(header, rows, fmt)


def render_ablation_table(report: EvalReport, fmt: str = "plain", show_cost: bool = False) -> str:
    """Таблица вариантов метода: Method Variant | Factual ACC | Hallucination (↓) | Citation Quality"""
    header = ["Method Variant", "Factual ACC", "Hallucination (↓)", "Citation Quality"]
    if show_cost:
        header += COST_HEADER

    rows = []
    for group in aggregate_by_method(report.rows):
        cells = [
            method_label(group.method, ablation_table=True),
            percent(group.factual_accuracy),
            percent(group.hallucination_rate),
            quality(group.citation_f1),
        ]
        if show_cost:
            cells += _cost_cells(group)
        rows.append(cells)
    return _table(header, rows, fmt)
