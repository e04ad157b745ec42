"""
Грамматика ответов модели по стадиям и парсеры сырых ответов в доменные типы.

Каждая стадия требует от модели огороженные блоки BEGIN_X ... END_X.
Ключевые слова грамматики внутри содержимого экранируются обратным слэшем.
"""

import logging
import re
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .models import (
    ChatMessage,
    CitationMarker,
    CitedAnswer,
    ClaimOrigin,
    FactualClaim,
    ReasonedAnswer,
    ReasoningTrace,
    Role,
    StageTag,
    TraceStage,
    Verdict,
    VerificationQuery,
    VerificationRecord,
    marker_indices,
)

logger = logging.getLogger(__name__)

FENCE_NAMES = ("REASONING", "ANSWER", "CLAIMS", "EVIDENCE", "DOCS")
_FENCES = "|".join(FENCE_NAMES)
_TOKENS = rf"BEGIN_(?:{_FENCES})|END_(?:{_FENCES})|SOURCES:|\|\|"

# Токен вместе с серией слэшей перед ним
TOKEN_RE = re.compile(rf"(\\*)({_TOKENS})")
ESCAPED_TOKEN_RE = re.compile(rf"\\(\\*)({_TOKENS})")

NUMBERED_LINE_RE = re.compile(r"^\s*(\d+)[.)]\s*(.*)$")
CLAIM_FIELD_RE = re.compile(r"^CLAIM(?:\s*\((chain|answer)\))?:\s*(.*)$", re.DOTALL)
LABELED_FIELD_RE = re.compile(r"^([A-Z_]+):\s*(.*)$", re.DOTALL)

VERDICT_TOKENS = {
    "CONFIRMED": Verdict.CONFIRMED,
    "REFUTED": Verdict.REFUTED,
    "NEEDS_CONTEXT": Verdict.NEEDS_CONTEXT,
    "ALTERNATIVE": Verdict.ALTERNATIVE,
}
VERDICT_NAMES = {verdict: token for token, verdict in VERDICT_TOKENS.items()}

UNATTRIBUTED_EVIDENCE = "unattributed source: no verification record lists this source"

_COT_GRAMMAR = """Format your reply exactly like this:
BEGIN_REASONING
1. <first reasoning step>
2. <next reasoning step>
END_REASONING
BEGIN_ANSWER
<your final answer>
END_ANSWER
Put each fence keyword alone on its own line."""

GRAMMARS: Dict[StageTag, str] = {
    StageTag.INITIAL_COT: _COT_GRAMMAR,
    StageTag.STANDARD_COT: _COT_GRAMMAR,
    StageTag.RAG_COT: _COT_GRAMMAR,
    StageTag.CLAIM_EXTRACT: """Format your reply exactly like this:
BEGIN_CLAIMS
1. CLAIM: <declarative statement> || QUERY: <one verification question>
2. CLAIM (answer): <statement taken from the answer> || QUERY: <question>
END_CLAIMS
Number claims 1, 2, 3, ... without gaps. Write "CLAIM (answer):" for claims taken from the answer and "CLAIM:" for claims taken from the reasoning. If there is nothing to verify, reply with BEGIN_CLAIMS and END_CLAIMS on two lines.""",
    StageTag.VERIFY_SIMULATE: """Format your reply exactly like this:
BEGIN_EVIDENCE
1. VERDICT: <CONFIRMED|REFUTED|NEEDS_CONTEXT|ALTERNATIVE> || EVIDENCE: <evidence text> || SOURCE: <citation source>
END_EVIDENCE
Write one line per question, numbered with the question's number.""",
    StageTag.REFINE_INTEGRATE: """Format your reply exactly like this:
BEGIN_REASONING
1. <refined reasoning step>
END_REASONING
BEGIN_ANSWER
<refined answer with citation markers such as [1] and [2]>
SOURCES:
1. <source text for marker [1]>
2. <source text for marker [2]>
END_ANSWER
Number markers 1, 2, 3, ... without gaps and copy each source text exactly as it appears in the evidence.""",
}


class StageParseError(Exception):
    """Ответ модели не соответствует грамматике стадии"""

    def __init__(self, stage_tag: StageTag, kind: str, message: str, details: Optional[List] = None):
        super().__init__(message)
        self.stage_tag = stage_tag
        self.kind = kind
        self.details = details or []


# ---------------------------------------------------------------- экранирование


def escape(text: str) -> str:
    """Добавляет один слэш перед каждым ключевым словом грамматики"""
    return TOKEN_RE.sub(lambda m: "\\" + m.group(1) + m.group(2), text)


def unescape(text: str) -> str:
    """Обратная операция к escape: снимает ровно один слэш"""
    return ESCAPED_TOKEN_RE.sub(lambda m: m.group(1) + m.group(2), text)


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


def _split_fields(line: str) -> List[str]:
    """Делит строку по неэкранированным разделителям ||"""
    fields = []
    start = 0
    for match in TOKEN_RE.finditer(line):
        if match.group(1) == "" and match.group(2) == "||":
            fields.append(line[start:match.start()])
            start = match.end()
    fields.append(line[start:])
    return [field.strip() for field in fields]


# ---------------------------------------------------------------- блоки


def _fence_body(raw: str, name: str, stage_tag: StageTag) -> List[str]:
    """Строки между BEGIN_name и END_name (ключевые слова - только с начала строки)"""
    lines = raw.splitlines()
    begin = f"BEGIN_{name}"
    end = f"END_{name}"

    begin_at = next((i for i, line in enumerate(lines) if line.strip() == begin), None)
    if begin_at is None:
        raise StageParseError(stage_tag, "missing_fence", f"missing fence: {begin}", [begin])

    end_at = next((i for i in range(begin_at + 1, len(lines)) if lines[i].strip() == end), None)
    if end_at is None:
        raise StageParseError(stage_tag, "missing_fence", f"missing fence: {end}", [end])

    return lines[begin_at + 1:end_at]


def _require_body(body: List[str], name: str, stage_tag: StageTag) -> None:
    if not any(line.strip() for line in body):
        raise StageParseError(stage_tag, "empty_fence", f"empty fence: {name}", [name])


def _split_steps(body: List[str]) -> List[str]:
    """Шаги: нумерованные строки, иначе абзацы через пустую строку"""
    numbered = any(NUMBERED_LINE_RE.match(line) for line in body)
    steps: List[str] = []
    current: List[str] = []

    def flush():
        if current:
            steps.append(unescape(" ".join(current)))
            current.clear()

    for line in body:
        stripped = line.strip()
        if numbered:
            match = NUMBERED_LINE_RE.match(line)
            if match:
                flush()
                if match.group(2).strip():
                    current.append(match.group(2).strip())
            elif stripped:
                current.append(stripped)
        else:
            if stripped:
                current.append(stripped)
            else:
                flush()
    flush()
    return [step for step in steps if step.strip()]


def _reasoning(raw: str, stage_tag: StageTag, stage: TraceStage) -> ReasoningTrace:
    body = _fence_body(raw, "REASONING", stage_tag)
    _require_body(body, "REASONING", stage_tag)
    steps = _split_steps(body)
    if not steps:
        # Только пустые номера вида "1."
        raise StageParseError(stage_tag, "empty_fence", "empty fence: REASONING (no step text)", ["REASONING"])
    return ReasoningTrace(steps=steps, raw="\n".join(body).strip(), stage=stage)


def parse_cot(raw: str, stage_tag: StageTag = StageTag.INITIAL_COT) -> Tuple[ReasoningTrace, CitedAnswer]:
    """Разбирает ответ initial/standard/rag CoT в (C0, A0)"""
    trace = _reasoning(raw, stage_tag, TraceStage.INITIAL)
    answer_body = _fence_body(raw, "ANSWER", stage_tag)
    _require_body(answer_body, "ANSWER", stage_tag)

    answer = CitedAnswer(
        text=unescape("\n".join(answer_body).strip()),
        stage=TraceStage.INITIAL,
    )
    return trace, answer


def parse_claims(raw: str) -> Tuple[List[FactualClaim], List[VerificationQuery]]:
    """Разбирает блок CLAIMS в пары (f_i, v_i)"""
    stage_tag = StageTag.CLAIM_EXTRACT
    body = [line for line in _fence_body(raw, "CLAIMS", stage_tag) if line.strip()]
    if not body:
        raise StageParseError(stage_tag, "zero_claims", "no verifiable claims were listed")

    claims: List[FactualClaim] = []
    queries: List[VerificationQuery] = []

    for position, line in enumerate(body, start=1):
        match = NUMBERED_LINE_RE.match(line)
        if not match:
            raise StageParseError(
                stage_tag, "numbering", f"claim line {position} is not numbered; expected {position}", [position]
            )
        number = int(match.group(1))
        if number != position:
            raise StageParseError(
                stage_tag, "numbering",
                f"claims are not numbered contiguously: expected {position}, got {number}",
                [position],
            )

        fields = _split_fields(match.group(2))
        if len(fields) != 2:
            raise StageParseError(
                stage_tag, "separator",
                f'claim {number} must have exactly one "||" separator between CLAIM and QUERY',
                [number],
            )

        claim_match = CLAIM_FIELD_RE.match(fields[0])
        query_match = LABELED_FIELD_RE.match(fields[1])
        if not claim_match or not claim_match.group(2).strip():
            raise StageParseError(stage_tag, "missing_field", f"claim {number} is missing the CLAIM field", ["CLAIM"])
        if not query_match or query_match.group(1) != "QUERY" or not query_match.group(2).strip():
            raise StageParseError(stage_tag, "missing_field", f"claim {number} is missing the QUERY field", ["QUERY"])

        origin = ClaimOrigin.ANSWER if claim_match.group(1) == "answer" else ClaimOrigin.CHAIN
        claims.append(FactualClaim(claim_id=number, text=unescape(claim_match.group(2).strip()), origin=origin))
        queries.append(VerificationQuery(claim_id=number, text=unescape(query_match.group(2).strip())))

    return claims, queries


def parse_evidence(raw: str, expected_claim_ids: Sequence[int]) -> List[VerificationRecord]:
    """Разбирает блок EVIDENCE: ровно одна запись на каждый ожидаемый claim_id"""
    stage_tag = StageTag.VERIFY_SIMULATE
    body = [line for line in _fence_body(raw, "EVIDENCE", stage_tag) if line.strip()]

    records: Dict[int, VerificationRecord] = {}
    duplicates: List[int] = []

    for position, line in enumerate(body, start=1):
        match = NUMBERED_LINE_RE.match(line)
        if not match:
            raise StageParseError(stage_tag, "numbering", f"evidence line {position} is not numbered", [position])
        claim_id = int(match.group(1))

        fields: Dict[str, str] = {}
        for field in _split_fields(match.group(2)):
            labeled = LABELED_FIELD_RE.match(field)
            if labeled:
                fields[labeled.group(1)] = labeled.group(2).strip()

        for label in ("VERDICT", "EVIDENCE", "SOURCE"):
            if not fields.get(label):
                raise StageParseError(
                    stage_tag, "missing_field", f"evidence line for claim {claim_id} is missing the {label} field", [label]
                )

        token = fields["VERDICT"].strip().upper()
        if token not in VERDICT_TOKENS:
            raise StageParseError(
                stage_tag, "unknown_verdict",
                f"unknown verdict {fields['VERDICT']!r} for claim {claim_id}",
                [fields["VERDICT"]],
            )

        if claim_id in records:
            duplicates.append(claim_id)
            continue
        records[claim_id] = VerificationRecord(
            claim_id=claim_id,
            verdict=VERDICT_TOKENS[token],
            evidence=unescape(fields["EVIDENCE"]),
            source=unescape(fields["SOURCE"]),
        )

    expected = list(expected_claim_ids)
    missing = [cid for cid in expected if cid not in records]
    extra = sorted(cid for cid in records if cid not in set(expected))
    if missing or extra or duplicates:
        parts = []
        if missing:
            parts.append(f"missing claim ids {missing}")
        if extra:
            parts.append(f"unexpected claim ids {extra}")
        if duplicates:
            parts.append(f"duplicate claim ids {sorted(set(duplicates))}")
        raise StageParseError(stage_tag, "id_coverage", "; ".join(parts), missing + extra)

    return [records[cid] for cid in expected]


def _split_sources(answer_body: List[str]) -> Tuple[List[str], Optional[List[str]]]:
    """Отделяет строки ответа от блока SOURCES (если он есть)"""
    for i, line in enumerate(answer_body):
        if line.strip().startswith("SOURCES:"):
            tail = line.strip()[len("SOURCES:"):].strip()
            rest = ([tail] if tail else []) + answer_body[i + 1:]
            return answer_body[:i], rest
    return answer_body, None


def parse_refined(
    raw: str, verifications: Sequence[VerificationRecord]
) -> Tuple[ReasoningTrace, CitedAnswer, List[VerificationRecord]]:
    """
    Разбирает уточнённые (Cf, Af) и сопоставляет маркеры [n] записям проверки.

    Returns:
        (Cf, Af, citation_records) - записи стадии проверки плюс
        синтезированные записи для источников без соответствия
    """
    stage_tag = StageTag.REFINE_INTEGRATE
    trace = _reasoning(raw, stage_tag, TraceStage.FINAL)
    answer_body = _fence_body(raw, "ANSWER", stage_tag)
    text_lines, source_lines = _split_sources(answer_body)
    text = "\n".join(text_lines).strip()
    if not text:
        raise StageParseError(stage_tag, "empty_fence", "empty fence: ANSWER", ["ANSWER"])

    sources: List[str] = []
    for position, line in enumerate(l for l in (source_lines or []) if l.strip()):
        match = NUMBERED_LINE_RE.match(line)
        if not match or int(match.group(1)) != position + 1:
            raise StageParseError(
                stage_tag, "numbering",
                f"SOURCES entries must be numbered contiguously: expected {position + 1}",
                [position + 1],
            )
        sources.append(unescape(match.group(2).strip()))

    indices = marker_indices(text)
    top = max(indices) if indices else 0
    gaps = sorted(set(range(1, top + 1)) - indices)
    if gaps:
        raise StageParseError(
            stage_tag, "marker_gap",
            "citation markers have gaps: missing " + ", ".join(f"[{i}]" for i in gaps),
            gaps,
        )
    if len(sources) < top:
        raise StageParseError(
            stage_tag, "sources_count",
            f"SOURCES lists {len(sources)} entries but the answer uses markers up to [{top}]",
            [len(sources), top],
        )

    citation_records = list(verifications)
    by_source = {}
    for index, record in enumerate(citation_records):
        by_source.setdefault(normalize_whitespace(record.source), index)

    markers: List[CitationMarker] = []
    for marker_index in range(1, top + 1):
        key = normalize_whitespace(sources[marker_index - 1])
        if key not in by_source:
            logger.warning(f"Источник [{marker_index}] не найден среди записей проверки: {key[:60]}")
            citation_records.append(VerificationRecord(
                claim_id=None,
                verdict=Verdict.NEEDS_CONTEXT,
                evidence=UNATTRIBUTED_EVIDENCE,
                source=sources[marker_index - 1],
                unattributed=True,
            ))
            by_source[key] = len(citation_records) - 1
        markers.append(CitationMarker(marker_index=marker_index, source_ref=by_source[key]))

    answer = CitedAnswer(
        text=unescape(text),
        markers=markers,
        sources=sources,
        stage=TraceStage.FINAL,
    )
    return trace, answer, citation_records


# ---------------------------------------------------------------- канонические сериализаторы


def format_steps(steps: Iterable[str]) -> str:
    """Нумерованные шаги без экранирования (для подстановки в промпт)"""
    return "\n".join(f"{i}. {step}" for i, step in enumerate(steps, start=1))


def render_cot_block(steps: Sequence[str], answer_text: str) -> str:
    return "\n".join([
        "BEGIN_REASONING",
        format_steps(escape(step) for step in steps),
        "END_REASONING",
        "BEGIN_ANSWER",
        escape(answer_text),
        "END_ANSWER",
    ])


def render_claims_block(claims: Sequence[FactualClaim], queries: Sequence[VerificationQuery]) -> str:
    query_by_id = {q.claim_id: q for q in queries}
    lines = ["BEGIN_CLAIMS"]
    for claim in claims:
        label = "CLAIM (answer):" if claim.origin == ClaimOrigin.ANSWER else "CLAIM:"
        query = query_by_id[claim.claim_id]
        lines.append(f"{claim.claim_id}. {label} {escape(claim.text)} || QUERY: {escape(query.text)}")
    lines.append("END_CLAIMS")
    return "\n".join(lines)


def render_queries_block(queries: Sequence[VerificationQuery]) -> str:
    return "\n".join(f"{q.claim_id}. QUERY: {escape(q.text)}" for q in queries)


def render_evidence_block(records: Sequence[VerificationRecord]) -> str:
    lines = ["BEGIN_EVIDENCE"]
    for record in records:
        if record.claim_id is None:
            continue
        lines.append(
            f"{record.claim_id}. VERDICT: {VERDICT_NAMES[record.verdict]} "
            f"|| EVIDENCE: {escape(record.evidence)} || SOURCE: {escape(record.source)}"
        )
    lines.append("END_EVIDENCE")
    return "\n".join(lines)


def render_refined_block(steps: Sequence[str], answer_text: str, sources: Sequence[str]) -> str:
    lines = [
        "BEGIN_REASONING",
        format_steps(escape(step) for step in steps),
        "END_REASONING",
        "BEGIN_ANSWER",
        escape(answer_text),
    ]
    if sources:
        lines.append("SOURCES:")
        lines.extend(f"{i}. {escape(source)}" for i, source in enumerate(sources, start=1))
    lines.append("END_ANSWER")
    return "\n".join(lines)


def render_docs_block(docs: Sequence[Tuple[str, str]]) -> str:
    lines = ["BEGIN_DOCS"]
    lines.extend(f"[{doc_id}] {escape(normalize_whitespace(text))}" for doc_id, text in docs)
    lines.append("END_DOCS")
    return "\n".join(lines)


def as_reasoned_answer(trace: ReasoningTrace, answer: CitedAnswer) -> ReasonedAnswer:
    return ReasonedAnswer(trace=trace, answer=answer)


# ---------------------------------------------------------------- ремонт


_REPAIR_HINTS = {
    "numbering": "Renumber claims contiguously starting from 1 (1, 2, 3, ...) with no gaps.",
    "separator": 'Separate the fields of every line with " || ".',
    "unknown_verdict": "Use only these verdict tokens: CONFIRMED, REFUTED, NEEDS_CONTEXT, ALTERNATIVE.",
    "id_coverage": "Write exactly one evidence line for every question number you were given.",
    "missing_field": "Every line must contain all of its labeled fields.",
    "marker_gap": "Number citation markers contiguously: [1], [2], [3], ... with no gaps.",
    "sources_count": "List one SOURCES entry for every citation marker you use.",
}


def repair_prompt(stage_tag: StageTag, error: StageParseError) -> ChatMessage:
    """Одно корректирующее сообщение: цитирует ошибку и повторяет грамматику"""
    if error.kind in ("missing_fence", "empty_fence"):
        fence = error.details[0] if error.details else "the required fences"
        hint = f"Your reply must contain the {fence} fence with nonempty content, alone on its own line."
    else:
        hint = _REPAIR_HINTS.get(error.kind, "Follow the required format exactly.")

    content = (
        f"Your previous reply could not be parsed: {error}.\n"
        f"{hint}\n"
        "Reply again with the complete output.\n"
        f"{GRAMMARS[stage_tag]}"
    )
    return ChatMessage(role=Role.USER, content=content)
