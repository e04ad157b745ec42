import sys
from pathlib import Path

import pytest
from pydantic import ValidationError

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from app.core.models import (
    AblationConfig,
    ChatMessage,
    CitationMarker,
    CitedAnswer,
    FactLabel,
    GoldFact,
    ReasonedAnswer,
    ReasoningTrace,
    Role,
    RunRecord,
    StageAttempt,
    StageFailure,
    StageOutcome,
    StageTag,
    TaskInstance,
    TaskType,
    TokenUsage,
    TraceStage,
    Method,
    validate_dataset,
)


def _task(task_id="t1", query="q?", facts=None):
    return TaskInstance(id=task_id, task_type=TaskType.FACTUAL_QA, query=query, gold_facts=facts or [])


def test_validate_dataset_reports_every_violation():
    facts = [
        GoldFact(fact_id="f1", statement="x", label=FactLabel.SUPPORTED),
        GoldFact(fact_id="f1", statement=" ", label=FactLabel.REFUTED, requires_citation=True),
    ]
    tasks = [_task(facts=facts), _task(query="  ")]

    errors = validate_dataset(tasks)
    fields = sorted(error.field for error in errors)
    assert fields == ["fact_id", "id", "query", "requires_citation", "statement"]


def test_validate_dataset_accepts_clean_tasks():
    fact = GoldFact(
        fact_id="f1", statement="x", label=FactLabel.SUPPORTED,
        allowed_sources=["Britannica"], requires_citation=True,
    )
    assert validate_dataset([_task(facts=[fact]), _task("t2")]) == []


def test_chat_message_requires_content_for_prompts():
    with pytest.raises(ValidationError):
        ChatMessage(role=Role.USER, content="   ")
    assert ChatMessage(role=Role.ASSISTANT, content="").to_wire() == {"role": "assistant", "content": ""}


def test_token_usage_adds_up():
    total = TokenUsage(prompt_tokens=3, completion_tokens=4) + TokenUsage(prompt_tokens=1)
    assert total.total_tokens == 8


def test_final_answer_markers_must_be_contiguous():
    with pytest.raises(ValidationError):
        CitedAnswer(text="a [1] b [3]", stage=TraceStage.FINAL)

    answer = CitedAnswer(
        text="a [1] b [2]",
        markers=[CitationMarker(marker_index=1, source_ref=0), CitationMarker(marker_index=2, source_ref=1)],
        sources=["s1", "s2"],
        stage=TraceStage.FINAL,
    )
    assert len(answer.markers) == 2


def test_initial_answer_is_not_checked_for_contiguity():
    answer = CitedAnswer(text="see [2] and [7]", stage=TraceStage.INITIAL)
    assert answer.markers == []


def test_stage_outcome_needs_exactly_one_result():
    with pytest.raises(ValidationError):
        StageOutcome(stage_tag=StageTag.INITIAL_COT)

    outcome = StageOutcome(
        stage_tag=StageTag.VERIFY_SIMULATE,
        attempts=[
            StageAttempt(messages=[], raw="x", usage=TokenUsage(prompt_tokens=2), retry_count=1, duration_ms=5),
            StageAttempt(messages=[], raw="y", usage=TokenUsage(completion_tokens=3), retry_count=2, duration_ms=7),
        ],
        failure=StageFailure(kind="parse_id_coverage", message="missing claim ids [2]"),
        repair_used=True,
    )
    assert outcome.raw == "y"
    assert outcome.retry_count == 3
    assert outcome.usage.total_tokens == 5
    assert outcome.duration_ms == 12


def test_run_record_markers_must_resolve():
    trace = ReasoningTrace(steps=["s"], raw="1. s", stage=TraceStage.FINAL)
    answer = CitedAnswer(
        text="x [1]",
        markers=[CitationMarker(marker_index=1, source_ref=0)],
        sources=["s"],
        stage=TraceStage.FINAL,
    )
    with pytest.raises(ValidationError):
        RunRecord(task_id="t1", method=Method.VERIFACT, final=ReasonedAnswer(trace=trace, answer=answer))


def test_run_record_survives_json_round_trip():
    trace = ReasoningTrace(steps=["s"], raw="1. s", stage=TraceStage.INITIAL)
    answer = CitedAnswer(text="x", stage=TraceStage.INITIAL)
    result = ReasonedAnswer(trace=trace, answer=answer)
    record = RunRecord(
        task_id="t1",
        method=Method.VERIFACT,
        ablation=AblationConfig(skip_refinement=True),
        initial=result,
        final=result,
        verification_report_attached=True,
    )
    assert RunRecord.model_validate_json(record.model_dump_json()) == record
    assert record.succeeded
    assert not record.ablation.is_full
