# Доменные типы VeriFact-CoT: задачи, цепочки рассуждений, утверждения, проверки, прогоны

import re
from enum import Enum
from typing import Annotated, Dict, List, Literal, Optional, Union

from pydantic import AfterValidator, BaseModel, ConfigDict, Field, model_validator

MARKER_PATTERN = re.compile(r"\[(\d+)\]")


class TaskType(str, Enum):
    """Типы задач"""
    FACTUAL_QA = "factual_qa"
    SUMMARIZATION_CITED = "summarization_cited"
    EXPLANATORY = "explanatory"
    CONTROVERSIAL = "controversial"


TASK_TYPE_LABELS = {
    TaskType.FACTUAL_QA: "Complex Factual QA",
    TaskType.SUMMARIZATION_CITED: "Summarization with Citations",
    TaskType.EXPLANATORY: "Explanatory Content Generation",
    TaskType.CONTROVERSIAL: "Controversial Topic Analysis",
}


class FactLabel(str, Enum):
    SUPPORTED = "supported"
    REFUTED = "refuted"
    NEUTRAL = "neutral"


class TraceStage(str, Enum):
    INITIAL = "initial"
    FINAL = "final"


class ClaimOrigin(str, Enum):
    CHAIN = "chain"
    ANSWER = "answer"


class Verdict(str, Enum):
    """Категории вердиктов симулированной проверки"""
    CONFIRMED = "confirmed"
    REFUTED = "refuted"
    NEEDS_CONTEXT = "needs_context"
    ALTERNATIVE = "alternative"


class Method(str, Enum):
    VERIFACT = "verifact"
    STANDARD_COT = "standard_cot"
    COT_RAG = "cot_rag"


class StageTag(str, Enum):
    """Теги стадий - по одному шаблону промпта на каждую"""
    INITIAL_COT = "initial_cot"
    CLAIM_EXTRACT = "claim_extract"
    VERIFY_SIMULATE = "verify_simulate"
    REFINE_INTEGRATE = "refine_integrate"
    STANDARD_COT = "standard_cot"
    RAG_COT = "rag_cot"


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


class FrozenModel(BaseModel):
    """База для всех доменных типов: неизменяемы после создания"""
    model_config = ConfigDict(frozen=True, use_enum_values=False)


def _require_text(value: str) -> str:
    if not value or not value.strip():
        raise ValueError("must be a nonempty text")
    return value


NonEmptyText = Annotated[str, AfterValidator(_require_text)]


# ---------------------------------------------------------------- задачи и эталон


class SourceDocument(FrozenModel):
    doc_id: str
    text: str


class GoldFact(FrozenModel):
    """Эталонный факт. Инварианты проверяет validate_dataset, а не конструктор"""
    fact_id: str
    statement: str
    label: FactLabel
    allowed_sources: List[str] = Field(default_factory=list)
    requires_citation: bool = False


class TaskInstance(FrozenModel):
    id: str
    task_type: TaskType
    query: str
    source_documents: List[SourceDocument] = Field(default_factory=list)
    gold_facts: List[GoldFact] = Field(default_factory=list)


class DatasetValidationError(FrozenModel):
    """Одно нарушение инварианта датасета"""
    task_id: str
    field: str
    message: str

    def __str__(self) -> str:
        return f"task {self.task_id!r}: {self.field}: {self.message}"


def validate_dataset(tasks: List[TaskInstance]) -> List[DatasetValidationError]:
    """Проверяет инварианты TaskInstance/GoldFact, по одной ошибке на нарушение"""
    errors: List[DatasetValidationError] = []
    seen_ids = set()

    for task in tasks:
        task_id = task.id or "<empty>"
        if not task.id.strip():
            errors.append(DatasetValidationError(task_id=task_id, field="id", message="id is empty"))
        elif task.id in seen_ids:
            errors.append(DatasetValidationError(task_id=task_id, field="id", message="duplicate task id"))
        seen_ids.add(task.id)

        if not task.query.strip():
            errors.append(DatasetValidationError(task_id=task_id, field="query", message="query is empty"))

        seen_facts = set()
        for fact in task.gold_facts:
            if fact.fact_id in seen_facts:
                errors.append(DatasetValidationError(
                    task_id=task_id, field="fact_id",
                    message=f"duplicate fact_id {fact.fact_id!r}",
                ))
            seen_facts.add(fact.fact_id)

            if not fact.statement.strip():
                errors.append(DatasetValidationError(
                    task_id=task_id, field="statement",
                    message=f"gold fact {fact.fact_id!r} has an empty statement",
                ))

            if fact.requires_citation and (fact.label != FactLabel.SUPPORTED or not fact.allowed_sources):
                errors.append(DatasetValidationError(
                    task_id=task_id, field="requires_citation",
                    message=(
                        f"gold fact {fact.fact_id!r} requires a citation but is not "
                        "a supported fact with allowed sources"
                    ),
                ))

    return errors


# ---------------------------------------------------------------- сообщения и токены


class ChatMessage(FrozenModel):
    role: Role
    content: str

    @model_validator(mode="after")
    def _content_required(self):
        if self.role in (Role.SYSTEM, Role.USER) and not self.content.strip():
            raise ValueError(f"{self.role.value} message content must be nonempty")
        return self

    def to_wire(self) -> Dict[str, str]:
        return {"role": self.role.value, "content": self.content}


class TokenUsage(FrozenModel):
    prompt_tokens: int = 0
    completion_tokens: int = 0

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            prompt_tokens=self.prompt_tokens + other.prompt_tokens,
            completion_tokens=self.completion_tokens + other.completion_tokens,
        )


# ---------------------------------------------------------------- артефакты стадий


class ReasoningTrace(FrozenModel):
    """Цепочка рассуждений C0 (initial) или Cf (final)"""
    steps: List[str]
    raw: str
    stage: TraceStage


class CitationMarker(FrozenModel):
    marker_index: int = Field(ge=1)
    source_ref: int = Field(ge=0)


class CitedAnswer(FrozenModel):
    """Ответ A0/Af; маркеры [n] ссылаются на записи проверки"""
    text: str
    markers: List[CitationMarker] = Field(default_factory=list)
    sources: List[str] = Field(default_factory=list)
    stage: TraceStage

    @model_validator(mode="after")
    def _check_markers(self):
        if self.stage == TraceStage.INITIAL:
            if self.markers:
                raise ValueError("initial answer cannot carry citation markers")
            return self

        in_text = marker_indices(self.text)
        if in_text != set(range(1, len(in_text) + 1)):
            raise ValueError(f"marker indices {sorted(in_text)} are not contiguous from 1")

        listed = {m.marker_index for m in self.markers}
        if self.markers and listed != in_text:
            raise ValueError("markers list does not match markers in text")
        return self


def marker_indices(text: str) -> set:
    """Множество индексов маркеров [n] в тексте"""
    return {int(m) for m in MARKER_PATTERN.findall(text)}


class ReasonedAnswer(FrozenModel):
    trace: ReasoningTrace
    answer: CitedAnswer


class FactualClaim(FrozenModel):
    claim_id: int = Field(ge=1)
    text: NonEmptyText
    origin: ClaimOrigin = ClaimOrigin.CHAIN


class VerificationQuery(FrozenModel):
    claim_id: int = Field(ge=1)
    text: NonEmptyText


class VerificationRecord(FrozenModel):
    """Пара (e_i, s_i) плюс вердикт. unattributed - синтезированная запись для чужого источника"""
    claim_id: Optional[int] = None
    verdict: Verdict
    evidence: NonEmptyText
    source: NonEmptyText
    unattributed: bool = False


class AblationConfig(FrozenModel):
    skip_claim_extraction: bool = False
    skip_verification: bool = False
    skip_refinement: bool = False

    @property
    def is_full(self) -> bool:
        return not (self.skip_claim_extraction or self.skip_verification or self.skip_refinement)


class CotArtifact(FrozenModel):
    kind: Literal["cot"] = "cot"
    result: ReasonedAnswer


class ClaimsArtifact(FrozenModel):
    kind: Literal["claims"] = "claims"
    claims: List[FactualClaim]
    queries: List[VerificationQuery]


class EvidenceArtifact(FrozenModel):
    kind: Literal["evidence"] = "evidence"
    verifications: List[VerificationRecord]


class RefinedArtifact(FrozenModel):
    kind: Literal["refined"] = "refined"
    result: ReasonedAnswer
    citation_records: List[VerificationRecord]


StageArtifact = Annotated[
    Union[CotArtifact, ClaimsArtifact, EvidenceArtifact, RefinedArtifact],
    Field(discriminator="kind"),
]


class StageFailure(FrozenModel):
    kind: str
    message: str


class StageAttempt(FrozenModel):
    """Один вызов провайдера внутри стадии (основной или ремонтный)"""
    messages: List[ChatMessage]
    raw: str = ""
    usage: TokenUsage = Field(default_factory=TokenUsage)
    retry_count: int = 0
    duration_ms: float = 0.0


class StageOutcome(FrozenModel):
    stage_tag: StageTag
    attempts: List[StageAttempt] = Field(default_factory=list)
    artifact: Optional[StageArtifact] = None
    failure: Optional[StageFailure] = None
    repair_used: bool = False
    synthetic: bool = False

    @model_validator(mode="after")
    def _exactly_one(self):
        if (self.artifact is None) == (self.failure is None):
            raise ValueError("stage outcome needs exactly one of artifact or failure")
        return self

    @property
    def raw(self) -> str:
        return self.attempts[-1].raw if self.attempts else ""

    @property
    def retry_count(self) -> int:
        return sum(a.retry_count for a in self.attempts)

    @property
    def usage(self) -> TokenUsage:
        total = TokenUsage()
        for attempt in self.attempts:
            total = total + attempt.usage
        return total

    @property
    def duration_ms(self) -> float:
        return sum(a.duration_ms for a in self.attempts)


class RunRecord(FrozenModel):
    """Полная стенограмма прогона одной задачи"""
    task_id: str
    method: Method
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    model_name: str = ""
    stages: List[StageOutcome] = Field(default_factory=list)
    initial: Optional[ReasonedAnswer] = None
    claims: List[FactualClaim] = Field(default_factory=list)
    queries: List[VerificationQuery] = Field(default_factory=list)
    synthetic_claims: bool = False
    verifications: List[VerificationRecord] = Field(default_factory=list)
    citation_records: List[VerificationRecord] = Field(default_factory=list)
    final: Optional[ReasonedAnswer] = None
    verification_report_attached: bool = False
    no_claims: bool = False
    retrieved_doc_ids: List[str] = Field(default_factory=list)
    failed_stage: Optional[StageTag] = None

    @model_validator(mode="after")
    def _markers_resolve(self):
        if self.final is not None:
            for marker in self.final.answer.markers:
                if marker.source_ref >= len(self.citation_records):
                    raise ValueError(
                        f"marker [{marker.marker_index}] points past the citation records"
                    )
        return self

    @property
    def provider_calls(self) -> int:
        return sum(len(stage.attempts) for stage in self.stages)

    @property
    def total_usage(self) -> TokenUsage:
        total = TokenUsage()
        for stage in self.stages:
            total = total + stage.usage
        return total

    @property
    def duration_ms(self) -> float:
        return sum(stage.duration_ms for stage in self.stages)

    @property
    def succeeded(self) -> bool:
        return self.failed_stage is None


# ---------------------------------------------------------------- отчёт


class MetricRow(FrozenModel):
    """Метрики одной задачи (или агрегированной группы)"""
    task_id: str = ""
    method: str
    task_type: str
    factual_accuracy: float = Field(ge=0.0, le=1.0)
    hallucination_rate: float = Field(ge=0.0, le=1.0)
    neutral_rate: float = Field(ge=0.0, le=1.0)
    citation_precision: float = Field(ge=0.0, le=1.0)
    citation_recall: float = Field(ge=0.0, le=1.0)
    citation_f1: float = Field(ge=0.0, le=1.0)
    claim_count: int = 0
    empty_claims: bool = False
    provider_calls: float = 0.0
    total_tokens: float = 0.0
    latency_ms: float = 0.0


class GroupRow(MetricRow):
    n_tasks: int = 0


class EvalReport(FrozenModel):
    rows: List[MetricRow] = Field(default_factory=list)
    groups: List[GroupRow] = Field(default_factory=list)
    overall: Optional[GroupRow] = None
    skipped_runs: List[str] = Field(default_factory=list)
