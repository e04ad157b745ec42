"""
Конвейер VeriFact-CoT: четыре стадии, их абляции и два базовых метода.

Стадии:
1. initial_cot - первичная цепочка рассуждений C0 и ответ A0
2. claim_extract - утверждения f_i и проверочные вопросы v_i
3. verify_simulate - симулированная проверка: вердикт, свидетельство e_i, источник s_i
4. refine_integrate - уточнённые Cf и Af с маркерами цитирования [n]
"""

import logging
import time
from typing import Callable, Dict, List, Optional, Tuple

from pydantic import ValidationError

from ..database.corpus_index import CorpusIndex, retrieve
from .chat_api_manager import CompletionParams, CompletionProvider, ProviderError
from .models import (
    AblationConfig,
    ChatMessage,
    ClaimOrigin,
    ClaimsArtifact,
    CotArtifact,
    EvidenceArtifact,
    FactualClaim,
    Method,
    ReasonedAnswer,
    RefinedArtifact,
    Role,
    RunRecord,
    StageAttempt,
    StageFailure,
    StageOutcome,
    StageTag,
    TaskInstance,
    VerificationQuery,
    VerificationRecord,
)
from .prompt_manager import PromptManager
from .stage_parsers import (
    StageParseError,
    format_steps,
    parse_claims,
    parse_cot,
    parse_evidence,
    parse_refined,
    render_docs_block,
    render_evidence_block,
    render_queries_block,
    repair_prompt,
)

WHOLE_ANSWER_QUERY_PREFIX = "Verify all factual content of the following answer: "


class VerifactPipeline:
    """Выполняет один прогон метода над одной задачей; общего изменяемого состояния нет"""

    def __init__(
        self,
        provider: CompletionProvider,
        prompts: PromptManager,
        params: CompletionParams,
        corpus: Optional[CorpusIndex] = None,
        k: int = 3,
    ):
        self.logger = logging.getLogger(__name__)
        self.provider = provider
        self.prompts = prompts
        self.params = params
        self.corpus = corpus
        self.k = k

    # ------------------------------------------------------------ одна стадия

    async def _run_stage(
        self,
        task_id: str,
        stage_tag: StageTag,
        context: Dict[str, str],
        parse: Callable[[str], object],
    ) -> StageOutcome:
        """Вызов провайдера, разбор, не более одного ремонтного раунда"""
        messages = self.prompts.render(stage_tag, context)
        attempts: List[StageAttempt] = []

        for round_index in range(2):
            started = time.monotonic()
            try:
                completion = await self.provider.complete(stage_tag, messages, self.params)
            except ProviderError as e:
                attempts.append(StageAttempt(
                    messages=messages,
                    retry_count=e.retry_count,
                    duration_ms=(time.monotonic() - started) * 1000,
                ))
                self.logger.error(f"❌ {stage_tag.value} [{task_id}]: ошибка провайдера ({e.kind}): {e}")
                return StageOutcome(
                    stage_tag=stage_tag,
                    attempts=attempts,
                    failure=StageFailure(kind=f"provider_{e.kind}", message=str(e)),
                    repair_used=round_index > 0,
                )

            attempts.append(StageAttempt(
                messages=messages,
                raw=completion.text,
                usage=completion.usage,
                retry_count=completion.retry_count,
                duration_ms=(time.monotonic() - started) * 1000,
            ))

            try:
                artifact = parse(completion.text)
            except StageParseError as e:
                if round_index == 0:
                    self.logger.warning(f"⚠️ {stage_tag.value} [{task_id}]: ответ не разобран ({e}), ремонт")
                    messages = messages + [
                        ChatMessage(role=Role.ASSISTANT, content=completion.text),
                        repair_prompt(stage_tag, e),
                    ]
                    continue
                self.logger.error(f"❌ {stage_tag.value} [{task_id}]: ответ не разобран после ремонта: {e}")
                return StageOutcome(
                    stage_tag=stage_tag,
                    attempts=attempts,
                    failure=StageFailure(kind=f"parse_{e.kind}", message=str(e)),
                    repair_used=True,
                )
            except ValidationError as e:
                self.logger.error(f"❌ {stage_tag.value} [{task_id}]: некорректный артефакт: {e}")
                return StageOutcome(
                    stage_tag=stage_tag,
                    attempts=attempts,
                    failure=StageFailure(kind="invalid_artifact", message=str(e)),
                    repair_used=round_index > 0,
                )

            outcome = StageOutcome(
                stage_tag=stage_tag,
                attempts=attempts,
                artifact=artifact,
                repair_used=round_index > 0,
            )
            self.logger.info(
                f"✅ {stage_tag.value} [{task_id}]: {outcome.duration_ms:.0f} мс, "
                f"{outcome.usage.total_tokens} токенов"
            )
            return outcome

    # ------------------------------------------------------------ стадии

    async def run_initial_cot(self, task: TaskInstance, stage_tag: StageTag = StageTag.INITIAL_COT,
                              extra: Optional[Dict[str, str]] = None) -> StageOutcome:
        """Стадия 1: (C0, A0) по запросу"""
        context = {"query": task.query, **(extra or {})}

        def parse(raw: str) -> CotArtifact:
            trace, answer = parse_cot(raw, stage_tag)
            return CotArtifact(result=ReasonedAnswer(trace=trace, answer=answer))

        return await self._run_stage(task.id, stage_tag, context, parse)

    async def extract_claims(self, task_id: str, initial: ReasonedAnswer) -> StageOutcome:
        """Стадия 2: пары (f_i, v_i); ноль утверждений - законный исход"""

        def parse(raw: str) -> ClaimsArtifact:
            try:
                claims, queries = parse_claims(raw)
            except StageParseError as e:
                if e.kind != "zero_claims":
                    raise
                claims, queries = [], []
            return ClaimsArtifact(claims=claims, queries=queries)

        context = {"chain": format_steps(initial.trace.steps), "answer": initial.answer.text}
        return await self._run_stage(task_id, StageTag.CLAIM_EXTRACT, context, parse)

    @staticmethod
    def whole_answer_claims(initial: ReasonedAnswer) -> StageOutcome:
        """Абляция без извлечения: один синтетический запрос на весь ответ, без вызова провайдера"""
        answer = initial.answer.text
        artifact = ClaimsArtifact(
            claims=[FactualClaim(claim_id=1, text=answer, origin=ClaimOrigin.ANSWER)],
            queries=[VerificationQuery(claim_id=1, text=WHOLE_ANSWER_QUERY_PREFIX + answer)],
        )
        return StageOutcome(stage_tag=StageTag.CLAIM_EXTRACT, artifact=artifact, synthetic=True)

    async def simulate_verification(self, task_id: str, queries: List[VerificationQuery]) -> StageOutcome:
        """Стадия 3: одна запись проверки на каждый вопрос"""
        expected = [query.claim_id for query in queries]

        def parse(raw: str) -> EvidenceArtifact:
            return EvidenceArtifact(verifications=parse_evidence(raw, expected))

        context = {"queries_block": render_queries_block(queries)}
        return await self._run_stage(task_id, StageTag.VERIFY_SIMULATE, context, parse)

    async def refine_and_cite(self, task_id: str, initial: ReasonedAnswer,
                             verifications: List[VerificationRecord]) -> StageOutcome:
        """Стадия 4: (Cf, Af); при пустом E шаблон просит опираться на собственные знания"""

        def parse(raw: str) -> RefinedArtifact:
            trace, answer, records = parse_refined(raw, verifications)
            return RefinedArtifact(result=ReasonedAnswer(trace=trace, answer=answer), citation_records=records)

        context = {
            "chain": format_steps(initial.trace.steps),
            "answer": initial.answer.text,
            "evidence_block": render_evidence_block(verifications) if verifications else "",
        }
        return await self._run_stage(task_id, StageTag.REFINE_INTEGRATE, context, parse)

    # ------------------------------------------------------------ методы

    def _record(self, task: TaskInstance, method: Method, **fields) -> RunRecord:
        return RunRecord(task_id=task.id, method=method, model_name=self.params.model_name, **fields)

    async def run_verifact(self, task: TaskInstance, ablation: Optional[AblationConfig] = None) -> RunRecord:
        ablation = ablation or AblationConfig()
        stages: List[StageOutcome] = []

        first = await self.run_initial_cot(task)
        stages.append(first)
        if first.failure:
            return self._record(task, Method.VERIFACT, ablation=ablation, stages=stages,
                                failed_stage=first.stage_tag)
        initial = first.artifact.result

        # Любой провал дальше: финальный ответ = первичный
        def stopped(outcome: StageOutcome, **fields) -> RunRecord:
            return self._record(task, Method.VERIFACT, ablation=ablation, stages=stages, initial=initial,
                                final=initial, failed_stage=outcome.stage_tag, **fields)

        if ablation.skip_claim_extraction:
            second = self.whole_answer_claims(initial)
        else:
            second = await self.extract_claims(task.id, initial)
        stages.append(second)
        if second.failure:
            return stopped(second)

        claims, queries = second.artifact.claims, second.artifact.queries
        claim_fields = dict(claims=claims, queries=queries, synthetic_claims=second.synthetic)

        if not claims:
            self.logger.info(f"[{task.id}] проверяемых утверждений нет, стадии 3-4 пропущены")
            return self._record(task, Method.VERIFACT, ablation=ablation, stages=stages, initial=initial,
                                final=initial, no_claims=True, **claim_fields)

        verifications: List[VerificationRecord] = []
        if not ablation.skip_verification:
            third = await self.simulate_verification(task.id, queries)
            stages.append(third)
            if third.failure:
                return stopped(third, **claim_fields)
            verifications = third.artifact.verifications

        if ablation.skip_refinement:
            return self._record(task, Method.VERIFACT, ablation=ablation, stages=stages, initial=initial,
                                final=initial, verifications=verifications,
                                verification_report_attached=True, **claim_fields)

        fourth = await self.refine_and_cite(task.id, initial, verifications)
        stages.append(fourth)
        if fourth.failure:
            return stopped(fourth, verifications=verifications, **claim_fields)

        return self._record(
            task, Method.VERIFACT, ablation=ablation, stages=stages, initial=initial,
            verifications=verifications,
            citation_records=fourth.artifact.citation_records,
            final=fourth.artifact.result,
            **claim_fields,
        )

    async def run_standard_cot(self, task: TaskInstance) -> RunRecord:
        outcome = await self.run_initial_cot(task, StageTag.STANDARD_COT)
        if outcome.failure:
            return self._record(task, Method.STANDARD_COT, stages=[outcome], failed_stage=outcome.stage_tag)
        result = outcome.artifact.result
        return self._record(task, Method.STANDARD_COT, stages=[outcome], initial=result, final=result)

    async def run_cot_rag(self, task: TaskInstance) -> RunRecord:
        docs: List[Tuple[str, str]] = []
        if self.corpus is not None:
            docs = [(doc_id, self.corpus.docs[doc_id]) for doc_id, _ in retrieve(self.corpus, task.query, self.k)]
        if not docs:
            self.logger.info(f"[{task.id}] retrieval вернул 0 документов")

        doc_ids = [doc_id for doc_id, _ in docs]
        outcome = await self.run_initial_cot(
            task, StageTag.RAG_COT, extra={"retrieved_docs": render_docs_block(docs)}
        )
        if outcome.failure:
            return self._record(task, Method.COT_RAG, stages=[outcome], retrieved_doc_ids=doc_ids,
                                failed_stage=outcome.stage_tag)
        result = outcome.artifact.result
        return self._record(task, Method.COT_RAG, stages=[outcome], initial=result, final=result,
                            retrieved_doc_ids=doc_ids)

    async def run_task(self, task: TaskInstance, method: Method,
                       ablation: Optional[AblationConfig] = None) -> RunRecord:
        if method == Method.VERIFACT:
            return await self.run_verifact(task, ablation)
        if method == Method.STANDARD_COT:
            return await self.run_standard_cot(task)
        return await self.run_cot_rag(task)
