"""
Демо-скрипт: один прогон VeriFact-CoT по сценарию, стадия за стадией
"""

import asyncio
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from app.core.chat_api_manager import CompletionParams
from app.core.evaluation import evaluate_runs, render_report
from app.core.models import Method
from app.core.prompt_manager import PromptManager
from app.core.scripted_api_manager import load_script
from app.core.stage_parsers import VERDICT_NAMES
from app.core.verifact_pipeline import VerifactPipeline
from app.database.dataset_loader import load_dataset

FIXTURES = Path(__file__).resolve().parents[1] / "tests" / "fixtures"


async def demo():
    """Демонстрация четырёх стадий на задаче о войне за испанское наследство"""

    print("🎭 Демо VeriFact-CoT")
    print("=" * 30)

    tasks = load_dataset(FIXTURES / "spanish_dataset.jsonl")
    pipeline = VerifactPipeline(
        provider=load_script(FIXTURES / "spanish_script.jsonl"),
        prompts=PromptManager(),
        params=CompletionParams(model_name="scripted-mock"),
    )

    record = await pipeline.run_task(tasks[0], Method.VERIFACT)

    print(f"❓ {tasks[0].query}")

    print("\n🧠 Первичные рассуждения:")
    for i, step in enumerate(record.initial.trace.steps, start=1):
        print(f"   {i}. {step}")
    print(f"   → {record.initial.answer.text}")

    print("\n🔎 Утверждения и проверочные вопросы:")
    for claim, query in zip(record.claims, record.queries):
        print(f"   {claim.claim_id}. {claim.text}")
        print(f"      ? {query.text}")

    print("\n📚 Симулированная проверка:")
    for verification in record.verifications:
        print(f"   {verification.claim_id}. {VERDICT_NAMES[verification.verdict]}: {verification.evidence}")
        print(f"      - {verification.source}")

    print("\n✨ Уточнённый ответ:")
    print(f"   {record.final.answer.text}")
    for i, source in enumerate(record.final.answer.sources, start=1):
        print(f"   [{i}] {source}")

    print(f"\n📊 Вызовов провайдера: {record.provider_calls}, токенов: {record.total_usage.total_tokens}")

    runs = [record, await pipeline.run_task(tasks[1], Method.VERIFACT)]
    print()
    print(render_report(evaluate_runs(runs, tasks)), end="")

    print("\n✨ Демо завершено!")

if __name__ == "__main__":
    asyncio.run(demo())
