"""
Ядро VeriFact-CoT - доменные типы, провайдеры, промпты, конвейер, метрики
"""

from .chat_api_manager import ChatCompletionAPIManager, Completion, CompletionParams, create_api_manager
from .evaluation import aggregate, evaluate_runs, match_claim, render_ablation_table, render_report, score_run
from .prompt_manager import PromptManager, default_templates
from .scripted_api_manager import ScriptedAPIManager, load_script
from .verifact_pipeline import VerifactPipeline

__all__ = [
    'ChatCompletionAPIManager',
    'Completion',
    'CompletionParams',
    'PromptManager',
    'ScriptedAPIManager',
    'VerifactPipeline',
    'aggregate',
    'create_api_manager',
    'default_templates',
    'evaluate_runs',
    'load_script',
    'match_claim',
    'render_ablation_table',
    'render_report',
    'score_run',
]
