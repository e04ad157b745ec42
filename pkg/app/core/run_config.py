# Конфигурация прогона: JSON-файл + флаги CLI, ключ API только из окружения

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional

from pydantic import Field, ValidationError, model_validator

from .chat_api_manager import CompletionParams
from .evaluation import DEFAULT_THRESHOLD
from .models import AblationConfig, FrozenModel, Method

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = "config/config.json"

ABLATION_FLAG_NAMES = {
    "claim-extraction": "skip_claim_extraction",
    "verification": "skip_verification",
    "refinement": "skip_refinement",
}


class ConfigError(Exception):
    """Конфигурация не читается или нарушает инварианты"""


class ProviderSettings(FrozenModel):
    kind: Literal["mock", "http"] = "mock"
    base_url: Optional[str] = None
    model: str = "scripted-mock"
    script_path: Optional[str] = None
    temperature: float = Field(default=0.0, ge=0.0)
    max_output_tokens: int = Field(default=1024, gt=0)
    request_timeout: float = Field(default=60.0, gt=0.0)
    max_retries: int = Field(default=2, ge=0, le=10)

    @model_validator(mode="after")
    def _kind_requirements(self):
        if self.kind == "mock" and not self.script_path:
            raise ValueError("provider.kind=mock requires provider.script_path")
        if self.kind == "http" and not self.base_url:
            raise ValueError("provider.kind=http requires provider.base_url")
        return self

    def completion_params(self) -> CompletionParams:
        return CompletionParams(
            model_name=self.model,
            temperature=self.temperature,
            max_output_tokens=self.max_output_tokens,
            request_timeout=self.request_timeout,
            max_retries=self.max_retries,
        )


class PromptSettings(FrozenModel):
    dir: Optional[str] = None


class RunSettings(FrozenModel):
    method: Method = Method.VERIFACT
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    dataset: Optional[str] = None
    corpus: Optional[str] = None
    k: int = Field(default=3, ge=0)
    threshold: float = Field(default=DEFAULT_THRESHOLD, gt=0.0, le=1.0)
    workers: int = Field(default=1, ge=1)
    out: str = "runs/run.jsonl"


class LoggingSettings(FrozenModel):
    level: str = "INFO"
    file: Optional[str] = "logs/verifact.log"
    max_file_size_mb: int = Field(default=10, ge=1)
    backup_count: int = Field(default=5, ge=0)


class RunConfig(FrozenModel):
    provider: ProviderSettings
    prompts: PromptSettings = Field(default_factory=PromptSettings)
    run: RunSettings = Field(default_factory=RunSettings)
    logging: LoggingSettings = Field(default_factory=LoggingSettings)

    @model_validator(mode="after")
    def _method_requirements(self):
        if self.run.method == Method.COT_RAG and not self.run.corpus:
            raise ValueError("run.method=cot_rag requires run.corpus")
        if self.run.method != Method.VERIFACT and not self.run.ablation.is_full:
            raise ValueError("ablation flags are only legal with run.method=verifact")
        return self


def parse_ablation_flags(value: str) -> AblationConfig:
    """'claim-extraction,refinement' -> AblationConfig"""
    flags = {}
    for name in (part.strip() for part in value.split(",")):
        if not name:
            continue
        if name not in ABLATION_FLAG_NAMES:
            raise ConfigError(
                f"unknown ablation {name!r}; expected one of: {', '.join(ABLATION_FLAG_NAMES)}"
            )
        flags[ABLATION_FLAG_NAMES[name]] = True
    return AblationConfig(**flags)


def _deep_merge(base: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(config_path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Загрузка конфигурации

    Args:
        config_path: путь к JSON; если не задан, берётся config/config.json при наличии
        overrides: значения из флагов CLI, вложенные по секциям

    Returns:
        RunConfig; приоритет: значения по умолчанию < файл < флаги
    """
    data: Dict[str, Any] = {}
    path = config_path or DEFAULT_CONFIG_PATH

    if os.path.exists(path):
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        logger.info(f"Конфигурация загружена: {path}")
    elif config_path:
        raise ConfigError(f"config file not found: {config_path}")

    data = _deep_merge(data, overrides or {})
    data.setdefault("provider", {})

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
