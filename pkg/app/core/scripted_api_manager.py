"""
Сценарный провайдер для тестов и демо: ответы берутся из JSONL-сценария
"""

import asyncio
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from pydantic import Field, ValidationError, field_validator, model_validator

from .chat_api_manager import (
    Completion,
    CompletionParams,
    ScriptAmbiguityError,
    UnscriptedRequestError,
    estimate_tokens,
)
from .models import ChatMessage, FrozenModel, StageTag, TokenUsage

logger = logging.getLogger(__name__)


class ScriptLoadError(Exception):
    """Сценарий не читается; line_number - строка файла (с единицы), если известна"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        prefix = f"line {line_number}: " if line_number is not None else ""
        super().__init__(prefix + message)
        self.line_number = line_number


class ScriptedResponse(FrozenModel):
    """
    Одна запись сценария. Ключ совпадения:
    (stage_tag, occurrence) - n-й вызов стадии, либо contains - подстроки промпта,
    которые должны встретиться все (при наличии stage_tag только в этой стадии)
    """
    stage_tag: Optional[StageTag] = None
    occurrence: Optional[int] = Field(default=None, ge=1)
    contains: Optional[List[str]] = None
    response_text: str

    @field_validator("contains", mode="before")
    @classmethod
    def _as_list(cls, value: Union[str, List[str], None]):
        return [value] if isinstance(value, str) else value

    @model_validator(mode="after")
    def _one_key(self):
        if (self.occurrence is None) == (self.contains is None):
            raise ValueError("entry needs exactly one of occurrence or contains")
        if self.occurrence is not None and self.stage_tag is None:
            raise ValueError("occurrence key requires stage_tag")
        if self.contains is not None and not all(self.contains):
            raise ValueError("contains must list nonempty substrings")
        return self

    @property
    def match_key(self) -> Tuple:
        if self.occurrence is not None:
            return ("occurrence", self.stage_tag, self.occurrence)
        return ("contains", self.stage_tag, tuple(self.contains))

    def matches(self, stage_tag: StageTag, occurrence: int, prompt: str) -> bool:
        if self.occurrence is not None:
            return self.stage_tag == stage_tag and self.occurrence == occurrence
        if self.stage_tag is not None and self.stage_tag != stage_tag:
            return False
        return all(part in prompt for part in self.contains)


class ScriptedAPIManager:
    """Детерминированный провайдер: отвечает строго по сценарию"""

    def __init__(self, entries: List[ScriptedResponse]):
        self.logger = logging.getLogger(__name__)
        self.entries = list(entries)
        self.occurrences: Dict[StageTag, int] = {}
        self.requests: List[Tuple[StageTag, List[ChatMessage]]] = []
        self._lock = asyncio.Lock()

    async def complete(
        self, stage_tag: StageTag, messages: List[ChatMessage], params: CompletionParams
    ) -> Completion:
        if not messages:
            raise ValueError("messages must be nonempty")

        prompt = "\n".join(message.content for message in messages)

        # Счётчики вызовов по стадиям общие для всех воркеров
        async with self._lock:
            occurrence = self.occurrences.get(stage_tag, 0) + 1
            self.occurrences[stage_tag] = occurrence
            self.requests.append((stage_tag, list(messages)))

        matched = [entry for entry in self.entries if entry.matches(stage_tag, occurrence, prompt)]

        if not matched:
            raise UnscriptedRequestError(
                f"unscripted request for stage {stage_tag.value} (occurrence {occurrence})"
            )
        if len(matched) > 1:
            keys = ", ".join(repr(entry.match_key[2]) for entry in matched)
            raise ScriptAmbiguityError(
                f"{len(matched)} script entries match stage {stage_tag.value} (occurrence {occurrence}): {keys}"
            )

        text = matched[0].response_text
        self.logger.debug(f"🎭 {stage_tag.value} #{occurrence}: ответ из сценария ({len(text)} символов)")
        return Completion(
            text=text,
            usage=TokenUsage(prompt_tokens=estimate_tokens(prompt), completion_tokens=estimate_tokens(text)),
        )


def parse_script(lines: List[str]) -> ScriptedAPIManager:
    entries: List[ScriptedResponse] = []
    seen: Dict[Tuple, int] = {}

    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            entry = ScriptedResponse.model_validate(json.loads(line))
        except (json.JSONDecodeError, ValidationError) as e:
            raise ScriptLoadError(f"invalid script entry: {e}", line_number) from e

        if entry.match_key in seen:
            raise ScriptLoadError(
                f"duplicate match key {entry.match_key[2]!r} (first defined on line {seen[entry.match_key]})",
                line_number,
            )
        seen[entry.match_key] = line_number
        entries.append(entry)

    return ScriptedAPIManager(entries)


def load_script(path) -> ScriptedAPIManager:
    """Загружает JSONL-сценарий; пустой файл даёт провайдер без ответов"""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ScriptLoadError(f"cannot read script {path}: {e}") from e

    manager = parse_script(text.splitlines())
    logger.info(f"Сценарий загружен: {path} ({len(manager.entries)} записей)")
    return manager
