"""
Менеджер chat-completion API - единый интерфейс провайдера для всех стадий
"""

import asyncio
import logging
import os
import random
import time
from typing import Dict, List, Optional, Protocol

import openai
from openai import AsyncOpenAI
from pydantic import Field

from .models import ChatMessage, FrozenModel, StageTag, TokenUsage

API_KEY_ENV = "VERIFACT_API_KEY"

INITIAL_BACKOFF_SECONDS = 0.5
BACKOFF_FACTOR = 2.0
BACKOFF_JITTER = 0.2
BODY_EXCERPT_CHARS = 200

RETRYABLE_STATUSES = {408, 409, 429}


class ProviderError(Exception):
    """Базовая ошибка провайдера"""

    kind = "provider"

    def __init__(self, message: str, retry_count: int = 0):
        super().__init__(message)
        self.retry_count = retry_count


class ProviderTransportError(ProviderError):
    kind = "transport"


class ProviderTimeoutError(ProviderError):
    kind = "timeout"


class ProviderStatusError(ProviderError):
    kind = "status"

    def __init__(self, status_code: int, body_excerpt: str, retry_count: int = 0):
        super().__init__(f"HTTP {status_code}: {body_excerpt}", retry_count)
        self.status_code = status_code
        self.body_excerpt = body_excerpt


class ProviderEnvelopeError(ProviderError):
    kind = "envelope"


class UnscriptedRequestError(ProviderError):
    kind = "unscripted"


class ScriptAmbiguityError(ProviderError):
    kind = "script_ambiguity"


class CompletionParams(FrozenModel):
    model_name: str
    temperature: float = Field(default=0.0, ge=0.0)
    max_output_tokens: int = Field(default=1024, gt=0)
    request_timeout: float = Field(default=60.0, gt=0.0)
    max_retries: int = Field(default=2, ge=0, le=10)


class Completion(FrozenModel):
    text: str
    usage: TokenUsage = Field(default_factory=TokenUsage)
    retry_count: int = 0


class CompletionProvider(Protocol):
    """Любой провайдер: HTTP-клиент, сценарный мок или обёртка в тестах"""

    async def complete(
        self, stage_tag: StageTag, messages: List[ChatMessage], params: CompletionParams
    ) -> Completion:
        ...


def estimate_tokens(text: str) -> int:
    """Приблизительная оценка токенов (1 токен ≈ 4 символа)"""
    return len(text) // 4


def backoff_delay(attempt: int, rng: random.Random) -> float:
    """Задержка перед повтором attempt (с нуля): 0.5s * 2^attempt ± 20%"""
    base = INITIAL_BACKOFF_SECONDS * (BACKOFF_FACTOR ** attempt)
    return base * rng.uniform(1 - BACKOFF_JITTER, 1 + BACKOFF_JITTER)


class ChatCompletionAPIManager:
    """Клиент chat-completion шлюза (OpenAI-совместимый протокол) с повторами"""

    def __init__(
        self,
        base_url: str,
        api_key: Optional[str] = None,
        http_client=None,
        rng: Optional[random.Random] = None,
    ):
        self.logger = logging.getLogger(__name__)
        self.base_url = base_url

        api_key = api_key or os.getenv(API_KEY_ENV)
        if not api_key:
            raise ValueError(f"API key is required: pass api_key or set {API_KEY_ENV}")

        # Повторы делаем сами, чтобы считать retry_count и различать ошибки
        self.client = AsyncOpenAI(
            api_key=api_key,
            base_url=base_url,
            max_retries=0,
            http_client=http_client,
        )
        self.rng = rng or random.Random()

        self.usage_stats: Dict[str, Dict[str, int]] = {}

        self.logger.info(f"Chat API manager initialized: {base_url}")

    def _stats(self, stage_tag: StageTag) -> Dict[str, int]:
        return self.usage_stats.setdefault(stage_tag.value, {"requests": 0, "tokens": 0, "errors": 0})

    async def complete(
        self, stage_tag: StageTag, messages: List[ChatMessage], params: CompletionParams
    ) -> Completion:
        """
        Делает запрос к API с повторами транзиентных ошибок

        Args:
            stage_tag: стадия (только для логов и статистики)
            messages: сообщения запроса, непустой список
            params: модель, температура, лимиты

        Returns:
            Completion с текстом ответа как есть
        """
        if not messages:
            raise ValueError("messages must be nonempty")

        stats = self._stats(stage_tag)
        attempt = 0

        while True:
            stats["requests"] += 1
            started = time.monotonic()
            try:
                completion = await self._request(messages, params, attempt)
                stats["tokens"] += completion.usage.total_tokens
                self.logger.debug(
                    f"API запрос {stage_tag.value}: успех за {(time.monotonic() - started) * 1000:.0f} мс"
                )
                return completion

            except ProviderError as e:
                stats["errors"] += 1
                e.retry_count = attempt
                if not self._is_retryable(e) or attempt >= params.max_retries:
                    self.logger.error(f"Ошибка API запроса {stage_tag.value}: {e}")
                    raise

                delay = backoff_delay(attempt, self.rng)
                self.logger.warning(
                    f"⚠️ {stage_tag.value}: {e.kind} ({e}), повтор {attempt + 1}/{params.max_retries} "
                    f"через {delay:.2f} с"
                )
                await asyncio.sleep(delay)
                attempt += 1

    async def _request(self, messages: List[ChatMessage], params: CompletionParams, attempt: int) -> Completion:
        try:
            response = await self.client.chat.completions.create(
                model=params.model_name,
                messages=[message.to_wire() for message in messages],
                temperature=params.temperature,
                max_tokens=params.max_output_tokens,
                timeout=params.request_timeout,
            )
        except openai.APITimeoutError as e:
            raise ProviderTimeoutError(f"request timed out after {params.request_timeout}s") from e
        except openai.APIConnectionError as e:
            raise ProviderTransportError(f"transport failure: {e}") from e
        except openai.APIStatusError as e:
            body = e.response.text if e.response is not None else str(e)
            raise ProviderStatusError(e.status_code, body[:BODY_EXCERPT_CHARS]) from e
        except (openai.APIResponseValidationError, ValueError) as e:
            raise ProviderEnvelopeError(f"malformed response envelope: {e}") from e

        return self._read_envelope(response, messages, attempt)

    def _read_envelope(self, response, messages: List[ChatMessage], attempt: int) -> Completion:
        choices = getattr(response, "choices", None)
        if not choices:
            raise ProviderEnvelopeError("response envelope has no choices")

        message = getattr(choices[0], "message", None)
        content = getattr(message, "content", None)
        if not isinstance(content, str):
            raise ProviderEnvelopeError("first choice carries no message content")

        usage = getattr(response, "usage", None)
        if usage is not None and usage.prompt_tokens is not None:
            token_usage = TokenUsage(
                prompt_tokens=usage.prompt_tokens,
                completion_tokens=usage.completion_tokens or 0,
            )
        else:
            prompt_text = "".join(m.content for m in messages)
            token_usage = TokenUsage(
                prompt_tokens=estimate_tokens(prompt_text),
                completion_tokens=estimate_tokens(content),
            )

        return Completion(text=content, usage=token_usage, retry_count=attempt)

    @staticmethod
    def _is_retryable(error: ProviderError) -> bool:
        if isinstance(error, (ProviderTransportError, ProviderTimeoutError)):
            return True
        if isinstance(error, ProviderStatusError):
            return error.status_code in RETRYABLE_STATUSES or error.status_code >= 500
        return False

    def get_usage_stats(self) -> Dict:
        """Возвращает статистику использования API по стадиям"""
        return {
            "total_requests": sum(s["requests"] for s in self.usage_stats.values()),
            "total_tokens": sum(s["tokens"] for s in self.usage_stats.values()),
            "total_errors": sum(s["errors"] for s in self.usage_stats.values()),
            "by_stage": {tag: dict(s) for tag, s in self.usage_stats.items()},
        }


def create_api_manager(provider_config) -> CompletionProvider:
    """Создаёт провайдер по секции provider конфигурации"""
    if provider_config.kind == "mock":
        from .scripted_api_manager import load_script

        return load_script(provider_config.script_path)

    api_key = os.getenv(API_KEY_ENV)
    if not api_key:
        from .run_config import ConfigError

        raise ConfigError(f"provider.kind=http requires the {API_KEY_ENV} environment variable")
    return ChatCompletionAPIManager(base_url=provider_config.base_url, api_key=api_key)
