# Загрузка датасета задач и корпуса документов (JSONL, UTF-8)

import json
import logging
from pathlib import Path
from typing import List, Optional, Type, TypeVar

from pydantic import BaseModel, ValidationError

from ..core.models import SourceDocument, TaskInstance, validate_dataset

logger = logging.getLogger(__name__)

T = TypeVar("T", bound=BaseModel)


class DatasetError(Exception):
    """Файл датасета/корпуса не читается; line_number - строка с ошибкой"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        prefix = f"line {line_number}: " if line_number is not None else ""
        super().__init__(prefix + message)
        self.line_number = line_number


class DatasetValidationFailed(DatasetError):
    def __init__(self, errors):
        super().__init__(f"{len(errors)} validation error(s): " + "; ".join(str(e) for e in errors))
        self.errors = list(errors)


def _read_jsonl(path, model: Type[T]) -> List[T]:
    file_path = Path(path)
    try:
        lines = file_path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DatasetError(f"cannot read {file_path}: {e}") from e

    items: List[T] = []
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            items.append(model.model_validate(json.loads(line)))
        except (json.JSONDecodeError, ValidationError) as e:
            raise DatasetError(f"invalid {model.__name__} record in {file_path}: {e}", line_number) from e
    return items


def load_dataset(path, validate: bool = True) -> List[TaskInstance]:
    """Загружает задачи; при validate=True нарушения инвариантов - DatasetError со списком"""
    tasks = _read_jsonl(path, TaskInstance)

    if validate:
        errors = validate_dataset(tasks)
        if errors:
            for error in errors:
                logger.error(f"Датасет {path}: {error}")
            raise DatasetValidationFailed(errors)

    logger.info(f"Датасет загружен: {path} ({len(tasks)} задач)")
    return tasks


def load_corpus(path) -> List[SourceDocument]:
    """Корпус: по записи {doc_id, text} на строку"""
    docs = _read_jsonl(path, SourceDocument)
    logger.info(f"Корпус загружен: {path} ({len(docs)} документов)")
    return docs
