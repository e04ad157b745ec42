# Файл прогонов: JSONL, только дозапись, одна строка RunRecord на задачу

import asyncio
import logging
import os
from pathlib import Path
from typing import Dict, List, Optional, Set

from pydantic import ValidationError

from ..core.models import RunRecord


class RunFileError(Exception):
    """Файл прогонов повреждён или не читается"""


class RunStore:
    """Чтение и дозапись файла прогонов"""

    def __init__(self, path):
        self.path = Path(path)
        self.logger = logging.getLogger(__name__)

    def exists(self) -> bool:
        return self.path.exists()

    def repair_torn_tail(self) -> bool:
        """Обрезает последнюю строку без перевода строки (прерванная запись)"""
        if not self.path.exists():
            return False
        data = self.path.read_bytes()
        if not data or data.endswith(b"\n"):
            return False

        keep = data.rfind(b"\n") + 1
        with open(self.path, "r+b") as f:
            f.truncate(keep)
        self.logger.warning(f"⚠️ {self.path}: обрезана незавершённая строка ({len(data) - keep} байт)")
        return True

    def read_runs(self) -> List[RunRecord]:
        if not self.path.exists():
            raise RunFileError(f"run file not found: {self.path}")
        try:
            text = self.path.read_text(encoding="utf-8")
        except OSError as e:
            raise RunFileError(f"cannot read run file {self.path}: {e}") from e

        lines = text.split("\n")
        torn = lines[-1] if lines and lines[-1] else None
        complete = lines[:-1]

        runs: List[RunRecord] = []
        for line_number, line in enumerate(complete, start=1):
            if not line.strip():
                continue
            try:
                runs.append(RunRecord.model_validate_json(line))
            except ValidationError as e:
                raise RunFileError(f"{self.path} line {line_number}: invalid run record: {e}") from e

        if torn is not None:
            self.logger.warning(f"⚠️ {self.path}: последняя строка не завершена и пропущена")
        return runs

    def completed_task_ids(self) -> Set[str]:
        if not self.path.exists():
            return set()
        return {run.task_id for run in self.read_runs()}

    def append(self, record: RunRecord) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(record.model_dump_json() + "\n")
            f.flush()
            os.fsync(f.fileno())


class OrderedRunWriter:
    """
    Единственный писатель файла прогонов.
    Записи приходят в порядке завершения, а пишутся в порядке задач.
    """

    def __init__(self, store: RunStore):
        self.store = store
        self.pending: Dict[int, Optional[RunRecord]] = {}
        self.next_index = 0
        self.written = 0
        self._lock = asyncio.Lock()

    async def submit(self, index: int, record: RunRecord) -> None:
        async with self._lock:
            self.pending[index] = record
            self._flush()

    async def skip(self, index: int) -> None:
        """Задача завершилась исключением: её место освобождается, следующие записи не ждут"""
        async with self._lock:
            self.pending[index] = None
            self._flush()

    def _flush(self) -> None:
        while self.next_index in self.pending:
            record = self.pending.pop(self.next_index)
            self.next_index += 1
            if record is not None:
                self.store.append(record)
                self.written += 1
