# Локальный корпус для базового RAG: косинус по сырым частотам терминов (без IDF)

import logging
import re
from collections import Counter
from typing import Dict, Iterable, List, Set, Tuple

import numpy as np
from pydantic import Field

from ..core.models import FrozenModel, SourceDocument

logger = logging.getLogger(__name__)

TOKEN_PATTERN = re.compile(r"[a-z0-9]+")


class DuplicateDocumentError(ValueError):
    def __init__(self, doc_id: str):
        super().__init__(f"duplicate doc_id {doc_id!r} in corpus")
        self.doc_id = doc_id


def tokenize(text: str) -> List[str]:
    """Токены - серии латинских букв и цифр в нижнем регистре"""
    return TOKEN_PATTERN.findall(text.lower())


class CorpusIndex(FrozenModel):
    """Индекс неизменяем после сборки; норм нет у документов без токенов"""
    docs: Dict[str, str] = Field(default_factory=dict)
    term_freqs: Dict[str, Dict[str, int]] = Field(default_factory=dict)
    doc_norms: Dict[str, float] = Field(default_factory=dict)
    vocabulary: Set[str] = Field(default_factory=set)


def _norm(counts: Iterable[int]) -> float:
    return float(np.linalg.norm(np.fromiter(counts, dtype=float)))


def index_corpus(docs: Iterable[SourceDocument]) -> CorpusIndex:
    texts: Dict[str, str] = {}
    term_freqs: Dict[str, Dict[str, int]] = {}
    doc_norms: Dict[str, float] = {}
    vocabulary: Set[str] = set()

    for doc in docs:
        if doc.doc_id in texts:
            raise DuplicateDocumentError(doc.doc_id)
        texts[doc.doc_id] = doc.text

        counts = Counter(tokenize(doc.text))
        term_freqs[doc.doc_id] = dict(counts)
        vocabulary.update(counts)
        if counts:
            doc_norms[doc.doc_id] = _norm(counts.values())

    skipped = len(texts) - len(doc_norms)
    logger.info(f"Корпус проиндексирован: {len(texts)} документов, {len(vocabulary)} терминов"
                + (f", без токенов: {skipped}" if skipped else ""))
    return CorpusIndex(docs=texts, term_freqs=term_freqs, doc_norms=doc_norms, vocabulary=vocabulary)


def retrieve(index: CorpusIndex, query: str, k: int) -> List[Tuple[str, float]]:
    """
    Топ-k документов по косинусу частотных векторов запроса и документа.
    По убыванию score, при равенстве - по возрастанию doc_id; нулевые не возвращаются.
    """
    if k <= 0:
        return []

    query_counts = Counter(tokenize(query))
    if not query_counts:
        return []
    query_norm = _norm(query_counts.values())

    scored: List[Tuple[str, float]] = []
    for doc_id, doc_norm in index.doc_norms.items():
        freqs = index.term_freqs[doc_id]
        shared = [term for term in query_counts if term in freqs]
        if not shared:
            continue
        dot = float(np.dot(
            np.array([query_counts[t] for t in shared], dtype=float),
            np.array([freqs[t] for t in shared], dtype=float),
        ))
        scored.append((doc_id, min(dot / (query_norm * doc_norm), 1.0)))

    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored[:k]
