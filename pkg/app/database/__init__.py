"""
Файловое хранилище: датасеты, корпус, файлы прогонов
"""

from .corpus_index import CorpusIndex, index_corpus, retrieve
from .dataset_loader import load_corpus, load_dataset
from .run_store import OrderedRunWriter, RunStore

__all__ = ['CorpusIndex', 'OrderedRunWriter', 'RunStore', 'index_corpus', 'load_corpus', 'load_dataset', 'retrieve']
