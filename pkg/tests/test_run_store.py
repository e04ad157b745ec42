import asyncio
import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from app.core.models import Method, RunRecord
from app.database.dataset_loader import DatasetError, DatasetValidationFailed, load_corpus, load_dataset
from app.database.run_store import OrderedRunWriter, RunFileError, RunStore

FIXTURES = Path(__file__).parent / "fixtures"


def _run(task_id):
    return RunRecord(task_id=task_id, method=Method.STANDARD_COT, failed_stage="standard_cot")


def test_append_and_read(tmp_path):
    store = RunStore(tmp_path / "runs" / "run.jsonl")
    store.append(_run("a"))
    store.append(_run("b"))

    assert [run.task_id for run in store.read_runs()] == ["a", "b"]
    assert store.completed_task_ids() == {"a", "b"}


def test_torn_tail_is_skipped_then_repaired(tmp_path):
    path = tmp_path / "run.jsonl"
    store = RunStore(path)
    store.append(_run("a"))
    with open(path, "a", encoding="utf-8") as f:
        f.write('{"task_id": "b", "meth')

    assert [run.task_id for run in store.read_runs()] == ["a"]
    assert store.repair_torn_tail()
    assert path.read_text(encoding="utf-8").endswith("\n")
    assert not store.repair_torn_tail()


def test_corrupt_complete_line(tmp_path):
    path = tmp_path / "run.jsonl"
    path.write_text('{"task_id": "a"}\n', encoding="utf-8")
    with pytest.raises(RunFileError):
        RunStore(path).read_runs()


def test_missing_run_file(tmp_path):
    store = RunStore(tmp_path / "absent.jsonl")
    assert store.completed_task_ids() == set()
    with pytest.raises(RunFileError):
        store.read_runs()


@pytest.mark.asyncio
async def test_writer_keeps_task_order(tmp_path):
    store = RunStore(tmp_path / "run.jsonl")
    writer = OrderedRunWriter(store)

    async def submit(index, delay):
        await asyncio.sleep(delay)
        await writer.submit(index, _run(f"t{index}"))

    await asyncio.gather(submit(0, 0.03), submit(1, 0.0), submit(2, 0.01))
    assert [run.task_id for run in store.read_runs()] == ["t0", "t1", "t2"]
    assert writer.written == 3


@pytest.mark.asyncio
async def test_writer_skips_a_task_that_raised(tmp_path):
    store = RunStore(tmp_path / "run.jsonl")
    writer = OrderedRunWriter(store)

    await writer.submit(2, _run("t2"))
    await writer.submit(0, _run("t0"))
    assert [run.task_id for run in store.read_runs()] == ["t0"]

    await writer.skip(1)
    assert [run.task_id for run in store.read_runs()] == ["t0", "t2"]
    assert writer.written == 2
    assert writer.pending == {}


def test_load_fixture_dataset_and_corpus():
    tasks = load_dataset(FIXTURES / "spanish_dataset.jsonl")
    assert [task.id for task in tasks] == ["ss-1", "ss-2"]
    assert len(tasks[0].gold_facts) == 5
    assert [doc.doc_id for doc in load_corpus(FIXTURES / "spanish_corpus.jsonl")] == ["d1", "d2", "d3"]


def test_invalid_dataset_line(tmp_path):
    path = tmp_path / "data.jsonl"
    path.write_text('{"id": "t1", "task_type": "factual_qa", "query": "q"}\n{"id": "t2"}\n', encoding="utf-8")
    with pytest.raises(DatasetError) as exc:
        load_dataset(path)
    assert exc.value.line_number == 2


def test_dataset_invariants_are_collected(tmp_path):
    path = tmp_path / "data.jsonl"
    task = {"id": "t1", "task_type": "factual_qa", "query": "q", "gold_facts": [
        {"fact_id": "f1", "statement": "x", "label": "refuted", "requires_citation": True},
    ]}
    path.write_text(json.dumps(task) + "\n" + json.dumps(task) + "\n", encoding="utf-8")

    with pytest.raises(DatasetValidationFailed) as exc:
        load_dataset(path)
    assert len(exc.value.errors) == 3
    assert len(load_dataset(path, validate=False)) == 2
