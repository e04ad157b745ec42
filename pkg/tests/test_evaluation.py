import random
import sys
from fractions import Fraction
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from app.core.evaluation import (
    Bucket,
    EvaluationError,
    ReportConflictError,
    aggregate,
    evaluate_runs,
    jaccard,
    match_claim,
    merge_reports,
    method_key,
    method_label,
    render_ablation_table,
    render_report,
    score_run,
    segment_sentences,
)
from app.core.models import (
    AblationConfig,
    CitationMarker,
    CitedAnswer,
    EvalReport,
    FactLabel,
    FactualClaim,
    GoldFact,
    GroupRow,
    Method,
    MetricRow,
    ReasonedAnswer,
    ReasoningTrace,
    RunRecord,
    TaskInstance,
    TaskType,
    TraceStage,
    Verdict,
    VerificationRecord,
)


def _fact(fact_id, statement, label=FactLabel.SUPPORTED, sources=(), required=False):
    return GoldFact(
        fact_id=fact_id, statement=statement, label=label,
        allowed_sources=list(sources), requires_citation=required,
    )


def _answer(text, markers=(), sources=(), stage=TraceStage.FINAL):
    answer = CitedAnswer(
        text=text,
        markers=[CitationMarker(marker_index=i, source_ref=ref) for i, ref in markers],
        sources=list(sources),
        stage=stage,
    )
    return ReasonedAnswer(trace=ReasoningTrace(steps=["s"], raw="1. s", stage=stage), answer=answer)


def _record(claim_id, source):
    return VerificationRecord(claim_id=claim_id, verdict=Verdict.CONFIRMED, evidence="e", source=source)


def _verifact_run(task_id, claims, final, citation_records=(), ablation=None):
    return RunRecord(
        task_id=task_id,
        method=Method.VERIFACT,
        ablation=ablation or AblationConfig(),
        claims=[FactualClaim(claim_id=i, text=text) for i, text in enumerate(claims, start=1)],
        citation_records=list(citation_records),
        final=final,
    )


def _row(method, task_type, acc, halluc, f1, task_id="t"):
    return MetricRow(
        task_id=task_id, method=method, task_type=task_type,
        factual_accuracy=acc, hallucination_rate=halluc, neutral_rate=0.0,
        citation_precision=f1, citation_recall=f1, citation_f1=f1,
    )


# ---------------------------------------------------------------- сопоставление


def test_jaccard_ignores_case_and_punctuation():
    assert jaccard("Charles II, died!", "charles ii died") == 1
    assert jaccard("a b", "b c") == Fraction(1, 3)
    assert jaccard("...", "!!!") == 0


def test_match_at_exact_threshold_counts():
    facts = [_fact("f4", "European powers feared a French-Spanish super-state", FactLabel.NEUTRAL)]
    match = match_claim("European powers feared a French-Spanish super-state and formed a Grand Alliance", facts, 0.6)
    assert match.matched_fact_id == "f4"
    assert match.bucket == Bucket.NEUTRAL
    assert match.overlap_score == pytest.approx(0.6)


def test_match_ties_keep_the_first_fact():
    facts = [_fact("a", "x y z w"), _fact("b", "x y z q", FactLabel.REFUTED)]
    assert match_claim("x y z", facts, 0.5).matched_fact_id == "a"


def test_unmatched_claim_is_hallucinated():
    match = match_claim("completely unrelated words", [_fact("f1", "peace of utrecht")], 0.6)
    assert match.bucket == Bucket.HALLUCINATED
    assert match.matched_fact_id is None


def test_segment_sentences():
    text = "Charles II died in 1700 [1]. His will named Philip V. the heir! What followed? war."
    assert segment_sentences(text) == [
        "Charles II died in 1700 [1].",
        "His will named Philip V. the heir!",
        "What followed? war.",
    ]


# ---------------------------------------------------------------- метрики прогона


def test_citation_quality_f1():
    task = TaskInstance(id="t", task_type=TaskType.FACTUAL_QA, query="q", gold_facts=[
        _fact("f1", "charles died without an heir", sources=["Britannica"], required=True),
        _fact("f2", "the will named philip", sources=["John A. Lynn"], required=True),
        _fact("f3", "the grand alliance formed in 1701", sources=["History.com"], required=True),
    ])
    records = [
        _record(1, "Encyclopaedia Britannica"),
        _record(2, "John A. Lynn, 'The Wars of Louis XIV'"),
        _record(3, "Some blog"),
        _record(1, "Wikipedia"),
    ]
    final = _answer("a [1] b [2] c [3] d [4]", markers=[(1, 0), (2, 1), (3, 2), (4, 3)], sources=["x"] * 4)
    run = _verifact_run("t", [f.statement for f in task.gold_facts], final, records)

    row = score_run(run, task)
    assert row.factual_accuracy == 1.0
    assert row.citation_precision == pytest.approx(1 / 2, abs=1e-12)
    assert row.citation_recall == pytest.approx(2 / 3, abs=1e-12)
    assert row.citation_f1 == pytest.approx(4 / 7, abs=1e-12)


def test_no_markers_no_required_is_perfect_quality():
    task = TaskInstance(id="t", task_type=TaskType.EXPLANATORY, query="q",
                        gold_facts=[_fact("f1", "the sky is blue")])
    run = RunRecord(task_id="t", method=Method.STANDARD_COT, final=_answer("The sky is blue.", stage=TraceStage.INITIAL))
    row = score_run(run, task)
    assert row.citation_f1 == 1.0
    assert row.citation_precision == 0.0
    assert row.factual_accuracy == 1.0
    assert row.method == "standard_cot"


def test_empty_claims_are_all_neutral():
    task = TaskInstance(id="t", task_type=TaskType.FACTUAL_QA, query="q")
    run = _verifact_run("t", [], _answer("   ", stage=TraceStage.INITIAL))
    row = score_run(run, task)
    assert row.empty_claims
    assert (row.factual_accuracy, row.hallucination_rate, row.neutral_rate) == (0.0, 0.0, 1.0)


def test_segmented_markers_follow_their_sentence():
    task = TaskInstance(id="t", task_type=TaskType.FACTUAL_QA, query="q", gold_facts=[
        _fact("f1", "The Peace of Utrecht was signed in 1713", sources=["Britannica"], required=True),
        _fact("f2", "The Peace of Utrecht was signed in 1720", FactLabel.REFUTED),
    ])
    final = _answer(
        "The Peace of Utrecht was signed in 1713 [1]. The Peace of Utrecht was signed in 1720 [2].",
        markers=[(1, 0), (2, 1)], sources=["b", "h"],
    )
    run = _verifact_run("t", [], final, [_record(1, "Britannica"), _record(1, "Britannica")],
                        AblationConfig(skip_claim_extraction=True))
    run = run.model_copy(update={"synthetic_claims": True})

    row = score_run(run, task)
    assert row.claim_count == 2
    assert row.factual_accuracy == 0.5
    assert row.hallucination_rate == 0.5
    assert row.citation_precision == 0.5
    assert row.citation_recall == 1.0


def test_shared_source_credits_the_supported_claim():
    task = TaskInstance(id="t", task_type=TaskType.FACTUAL_QA, query="q", gold_facts=[
        _fact("f1", "Louis XIV rejected the will of Charles II", FactLabel.REFUTED),
        _fact("f2", "Philip of Anjou was named heir", sources=["Britannica"], required=True),
    ])
    records = [_record(1, "Encyclopaedia Britannica"), _record(2, "Encyclopaedia  Britannica")]
    final = _answer("Philip of Anjou was named heir [1].", markers=[(1, 0)], sources=["Encyclopaedia Britannica"])
    run = _verifact_run("t", [f.statement for f in task.gold_facts], final, records)

    row = score_run(run, task)
    assert row.citation_precision == 1.0
    assert row.citation_recall == 1.0
    assert row.citation_f1 == 1.0


def test_markers_on_hallucinated_claims_give_zero_quality():
    task = TaskInstance(id="t", task_type=TaskType.FACTUAL_QA, query="q", gold_facts=[
        _fact("f1", "the peace of utrecht was signed in 1713", sources=["Britannica"], required=True),
        _fact("f2", "the peace of utrecht was signed in 1720", FactLabel.REFUTED),
    ])
    final = _answer("Signed in 1720 [1].", markers=[(1, 0)], sources=["Britannica"])
    run = _verifact_run("t", ["the peace of utrecht was signed in 1720"], final, [_record(1, "Britannica")])

    row = score_run(run, task)
    assert row.citation_precision == 0.0
    assert row.citation_recall == 0.0
    assert row.citation_f1 == 0.0


def test_required_citations_without_markers_give_zero_quality():
    task = TaskInstance(id="t", task_type=TaskType.FACTUAL_QA, query="q", gold_facts=[
        _fact("f1", "the peace of utrecht was signed in 1713", sources=["Britannica"], required=True),
    ])
    run = RunRecord(task_id="t", method=Method.STANDARD_COT,
                    final=_answer("The peace of Utrecht was signed in 1713.", stage=TraceStage.INITIAL))

    row = score_run(run, task)
    assert row.factual_accuracy == 1.0
    assert (row.citation_precision, row.citation_recall, row.citation_f1) == (0.0, 0.0, 0.0)


def _oracle(claims, facts, threshold):
    """Перебор: доли корректных/галлюцинаций/нейтральных в точной арифметике"""
    limit = Fraction(str(threshold))
    buckets = []
    for claim in claims:
        words = set(claim.lower().split())
        candidates = []
        for position, fact in enumerate(facts):
            other = set(fact.statement.lower().split())
            score = Fraction(len(words & other), len(words | other))
            if score >= limit:
                candidates.append((score, -position, fact.label))
        if not candidates:
            buckets.append("h")
            continue
        label = max(candidates)[2]
        buckets.append({FactLabel.SUPPORTED: "c", FactLabel.REFUTED: "h", FactLabel.NEUTRAL: "n"}[label])
    if not buckets:
        return Fraction(0), Fraction(0), Fraction(1)
    return tuple(Fraction(buckets.count(b), len(buckets)) for b in "chn")


def test_metrics_against_brute_force_oracle():
    rng = random.Random(7)
    vocabulary = ["Charles", "died", "1700", "spain", "Will", "philip", "anjou", "alliance", "war", "1713"]

    def sentence():
        return " ".join(rng.sample(vocabulary, rng.randint(1, 5)))

    for n in range(200):
        facts = [
            _fact(f"f{i}", sentence(), rng.choice(list(FactLabel)))
            for i in range(rng.randint(0, 5))
        ]
        claims = [sentence() for _ in range(rng.randint(1, 6))]
        threshold = rng.choice([0.2, 0.4, 0.5, 0.6, 0.75, 1.0])
        task = TaskInstance(id=f"t{n}", task_type=TaskType.FACTUAL_QA, query="q", gold_facts=facts)
        run = _verifact_run(f"t{n}", claims, _answer("answer"))

        row = score_run(run, task, threshold)
        accuracy, hallucination, neutral = _oracle(claims, facts, threshold)
        assert row.factual_accuracy == float(accuracy)
        assert row.hallucination_rate == float(hallucination)
        assert row.neutral_rate == float(neutral)
        assert abs(row.factual_accuracy + row.hallucination_rate + row.neutral_rate - 1) <= 1e-12


def test_raising_threshold_never_adds_matches():
    rng = random.Random(3)
    vocabulary = ["a", "b", "c", "d", "e", "f"]
    for _ in range(100):
        facts = [_fact(f"f{i}", " ".join(rng.sample(vocabulary, rng.randint(1, 4)))) for i in range(3)]
        claim = " ".join(rng.sample(vocabulary, rng.randint(1, 4)))
        matched = [match_claim(claim, facts, t).matched_fact_id is not None for t in (0.2, 0.4, 0.6, 0.8, 1.0)]
        assert matched == sorted(matched, reverse=True)


def test_refuting_a_matched_fact_never_improves_scores():
    rng = random.Random(11)
    vocabulary = ["charles", "died", "1700", "will", "philip", "anjou", "utrecht"]
    flipped = 0

    for n in range(200):
        facts = [
            _fact(f"f{i}", " ".join(rng.sample(vocabulary, rng.randint(1, 4))), rng.choice(list(FactLabel)),
                  sources=["Britannica"])
            for i in range(rng.randint(1, 4))
        ]
        facts = [f.model_copy(update={"requires_citation": f.label == FactLabel.SUPPORTED and rng.random() < 0.5})
                 for f in facts]
        claims = [" ".join(rng.sample(vocabulary, rng.randint(1, 4))) for _ in range(rng.randint(1, 4))]
        final = _answer(
            " ".join(f"c [{i}]" for i in range(1, len(claims) + 1)),
            markers=[(i, i - 1) for i in range(1, len(claims) + 1)],
            sources=["Britannica"] * len(claims),
        )
        run = _verifact_run(f"t{n}", claims, final, [_record(i, "Britannica") for i in range(1, len(claims) + 1)])
        task = TaskInstance(id=f"t{n}", task_type=TaskType.FACTUAL_QA, query="q", gold_facts=facts)

        supported = {match_claim(c, facts, 0.3).matched_fact_id for c in claims} & {
            f.fact_id for f in facts if f.label == FactLabel.SUPPORTED
        }
        if not supported:
            continue
        target = sorted(supported)[0]
        refuted = [
            f.model_copy(update={"label": FactLabel.REFUTED, "requires_citation": False}) if f.fact_id == target else f
            for f in facts
        ]
        before = score_run(run, task, 0.3)
        after = score_run(run, task.model_copy(update={"gold_facts": refuted}), 0.3)
        flipped += 1

        assert after.factual_accuracy < before.factual_accuracy
        assert after.hallucination_rate > before.hallucination_rate
        assert after.neutral_rate == before.neutral_rate
        assert after.citation_precision <= before.citation_precision
        for row in (before, after):
            assert abs(row.factual_accuracy + row.hallucination_rate + row.neutral_rate - 1) <= 1e-12

    assert flipped > 20


# ---------------------------------------------------------------- отчёт


def test_evaluate_runs_unknown_task():
    with pytest.raises(EvaluationError):
        evaluate_runs([_verifact_run("ghost", ["x"], _answer("x"))], [])


def test_evaluate_runs_skips_runs_without_final():
    task = TaskInstance(id="t", task_type=TaskType.FACTUAL_QA, query="q")
    run = RunRecord(task_id="t", method=Method.VERIFACT, failed_stage="initial_cot")
    report = evaluate_runs([run], [task])
    assert report.skipped_runs == ["t"]
    assert report.rows == [] and report.groups == []


def test_aggregate_is_unweighted_mean():
    rows = [
        _row("verifact", "factual_qa", 1.0, 0.0, 1.0, "t1"),
        _row("verifact", "factual_qa", 0.5, 0.5, 0.0, "t2"),
        _row("standard_cot", "factual_qa", 0.2, 0.4, 0.0, "t1"),
        _row("verifact", "explanatory", 0.1, 0.1, 0.1, "t3"),
    ]
    report = aggregate(rows)
    assert [(g.task_type, g.method, g.n_tasks) for g in report.groups] == [
        ("factual_qa", "standard_cot", 1),
        ("factual_qa", "verifact", 2),
        ("explanatory", "verifact", 1),
    ]
    assert report.groups[1].factual_accuracy == pytest.approx(0.75)
    assert report.groups[1].citation_f1 == pytest.approx(0.5)
    assert report.overall.n_tasks == 4
    assert report.overall.factual_accuracy == pytest.approx(0.45)


def test_render_report_rounds_percentages():
    report = EvalReport(groups=[
        GroupRow(**_row("verifact", "factual_qa", 0.83, 0.12, 0.75).model_dump(), n_tasks=1),
        GroupRow(**_row("standard_cot", "controversial", 0.72, 0.25, 0.45).model_dump(), n_tasks=1),
    ])
    table = render_report(report)
    lines = table.splitlines()
    assert lines[0] == "| Task Type | Method | Factual ACC | Hallucination (↓) | Citation Quality |"
    assert lines[1] == "|---|---|---|---|---|"
    assert lines[2] == "| Complex Factual QA | VeriFact-CoT | 83 | 12 | 0.75 |"
    assert lines[3] == "| Controversial Topic Analysis | Standard CoT | 72 | 25 | 0.45 |"

    delimited = render_report(report, "delimited", show_cost=True).splitlines()
    assert delimited[1].split("\t")[:5] == ["Complex Factual QA", "VeriFact-CoT", "83", "12", "0.75"]
    assert delimited[0].endswith("Latency (ms)")


def test_method_labels():
    assert method_key(Method.VERIFACT, AblationConfig(skip_claim_extraction=True)) == "verifact/no_claim_extraction"
    assert method_key(Method.VERIFACT, AblationConfig(skip_verification=True, skip_refinement=True)) == (
        "verifact/no_verification+no_refinement"
    )
    assert method_key(Method.STANDARD_COT, AblationConfig()) == "standard_cot"
    assert method_label("verifact/no_claim_extraction", ablation_table=True) == "VeriFact-CoT w/o Claim Extraction"
    assert method_label("verifact", ablation_table=True) == "VeriFact-CoT (Full)"
    assert method_label("standard_cot", ablation_table=True) == "Standard CoT (Baseline)"
    assert method_label("cot_rag") == "CoT + Basic RAG"


def test_ablation_table_orders_variants():
    rows = [
        _row("verifact", "factual_qa", 0.8, 0.1, 0.7),
        _row("verifact/no_refinement", "factual_qa", 0.6, 0.2, 0.3),
        _row("standard_cot", "factual_qa", 0.5, 0.3, 0.0),
        _row("verifact/no_claim_extraction", "factual_qa", 0.7, 0.2, 0.5),
    ]
    lines = render_ablation_table(aggregate(rows)).splitlines()
    assert [line.split(" | ")[0].lstrip("| ") for line in lines[2:]] == [
        "Standard CoT (Baseline)",
        "VeriFact-CoT w/o Claim Extraction",
        "VeriFact-CoT w/o Refinement & Integration",
        "VeriFact-CoT (Full)",
    ]


def test_merge_reports_conflict():
    first = aggregate([_row("verifact", "factual_qa", 1.0, 0.0, 1.0)])
    second = aggregate([_row("standard_cot", "factual_qa", 0.5, 0.5, 0.0)])

    merged = merge_reports([first, second])
    assert [g.method for g in merged.groups] == ["standard_cot", "verifact"]

    with pytest.raises(ReportConflictError):
        merge_reports([first, aggregate([_row("verifact", "factual_qa", 0.1, 0.1, 0.1)])])
