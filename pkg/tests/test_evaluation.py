import pytest

from semqg.data import DataError
from semqg.decode import DecodeConfig
from semqg.evaluation import (
    config_digest, evaluate_qa, evaluate_qg, load_predictions, qa_based_qg_eval, score_predictions,
    shuffle_questions,
)
from semqg.metrics import em_f1
from semqg.rewards import QAConfig

TINY_QA = QAConfig(hidden=8, d_word=8, epochs=2)


def test_oracle_and_empty_predictors(corpus):
    dev = corpus.dev
    gold = score_predictions({e.id: e.answer_text for e in dev}, dev)
    assert gold.em == gold.f1 == 100.0
    empty = score_predictions({e.id: "" for e in dev}, dev)
    assert empty.em == empty.f1 == 0.0
    with pytest.raises(DataError):
        score_predictions({}, dev[:1])


def test_report_recomputed_from_prediction_file(tmp_path, trained_qa, corpus, tagger):
    qa, _ = trained_qa
    path = tmp_path / "pred.jsonl"
    rep = evaluate_qa(qa, corpus.dev, tagger, predictions_path=path)
    preds = load_predictions(path)
    assert set(preds) == {e.id for e in corpus.dev}
    per = [em_f1(preds[e.id], [e.answer_text]) for e in corpus.dev]
    assert rep.em == pytest.approx(100 * sum(e for e, _ in per) / len(per), abs=1e-9)
    assert rep.f1 == pytest.approx(100 * sum(f for _, f in per) / len(per), abs=1e-9)
    assert rep.f1 >= rep.em
    assert rep.config_digest == config_digest(qa.config)
    again = tmp_path / "again.jsonl"
    evaluate_qa(qa, corpus.dev, tagger, predictions_path=again)
    assert path.read_bytes() == again.read_bytes()


def test_evaluate_qa_needs_questions(trained_qa, corpus, tagger):
    with pytest.raises(DataError):
        evaluate_qa(trained_qa[0], corpus.unlabeled[:2], tagger)


def test_qg_report_contents(qg_checkpoints, corpus, tagger, trained_qa):
    model = qg_checkpoints[0][0]
    reports, hyps = evaluate_qg(model, corpus.dev[:20], DecodeConfig(beam_size=2, min_len=1), qa=trained_qa[0],
                                tagger=tagger)
    names = [r.metric for r in reports]
    assert names[:3] == ["BLEU4", "ROUGE-L", "Q-BLEU1"] and names[-1] == "QAP"
    assert len(hyps) == 20
    for r in reports:
        assert 0.0 <= r.value <= (1.0 if r.metric == "QAP" else 100.0)


def test_shuffle_is_derangement(corpus):
    exs = corpus.train[:30]
    sh = shuffle_questions(exs, 0)
    assert sorted(e.question for e in sh) == sorted(e.question for e in exs)
    assert sum(a.question == b.question for a, b in zip(sh, exs)) < 30
    assert [e.question for e in shuffle_questions(exs, 0)] == [e.question for e in sh]


def test_qa_based_eval_rejects_leakage_and_unlabeled_oracle(corpus):
    with pytest.raises(DataError):
        qa_based_qg_eval(None, corpus.dev[:5], corpus.dev, TINY_QA)
    with pytest.raises(DataError):
        qa_based_qg_eval(None, corpus.unlabeled[:5], corpus.dev, TINY_QA)


def test_qa_based_eval_deterministic(corpus, tagger):
    # the train split plays the annotated pool here; its contexts are disjoint from dev
    a = qa_based_qg_eval(None, corpus.train[:60], corpus.dev[:30], TINY_QA, tagger=tagger)
    b = qa_based_qg_eval(None, corpus.train[:60], corpus.dev[:30], TINY_QA, tagger=tagger)
    assert (a.em, a.f1, a.per_example) == (b.em, b.f1, b.per_example)
