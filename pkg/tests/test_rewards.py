import math

import pytest
import torch

from semqg.rewards import (
    QAConfig, QAModel, QPCConfig, QPCModel, _bce, _encode_tokens, exact_match_rate, make_qa_batch, qap, qap_batch,
    qpc_accuracy, qpp, qpp_batch, train_qa, train_qpc,
)
from semqg.text import Vocabulary


def test_qpp_in_open_unit_interval_and_symmetric_features(spec):
    m = QPCModel(QPCConfig(hidden=8, d_word=8, mlp_hidden=8), Vocabulary(spec.lexicon()), seed=0)
    q = "who was born in paris ?".split()
    v = qpp(q, "where was alice born ?".split(), m)
    assert 0.0 < v < 1.0
    a, la = _encode_tokens(m.vocab, [q])
    s = m.sentence(a, la)
    f = m.features(s, s)
    d = s.shape[1]
    assert (f[:, 2 * d:3 * d] == 0).all()
    with pytest.raises(ValueError):
        qpp([], q, m)


def test_qpc_initial_loss_near_chance(spec, paraphrase_data):
    train, _ = paraphrase_data
    m = QPCModel(QPCConfig(), Vocabulary(spec.lexicon()), seed=0)
    a, la = _encode_tokens(m.vocab, [p[0] for p in train])
    b, lb = _encode_tokens(m.vocab, [p[1] for p in train])
    y = torch.tensor([float(p[2]) for p in train])
    assert _bce(m.logits(a, la, b, lb), y).item() == pytest.approx(math.log(2), abs=0.05)


def test_bce_matches_formula():
    z = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    y = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
    sig = [1 / (1 + math.exp(-v)) for v in z.tolist()]
    expected = -(math.log(sig[0]) + math.log(1 - sig[1]) + math.log(sig[2])) / 3
    assert _bce(z, y).item() == pytest.approx(expected, rel=1e-12)


def test_qpc_single_class_errors(paraphrase_data):
    train, _ = paraphrase_data
    with pytest.raises(ValueError):
        train_qpc([p for p in train if p[2] == 1], [], QPCConfig(epochs=1))


def test_qpc_training_deterministic(paraphrase_data):
    train, dev = paraphrase_data
    cfg = QPCConfig(hidden=8, d_word=8, mlp_hidden=8, epochs=2)
    a = train_qpc(train[:100], dev[:40], cfg)
    b = train_qpc(train[:100], dev[:40], cfg)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


def test_qpc_reaches_dev_accuracy(trained_qpc, paraphrase_data):
    model, history = trained_qpc
    _, dev = paraphrase_data
    assert len(history) <= 50
    assert qpc_accuracy(model, dev) >= 0.9


def test_qpp_batch_order_invariant(trained_qpc, paraphrase_data):
    model, _ = trained_qpc
    _, dev = paraphrase_data
    a = [p[0] for p in dev[:20]]
    b = [p[1] for p in dev[:20]]
    fwd = qpp_batch(model, a, b)
    rev = qpp_batch(model, a[::-1], b[::-1])[::-1]
    assert fwd == pytest.approx(rev, abs=1e-6)
    assert fwd[3] == pytest.approx(qpp(a[3], b[3], model), abs=1e-6)


def test_qpc_checkpoint_roundtrip(tmp_path, trained_qpc):
    model, _ = trained_qpc
    model.save(tmp_path / "q.ckpt")
    back = QPCModel.load(tmp_path / "q.ckpt")
    assert all(torch.equal(x, y) for x, y in zip(model.state_dict().values(), back.state_dict().values()))


def test_qap_uniform_heads(tok_train):
    m = QAModel(QAConfig(hidden=8, d_word=8), Vocabulary.build([e.context_tokens for e in tok_train[:5]]))
    with torch.no_grad():
        for head in (m.start_head, m.end_head):
            head.weight.zero_()
            head.bias.zero_()
    ex = tok_train[0]
    M = len(ex.context_tokens)
    assert qap(ex, ex.question_tokens, ex.answer_span, m) == pytest.approx(1 / M ** 2, rel=1e-6)
    with pytest.raises(ValueError):
        qap(ex, ex.question_tokens, (M, M), m)


def test_qa_loss_zero_for_certain_prediction(tok_train, monkeypatch):
    m = QAModel(QAConfig(hidden=8, d_word=8), Vocabulary())
    batch = make_qa_batch(tok_train[:3], m.vocab)
    M = batch.ctx.shape[1]

    def certain(b):
        s = torch.full((3, M), -1e4)
        e = torch.full((3, M), -1e4)
        s[torch.arange(3), b.starts] = 1e4
        e[torch.arange(3), b.ends] = 1e4
        return s, e, None
    monkeypatch.setattr(m, "span_logits", certain)
    assert m.loss(batch).item() == 0.0


def test_qa_requires_questions(tok_train, corpus, tagger):
    from semqg.data import tokenize_all
    with pytest.raises(ValueError):
        train_qa(tokenize_all(corpus.unlabeled[:3], tagger), [], QAConfig(epochs=1))


def test_qa_training_deterministic(tok_train, tok_dev):
    cfg = QAConfig(hidden=8, d_word=8, epochs=2)
    a = train_qa(tok_train[:50], tok_dev[:20], cfg)
    b = train_qa(tok_train[:50], tok_dev[:20], cfg)
    assert exact_match_rate(a, tok_dev[:20]) == exact_match_rate(b, tok_dev[:20])
    assert a.to_bytes() == b.to_bytes()


def test_qa_memorizes_train_split(tok_train):
    model = train_qa(tok_train, [], QAConfig(epochs=200, patience=10))
    assert exact_match_rate(model, tok_train) >= 0.95


def test_qap_matched_beats_swapped(trained_qa, tok_train):
    model, _ = trained_qa
    matched = qap_batch(model, tok_train)
    swapped_q = [tok_train[(i + 1) % len(tok_train)].question_tokens for i in range(len(tok_train))]
    swapped = qap_batch(model, tok_train, swapped_q)
    assert all(0.0 <= v <= 1.0 for v in matched + swapped)
    assert sum(matched) / len(matched) > sum(swapped) / len(swapped)


def test_qap_pure_function(trained_qa, tok_dev):
    model, _ = trained_qa
    ex = tok_dev[0]
    assert qap(ex, ex.question_tokens, ex.answer_span, model) == qap(ex, ex.question_tokens, ex.answer_span, model)


def test_qa_checkpoint_roundtrip(tmp_path, trained_qa):
    model, _ = trained_qa
    model.save(tmp_path / "qa.ckpt")
    back = QAModel.load(tmp_path / "qa.ckpt")
    assert back.to_bytes() == model.to_bytes()
