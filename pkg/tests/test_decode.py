import logging
import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from semqg.decode import (
    BeamHypothesis, DecodeConfig, beam_search, blocked_tokens, diverse_beam_search, greedy_decode, ngram_block,
    sample_decode, sibling_penalized,
)
from semqg.nn import RngState
from semqg.qg import QGConfig, QGModel, make_batch
from semqg.text import EOS_ID, TokenizedExample, Vocabulary, bio_tag
from semqg.trainer import sequence_logprobs

from toy_models import HistoryModel, TableModel, _row, exhaustive_topk

F64 = torch.float64


def _rescore(model, tokens):
    prev, total = 2, 0.0
    for t, tok in enumerate(tokens):
        total += float(_row(model, t, prev)[tok])
        prev = tok
    return total


def _probs(*rows):
    return TableModel(torch.log(torch.tensor(rows, dtype=F64)))


def test_config_validation():
    for bad in (dict(beam_size=0), dict(max_len=0), dict(diversity=-1), dict(block_ngram=4),
                dict(min_len=5, max_len=5)):
        with pytest.raises(ValueError):
            DecodeConfig(**bad)


def test_greedy_hand_traced_path():
    # ids: 0 pad, 1 unk, 2 bos, 3 eos; prev-token dependent tables over 4 tokens
    table = torch.full((3, 4, 4), 1e-3, dtype=F64)
    table[0, 2] = torch.tensor([0.1, 0.6, 0.1, 0.2], dtype=F64)   # from BOS: token 1
    table[1, 1] = torch.tensor([0.5, 0.1, 0.1, 0.3], dtype=F64)   # after 1: token 0
    table[2, 0] = torch.tensor([0.1, 0.2, 0.1, 0.6], dtype=F64)   # after 0: EOS
    m = HistoryModel(torch.log(table / table.sum(-1, keepdim=True)))
    h = greedy_decode(m, 1, DecodeConfig(beam_size=1, max_len=5))[0]
    assert h.tokens == [1, 0, EOS_ID] and h.finished
    assert h.score == pytest.approx(math.log(0.6) + math.log(0.5) + math.log(0.6), rel=1e-12)


@given(st.integers(0, 500), st.integers(1, 6))
@settings(max_examples=30, deadline=None)
def test_greedy_terminates_within_max_len(seed, max_len):
    m = HistoryModel.random(seed, 5, 6)
    h = greedy_decode(m, 2, DecodeConfig(beam_size=1, max_len=max_len))
    assert all(1 <= len(x.tokens) <= max_len for x in h)


def test_beam_one_equals_greedy_when_greedy_is_optimal():
    m = _probs([0.05, 0.05, 0.0, 0.0, 0.9], [0.05, 0.0, 0.0, 0.9, 0.05], [0.2] * 5)
    g = greedy_decode(m, 1, DecodeConfig(beam_size=1, max_len=4))[0]
    b = beam_search(m, 1, DecodeConfig(beam_size=1, max_len=4))[0][0]
    assert g.tokens == b.tokens == [4, EOS_ID]
    assert g.score == b.score


@pytest.mark.parametrize("seed", range(30))
def test_beam_one_never_worse_than_greedy(seed):
    m = HistoryModel.random(seed, 5, 4)
    cfg = DecodeConfig(beam_size=1, max_len=4)
    g = greedy_decode(m, 1, cfg)[0]
    b = beam_search(m, 1, cfg)[0][0]
    assert b.score >= g.score - 1e-12


def test_sample_deterministic_and_degenerate():
    m = HistoryModel.random(3, 5, 4)
    a = sample_decode(m, 3, RngState(11), DecodeConfig(beam_size=1, max_len=4))
    b = sample_decode(m, 3, RngState(11), DecodeConfig(beam_size=1, max_len=4))
    assert [h.tokens for h in a] == [h.tokens for h in b]
    sure = _probs([0, 0, 0, 0, 1.0], [0, 0, 0, 1.0, 0], [0.2] * 5)
    s = sample_decode(sure, 2, RngState(0), DecodeConfig(beam_size=1, max_len=4))
    g = greedy_decode(sure, 2, DecodeConfig(beam_size=1, max_len=4))
    assert [h.tokens for h in s] == [h.tokens for h in g] == [[4, EOS_ID]] * 2


def _qg_setup(seed=0):
    vocab = Vocabulary(["alice", "was", "born", "in", "paris", "who", "where", "?"])
    cfg = QGConfig(d_word=4, d_answer=2, d_pos=2, d_ner=2, hidden=4, dropout=0.0, dtype="float64")
    m = QGModel(cfg, vocab, seed=seed)
    ctx = [["alice", "was", "born", "in", "lyon"], ["bob", "was", "born"]]
    exs = [TokenizedExample(f"e{i}", c, (0, 0), bio_tag(len(c), (0, 0)), ["NOUN"] * len(c), ["O"] * len(c))
           for i, c in enumerate(ctx)]
    return m, make_batch(exs, vocab, True), exs


@pytest.mark.parametrize("seed", range(3))
def test_sample_logprobs_match_teacher_forced_rescoring(seed):
    m, batch, _ = _qg_setup(seed)
    m.eval()
    hyps = sample_decode(m, batch, RngState(seed), DecodeConfig(beam_size=1, max_len=6))
    with torch.no_grad():
        lp = sequence_logprobs(m, batch, [h.tokens for h in hyps])
    for b, h in enumerate(hyps):
        assert lp[b].sum().item() == pytest.approx(h.score, abs=1e-9)
        assert sum(h.step_logprobs) == pytest.approx(h.score, abs=1e-12)


def test_qg_beam_scores_match_rescoring():
    m, batch, exs = _qg_setup(1)
    m.eval()
    beams = beam_search(m, batch, DecodeConfig(beam_size=3, max_len=5))
    with torch.no_grad():
        for ex, hyps in zip(exs, beams):
            one = make_batch([ex], m.vocab, True)
            for h in hyps:
                assert sequence_logprobs(m, one, [h.tokens]).sum().item() == pytest.approx(h.score, abs=1e-9)


@pytest.mark.parametrize("seed", range(50))
def test_beam_equals_exhaustive_topk(seed):
    k = 1 + seed % 4
    max_len = 1 + (seed // 4) % 4
    m = TableModel.random(seed, 5, max_len)
    got = beam_search(m, 1, DecodeConfig(beam_size=k, max_len=max_len))[0]
    want = exhaustive_topk(m, max_len, k)
    assert [h.tokens for h in got] == [s for s, _ in want]
    assert [h.score for h in got] == pytest.approx([v for _, v in want], abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_beam_sorted_and_rescored_on_history_model(seed):
    m = HistoryModel.random(seed, 5, 4)
    hyps = beam_search(m, 1, DecodeConfig(beam_size=4, max_len=4))[0]
    scores = [h.score for h in hyps]
    assert scores == sorted(scores, reverse=True)
    for h in hyps:
        assert h.score == pytest.approx(_rescore(m, h.tokens), abs=1e-9)
    assert len({tuple(h.tokens) for h in hyps}) == len(hyps)


def test_beam_returns_all_k():
    m = TableModel.random(0, 5, 4)
    assert len(beam_search(m, 2, DecodeConfig(beam_size=4, max_len=4))[1]) == 4


@pytest.mark.parametrize("seed", range(20))
def test_diverse_zero_is_bit_identical(seed):
    m = HistoryModel.random(seed, 5, 4)
    cfg = DecodeConfig(beam_size=3, max_len=4)
    a = beam_search(m, 1, cfg)[0]
    b = diverse_beam_search(m, 1, cfg, diversity=0.0)[0]
    assert [(h.tokens, h.score, h.parents) for h in a] == [(h.tokens, h.score, h.parents) for h in b]


@pytest.mark.parametrize("seed", range(20))
def test_diverse_first_tokens_at_least_as_varied(seed):
    m = HistoryModel.random(seed, 5, 4, scale=3.0)
    cfg = DecodeConfig(beam_size=3, max_len=4)
    plain = {h.tokens[0] for h in beam_search(m, 1, cfg)[0]}
    div = {h.tokens[0] for h in diverse_beam_search(m, 1, cfg, diversity=5.0)[0]}
    assert len(div) >= len(plain)


def test_sibling_penalty_hand_computation():
    logp = torch.log(torch.tensor([[0.5, 0.3, 0.2], [0.1, 0.6, 0.3]], dtype=F64))
    scores = logp + torch.tensor([[-1.0], [-2.0]], dtype=F64)
    keys = sibling_penalized(scores, logp, 0.5)
    # ranks: row 0 -> 1, 2, 3; row 1 -> 3, 1, 2
    expected = scores - 0.5 * torch.tensor([[1, 2, 3], [3, 1, 2]], dtype=F64)
    assert torch.equal(keys, expected)
    assert torch.equal(sibling_penalized(scores, logp, 0.0), scores)


def test_ngram_block_definitions():
    assert blocked_tokens([5, 6, 5], 2) == {6}
    assert blocked_tokens([5, 6, 7, 5, 6], 3) == {7}
    assert blocked_tokens([5], 3) == set()
    logp = torch.log_softmax(torch.randn(8, dtype=F64), -1)
    out = ngram_block(logp, [5, 6, 5], 2)
    assert out[6] == float("-inf")
    assert torch.exp(out).sum().item() == pytest.approx(1.0, abs=1e-12)
    assert ngram_block(logp, [5, 6, 5], 0) is logp
    with pytest.raises(ValueError):
        ngram_block(logp, [1, 1], 4)


def test_ngram_block_all_blocked_falls_back(caplog):
    logp = torch.log(torch.tensor([0.0, 1.0], dtype=F64))
    with caplog.at_level(logging.WARNING):
        out = ngram_block(logp, [1, 1], 2)
    assert torch.equal(out, logp)
    assert "blocking" in caplog.text


@given(st.integers(0, 300), st.sampled_from([2, 3]))
@settings(max_examples=30, deadline=None)
def test_blocked_decodes_never_repeat_ngrams(seed, n):
    m = HistoryModel.random(seed, 5, 10)
    cfg = DecodeConfig(beam_size=3, max_len=10, block_ngram=n)
    seqs = [greedy_decode(m, 1, cfg)[0].tokens, sample_decode(m, 1, RngState(seed), cfg)[0].tokens]
    seqs += [h.tokens for h in beam_search(m, 1, cfg)[0]]
    for s in seqs:
        grams = [tuple(s[i:i + n]) for i in range(len(s) - n + 1)]
        # the fallback path can only trigger when every token is blocked, impossible with 5 tokens and n <= 3 here
        assert len(grams) == len(set(grams))


def test_min_len_blocks_early_eos():
    m = _probs([0.1, 0.1, 0.0, 0.7, 0.1], [0.2] * 5, [0.2] * 5)
    assert greedy_decode(m, 1, DecodeConfig(beam_size=1, max_len=3))[0].tokens == [EOS_ID]
    h = greedy_decode(m, 1, DecodeConfig(beam_size=1, max_len=3, min_len=1))[0]
    assert h.tokens[0] != EOS_ID and len(h.tokens) >= 2


def test_beam_pure_function():
    m, batch, _ = _qg_setup(2)
    m.eval()
    cfg = DecodeConfig(beam_size=4, max_len=5, block_ngram=3)
    a = beam_search(m, batch, cfg)
    b = beam_search(m, batch, cfg)
    assert [[(h.tokens, h.score) for h in r] for r in a] == [[(h.tokens, h.score) for h in r] for r in b]


def test_hypothesis_body_strips_eos():
    assert BeamHypothesis([4, 5, EOS_ID], 0.0, True).body() == [4, 5]
