import json
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from semqg.data import (
    DataError, QAExample, dumps_jsonl, import_squad, load_jsonl, save_jsonl, tokenize_example, with_question,
)
from semqg.text import (
    BIO, PAD_ID, RESERVED, RuleTagger, TokenizedExample, Vocabulary, bio_tag, char_span_to_token_span, tokenize,
)
from semqg.toy import ToyLanguageSpec, make_toy_corpus, make_paraphrase_pairs, wh_reward


def test_tokenize_basic():
    assert [t.text for t in tokenize("The cat sat.")] == ["the", "cat", "sat", "."]
    assert tokenize("") == []


def test_tokenize_keeps_numbers_and_offsets():
    text = "Born in 1,850.5 at Paris!"
    toks = tokenize(text)
    assert [t.text for t in toks] == ["born", "in", "1,850.5", "at", "paris", "!"]
    assert all(text[t.start:t.end] == t.raw for t in toks)


@given(st.text(alphabet=st.sampled_from("ab Cd1 .,?x"), max_size=40))
def test_tokenize_offsets_property(text):
    for t in tokenize(text):
        assert text[t.start:t.end].lower() == t.text


def test_answer_spans_align_to_contiguous_tokens(spec):
    c = make_toy_corpus(spec, 500, 250, 250)
    n = 0
    for ex in c.train + c.dev + c.unlabeled:
        toks = tokenize(ex.context)
        s, e, snapped = char_span_to_token_span(toks, ex.answer_start, ex.answer_start + len(ex.answer_text))
        assert not snapped
        assert " ".join(t.raw for t in toks[s:e + 1]) == ex.answer_text
        n += 1
    assert n == 1000


def test_span_snaps_outward():
    toks = tokenize("alpha beta gamma")
    assert char_span_to_token_span(toks, 2, 8) == (0, 1, True)


def test_bio_tag_examples():
    assert bio_tag(4, (1, 2)) == ["O", "B", "I", "O"]
    assert bio_tag(3, (0, 2)) == ["B", "I", "I"]
    t = bio_tag(5, (3, 3))
    assert t.count("B") == 1 and t.count("I") == 0
    with pytest.raises(ValueError):
        bio_tag(3, (2, 3))


@given(st.integers(1, 20).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, n - 1), st.integers(0, n - 1))))
def test_bio_tag_exactly_one_b(args):
    n, a, b = args
    tags = bio_tag(n, (min(a, b), max(a, b)))
    assert tags.count("B") == 1
    for i, t in enumerate(tags):
        if t == "I":
            assert tags[i - 1] in ("B", "I")


def test_tagger_rules(spec):
    tg = spec.tagger()
    assert tg.tag_one("alice") == ("PROPN", "PERSON")
    assert tg.tag_one("1850") == ("NUM", "DATE")
    assert RuleTagger().tag_one("1850") == ("NUM", "DATE")


def test_tag_distribution_matches_generator(spec, corpus, tagger):
    gold_pos, gold_ner, got_pos, got_ner = Counter(), Counter(), Counter(), Counter()
    for ex in corpus.train + corpus.dev + corpus.unlabeled:
        rec = corpus.records[ex.id]
        tok = tokenize_example(ex, tagger)
        assert tok.pos_tags == rec.pos_tags
        assert tok.ner_tags == rec.ner_tags
        gold_pos.update(rec.pos_tags)
        got_pos.update(tok.pos_tags)
        gold_ner.update(rec.ner_tags)
        got_ner.update(tok.ner_tags)
    assert gold_pos == got_pos and gold_ner == got_ner


def test_tagging_deterministic_and_total(corpus, tagger):
    ex = corpus.train[0]
    a, b = tokenize_example(ex, tagger), tokenize_example(ex, tagger)
    assert a == b
    assert len(a.pos_tags) == len(a.ner_tags) == len(a.context_tokens)


def test_vocabulary_reserved_and_bijective():
    v = Vocabulary.build([["b", "a", "a"], ["c"]])
    assert v.itos[:4] == list(RESERVED) and v.id("<pad>") == PAD_ID == 0
    assert v.itos[4] == "a"
    for i, t in enumerate(v.itos):
        assert v.stoi[t] == i
    assert v.encode(["zzz"]) == [1]
    assert Vocabulary.from_list(v.to_list()).itos == v.itos
    with pytest.raises(ValueError):
        Vocabulary.from_list(["x"])


def test_tokenized_example_invariants():
    with pytest.raises(ValueError):
        TokenizedExample("x", ["a", "b"], (0, 0), ["B", "B"], ["NOUN"] * 2, ["O"] * 2)
    with pytest.raises(ValueError):
        TokenizedExample("x", ["a", "b"], (0, 0), ["B", "O"], ["NOUN"], ["O"] * 2)
    with pytest.raises(ValueError):
        BIO.encode(["Q"])


def test_qa_example_offset_invariant():
    with pytest.raises(DataError):
        QAExample("x", "hello world", "world", 0)


def test_jsonl_empty_and_roundtrip(tmp_path, spec):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    assert load_jsonl(p) == []
    c = make_toy_corpus(spec, 600, 200, 200)
    exs = c.train + c.dev + c.unlabeled
    assert len(exs) == 1000
    save_jsonl(p, exs)
    first = p.read_bytes()
    back = load_jsonl(p)
    assert back == exs
    save_jsonl(p, back)
    assert p.read_bytes() == first


def test_jsonl_missing_field_reports_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    good = {"id": "a", "context": "x y", "answer_text": "y", "answer_start": 2}
    bad = {"id": "b", "context": "x y", "answer_text": "y"}
    p.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(DataError, match=":2:.*answer_start"):
        load_jsonl(p)


def _squad(records):
    return {"data": [{"title": "t", "paragraphs": [{"context": c, "qas": [
        {"id": i, "question": q, "answers": [{"text": a, "answer_start": s}]}]} for i, c, q, a, s in records]}]}


def test_import_squad_minimal_and_mismatch(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps(_squad([("q1", "Paris is big.", "Where?", "Paris", 0)])))
    res = import_squad(p)
    assert len(res.examples) == 1 and res.warnings == 0
    p.write_text(json.dumps(_squad([("q1", "Paris is big.", "Where?", "Paris", 3)])))
    res = import_squad(p)
    assert len(res.examples) == 0 and res.warnings == 1


def test_import_squad_roundtrip_50(tmp_path):
    recs = [(f"id{i}", f"Item {i} lives in town{i} today.", f"Where does item {i} live?", f"town{i}",
             len(f"Item {i} lives in ")) for i in range(50)]
    p = tmp_path / "s.json"
    p.write_text(json.dumps(_squad(recs)))
    exs = import_squad(p).examples
    assert len(exs) == 50
    save_jsonl(tmp_path / "o.jsonl", exs)
    assert load_jsonl(tmp_path / "o.jsonl") == exs


def test_toy_corpus_deterministic_and_disjoint():
    spec = ToyLanguageSpec(seed=7)
    a = make_toy_corpus(spec, 200, 100, 50)
    b = make_toy_corpus(spec, 200, 100, 50)
    assert dumps_jsonl(a.train + a.dev + a.unlabeled) == dumps_jsonl(b.train + b.dev + b.unlabeled)
    train_ctx = {e.context for e in a.train}
    assert train_ctx.isdisjoint({e.context for e in a.dev})
    assert train_ctx.isdisjoint({e.context for e in a.unlabeled})
    assert all(e.question is None for e in a.unlabeled)
    assert all(e.question is not None for e in a.train + a.dev)
    for e in a.train:
        assert e.context[e.answer_start:e.answer_start + len(e.answer_text)] == e.answer_text


def test_toy_questions_use_expected_wh_word(corpus, tagger):
    for ex in corpus.train:
        rec = corpus.records[ex.id]
        tok = tokenize_example(ex, tagger)
        assert wh_reward(tok.question_tokens, rec.answer_type) == 1.0


def test_toy_capacity_error():
    tiny = ToyLanguageSpec(first_names=("a",), last_names=("b",), cities=("c",), fields=("d",),
                           year_min=1800, year_max=1800, facts_per_context=1)
    with pytest.raises(ValueError):
        make_toy_corpus(tiny, 100, 0, 0)
    with pytest.raises(ValueError):
        ToyLanguageSpec(cities=())


def test_toy_config_roundtrip(spec):
    back = ToyLanguageSpec.from_config_text(spec.to_config_text())
    assert back == spec
    with pytest.raises(ValueError):
        ToyLanguageSpec.from_config_text("bogus = 1\n")


def test_paraphrase_pairs_balanced_and_distinct(spec):
    pairs = make_paraphrase_pairs(spec, 200, 3)
    assert sum(l for _, _, l in pairs) == 100
    assert all(a != b for a, b, l in pairs if l == 0)
    assert pairs == make_paraphrase_pairs(spec, 200, 3)


def test_with_question_keeps_fields(corpus):
    ex = with_question(corpus.unlabeled[0], "who ?", source="new")
    assert ex.question == "who ?" and ex.source == "new" and ex.context == corpus.unlabeled[0].context
