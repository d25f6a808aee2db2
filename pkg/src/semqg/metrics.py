"""Text-generation and extractive-QA metrics."""
from __future__ import annotations

import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .text import FUNCTION_WORDS, RuleTagger, tokenize

Tokens = Sequence[str]


def _as_tokens(x) -> list[str]:
    return [t.text for t in tokenize(x)] if isinstance(x, str) else list(x)


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuResult:
    score: float                   # 0..100
    precisions: list               # p_1..p_N as fractions
    matches: list
    totals: list
    brevity_penalty: float
    hyp_len: int
    ref_len: int


def _bleu_from_counts(matches, totals, hyp_len, ref_len, smooth: bool, order: int) -> BleuResult:
    precisions = []
    for n in range(order):
        m, t = matches[n], totals[n]
        if smooth and n > 0:
            precisions.append((m + 1) / (t + 1))
        else:
            precisions.append(m / t if t else 0.0)
    if hyp_len == 0:
        return BleuResult(0.0, precisions, matches, totals, 0.0, hyp_len, ref_len)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1 - ref_len / hyp_len)
    if min(precisions) <= 0:
        return BleuResult(0.0, precisions, matches, totals, bp, hyp_len, ref_len)
    score = bp * math.exp(sum(math.log(p) for p in precisions) / order)
    return BleuResult(100.0 * score, precisions, matches, totals, bp, hyp_len, ref_len)


def _counts(hyp: Tokens, ref: Tokens, order: int):
    matches, totals = [], []
    for n in range(1, order + 1):
        h, r = ngrams(hyp, n), ngrams(ref, n)
        matches.append(sum(min(c, r[g]) for g, c in h.items()))
        totals.append(max(len(hyp) - n + 1, 0))
    return matches, totals


def bleu(hypotheses: Sequence, references: Sequence, mode: str = "corpus", order: int = 4) -> BleuResult:
    """Corpus BLEU (clipped counts pooled, brevity penalty on total length) or
    smoothed sentence BLEU (add-one on orders >= 2) averaged over sentences."""
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in length")
    hyps = [_as_tokens(h) for h in hypotheses]
    refs = [_as_tokens(r) for r in references]
    if any(not r for r in refs):
        raise ValueError("empty reference")
    if mode == "corpus":
        matches, totals = [0] * order, [0] * order
        for h, r in zip(hyps, refs):
            m, t = _counts(h, r, order)
            matches = [a + b for a, b in zip(matches, m)]
            totals = [a + b for a, b in zip(totals, t)]
        return _bleu_from_counts(matches, totals, sum(map(len, hyps)), sum(map(len, refs)), False, order)
    if mode == "smoothed-sentence":
        results = [_bleu_from_counts(*_counts(h, r, order), len(h), len(r), True, order) for h, r in zip(hyps, refs)]
        mean = sum(x.score for x in results) / len(results) if results else 0.0
        first = results[0] if len(results) == 1 else None
        if first is not None:
            return first
        return BleuResult(mean, [], [], [], 1.0, sum(map(len, hyps)), sum(map(len, refs)))
    raise ValueError(f"unknown BLEU mode {mode!r}")


def bleu4(hypotheses, references, mode: str = "corpus") -> float:
    return bleu(hypotheses, references, mode, 4).score


def sentence_bleu(hyp, ref, order: int = 4) -> float:
    return bleu([hyp], [ref], "smoothed-sentence", order).score


def lcs_length(a: Tokens, b: Tokens) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


ROUGE_BETA = 1.2


def rouge_l(hypothesis, reference, beta: float = ROUGE_BETA) -> float:
    hyp, ref = _as_tokens(hypothesis), _as_tokens(reference)
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    return 100.0 * (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


# ---------------------------------------------------------------- Q-BLEU1

QUESTION_WORDS = frozenset({"who", "whom", "whose", "what", "when", "where", "which", "why", "how"})
_DEFAULT_TAGGER = RuleTagger()


def question_channels(tokens: Tokens, tagger: Optional[RuleTagger] = None) -> dict:
    tagger = tagger or _DEFAULT_TAGGER
    _, ner = tagger.tag(list(tokens))
    out = {"question": [], "entity": [], "content": [], "function": []}
    for tok, tag in zip(tokens, ner):
        if all(ch in string.punctuation for ch in tok):
            continue
        if tok in QUESTION_WORDS:
            out["question"].append(tok)
        elif tag != "O":
            out["entity"].append(tok)
        elif tok in FUNCTION_WORDS:
            out["function"].append(tok)
        else:
            out["content"].append(tok)
    return out


def _overlap_pr(h: list, r: list) -> tuple[float, float]:
    if not h and not r:
        return 1.0, 1.0
    if not h or not r:
        return 0.0, 0.0
    common = sum((Counter(h) & Counter(r)).values())
    return common / len(h), common / len(r)


Q_WEIGHTS = {"question": 0.25, "entity": 0.25, "content": 0.25, "function": 0.25}
Q_DELTA = 0.66


def answerability(hyp: Tokens, ref: Tokens, weights: dict = Q_WEIGHTS, tagger=None) -> float:
    hc, rc = question_channels(hyp, tagger), question_channels(ref, tagger)
    p = r = 0.0
    for ch, w in weights.items():
        pi, ri = _overlap_pr(hc[ch], rc[ch])
        p += w * pi
        r += w * ri
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def q_bleu1(hypothesis, reference, weights: Optional[dict] = None, delta: float = Q_DELTA, tagger=None) -> float:
    """delta * answerability + (1 - delta) * BLEU1/100, in [0, 1]."""
    weights = dict(Q_WEIGHTS if weights is None else weights)
    if set(weights) != set(Q_WEIGHTS) or abs(sum(weights.values()) - 1.0) > 1e-9:
        raise ValueError("Q-BLEU weights must cover the four channels and sum to 1")
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must be in [0, 1]")
    hyp, ref = _as_tokens(hypothesis), _as_tokens(reference)
    b1 = bleu([hyp], [ref], "corpus", order=1).score / 100.0
    if delta == 0.0:
        return b1
    return delta * answerability(hyp, ref, weights, tagger) + (1 - delta) * b1


# ---------------------------------------------------------------- SQuAD

_ARTICLES = re.compile(r"\b(a|an|the)\b", re.UNICODE)
_PUNCT = set(string.punctuation)


def squad_normalize(text: str) -> str:
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def _f1(pred: str, gold: str) -> float:
    p, g = squad_normalize(pred).split(), squad_normalize(gold).split()
    common = sum((Counter(p) & Counter(g)).values())
    if common == 0:
        return 0.0
    precision, recall = common / len(p), common / len(g)
    return 2 * precision * recall / (precision + recall)


def em_f1(prediction: str, gold_answers: Sequence[str]) -> tuple[int, float]:
    if not gold_answers:
        raise ValueError("need at least one gold answer")
    em = max(int(squad_normalize(prediction) == squad_normalize(g)) for g in gold_answers)
    f1 = max(_f1(prediction, g) for g in gold_answers)
    return em, f1


@dataclass
class MetricReport:
    metric: str
    value: float
    per_example: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"metric": self.metric, "value": self.value, "per_example": self.per_example, "config": self.config}


def qg_metric_reports(hyps: Sequence[Tokens], refs: Sequence[Tokens]) -> list[MetricReport]:
    """Corpus BLEU4, mean ROUGE-L and mean Q-BLEU1 over paired token lists."""
    b = bleu(hyps, refs, "corpus")
    rl = [rouge_l(h, r) for h, r in zip(hyps, refs)]
    qb = [q_bleu1(h, r) for h, r in zip(hyps, refs)]
    n = max(len(hyps), 1)
    return [
        MetricReport("BLEU4", b.score, [sentence_bleu(h, r) for h, r in zip(hyps, refs)],
                     {"mode": "corpus", "order": 4, "per_example": "smoothed-sentence"}),
        MetricReport("ROUGE-L", sum(rl) / n, rl, {"beta": ROUGE_BETA}),
        MetricReport("Q-BLEU1", 100.0 * sum(qb) / n, qb, {"delta": Q_DELTA, "weights": Q_WEIGHTS}),
    ]
