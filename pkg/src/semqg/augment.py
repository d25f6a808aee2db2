"""Synthetic QA data: generation with a QG model, QAP scoring, threshold filtering and dedup."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .data import DataError, QAExample, dumps_jsonl, load_jsonl, tokenize_all, with_question
from .decode import DecodeConfig, beam_search
from .qg import QGModel, ids_to_tokens, make_batch
from .rewards import QAModel, qap_batch
from .text import Tagger

logger = logging.getLogger(__name__)

EPSILON_GRID = (0.0, 0.2, 0.4, 0.6, 0.8)
SOURCES = ("existing", "new")


def normalize_question(text: Optional[str]) -> str:
    return " ".join((text or "").lower().split())


def _generate(model: QGModel, examples: Sequence[QAExample], config: DecodeConfig, top: Optional[int],
              source: str, generator_id: str, tagger: Optional[Tagger], chunk: int = 32) -> list[QAExample]:
    out = []
    tokenized = tokenize_all(examples, tagger)
    model.eval()
    for s in range(0, len(examples), chunk):
        part = tokenized[s:s + chunk]
        batch = make_batch(part, model.vocab, model.config.copy, questions=[None] * len(part))
        for ex, beams, oovs in zip(examples[s:s + chunk], beam_search(model, batch, config), batch.oovs):
            for rank, hyp in enumerate(beams[:top] if top else beams, 1):
                question = " ".join(ids_to_tokens(hyp.tokens, model.vocab, oovs))
                if not question:
                    continue
                out.append(with_question(ex, question, id=f"{ex.id}-{source}{rank}", source=source,
                                         beam_rank=rank, generator_id=generator_id, qap_score=None))
    return out


# beam 10 with trigram blocking; EOS is barred at the first step so no question is empty
GENERATION = DecodeConfig(min_len=1, block_ngram=3)


def generate_from_existing(model: QGModel, labeled: Sequence[QAExample], config: DecodeConfig = GENERATION,
                           generator_id: str = "", tagger: Optional[Tagger] = None) -> list[QAExample]:
    """Every beam hypothesis for each labeled (context, answer); gold questions are ignored here."""
    return _generate(model, labeled, config, None, "existing", generator_id, tagger)


def generate_from_new(model: QGModel, unlabeled: Sequence[QAExample], config: DecodeConfig = GENERATION,
                      top: int = 1, generator_id: str = "", tagger: Optional[Tagger] = None) -> list[QAExample]:
    """Top-``top`` beam questions for contexts that carry answer spans but no question."""
    for ex in unlabeled:
        if ex.question is not None:
            raise DataError(f"{ex.id}: unlabeled record already has a question")
    return _generate(model, unlabeled, config, top, "new", generator_id, tagger)


def qap_score_all(synthetic: Sequence[QAExample], qa: QAModel, tagger: Optional[Tagger] = None) -> list[QAExample]:
    """Annotate each example with QAP under ``qa``; scores do not depend on input order."""
    order = sorted(range(len(synthetic)), key=lambda i: synthetic[i].id)
    canon = [synthetic[i] for i in order]
    scores = qap_batch(qa, tokenize_all(canon, tagger))
    by_pos = {i: min(max(sc, 0.0), 1.0) for i, sc in zip(order, scores)}
    return [with_question(ex, ex.question, qap_score=by_pos[i]) for i, ex in enumerate(synthetic)]


@dataclass(frozen=True)
class FilterConfig:
    epsilon: float = 0.0
    dedup: bool = False

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")


@dataclass
class FilterResult:
    kept: list
    summary: dict


def _pair_key(ex: QAExample) -> tuple:
    return ex.context, ex.answer_start, ex.answer_text


def filter_synthetic(synthetic: Sequence[QAExample], config: FilterConfig = FilterConfig(),
                     ground_truth: Sequence[QAExample] = ()) -> FilterResult:
    """Keep {x : qap_score(x) >= epsilon}; with dedup, also drop copies of the gold question
    of the same context-answer pair and all but the best-scoring copy of each repeated
    (context, answer, question) triple."""
    for ex in synthetic:
        if ex.qap_score is None:
            raise DataError(f"{ex.id}: unscored example cannot be filtered")
    gold = {_pair_key(g): normalize_question(g.question) for g in ground_truth if g.question is not None}
    # each repeated triple is represented by its best-scoring copy (earliest on ties), whatever epsilon is,
    # so raising epsilon only ever removes examples
    best = {}
    for i, ex in enumerate(synthetic if config.dedup else ()):
        triple = _pair_key(ex) + (normalize_question(ex.question),)
        if triple not in best or ex.qap_score > synthetic[best[triple]].qap_score:
            best[triple] = i
    kept = []
    for i, ex in enumerate(synthetic):
        if ex.qap_score < config.epsilon:
            continue
        if config.dedup:
            q = normalize_question(ex.question)
            if gold.get(_pair_key(ex)) == q or best[_pair_key(ex) + (q,)] != i:
                continue
        kept.append(ex)
    mean = sum(ex.qap_score for ex in kept) / len(kept) if kept else 0.0
    summary = {"epsilon": config.epsilon, "dedup": config.dedup, "kept": len(kept),
               "dropped": len(synthetic) - len(kept), "mean_qap": mean}
    return FilterResult(kept, summary)


def sweep(synthetic: Sequence[QAExample], grid: Sequence[float] = EPSILON_GRID, dedup: bool = False,
          ground_truth: Sequence[QAExample] = ()) -> list[FilterResult]:
    return [filter_synthetic(synthetic, FilterConfig(e, dedup), ground_truth) for e in grid]


@dataclass
class SemiDataset:
    """Ground-truth and synthetic pools kept apart for the mixing iterator."""

    ground_truth: list
    synthetic: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.ground_truth) + len(self.synthetic)

    def descriptor(self) -> dict:
        return {"ground_truth": "ground_truth.jsonl", "synthetic": "synthetic.jsonl",
                "n_ground_truth": len(self.ground_truth), "n_synthetic": len(self.synthetic), "size": self.size}

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "ground_truth.jsonl").write_text(dumps_jsonl(self.ground_truth), encoding="utf-8")
        (d / "synthetic.jsonl").write_text(dumps_jsonl(self.synthetic), encoding="utf-8")
        (d / "dataset.json").write_text(json.dumps(self.descriptor(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "SemiDataset":
        d = Path(directory)
        desc = json.loads((d / "dataset.json").read_text())
        out = build_semi_dataset(load_jsonl(d / desc["ground_truth"]), load_jsonl(d / desc["synthetic"]))
        if out.size != desc["size"]:
            raise DataError(f"{d}: descriptor size {desc['size']} != {out.size} records")
        return out


def build_semi_dataset(ground_truth: Sequence[QAExample], kept_synthetic: Sequence[QAExample] = ()) -> SemiDataset:
    ids = [ex.id for ex in ground_truth] + [ex.id for ex in kept_synthetic]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise DataError(f"duplicate ids across pools: {', '.join(dup[:5])}")
    for ex in kept_synthetic:
        if ex.question is None:
            raise DataError(f"{ex.id}: synthetic example without a question")
    return SemiDataset(list(ground_truth), list(kept_synthetic))
