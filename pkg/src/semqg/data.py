"""QA records, JSON-lines IO, SQuAD v1.1 import and tokenization of records."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .text import RuleTagger, Tagger, TokenizedExample, bio_tag, char_span_to_token_span, tokenize

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed or inconsistent dataset content."""


@dataclass
class QAExample:
    id: str
    context: str
    answer_text: str
    answer_start: int
    question: Optional[str] = None
    # synthetic-data annotations; absent on human-labeled records
    qap_score: Optional[float] = None
    source: Optional[str] = None
    beam_rank: Optional[int] = None
    generator_id: Optional[str] = None

    def __post_init__(self):
        got = self.context[self.answer_start:self.answer_start + len(self.answer_text)]
        if got != self.answer_text or not self.answer_text:
            raise DataError(f"{self.id}: answer {self.answer_text!r} not found at offset {self.answer_start}")

    def to_record(self) -> dict:
        rec = {"id": self.id, "context": self.context}
        if self.question is not None:
            rec["question"] = self.question
        rec["answer_text"] = self.answer_text
        rec["answer_start"] = self.answer_start
        for k in ("qap_score", "source", "beam_rank", "generator_id"):
            v = getattr(self, k)
            if v is not None:
                rec[k] = v
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "QAExample":
        known = {f.name for f in fields(cls)}
        missing = [k for k in ("id", "context", "answer_text", "answer_start") if k not in rec]
        if missing:
            raise DataError(f"missing field(s) {', '.join(missing)}")
        extra = set(rec) - known
        if extra:
            raise DataError(f"unknown field(s) {', '.join(sorted(extra))}")
        if not isinstance(rec["answer_start"], int):
            raise DataError("answer_start must be an integer")
        return cls(**rec)


def dumps_jsonl(examples: Iterable[QAExample]) -> str:
    return "".join(json.dumps(ex.to_record(), ensure_ascii=False, sort_keys=False) + "\n" for ex in examples)


def save_jsonl(path, examples: Iterable[QAExample]) -> None:
    Path(path).write_text(dumps_jsonl(examples), encoding="utf-8")


def load_jsonl(path) -> list[QAExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(QAExample.from_record(json.loads(line)))
            except (json.JSONDecodeError, DataError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


@dataclass
class SquadImport:
    examples: list[QAExample] = field(default_factory=list)
    warnings: int = 0


def import_squad(path) -> SquadImport:
    """One QAExample per (question, first answer); offset mismatches are skipped and counted."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    result = SquadImport()
    for article in doc.get("data", []):
        for para in article.get("paragraphs", []):
            context = para["context"]
            for qa in para.get("qas", []):
                answers = qa.get("answers", [])
                if not answers:
                    result.warnings += 1
                    continue
                ans = answers[0]
                try:
                    result.examples.append(QAExample(
                        id=str(qa["id"]), context=context, question=qa["question"],
                        answer_text=ans["text"], answer_start=int(ans["answer_start"])))
                except DataError as exc:
                    logger.warning("skipping %s: %s", qa.get("id"), exc)
                    result.warnings += 1
    return result


def tokenize_example(ex: QAExample, tagger: Optional[Tagger] = None) -> TokenizedExample:
    """Tokenize, snap the answer to covering tokens and tag features (tagging sees cased text)."""
    tagger = tagger or RuleTagger()
    toks = tokenize(ex.context)
    s, e, snapped = char_span_to_token_span(toks, ex.answer_start, ex.answer_start + len(ex.answer_text))
    if snapped:
        logger.warning("%s: answer span snapped outward to token boundaries", ex.id)
    pos, ner = tagger.tag([t.raw for t in toks])
    q = [t.text for t in tokenize(ex.question)] if ex.question is not None else None
    return TokenizedExample(
        id=ex.id, context_tokens=[t.text for t in toks], answer_span=(s, e),
        bio_tags=bio_tag(len(toks), (s, e)), pos_tags=pos, ner_tags=ner, question_tokens=q)


def tokenize_all(examples: Sequence[QAExample], tagger: Optional[Tagger] = None) -> list[TokenizedExample]:
    return [tokenize_example(ex, tagger) for ex in examples]


def with_question(ex: QAExample, question: Optional[str], **extra) -> QAExample:
    rec = asdict(ex)
    rec["question"] = question
    rec.update(extra)
    return QAExample(**rec)
