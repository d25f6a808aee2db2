"""QA evaluation (EM/F1), QG metric reports and QA-based evaluation of a QG model."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from .augment import GENERATION, generate_from_new
from .data import DataError, QAExample, tokenize_all, with_question
from .decode import DecodeConfig, beam_search
from .metrics import MetricReport, em_f1, qg_metric_reports
from .qg import QGModel, ids_to_tokens, make_batch
from .rewards import QAConfig, QAModel, QPCModel, qap_batch, qpp_batch, train_qa
from .text import Tagger, tokenize


def config_digest(config) -> str:
    blob = json.dumps(asdict(config) if hasattr(config, "__dataclass_fields__") else config, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class QAEvalReport:
    em: float
    f1: float
    ids: list
    config_digest: str = ""
    per_example: list = field(default_factory=list)    # (em, f1) per id

    def __post_init__(self):
        if self.f1 + 1e-9 < self.em:
            raise ValueError("F1 below EM")

    def to_dict(self) -> dict:
        return {"em": self.em, "f1": self.f1, "n": len(self.ids), "config_digest": self.config_digest}


def score_predictions(predictions: dict, examples: Sequence[QAExample], digest: str = "") -> QAEvalReport:
    """Corpus EM/F1 (x100) of id -> prediction text against the examples' gold answers."""
    per = []
    for ex in examples:
        if ex.id not in predictions:
            raise DataError(f"no prediction for {ex.id}")
        per.append(em_f1(predictions[ex.id], [ex.answer_text]))
    n = max(len(per), 1)
    return QAEvalReport(100.0 * sum(e for e, _ in per) / n, 100.0 * sum(f for _, f in per) / n,
                        [ex.id for ex in examples], digest, per)


def predict(qa: QAModel, examples: Sequence[QAExample], tagger: Optional[Tagger] = None) -> dict:
    """id -> answer text cut from the raw context at the predicted token span."""
    from .rewards import make_qa_batch
    tok = tokenize_all(examples, tagger)
    out = {}
    qa.eval()
    for s in range(0, len(tok), 128):
        spans = qa.predict_spans(make_qa_batch(tok[s:s + 128], qa.vocab))
        for ex, (a, b) in zip(examples[s:s + 128], spans):
            raw = tokenize(ex.context)
            out[ex.id] = ex.context[raw[a].start:raw[b].end]
    return out


def save_predictions(path, predictions: dict) -> None:
    Path(path).write_text("".join(json.dumps({"id": k, "prediction": v}, ensure_ascii=False) + "\n"
                                  for k, v in predictions.items()), encoding="utf-8")


def load_predictions(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            out[rec["id"]] = rec["prediction"]
    return out


def evaluate_qa(qa: QAModel, examples: Sequence[QAExample], tagger: Optional[Tagger] = None,
                predictions_path=None) -> QAEvalReport:
    for ex in examples:
        if ex.question is None:
            raise DataError(f"{ex.id}: evaluation example has no question")
    preds = predict(qa, examples, tagger)
    if predictions_path:
        save_predictions(predictions_path, preds)
    return score_predictions(preds, examples, config_digest(qa.config))


# --------------------------------------------------------------------------
# QG evaluation


def generate_questions(model: QGModel, examples: Sequence[QAExample], config: DecodeConfig,
                       tagger: Optional[Tagger] = None) -> list[list[str]]:
    """Top beam hypothesis per example, as tokens."""
    tok = tokenize_all(examples, tagger)
    model.eval()
    out = []
    for s in range(0, len(tok), 32):
        part = tok[s:s + 32]
        batch = make_batch(part, model.vocab, model.config.copy, questions=[None] * len(part))
        for beams, oovs in zip(beam_search(model, batch, config), batch.oovs):
            out.append(ids_to_tokens(beams[0].tokens, model.vocab, oovs))
    return out


def evaluate_qg(model: QGModel, examples: Sequence[QAExample], config: DecodeConfig = GENERATION,
                qpc: Optional[QPCModel] = None, qa: Optional[QAModel] = None,
                tagger: Optional[Tagger] = None) -> tuple[list[MetricReport], list[list[str]]]:
    """BLEU4 / ROUGE-L / Q-BLEU1, plus mean QPP and QAP when the reward models are given."""
    tok = tokenize_all(examples, tagger)
    hyps = generate_questions(model, examples, config, tagger)
    refs = [t.question_tokens for t in tok]
    reports = qg_metric_reports(hyps, refs)
    if qpc is not None:
        v = qpp_batch(qpc, hyps, refs)
        reports.append(MetricReport("QPP", sum(v) / max(len(v), 1), v, {}))
    if qa is not None:
        v = qap_batch(qa, tok, [h if h else ["?"] for h in hyps])
        reports.append(MetricReport("QAP", sum(v) / max(len(v), 1), v, {}))
    return reports, hyps


def qa_based_qg_eval(model: Optional[QGModel], unlabeled: Sequence[QAExample], real_dev: Sequence[QAExample],
                     qa_config: QAConfig = QAConfig(),
                     decode: DecodeConfig = DecodeConfig(beam_size=1, min_len=1, block_ngram=3),
                     tagger: Optional[Tagger] = None, holdout: float = 0.1) -> QAEvalReport:
    """Annotate ``unlabeled`` with ``model``, train a fresh QA model on those annotations only,
    and report its EM/F1 on ``real_dev``.

    With ``model=None`` the records' own questions are used (oracle / shuffled baselines).
    A ``holdout`` fraction of the synthetic set picks the best QA epoch.
    """
    dev_contexts = {ex.context for ex in real_dev}
    leaked = [ex.id for ex in unlabeled if ex.context in dev_contexts]
    if leaked:
        raise DataError(f"{len(leaked)} annotation contexts also appear in the dev set (e.g. {leaked[0]})")
    if model is None:
        synthetic = list(unlabeled)
        if any(ex.question is None for ex in synthetic):
            raise DataError("oracle annotation needs questions on every record")
    else:
        bare = [with_question(ex, None) for ex in unlabeled]
        synthetic = generate_from_new(model, bare, decode, tagger=tagger)
    n_hold = int(len(synthetic) * holdout)
    train_part, hold = synthetic[n_hold:], synthetic[:n_hold]
    qa = train_qa(tokenize_all(train_part, tagger), tokenize_all(hold, tagger), qa_config)
    return evaluate_qa(qa, real_dev, tagger)


def shuffle_questions(examples: Sequence[QAExample], seed: int) -> list[QAExample]:
    """Questions permuted across examples (a derangement baseline)."""
    import random
    rng = random.Random(seed)
    n = len(examples)
    if n < 2:
        return list(examples)
    perm = list(range(n))
    while any(i == p for i, p in enumerate(perm)):
        rng.shuffle(perm)
    return [with_question(ex, examples[p].question) for ex, p in zip(examples, perm)]
