"""Reward environments: paraphrase classifier (QPP), span QA model (QAP), metric rewards."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import torch
from torch import Tensor, nn

from . import checkpoint as ckpt
from .metrics import em_f1, rouge_l, sentence_bleu
from .mixing import mixing_minibatch_iterator
from .nn import Adam, Affine, BiLSTM, Embedding, RngState, iter_batches, log_softmax, max_pool_over_time, softmax
from .text import PAD_ID, TokenizedExample, Vocabulary

logger = logging.getLogger(__name__)

REWARD_KINDS = ("QPP", "QAP", "BLEU4", "ROUGE-L")
REWARD_RANGE = {"QPP": (0.0, 1.0), "QAP": (0.0, 1.0), "BLEU4": (0.0, 100.0), "ROUGE-L": (0.0, 100.0)}


@dataclass
class RewardSignal:
    value: float
    kind: str
    question: tuple = ()
    example_id: str = ""

    def __post_init__(self):
        if self.kind not in REWARD_RANGE:
            raise ValueError(f"unknown reward kind {self.kind!r}")
        lo, hi = REWARD_RANGE[self.kind]
        if not lo <= self.value <= hi:
            raise ValueError(f"{self.kind} reward {self.value} outside [{lo}, {hi}]")


def pad_ids(seqs: Sequence[Sequence[int]]) -> tuple[Tensor, Tensor]:
    T = max(max((len(s) for s in seqs), default=1), 1)
    out = torch.zeros(len(seqs), T, dtype=torch.long)
    for i, s in enumerate(seqs):
        if s:
            out[i, :len(s)] = torch.tensor(list(s))
    lengths = torch.tensor([max(len(s), 1) for s in seqs])
    return out, lengths


def _mask(lengths: Tensor, T: int) -> Tensor:
    return torch.arange(T).unsqueeze(0) < lengths.unsqueeze(1)


def _encode_tokens(vocab: Vocabulary, seqs: Sequence[Sequence[str]]):
    return pad_ids([vocab.encode(s) for s in seqs])


# ======================================================================= QPC


@dataclass(frozen=True)
class QPCConfig:
    d_word: int = 32
    hidden: int = 64
    layers: int = 2
    mlp_hidden: int = 64
    dropout: float = 0.0
    lr: float = 0.0004
    batch_size: int = 64
    epochs: int = 50
    patience: int = 10
    seed: int = 0


class QPCModel(nn.Module):
    """Siamese BiLSTM + max-pool encoder, MLP over [q1, q2, |q1-q2|, q1*q2]."""

    def __init__(self, config: QPCConfig, vocab: Vocabulary, seed: Optional[int] = None):
        super().__init__()
        self.config = config
        self.vocab = vocab
        rng = RngState(config.seed if seed is None else seed)
        self.word_emb = Embedding(len(vocab), config.d_word, rng)
        self.encoder = BiLSTM(config.d_word, config.hidden, config.layers, rng, config.dropout)
        self.mlp_in = Affine(8 * config.hidden, config.mlp_hidden, rng)
        self.mlp_out = Affine(config.mlp_hidden, 1, rng)
        self._rng: Optional[RngState] = None

    def sentence(self, ids: Tensor, lengths: Tensor) -> Tensor:
        H, _, _ = self.encoder(self.word_emb(ids), lengths, self._rng)
        return max_pool_over_time(H, _mask(lengths, ids.shape[1]))

    def features(self, q1: Tensor, q2: Tensor) -> Tensor:
        return torch.cat([q1, q2, (q1 - q2).abs(), q1 * q2], dim=-1)

    def logits(self, a_ids, a_len, b_ids, b_len) -> Tensor:
        f = self.features(self.sentence(a_ids, a_len), self.sentence(b_ids, b_len))
        return self.mlp_out(torch.tanh(self.mlp_in(f))).squeeze(-1)

    def prob(self, questions_a: Sequence[Sequence[str]], questions_b: Sequence[Sequence[str]]) -> Tensor:
        a, la = _encode_tokens(self.vocab, questions_a)
        b, lb = _encode_tokens(self.vocab, questions_b)
        return torch.sigmoid(self.logits(a, la, b, lb))

    def header(self) -> dict:
        return {"kind": "qpc", "config": asdict(self.config), "vocab": self.vocab.to_list()}

    def save(self, path) -> str:
        return ckpt.save_checkpoint(path, ckpt.MAGIC_QPC, self.header(), self.state_dict())

    @classmethod
    def load(cls, path) -> "QPCModel":
        header, tensors = ckpt.load_checkpoint(path, ckpt.MAGIC_QPC)
        model = cls(QPCConfig(**header["config"]), Vocabulary.from_list(header["vocab"]))
        model.load_state_dict(tensors)
        model.eval()
        return model


def qpp(question_a: Sequence[str], question_b: Sequence[str], model: QPCModel) -> float:
    """Paraphrase probability of two token sequences (inference mode)."""
    if not question_a or not question_b:
        raise ValueError("qpp needs two non-empty questions")
    was = model.training
    model.eval()
    with torch.no_grad():
        p = float(model.prob([question_a], [question_b])[0])
    model.train(was)
    return p


def qpp_batch(model: QPCModel, generated: Sequence[Sequence[str]], gold: Sequence[Sequence[str]]) -> list[float]:
    was = model.training
    model.eval()
    with torch.no_grad():
        out = model.prob([g or ["<unk>"] for g in generated], gold).tolist()
    model.train(was)
    return out


def _bce(logits: Tensor, labels: Tensor) -> Tensor:
    # log(1 + exp(-z)) for positives, log(1 + exp(z)) for negatives
    return (torch.nn.functional.softplus(-logits) * labels + torch.nn.functional.softplus(logits) * (1 - labels)).mean()


def qpc_accuracy(model: QPCModel, pairs) -> float:
    if not pairs:
        return 0.0
    model.eval()
    with torch.no_grad():
        p = model.prob([a for a, _, _ in pairs], [b for _, b, _ in pairs])
    return float(((p >= 0.5).long() == torch.tensor([y for _, _, y in pairs])).float().mean())


def train_qpc(pairs: Sequence[tuple], dev_pairs: Sequence[tuple], config: QPCConfig = QPCConfig(),
              vocab: Optional[Vocabulary] = None, log: Optional[Callable] = None) -> QPCModel:
    """Binary cross-entropy training; returns the best-on-dev parameters.

    ``pairs`` hold (tokens_a, tokens_b, label) with label 1 for paraphrases.
    """
    labels = {y for _, _, y in pairs}
    if labels != {0, 1}:
        raise ValueError("paraphrase training data must contain both classes")
    vocab = vocab or Vocabulary.build([a for a, _, _ in pairs] + [b for _, b, _ in pairs])
    model = QPCModel(config, vocab)
    rng = RngState(config.seed + 1)
    model._rng = rng.fork(1)
    opt = Adam(model, lr=config.lr)
    best, best_state, bad = -1.0, None, 0
    for epoch in range(config.epochs):
        model.train()
        total = 0.0
        for idx in iter_batches(len(pairs), config.batch_size, rng):
            a, la = _encode_tokens(vocab, [pairs[i][0] for i in idx])
            b, lb = _encode_tokens(vocab, [pairs[i][1] for i in idx])
            y = torch.tensor([float(pairs[i][2]) for i in idx])
            loss = _bce(model.logits(a, la, b, lb), y)
            opt.step(loss)
            total += loss.item() * len(idx)
        acc = qpc_accuracy(model, dev_pairs)
        if log:
            log({"epoch": epoch, "loss": total / len(pairs), "dev_accuracy": acc})
        if acc > best:
            best, best_state, bad = acc, {k: v.clone() for k, v in model.state_dict().items()}, 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return model


# ======================================================================== QA


@dataclass(frozen=True)
class QAConfig:
    d_word: int = 32
    hidden: int = 64
    question_layers: int = 1
    context_layers: int = 1
    dropout: float = 0.2
    exact_match: bool = True
    lr: float = 0.002
    batch_size: int = 32
    epochs: int = 60
    patience: int = 10
    max_span: int = 10
    seed: int = 0


@dataclass
class QABatch:
    ids: list
    ctx: Tensor
    ctx_len: Tensor
    q: Tensor
    q_len: Tensor
    exact: Tensor
    starts: Optional[Tensor] = None
    ends: Optional[Tensor] = None


def make_qa_batch(examples: Sequence[TokenizedExample], vocab: Vocabulary,
                  questions: Optional[Sequence[Sequence[str]]] = None) -> QABatch:
    qs = questions if questions is not None else [e.question_tokens for e in examples]
    if any(q is None for q in qs):
        raise ValueError("QA examples need questions")
    ctx, ctx_len = _encode_tokens(vocab, [e.context_tokens for e in examples])
    q, q_len = _encode_tokens(vocab, [q if q else ["<unk>"] for q in qs])
    exact = torch.zeros(ctx.shape, dtype=torch.float32)
    for b, (e, qt) in enumerate(zip(examples, qs)):
        qset = set(qt)
        for i, tok in enumerate(e.context_tokens):
            if tok in qset:
                exact[b, i] = 1.0
    starts = torch.tensor([e.answer_span[0] for e in examples])
    ends = torch.tensor([e.answer_span[1] for e in examples])
    return QABatch([e.id for e in examples], ctx, ctx_len, q, q_len, exact, starts, ends)


class QAModel(nn.Module):
    """Question vector (BiLSTM + max-pool) conditions a context BiLSTM with start/end heads."""

    def __init__(self, config: QAConfig, vocab: Vocabulary, seed: Optional[int] = None):
        super().__init__()
        self.config = config
        self.vocab = vocab
        rng = RngState(config.seed if seed is None else seed)
        h = config.hidden
        self.word_emb = Embedding(len(vocab), config.d_word, rng)
        self.q_encoder = BiLSTM(config.d_word, h, config.question_layers, rng, config.dropout)
        n_in = config.d_word + 2 * h + (1 if config.exact_match else 0)
        self.c_encoder = BiLSTM(n_in, h, config.context_layers, rng, config.dropout)
        self.start_head = Affine(2 * h, 1, rng)
        self.end_head = Affine(2 * h, 1, rng)
        self._rng: Optional[RngState] = None

    def span_logits(self, batch: QABatch) -> tuple[Tensor, Tensor, Tensor]:
        qH, _, _ = self.q_encoder(self.word_emb(batch.q), batch.q_len, self._rng)
        qv = max_pool_over_time(qH, _mask(batch.q_len, batch.q.shape[1]))
        M = batch.ctx.shape[1]
        parts = [self.word_emb(batch.ctx), qv.unsqueeze(1).expand(-1, M, -1)]
        if self.config.exact_match:
            parts.append(batch.exact.unsqueeze(-1).to(qv.dtype))
        cH, _, _ = self.c_encoder(torch.cat(parts, dim=-1), batch.ctx_len, self._rng)
        mask = _mask(batch.ctx_len, M)
        s = self.start_head(cH).squeeze(-1).masked_fill(~mask, float("-inf"))
        e = self.end_head(cH).squeeze(-1).masked_fill(~mask, float("-inf"))
        return s, e, mask

    def span_probs(self, batch: QABatch) -> tuple[Tensor, Tensor]:
        s, e, mask = self.span_logits(batch)
        return softmax(s, -1, mask), softmax(e, -1, mask)

    def loss(self, batch: QABatch) -> Tensor:
        s, e, _ = self.span_logits(batch)
        ls = log_softmax(s).gather(1, batch.starts.unsqueeze(1))
        le = log_softmax(e).gather(1, batch.ends.unsqueeze(1))
        return -(ls + le).mean()

    def predict_spans(self, batch: QABatch) -> list[tuple[int, int]]:
        """Argmax start, then argmax end in [start, start + max_span)."""
        with torch.no_grad():
            ps, pe = self.span_probs(batch)
        out = []
        for b in range(ps.shape[0]):
            n = int(batch.ctx_len[b])
            st = int(ps[b, :n].argmax())
            hi = min(n, st + self.config.max_span)
            en = st + int(pe[b, st:hi].argmax())
            out.append((st, en))
        return out

    def header(self) -> dict:
        return {"kind": "qa", "config": asdict(self.config), "vocab": self.vocab.to_list()}

    def to_bytes(self) -> bytes:
        return ckpt.encode_checkpoint(ckpt.MAGIC_QA, self.header(), self.state_dict())

    def save(self, path) -> str:
        return ckpt.save_checkpoint(path, ckpt.MAGIC_QA, self.header(), self.state_dict())

    @classmethod
    def load(cls, path) -> "QAModel":
        header, tensors = ckpt.load_checkpoint(path, ckpt.MAGIC_QA)
        model = cls(QAConfig(**header["config"]), Vocabulary.from_list(header["vocab"]))
        model.load_state_dict(tensors)
        model.eval()
        return model


def qap_batch(model: QAModel, examples: Sequence[TokenizedExample],
              questions: Optional[Sequence[Sequence[str]]] = None, chunk: int = 128) -> list[float]:
    """p_start(gold start) * p_end(gold end) for each example under ``model``."""
    was = model.training
    model.eval()
    out: list[float] = []
    with torch.no_grad():
        for s in range(0, len(examples), chunk):
            part = examples[s:s + chunk]
            qs = None if questions is None else questions[s:s + chunk]
            batch = make_qa_batch(part, model.vocab, qs)
            ps, pe = model.span_probs(batch)
            v = ps.gather(1, batch.starts.unsqueeze(1)) * pe.gather(1, batch.ends.unsqueeze(1))
            out.extend(float(x) for x in v.squeeze(1).double())
    model.train(was)
    return out


def qap(context: TokenizedExample, question: Sequence[str], gold_span: tuple, model: QAModel) -> float:
    if not (0 <= gold_span[0] <= gold_span[1] < len(context.context_tokens)):
        raise ValueError(f"gold span {gold_span} invalid")
    ex = TokenizedExample(context.id, context.context_tokens, tuple(gold_span),
                          context.bio_tags if tuple(gold_span) == tuple(context.answer_span) else
                          _bio_for(len(context.context_tokens), gold_span),
                          context.pos_tags, context.ner_tags, list(question))
    return qap_batch(model, [ex])[0]


def _bio_for(n, span):
    from .text import bio_tag
    return bio_tag(n, tuple(span))


def predict_answers(model: QAModel, examples: Sequence[TokenizedExample], chunk: int = 128) -> list[str]:
    was = model.training
    model.eval()
    out = []
    for s in range(0, len(examples), chunk):
        part = examples[s:s + chunk]
        for e, (st, en) in zip(part, model.predict_spans(make_qa_batch(part, model.vocab))):
            out.append(" ".join(e.context_tokens[st:en + 1]))
    model.train(was)
    return out


def exact_match_rate(model: QAModel, examples: Sequence[TokenizedExample]) -> float:
    if not examples:
        return 0.0
    preds = predict_answers(model, examples)
    return sum(em_f1(p, [" ".join(e.answer_tokens)])[0] for p, e in zip(preds, examples)) / len(examples)


def qa_vocab(examples: Sequence[TokenizedExample]) -> Vocabulary:
    return Vocabulary.build([e.context_tokens for e in examples] + [e.question_tokens or [] for e in examples])


def train_qa(train: Sequence[TokenizedExample], dev: Sequence[TokenizedExample], config: QAConfig = QAConfig(),
             synthetic: Sequence[TokenizedExample] = (), vocab: Optional[Vocabulary] = None,
             log: Optional[Callable] = None, batch_audit: Optional[list] = None) -> QAModel:
    """Sum of start/end cross-entropies with Adam; returns the best-on-dev-EM parameters.

    With a non-empty ``synthetic`` pool every mini-batch is half ground truth,
    half synthetic (see ``mixing_minibatch_iterator``).
    """
    for e in list(train) + list(synthetic):
        if e.question_tokens is None:
            raise ValueError(f"QA training example {e.id} has no question")
    if not train:
        raise ValueError("empty QA training set")
    vocab = vocab or qa_vocab(list(train) + list(synthetic))
    model = QAModel(config, vocab)
    rng = RngState(config.seed + 1)
    model._rng = rng.fork(1)
    opt = Adam(model, lr=config.lr)
    best, best_state, bad = -1.0, None, 0
    for epoch in range(config.epochs):
        model.train()
        for mb in mixing_minibatch_iterator(len(train), len(synthetic), config.batch_size, rng):
            if batch_audit is not None:
                batch_audit.append(replace(mb, epoch=epoch))
            exs = [train[i] for i in mb.ground_truth] + [synthetic[i] for i in mb.synthetic]
            opt.step(model.loss(make_qa_batch(exs, vocab)))
        dev_em = exact_match_rate(model, dev or train)
        if log:
            log({"epoch": epoch, "dev_em": dev_em})
        if dev_em > best:
            best, best_state, bad = dev_em, {k: v.clone() for k, v in model.state_dict().items()}, 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return model


# ================================================================ metric rewards


def metric_reward(kind: str, hypothesis: Sequence[str], reference: Sequence[str]) -> float:
    """Smoothed sentence BLEU4 or ROUGE-L on the 0..100 scale."""
    if kind == "BLEU4":
        return 0.0 if not hypothesis else sentence_bleu(list(hypothesis), list(reference))
    if kind == "ROUGE-L":
        return rouge_l(list(hypothesis), list(reference))
    raise ValueError(f"unknown metric reward {kind!r}")
