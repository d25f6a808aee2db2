"""Finite-difference gradient checks of every differentiable block, at 64-bit."""
from __future__ import annotations

import time
from typing import Callable

import torch

from .nn import BiLSTM, GradCheckReport, RngState, grad_check, log_softmax, lstm_step, max_pool_over_time, softmax
from .qg import QGConfig, QGModel, make_batch
from .text import TokenizedExample, Vocabulary, bio_tag

F64 = torch.float64


def _rand(g, *shape):
    return torch.randn(*shape, dtype=F64, generator=g)


def _leaf(g, *shape):
    return _rand(g, *shape).requires_grad_(True)


def _shape(g, lo, hi):
    return int(torch.randint(lo, hi + 1, (1,), generator=g))


def block_affine(seed):
    g = torch.Generator().manual_seed(seed)
    n, i, o = _shape(g, 1, 4), _shape(g, 2, 6), _shape(g, 1, 5)
    x, w, b, c = _leaf(g, n, i), _leaf(g, o, i), _leaf(g, o), _rand(g, n, o)
    return lambda: ((x @ w.t() + b) * c).sum(), {"x": x, "w": w, "b": b}


def block_softmax(seed):
    g = torch.Generator().manual_seed(seed)
    n, k = _shape(g, 1, 4), _shape(g, 2, 7)
    x, c = _leaf(g, n, k), _rand(g, n, k)
    return lambda: (softmax(x) * c).sum() + (log_softmax(x) * c).sum(), {"x": x}


def block_lstm_step(seed):
    g = torch.Generator().manual_seed(seed)
    n, d, h = _shape(g, 1, 3), _shape(g, 2, 5), _shape(g, 2, 4)
    x, h0, c0 = _leaf(g, n, d), _leaf(g, n, h), _leaf(g, n, h)
    w_ih, w_hh, b = _leaf(g, 4 * h, d), _leaf(g, 4 * h, h), _leaf(g, 4 * h)
    cw = _rand(g, n, h)

    def loss():
        h1, c1 = lstm_step(x, h0, c0, w_ih, w_hh, b)
        return (h1 * cw).sum() + (c1 * cw).sum()
    return loss, {"x": x, "h": h0, "c": c0, "w_ih": w_ih, "w_hh": w_hh, "bias": b}


def block_bilstm(seed):
    g = torch.Generator().manual_seed(seed)
    B, T, d, h = _shape(g, 1, 3), _shape(g, 2, 5), _shape(g, 2, 4), _shape(g, 2, 3)
    net = BiLSTM(d, h, 2, RngState(seed), dtype=F64)
    x = _leaf(g, B, T, d)
    lengths = torch.tensor([T] + [_shape(g, 1, T) for _ in range(B - 1)])
    mask = torch.arange(T).unsqueeze(0) < lengths.unsqueeze(1)
    cw = _rand(g, 2 * h)

    def loss():
        H, (hf, _), (hb, _) = net(x, lengths)
        return (max_pool_over_time(H, mask) * cw).sum() + (H ** 2).sum() + (hf * hb).sum()
    return loss, {"x": x, **dict(net.named_parameters())}


_WORDS = ["alice", "smith", "was", "born", "in", "paris", "1850", ".", "who", "?", "moved", "to"]


def _toy_qg(seed, copy=True):
    g = torch.Generator().manual_seed(seed)
    vocab = Vocabulary(_WORDS[:8] + ["who", "?"])
    cfg = QGConfig(d_word=4, d_answer=2, d_pos=2, d_ner=2, hidden=4, layers=_shape(g, 1, 2), dropout=0.0,
                   copy=copy, dtype="float64")
    model = QGModel(cfg, vocab, seed=seed)
    exs = []
    for b in range(_shape(g, 1, 2)):
        m = _shape(g, 3, 6)
        ctx = [_WORDS[int(i)] for i in torch.randint(0, len(_WORDS), (m,), generator=g)]
        s = _shape(g, 0, m - 1)
        q = [_WORDS[int(i)] for i in torch.randint(0, len(_WORDS), (_shape(g, 1, 3),), generator=g)]
        q = [w if (w in vocab or w in ctx) else "who" for w in q]
        exs.append(TokenizedExample(f"g{b}", ctx, (s, s), bio_tag(m, (s, s)), ["NOUN"] * m, ["O"] * m, q))
    return model, make_batch(exs, vocab, copy), g


def _trainable(model):
    return {k: p for k, p in model.named_parameters() if p.requires_grad}


def block_self_attention(seed):
    model, batch, g = _toy_qg(seed)
    H = _leaf(g, len(batch), batch.src_ids.shape[1], 2 * model.config.hidden)
    cw = _rand(g, *H.shape)
    params = {"H": H, "W_u": model.W_u, **{f"W_f.{k}": v for k, v in model.W_f.named_parameters()},
              **{f"W_g.{k}": v for k, v in model.W_g.named_parameters()}}
    return lambda: (model.self_attend(H, batch.mask) * cw).sum(), params


def block_decoder_step(seed):
    """One attentive decoder step with maxout and the copy mixture."""
    model, batch, g = _toy_qg(seed)

    def loss():
        mem, state = model.start(batch)
        p, state = model.decode_step(state, batch.dec_in[:, 0], mem)
        p2, _ = model.decode_step(state, batch.dec_in[:, 0], mem)
        return -torch.log(p.gather(1, batch.dec_out[:, :1])).sum() - torch.log(p2[:, 3:7]).sum()
    return loss, _trainable(model)


def block_qg_loss(seed):
    model, batch, _ = _toy_qg(seed, copy=bool(seed % 2 == 0))
    return lambda: model.ml_loss(batch), _trainable(model)


def block_qpc(seed):
    from .rewards import QPCConfig, QPCModel, _bce, _encode_tokens
    vocab = Vocabulary(_WORDS)
    g = torch.Generator().manual_seed(seed)
    model = QPCModel(QPCConfig(d_word=3, hidden=3, layers=2, mlp_hidden=4), vocab, seed=seed).double()
    qa = [[_WORDS[int(i)] for i in torch.randint(0, 12, (_shape(g, 1, 4),), generator=g)] for _ in range(2)]
    qb = [[_WORDS[int(i)] for i in torch.randint(0, 12, (_shape(g, 1, 4),), generator=g)] for _ in range(2)]
    a, la = _encode_tokens(vocab, qa)
    b, lb = _encode_tokens(vocab, qb)
    y = torch.tensor([1.0, 0.0], dtype=F64)
    return lambda: _bce(model.logits(a, la, b, lb), y), _trainable(model)


def block_qa(seed):
    from .rewards import QAConfig, QAModel, make_qa_batch
    model, batch, g = _toy_qg(seed)
    del batch
    vocab = Vocabulary(_WORDS)
    qa = QAModel(QAConfig(d_word=3, hidden=3, dropout=0.0), vocab, seed=seed).double()
    exs = []
    for b in range(2):
        m = _shape(g, 2, 5)
        ctx = [_WORDS[int(i)] for i in torch.randint(0, 12, (m,), generator=g)]
        s = _shape(g, 0, m - 1)
        e = _shape(g, s, m - 1)
        exs.append(TokenizedExample(f"a{b}", ctx, (s, e), bio_tag(m, (s, e)), ["NOUN"] * m, ["O"] * m,
                                    [_WORDS[int(i)] for i in torch.randint(0, 12, (3,), generator=g)]))
    qb = make_qa_batch(exs, vocab)
    return lambda: qa.loss(qb), _trainable(qa)


BLOCKS: dict[str, Callable] = {
    "affine": block_affine,
    "softmax": block_softmax,
    "lstm_step": block_lstm_step,
    "bilstm_maxpool": block_bilstm,
    "gated_self_attention": block_self_attention,
    "decoder_step_copy": block_decoder_step,
    "qg_teacher_forced_loss": block_qg_loss,
    "qpc_loss": block_qpc,
    "qa_span_loss": block_qa,
}


def run_grad_checks(seeds=range(10), tolerance: float = 1e-4, max_entries: int = 6,
                    blocks=None) -> dict:
    """Max relative error per block over ``seeds`` (each seed also draws its shapes)."""
    out = {}
    start = time.perf_counter()
    for name in blocks or BLOCKS:
        worst, ok = 0.0, True
        for seed in seeds:
            loss_fn, params = BLOCKS[name](seed)
            rep: GradCheckReport = grad_check(loss_fn, params, tolerance, max_entries=max_entries, seed=seed)
            worst = max(worst, rep.max_error)
            ok = ok and rep.passed
        out[name] = {"max_relative_error": worst, "passed": ok, "seeds": len(list(seeds))}
    out["_seconds"] = time.perf_counter() - start
    return out
