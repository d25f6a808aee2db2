"""Answer-aware question generation network.

Embeddings [word; answer-BIO; POS; NER] feed a 2-layer BiLSTM encoder, a gated
self-attention layer and a 2-layer attentive LSTM decoder whose maxout output
is projected by the frozen word-embedding table. A copy gate mixes the
vocabulary distribution with attention mass scattered onto source tokens.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import torch
from torch import Tensor, nn

from . import checkpoint as ckpt
from .nn import Affine, BiLSTM, Embedding, LSTMCell, RngState, dropout, init_uniform, softmax
from .text import BIO, BOS_ID, EOS_ID, NER, PAD_ID, POS, UNK_ID, TokenizedExample, Vocabulary

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class QGConfig:
    d_word: int = 32
    d_answer: int = 8
    d_pos: int = 8
    d_ner: int = 8
    hidden: int = 64
    layers: int = 2
    dropout: float = 0.3
    copy: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.hidden % 2:
            raise ValueError("hidden size must be even")
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def d_embed(self) -> int:
        return self.d_word + self.d_answer + self.d_pos + self.d_ner

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]


# --------------------------------------------------------------------------
# batching


@dataclass
class QGBatch:
    ids: list
    src_ids: Tensor        # [B, M], OOV -> UNK
    src_ext: Tensor        # [B, M], OOV -> V + k
    bio: Tensor
    pos: Tensor
    ner: Tensor
    lengths: Tensor
    oovs: list             # per row, source tokens outside the vocabulary
    dec_in: Optional[Tensor] = None    # [B, N] BOS + question (input ids)
    dec_out: Optional[Tensor] = None   # [B, N] question + EOS (extended ids)

    @property
    def mask(self) -> Tensor:
        return torch.arange(self.src_ids.shape[1]).unsqueeze(0) < self.lengths.unsqueeze(1)

    @property
    def tgt_mask(self) -> Tensor:
        return self.dec_out != PAD_ID

    @property
    def n_oov(self) -> int:
        return max((len(o) for o in self.oovs), default=0)

    def __len__(self):
        return len(self.ids)


def make_batch(examples: Sequence[TokenizedExample], vocab: Vocabulary, copy: bool = True,
               questions: Optional[Sequence[Sequence[str]]] = None) -> QGBatch:
    """Pad a list of examples. ``questions`` overrides the examples' own question tokens."""
    B = len(examples)
    M = max(len(e.context_tokens) for e in examples)
    V = len(vocab)
    src = torch.zeros(B, M, dtype=torch.long)
    ext = torch.zeros(B, M, dtype=torch.long)
    bio = torch.zeros(B, M, dtype=torch.long)
    pos = torch.zeros(B, M, dtype=torch.long)
    ner = torch.zeros(B, M, dtype=torch.long)
    oovs = []
    for b, e in enumerate(examples):
        row_oov: list = []
        for i, tok in enumerate(e.context_tokens):
            if tok in vocab:
                src[b, i] = ext[b, i] = vocab.id(tok)
            else:
                if tok not in row_oov:
                    row_oov.append(tok)
                src[b, i] = UNK_ID
                ext[b, i] = V + row_oov.index(tok)
        bio[b, :len(e.bio_tags)] = torch.tensor(BIO.encode(e.bio_tags))
        pos[b, :len(e.pos_tags)] = torch.tensor(POS.encode(e.pos_tags))
        ner[b, :len(e.ner_tags)] = torch.tensor(NER.encode(e.ner_tags))
        oovs.append(row_oov)
    lengths = torch.tensor([len(e.context_tokens) for e in examples])
    batch = QGBatch([e.id for e in examples], src, ext, bio, pos, ner, lengths, oovs)
    qs = questions if questions is not None else [e.question_tokens for e in examples]
    if all(q is not None for q in qs):
        N = max(len(q) for q in qs) + 1
        dec_in = torch.zeros(B, N, dtype=torch.long)
        dec_out = torch.zeros(B, N, dtype=torch.long)
        for b, q in enumerate(qs):
            in_ids = [BOS_ID] + vocab.encode(q)
            out_ids = []
            for tok in q:
                if tok in vocab:
                    out_ids.append(vocab.id(tok))
                elif copy and tok in oovs[b]:
                    out_ids.append(V + oovs[b].index(tok))
                else:
                    out_ids.append(UNK_ID)
            out_ids.append(EOS_ID)
            dec_in[b, :len(in_ids)] = torch.tensor(in_ids)
            dec_out[b, :len(out_ids)] = torch.tensor(out_ids)
        batch.dec_in, batch.dec_out = dec_in, dec_out
    return batch


def ids_to_tokens(ids: Sequence[int], vocab: Vocabulary, oovs: Sequence[str]) -> list[str]:
    """Extended ids -> tokens, stopping at EOS."""
    out = []
    V = len(vocab)
    for i in ids:
        if i == EOS_ID:
            break
        out.append(vocab.itos[i] if i < V else oovs[i - V])
    return out


# --------------------------------------------------------------------------
# model


@dataclass
class Memory:
    """Encoder output the decoder attends over."""

    H_hat: Tensor          # [B, M, 2d]
    mask: Tensor           # [B, M]
    src_ext: Tensor        # [B, M]
    n_ext: int             # V + max OOV count

    def select(self, idx: Tensor) -> "Memory":
        return Memory(self.H_hat.index_select(0, idx), self.mask.index_select(0, idx),
                      self.src_ext.index_select(0, idx), self.n_ext)


@dataclass
class DecoderState:
    h: list                # per layer [B, d]
    c: list
    s_tilde: Tensor        # [B, d]
    step: int = 0
    attention: Optional[Tensor] = None

    def select(self, idx: Tensor) -> "DecoderState":
        att = None if self.attention is None else self.attention.index_select(0, idx)
        return DecoderState([x.index_select(0, idx) for x in self.h], [x.index_select(0, idx) for x in self.c],
                            self.s_tilde.index_select(0, idx), self.step, att)


class QGModel(nn.Module):
    def __init__(self, config: QGConfig, vocab: Vocabulary, seed: int = 0):
        super().__init__()
        self.config = config
        self.vocab = vocab
        rng = RngState(seed)
        dt = config.torch_dtype
        d, dw = config.hidden, config.d_word
        self.word_emb = Embedding(len(vocab), dw, rng, trainable=False, dtype=dt)
        self.bio_emb = Embedding(len(BIO), config.d_answer, rng, dtype=dt)
        self.pos_emb = Embedding(len(POS), config.d_pos, rng, dtype=dt)
        self.ner_emb = Embedding(len(NER), config.d_ner, rng, dtype=dt)
        self.encoder = BiLSTM(config.d_embed, d, config.layers, rng, config.dropout, dtype=dt)
        self.W_u = nn.Parameter(init_uniform((2 * d, 2 * d), 2 * d, rng, dt))
        self.W_f = Affine(4 * d, 2 * d, rng, dtype=dt)
        self.W_g = Affine(4 * d, 2 * d, rng, dtype=dt)
        self.init_state = Affine(2 * d, config.layers * d, rng, dtype=dt)
        self.decoder = nn.ModuleList(
            [LSTMCell(dw + d if i == 0 else d, d, rng, dt) for i in range(config.layers)])
        self.W_a = nn.Parameter(init_uniform((2 * d, d), d, rng, dt))
        self.W_c = Affine(3 * d, d, rng, dtype=dt)
        self.W_o = Affine(3 * d, 2 * dw, rng, dtype=dt)
        self.copy_gate = Affine(3 * d + dw, 1, rng, dtype=dt) if config.copy else None
        self._rng: Optional[RngState] = None
        self._never = torch.tensor([PAD_ID, BOS_ID])  # never generated

    # the output projection shares storage with the (frozen) word table
    @property
    def W_e(self) -> Tensor:
        return self.word_emb.weight

    def set_dropout_rng(self, rng: Optional[RngState]) -> None:
        self._rng = rng

    # -- encoder side -------------------------------------------------------

    def embed(self, batch: QGBatch) -> Tensor:
        for name, ids, table in (("word", batch.src_ids, self.word_emb), ("bio", batch.bio, self.bio_emb),
                                 ("pos", batch.pos, self.pos_emb), ("ner", batch.ner, self.ner_emb)):
            if ids.numel() and int(ids.max()) >= table.weight.shape[0]:
                raise ValueError(f"unknown {name} id {int(ids.max())}")
        return torch.cat([self.word_emb(batch.src_ids), self.bio_emb(batch.bio),
                          self.pos_emb(batch.pos), self.ner_emb(batch.ner)], dim=-1)

    def encode(self, e: Tensor, lengths: Tensor):
        H, (hf, _), (hb, _) = self.encoder(e, lengths, self._rng)
        return H, torch.cat([hf, hb], dim=-1)

    def self_attend(self, H: Tensor, mask: Tensor, return_weights: bool = False):
        G = H @ self.W_u.t()                       # row i: W^u h_i
        scores = G @ H.transpose(1, 2)             # [B, i, k] = h_k^T W^u h_i
        alpha = softmax(scores, axis=-1, mask=mask.unsqueeze(1))
        u = alpha @ H
        hu = torch.cat([H, u], dim=-1)
        f = torch.tanh(self.W_f(hu))
        g = torch.sigmoid(self.W_g(hu))
        H_hat = (g * f + (1 - g) * H) * mask.unsqueeze(-1).to(H.dtype)
        return (H_hat, alpha) if return_weights else H_hat

    def start(self, batch: QGBatch) -> tuple[Memory, DecoderState]:
        H, final = self.encode(self.embed(batch), batch.lengths)
        H_hat = self.self_attend(H, batch.mask)
        B, d = H.shape[0], self.config.hidden
        init = torch.tanh(self.init_state(final)).view(B, self.config.layers, d)
        h = [init[:, i] for i in range(self.config.layers)]
        c = [torch.zeros_like(x) for x in h]
        mem = Memory(H_hat, batch.mask, batch.src_ext, len(self.vocab) + batch.n_oov)
        return mem, DecoderState(h, c, torch.zeros(B, d, dtype=H.dtype))

    # -- decoder side -------------------------------------------------------

    def decode_step(self, state: DecoderState, prev_tokens: Tensor, memory: Memory) -> tuple[Tensor, DecoderState]:
        """Distribution over the extended vocabulary [B, V + n_oov] and the next state."""
        V = len(self.vocab)
        prev = torch.where(prev_tokens >= V, torch.full_like(prev_tokens, UNK_ID), prev_tokens)
        y = self.word_emb(prev)
        x = torch.cat([y, state.s_tilde], dim=-1)
        hs, cs = [], []
        for cell, h, c in zip(self.decoder, state.h, state.c):
            x = dropout(x, self.config.dropout, self._rng, self.training)
            h, c = cell(x, h, c)
            hs.append(h)
            cs.append(c)
            x = h
        s = hs[-1]
        scores = (memory.H_hat @ (self.W_a @ s.unsqueeze(-1))).squeeze(-1)
        alpha = softmax(scores, axis=-1, mask=memory.mask)
        ctx = (alpha.unsqueeze(1) @ memory.H_hat).squeeze(1)
        cs_cat = torch.cat([ctx, s], dim=-1)
        s_tilde = torch.tanh(self.W_c(cs_cat))
        o_tilde = torch.tanh(self.W_o(cs_cat))
        o = o_tilde.view(o_tilde.shape[0], -1, 2).amax(dim=-1)
        logits = (o @ self.W_e.t()).index_fill(1, self._never, float("-inf"))
        p_vocab = softmax(logits, axis=-1)
        extra = memory.n_ext - V
        if self.copy_gate is not None:
            gate = torch.sigmoid(self.copy_gate(torch.cat([ctx, s, y], dim=-1)))
            p = torch.cat([gate * p_vocab, p_vocab.new_zeros(p_vocab.shape[0], extra)], dim=-1)
            p = p.scatter_add(1, memory.src_ext, (1 - gate) * alpha)
        else:
            p = torch.cat([p_vocab, p_vocab.new_zeros(p_vocab.shape[0], extra)], dim=-1)
        return p, DecoderState(hs, cs, s_tilde, state.step + 1, alpha)

    # search protocol (see decode.py)
    def step_logprobs(self, memory: Memory, state: DecoderState, prev: Tensor):
        p, new = self.decode_step(state, prev, memory)
        return torch.log(p), new

    def forward_teacher_forced(self, batch: QGBatch) -> Tensor:
        """Log-probabilities [B, N] of the gold tokens; zero at padding."""
        mem, state = self.start(batch)
        out = []
        for j in range(batch.dec_in.shape[1]):
            p, state = self.decode_step(state, batch.dec_in[:, j], mem)
            out.append(p.gather(1, batch.dec_out[:, j:j + 1]).squeeze(1))
        p = torch.stack(out, dim=1)
        mask = batch.tgt_mask
        # padding gathers p(PAD) = 0; substitute 1 so no log(0) reaches the gradient
        return torch.log(torch.where(mask, p, torch.ones_like(p))).masked_fill(~mask, 0.0)

    def ml_loss(self, batch: QGBatch) -> Tensor:
        logp = self.forward_teacher_forced(batch)
        return -logp.sum() / batch.tgt_mask.sum()

    def token_accuracy(self, batch: QGBatch) -> tuple[int, int]:
        with torch.no_grad():
            mem, state = self.start(batch)
            hit = 0
            for j in range(batch.dec_in.shape[1]):
                p, state = self.decode_step(state, batch.dec_in[:, j], mem)
                m = batch.tgt_mask[:, j]
                hit += int(((p.argmax(1) == batch.dec_out[:, j]) & m).sum())
        return hit, int(batch.tgt_mask.sum())

    # -- persistence ---------------------------------------------------------

    def header(self) -> dict:
        return {"kind": "qg", "config": asdict(self.config), "vocab": self.vocab.to_list(),
                "tied": {"W_e": "word_emb.weight"}}

    def to_bytes(self) -> bytes:
        return ckpt.encode_checkpoint(ckpt.MAGIC_QG, self.header(), self.state_dict())

    def save(self, path) -> str:
        return ckpt.save_checkpoint(path, ckpt.MAGIC_QG, self.header(), self.state_dict())

    @classmethod
    def from_bytes(cls, blob: bytes, dtype: Optional[str] = None) -> "QGModel":
        header, tensors = ckpt.decode_checkpoint(blob, ckpt.MAGIC_QG)
        return cls._from_parts(header, tensors, dtype)

    @classmethod
    def load(cls, path, dtype: Optional[str] = None) -> "QGModel":
        header, tensors = ckpt.load_checkpoint(path, ckpt.MAGIC_QG)
        return cls._from_parts(header, tensors, dtype)

    @classmethod
    def _from_parts(cls, header, tensors, dtype):
        cfg = dict(header["config"])
        if dtype:
            cfg["dtype"] = dtype
        config = QGConfig(**cfg)
        model = cls(config, Vocabulary.from_list(header["vocab"]))
        model.load_state_dict({k: v.to(config.torch_dtype) for k, v in tensors.items()})
        return model


def load_embeddings(path, vocab: Vocabulary, dim: int) -> dict:
    """Read a whitespace-separated ``word v1 ... vd`` file; returns {vocab id: vector}."""
    found = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip().split(" ")
            if len(parts) != dim + 1 or parts[0] not in vocab:
                continue
            found[vocab.id(parts[0])] = torch.tensor([float(x) for x in parts[1:]], dtype=torch.float64)
    return found


def import_embeddings(model: QGModel, path) -> int:
    vecs = load_embeddings(path, model.vocab, model.config.d_word)
    with torch.no_grad():
        for i, v in vecs.items():
            model.word_emb.weight[i] = v.to(model.word_emb.weight.dtype)
    return len(vecs)
