"""Greedy, sampling, beam and diverse-beam decoding with n-gram repetition blocking.

Any model exposing ``start(batch) -> (memory, state)`` and
``step_logprobs(memory, state, prev_tokens) -> (logp [b, V], state)``, with
``select(index)`` on memory and state, can be decoded here.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import torch
from torch import Tensor

from .nn import RngState
from .text import BOS_ID, EOS_ID

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 10
    max_len: int = 20
    diversity: float = 0.0
    block_ngram: int = 0
    temperature: float = 1.0
    min_len: int = 0              # EOS disallowed before this many tokens

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam size must be >= 1")
        if self.max_len < 1:
            raise ValueError("max length must be >= 1")
        if self.diversity < 0:
            raise ValueError("diversity penalty must be >= 0")
        if self.block_ngram not in (0, 2, 3):
            raise ValueError("block_ngram must be 0, 2 or 3")
        if not 0 <= self.min_len < self.max_len:
            raise ValueError("min_len must be in [0, max_len)")


@dataclass
class BeamHypothesis:
    tokens: list                   # generated ids, ending with EOS when finished
    score: float                   # sum of per-step log-probabilities
    finished: bool = False
    parents: list = field(default_factory=list)   # beam slot of the parent at each step
    step_logprobs: list = field(default_factory=list)

    def body(self) -> list:
        return self.tokens[:-1] if self.finished and self.tokens and self.tokens[-1] == EOS_ID else list(self.tokens)


def blocked_tokens(history: Sequence[int], n: int) -> set:
    """Tokens that would complete an n-gram already present in ``history``."""
    if n <= 0 or len(history) < n - 1:
        return set()
    prefix = tuple(history[len(history) - (n - 1):]) if n > 1 else ()
    out = set()
    for i in range(len(history) - n + 1):
        if tuple(history[i:i + n - 1]) == prefix:
            out.add(history[i + n - 1])
    return out


def ngram_block(logp: Tensor, history: Sequence[int], n: int) -> Tensor:
    """Zero the probability of repeat-completing tokens and renormalize (log space)."""
    if n == 0:
        return logp
    if n not in (2, 3):
        raise ValueError("n must be 0, 2 or 3")
    banned = blocked_tokens(history, n)
    if not banned:
        return logp
    masked = logp.clone()
    masked[list(banned)] = float("-inf")
    if not torch.isfinite(masked).any():
        logger.warning("n-gram blocking removed every candidate; using the unblocked distribution")
        return logp
    return masked - torch.logsumexp(masked, dim=-1)


def _block_rows(logp: Tensor, histories: Sequence[Sequence[int]], n: int) -> Tensor:
    if n == 0:
        return logp
    return torch.stack([ngram_block(logp[i], h, n) for i, h in enumerate(histories)])


def _constrain(logp: Tensor, histories, config: DecodeConfig, t: int) -> Tensor:
    logp = _block_rows(logp, histories, config.block_ngram)
    if t < config.min_len:
        masked = logp.clone()
        masked[:, EOS_ID] = float("-inf")
        logp = masked - torch.logsumexp(masked, dim=-1, keepdim=True)
    return logp


def greedy_decode(model, batch, config: DecodeConfig = DecodeConfig(beam_size=1)) -> list[BeamHypothesis]:
    with torch.no_grad():
        memory, state = model.start(batch)
        B = memory_rows(memory)
        hyps = [BeamHypothesis([], 0.0) for _ in range(B)]
        prev = torch.full((B,), BOS_ID, dtype=torch.long)
        for t in range(config.max_len):
            logp, state = model.step_logprobs(memory, state, prev)
            logp = _constrain(logp, [h.tokens for h in hyps], config, t)
            nxt = logp.argmax(dim=-1)
            for b, h in enumerate(hyps):
                if h.finished:
                    continue
                tok = int(nxt[b])
                lp = float(logp[b, tok])
                h.tokens.append(tok)
                h.step_logprobs.append(lp)
                h.score += lp
                h.parents.append(0)
                h.finished = tok == EOS_ID
            if all(h.finished for h in hyps):
                break
            prev = nxt
    return hyps


def sample_decode(model, batch, rng: RngState, config: DecodeConfig = DecodeConfig(beam_size=1)) -> list[BeamHypothesis]:
    """Ancestral sampling; each hypothesis carries its per-step log-probabilities."""
    with torch.no_grad():
        memory, state = model.start(batch)
        B = memory_rows(memory)
        hyps = [BeamHypothesis([], 0.0) for _ in range(B)]
        prev = torch.full((B,), BOS_ID, dtype=torch.long)
        for t in range(config.max_len):
            logp, state = model.step_logprobs(memory, state, prev)
            logp = _constrain(logp, [h.tokens for h in hyps], config, t)
            probs = torch.exp((logp / config.temperature).double())
            probs = probs / probs.sum(dim=-1, keepdim=True)
            nxt = torch.multinomial(probs, 1, generator=rng.generator).squeeze(1)
            for b, h in enumerate(hyps):
                if h.finished:
                    continue
                tok = int(nxt[b])
                lp = float(logp[b, tok])
                h.tokens.append(tok)
                h.step_logprobs.append(lp)
                h.score += lp
                h.parents.append(0)
                h.finished = tok == EOS_ID
            if all(h.finished for h in hyps):
                break
            prev = nxt
    return hyps


def memory_rows(memory) -> int:
    return memory.rows() if hasattr(memory, "rows") else memory.H_hat.shape[0]


def _sort_key(h: BeamHypothesis):
    return (-h.score, h.tokens)


def beam_search(model, batch, config: DecodeConfig) -> list[list[BeamHypothesis]]:
    """Length-bounded beam search; returns, per batch row, up to k hypotheses by score.

    Every EOS expansion of a live beam enters the finished pool; the k best
    non-EOS expansions stay live. With ``diversity`` > 0 the r-th best child of
    a parent is ranked with ``score - diversity * r`` for pruning only; stored
    scores remain true log-probabilities.
    """
    with torch.no_grad():
        memory, state = model.start(batch)
        B = memory_rows(memory)
        return [_beam_one(model, memory.select(torch.tensor([b])), state.select(torch.tensor([b])), config)
                for b in range(B)]


def diverse_beam_search(model, batch, config: DecodeConfig, diversity: Optional[float] = None
                        ) -> list[list[BeamHypothesis]]:
    """Beam search with a sibling-rank penalty; ``diversity`` = 0 is plain beam search."""
    if diversity is not None:
        config = replace(config, diversity=diversity)
    return beam_search(model, batch, config)


def sibling_penalized(scores: Tensor, logp: Tensor, diversity: float) -> Tensor:
    """Pruning keys: each child's score minus ``diversity`` times its rank (1 = best) among its siblings."""
    keys = scores.clone()
    if diversity:
        order = torch.sort(logp, dim=1, descending=True, stable=True).indices
        ranks = torch.empty_like(order)
        ranks.scatter_(1, order, torch.arange(1, logp.shape[1] + 1).expand_as(order).contiguous())
        keys = keys - diversity * ranks.double()
    return keys


def _beam_one(model, memory, state, config: DecodeConfig) -> list[BeamHypothesis]:
    k = config.beam_size
    live = [BeamHypothesis([], 0.0)]
    finished: list[BeamHypothesis] = []
    for t in range(config.max_len):
        idx = torch.zeros(len(live), dtype=torch.long)
        prev = torch.tensor([h.tokens[-1] if h.tokens else BOS_ID for h in live], dtype=torch.long)
        logp, new_state = model.step_logprobs(memory.select(idx), state, prev)
        logp = _constrain(logp, [h.tokens for h in live], config, t).double()
        base = torch.tensor([h.score for h in live], dtype=torch.float64).unsqueeze(1)
        scores = base + logp
        if t == config.max_len - 1:
            # length bound reached: every expansion is a completion; only the best k can matter
            flat = scores.view(-1)
            order = torch.sort(flat, descending=True, stable=True).indices[:k]
            for j in order.tolist():
                if torch.isfinite(flat[j]):
                    finished.append(_extend(live, j // logp.shape[1], j % logp.shape[1], logp, scores, True))
            break
        for i in range(len(live)):
            if torch.isfinite(scores[i, EOS_ID]):
                finished.append(_extend(live, i, EOS_ID, logp, scores, True))
        keys = sibling_penalized(scores, logp, config.diversity)
        keys[:, EOS_ID] = float("-inf")
        flat = keys.view(-1)
        order = torch.sort(flat, descending=True, stable=True).indices[:k]
        picked = [j for j in order.tolist() if torch.isfinite(flat[j])]
        if not picked:
            break
        V = logp.shape[1]
        next_live = [_extend(live, j // V, j % V, logp, scores, False) for j in picked]
        state = new_state.select(torch.tensor([j // V for j in picked]))
        live = next_live
        if len(finished) >= k:
            kth = sorted(h.score for h in finished)[-k]
            if max(h.score for h in live) < kth:
                break
    pool = finished if finished else live
    return sorted(pool, key=_sort_key)[:k]


def _extend(live, i: int, v: int, logp: Tensor, scores: Tensor, done: bool) -> BeamHypothesis:
    parent = live[i]
    return BeamHypothesis(parent.tokens + [v], float(scores[i, v]), done, parent.parents + [i],
                          parent.step_logprobs + [float(logp[i, v])])
