"""QG training loops: teacher forcing, self-critical policy gradient, mixed and alternating rewards."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import torch
from torch import Tensor

from .decode import BeamHypothesis, DecodeConfig, greedy_decode, sample_decode
from .metrics import rouge_l, sentence_bleu
from .mixing import MixedBatch, mixing_minibatch_iterator  # noqa: F401  (re-exported)
from .nn import Adam, NumericError, RL_LEARNING_RATE, RngState, TF_LEARNING_RATE, iter_batches
from .qg import QGBatch, QGModel, ids_to_tokens, make_batch
from .text import BOS_ID, EOS_ID, PAD_ID, TokenizedExample
from .toy import answer_type, wh_reward

logger = logging.getLogger(__name__)

# reward_fn(examples, questions) -> one value in [0, 1] per example
RewardFn = Callable[[Sequence[TokenizedExample], Sequence[Sequence[str]]], Sequence[float]]

GAMMA_QPP = 0.99
GAMMA_QAP = 0.97


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 200
    patience: int = 10
    tf_lr: float = TF_LEARNING_RATE
    rl_lr: float = RL_LEARNING_RATE
    gamma_qpp: float = GAMMA_QPP
    gamma_qap: float = GAMMA_QAP
    gamma: float = GAMMA_QAP          # single-reward runs (metric / programmatic rewards)
    alt_n: int = 3
    alt_m: int = 1
    seed: int = 0
    rewards: tuple = ()
    max_grad_norm: Optional[float] = None
    rl_length_mean: bool = True       # False: sum of token log-probs as written in the objective
    max_len: int = 20
    target_accuracy: Optional[float] = None   # stop teacher forcing once train accuracy reaches this

    def __post_init__(self):
        for name in ("gamma_qpp", "gamma_qap", "gamma"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.alt_n < 0 or self.alt_m < 0 or self.alt_n + self.alt_m < 1:
            raise ValueError("alternation rate needs n, m >= 0 and n + m >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


class MetricsLog:
    """JSON-lines training log; also kept in memory."""

    def __init__(self, path: Optional[str] = None):
        self.records: list = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.write_text("")

    def __call__(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with self.path.open("a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    model: QGModel
    best_epoch: int
    best_value: float
    history: list = field(default_factory=list)

    @property
    def checkpoint(self) -> bytes:
        return self.model.to_bytes()


def _state(model) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _batches(examples, vocab, copy, size=64):
    for s in range(0, len(examples), size):
        yield make_batch(examples[s:s + size], vocab, copy)


def evaluate_loss(model: QGModel, examples: Sequence[TokenizedExample]) -> float:
    was = model.training
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for b in _batches(list(examples), model.vocab, model.config.copy):
            logp = model.forward_teacher_forced(b)
            total -= float(logp.sum())
            count += int(b.tgt_mask.sum())
    model.train(was)
    return total / max(count, 1)


def evaluate_accuracy(model: QGModel, examples: Sequence[TokenizedExample]) -> float:
    was = model.training
    model.eval()
    hit = n = 0
    for b in _batches(list(examples), model.vocab, model.config.copy):
        h, t = model.token_accuracy(b)
        hit, n = hit + h, n + t
    model.train(was)
    return hit / max(n, 1)


def train_teacher_forcing(model: QGModel, train: Sequence[TokenizedExample], dev: Sequence[TokenizedExample] = (),
                          config: TrainConfig = TrainConfig(), log: Optional[Callable] = None) -> TrainResult:
    """Minimize token-mean NLL with Adam; keep the parameters with the lowest dev loss.

    Without a dev set the dropout-free train loss is monitored instead. Training stops after
    ``patience`` epochs without improvement, or when ``target_accuracy`` is met.
    """
    if not train:
        raise ValueError("empty training set")
    if any(e.question_tokens is None for e in train):
        raise ValueError("teacher forcing needs questions on every training example")
    rng = RngState(config.seed)
    model.set_dropout_rng(rng.fork(1))
    opt = Adam(model, lr=config.tf_lr, max_grad_norm=config.max_grad_norm)
    train = list(train)
    best, best_state, best_epoch, bad = math.inf, _state(model), -1, 0
    history = []
    for epoch in range(config.epochs):
        model.train()
        total, count = 0.0, 0
        for idx in iter_batches(len(train), config.batch_size, rng):
            batch = make_batch([train[i] for i in idx], model.vocab, model.config.copy)
            loss = model.ml_loss(batch)
            opt.step(loss)
            n = int(batch.tgt_mask.sum())
            total, count = total + loss.item() * n, count + n
        rec = {"epoch": epoch, "step": opt.state.step, "train_loss": total / count}
        if dev:
            monitored = rec["dev_loss"] = evaluate_loss(model, dev)
        else:
            # dropout-free pass over the training set; steadier than the running loss
            monitored = rec["train_eval_loss"] = evaluate_loss(model, train)
        if config.target_accuracy is not None:
            rec["train_accuracy"] = evaluate_accuracy(model, train)
        history.append(rec)
        if log:
            log(rec)
        if monitored < best:
            best, best_state, best_epoch, bad = monitored, _state(model), epoch, 0
        else:
            bad += 1
        if config.target_accuracy is not None and rec["train_accuracy"] >= config.target_accuracy:
            best_state, best_epoch, best = _state(model), epoch, monitored
            break
        if bad >= config.patience:
            break
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, best_epoch, best, history)


# --------------------------------------------------------------------------
# self-critical policy gradient


def mixed_loss(ml_loss: Tensor, rl_loss: Tensor, gamma: float) -> Tensor:
    """gamma * L_RL + (1 - gamma) * L_ML."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must be in [0, 1]")
    if gamma == 0.0:
        return ml_loss
    if gamma == 1.0:
        return rl_loss
    return gamma * rl_loss + (1 - gamma) * ml_loss


def sequence_logprobs(model: QGModel, batch: QGBatch, sequences: Sequence[Sequence[int]]) -> Tensor:
    """Per-token log p of given extended-id sequences under teacher forcing; [B, N], zero-padded."""
    N = max(len(s) for s in sequences)
    B = len(sequences)
    dec_in = torch.zeros(B, N, dtype=torch.long)
    dec_out = torch.zeros(B, N, dtype=torch.long)
    for b, s in enumerate(sequences):
        dec_in[b, :len(s)] = torch.tensor([BOS_ID] + list(s[:-1]))
        dec_out[b, :len(s)] = torch.tensor(list(s))
    mem, state = model.start(batch)
    out = []
    for j in range(N):
        p, state = model.decode_step(state, dec_in[:, j], mem)
        out.append(p.gather(1, dec_out[:, j:j + 1]).squeeze(1))
    p = torch.stack(out, dim=1)
    mask = dec_out != PAD_ID
    return torch.log(torch.where(mask, p, torch.ones_like(p))).masked_fill(~mask, 0.0)


@dataclass
class RLStep:
    loss: Tensor
    sample_rewards: list
    greedy_rewards: list
    samples: list           # token lists
    greedy: list

    @property
    def advantages(self) -> list:
        return [s - g for s, g in zip(self.sample_rewards, self.greedy_rewards)]


def _check_rewards(values, kind="reward"):
    out = [float(v) for v in values]
    for v in out:
        if not math.isfinite(v):
            raise NumericError(f"non-finite {kind} {v}")
    return out


def rl_step(model: QGModel, examples: Sequence[TokenizedExample], reward_fn: RewardFn, rng: RngState,
            max_len: int = 20, length_mean: bool = True, batch: Optional[QGBatch] = None) -> RLStep:
    """Self-critical REINFORCE loss for a batch.

    A sample q^s and the greedy q^g are decoded without gradients, rewards come
    from ``reward_fn``, and the loss is -(r(q^s) - r(q^g)) * mean_j log p(y^s_j),
    averaged over the batch. Only the re-scored log-probabilities carry gradient.
    """
    batch = batch or make_batch(list(examples), model.vocab, model.config.copy)
    was = model.training
    model.eval()
    dcfg = DecodeConfig(beam_size=1, max_len=max_len)
    samples = sample_decode(model, batch, rng, dcfg)
    greedy = greedy_decode(model, batch, dcfg)
    model.train(was)
    s_tok = [ids_to_tokens(h.tokens, model.vocab, o) for h, o in zip(samples, batch.oovs)]
    g_tok = [ids_to_tokens(h.tokens, model.vocab, o) for h, o in zip(greedy, batch.oovs)]
    r_s = _check_rewards(reward_fn(examples, s_tok))
    r_g = _check_rewards(reward_fn(examples, g_tok))
    adv = torch.tensor([a - b for a, b in zip(r_s, r_g)], dtype=batch_dtype(model))
    logp = sequence_logprobs(model, batch, [h.tokens for h in samples])
    lengths = torch.tensor([len(h.tokens) for h in samples], dtype=logp.dtype)
    seq = logp.sum(dim=1) / lengths if length_mean else logp.sum(dim=1)
    loss = -(adv * seq).mean()
    return RLStep(loss, r_s, r_g, s_tok, g_tok)


def batch_dtype(model: QGModel):
    return model.config.torch_dtype


# --------------------------------------------------------------------------
# reward functions


def metric_reward_fn(kind: str) -> RewardFn:
    """Sentence-level BLEU4 / ROUGE-L against the gold question, scaled to [0, 1]."""
    if kind == "BLEU4":
        def one(h, r):
            return sentence_bleu(h, r) / 100.0 if h else 0.0
    elif kind == "ROUGE-L":
        def one(h, r):
            return rouge_l(h, r) / 100.0
    else:
        raise ValueError(f"unknown metric reward {kind!r}")

    def fn(examples, questions):
        return [one(list(q), e.question_tokens) for e, q in zip(examples, questions)]
    return fn


def qpp_reward_fn(qpc) -> RewardFn:
    from .rewards import qpp_batch

    def fn(examples, questions):
        return qpp_batch(qpc, questions, [e.question_tokens for e in examples])
    return fn


def qap_reward_fn(qa) -> RewardFn:
    from .rewards import qap_batch

    def fn(examples, questions):
        return qap_batch(qa, examples, [q if q else ["?"] for q in questions])
    return fn


def wh_reward_fn(examples, questions):
    """1 when the question's wh-word matches the answer's entity type."""
    return [wh_reward(q, answer_type(e.ner_tags, e.answer_span)) for e, q in zip(examples, questions)]


# --------------------------------------------------------------------------
# alternating schedules


def kind_schedule(n: int, m: int, steps: int, kinds: tuple = ("QPP", "QAP")) -> list:
    """n batches of the first kind, then m of the second, repeated."""
    if n < 0 or m < 0 or n + m == 0:
        raise ValueError("alternation rate needs n, m >= 0 and n + m >= 1")
    cycle = [kinds[0]] * n + [kinds[1]] * m
    return [cycle[i % len(cycle)] for i in range(steps)]


@dataclass
class BatchPlan:
    steps: list            # (kind, example indices)
    epoch_starts: list     # index into steps where each epoch begins

    def kinds(self) -> list:
        return [k for k, _ in self.steps]


def make_batch_plan(n_examples: int, batch_size: int, n: int, m: int, epochs: int, rng: RngState,
                    kinds: tuple = ("QPP", "QAP")) -> BatchPlan:
    """Shuffle per epoch; the n:m kind cycle continues across epoch boundaries."""
    steps, starts = [], []
    for _ in range(epochs):
        starts.append(len(steps))
        steps.extend(("", idx) for idx in iter_batches(n_examples, batch_size, rng))
    pattern = kind_schedule(n, m, len(steps), kinds)
    return BatchPlan([(k, idx) for k, (_, idx) in zip(pattern, steps)], starts)


def mean_greedy_reward(model: QGModel, examples: Sequence[TokenizedExample], reward_fn: RewardFn,
                       max_len: int = 20) -> float:
    if not examples:
        return 0.0
    was = model.training
    model.eval()
    total = 0.0
    for s in range(0, len(examples), 64):
        part = list(examples[s:s + 64])
        batch = make_batch(part, model.vocab, model.config.copy)
        hyps = greedy_decode(model, batch, DecodeConfig(beam_size=1, max_len=max_len))
        qs = [ids_to_tokens(h.tokens, model.vocab, o) for h, o in zip(hyps, batch.oovs)]
        total += sum(_check_rewards(reward_fn(part, qs)))
    model.train(was)
    return total / len(examples)


def rl_train(model: QGModel, train: Sequence[TokenizedExample], dev: Sequence[TokenizedExample],
             rewards: Mapping[str, RewardFn], gammas: Mapping[str, float], config: TrainConfig,
             cycle: Sequence[tuple] = (), log: Optional[Callable] = None,
             frozen: Sequence[torch.nn.Module] = ()) -> TrainResult:
    """Fine-tune with mixed losses; ``cycle`` lists (kind, consecutive batches), e.g. (("QPP", 3), ("QAP", 1)).

    Keeps the parameters with the best mean greedy dev reward (summed over the
    active kinds) and early-stops after ``patience`` epochs without improvement.
    Modules in ``frozen`` are audited to be bit-identical afterwards.
    """
    if not train:
        raise ValueError("empty training set")
    cycle = tuple(cycle) or ((next(iter(rewards)), 1),)
    if len(cycle) == 1:
        cycle = (cycle[0], (cycle[0][0], 0))
    (k0, n), (k1, m) = cycle
    active = [k for k, c in cycle if c > 0]
    for k in active:
        if k not in rewards or k not in gammas:
            raise ValueError(f"no reward function or gamma for {k!r}")
    audit = [{k: v.detach().clone() for k, v in f.state_dict().items()} for f in frozen]
    rng = RngState(config.seed)
    model.set_dropout_rng(rng.fork(1))
    sample_rng = rng.fork(2)
    opt = Adam(model, lr=config.rl_lr, max_grad_norm=config.max_grad_norm)
    train = list(train)
    plan = make_batch_plan(len(train), config.batch_size, n, m, config.epochs, rng, (k0, k1))

    def dev_value():
        return sum(mean_greedy_reward(model, dev or train, rewards[k], config.max_len) for k in dict.fromkeys(active))

    best = dev_value()
    best_state, best_epoch, bad = _state(model), -1, 0
    history = [{"epoch": -1, "dev_reward": best}]
    if log:
        log(history[0])
    ends = plan.epoch_starts[1:] + [len(plan.steps)]
    for epoch, (lo, hi) in enumerate(zip(plan.epoch_starts, ends)):
        model.train()
        sums: dict = {}
        for kind, idx in plan.steps[lo:hi]:
            part = [train[i] for i in idx]
            batch = make_batch(part, model.vocab, model.config.copy)
            step = rl_step(model, part, rewards[kind], sample_rng, config.max_len, config.rl_length_mean, batch)
            loss = mixed_loss(model.ml_loss(batch), step.loss, gammas[kind])
            opt.step(loss)
            acc = sums.setdefault(kind, [0.0, 0, 0])
            acc[0] += sum(step.sample_rewards)
            acc[1] += len(part)
            acc[2] += 1
        value = dev_value()
        rec = {"epoch": epoch, "step": opt.state.step, "dev_reward": value,
               **{f"sample_reward_{k}": s / c for k, (s, c, _) in sums.items()},
               **{f"batches_{k}": b for k, (_, _, b) in sums.items()}}
        history.append(rec)
        if log:
            log(rec)
        if value > best:
            best, best_state, best_epoch, bad = value, _state(model), epoch, 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    for f, before in zip(frozen, audit):
        after = f.state_dict()
        if any(not torch.equal(before[k], after[k]) for k in before):
            raise RuntimeError("a reward environment changed during RL fine-tuning")
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, best_epoch, best, history)


def multi_reward_train(model: QGModel, train, dev, rewards: Mapping[str, RewardFn],
                       config: TrainConfig = TrainConfig(), log: Optional[Callable] = None,
                       frozen: Sequence[torch.nn.Module] = ()) -> TrainResult:
    """QPP and QAP mixed losses alternated ``config.alt_n``:``config.alt_m``; one of them may be 0."""
    n, m = config.alt_n, config.alt_m
    if n == 0 and m == 0:
        raise ValueError("n = m = 0 schedules no batches")
    missing = [k for k, c in (("QPP", n), ("QAP", m)) if c and k not in rewards]
    if missing:
        raise ValueError(f"reward environment(s) {missing} not provided")
    return rl_train(model, train, dev, rewards, {"QPP": config.gamma_qpp, "QAP": config.gamma_qap},
                    config, (("QPP", n), ("QAP", m)), log, frozen)
