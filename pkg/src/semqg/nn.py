"""Small differentiable building blocks on top of torch autograd.

Every block here is a pure function of (inputs, parameters, rng); parameters
live in ``torch.nn.Module`` containers so that ``named_parameters`` doubles as
the parameter set, with ``requires_grad`` as the trainability flag.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional

import torch
from torch import Tensor, nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

TF_LEARNING_RATE = 0.001
RL_LEARNING_RATE = 0.00001


class NumericError(ArithmeticError):
    """Raised on NaN/Inf in a loss or gradient."""


class RngState:
    """Seeded generator; identical seed and call sequence give identical draws."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.generator = torch.Generator().manual_seed(self.seed)

    def fork(self, salt: int) -> "RngState":
        return RngState((self.seed * 1_000_003 + salt) % (2**63))

    def randperm(self, n: int) -> list[int]:
        return torch.randperm(n, generator=self.generator).tolist()

    def uniform(self, *shape, low=0.0, high=1.0, dtype=torch.float64) -> Tensor:
        return torch.empty(*shape, dtype=dtype).uniform_(low, high, generator=self.generator)


# --------------------------------------------------------------------------
# functional blocks


def softmax(x: Tensor, axis: int = -1, mask: Optional[Tensor] = None) -> Tensor:
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    if mask is not None:
        x = x.masked_fill(~mask, float("-inf"))
    z = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=axis, keepdim=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    z = x - x.amax(dim=axis, keepdim=True).detach()
    return z - torch.log(torch.exp(z).sum(dim=axis, keepdim=True))


def affine(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"affine: input dim {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    y = x @ weight.t()
    return y if bias is None else y + bias


def embedding_lookup(table: Tensor, ids: Tensor) -> Tensor:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError(f"id out of range for table with {table.shape[0]} rows")
    return table[ids]


def dropout(x: Tensor, rate: float, rng: Optional[RngState], training: bool = True) -> Tensor:
    """Inverted dropout; the mask comes from ``rng`` so results are reproducible."""
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout with rate > 0 needs an RngState")
    keep = torch.empty(x.shape, dtype=x.dtype).uniform_(0.0, 1.0, generator=rng.generator) >= rate
    return x * keep.to(x.dtype) / (1.0 - rate)


def max_pool_over_time(x: Tensor, mask: Tensor) -> Tensor:
    """x: [B, T, D], mask: [B, T] bool -> [B, D]."""
    return x.masked_fill(~mask.unsqueeze(-1), float("-inf")).amax(dim=1)


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, w_ih: Tensor, w_hh: Tensor,
              bias: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM cell update; gate rows are ordered input, forget, candidate, output."""
    hidden = h_prev.shape[-1]
    if w_ih.shape != (4 * hidden, x.shape[-1]) or w_hh.shape != (4 * hidden, hidden):
        raise ValueError(
            f"lstm_step: input {tuple(x.shape)}, hidden {hidden} incompatible with "
            f"w_ih {tuple(w_ih.shape)}, w_hh {tuple(w_hh.shape)}")
    if c_prev.shape != h_prev.shape:
        raise ValueError("lstm_step: h and c shapes differ")
    z = x @ w_ih.t() + h_prev @ w_hh.t() + bias
    i, f, g, o = z.chunk(4, dim=-1)
    c = torch.sigmoid(f) * c_prev + torch.sigmoid(i) * torch.tanh(g)
    h = torch.sigmoid(o) * torch.tanh(c)
    return h, c


# --------------------------------------------------------------------------
# parameter containers


def init_uniform(shape, fan_in: int, rng: RngState, dtype=torch.float32) -> Tensor:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return torch.empty(*shape, dtype=torch.float64).uniform_(-bound, bound, generator=rng.generator).to(dtype)


def init_normal(shape, rng: RngState, std: float = 1.0, dtype=torch.float32) -> Tensor:
    return (torch.empty(*shape, dtype=torch.float64).normal_(0.0, std, generator=rng.generator)).to(dtype)


class Affine(nn.Module):
    def __init__(self, n_in: int, n_out: int, rng: RngState, bias: bool = True, dtype=torch.float32):
        super().__init__()
        self.weight = nn.Parameter(init_uniform((n_out, n_in), n_in, rng, dtype))
        self.bias = nn.Parameter(init_uniform((n_out,), n_in, rng, dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return affine(x, self.weight, self.bias)


class Embedding(nn.Module):
    def __init__(self, n: int, dim: int, rng: RngState, trainable: bool = True, dtype=torch.float32):
        super().__init__()
        self.weight = nn.Parameter(init_normal((n, dim), rng, dtype=dtype), requires_grad=trainable)

    def forward(self, ids: Tensor) -> Tensor:
        return embedding_lookup(self.weight, ids)


class LSTMCell(nn.Module):
    def __init__(self, n_in: int, hidden: int, rng: RngState, dtype=torch.float32):
        super().__init__()
        self.hidden = hidden
        self.w_ih = nn.Parameter(init_uniform((4 * hidden, n_in), hidden, rng, dtype))
        self.w_hh = nn.Parameter(init_uniform((4 * hidden, hidden), hidden, rng, dtype))
        b = init_uniform((4 * hidden,), hidden, rng, dtype)
        b[hidden:2 * hidden] = 1.0  # forget gate
        self.bias = nn.Parameter(b)

    def forward(self, x, h, c):
        return lstm_step(x, h, c, self.w_ih, self.w_hh, self.bias)


def _reverse_padded(x: Tensor, lengths: Tensor) -> Tensor:
    """Reverse each row of x [B, T, ...] within its own length; padding stays put."""
    T = x.shape[1]
    ar = torch.arange(T).unsqueeze(0)
    idx = torch.where(ar < lengths.unsqueeze(1), lengths.unsqueeze(1) - 1 - ar, ar)
    view = idx.view(*idx.shape, *([1] * (x.dim() - 2))).expand_as(x)
    return x.gather(1, view)


def run_lstm(cell: LSTMCell, x: Tensor, lengths: Tensor, reverse: bool = False,
             fused: bool = True) -> tuple[Tensor, Tensor, Tensor]:
    """Run a cell over padded batch x [B, T, D].

    Returns outputs [B, T, H] (zero at padding) and the final (h, c) per row,
    taken at each row's last valid step (first step when ``reverse``).
    """
    if reverse:
        x = _reverse_padded(x, lengths)
    B, T, _ = x.shape
    H = cell.hidden
    if fused:
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        zeros = torch.zeros(1, B, H, dtype=x.dtype)
        hx = (zeros.index_select(1, packed.sorted_indices), zeros.index_select(1, packed.sorted_indices))
        flat = [cell.w_ih, cell.w_hh, cell.bias, torch.zeros_like(cell.bias)]
        data, h_n, c_n = torch.lstm(packed.data, packed.batch_sizes, hx, flat, True, 1, 0.0, False, False)
        out, _ = pad_packed_sequence(packed._replace(data=data), batch_first=True, total_length=T)
        h_last = h_n[0].index_select(0, packed.unsorted_indices)
        c_last = c_n[0].index_select(0, packed.unsorted_indices)
    else:
        h = torch.zeros(B, H, dtype=x.dtype)
        c = torch.zeros(B, H, dtype=x.dtype)
        outs = []
        for t in range(T):
            h2, c2 = cell(x[:, t], h, c)
            live = (t < lengths).unsqueeze(1)
            h = torch.where(live, h2, h)
            c = torch.where(live, c2, c)
            outs.append(torch.where(live, h2, torch.zeros_like(h2)))
        out = torch.stack(outs, 1)
        h_last, c_last = h, c
    if reverse:
        out = _reverse_padded(out, lengths)
    return out, h_last, c_last


class BiLSTM(nn.Module):
    """Stacked bidirectional LSTM with inverted dropout on each layer's input."""

    def __init__(self, n_in: int, hidden: int, layers: int, rng: RngState, dropout_rate: float = 0.0,
                 dtype=torch.float32):
        super().__init__()
        self.hidden = hidden
        self.dropout_rate = dropout_rate
        self.fwd = nn.ModuleList()
        self.bwd = nn.ModuleList()
        for layer in range(layers):
            d_in = n_in if layer == 0 else 2 * hidden
            self.fwd.append(LSTMCell(d_in, hidden, rng, dtype))
            self.bwd.append(LSTMCell(d_in, hidden, rng, dtype))

    def forward(self, x: Tensor, lengths: Tensor, rng: Optional[RngState] = None, fused: bool = True):
        """Returns H [B, T, 2h] plus final forward/backward states of the top layer."""
        for f_cell, b_cell in zip(self.fwd, self.bwd):
            x = dropout(x, self.dropout_rate, rng, self.training)
            out_f, hf, cf = run_lstm(f_cell, x, lengths, reverse=False, fused=fused)
            out_b, hb, cb = run_lstm(b_cell, x, lengths, reverse=True, fused=fused)
            x = torch.cat([out_f, out_b], dim=-1)
        return x, (hf, cf), (hb, cb)


def parameter_set(module: nn.Module) -> Dict[str, Tensor]:
    """Named parameters of a module; ``requires_grad`` is the trainability flag."""
    return dict(module.named_parameters())


def snapshot(module: nn.Module) -> Dict[str, Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    lr: float = TF_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, Tensor] = field(default_factory=dict)
    v: Dict[str, Tensor] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Optional[Tensor]], state: OptimState) -> None:
    """Bias-corrected Adam update, in place. Frozen parameters are skipped."""
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if not p.requires_grad or g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter {name!r} {tuple(p.shape)}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p, dtype=torch.float64)
            state.v[name] = torch.zeros_like(p, dtype=torch.float64)
        v = state.v[name]
        g64 = g.detach().to(torch.float64)
        m.mul_(state.beta1).add_(g64, alpha=1 - state.beta1)
        v.mul_(state.beta2).addcmul_(g64, g64, value=1 - state.beta2)
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        with torch.no_grad():
            p.sub_((state.lr * m_hat / (v_hat.sqrt() + state.eps)).to(p.dtype))


class Adam:
    """Thin wrapper binding a module's parameters to an OptimState."""

    def __init__(self, module: nn.Module, lr: float = TF_LEARNING_RATE, max_grad_norm: Optional[float] = None):
        self.params = {k: p for k, p in module.named_parameters() if p.requires_grad}
        self.state = OptimState(lr=lr)
        self.max_grad_norm = max_grad_norm

    def step(self, loss: Tensor) -> None:
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss {loss.item()}")
        names = list(self.params)
        grads = torch.autograd.grad(loss, [self.params[n] for n in names], allow_unused=True)
        gd = {n: (g if g is not None else torch.zeros_like(self.params[n])) for n, g in zip(names, grads)}
        if self.max_grad_norm is not None:
            total = torch.sqrt(sum((g.double() ** 2).sum() for g in gd.values()))
            if total > self.max_grad_norm:
                gd = {n: g * (self.max_grad_norm / total) for n, g in gd.items()}
        adam_step(self.params, gd, self.state)


# --------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckReport:
    errors: Dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())


def relative_error(a: Tensor, n: Tensor, floor: float = 1e-6) -> Tensor:
    return (a - n).abs() / torch.clamp(torch.maximum(a.abs(), n.abs()), min=floor)


def grad_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], tolerance: float = 1e-4,
               eps: float = 1e-4, max_entries: Optional[int] = None, seed: int = 0,
               analytic: Optional[Mapping[str, Tensor]] = None, stencil: int = 4) -> GradCheckReport:
    """Compare autograd gradients of ``loss_fn()`` against central differences.

    ``params`` must be 64-bit leaf tensors that ``loss_fn`` closes over; they
    are perturbed in place and restored. ``max_entries`` subsamples large
    tensors. ``analytic`` overrides the autograd gradients (negative controls).
    ``stencil`` 2 is (f(x+h) - f(x-h)) / 2h; 4 adds the x +- 2h points, which
    cancels the h^2 error term and lets h stay large enough to keep round-off
    small on losses of magnitude ~10-100.
    """
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    params = dict(params)
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise TypeError(f"grad_check needs float64 parameters; {name!r} is {p.dtype}")
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()}")
    if analytic is None:
        names = list(params)
        gs = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
        analytic = {n: (g if g is not None else torch.zeros_like(params[n])) for n, g in zip(names, gs)}
    rng = torch.Generator().manual_seed(seed)
    errors = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            a_flat = analytic[name].reshape(-1)
            idx = torch.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = torch.randperm(flat.numel(), generator=rng)[:max_entries]
            worst = 0.0
            for i in idx.tolist():
                orig = flat[i].item()
                vals = {}
                for k in ((1, -1) if stencil == 2 else (2, 1, -1, -2)):
                    flat[i] = orig + k * eps
                    vals[k] = loss_fn()
                flat[i] = orig
                if not all(torch.isfinite(v) for v in vals.values()):
                    raise NumericError(f"non-finite loss while perturbing {name!r}")
                if stencil == 2:
                    num = (vals[1] - vals[-1]) / (2 * eps)
                else:
                    num = (8 * (vals[1] - vals[-1]) - (vals[2] - vals[-2])) / (12 * eps)
                worst = max(worst, float(relative_error(a_flat[i], num)))
            errors[name] = worst
    return GradCheckReport(errors, tolerance)


def iter_batches(n: int, batch_size: int, rng: Optional[RngState]) -> Iterable[list[int]]:
    order = rng.randperm(n) if rng is not None else list(range(n))
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]
