"""Half ground-truth / half synthetic mini-batches."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

from .nn import RngState


@dataclass(frozen=True)
class MixedBatch:
    ground_truth: tuple    # indices into the ground-truth pool
    synthetic: tuple       # indices into the synthetic pool
    epoch: int

    @property
    def size(self) -> int:
        return len(self.ground_truth) + len(self.synthetic)


def mixing_minibatch_iterator(n_ground_truth: int, n_synthetic: int, batch_size: int, rng: RngState,
                              epochs: int = 1) -> Iterator[MixedBatch]:
    """Yield batches of ceil(B/2) ground-truth and floor(B/2) synthetic indices.

    An epoch is one shuffled pass over the ground truth; the synthetic pool is
    reshuffled and cycled independently. The last batch of an epoch, holding
    r < ceil(B/2) ground-truth items, shrinks to 2r (B even) or 2r - 1 (B odd)
    items so the same ceil/floor split holds. With an empty synthetic pool the
    batches are all ground truth.
    """
    if n_ground_truth <= 0:
        raise ValueError("ground-truth pool is empty")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    gt_per = batch_size if n_synthetic == 0 else -(-batch_size // 2)
    syn_order: list = []
    syn_pos = 0

    def take_synthetic(k: int) -> tuple:
        nonlocal syn_order, syn_pos
        out = []
        while len(out) < k:
            if syn_pos >= len(syn_order):
                syn_order = rng.randperm(n_synthetic)
                syn_pos = 0
            out.append(syn_order[syn_pos])
            syn_pos += 1
        return tuple(out)

    for epoch in range(epochs):
        order = rng.randperm(n_ground_truth)
        for s in range(0, n_ground_truth, gt_per):
            gt = tuple(order[s:s + gt_per])
            if n_synthetic == 0:
                yield MixedBatch(gt, (), epoch)
                continue
            if len(gt) == gt_per:
                n_syn = batch_size // 2
            else:
                n_syn = len(gt) - (batch_size % 2)
            yield MixedBatch(gt, take_synthetic(n_syn), epoch)
