"""Analytic peak-memory and FLOP cost model for training a sub-model.

Scalars are accounted at 4 bytes each, whatever precision the simulator
computes in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .blocks import SubModel

BYTES_PER_SCALAR = 4


@dataclass(frozen=True)
class MemoryEstimate:
    param_scalars: int
    grad_scalars: int
    stored_activation_scalars: int
    transient_activation_scalars: int

    @property
    def total_scalars(self) -> int:
        return (
            self.param_scalars
            + self.grad_scalars
            + self.stored_activation_scalars
            + self.transient_activation_scalars
        )

    @property
    def bytes(self) -> int:
        return BYTES_PER_SCALAR * self.total_scalars


def estimate(sub: SubModel, batch_size: int, cache_frozen: bool = False) -> MemoryEstimate:
    """Peak training memory of ``sub`` at the given batch size.

    Frozen layers are streamed: only the widest one's input+output is live
    at a time. With ``cache_frozen`` the prefix output is read from a cache,
    so prefix parameters and their transient activations drop out.
    """
    frozen = [
        l for i, (l, t) in enumerate(zip(sub.layers, sub.trainable))
        if not t and not (cache_frozen and i < sub.n_prefix)
    ]
    trained = [l for l, t in zip(sub.layers, sub.trainable) if t]
    grads = sum(l.n_params for l in trained)
    params = grads + sum(l.n_params for l in frozen)
    stored = sum(batch_size * (l.fan_in + l.fan_out) for l in trained)
    transient = max((batch_size * (l.fan_in + l.fan_out) for l in frozen), default=0)
    return MemoryEstimate(params, grads, stored, transient)


def eligible(
    budgets: Mapping[int, float] | Sequence[float],
    sub: SubModel,
    batch_size: int,
    cache_frozen: bool = False,
) -> list[int]:
    """Ids of devices whose budget (bytes) covers training ``sub``, ascending."""
    need = estimate(sub, batch_size, cache_frozen).bytes
    items = budgets.items() if isinstance(budgets, Mapping) else enumerate(budgets)
    return sorted(i for i, cap in items if cap >= need)


def training_flops(
    sub: SubModel, n_samples: int, epochs: int, cache_frozen: bool = False
) -> int:
    """Multiply-add FLOPs for ``epochs`` passes over ``n_samples``.

    Forward costs 2*fan_in*fan_out per sample per layer; trainable layers
    pay twice that again for the weight and input gradients.
    """
    per_sample = 0
    for i, (layer, t) in enumerate(zip(sub.layers, sub.trainable)):
        fwd = 2 * layer.fan_in * layer.fan_out
        if t:
            per_sample += 3 * fwd
        elif not (cache_frozen and i < sub.n_prefix):
            per_sample += fwd
    return per_sample * n_samples * epochs
