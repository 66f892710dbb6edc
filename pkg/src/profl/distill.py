"""Federated feature-regression distillation of a trained block into one layer.

The student is a single identity-activation dense layer fed with the
frozen prefix's output; its target is the teacher block's output on the
same input. Loss is the per-sample squared error summed over features,
averaged over samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .aggregate import weighted_average
from .blocks import Stage, SubModel
from .memory import eligible
from .nn import CachePolicy, DenseLayer, ParamVector, forward, pack, unpack


class DistillError(RuntimeError):
    pass


@dataclass
class DistillTask:
    teacher: list[DenseLayer]
    student: DenseLayer
    prefix: list[DenseLayer] = field(default_factory=list)
    epochs: int = 1
    lr: float = 0.01
    batch_size: int = 32
    fit_bias: bool = True

    def __post_init__(self):
        if not self.teacher:
            raise DistillError("teacher block is empty")
        if self.student.fan_in != self.teacher[0].fan_in or self.student.fan_out != self.teacher[-1].fan_out:
            raise DistillError(
                f"student {self.student.fan_in}->{self.student.fan_out} does not match teacher "
                f"{self.teacher[0].fan_in}->{self.teacher[-1].fan_out}"
            )
        if self.prefix and self.prefix[-1].fan_out != self.teacher[0].fan_in:
            raise DistillError("prefix output width does not match teacher input width")

    def as_submodel(self) -> SubModel:
        """Layer stack a device holds while distilling, for memory estimates."""
        layers = [*self.prefix, *self.teacher, self.student]
        mask = [False] * (len(layers) - 1) + [True]
        roles = [("frozen", i) for i in range(len(layers) - 1)] + [("student",)]
        return SubModel(layers, mask, roles, Stage.DISTILL, 0, len(self.prefix), len(self.teacher))

    def features(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Student inputs and teacher targets for raw inputs ``x``."""
        h = np.asarray(x, dtype=np.float64)
        if self.prefix:
            h, _ = forward(self.prefix, h, CachePolicy.STORE_NONE)
        target, _ = forward(self.teacher, h, CachePolicy.STORE_NONE)
        return h, target


def _mse_grad(student: DenseLayer, h: np.ndarray, target: np.ndarray, fit_bias: bool):
    resid = h @ student.weights + student.bias - target
    n = len(h)
    loss = float(np.sum(resid * resid) / n)
    d = 2.0 * resid / n
    dw = h.T @ d
    db = d.sum(axis=0) if fit_bias else np.zeros_like(student.bias)
    return loss, dw, db


def distill_round(task: DistillTask, x: np.ndarray) -> tuple[ParamVector, float]:
    """Full-batch student gradient and loss on one client's raw inputs."""
    if len(x) == 0:
        raise DistillError("empty shard")
    h, target = task.features(x)
    loss, dw, db = _mse_grad(task.student, h, target, task.fit_bias)
    grad = pack([DenseLayer(dw, db, task.student.activation)])
    return grad, loss


def local_distill(
    task: DistillTask,
    student: DenseLayer,
    h: np.ndarray,
    target: np.ndarray,
    rng: np.random.Generator,
) -> tuple[DenseLayer, float]:
    """``task.epochs`` of minibatch SGD on precomputed features."""
    s = student.copy()
    n = len(h)
    for _ in range(task.epochs):
        order = rng.permutation(n)
        for start in range(0, n, task.batch_size):
            idx = order[start : start + task.batch_size]
            _, dw, db = _mse_grad(s, h[idx], target[idx], task.fit_bias)
            s.weights -= task.lr * dw
            s.bias -= task.lr * db
    loss = float(np.sum((h @ s.weights + s.bias - target) ** 2) / max(n, 1))
    return s, loss


@dataclass
class DistillResult:
    student: DenseLayer
    losses: list[float]
    rounds: int
    batch_size: int
    records: list[dict]


def run_distillation(
    task: DistillTask,
    clients: Sequence[np.ndarray],
    rounds: int = 30,
    budgets: Mapping[int, float] | Sequence[float] | None = None,
    target: int = 20,
    tol: float = 1e-6,
    patience: int = 5,
    seed: int = 0,
    cache_frozen: bool = False,
    on_round: Callable[[dict], None] | None = None,
) -> DistillResult:
    """Federated distillation over ``clients`` (raw input arrays, one per device).

    Each round samples up to ``target`` devices that can afford the
    distillation stack, runs local SGD on each and averages the students by
    data size. Stops after ``rounds`` or once the weighted loss has improved
    by less than ``tol`` over the last ``patience`` rounds.
    """
    ids = list(range(len(clients)))
    batch = task.batch_size
    if budgets is not None:
        pool = eligible(budgets, task.as_submodel(), batch, cache_frozen)
        if not pool:
            batch = 1
            pool = eligible(budgets, task.as_submodel(), batch, cache_frozen)
        if not pool:
            raise DistillError("no device can afford distillation even at batch size 1")
        ids = [i for i in pool if len(clients[i])]
    else:
        ids = [i for i in ids if len(clients[i])]
    if not ids:
        raise DistillError("no eligible client holds data")
    run_task = DistillTask(task.teacher, task.student, task.prefix, task.epochs, task.lr, batch, task.fit_bias)

    feats = {}
    student = task.student.copy()
    losses: list[float] = []
    records: list[dict] = []
    rng = np.random.default_rng(seed)
    r = 0
    for r in range(1, rounds + 1):
        chosen = sorted(rng.choice(ids, size=min(target, len(ids)), replace=False).tolist())
        vecs, sizes, round_losses = [], [], []
        for cid in chosen:
            if cid not in feats:
                feats[cid] = run_task.features(clients[cid])
            h, tgt = feats[cid]
            local_rng = np.random.default_rng([seed, r, cid])
            s, loss = local_distill(run_task, student, h, tgt, local_rng)
            vecs.append(pack([s]).data)
            sizes.append(len(h))
            round_losses.append(loss)
        merged = weighted_average(vecs, sizes)
        student = unpack(ParamVector(merged, pack([student]).layout), [student])[0]
        loss = float(np.average(round_losses, weights=sizes))
        losses.append(loss)
        rec = {
            "round": r,
            "loss": loss,
            "n_selected": len(chosen),
            "upload_scalars": len(chosen) * student.n_params,
            "download_scalars": len(chosen) * sum(l.n_params for l in run_task.as_submodel().layers),
            "samples": int(sum(sizes)),
        }
        records.append(rec)
        if on_round is not None:
            on_round(rec)
        if len(losses) > patience and losses[-patience - 1] - losses[-1] < tol:
            break
    return DistillResult(student, losses, r, batch, records)
