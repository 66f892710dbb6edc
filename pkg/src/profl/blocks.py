"""Block partitioning of an MLP and sub-model assembly for both stages.

Blocks are numbered ``1..T`` in the public API. Hidden layers are ReLU
dense layers; the classifier head is a softmax layer shared by every
stage and step.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn import Activation, DenseLayer, ParamVector, init_dense, pack, unpack

CHECKPOINT_VERSION = 1


class BlockError(RuntimeError):
    pass


class BlockState(str, enum.Enum):
    UNTRAINED = "untrained"
    ACTIVE = "active"
    FROZEN = "frozen"
    WELL_TRAINED = "well_trained"


class Stage(str, enum.Enum):
    SHRINKING = "shrinking"
    GROWING = "growing"
    BASELINE = "baseline"
    DISTILL = "distill"


@dataclass(frozen=True)
class BlockPlan:
    ranges: tuple[tuple[int, int], ...]
    widths: tuple[int, ...]  # input width followed by every hidden width

    @property
    def T(self) -> int:
        return len(self.ranges)

    @property
    def layer_counts(self) -> list[int]:
        return [b - a for a, b in self.ranges]

    def layers_of(self, t: int) -> range:
        a, b = self.ranges[t - 1]
        return range(a, b)

    def in_width(self, t: int) -> int:
        return self.widths[self.ranges[t - 1][0]]

    def out_width(self, t: int) -> int:
        return self.widths[self.ranges[t - 1][1]]


def partition(widths: Sequence[int], T: int) -> BlockPlan:
    """Split the hidden layers into ``T`` contiguous blocks.

    ``widths`` is ``[input_dim, h1, ..., hk]``. Counts differ by at most one,
    with the larger blocks first (9 layers, T=4 gives 3,2,2,2).
    """
    widths = tuple(int(w) for w in widths)
    n_hidden = len(widths) - 1
    if T < 2:
        raise BlockError("need at least two blocks")
    if T > n_hidden:
        raise BlockError(f"cannot split {n_hidden} hidden layers into {T} blocks")
    base, extra = divmod(n_hidden, T)
    ranges = []
    start = 0
    for t in range(T):
        size = base + (1 if t < extra else 0)
        ranges.append((start, start + size))
        start += size
    return BlockPlan(tuple(ranges), widths)


@dataclass
class SubModel:
    """A trainable view: frozen prefix, active block, output module.

    ``roles`` records where each layer lives in the global model:
    ``("hidden", i)``, ``("basic", t)``, ``("aux", t)`` or ``("head",)``.
    """

    layers: list[DenseLayer]
    trainable: list[bool]
    roles: list[tuple]
    stage: Stage
    step: int
    n_prefix: int
    n_active: int

    @property
    def n_params(self) -> int:
        return sum(l.n_params for l in self.layers)

    @property
    def n_trainable(self) -> int:
        return sum(l.n_params for l, t in zip(self.layers, self.trainable) if t)

    @property
    def output_dim(self) -> int:
        return self.layers[-1].fan_out

    @property
    def active_layers(self) -> list[DenseLayer]:
        return self.layers[self.n_prefix : self.n_prefix + self.n_active]

    def trainable_vector(self) -> ParamVector:
        return pack([l for l, t in zip(self.layers, self.trainable) if t])

    def load_trainable(self, vec: ParamVector) -> None:
        idx = [i for i, t in enumerate(self.trainable) if t]
        for i, layer in zip(idx, unpack(vec, [self.layers[i] for i in idx])):
            self.layers[i] = layer

    def head_only(self) -> "SubModel":
        """Same layers, only the final classifier trainable (fallback devices).

        The classifier is the shared head, or the step's linear head when
        the model runs without basic layers.
        """
        mask = [i == len(self.layers) - 1 for i in range(len(self.layers))]
        return SubModel(
            [l.copy() for l in self.layers], mask, list(self.roles),
            self.stage, self.step, self.n_prefix, self.n_active,
        )

    def copy(self) -> "SubModel":
        return SubModel(
            [l.copy() for l in self.layers], list(self.trainable), list(self.roles),
            self.stage, self.step, self.n_prefix, self.n_active,
        )


class GlobalModel:
    """The full MLP plus everything the progressive pipeline attaches to it.

    ``output_modules`` selects how steps before ``T`` reach the classes:
    ``"basic"`` uses distilled basic layers, ``"linear"`` a per-step linear
    head (the no-shrinking ablation).
    """

    def __init__(
        self,
        input_dim: int,
        hidden: Sequence[int],
        n_classes: int,
        T: int,
        rng: np.random.Generator,
        output_modules: str = "basic",
    ):
        if output_modules not in ("basic", "linear"):
            raise ValueError("output_modules must be 'basic' or 'linear'")
        self.plan = partition([input_dim, *hidden], T)
        self.n_classes = int(n_classes)
        self.output_modules = output_modules
        widths = self.plan.widths
        self.hidden = [
            init_dense(widths[i], widths[i + 1], Activation.RELU, rng) for i in range(len(hidden))
        ]
        self.head = init_dense(widths[-1], n_classes, Activation.SOFTMAX, rng)
        self.states = [BlockState.UNTRAINED] * T
        self.snapshots: dict[int, list[DenseLayer]] = {}
        self.basic: dict[int, DenseLayer] = {}
        self.aux_heads: dict[int, DenseLayer] = {}
        self._rng = rng

    @property
    def T(self) -> int:
        return self.plan.T

    @property
    def input_dim(self) -> int:
        return self.plan.widths[0]

    def block_layers(self, t: int) -> list[DenseLayer]:
        return [self.hidden[i] for i in self.plan.layers_of(t)]

    def set_block(self, t: int, layers: Sequence[DenseLayer]) -> None:
        idx = list(self.plan.layers_of(t))
        if len(layers) != len(idx):
            raise BlockError(f"block {t} has {len(idx)} layers, got {len(layers)}")
        for i, layer in zip(idx, layers):
            self.hidden[i] = layer.copy()

    def state(self, t: int) -> BlockState:
        return self.states[t - 1]

    def set_state(self, t: int, state: BlockState) -> None:
        self.states[t - 1] = BlockState(state)

    def final_layers(self) -> list[DenseLayer]:
        return [l.copy() for l in self.hidden] + [self.head.copy()]

    def full_submodel(self) -> SubModel:
        layers = self.final_layers()
        roles = [("hidden", i) for i in range(len(self.hidden))] + [("head",)]
        return SubModel(layers, [True] * len(layers), roles, Stage.BASELINE, 0, 0, len(self.hidden))

    def new_basic_layer(self, t: int) -> DenseLayer:
        return init_dense(self.plan.in_width(t), self.plan.out_width(t), Activation.IDENTITY, self._rng)

    def absorb(self, sub: SubModel) -> None:
        """Write the sub-model's trainable layers back into the global model."""
        for layer, role, train in zip(sub.layers, sub.roles, sub.trainable):
            if not train:
                continue
            kind = role[0]
            if kind == "hidden":
                self.hidden[role[1]] = layer.copy()
            elif kind == "basic":
                self.basic[role[1]] = layer.copy()
            elif kind == "aux":
                self.aux_heads[role[1]] = layer.copy()
            elif kind == "head":
                self.head = layer.copy()
            else:
                raise BlockError(f"unknown layer role {role!r}")

    def _output_module(self, t: int) -> tuple[list[DenseLayer], list[tuple]]:
        T = self.T
        if t == T:
            return [self.head.copy()], [("head",)]
        if self.output_modules == "linear":
            if t not in self.aux_heads:
                self.aux_heads[t] = init_dense(
                    self.plan.out_width(t), self.n_classes, Activation.SOFTMAX, self._rng
                )
            return [self.aux_heads[t].copy()], [("aux", t)]
        missing = [u for u in range(t + 1, T + 1) if u not in self.basic]
        if missing:
            raise BlockError(f"basic layers missing for blocks {missing}")
        layers = [self.basic[u].copy() for u in range(t + 1, T + 1)] + [self.head.copy()]
        roles = [("basic", u) for u in range(t + 1, T + 1)] + [("head",)]
        return layers, roles

    def _assemble(self, t: int, stage: Stage) -> SubModel:
        prefix_idx = [i for u in range(1, t) for i in self.plan.layers_of(u)]
        active_idx = list(self.plan.layers_of(t))
        out_layers, out_roles = self._output_module(t)
        layers = [self.hidden[i].copy() for i in prefix_idx + active_idx] + out_layers
        roles = [("hidden", i) for i in prefix_idx + active_idx] + out_roles
        mask = [False] * len(prefix_idx) + [True] * (len(active_idx) + len(out_layers))
        return SubModel(layers, mask, roles, stage, t, len(prefix_idx), len(active_idx))

    def to_dict(self) -> dict:
        def enc(layer: DenseLayer) -> dict:
            return {
                "fan_in": layer.fan_in,
                "fan_out": layer.fan_out,
                "activation": layer.activation.value,
                # repr of a float64 round-trips exactly through json
                "params": pack([layer]).data.tolist(),
            }

        return {
            "version": CHECKPOINT_VERSION,
            "widths": list(self.plan.widths),
            "T": self.T,
            "n_classes": self.n_classes,
            "output_modules": self.output_modules,
            "states": [s.value for s in self.states],
            "hidden": [enc(l) for l in self.hidden],
            "head": enc(self.head),
            "basic": {str(t): enc(l) for t, l in sorted(self.basic.items())},
            "aux_heads": {str(t): enc(l) for t, l in sorted(self.aux_heads.items())},
            "snapshots": {str(t): [enc(l) for l in ls] for t, ls in sorted(self.snapshots.items())},
        }

    @classmethod
    def from_dict(cls, d: dict, rng: np.random.Generator | None = None) -> "GlobalModel":
        if d.get("version") != CHECKPOINT_VERSION:
            raise BlockError(f"unsupported checkpoint version {d.get('version')!r}")

        def dec(e: dict) -> DenseLayer:
            fi, fo = e["fan_in"], e["fan_out"]
            tmpl = DenseLayer(np.zeros((fi, fo)), np.zeros(fo), e["activation"])
            return unpack(ParamVector(np.array(e["params"], dtype=np.float64), pack([tmpl]).layout), [tmpl])[0]

        widths = d["widths"]
        m = cls.__new__(cls)
        m.plan = partition(widths, d["T"])
        m.n_classes = d["n_classes"]
        m.output_modules = d["output_modules"]
        m.hidden = [dec(e) for e in d["hidden"]]
        m.head = dec(d["head"])
        m.states = [BlockState(s) for s in d["states"]]
        m.basic = {int(k): dec(v) for k, v in d["basic"].items()}
        m.aux_heads = {int(k): dec(v) for k, v in d["aux_heads"].items()}
        m.snapshots = {int(k): [dec(e) for e in v] for k, v in d["snapshots"].items()}
        m._rng = rng if rng is not None else np.random.default_rng(0)
        return m


def assemble_growing(model: GlobalModel, t: int) -> SubModel:
    """Sub-model for growing step ``t``: trained prefix, block ``t``, output module.

    The first call for a step initialises block ``t`` from its shrinking
    snapshot when one exists and marks it active; later calls reuse the
    current parameters.
    """
    if not 1 <= t <= model.T:
        raise BlockError(f"step {t} outside 1..{model.T}")
    not_done = [u for u in range(1, t) if model.state(u) is not BlockState.WELL_TRAINED]
    if not_done:
        raise BlockError(f"growing step {t} requires blocks {not_done} to be well trained")
    if model.state(t) is not BlockState.ACTIVE:
        if t in model.snapshots:
            model.set_block(t, model.snapshots[t])
        model.set_state(t, BlockState.ACTIVE)
    return model._assemble(t, Stage.GROWING)


def assemble_shrinking(model: GlobalModel, t: int) -> SubModel:
    """Sub-model for shrinking step ``t``; blocks before ``t`` stay at their init."""
    if not 2 <= t <= model.T:
        raise BlockError(f"shrinking runs over steps {model.T}..2, got {t}")
    model.set_state(t, BlockState.ACTIVE)
    return model._assemble(t, Stage.SHRINKING)


def snapshot_init(model: GlobalModel, t: int, block_params: Sequence[DenseLayer]) -> None:
    if t in model.snapshots:
        raise BlockError(f"initialisation snapshot for block {t} already stored")
    expected = [(l.fan_in, l.fan_out) for l in model.block_layers(t)]
    got = [(l.fan_in, l.fan_out) for l in block_params]
    if expected != got:
        raise BlockError(f"snapshot shapes {got} do not match block {t} {expected}")
    model.snapshots[t] = [l.copy() for l in block_params]


def save_checkpoint(model: GlobalModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()))


def load_checkpoint(path: str | Path) -> GlobalModel:
    return GlobalModel.from_dict(json.loads(Path(path).read_text()))
