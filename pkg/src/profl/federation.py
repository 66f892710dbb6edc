"""Federated orchestration: selection, local training, aggregation, and the
shrink-then-grow pipeline plus end-to-end baselines."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .aggregate import weighted_average
from .blocks import (
    BlockState,
    GlobalModel,
    Stage,
    SubModel,
    assemble_growing,
    assemble_shrinking,
    snapshot_init,
)
from .data import Dataset, PartitionSpec, partition
from .distill import DistillTask, run_distillation
from .freeze import Decision, FreezeController, FreezePolicy
from .memory import eligible, estimate, training_flops
from .nn import CachePolicy, DenseLayer, SgdConfig, accuracy, forward, pack, train_sgd

log = logging.getLogger(__name__)

STAGE_CODES = {Stage.SHRINKING: 1, Stage.GROWING: 2, Stage.BASELINE: 3, Stage.DISTILL: 4}


class NoParticipantsError(RuntimeError):
    pass


@dataclass(frozen=True)
class FLConfig:
    n_devices: int = 100
    select: int = 20
    sgd: SgdConfig = SgdConfig()
    window: int = 10
    policy: FreezePolicy = FreezePolicy()
    round_cap: int = 300
    distill_rounds: int = 30
    distill_epochs: int = 1
    distill_lr: float = 0.01
    distill_tol: float = 1e-6
    baseline_rounds: int = 200
    cache_frozen: bool = False
    shrinking: bool = True
    workers: int = 1
    seed: int = 0


@dataclass
class DevicePool:
    budgets: np.ndarray  # bytes per device
    shards: list[np.ndarray]

    def __post_init__(self):
        self.budgets = np.asarray(self.budgets, dtype=np.float64)
        if len(self.budgets) != len(self.shards):
            raise ValueError("one budget per shard required")
        if np.any(self.budgets <= 0):
            raise ValueError("budgets must be positive")

    def __len__(self) -> int:
        return len(self.shards)

    def size(self, cid: int) -> int:
        return len(self.shards[cid])


def make_pool(
    train: Dataset,
    budgets: Sequence[float],
    alpha: float | None = 1.0,
    seed: int = 0,
) -> DevicePool:
    shards = partition(train, PartitionSpec(len(budgets), alpha, seed))
    return DevicePool(np.asarray(budgets, dtype=np.float64), shards)


@dataclass
class RoundRecord:
    mode: str
    round: int
    stage: str
    step: int
    step_round: int
    train_loss: float
    test_accuracy: float
    effective_movement: float
    slope: float
    freeze: bool
    cap_hit: bool
    peak_memory_bytes: int
    n_selected: int
    n_fallback: int
    participation_rate: float
    upload_scalars: int
    download_scalars: int
    flops: int

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class Selection:
    selected: list[int]
    fallback: list[int]
    n_eligible: int
    n_fallback_capable: int


def select_clients(
    budgets: Sequence[float],
    sub: SubModel,
    batch_size: int,
    target: int,
    rng: np.random.Generator,
    cache_frozen: bool = False,
) -> Selection:
    """Sample up to ``target`` devices that can train ``sub``; top up with
    devices that can only afford the head."""
    elig = eligible(budgets, sub, batch_size, cache_frozen)
    k = min(target, len(elig))
    chosen = sorted(rng.choice(elig, size=k, replace=False).tolist()) if k else []
    taken = set(elig)
    head_ok = [i for i in eligible(budgets, sub.head_only(), batch_size, cache_frozen) if i not in taken]
    m = min(target - k, len(head_ok))
    fallback = sorted(rng.choice(head_ok, size=m, replace=False).tolist()) if m else []
    if not chosen and not fallback:
        need = estimate(sub.head_only(), batch_size, cache_frozen).bytes
        raise NoParticipantsError(
            f"no device can train stage {sub.stage.value} step {sub.step}; "
            f"head-only training needs {need} bytes, largest budget is {max(budgets):.0f}"
        )
    return Selection(chosen, fallback, len(elig), len(head_ok))


def local_train(
    x: np.ndarray,
    y: np.ndarray,
    sub: SubModel,
    cfg: SgdConfig,
    rng: np.random.Generator,
    prefix_out: np.ndarray | None = None,
) -> tuple[list[DenseLayer], int, float]:
    """Local SGD on one shard. Returns the updated trainable layers (in
    sub-model order), the shard size and the last-epoch loss.

    ``prefix_out`` may carry the frozen prefix's output for ``x``; the
    prefix is then skipped.
    """
    start = sub.n_prefix if prefix_out is not None else 0
    layers = sub.layers[start:]
    mask = sub.trainable[start:]
    inputs = prefix_out if prefix_out is not None else x
    new, loss = train_sgd(layers, mask, inputs, y, cfg, rng)
    return [l for l, t in zip(new, mask) if t], len(y), loss


def aggregate(updates: Sequence[tuple[np.ndarray, int]]) -> np.ndarray:
    """Eq.-1 style weighted mean of ``(flat_params, n_samples)`` pairs."""
    return weighted_average([u for u, _ in updates], [n for _, n in updates])


@dataclass
class RunResult:
    mode: str
    records: list[RoundRecord]
    final_layers: list[DenseLayer] | None
    model: GlobalModel | None
    na: bool = False
    peak_memory: dict[str, int] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)


class Simulation:
    """Owns the global model and runs rounds against a device pool."""

    def __init__(
        self,
        model: GlobalModel,
        pool: DevicePool,
        train: Dataset,
        test: Dataset,
        cfg: FLConfig,
        mode: str = "profl",
        on_round: Callable[["Simulation", RoundRecord, SubModel], None] | None = None,
    ):
        self.model = model
        self.pool = pool
        self.train = train
        self.test = test
        self.cfg = cfg
        self.mode = mode
        self.on_round = on_round
        self.records: list[RoundRecord] = []
        self.notes: list[str] = []
        self._round = 0
        self._xs = [train.features[s] for s in pool.shards]
        self._ys = [train.labels[s] for s in pool.shards]

    # -- helpers ---------------------------------------------------------

    def _map(self, fn, items):
        if self.cfg.workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(self.cfg.workers) as ex:
                return list(ex.map(fn, items))
        return [fn(i) for i in items]

    def _emit(self, rec: RoundRecord, sub: SubModel) -> None:
        self.records.append(rec)
        if self.on_round is not None:
            self.on_round(self, rec, sub)

    def _train_round(
        self,
        sub: SubModel,
        sel: Selection,
        rng_key: list[int],
        prefix_cache: dict | None,
    ) -> tuple[SubModel, float, int, int]:
        """Local training for one round and merge into ``sub`` (returned copy)."""
        cfg = self.cfg
        head_sub = sub.head_only()

        def prefix(cid):
            if prefix_cache is None or sub.n_prefix == 0:
                return None
            if cid not in prefix_cache:
                prefix_cache[cid], _ = forward(sub.layers[: sub.n_prefix], self._xs[cid], CachePolicy.STORE_NONE)
            return prefix_cache[cid]

        def work(job):
            cid, full = job
            rng = np.random.default_rng([*rng_key, cid])
            return local_train(self._xs[cid], self._ys[cid], sub if full else head_sub, cfg.sgd, rng, prefix(cid))

        jobs = [(c, True) for c in sel.selected] + [(c, False) for c in sel.fallback]
        results = self._map(work, jobs)

        train_idx = [i for i, t in enumerate(sub.trainable) if t]
        head_pos = len(sub.layers) - 1  # the classifier is always last
        merged = sub.copy()
        flops = 0
        for pos_i, pos in enumerate(train_idx):
            contrib = [(pack([r[0][pos_i]]).data, r[1]) for r, (_, full) in zip(results, jobs) if full]
            if pos == head_pos:
                contrib += [(pack([r[0][0]]).data, r[1]) for r, (_, full) in zip(results, jobs) if not full]
            if not contrib:
                continue
            vec = aggregate(contrib)
            layer = sub.layers[pos]
            fi, fo = layer.fan_in, layer.fan_out
            merged.layers[pos] = DenseLayer(vec[: fi * fo].reshape(fi, fo), vec[fi * fo :], layer.activation)

        e = cfg.sgd.local_epochs
        for (cid, full), r in zip(jobs, results):
            flops += training_flops(sub if full else head_sub, r[1], e, cfg.cache_frozen)
        upload = len(sel.selected) * sub.n_trainable + len(sel.fallback) * head_sub.n_trainable
        losses = [r[2] for r in results]
        sizes = [r[1] for r in results]
        loss = float(np.average(losses, weights=sizes)) if results else float("nan")
        return merged, loss, flops, upload

    def _participation(self, sel: Selection) -> float:
        return (sel.n_eligible + sel.n_fallback_capable) / len(self.pool)

    # -- progressive steps -------------------------------------------------

    def run_step(self, stage: Stage, t: int) -> int:
        """Train block ``t`` until the freeze controller fires (or the cap)."""
        cfg, model = self.cfg, self.model
        assemble = assemble_growing if stage is Stage.GROWING else assemble_shrinking
        sub = assemble(model, t)
        ctl = FreezeController(cfg.window, cfg.policy)
        ctl.start(pack(model.block_layers(t)).data)
        prefix_cache: dict = {}
        code = STAGE_CODES[stage]
        est = estimate(sub, cfg.sgd.batch_size, cfg.cache_frozen).bytes
        head_est = estimate(sub.head_only(), cfg.sgd.batch_size, cfg.cache_frozen).bytes
        for r in range(1, cfg.round_cap + 1):
            self._round += 1
            sub = assemble(model, t)
            rng = np.random.default_rng([cfg.seed, code, t, r])
            sel = select_clients(self.pool.budgets, sub, cfg.sgd.batch_size, cfg.select, rng, cfg.cache_frozen)
            merged, loss, flops, upload = self._train_round(sub, sel, [cfg.seed, code, t, r], prefix_cache)
            model.absorb(merged)
            decision = ctl.observe_round(pack(model.block_layers(t)).data)
            capped = decision is not Decision.FREEZE and r == cfg.round_cap
            series = ctl.tracker.series
            em = series[-1][1] if series and series[-1][0] == r else float("nan")
            rec = RoundRecord(
                mode=self.mode,
                round=self._round,
                stage=stage.value,
                step=t,
                step_round=r,
                train_loss=loss,
                test_accuracy=accuracy(merged.layers, self.test.features, self.test.labels),
                effective_movement=em,
                slope=ctl.last_slope if ctl.last_slope is not None else float("nan"),
                freeze=decision is Decision.FREEZE or capped,
                cap_hit=capped,
                peak_memory_bytes=est if sel.selected else head_est,
                n_selected=len(sel.selected),
                n_fallback=len(sel.fallback),
                participation_rate=self._participation(sel),
                upload_scalars=upload,
                download_scalars=(len(sel.selected) + len(sel.fallback)) * sub.n_params,
                flops=flops,
            )
            self._emit(rec, merged)
            if rec.freeze:
                if capped:
                    msg = f"{stage.value} step {t} hit the round cap ({cfg.round_cap}) without freezing"
                    log.warning(msg)
                    self.notes.append(msg)
                return r
        return cfg.round_cap

    def distill_block(self, t: int) -> None:
        cfg, model = self.cfg, self.model
        prefix = [model.hidden[i].copy() for u in range(1, t) for i in model.plan.layers_of(u)]
        task = DistillTask(
            teacher=[l.copy() for l in model.snapshots[t]],
            student=model.new_basic_layer(t),
            prefix=prefix,
            epochs=cfg.distill_epochs,
            lr=cfg.distill_lr,
            batch_size=cfg.sgd.batch_size,
        )
        dsub = task.as_submodel()

        def emit(rec: dict) -> None:
            self._round += 1
            bytes_ = estimate(dsub, task.batch_size, cfg.cache_frozen).bytes
            self._emit(
                RoundRecord(
                    mode=self.mode, round=self._round, stage=Stage.DISTILL.value, step=t,
                    step_round=rec["round"], train_loss=rec["loss"], test_accuracy=float("nan"),
                    effective_movement=float("nan"), slope=float("nan"), freeze=False, cap_hit=False,
                    peak_memory_bytes=bytes_, n_selected=rec["n_selected"], n_fallback=0,
                    participation_rate=len(eligible(self.pool.budgets, dsub, task.batch_size, cfg.cache_frozen))
                    / len(self.pool),
                    upload_scalars=rec["upload_scalars"], download_scalars=rec["download_scalars"],
                    flops=training_flops(dsub, rec["samples"], task.epochs, cfg.cache_frozen),
                ),
                dsub,
            )

        res = run_distillation(
            task,
            self._xs,
            rounds=cfg.distill_rounds,
            budgets=self.pool.budgets,
            target=cfg.select,
            tol=cfg.distill_tol,
            seed=int(np.random.default_rng([cfg.seed, 4, t]).integers(2**31)),
            cache_frozen=cfg.cache_frozen,
            on_round=emit,
        )
        model.basic[t] = res.student

    def run_shrinking(self) -> None:
        model = self.model
        for t in range(model.T, 1, -1):
            self.run_step(Stage.SHRINKING, t)
            snapshot_init(model, t, model.block_layers(t))
            model.set_state(t, BlockState.FROZEN)
            self.distill_block(t)
        model.states = [BlockState.UNTRAINED] * model.T

    def run_growing(self) -> None:
        for t in range(1, self.model.T + 1):
            self.run_step(Stage.GROWING, t)
            self.model.set_state(t, BlockState.WELL_TRAINED)

    def run_profl(self) -> RunResult:
        if self.cfg.shrinking:
            self.run_shrinking()
        self.run_growing()
        return RunResult(self.mode, self.records, self.model.final_layers(), self.model, notes=self.notes)

    # -- end-to-end baselines ------------------------------------------------

    def run_end_to_end(self, ids: Sequence[int], participation: float) -> None:
        """Fixed-length FedAvg over the full model, sampling from ``ids``."""
        cfg, model = self.cfg, self.model
        ids = list(ids)
        code = STAGE_CODES[Stage.BASELINE]
        for r in range(1, cfg.baseline_rounds + 1):
            self._round += 1
            sub = model.full_submodel()
            rng = np.random.default_rng([cfg.seed, code, 0, r])
            k = min(cfg.select, len(ids))
            chosen = sorted(rng.choice(ids, size=k, replace=False).tolist())
            sel = Selection(chosen, [], len(ids), 0)
            merged, loss, flops, upload = self._train_round(sub, sel, [cfg.seed, code, 0, r], None)
            model.absorb(merged)
            rec = RoundRecord(
                mode=self.mode, round=self._round, stage=Stage.BASELINE.value, step=0, step_round=r,
                train_loss=loss,
                test_accuracy=accuracy(merged.layers, self.test.features, self.test.labels),
                effective_movement=float("nan"), slope=float("nan"),
                freeze=False, cap_hit=False,
                peak_memory_bytes=estimate(sub, cfg.sgd.batch_size, False).bytes,
                n_selected=k, n_fallback=0, participation_rate=participation,
                upload_scalars=upload, download_scalars=k * sub.n_params, flops=flops,
            )
            self._emit(rec, merged)


def full_model_estimate(input_dim: int, hidden: Sequence[int], n_classes: int, T: int, batch_size: int) -> int:
    m = GlobalModel(input_dim, hidden, n_classes, T, np.random.default_rng(0))
    return estimate(m.full_submodel(), batch_size).bytes


def allsmall_widths(
    input_dim: int, hidden: Sequence[int], n_classes: int, T: int, batch_size: int, budget: float
) -> list[int] | None:
    """Largest uniform width scaling whose end-to-end estimate fits ``budget``."""

    def widths(s: float) -> list[int]:
        return [max(1, int(np.floor(w * s))) for w in hidden]

    def fits(s: float) -> bool:
        return full_model_estimate(input_dim, widths(s), n_classes, T, batch_size) <= budget

    if fits(1.0):
        return list(hidden)
    if not fits(0.0):
        return None
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if fits(mid):
            lo = mid
        else:
            hi = mid
    return widths(lo)


def run_baseline(
    mode: str,
    input_dim: int,
    hidden: Sequence[int],
    n_classes: int,
    T: int,
    pool: DevicePool,
    train: Dataset,
    test: Dataset,
    cfg: FLConfig,
    on_round=None,
) -> RunResult:
    """OracleFL ('oracle'), ExclusiveFL ('exclusive') or AllSmall ('allsmall')."""
    batch = cfg.sgd.batch_size
    rng = np.random.default_rng([cfg.seed, 99])
    if mode == "allsmall":
        widths = allsmall_widths(input_dim, hidden, n_classes, T, batch, float(pool.budgets.min()))
        if widths is None:
            return RunResult(mode, [], None, None, na=True, notes=["no width fits the smallest budget"])
        # T only labels the plan here; end-to-end training ignores blocks
        model = GlobalModel(input_dim, widths, n_classes, min(T, len(widths)), rng)
    else:
        model = GlobalModel(input_dim, hidden, n_classes, T, rng)
    sim = Simulation(model, pool, train, test, cfg, mode, on_round)
    full = model.full_submodel()
    if mode == "oracle":
        ids = list(range(len(pool)))
    elif mode in ("exclusive", "allsmall"):
        ids = eligible(pool.budgets, full, batch, False)
    else:
        raise ValueError(f"unknown baseline mode {mode!r}")
    if not ids:
        return RunResult(mode, [], None, model, na=True, notes=["no device can afford end-to-end training"])
    sim.run_end_to_end(ids, len(ids) / len(pool))
    res = RunResult(mode, sim.records, model.final_layers(), model, notes=sim.notes)
    res.peak_memory = {"end_to_end": estimate(full, batch).bytes}
    return res


def run_profl(
    input_dim: int,
    hidden: Sequence[int],
    n_classes: int,
    T: int,
    pool: DevicePool,
    train: Dataset,
    test: Dataset,
    cfg: FLConfig,
    on_round=None,
) -> RunResult:
    rng = np.random.default_rng([cfg.seed, 99])
    model = GlobalModel(input_dim, hidden, n_classes, T, rng, "basic" if cfg.shrinking else "linear")
    sim = Simulation(model, pool, train, test, cfg, "profl", on_round)
    return sim.run_profl()
