"""Turn a RunConfig into data, a device pool and a finished run."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blocks import BlockState, GlobalModel, Stage, assemble_shrinking, save_checkpoint
from .config import MIB, RunConfig
from .data import Dataset, gen_gaussian_mixture, load_idx, train_test_split
from .federation import (
    DevicePool,
    RunResult,
    full_model_estimate,
    make_pool,
    run_baseline,
    run_profl,
)
from .memory import estimate
from .reporting import metrics_csv, summarize, write_summary

def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    if cfg.source == "idx":
        train = load_idx(cfg.train_images, cfg.train_labels)
        test = load_idx(cfg.test_images, cfg.test_labels)
        k = max(train.class_count, test.class_count)
        return Dataset(train.features, train.labels, k), Dataset(test.features, test.labels, k)
    ds = gen_gaussian_mixture(
        cfg.classes, cfg.dims, cfg.samples_per_class, cfg.spread, cfg.seed,
        cfg.modes_per_class, cfg.center_scale,
    )
    return train_test_split(ds, cfg.test_samples, cfg.seed + 1)


def draw_budgets(cfg: RunConfig, input_dim: int, n_classes: int) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 7])
    raw = rng.uniform(cfg.budget_low, cfg.budget_high, size=cfg.devices)
    if cfg.budget_unit == "relative":
        full = full_model_estimate(input_dim, cfg.hidden, n_classes, cfg.T, cfg.batch_size)
        return raw * full
    if cfg.budget_unit == "mb":
        return raw * MIB
    return raw


def build_pool(cfg: RunConfig, train: Dataset) -> DevicePool:
    budgets = draw_budgets(cfg, train.dims, train.class_count)
    return make_pool(train, budgets, cfg.alpha, cfg.seed + 2)


def execute(cfg: RunConfig, on_round=None) -> tuple[RunResult, Dataset, Dataset]:
    train, test = load_data(cfg)
    pool = build_pool(cfg, train)
    fl = cfg.fl_config()
    args = (train.dims, cfg.hidden, train.class_count, cfg.T, pool, train, test, fl)
    if cfg.mode == "profl":
        res = run_profl(*args, on_round=on_round)
    else:
        res = run_baseline(cfg.mode, *args, on_round=on_round)
    return res, train, test


def write_outputs(cfg: RunConfig, res: RunResult, out: str | Path) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(res.records), encoding="utf-8")
    summary = summarize([_as_row(r) for r in res.records], res.mode)
    summary["notes"] = list(res.notes)
    write_summary(summary, out / "summary.json")
    if res.model is not None and not res.na:
        save_checkpoint(res.model, out / "checkpoint.json")
    return summary


def _as_row(rec) -> dict:
    return dict(vars(rec))


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def _idx_header(path: str) -> tuple[int, ...]:
    with open(path, "rb") as fh:
        head = fh.read(16)
    if len(head) < 16:
        raise ValueError("header truncated")
    return struct.unpack(">IIII", head)


def validate(cfg: RunConfig) -> list[tuple[str, str]]:
    """``(severity, message)`` pairs; an empty list means the config is clean."""
    report: list[tuple[str, str]] = []
    if cfg.T < 2:
        report.append(("error", f"T = {cfg.T}: need at least two blocks"))
    if cfg.T > len(cfg.hidden):
        report.append(("error", f"T = {cfg.T} exceeds the {len(cfg.hidden)} hidden layers"))
    if not 10 <= cfg.window <= 20:
        report.append(("warning", f"window H = {cfg.window} outside the usual 10-20"))
    if not 0.10 <= cfg.phi <= 0.20:
        report.append(("warning", f"phi = {cfg.phi} outside the usual 0.10-0.20"))
    if not 20 <= cfg.patience <= 40:
        report.append(("warning", f"patience W = {cfg.patience} outside the usual 20-40"))
    if cfg.select > cfg.devices:
        report.append(("warning", f"select = {cfg.select} exceeds the pool of {cfg.devices}"))

    if cfg.source == "idx":
        try:
            _, _, rows, cols = _idx_header(cfg.train_images)
        except (OSError, ValueError) as exc:
            report.append(("error", f"train_images: {exc}"))
            return report
        input_dim, n_classes = rows * cols, cfg.classes
    else:
        input_dim, n_classes = cfg.dims, cfg.classes
    if any(sev == "error" for sev, _ in report):
        return report

    budgets = draw_budgets(cfg, input_dim, n_classes)
    model = GlobalModel(input_dim, cfg.hidden, n_classes, cfg.T, np.random.default_rng(0))
    # basic layers only matter for their shapes here
    for t in range(2, cfg.T + 1):
        model.basic[t] = model.new_basic_layer(t)
    subs = [(f"shrinking step {t}", assemble_shrinking(model, t)) for t in range(cfg.T, 1, -1)]
    model.states = [BlockState.WELL_TRAINED] * cfg.T
    subs += [(f"growing step {t}", model._assemble(t, Stage.GROWING)) for t in range(1, cfg.T + 1)]
    for name, sub in subs:
        need = estimate(sub, cfg.batch_size, cfg.cache_frozen).bytes
        head = estimate(sub.head_only(), cfg.batch_size, cfg.cache_frozen).bytes
        if budgets.max() < head:
            report.append(("warning", f"{name}: no feasible participants (head-only needs {head} bytes)"))
        elif budgets.max() < need:
            report.append(("warning", f"{name}: empty eligibility ({need} bytes); head-only fallback only"))
    return report

