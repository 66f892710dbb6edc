"""Acceptance criteria, one test each. Every test prints a PASS/FAIL line
with the measured value next to its tolerance; the lines are collected in
the terminal summary as well."""

import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from profl.aggregate import weighted_average
from profl.blocks import BlockState, GlobalModel, assemble_growing, assemble_shrinking
from profl.config import load_config
from profl.distill import DistillTask, run_distillation
from profl.federation import make_pool, run_baseline, run_profl
from profl.freeze import Decision, FreezeController, FreezePolicy, fit_slope, movement_ratio
from profl.memory import estimate
from profl.nn import CachePolicy, DenseLayer, ParamVector, backward, cross_entropy_loss, forward, init_dense, pack, unpack
from profl.reporting import metrics_csv, summarize
from profl.runner import execute, load_data

BENCHMARK = Path(__file__).resolve().parent.parent / "configs" / "benchmark.ini"
SEEDS = (0, 1, 2)

pytestmark = pytest.mark.acceptance


# ---------------------------------------------------------------------------
# shared benchmark runs
# ---------------------------------------------------------------------------


def model_state(model):
    """Every parameter array the global model owns, keyed by location."""
    state = {("hidden", i): pack([l]).data for i, l in enumerate(model.hidden)}
    state[("head",)] = pack([model.head]).data
    state.update({("basic", t): pack([l]).data for t, l in model.basic.items()})
    state.update({("aux", t): pack([l]).data for t, l in model.aux_heads.items()})
    state.update({("snapshot", t): pack(ls).data for t, ls in model.snapshots.items()})
    return state


class ConservationCheck:
    """on_round hook: parameters outside the step's trainable slice must not
    change between consecutive rounds of a run."""

    def __init__(self):
        self.prev = None
        self.rounds_checked = 0
        self.violations = []

    def __call__(self, sim, rec, sub):
        now = model_state(sim.model)
        if rec.stage in ("shrinking", "growing"):
            plan = sim.model.plan
            active = {("hidden", i) for i in plan.layers_of(rec.step)}
            active |= {("basic", u) for u in range(rec.step + 1, plan.T + 1)}
            active |= {("head",), ("aux", rec.step)}
            if self.prev is not None:
                for key, before in self.prev.items():
                    if key in active or key not in now:
                        continue
                    if not np.array_equal(now[key], before):
                        self.violations.append((rec.round, rec.stage, rec.step, key))
                self.rounds_checked += 1
        self.prev = now


class Bench:
    def __init__(self):
        self.base = load_config(BENCHMARK)
        self.cache = {}
        self.conservation = None

    def get(self, seed, variant):
        key = (seed, variant)
        if key not in self.cache:
            if variant == "noshrink":
                cfg = replace(self.base, seed=seed, mode="profl", shrinking=False)
            else:
                cfg = replace(self.base, seed=seed, mode=variant)
            hook = None
            if key == (0, "profl"):
                hook = self.conservation = ConservationCheck()
                # the same initial model run_profl builds, so round 1 is checked too
                init = GlobalModel(cfg.dims, cfg.hidden, cfg.classes, cfg.T, np.random.default_rng([seed, 99]))
                hook.prev = model_state(init)
            t0 = time.perf_counter()
            res, _, _ = execute(cfg, on_round=hook)
            secs = time.perf_counter() - t0
            summary = summarize([vars(r) for r in res.records], res.mode)
            self.cache[key] = (res, summary, secs)
        return self.cache[key]


@pytest.fixture(scope="session")
def bench():
    return Bench()


# ---------------------------------------------------------------------------
# 1. gradient oracle
# ---------------------------------------------------------------------------


def test_criterion_01_gradient_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, n_models, n_checked = 0.0, 0, 0
    h = 1e-5  # near the roundoff/truncation optimum for central differences
    while n_models < 120:
        depth = int(rng.integers(1, 5))
        dims = rng.integers(1, 9, size=depth + 1)
        acts = ["relu" if rng.random() < 0.7 else "identity" for _ in range(depth - 1)] + ["softmax"]
        layers = [
            DenseLayer(rng.normal(size=(dims[i], dims[i + 1])), rng.normal(size=dims[i + 1]), acts[i])
            for i in range(depth)
        ]
        mask = (rng.random(depth) < 0.7).tolist()
        if not any(mask):
            mask[-1] = True
        x = rng.normal(size=(4, dims[0]))
        y = rng.integers(0, dims[-1], 4)
        out, cache = forward(layers, x, CachePolicy.STORE_ALL)
        # finite differences are no reference at a ReLU kink; draw again
        if any(l.activation == "relu" and np.abs(z).min() < 1e-3 for l, (_, z) in zip(layers, cache)):
            continue
        out, cache = forward(layers, x, CachePolicy.STORE_TRAINABLE, mask)
        g = backward(layers, cache, cross_entropy_loss(out, y)[1], mask)
        base = pack(layers)
        for li, trainable in enumerate(mask):
            a, b = base.layout.offsets[li], base.layout.offsets[li + 1]
            for i in range(a, b):
                if not trainable:
                    assert g.data[i] == 0.0
                    continue
                vals = []
                for sign in (1, -1):
                    v = base.data.copy()
                    v[i] += sign * h
                    o, _ = forward(unpack(ParamVector(v, base.layout), layers), x, CachePolicy.STORE_NONE)
                    vals.append(cross_entropy_loss(o, y)[0])
                fd = (vals[0] - vals[1]) / (2 * h)
                scale = max(abs(g.data[i]), abs(fd), 1e-4)
                worst = max(worst, abs(g.data[i] - fd) / scale)
                n_checked += 1
        n_models += 1
    secs = time.perf_counter() - t0
    ok = worst < 1e-5 and secs < 10
    report(1, ok, f"max rel err {worst:.2e} (< 1e-5) over {n_models} sub-models / {n_checked} params "
                  f"(samples within 1e-3 of a ReLU kink redrawn), "
                  f"{secs:.1f} s (< 10 s)")
    assert ok


# ---------------------------------------------------------------------------
# 2. aggregation oracle
# ---------------------------------------------------------------------------


def test_criterion_02_aggregation_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for case in range(1000):
        kind = case % 4
        k = 1 if kind == 0 else int(rng.integers(2, 12))
        n = int(rng.integers(1, 30))
        vecs = rng.normal(size=(k, n)) * 10 ** rng.uniform(-3, 3)
        sizes = [int(s) for s in rng.integers(1, 10_000, size=k)]
        if kind == 1:
            sizes = [int(sizes[0])] * k
        got = weighted_average(list(vecs), sizes)
        total = sum(sizes)
        brute = [math.fsum(sizes[i] * vecs[i, j] for i in range(k)) / total for j in range(n)]
        if kind == 0:
            assert np.array_equal(got, vecs[0])
        err = np.max(np.abs(got - brute) / np.maximum(1.0, np.abs(brute)))
        worst = max(worst, err)
    secs = time.perf_counter() - t0
    ok = worst <= 1e-12 and secs < 5
    report(2, ok, f"max err {worst:.2e} (<= 1e-12) over 1000 cases, {secs:.2f} s (< 5 s)")
    assert ok


# ---------------------------------------------------------------------------
# 3. effective-movement closed forms
# ---------------------------------------------------------------------------


def test_criterion_03_effective_movement_closed_forms(report):
    one = movement_ratio(np.full((5, 1), 0.1))[0]
    zero = movement_ratio(np.array([[0.1], [-0.1], [0.1], [-0.1]]))[0]
    mixed = movement_ratio(np.array([[0.2, 0.1], [0.2, -0.1]]))[0]
    slope = fit_slope([1, 2, 3], [1.0, 0.8, 0.6])
    ok = one == 1.0 and zero == 0.0 and abs(mixed - 2 / 3) <= 1e-12 and abs(slope + 0.2) <= 1e-12
    report(3, ok, f"EM {one!r} (== 1.0), {zero!r} (== 0), {mixed!r} (2/3 +- 1e-12); "
                  f"slope {slope!r} (-0.2 +- 1e-12)")
    assert ok


# ---------------------------------------------------------------------------
# 4. freeze soundness on a convex problem
# ---------------------------------------------------------------------------


def test_criterion_04_freeze_soundness_on_quadratic(report):
    """Full-batch gradient descent on f(w) = 1/2 sum_i a_i (w_i - w*_i)^2 with
    default freeze settings; isotropic (a = 1) and anisotropic (a in [1, 100])."""
    t0 = time.perf_counter()
    ok = True
    details = []
    for seed in range(5):
        for cond in (1.0, 100.0):
            rng = np.random.default_rng(seed)
            a = np.geomspace(1.0, cond, 8)
            w_star = rng.normal(size=8) * 2
            w = rng.normal(size=8) * 3
            lr = 0.5 if cond == 1.0 else 1.0 / a.max()

            def f(v):
                return 0.5 * float(np.sum(a * (v - w_star) ** 2))

            ctl = FreezeController(10, FreezePolicy(phi=0.15, patience=20))
            ctl.start(w)
            losses = [f(w)]
            fired = None
            for k in range(1, 100_000):
                w = w - lr * a * (w - w_star)
                losses.append(f(w))
                if ctl.observe_round(w) is Decision.FREEZE:
                    fired = k
                    break
            monotone = all(b <= a_ for a_, b in zip(losses, losses[1:]))
            gap = losses[-1]  # optimum value is 0
            case_ok = fired is not None and monotone and gap <= 1e-4
            ok &= case_ok
            details.append(gap)
    secs = time.perf_counter() - t0
    ok &= secs < 10
    report(4, ok, f"10 runs: loss monotone, freeze fired with gap <= {max(details):.1e} (<= 1e-4), "
                  f"{secs:.2f} s (< 10 s)")
    assert ok


# ---------------------------------------------------------------------------
# 5. frozen-state conservation
# ---------------------------------------------------------------------------


def test_criterion_05_frozen_state_conservation(report, bench):
    res, _, _ = bench.get(0, "profl")
    chk = bench.conservation
    n_rounds = sum(1 for r in res.records if r.stage in ("shrinking", "growing"))
    ok = not chk.violations and chk.rounds_checked == n_rounds and n_rounds > 0
    report(5, ok, f"{len(chk.violations)} violations over {chk.rounds_checked} rounds "
                  f"(T=3, 100 devices, every round checked)")
    assert ok


# ---------------------------------------------------------------------------
# 6. memory reduction
# ---------------------------------------------------------------------------


def test_criterion_06_memory_reduction(report):
    t0 = time.perf_counter()
    cfg = load_config(BENCHMARK)
    hidden = (64, 64, 64, 64, 32, 32, 32, 32)
    m = GlobalModel(cfg.dims, hidden, cfg.classes, 4, np.random.default_rng(0))
    for t in range(2, 5):
        m.basic[t] = m.new_basic_layer(t)
    full = estimate(m.full_submodel(), 32).bytes
    reductions = {}
    for cache in (False, True):
        m.states = [BlockState.UNTRAINED] * 4
        peaks = []
        for t in range(1, 5):
            peaks.append(estimate(assemble_growing(m, t), 32, cache).bytes)
            m.set_state(t, BlockState.WELL_TRAINED)
        reductions[cache] = 1 - max(peaks) / full
    secs = time.perf_counter() - t0
    ok = reductions[False] >= 0.30 and reductions[True] >= 0.45 and secs < 1
    report(6, ok, f"reduction {reductions[False]:.1%} (>= 30%), with cache {reductions[True]:.1%} (>= 45%), "
                  f"{secs:.3f} s (< 1 s)")
    assert ok


# ---------------------------------------------------------------------------
# 7. participation
# ---------------------------------------------------------------------------


def test_criterion_07_participation(report):
    t0 = time.perf_counter()
    cfg = load_config(BENCHMARK)
    train, test = load_data(cfg)
    fl = cfg.fl_config()
    m = GlobalModel(train.dims, cfg.hidden, train.class_count, cfg.T, np.random.default_rng(0))
    for t in range(2, cfg.T + 1):
        m.basic[t] = m.new_basic_layer(t)
    full = estimate(m.full_submodel(), cfg.batch_size).bytes
    subs = [assemble_shrinking(m, t) for t in range(cfg.T, 1, -1)]
    m.states = [BlockState.UNTRAINED] * cfg.T
    for t in range(1, cfg.T + 1):
        subs.append(assemble_growing(m, t))
        m.set_state(t, BlockState.WELL_TRAINED)
    cheapest = min(estimate(s, cfg.batch_size).bytes for s in subs)
    head = max(estimate(s.head_only(), cfg.batch_size).bytes for s in subs)
    assert head < cheapest < full

    rng = np.random.default_rng(11)
    budgets = np.concatenate([
        rng.uniform(full, 1.2 * full, 5),        # can train end to end
        rng.uniform(cheapest, full - 1, 90),     # every progressive step, not the full model
        rng.uniform(head, cheapest - 1, 5),      # head-only
    ])
    rng.shuffle(budgets)
    e2e_share = np.mean(budgets >= full)
    step_share = np.mean(budgets >= cheapest)
    assert e2e_share < 0.10 and step_share >= 0.95
    pool = make_pool(train, budgets, cfg.alpha, cfg.seed + 2)
    args = (train.dims, cfg.hidden, train.class_count, cfg.T, pool, train, test, fl)
    excl = run_baseline("exclusive", *args)
    profl = run_profl(*args)
    excl_pr = "NA" if excl.na else min(r.participation_rate for r in excl.records)
    profl_pr = min(r.participation_rate for r in profl.records if r.stage in ("shrinking", "growing"))
    secs = time.perf_counter() - t0
    ok = (excl.na or excl_pr < 0.10) and profl_pr == 1.0 and secs < 120
    report(7, ok, f"ExclusiveFL PR {excl_pr} (< 10% or NA), profl PR {profl_pr:.0%} (== 100%), "
                  f"budgets: {e2e_share:.0%} end-to-end, {step_share:.0%} cheapest step; {secs:.0f} s (< 120 s)")
    assert ok


# ---------------------------------------------------------------------------
# 8. accuracy parity
# ---------------------------------------------------------------------------


def test_criterion_08_accuracy_parity(report, bench):
    acc = {mode: [] for mode in ("profl", "allsmall", "oracle")}
    secs = 0.0
    for seed in SEEDS:
        for mode in acc:
            _, s, t = bench.get(seed, mode)
            acc[mode].append(s["final_accuracy"])
            secs += t
    mean = {k: float(np.mean(v)) for k, v in acc.items()}
    gap = mean["oracle"] - mean["profl"]
    ok = mean["profl"] >= mean["allsmall"] and gap <= 0.03 and secs < 600
    report(8, ok, f"profl {mean['profl']:.4f} >= AllSmall {mean['allsmall']:.4f}; "
                  f"OracleFL {mean['oracle']:.4f}, gap {gap * 100:.2f} pp (<= 3 pp); "
                  f"{secs:.0f} s (< 600 s)")
    assert ok


# ---------------------------------------------------------------------------
# 9. shrinking ablation
# ---------------------------------------------------------------------------


def test_criterion_09_shrinking_ablation(report, bench):
    acc = {v: [] for v in ("profl", "noshrink")}
    secs = 0.0
    for seed in SEEDS:
        for v in acc:
            _, s, t = bench.get(seed, v)
            acc[v].append(s["final_accuracy"])
            secs += t
    with_s, without = float(np.mean(acc["profl"])), float(np.mean(acc["noshrink"]))
    ok = with_s >= without and secs < 900
    per_seed = ", ".join(f"{a:.3f}/{b:.3f}" for a, b in zip(acc["profl"], acc["noshrink"]))
    report(9, ok, f"with shrinking {with_s:.4f} >= without {without:.4f} "
                  f"(per seed {per_seed}); {secs:.0f} s (< 900 s)")
    assert ok


# ---------------------------------------------------------------------------
# 10. distillation exactness
# ---------------------------------------------------------------------------


def test_criterion_10_distillation_exactness(report):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(6):
        rng = np.random.default_rng(seed)
        depth = int(rng.integers(1, 4))
        dims = rng.integers(1, 9, size=depth + 1)
        teacher = [
            DenseLayer(rng.normal(size=(dims[i], dims[i + 1])) / np.sqrt(dims[i]), rng.normal(size=dims[i + 1]), "identity")
            for i in range(depth)
        ]
        w = np.eye(dims[0])
        b = np.zeros(dims[0])
        for layer in teacher:
            b = b @ layer.weights + layer.bias
            w = w @ layer.weights
        x = rng.normal(size=(400, dims[0]))
        task = DistillTask(teacher, init_dense(int(dims[0]), int(dims[-1]), "identity", rng),
                           lr=0.05, batch_size=50, epochs=5)
        res = run_distillation(task, [x[:200], x[200:]], rounds=300, tol=0.0)
        err = max(np.abs(res.student.weights - w).max(), np.abs(res.student.bias - b).max())
        worst = max(worst, err)
    secs = time.perf_counter() - t0
    ok = worst < 1e-5 and secs < 30
    report(10, ok, f"sup-norm {worst:.1e} (< 1e-5) over 6 linear teachers (dims <= 8), {secs:.1f} s (< 30 s)")
    assert ok


# ---------------------------------------------------------------------------
# 11. reproducibility
# ---------------------------------------------------------------------------


def test_criterion_11_reproducibility(report, bench):
    first, _, _ = bench.get(0, "profl")
    again, _, _ = execute(replace(bench.base, seed=0))
    a, b = metrics_csv(first.records).encode(), metrics_csv(again.records).encode()
    ok = a == b
    report(11, ok, f"metrics CSVs {'byte-identical' if ok else 'differ'} ({len(a)} bytes, {len(first.records)} rows)")
    assert ok


# ---------------------------------------------------------------------------
# 12. communication accounting
# ---------------------------------------------------------------------------


def test_criterion_12_communication(report, bench):
    profl, _, _ = bench.get(0, "profl")
    oracle, _, _ = bench.get(0, "oracle")
    worst_profl = max(r.upload_scalars for r in profl.records)
    best_oracle = min(r.upload_scalars for r in oracle.records)
    ok = worst_profl < best_oracle
    report(12, ok, f"largest profl round upload {worst_profl} < smallest OracleFL round upload {best_oracle} scalars")
    assert ok
