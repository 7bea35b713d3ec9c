"""Acceptance gate: seven criteria, one test each, with their stated tolerances and time budgets.

Run alone with ``pytest tests/test_acceptance.py -v``; the terminal summary lists
one PASS/FAIL line per criterion.
"""

import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from maskvit.attention import attention, masked_attention_dense, masked_attention_sparse
from maskvit.bench import bench_attention
from maskvit.data import gen_local_task
from maskvit.maskgen import AttentionMask, PatchGrid, build_mask, build_random_mask, make_scheme
from maskvit.metrics import AttentionRecord, CostQuery, als, attn_map_flops, cross_layer_similarity, reduction_report
from maskvit.model import ModelConfig, forward, init_params
from maskvit.numerics import Tensor, cross_entropy, grad_check, mul, parameters_grad_check, sum_all
from maskvit.search import SearchConfig, SearchTrace, decide, probe_trainer, quick_search
from maskvit.train import TrainConfig, train


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds
        self.t0 = time.perf_counter()

    def check(self):
        spent = time.perf_counter() - self.t0
        assert spent < self.seconds, f"took {spent:.1f} s, budget {self.seconds} s"


def pct(frac: Fraction, places: int) -> Fraction:
    return round(frac * 100, places)


@pytest.mark.criterion(1, "cost model exactness")
def test_cost_model_exactness():
    budget = Budget(1.0)
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n, d = int(rng.integers(1, 50_000)), int(rng.integers(1, 2048))
        r, m = int(rng.integers(1, 16)) * 2 - 1, int(rng.integers(1, 32))
        q = CostQuery(n, d, r, m)
        assert attn_map_flops(q, "mha") == 2 * n ** 2 * d
        assert attn_map_flops(q, "w_mha") == 2 * m ** 2 * n * d
        assert attn_map_flops(q, "m_mha") == 2 * r ** 2 * n * d
        assert Fraction(attn_map_flops(q, "m_mha"), attn_map_flops(q, "mha")) == Fraction(r * r, n)
    q = CostQuery(3136, 96, 3)
    ratio = Fraction(attn_map_flops(q, "m_mha"), attn_map_flops(q, "mha"))
    assert ratio == Fraction(9, 3136)
    assert pct(ratio, 3) == Fraction(287, 1000)
    s1, s2 = reduction_report([CostQuery(3136, 96, 3), CostQuery(784, 192, 3)])
    assert pct(s1["attn_map_reduction"], 3) == Fraction(99713, 1000)
    assert pct(s2["attn_map_reduction"], 3) == Fraction(98852, 1000)
    budget.check()


@pytest.mark.criterion(2, "kernel equivalence suite")
def test_kernel_equivalence():
    budget = Budget(60.0)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(200):
        while True:
            rows, cols = int(rng.integers(1, 34)), int(rng.integers(1, 34))
            if rows * cols <= 1089:
                break
        r = int(rng.choice([3, 5]))
        d = int(rng.integers(2, 33))
        mask = build_mask(PatchGrid(rows, cols), "hard", r)
        t = mask.size
        q, k, v = (rng.normal(scale=1.5, size=(t, d)) for _ in range(3))
        dense = masked_attention_dense(q, k, v, mask).values.data
        sparse = masked_attention_sparse(q, k, v, mask).values.data
        worst = max(worst, float(np.abs(sparse - dense).max()))
    assert worst < 1e-9, worst

    for seed in range(20):
        g = PatchGrid(int(rng.integers(1, 12)), int(rng.integers(1, 12)))
        t = g.n + 1
        q, k, v = (np.random.default_rng(seed).normal(size=(t, 8)) for _ in range(3))
        plain = attention(q, k, v).values.data
        ones = masked_attention_dense(q, k, v, np.ones((t, t))).values.data
        assert np.array_equal(ones, plain)
        hard = masked_attention_dense(q, k, v, build_mask(g, "hard", 3)).values.data
        up = masked_attention_dense(q, k, v, build_mask(g, "soft", 3, theta=40.0)).values.data
        down = masked_attention_dense(q, k, v, build_mask(g, "soft", 3, theta=-40.0)).values.data
        assert np.abs(up - plain).max() < 1e-9
        assert np.abs(down - hard).max() < 1e-9
    budget.check()


@pytest.mark.criterion(3, "gradient suite")
def test_gradient_suite():
    budget = Budget(300.0)
    worst = {"q": 0.0, "k": 0.0, "v": 0.0, "theta": 0.0, "model": 0.0}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        g = PatchGrid(int(rng.integers(2, 6)), int(rng.integers(2, 6)))
        t, d = g.n + 1, int(rng.integers(2, 6))
        mask = build_mask(g, "hard", 3)
        inputs = [rng.normal(size=(t, d)) for _ in range(3)]
        w = Tensor(rng.normal(size=(t, d)))
        for i, name in enumerate("qkv"):
            def readout(x, i=i):
                args = inputs[:i] + [x] + inputs[i + 1:]
                return sum_all(mul(masked_attention_dense(*args, mask).values, w))
            worst[name] = max(worst[name], grad_check(readout, inputs[i]))

        soft = build_mask(g, "soft", 3)

        def theta_readout(th):
            m = AttentionMask("soft", 3, g, soft.neighbor_lists, th)
            return sum_all(mul(masked_attention_dense(*inputs, m).values, w))
        worst["theta"] = max(worst["theta"], grad_check(theta_readout, np.array(rng.normal())))

        cfg = ModelConfig(layers=4, heads=2, dim=32, grid=PatchGrid(3, 3), patch_px=2,
                          scheme=make_scheme("custom", 4, 2, layout=[["hard", "soft"], ["none", "hard"],
                                                                     ["soft", "none"], ["none", "none"]]))
        params = init_params(cfg, seed)
        for p in params.tensors.values():
            p.data = rng.normal(scale=0.2, size=p.shape)
        imgs, labels = rng.random((2,) + cfg.image_shape), rng.integers(0, 2, 2)
        names = params.names()
        coords = []
        for _ in range(10):
            j = int(rng.integers(len(names)))
            coords.append((j, tuple(int(rng.integers(s)) for s in params[names[j]].shape)))
        worst["model"] = max(worst["model"], parameters_grad_check(
            lambda: cross_entropy(forward(imgs, params, cfg), labels), [params[n] for n in names], coords))
    assert all(v < 1e-4 for v in worst.values()), worst
    budget.check()


@pytest.mark.criterion(4, "complexity witness")
def test_complexity_witness():
    budget = Budget(120.0)
    sparse = [bench_attention(n, 32, 3, "sparse", repeats=3).multiplies for n in (256, 1024)]
    dense = [bench_attention(n, 32, 3, "masked_dense", repeats=3).multiplies for n in (256, 1024)]
    assert 3.8 <= sparse[1] / sparse[0] <= 4.6, sparse
    assert 14.5 <= dense[1] / dense[0] <= 17.5, dense
    t_sparse = bench_attention(3136, 96, 3, "sparse", repeats=5).median_s
    t_dense = bench_attention(3136, 96, 3, "masked_dense", repeats=5).median_s
    assert t_sparse <= 0.25 * t_dense, (t_sparse, t_dense)
    budget.check()


def _fit_until(config, train_ds, val_ds, target, tcfg):
    best = []

    def watch(row):
        best.append(row["val_acc"])
        return row["val_acc"] >= target

    train(config, train_ds, val_ds, tcfg, on_epoch=watch)
    return best


@pytest.mark.criterion(5, "desk-scale training smoke")
def test_training_smoke():
    budget = Budget(900.0)
    grid = PatchGrid(8, 8)
    train_ds, val_ds = gen_local_task(grid, 4, 2500, seed=0).split(2000)
    base = ModelConfig(layers=4, heads=4, dim=64, grid=grid, patch_px=4)
    tcfg = TrainConfig(epochs=20, seed=0, probe_samples=64)
    sch1 = _fit_until(replace(base, scheme=make_scheme("sch1", 4, 4)), train_ds, val_ds, 0.90, tcfg)
    none = _fit_until(base, train_ds, val_ds, 0.80, tcfg)
    print(f"sch1 val acc per epoch: {sch1}")
    print(f"none val acc per epoch: {none}")
    assert len(sch1) <= 20 and max(sch1) >= 0.90
    assert len(none) <= 20 and max(none) >= 0.80
    budget.check()


def _straight_line(t1, t2, high, low):
    out = []
    for l in range(len(t1)):
        if t1[l][0] > high:
            out.append(["none" if t2[l][h] < low else "hard" for h in range(len(t2[l]))])
        elif t1[l][0] < low:
            out.append(["none"] * len(t1[l]))
        else:
            out.append(["hard"] + ["none"] * (len(t1[l]) - 1))
    return out


class _Table:
    def __init__(self, table):
        self.table = table

    def als_table(self, r=3):
        return self.table


@pytest.mark.criterion(6, "search procedure fidelity")
def test_search_fidelity():
    budget = Budget(1200.0)
    rng = np.random.default_rng(99)
    cfg = SearchConfig(0.65, 0.35)
    levels = np.round(np.arange(21) * 0.05, 2)  # hits both thresholds exactly
    for i in range(10_000):
        L, H = int(rng.integers(1, 9)), int(rng.integers(1, 7))
        draw = (lambda: rng.choice(levels, size=(L, H))) if i % 2 else (lambda: rng.random((L, H)))
        t1, t2 = draw(), draw()
        calls = iter([t1, t2, t2])
        scheme, trace = quick_search(lambda s: (None, _Table(next(calls))), cfg, L, H)
        expect = _straight_line(t1, t2, 0.65, 0.35)
        assert scheme.kinds() == expect
        assert decide(t1, t2, cfg, H).kinds() == expect
        assert trace.trainer_calls <= 3

    grid = PatchGrid(8, 8)
    train_ds, probe_ds = gen_local_task(grid, 4, 1256, seed=5).split(1000)
    base = ModelConfig(layers=4, heads=4, dim=64, grid=grid, patch_px=4)
    tcfg = TrainConfig(epochs=3, seed=5, probe_samples=32)
    calls = []
    trainer = probe_trainer(base, train_ds, probe_ds, tcfg, 256)
    scheme, trace = quick_search(lambda s: calls.append(s) or trainer(s), SearchConfig(probe_epochs=3), 4, 4)
    assert len(calls) == trace.trainer_calls <= 3
    replayed = SearchTrace.from_dict(trace.to_dict()).replay()
    assert replayed == scheme
    print(f"toy search: {trace.trainer_calls} trainer calls, scheme {scheme.kinds()}")
    budget.check()


@pytest.mark.criterion(7, "metric identities")
def test_metric_identities():
    budget = Budget(60.0)
    rng = np.random.default_rng(3)
    for _ in range(1000):
        g = PatchGrid(int(rng.integers(1, 10)), int(rng.integers(1, 10)))
        mask = build_mask(g, "hard", int(rng.choice([1, 3, 5])))
        x = rng.random((g.n + 1, g.n + 1)) ** int(rng.integers(1, 8))
        amap = x / x.sum(axis=1, keepdims=True)
        assert 0.0 <= als(amap, mask) <= 1.0
    for _ in range(50):
        L, t = int(rng.integers(1, 7)), int(rng.integers(2, 20))
        x = rng.random((L, 2, t, t))
        rec = AttentionRecord(x / x.sum(axis=-1, keepdims=True), PatchGrid(1, t - 1))
        for h in range(2):
            sim = cross_layer_similarity(rec, h)
            assert np.array_equal(sim, sim.T)
            assert np.array_equal(np.diag(sim), np.ones(L))
    for seed in range(20):
        m = build_random_mask(PatchGrid(14, 14), 9, seed)
        assert m.support_counts().tolist() == [9] * 196
        assert np.array_equal(m.dense()[1:, 1:].sum(axis=1), np.full(196, 9.0))
    budget.check()
