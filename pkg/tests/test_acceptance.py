"""Acceptance criteria 1-11, one test each.

Each test prints a single ``PASS``/``FAIL criterion N: ...`` line (also
collected into the pytest terminal summary).  Run standalone with
``python3 tests/test_acceptance.py``.
"""
import math
import os
import sys
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

import acceptance_log  # noqa: E402
from builders import random_source, repair_instance  # noqa: E402
from oracles import (best_injection_cost_all, central_difference, shortlist_oracle,  # noqa: E402
                     silhouette_oracle, vr_decision)
from xtransfer import bench, lws, srr  # noqa: E402
from xtransfer.anchor import fit_anchor_space, pair_anchors, shortlist  # noqa: E402
from xtransfer.errors import EmptySearchResult, SearchBudgetExhausted  # noqa: E402
from xtransfer.lws import (Candidate, SearchConfig, SearchState, ScriptedOutcome,  # noqa: E402
                           adjusted_overhead, scripted_search, select_from_pool)
from xtransfer.stats import cluster_stats, silhouette  # noqa: E402
from xtransfer.zoo import ResourceCost  # noqa: E402


def _report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    acceptance_log.record(line)
    print(line)
    assert ok, line


# --------------------------------------------------------------------------
# 1. pairing vs exhaustive permutations

def criterion_1():
    rng = np.random.default_rng(101)
    instances = []
    for _ in range(200):
        n_t = int(rng.integers(1, 7))
        n_src = int(rng.integers(n_t + 1, 2 * n_t + 4))
        per = 3
        means = rng.normal(scale=4.0, size=(n_src, 2))
        x = np.vstack([m + rng.normal(scale=0.8, size=(per, 2)) for m in means])
        y = np.repeat(np.arange(n_src), per)
        tc = {t: rng.normal(scale=4.0, size=2) for t in range(n_t)}
        instances.append((cluster_stats(x, y), tc))
    t0 = time.perf_counter()
    results = [pair_anchors(st, tc) for st, tc in instances]
    lib_time = time.perf_counter() - t0
    mismatches = 0
    for (st, tc), p in zip(instances, results):
        cands = shortlist_oracle(st.per_class_s, len(tc))
        assert cands == shortlist(st.per_class_s, len(tc))
        src = np.stack([st.per_class_centroids[c] for c in cands])
        tgt = np.stack([tc[t] for t in sorted(tc)])
        cost = np.linalg.norm(tgt[:, None, :] - src[None, :, :], axis=2)
        mismatches += p.cost != best_injection_cost_all(cost)
    ok = mismatches == 0 and lib_time < 10.0
    return ok, f"pairing exact on {200 - mismatches}/200 instances (<=6 targets), library time {lib_time:.3f}s"


# --------------------------------------------------------------------------
# 2. silhouette vs from-definition oracle

def criterion_2():
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(4, 201))
        k = int(rng.integers(2, min(8, n // 2) + 1))
        dim = int(rng.integers(1, 6))
        y = rng.integers(0, k, size=n)
        y[:2] = [0, 1]
        x = rng.normal(scale=rng.uniform(0.2, 3.0), size=(n, dim)) + rng.normal(scale=2.0, size=(k, dim))[y]
        worst = max(worst, abs(silhouette(x, y)[0] - silhouette_oracle(x, y)))
    return worst <= 1e-9, f"max |silhouette - oracle| = {worst:.2e} over 100 instances (n <= 200)"


# --------------------------------------------------------------------------
# 3. pool selection vs brute-force VR rule

def criterion_3():
    rng = np.random.default_rng(303)
    agree, reasons = 0, {}
    for _ in range(500):
        n_models, span = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        L, n = 9, int(rng.integers(1, 9))
        cands = []
        for i in range(n_models):
            for d in range(span):
                res = float(rng.choice([0.05, 0.1, 0.15, 0.2, 0.3]))
                cands.append(Candidate(i, d, ResourceCost(1, 1), res))
        pool_max = max(c.res for c in cands)
        for c in cands:
            c.R = adjusted_overhead(c.res, pool_max, n, L)
            c.repaired = bool(rng.random() < 0.75)
            c.outcome = ScriptedOutcome(0.0, float(rng.choice([0.1, 0.2, 0.3, 0.4, 0.6])), 1.0)
        state = SearchState(budget=float(rng.choice([0.2, 0.4, 1.0])), L=L,
                            prev_s=float(rng.choice([-1.0, 0.2, 0.35])), spent=float(rng.choice([0.0, 0.1, 0.25])))
        got, reason = select_from_pool(state, cands)
        exp, exp_reason = vr_decision([{"model": c.model, "depth": c.depth, "repaired": c.repaired,
                                        "V": c.value if c.repaired else None, "R": c.R, "res": c.res}
                                       for c in cands], state.spent, state.budget, state.prev_s)
        agree += (None if got is None else got.key) == exp and reason == exp_reason
        reasons[exp_reason] = reasons.get(exp_reason, 0) + 1
    mix = ", ".join(f"{k} {v}" for k, v in sorted(reasons.items()))
    return agree == 500, f"decisions equal brute force on {agree}/500 pools <= 3x3 ({mix})"


# --------------------------------------------------------------------------
# 4. connector gradients vs central differences

def _fd_check(prob, conn, rng, per_class=24, h=1e-5):
    """Relative error per parameter class, or None if the point is not smooth at scale h."""
    _, g = prob.objective(conn)
    f = lambda: prob.objective(conn, with_grad=False)
    errs = {}
    for k in srr.Connector.PARAM_NAMES:
        p = conn.params[k]
        idx = list(np.ndindex(p.shape))
        sel = [idx[i] for i in rng.choice(len(idx), min(per_class, len(idx)), replace=False)]
        num = np.array([central_difference(f, p, ix, h) for ix in sel])
        fine = np.array([central_difference(f, p, ix, h / 10) for ix in sel])
        scale = max(np.linalg.norm(num), 1e-8)
        if np.linalg.norm(num - fine) > 1e-5 * scale:
            return None
        a = np.array([g[k][ix] for ix in sel])
        errs[k] = np.linalg.norm(a - num) / scale
    return errs


def criterion_4():
    worst, redrawn, done, draw = 0.0, 0, 0, 0
    while done < 50:
        src, x, y = random_source(draw)
        prob, conn, _ = repair_instance(src, x, y, draw % src.depth, draw)
        errs = _fd_check(prob, conn, np.random.default_rng(draw))
        draw += 1
        if errs is None:
            redrawn += 1
            continue
        worst = max(worst, max(errs.values()))
        done += 1
    return worst < 1e-3, (f"max relative gradient error {worst:.2e} over 50 instances, all six connector "
                          f"parameter classes (h=1e-5; {redrawn} draw(s) sitting on a ReLU/hinge kink redrawn)")


# --------------------------------------------------------------------------
# 5. closed forms

def criterion_5():
    rc1 = lws.resource_coefficient(1, 9)
    rc9 = lws.resource_coefficient(9, 9)
    rng_new = lws.update_range(0.5, 0.2, 0.3)
    a = bench.atr(0.8, 250, 25, ResourceCost(1000, 100), alpha=0.5)
    ok = (abs(rc1 - (math.exp(1 / 7 - 2) + 1)) <= 1e-9 and abs(rc9 - (math.exp(-5 / 7) + 1)) <= 1e-9
          and rng_new == 0.6 and a == 3.2)
    return ok, f"RC(1;9)={rc1:.9f} RC(9;9)={rc9:.9f} range={rng_new!r} ATR={a!r}"


# --------------------------------------------------------------------------
# 6. rate model recovery

def criterion_6():
    good = 0
    worst_a = worst_b = 0.0
    for seed in range(20):
        rng = np.random.default_rng([606, seed])
        obs = [(n, math.exp(0.3 * n) + 0.1 + rng.normal(0, 0.01)) for n in range(1, 6)]
        m = lws.fit_rate_model(obs)
        worst_a, worst_b = max(worst_a, abs(m.a - 0.3)), max(worst_b, abs(m.b - 0.1))
        good += abs(m.a - 0.3) <= 0.05 and abs(m.b - 0.1) <= 0.05
    return good >= 18, f"{good}/20 seeds recover a, b within 0.05 (max errors a {worst_a:.4f}, b {worst_b:.4f})"


# --------------------------------------------------------------------------
# 7. repair efficacy on the reference benchmark

def criterion_7(benchmark):
    sources, stream = benchmark
    improved, ratio, last = [], [], []
    for seed in range(20):
        task = stream.task(5, seed % 5, rep=seed // 5)
        ev = lws.RepairEvaluator(sources, task.support_x, task.support_y, seed=seed)
        i, d = seed % 2, (seed // 2) % 3
        out = ev.repair((i, d, ev.probe(i, d)))
        improved.append(out.after_s > out.before_s)
        ratio.append(out.best_loss / out.loss_trace[0])
        last.append(out.loss_trace[-1] / out.loss_trace[0])
    frac, mean_ratio = float(np.mean(improved)), float(np.mean(ratio))
    ok = frac >= 0.8 and mean_ratio <= 0.7
    return ok, (f"S-score raised in {sum(improved)}/20 repairs; returned-connector loss / initial loss "
                f"mean {mean_ratio:.3f} (last-episode mean {np.mean(last):.3f}, "
                f"{sum(r <= 0.7 for r in ratio)}/20 individually <= 0.7)")


# --------------------------------------------------------------------------
# 8. channel removal safety

def criterion_8():
    rng = np.random.default_rng(808)
    worst = math.inf
    shrunk = 0
    for _ in range(200):
        c = int(rng.integers(2, 33))
        k = int(rng.integers(2, 6))
        per = int(rng.integers(2, 8))
        y = np.repeat(np.arange(k), per)
        info = int(rng.integers(1, c + 1))
        means = rng.normal(scale=rng.uniform(0.5, 4), size=(k, c)) * (np.arange(c) < info)
        anchors = np.abs(means[y] + rng.normal(scale=rng.uniform(0.1, 2), size=(len(y), c)))
        sp = fit_anchor_space(anchors, y, k=2)
        target = np.abs(means[y] + rng.normal(scale=rng.uniform(0.1, 3), size=(len(y), c)))
        keep, s = srr.channel_removal(sp, target, y)
        full = silhouette(sp.project(target), y)[0]
        worst = min(worst, s - full)
        shrunk += len(keep) < c
    return worst >= -1e-9, (f"min (returned - full) S-score {worst:+.2e} over 200 instances; "
                            f"{shrunk} returned a strict subset")


# --------------------------------------------------------------------------
# 9. end-to-end against the baselines

def criterion_9(benchmark):
    sources, stream = benchmark
    ref = max(sources, key=lambda s: s.cost.flops + s.cost.params)
    norm = ref.cost
    t0 = time.perf_counter()
    acc_x, acc_tl, atr_x, atr_ft, flops = [], [], [], [], []
    for seed in range(5):
        task = stream.task(5, seed)
        r = lws.xtransfer(sources, task.support_x, task.support_y, task.n_way, seed=seed)
        cost = r.model.total_cost
        a = bench.accuracy(r.model, task)
        acc_x.append(a)
        atr_x.append(bench.atr(a, cost.flops, cost.params, norm))
        flops.append(cost.flops / ref.cost.flops)
        tl = bench.baseline_tl(ref, task, seed=seed)
        acc_tl.append(bench.accuracy(tl, task))
        ft = bench.baseline_ft(ref, task, seed=seed)
        fc = ft.cost(task.support_x.shape[1:])
        atr_ft.append(bench.atr(bench.accuracy(ft, task), fc.flops, fc.params, norm))
    gap = 100 * (np.mean(acc_x) - np.mean(acc_tl))
    ratio = np.mean(atr_x) / np.mean(atr_ft)
    fl = float(np.mean(flops))
    ok = gap >= 5 and ratio >= 1.5 and fl <= 0.6
    return ok, (f"accuracy {np.mean(acc_x):.3f} vs TL {np.mean(acc_tl):.3f} (+{gap:.1f} pts); "
                f"ATR {np.mean(atr_x):.2f} vs FT {np.mean(atr_ft):.2f} ({ratio:.1f}x); "
                f"FLOPs {100 * fl:.1f}% of backbone; {time.perf_counter() - t0:.0f}s")


# --------------------------------------------------------------------------
# 10. search safety over randomized scripted searches

def criterion_10():
    rng = np.random.default_rng(1010)
    violations, exhausted, empty = 0, 0, 0
    for k in range(1000):
        depths = [int(d) for d in rng.integers(3, 10, size=int(rng.integers(1, 6)))]
        cfg = SearchConfig(depth_span=int(rng.integers(1, 4)), budget=float(rng.uniform(0.02, 1.5)),
                           pre_search=bool(rng.random() < 0.8))
        seed = int(rng.integers(0, 2**31))
        kw = {"noise": float(rng.uniform(0, 0.2)), "initial": float(rng.uniform(-0.2, 0.3))}

        def once():
            try:
                res, _ = scripted_search(depths, seed, cfg, **kw)
                return res.state, res.trace, None
            except SearchBudgetExhausted as e:
                return e.state, e.trace, "budget"
            except EmptySearchResult as e:
                return None, e.trace, "empty"

        state, trace, err = once()
        exhausted += err == "budget"
        empty += err == "empty"
        if state is not None:
            after = [s.outcome.after_s for s in state.selected]
            violations += state.spent > state.budget + 1e-12
            violations += any(b <= a for a, b in zip(after, after[1:]))
        for rec in trace:
            violations += rec["spent"] is not None and rec["spent"] > cfg.budget + 1e-12
            for key in ("range", "range_after"):
                if rec.get(key) is not None:
                    violations += not 0.2 <= rec[key] <= 1.0
        _, trace2, _ = once()
        dump = lambda t: "".join(lws.json.dumps(r, sort_keys=True) for r in t)
        violations += dump(trace) != dump(trace2)
    return violations == 0, (f"{violations} violations over 1000 searches "
                             f"({exhausted} ended budget-exhausted, {empty} empty)")


# --------------------------------------------------------------------------
# 11. pre-search efficiency

def criterion_11():
    rep_ratio, v_ratio = [], []
    for seed in range(10):
        filt, ev_f = scripted_search([6] * 5, seed, SearchConfig(budget=1.0, pre_search=True))
        full, ev_u = scripted_search([6] * 5, seed, SearchConfig(budget=1.0, pre_search=False))
        rep_ratio.append(ev_f.repair_calls / ev_u.repair_calls)
        v = lambda r: sum(s.outcome.after_s for s in r.selected)
        v_ratio.append(v(filt) / v(full))
    rr, vr = float(np.mean(rep_ratio)), float(np.mean(v_ratio))
    ok = rr <= 0.6 and abs(vr - 1) <= 0.05
    return ok, f"repairs {rr:.3f}x of full search, total V {vr:.3f}x of full search (10 seeds, 5 sources)"


# --------------------------------------------------------------------------

def test_criterion_1():
    _report(1, *criterion_1())


def test_criterion_2():
    _report(2, *criterion_2())


def test_criterion_3():
    _report(3, *criterion_3())


def test_criterion_4():
    _report(4, *criterion_4())


def test_criterion_5():
    _report(5, *criterion_5())


def test_criterion_6():
    _report(6, *criterion_6())


@pytest.mark.slow
def test_criterion_7(benchmark):
    _report(7, *criterion_7(benchmark))


def test_criterion_8():
    _report(8, *criterion_8())


@pytest.mark.slow
def test_criterion_9(benchmark):
    _report(9, *criterion_9(benchmark))


def test_criterion_10():
    _report(10, *criterion_10())


def test_criterion_11():
    _report(11, *criterion_11())


if __name__ == "__main__":
    bm = bench.make_synthetic_benchmark(0)
    failed = 0
    for n in range(1, 12):
        fn = globals()[f"criterion_{n}"]
        ok, detail = fn(bm) if n in (7, 9) else fn()
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}", flush=True)
    sys.exit(1 if failed else 0)
