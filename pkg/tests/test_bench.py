import numpy as np
import pytest

from xtransfer import bench, lws, synth
from xtransfer.bench import FewShotTask, SourceSpec, TargetSpec
from xtransfer.errors import ConfigError, DegenerateMetricError, EmptySearchResult
from xtransfer.srr import TrainConfig
from xtransfer.zoo import ResourceCost


class _Const:
    n_classes = 5

    def __init__(self, c):
        self.c = c

    def predict(self, x):
        return np.full(len(x), self.c)


class _Lookup:
    def __init__(self, preds, n_classes=5):
        self.preds = np.asarray(preds)
        self.n_classes = n_classes

    def predict(self, x):
        return self.preds[: len(x)]


def test_stream_is_deterministic_and_disjoint(benchmark):
    _, stream = benchmark
    again = bench.TaskStream(0, TargetSpec())
    for shot in (3, 5):
        for fold in range(stream.n_folds):
            a, b = stream.task(shot, fold), again.task(shot, fold)
            assert a.digest() == b.digest()
            assert a.support_x.shape == (5 * shot, 6, 1, 128)
            assert not set(map(tuple, a.support_ids)) & set(map(tuple, a.query_ids))
            # held-out user never appears in the support set
            assert fold not in set(a.support_ids[:, 0].tolist())
    assert stream.task(5, 0).digest() != bench.TaskStream(1, TargetSpec()).task(5, 0).digest()


def test_default_benchmark_shapes(benchmark):
    sources, stream = benchmark
    assert len(sources) == 2
    assert all(s.input_shape.as_tuple() == (3, 32, 32) for s in sources)
    assert all(len(s.source_classes) == 16 for s in sources)
    assert stream.n_folds == 5 and stream.task(3, 0).n_way == 5


def test_spec_validation():
    with pytest.raises(ConfigError):
        bench.validate_specs(SourceSpec(n_classes=5), TargetSpec(n_classes=5))
    with pytest.raises(ConfigError):
        bench.validate_specs(SourceSpec(), TargetSpec(shape=(3, 32, 32)))
    with pytest.raises(ConfigError):
        bench.validate_specs(SourceSpec(), TargetSpec(n_users=1))


def test_task_invariants():
    x = np.zeros((4, 1, 1, 2))
    with pytest.raises(ConfigError):
        FewShotTask(2, 3, x, np.array([0, 0, 1, 1]), x, np.array([0, 1, 0, 1]), {}, 0)
    with pytest.raises(ConfigError):
        FewShotTask(2, 2, x, np.array([0, 0, 1, 1]), x, np.array([0, 0, 0, 0]), {}, 0)
    ids = np.array([(0, i) for i in range(4)])
    with pytest.raises(ConfigError):
        FewShotTask(2, 2, x, np.array([0, 0, 1, 1]), x, np.array([0, 1, 0, 1]), {}, 0, ids, ids)


def test_accuracy_examples():
    y = np.repeat(np.arange(5), 4)
    x = np.zeros((20, 1))
    assert bench.accuracy(_Const(2), x, y) == 0.2
    assert bench.accuracy(_Lookup(y), x, y) == 1.0
    y10 = np.array([0, 1, 2, 3, 4, 0, 1, 2, 3, 4])
    pred = np.array([0, 1, 2, 0, 4, 1, 1, 2, 3, 3])
    # hand count: positions 0,1,2,4,6,7,8 correct -> 7 of 10
    assert bench.accuracy(_Lookup(pred), np.zeros((10, 1)), y10) == 0.7
    with pytest.raises(ConfigError):
        bench.accuracy(_Lookup(y, n_classes=3), x, y)


def test_atr_examples():
    ref = ResourceCost(1000, 200)
    assert bench.atr(0.5, 1000, 200, ref) == 0.5
    assert bench.atr(0.8, 250, 50, ref, 0.5) == pytest.approx(3.2, abs=1e-12)
    assert bench.atr(0.8, 250, 10_000, ref, alpha=1.0) == bench.atr(0.8, 250, 1, ref, alpha=1.0)
    assert bench.atr(0.6, 300, 40, ref) == pytest.approx(bench.atr(0.6, 600, 80, ResourceCost(2000, 400)))
    with pytest.raises(ConfigError):
        bench.atr(0.5, 1, 1, ResourceCost(0, 10))


def test_overfitting_examples():
    assert bench.overfitting(0.7, 0.7) == 0.0
    assert bench.overfitting(0.9, 0.45) == pytest.approx(0.5, abs=1e-12)
    assert bench.overfitting(0.4, 0.9) >= 0
    with pytest.raises(DegenerateMetricError):
        bench.overfitting(0.0, 0.3)


def test_ft_zero_epochs_equals_tl_zero_epochs(benchmark):
    sources, stream = benchmark
    task = stream.task(3, 0)
    cfg = TrainConfig(episodes=0)
    tl = bench.baseline_tl(sources[0], task, cfg, seed=4)
    ft = bench.baseline_ft(sources[0], task, cfg, seed=4)
    assert np.array_equal(tl.head.w, ft.head.w)
    assert np.array_equal(tl.predict(task.query_x), ft.predict(task.query_x))


def test_baselines_leave_source_untouched(benchmark):
    sources, stream = benchmark
    h = sources[0].param_hash()
    bench.baseline_ft(sources[0], stream.task(3, 1), TrainConfig(episodes=5))
    assert sources[0].param_hash() == h


def test_tl_above_chance_on_same_modality(small_source):
    # rebuild the class family the source was trained on and draw fresh samples
    ss = np.random.SeedSequence([3, 7919]).spawn(3)[0]
    fam = synth.SourceFamily.create(np.random.default_rng(ss), 6, (3, 16, 16))
    sx, sy = fam.sample(np.random.default_rng(100), 5)
    qx, qy = fam.sample(np.random.default_rng(101), 10)
    task = FewShotTask(6, 5, sx, sy, qx, qy, {"shape": [3, 16, 16]}, 0)
    tl = bench.baseline_tl(small_source, task)
    assert bench.accuracy(tl, task) > 1 / 6 + 0.1


def test_evaluate_and_summaries(benchmark):
    sources, stream = benchmark
    task = stream.task(3, 2)
    tl = bench.baseline_tl(sources[0], task, TrainConfig(episodes=20))
    ref = sources[0].cost
    row = bench.evaluate("tl", tl, task, tl.cost(task.support_x.shape[1:]), ref, seed=0)
    rep = bench.summarize([row, dict(row, seed=1)], ref)[0]
    assert rep.accuracy == row["accuracy"] and rep.norm_ref["anchor"] == "largest source backbone"
    lines = bench.long_format_csv([row]).splitlines()
    assert lines[0] == "method,shot,seed,metric,value" and len(lines) == 7
    assert bench.reports_csv([rep]).splitlines()[0].startswith("method,shot,accuracy")


@pytest.mark.slow
def test_ft_overfits_more_than_tl(benchmark):
    sources, stream = benchmark
    o_tl, o_ft = [], []
    for seed in range(10):
        task = stream.task(5, seed % 5, rep=seed // 5)
        for model, acc in ((bench.baseline_tl(sources[0], task, seed=seed), o_tl),
                           (bench.baseline_ft(sources[0], task, seed=seed), o_ft)):
            acc.append(bench.overfitting(bench.accuracy(model, task.support_x, task.support_y),
                                         bench.accuracy(model, task)))
    assert np.mean(o_ft) >= np.mean(o_tl)


@pytest.mark.slow
def test_post_finetune_gain(benchmark):
    sources, stream = benchmark
    gains = []
    for seed in range(10):
        task = stream.task(5, seed % 5, rep=seed // 5)
        try:
            r = lws.xtransfer(sources, task.support_x, task.support_y, task.n_way, seed=seed)
        except EmptySearchResult:
            gains.append(0.0)
            continue
        gains.append(bench.accuracy(r.model, task) - bench.accuracy(r.pre_finetune, task))
    assert np.mean(gains) >= 0.02
