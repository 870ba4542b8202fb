import numpy as np
import pytest
from scipy.stats import chisquare

from dcprune.data import Dataset, make_synthetic
from dcprune.loss import build_head
from dcprune.network import build_architecture, compact, count_params, forward, l20_norm, prunable_layers
from dcprune.pipeline import (
    PruneConfig,
    evaluate,
    finetune_stage,
    net_params,
    plan_stages,
    run_dcp,
    select_random,
    select_weight_sum,
    train,
)
from dcprune.tensor import Tensor


def _blobs(n=200, seed=0, split="train"):
    return make_synthetic("gaussian-blobs", n, 3, (3, 8, 8), seed=seed, split=split, signal=1.0)


def test_plan_stages_even_split():
    net = build_architecture("vggnet-cifar", 10)
    layers = list(range(16))
    plan = plan_stages(net, 2, layers)
    assert [len(s) for s in plan.stages] == [8, 8, 0]
    assert plan.boundaries == [7, 15, len(net.nodes) - 1]
    assert plan.heads == 2


def test_plan_stages_resnet56():
    net = build_architecture("resnet-56", 10)
    layers = prunable_layers(net)
    plan = plan_stages(net, 3, layers)
    sizes = [len(s) for s in plan.stages[:-1]]
    assert sum(sizes) == len(layers) == 27
    assert max(sizes) - min(sizes) <= 1
    assert [l for s in plan.stages for l in s] == layers


def test_plan_stages_rejects_too_many_heads():
    net = build_architecture("toy-cnn", 3)
    with pytest.raises(ValueError):
        plan_stages(net, 5, prunable_layers(net))
    with pytest.raises(ValueError):
        plan_stages(net, 0)


def test_prune_config_validation():
    for bad in ({"lam": -1}, {"keep_ratio": 0}, {"strategy": "magic"}, {"heads": 0}, {"finetune_lr": 0}):
        with pytest.raises(ValueError):
            PruneConfig(**bad)


def test_finetune_decreases_both_losses():
    ds = _blobs(300)
    net = build_architecture("toy-cnn", 3, seed=0)
    head = build_head(net, net.index("conv2.relu"), 3, 0)
    hist = finetune_stage(net, head, ds, epochs=4, lr=0.02, batch_size=32)
    assert hist[-1][0] < hist[0][0] and hist[-1][1] < hist[0][1]


def test_finetune_zero_epochs_is_noop():
    ds = _blobs(50)
    net = build_architecture("toy-cnn", 3, seed=1)
    before = [p.data.copy() for p in net_params(net)]
    finetune_stage(net, None, ds, epochs=0, lr=0.1)
    for a, p in zip(before, net_params(net)):
        np.testing.assert_array_equal(a, p.data)


def test_select_random_uniform():
    counts = np.zeros(10)
    for s in range(2000):
        counts[select_random(10, 3, seed=s)] += 1
    assert chisquare(counts).pvalue > 0.01
    assert select_random(10, 3, 4) == select_random(10, 3, 4)
    with pytest.raises(ValueError):
        select_random(4, 5)


def test_select_weight_sum_oracle():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(4, 9, 3, 3))
    score = [np.abs(w[:, k]).sum() for k in range(9)]
    expected = sorted(sorted(range(9), key=lambda k: -score[k])[:4])
    assert select_weight_sum(w, 4) == expected
    assert select_weight_sum(7.5 * w, 4) == expected


def test_evaluate_perfect_and_top5():
    net = build_architecture("toy-cnn", 6, seed=0)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(30, 3, 8, 8))
    pred = forward(net, Tensor(x)).data[:, :, 0, 0].argmax(axis=1)
    perfect = evaluate(net, Dataset(x, pred, 6, "test"))
    assert perfect["top1_error"] == 0.0 and perfect["top5_error"] == 0.0
    noisy = evaluate(net, Dataset(x, rng.integers(0, 6, 30), 6, "test"))
    assert noisy["top5_error"] <= noisy["top1_error"]
    with pytest.raises(ValueError):
        evaluate(net, Dataset(x, pred % 3, 3, "test"))


@pytest.fixture(scope="module")
def trained():
    ds, te = _blobs(240), _blobs(120, split="test")
    net = build_architecture("toy-cnn", 3, seed=0)
    train(net, ds, 2, lr=0.05, batch_size=32)
    return net, ds, te


def _cfg(**kw):
    base = dict(keep_ratio=0.5, subset_size=64, inner_steps=3, selection_batch=32,
                stage_epochs=1, final_epochs=1, batch_size=32, finetune_lr=0.02, seed=3)
    base.update(kw)
    return PruneConfig(**base)


def test_keep_ratio_one_removes_nothing(trained):
    net, ds, te = trained
    res = run_dcp(net, ds, _cfg(keep_ratio=1.0), te)
    assert res.metrics["params_after"] == res.metrics["params_before"]
    assert all(r.kept == r.channels for r in res.layers)


def test_run_dcp_masks_and_counts(trained):
    net, ds, te = trained
    res = run_dcp(net, ds, _cfg(), te)
    for r in res.layers:
        assert r.kept == -(-r.channels // 2)
        assert l20_norm(res.net.nodes[r.layer].weight.data) <= r.kept
    small = compact(res.net)
    assert count_params(small) == res.metrics["params_after"] < res.metrics["params_before"]
    assert set(res.metrics) >= {"error_before", "error_after", "error_gap", "flops_after"}


@pytest.mark.parametrize("strategy", ["random", "weight-sum", "dcp-lambda0", "dcp-ls-only"])
def test_strategies_run(trained, strategy):
    net, ds, te = trained
    res = run_dcp(net, ds, _cfg(strategy=strategy, final_epochs=0), te)
    assert all(r.kept == -(-r.channels // 2) for r in res.layers)


def test_run_dcp_deterministic(trained):
    net, ds, _ = trained
    a = run_dcp(net, ds, _cfg())
    b = run_dcp(net, ds, _cfg())
    assert [r.selected for r in a.layers] == [r.selected for r in b.layers]
    for p, q in zip(net_params(a.net), net_params(b.net)):
        assert p.data.tobytes() == q.data.tobytes()


def test_tolerance_mode_runs(trained):
    net, ds, _ = trained
    res = run_dcp(net, ds, _cfg(stop_mode="tolerance", epsilon=0.05, final_epochs=0))
    assert all(1 <= r.kept <= r.channels for r in res.layers)
