import numpy as np
import pytest

from _helpers import gradcheck, make_instance
from dcprune.loss import (
    BaselineCache,
    build_head,
    capture_baseline,
    discrimination_loss,
    joint_loss,
    reconstruction_loss,
)
from dcprune.network import build_architecture, forward
from dcprune.selector import LayerProblem
from dcprune.tensor import ShapeError, Tensor


def test_reconstruction_loss_normalizer():
    target = np.arange(24, dtype=float).reshape(2, 3, 2, 2)
    cache = BaselineCache({5: target})
    out = Tensor(target + 1.0)
    # every entry off by one: sum = 24, Q = 24 -> 0.5
    assert reconstruction_loss(out, cache, 5).item() == pytest.approx(0.5)
    assert reconstruction_loss(Tensor(target), cache, 5).item() == 0.0
    with pytest.raises(KeyError):
        reconstruction_loss(out, cache, 6)
    with pytest.raises(ShapeError):
        reconstruction_loss(Tensor(np.zeros((2, 3, 1, 1))), cache, 5)


def test_baseline_cache_is_read_only():
    net = build_architecture("toy-cnn", 3)
    x = np.random.default_rng(0).normal(size=(4, 3, 8, 8))
    cache = capture_baseline(net, x, [0, 3])
    np.testing.assert_array_equal(cache.get(3), forward(net, Tensor(x), upto=3).data)
    with pytest.raises(ValueError):
        cache.get(0)[0, 0, 0, 0] = 1.0


def test_discrimination_loss_uniform_head_is_log_m():
    net = build_architecture("toy-cnn", 5)
    head = build_head(net, 2, 5)
    head.theta.data[...] = 0.0
    assert head.degenerate()
    act = Tensor(np.random.default_rng(0).normal(size=(7, 8, 8, 8)))
    loss = discrimination_loss(head, act, np.arange(7) % 5)
    assert loss.item() == pytest.approx(np.log(5), rel=1e-12)


def test_head_rejects_wrong_width():
    net = build_architecture("toy-cnn", 5)
    head = build_head(net, 2, 5)
    with pytest.raises(ShapeError):
        head.features(Tensor(np.zeros((2, 4, 8, 8))))


def test_head_bn_modes():
    net = build_architecture("toy-cnn", 3)
    head = build_head(net, 2, 3)
    act = Tensor(np.random.default_rng(1).normal(2.0, 1.0, size=(6, 8, 8, 8)))
    rm = head.running_mean.copy()
    head.features(act, "batch")
    np.testing.assert_array_equal(head.running_mean, rm)
    head.features(act, "train")
    assert not np.array_equal(head.running_mean, rm)
    with pytest.raises(ValueError):
        head.features(act, "bogus")


def test_joint_loss_combination():
    a, b = Tensor(np.array(2.0)), Tensor(np.array(3.0))
    assert joint_loss(a, b, 0.5).item() == pytest.approx(3.5)
    assert joint_loss(a, None, 1.0).item() == 2.0
    assert joint_loss(None, b, 1.0).item() == 3.0
    with pytest.raises(ValueError):
        joint_loss(a, b, -1.0)
    with pytest.raises(ValueError):
        joint_loss(None, None, 1.0)


def test_lambda_zero_drops_discrimination_term():
    p0 = make_instance(0, lam=0.0)
    p1 = make_instance(0, lam=1.0)
    w = np.random.default_rng(0).normal(size=p0.net.nodes[0].weight.shape)
    l_m = reconstruction_loss(forward(_with_weight(p0, w), Tensor(p0.images), upto=0),
                              p0.cache, 0).item()
    assert p0.value(w) == pytest.approx(l_m, rel=1e-12)
    assert p1.value(w) > p0.value(w)


def _with_weight(problem, w):
    net = problem.net.copy()
    net.nodes[0].weight.data[...] = w
    return net


@pytest.mark.parametrize("seed", range(20))
def test_joint_loss_gradient_single_layer(seed):
    problem = make_instance(seed, kernel=3, kind="generic")
    w = Tensor(np.random.default_rng(seed).normal(size=problem.net.nodes[0].weight.shape))
    assert gradcheck(lambda: problem.objective(w), [w]) < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_joint_loss_gradient_through_network(seed):
    """Composed objective on a real stage: conv -> BN -> ReLU -> conv -> head."""
    rng = np.random.default_rng(seed)
    net = build_architecture("toy-cnn", 3, seed=seed, input_shape=(3, 6, 6))
    layer = net.index("conv2")
    x = rng.normal(size=(5, 3, 6, 6))
    cache = capture_baseline(net, x, [layer])
    head = build_head(net, net.index("conv3.relu"), 3, seed)
    for p in head.parameters():
        p.data[...] += rng.normal(0, 0.1, size=p.shape)
    problem = LayerProblem(net, layer, x, rng.integers(0, 3, size=5), cache, head, lam=0.7)
    w = Tensor(rng.normal(size=net.nodes[layer].weight.shape))
    assert gradcheck(lambda: problem.objective(w), [w], sample=40, seed=seed) < 1e-6
    w.requires_grad = False
    assert gradcheck(lambda: problem.objective(w), head.parameters(), sample=20, seed=seed) < 1e-6
