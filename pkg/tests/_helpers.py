"""Shared fixtures: finite-difference checker and single-layer selection instances."""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from dcprune.loss import LossHead, capture_baseline
from dcprune.network import LayerNode, NetworkDef
from dcprune.selector import LayerProblem
from dcprune.tensor import BN_EPS, Tape, Tensor, backward

FD_STEP = 1e-5


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def numeric_grad(f, arr: np.ndarray, h: float = FD_STEP, index=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (mutated and restored).

    ``index`` (flat positions) restricts the check to a sample of entries;
    the result then has one value per sampled position.
    """
    flat = arr.reshape(-1)
    positions = range(flat.size) if index is None else index
    g = np.zeros(len(positions))
    for n, i in enumerate(positions):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        g[n] = (up - down) / (2 * h)
    return g.reshape(arr.shape) if index is None else g


def gradcheck(build, tensors: list[Tensor], sample: int | None = None, seed: int = 0) -> float:
    """Largest relative error between tape gradients and central differences.

    ``build()`` must return a scalar Tensor computed from ``tensors``.  With
    ``sample`` only that many randomly chosen entries per tensor are probed.
    """
    for t in tensors:
        t.requires_grad = True
    with Tape() as tape:
        loss = build()
    backward(tape, loss)
    analytic = [t.grad.copy() for t in tensors]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        if sample is None or sample >= t.data.size:
            n = numeric_grad(lambda: build().item(), t.data)
        else:
            idx = rng.choice(t.data.size, size=sample, replace=False)
            n = numeric_grad(lambda: build().item(), t.data, index=idx)
            a = a.reshape(-1)[idx]
        worst = max(worst, rel_error(a, n))
    return worst


# ------------------------------------------------------------------ single-layer instances


def single_layer_net(weight: np.ndarray, num_classes: int, rng, padding: int = 0) -> list[LayerNode]:
    n, c, kh, _ = weight.shape
    return [
        LayerNode("conv", "conv", (-1,), {"weight": Tensor(weight.copy(), requires_grad=True)},
                  input_mask=np.ones(c, dtype=bool), padding=padding),
        LayerNode("gap", "gap", (0,)),
        LayerNode("fc", "fc", (1,), {"theta": Tensor(rng.normal(size=(n, num_classes)), requires_grad=True)}),
    ]


def make_instance(
    seed: int,
    c: int = 6,
    n: int = 4,
    m: int = 3,
    samples: int = 16,
    hw: int = 4,
    kernel: int = 1,
    lam: float = 1.0,
    kind: str = "generic",
) -> LayerProblem:
    """One conv layer with an eval-mode loss head attached to its output.

    ``kind``:
      - ``generic``: Gaussian inputs and weights.
      - ``orthogonal``: 1x1 kernel, channel inputs mutually orthogonal with
        equal norms; one planted channel dominates the reference weights.
      - ``convex``: non-negative inputs and weights and a positive head
        shift, so the head ReLU is the identity on the non-negative orthant
        and the objective there is a convex function of the layer weight.
    """
    rng = np.random.default_rng(seed)
    shape = (samples, c, hw, hw)
    if kind == "orthogonal":
        if kernel != 1:
            raise ValueError("orthogonal instances use 1x1 kernels")
        q, _ = np.linalg.qr(rng.normal(size=(samples * hw * hw, c)))
        x = (q * np.sqrt(samples * hw * hw)).reshape(samples, hw, hw, c).transpose(0, 3, 1, 2)
        ref = rng.normal(size=(n, c, 1, 1))
        ref[:, rng.integers(c)] *= 3.0
    elif kind == "convex":
        x = rng.uniform(0.0, 1.0, size=shape)
        ref = rng.uniform(0.0, 1.0, size=(n, c, kernel, kernel))
    else:
        x = rng.normal(size=shape)
        ref = rng.normal(size=(n, c, kernel, kernel)) / np.sqrt(c * kernel * kernel)
    net = NetworkDef("single-layer", (c, hw, hw), m, single_layer_net(ref, m, rng, kernel // 2))
    cache = capture_baseline(net, x, [0])
    out = cache.get(0)
    if kind == "convex":
        running_mean, beta = np.zeros(n), rng.uniform(0.5, 1.0, size=n)
    else:
        running_mean, beta = out.mean(axis=(0, 2, 3)), rng.normal(0.0, 0.5, size=n)
    head = LossHead(
        attach_layer=0,
        gamma=Tensor(rng.uniform(0.5, 1.5, size=n)),
        beta=Tensor(beta),
        theta=Tensor(rng.normal(size=(n, m))),
        running_mean=running_mean,
        running_var=out.var(axis=(0, 2, 3)) + 0.1,
    )
    labels = rng.integers(0, m, size=samples)
    return LayerProblem(net, 0, x, labels, cache, head, lam=lam, head_bn_mode="eval")


def reference_joint_loss(problem: LayerProblem, w: np.ndarray) -> float:
    """Joint objective of a 1x1-kernel instance, written directly in numpy."""
    x = problem.images
    y = np.einsum("nkhw,jk->njhw", x, w[:, :, 0, 0])
    target = problem.cache.get(0)
    l_m = np.sum((y - target) ** 2) / (2 * y.size)
    if problem.lam == 0:
        return l_m
    h = problem.head
    g, b = h.gamma.data.reshape(-1), h.beta.data.reshape(-1)
    z = g[None, :, None, None] * (y - h.running_mean[None, :, None, None]) \
        / np.sqrt(h.running_var[None, :, None, None] + BN_EPS) + b[None, :, None, None]
    feats = np.maximum(z, 0.0).mean(axis=(2, 3))
    logits = feats @ h.theta.data[:, :, 0, 0]
    ce = np.mean(logsumexp(logits, axis=1) - logits[np.arange(len(logits)), problem.labels])
    return l_m + problem.lam * ce
