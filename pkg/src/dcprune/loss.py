"""Reconstruction, discrimination-aware and joint losses."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .network import NetworkDef, infer_shapes, run
from .tensor import Tensor


@dataclass
class LossHead:
    """Auxiliary classifier BN -> ReLU -> global average pool -> FC at ``attach_layer``."""

    attach_layer: int
    gamma: Tensor
    beta: Tensor
    theta: Tensor
    running_mean: np.ndarray = field(repr=False)
    running_var: np.ndarray = field(repr=False)

    @property
    def n_p(self) -> int:
        return self.theta.shape[0]

    @property
    def m(self) -> int:
        return self.theta.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta, self.theta]

    def features(self, activation: Tensor, bn_mode: str = "batch") -> Tensor:
        """Pooled feature vector ``F^p`` of shape [N, n_p, 1, 1].

        ``bn_mode`` is ``"batch"`` (mini-batch statistics, running buffers
        untouched), ``"train"`` (batch statistics and running-buffer update)
        or ``"eval"`` (running statistics; affine in the activation).
        """
        if activation.shape[1] != self.n_p:
            raise T.ShapeError(
                f"head at layer {self.attach_layer} expects {self.n_p} channels, got {activation.shape[1]}"
            )
        if bn_mode == "eval":
            h = T.batch_norm(activation, self.gamma, self.beta, self.running_mean, self.running_var, training=False)
        elif bn_mode == "train":
            h = T.batch_norm(activation, self.gamma, self.beta, self.running_mean, self.running_var, training=True)
        elif bn_mode == "batch":
            h = T.batch_norm(activation, self.gamma, self.beta, training=True)
        else:
            raise ValueError(f"unknown bn_mode {bn_mode!r}")
        return T.global_avg_pool(T.relu(h))

    def logits(self, activation: Tensor, bn_mode: str = "batch") -> Tensor:
        return T.fully_connected(self.features(activation, bn_mode), self.theta)

    def degenerate(self) -> bool:
        """True when every class column of ``theta`` is identical."""
        th = self.theta.data[:, :, 0, 0]
        return bool(np.all(th == th[:, :1]))


def build_head(net: NetworkDef, layer: int, num_classes: int, seed: int = 0) -> LossHead:
    """Attach a fresh loss head to the output of node ``layer``."""
    if not 0 <= layer < len(net.nodes):
        raise IndexError(f"head layer {layer} outside network of {len(net.nodes)} nodes")
    n_p = infer_shapes(net)[layer][0]
    rng = np.random.default_rng(seed)
    return LossHead(
        attach_layer=layer,
        gamma=Tensor(np.ones(n_p), requires_grad=True),
        beta=Tensor(np.zeros(n_p), requires_grad=True),
        theta=Tensor(rng.normal(0.0, np.sqrt(1.0 / n_p), size=(n_p, num_classes)), requires_grad=True),
        running_mean=np.zeros(n_p),
        running_var=np.ones(n_p),
    )


@dataclass
class BaselineCache:
    """Feature maps of the pristine model on a fixed sample subset, keyed by layer."""

    outputs: dict[int, np.ndarray]

    def get(self, layer: int, index: Optional[np.ndarray] = None) -> np.ndarray:
        if layer not in self.outputs:
            raise KeyError(f"no baseline feature maps cached for layer {layer}")
        out = self.outputs[layer]
        return out if index is None else out[index]


def capture_baseline(net: NetworkDef, images: np.ndarray, layers) -> BaselineCache:
    acts = run(net, Tensor(images), stop=max(layers), mode="eval")
    outputs = {}
    for l in layers:
        arr = acts[l].data.copy()
        arr.flags.writeable = False
        outputs[l] = arr
    return BaselineCache(outputs)


def reconstruction_loss(
    pruned_out: Tensor, cache: BaselineCache, layer: int, index: Optional[np.ndarray] = None
) -> Tensor:
    """Half mean squared error against the cached baseline, Q = N*n*h_out*w_out."""
    target = cache.get(layer, index)
    if target.shape != pruned_out.shape:
        raise T.ShapeError(f"layer {layer}: output {pruned_out.shape} vs baseline {target.shape}")
    return T.mean_squared_half(pruned_out, Tensor(target), pruned_out.data.size)


def discrimination_loss(head: LossHead, activation: Tensor, labels, bn_mode: str = "batch") -> Tensor:
    return T.softmax_cross_entropy(head.logits(activation, bn_mode), labels)


def joint_loss(l_m: Optional[Tensor], l_s: Optional[Tensor], lam: float) -> Tensor:
    """``L_M + lam * L_S``; either term may be ``None`` to omit it."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    if l_m is None and l_s is None:
        raise ValueError("joint_loss needs at least one term")
    if l_s is None:
        return l_m
    weighted = T.scale(l_s, lam) if lam != 1.0 else l_s
    return weighted if l_m is None else T.add(l_m, weighted)
