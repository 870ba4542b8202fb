"""Layer-graph networks with per-layer input-channel masks.

A :class:`NetworkDef` is an ordered list of :class:`LayerNode` objects.  Each
node names its producers by index (``-1`` is the network input), so plain
chains and residual blocks share one representation.  Channel masks live on
the *input* side of convolutions; deleting a masked channel physically also
removes the producing convolution's filter and the BN entries in between.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

KINDS = ("conv", "bn", "relu", "maxpool", "gap", "fc", "add")
ARCHITECTURES = ("vggnet-cifar", "resnet-56", "resnet-8", "toy-cnn")
FLOP_CONVENTION = (
    "multiply-accumulate operations of convolution and fully-connected layers; "
    "batch normalization, ReLU, pooling and residual additions are not counted"
)

# output-channel-preserving nodes a pruned channel may flow through
_PASS_THROUGH = ("bn", "relu", "maxpool")


@dataclass
class LayerNode:
    kind: str
    name: str
    inputs: tuple[int, ...]
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    input_mask: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    window: int = 0

    @property
    def weight(self) -> Tensor:
        return self.params["weight"]


@dataclass
class NetworkDef:
    arch: str
    input_shape: tuple[int, int, int]
    num_classes: int
    nodes: list[LayerNode]
    # channel gather applied to the raw input once a pruned stem is compacted
    input_select: Optional[np.ndarray] = None
    # provenance carried through checkpoints (epoch, seed, config hash, normalization)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def __len__(self) -> int:
        return len(self.nodes)

    def validate(self) -> None:
        infer_shapes(self)

    def copy(self) -> "NetworkDef":
        return copy.deepcopy(self)

    def index(self, name: str) -> int:
        for i, node in enumerate(self.nodes):
            if node.name == name:
                return i
        raise KeyError(name)

    def conv_layers(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind == "conv"]

    def parameters(self) -> Iterator[tuple[int, str, Tensor]]:
        for i, node in enumerate(self.nodes):
            for key, p in node.params.items():
                yield i, key, p

    @property
    def raw_input_channels(self) -> int:
        return self.input_shape[0]


# ------------------------------------------------------------------ shapes


def infer_shapes(net: NetworkDef) -> list[tuple[int, int, int]]:
    """Per-node output shape (C, H, W); validates topology and compatibility."""
    c, h, w = net.input_shape
    if net.input_select is not None:
        c = len(net.input_select)
    shapes: list[tuple[int, int, int]] = []

    def src(j: int, i: int) -> tuple[int, int, int]:
        if j >= i:
            raise ValueError(f"node {i} ({net.nodes[i].name}) consumes later node {j}")
        return (c, h, w) if j < 0 else shapes[j]

    for i, node in enumerate(net.nodes):
        if node.kind not in KINDS:
            raise ValueError(f"unknown layer kind {node.kind!r}")
        if node.kind == "add":
            if len(node.inputs) != 2:
                raise ValueError(f"residual-add {node.name} needs exactly two producers")
            a, b = src(node.inputs[0], i), src(node.inputs[1], i)
            if a != b:
                raise T.ShapeError(f"residual-add {node.name}: branch shapes {a} and {b} differ")
            shapes.append(a)
            continue
        if len(node.inputs) != 1:
            raise ValueError(f"{node.kind} node {node.name} takes one producer")
        ci, hi, wi = src(node.inputs[0], i)
        if node.kind == "conv":
            n_out, c_w, kh, kw = node.weight.shape
            if c_w != ci:
                raise T.ShapeError(
                    f"conv {node.name}: weight {node.weight.shape} does not match input channels {ci}"
                )
            if node.input_mask is None or node.input_mask.shape != (ci,):
                raise ValueError(f"conv {node.name}: input_mask must have length {ci}")
            ho = T._out_extent(hi, kh, node.stride, node.padding, node.name, strict=False)
            wo = T._out_extent(wi, kw, node.stride, node.padding, node.name, strict=False)
            shapes.append((n_out, ho, wo))
        elif node.kind == "bn":
            if node.params["gamma"].data.size != ci:
                raise T.ShapeError(f"bn {node.name}: {node.params['gamma'].data.size} entries for {ci} channels")
            shapes.append((ci, hi, wi))
        elif node.kind == "relu":
            shapes.append((ci, hi, wi))
        elif node.kind == "maxpool":
            ho = T._out_extent(hi, node.window, node.stride, 0, node.name, strict=False)
            wo = T._out_extent(wi, node.window, node.stride, 0, node.name, strict=False)
            shapes.append((ci, ho, wo))
        elif node.kind == "gap":
            shapes.append((ci, 1, 1))
        elif node.kind == "fc":
            d, m = node.params["theta"].shape[:2]
            if (hi, wi) != (1, 1) or d != ci:
                raise T.ShapeError(f"fc {node.name}: theta {node.params['theta'].shape} vs input {(ci, hi, wi)}")
            shapes.append((m, 1, 1))
    return shapes


def consumers(net: NetworkDef) -> list[list[int]]:
    out: list[list[int]] = [[] for _ in net.nodes]
    for i, node in enumerate(net.nodes):
        for j in node.inputs:
            if j >= 0:
                out[j].append(i)
    return out


def producer_chain(net: NetworkDef, layer: int) -> Optional[tuple[int, list[int]]]:
    """Trace the input of conv ``layer`` back to the conv that produces it.

    Returns ``(producer, chain)`` where ``chain`` lists the BN/ReLU/pool nodes
    in between (``producer == -1`` for the network input), or ``None`` when
    the input channels are shared with another consumer (e.g. a residual
    stream) and so cannot be deleted independently.
    """
    node = net.nodes[layer]
    if node.kind != "conv":
        raise ValueError(f"layer {layer} ({node.name}) is a {node.kind}, not a conv")
    cons = consumers(net)
    chain: list[int] = []
    nxt, cur = layer, node.inputs[0]
    while cur >= 0:
        if cons[cur] != [nxt]:
            return None
        kind = net.nodes[cur].kind
        if kind == "conv":
            return cur, chain
        if kind not in _PASS_THROUGH:
            return None
        chain.append(cur)
        nxt, cur = cur, net.nodes[cur].inputs[0]
    if sum(1 for n in net.nodes if -1 in n.inputs) != 1:
        return None
    return -1, chain


def prunable_layers(net: NetworkDef, include_input: bool = False) -> list[int]:
    """Conv layers whose input channels can be deleted, in depth order.

    The stem (whose input is the image itself) is included only on request.
    """
    out = []
    for i in net.conv_layers():
        pc = producer_chain(net, i)
        if pc is None:
            continue
        if pc[0] == -1 and not include_input:
            continue
        out.append(i)
    return out


# ------------------------------------------------------------------ forward


def run(
    net: NetworkDef,
    x: Tensor,
    *,
    stop: Optional[int] = None,
    mode: str = "eval",
    start: int = 0,
    acts: Optional[dict[int, Tensor]] = None,
    overrides: Optional[dict[int, dict[str, Tensor]]] = None,
) -> dict[int, Tensor]:
    """Execute nodes ``start..stop`` and return all activations by node index.

    ``acts`` supplies cached activations of earlier nodes when resuming;
    ``overrides`` replaces node parameters (used by channel selection, which
    optimizes a detached copy of one layer's weight).  In ``train`` mode BN
    uses batch statistics and updates its running buffers.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    last = len(net.nodes) - 1
    stop = last if stop is None else stop
    if not -1 <= stop <= last:
        raise IndexError(f"layer index {stop} out of range [0, {last}]")
    acts = dict(acts or {})
    overrides = overrides or {}
    if -1 not in acts:
        if x is None:
            raise ValueError("no input given and no cached input activation")
        inp = x
        if net.input_select is not None and x.shape[1] != len(net.input_select):
            inp = T.select_channels(x, net.input_select)
        acts[-1] = inp
    training = mode == "train"

    for i in range(start, stop + 1):
        node = net.nodes[i]
        params = {**node.params, **overrides.get(i, {})}
        ins = [acts[j] for j in node.inputs]
        k = node.kind
        if k == "conv":
            w = params["weight"]
            if i not in overrides and not node.input_mask.all():
                w = T.mul(w, Tensor(node.input_mask.astype(np.float64).reshape(1, -1, 1, 1)))
            out = T.conv2d(ins[0], w, node.stride, node.padding, strict=False)
        elif k == "bn":
            out = T.batch_norm(
                ins[0], params["gamma"], params["beta"],
                node.buffers["running_mean"], node.buffers["running_var"], training=training,
            )
        elif k == "relu":
            out = T.relu(ins[0])
        elif k == "maxpool":
            out = T.max_pool(ins[0], node.window, node.stride, strict=False)
        elif k == "gap":
            out = T.global_avg_pool(ins[0])
        elif k == "fc":
            out = T.fully_connected(ins[0], params["theta"])
        else:  # add
            out = T.add(ins[0], ins[1])
        acts[i] = out
    return acts


def forward(
    net: NetworkDef,
    x: Tensor,
    upto: Optional[int] = None,
    mode: str = "eval",
) -> Tensor:
    """Output of node ``upto`` (default: the final layer).

    Wrap the call in a :class:`~dcprune.tensor.Tape` to record it for
    backpropagation.
    """
    stop = len(net.nodes) - 1 if upto is None else upto
    return run(net, x, stop=stop, mode=mode)[stop]


# ------------------------------------------------------------------ masks


def _check_mask_target(net: NetworkDef, layer: int) -> tuple[int, list[int]]:
    pc = producer_chain(net, layer)
    if pc is None:
        raise ValueError(
            f"input channels of {net.nodes[layer].name} feed a shared (residual) stream and cannot be pruned"
        )
    return pc


def apply_mask(net: NetworkDef, layer: int, keep: Sequence[int]) -> NetworkDef:
    """Return a copy of ``net`` keeping only input channels ``keep`` of ``layer``.

    Weight columns of removed channels are zeroed; the producing filters and
    BN entries become removable (see :func:`output_keep`).
    """
    _check_mask_target(net, layer)
    node = net.nodes[layer]
    c = node.weight.shape[1]
    keep = np.unique(np.asarray(list(keep), dtype=np.intp))
    if keep.size == 0:
        raise ValueError(f"layer {node.name} must keep at least one channel")
    if keep.min() < 0 or keep.max() >= c:
        raise IndexError(f"channel indices for {node.name} must lie in [0, {c})")
    out = net.copy()
    mask = np.zeros(c, dtype=bool)
    mask[keep] = True
    target = out.nodes[layer]
    target.input_mask = mask
    target.weight.data[:, ~mask] = 0.0
    return out


def l20_norm(weight: np.ndarray) -> int:
    """Number of input-channel slices ``W[:, k]`` that are not identically zero."""
    return int(np.count_nonzero(np.any(weight != 0, axis=(0, 2, 3))))


def output_keep(net: NetworkDef) -> list[np.ndarray]:
    """Boolean keep-vector over each node's output channels after mask propagation."""
    shapes = infer_shapes(net)
    keep = [np.ones(s[0], dtype=bool) for s in shapes]
    for i in net.conv_layers():
        mask = net.nodes[i].input_mask
        if mask.all():
            continue
        producer, chain = _check_mask_target(net, i)
        for j in chain + ([producer] if producer >= 0 else []):
            keep[j] = keep[j] & mask
    return keep


def _input_keep(net: NetworkDef, keep: list[np.ndarray], j: int) -> np.ndarray:
    if j >= 0:
        return keep[j]
    c = net.input_shape[0] if net.input_select is None else len(net.input_select)
    return np.ones(c, dtype=bool)


def compact(net: NetworkDef) -> NetworkDef:
    """Physically delete masked channels, their producer filters and BN entries."""
    keep = output_keep(net)
    out = net.copy()
    for i, node in enumerate(out.nodes):
        if node.kind == "add":
            a, b = (_input_keep(net, keep, j) for j in node.inputs)
            if not np.array_equal(a, b):
                raise ValueError(f"inconsistent channel masks across residual branches at {node.name}")
        elif node.kind == "conv":
            in_keep = node.input_mask & _input_keep(net, keep, node.inputs[0])
            w = node.weight.data[keep[i]][:, in_keep]
            node.params["weight"] = Tensor(w.copy(), requires_grad=node.weight.requires_grad)
            node.input_mask = np.ones(int(in_keep.sum()), dtype=bool)
            if node.inputs[0] == -1 and not in_keep.all():
                base = np.arange(net.raw_input_channels) if out.input_select is None else out.input_select
                out.input_select = base[in_keep]
        elif node.kind == "bn":
            k = keep[i]
            for key in ("gamma", "beta"):
                p = node.params[key]
                node.params[key] = Tensor(p.data[k].copy(), requires_grad=p.requires_grad)
            for key in ("running_mean", "running_var"):
                node.buffers[key] = node.buffers[key][k].copy()
        elif node.kind == "fc":
            k = _input_keep(net, keep, node.inputs[0])
            th = node.params["theta"]
            node.params["theta"] = Tensor(th.data[k].copy(), requires_grad=th.requires_grad)
    out.validate()
    return out


# ------------------------------------------------------------------ accounting


def count_params(net: NetworkDef) -> int:
    """Learnable scalars that survive compaction (conv weights, BN gamma/beta, FC theta)."""
    keep = output_keep(net)
    total = 0
    for i, node in enumerate(net.nodes):
        if node.kind == "conv":
            in_keep = node.input_mask & _input_keep(net, keep, node.inputs[0])
            kh, kw = node.weight.shape[2:]
            total += int(keep[i].sum()) * int(in_keep.sum()) * kh * kw
        elif node.kind == "bn":
            total += 2 * int(keep[i].sum())
        elif node.kind == "fc":
            total += int(_input_keep(net, keep, node.inputs[0]).sum()) * node.params["theta"].shape[1]
    return total


def count_flops(net: NetworkDef, input_shape: Optional[tuple[int, int, int]] = None) -> int:
    """Multiply-accumulate count of conv and FC layers (see ``FLOP_CONVENTION``)."""
    if input_shape is not None and tuple(input_shape) != tuple(net.input_shape):
        net = copy.copy(net)
        net.input_shape = tuple(input_shape)
    shapes = infer_shapes(net)
    keep = output_keep(net)
    total = 0
    for i, node in enumerate(net.nodes):
        if node.kind == "conv":
            in_keep = node.input_mask & _input_keep(net, keep, node.inputs[0])
            kh, kw = node.weight.shape[2:]
            _, ho, wo = shapes[i]
            total += int(keep[i].sum()) * int(in_keep.sum()) * kh * kw * ho * wo
        elif node.kind == "fc":
            total += int(_input_keep(net, keep, node.inputs[0]).sum()) * node.params["theta"].shape[1]
    return total


def stored_param_count(net: NetworkDef) -> int:
    """Sum of stored parameter array sizes, ignoring masks."""
    return sum(p.data.size for _, _, p in net.parameters())


# ------------------------------------------------------------------ builders


class _Builder:
    def __init__(self, in_channels: int, rng: np.random.Generator):
        self.nodes: list[LayerNode] = []
        self.rng = rng
        self.channels = {-1: in_channels}

    def _add(self, node: LayerNode, channels: int) -> int:
        self.nodes.append(node)
        idx = len(self.nodes) - 1
        self.channels[idx] = channels
        return idx

    def conv(self, src: int, n_out: int, k: int, stride: int = 1, padding: int = 0, name: str = "") -> int:
        c = self.channels[src]
        std = np.sqrt(2.0 / (c * k * k))
        w = Tensor(self.rng.normal(0.0, std, size=(n_out, c, k, k)), requires_grad=True)
        return self._add(
            LayerNode("conv", name, (src,), {"weight": w}, input_mask=np.ones(c, dtype=bool),
                      stride=stride, padding=padding),
            n_out,
        )

    def bn(self, src: int, name: str = "") -> int:
        c = self.channels[src]
        return self._add(
            LayerNode(
                "bn", name, (src,),
                {"gamma": Tensor(np.ones(c), requires_grad=True), "beta": Tensor(np.zeros(c), requires_grad=True)},
                {"running_mean": np.zeros(c), "running_var": np.ones(c)},
            ),
            c,
        )

    def relu(self, src: int, name: str = "") -> int:
        return self._add(LayerNode("relu", name, (src,)), self.channels[src])

    def maxpool(self, src: int, window: int = 2, stride: int = 2, name: str = "") -> int:
        return self._add(LayerNode("maxpool", name, (src,), window=window, stride=stride), self.channels[src])

    def gap(self, src: int, name: str = "gap") -> int:
        return self._add(LayerNode("gap", name, (src,)), self.channels[src])

    def fc(self, src: int, m: int, name: str = "fc") -> int:
        d = self.channels[src]
        theta = Tensor(self.rng.normal(0.0, np.sqrt(1.0 / d), size=(d, m)), requires_grad=True)
        return self._add(LayerNode("fc", name, (src,), {"theta": theta}), m)

    def add(self, a: int, b: int, name: str = "") -> int:
        return self._add(LayerNode("add", name, (a, b)), self.channels[a])

    def conv_bn_relu(self, src: int, n_out: int, name: str, stride: int = 1) -> int:
        i = self.conv(src, n_out, 3, stride, 1, name=name)
        i = self.bn(i, name=f"{name}.bn")
        return self.relu(i, name=f"{name}.relu")

    def basic_block(self, src: int, n_out: int, stride: int, name: str) -> int:
        i = self.conv(src, n_out, 3, stride, 1, name=f"{name}.conv1")
        i = self.bn(i, name=f"{name}.bn1")
        i = self.relu(i, name=f"{name}.relu1")
        i = self.conv(i, n_out, 3, 1, 1, name=f"{name}.conv2")
        i = self.bn(i, name=f"{name}.bn2")
        short = src
        if stride != 1 or self.channels[src] != n_out:
            short = self.conv(src, n_out, 1, stride, 0, name=f"{name}.shortcut")
            short = self.bn(short, name=f"{name}.shortcut.bn")
        i = self.add(i, short, name=f"{name}.add")
        return self.relu(i, name=f"{name}.relu2")


_VGG_PLAN = [
    ("conv1-1", 64), ("conv1-2", 64), "pool",
    ("conv2-1", 128), ("conv2-2", 128), "pool",
    ("conv3-1", 256), ("conv3-2", 256), ("conv3-3", 256), ("conv3-4", 256), "pool",
    ("conv4-1", 512), ("conv4-2", 512), ("conv4-3", 512), ("conv4-4", 512), "pool",
    ("conv4-5", 512), ("conv4-6", 512), ("conv4-7", 512), ("conv4-8", 512),
]

_DEFAULT_INPUT = {
    "vggnet-cifar": (3, 32, 32),
    "resnet-56": (3, 32, 32),
    "resnet-8": (3, 32, 32),
    "toy-cnn": (3, 8, 8),
}


def build_architecture(
    name: str,
    num_classes: int = 10,
    seed: int = 0,
    input_shape: Optional[tuple[int, int, int]] = None,
) -> NetworkDef:
    """Construct one of the named architectures with Kaiming-normal weights.

    ``vggnet-cifar`` follows the 16-conv channel schedule 64-64 / 128-128 /
    256x4 / 512x8 with 2x2 max pools after conv1-2, conv2-2, conv3-4 and
    conv4-4.  ``resnet-56`` is the 3-stage CIFAR residual net (9 basic
    blocks per stage, widths 16/32/64, projection shortcuts when the shape
    changes); ``resnet-8`` is the same design with one block per stage.
    """
    if name not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {name!r}; expected one of {ARCHITECTURES}")
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    shape = tuple(input_shape or _DEFAULT_INPUT[name])
    b = _Builder(shape[0], np.random.default_rng(seed))

    if name == "toy-cnn":
        i = b.conv_bn_relu(-1, 8, "conv1")
        i = b.conv_bn_relu(i, 16, "conv2")
        i = b.maxpool(i, name="pool1")
        i = b.conv_bn_relu(i, 16, "conv3")
    elif name == "vggnet-cifar":
        i = -1
        for k, item in enumerate(_VGG_PLAN):
            if item == "pool":
                i = b.maxpool(i, name=f"pool{k}")
            else:
                i = b.conv_bn_relu(i, item[1], item[0])
    else:
        blocks = 9 if name == "resnet-56" else 1
        i = b.conv_bn_relu(-1, 16, "stem")
        for s, width in enumerate((16, 32, 64)):
            for k in range(blocks):
                stride = 2 if (s > 0 and k == 0) else 1
                i = b.basic_block(i, width, stride, f"stage{s + 1}.block{k + 1}")
    i = b.gap(i)
    b.fc(i, num_classes)
    return NetworkDef(name, shape, num_classes, b.nodes)
