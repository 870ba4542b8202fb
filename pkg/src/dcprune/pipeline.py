"""Stage-wise discrimination-aware pruning, fine-tuning and baseline selectors."""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .data import Dataset, augment_batch, sample_subset
from .loss import LossHead, build_head, capture_baseline, discrimination_loss
from .network import (
    NetworkDef,
    apply_mask,
    count_flops,
    count_params,
    l20_norm,
    prunable_layers,
    run,
)
from .selector import (
    DivergenceError,
    LayerProblem,
    StopRule,
    channel_budget,
    optimize_active,
    select_channels,
)
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

STRATEGIES = ("dcp", "random", "weight-sum", "dcp-lambda0", "dcp-ls-only")


def sub_rng(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for one named purpose (init, subset, selection, shuffle...)."""
    return np.random.default_rng([seed, zlib.crc32(name.encode()), *extra])


def sub_seed(seed: int, name: str, *extra: int) -> int:
    return int(sub_rng(seed, name, *extra).integers(2**31))


@dataclass
class PruneConfig:
    lam: float = 1.0
    keep_ratio: float = 0.7
    # per-layer kept-channel counts keyed by node index; overrides keep_ratio
    budgets: Optional[dict[int, int]] = None
    stop_mode: str = "budget"
    epsilon: float = 0.01
    heads: Optional[int] = None
    strategy: str = "dcp"
    selection_lr: float = 0.01
    inner_steps: int = 20
    selection_batch: int = 64
    subset_size: int = 1000
    head_bn_mode: str = "batch"
    prune_input: bool = False
    finetune_lr: float = 0.01
    finetune_decay: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    stage_epochs: int = 1
    final_epochs: int = 2
    batch_size: int = 64
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0 < self.keep_ratio <= 1:
            raise ValueError("keep_ratio must lie in (0, 1]")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.heads is not None and self.heads < 1:
            raise ValueError("number of heads P must be >= 1")
        for name in ("selection_lr", "finetune_lr", "finetune_decay", "epsilon"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


# ------------------------------------------------------------------ stages


@dataclass
class StagePlan:
    """Loss positions ``boundaries`` (node indices, last = final node) and the
    prunable layers handled in each stage."""

    boundaries: list[int]
    stages: list[list[int]]

    @property
    def heads(self) -> int:
        return len(self.boundaries) - 1


def default_heads(net: NetworkDef, layers: list[int]) -> int:
    p = 2 if len(net.conv_layers()) <= 20 else 3
    return max(1, min(p, len(layers) - 1))


def plan_stages(net: NetworkDef, heads: int, layers: Optional[list[int]] = None) -> StagePlan:
    """Split prunable ``layers`` into ``heads`` contiguous stages of near-equal size.

    Stage p's loss sits on its last layer; stage P+1 belongs to the final
    loss and receives whatever layers follow the last auxiliary head.
    """
    layers = prunable_layers(net) if layers is None else sorted(layers)
    if heads < 1:
        raise ValueError("number of heads P must be >= 1")
    if heads >= len(layers) and not (heads == 1 and len(layers) == 1):
        raise ValueError(f"P={heads} heads for only {len(layers)} prunable layers")
    groups = [list(map(int, g)) for g in np.array_split(np.array(layers), heads)]
    boundaries = [g[-1] for g in groups] + [len(net.nodes) - 1]
    return StagePlan(boundaries, groups + [[]])


# ------------------------------------------------------------------ training


class SGD:
    """Momentum SGD with L2 weight decay over a list of tensors."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, grads: Optional[list[np.ndarray]] = None) -> None:
        grads = grads if grads is not None else [p.grad for p in self.params]
        for p, v, g in zip(self.params, self.velocity, grads):
            if g is None:
                continue
            d = g + self.weight_decay * p.data if self.weight_decay else g
            v *= self.momentum
            v += d
            p.data -= self.lr * v


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        idx = order[s:s + batch_size]
        if idx.size >= 2:
            yield idx


def net_params(net: NetworkDef) -> list[Tensor]:
    return [p for _, _, p in net.parameters()]


def train(
    net: NetworkDef,
    ds: Dataset,
    epochs: int,
    lr: float = 0.05,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    batch_size: int = 64,
    seed: int = 0,
    augment: bool = False,
    start_epoch: int = 0,
) -> list[float]:
    """Plain cross-entropy training of ``net`` in place; returns mean loss per epoch.

    The learning rate follows a cosine schedule over ``epochs``; shuffling of
    epoch ``e`` depends only on ``(seed, e)`` so resumed runs replay exactly.
    """
    params = net_params(net)
    opt = SGD(params, lr, momentum, weight_decay)
    history = []
    for epoch in range(start_epoch, epochs):
        opt.lr = lr * 0.5 * (1 + np.cos(np.pi * epoch / epochs))
        rng = sub_rng(seed, "shuffle", epoch)
        losses = []
        for idx in _batches(len(ds), batch_size, rng):
            x = ds.images[idx]
            if augment:
                x = augment_batch(x, rng)
            with Tape() as tape:
                logits = run(net, Tensor(x), mode="train")[len(net.nodes) - 1]
                loss = T.softmax_cross_entropy(logits, ds.labels[idx])
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            tape.backward(loss)
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        net.meta["epoch"] = epoch + 1
        log.info("epoch %d loss %.4f", epoch + 1, history[-1])
    return history


def finetune_stage(
    net: NetworkDef,
    head: Optional[LossHead],
    ds: Dataset,
    epochs: int,
    lr: float,
    decay: float = 1.0,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    batch_size: int = 64,
    seed: int = 0,
    augment: bool = False,
) -> list[tuple[float, float]]:
    """Alternating fine-tune with the auxiliary loss and the final loss.

    Per mini-batch: one forward pass yields both losses; the network and
    head take a step on the auxiliary-loss gradient, then the network takes
    a step on the final-loss gradient; the learning rate is then multiplied
    by ``decay``.  With ``head=None`` only the final loss is used.  Returns
    the mean (auxiliary, final) loss per epoch.
    """
    params = net_params(net)
    head_params = head.parameters() if head is not None else []
    opt = SGD(params + head_params, lr, momentum, weight_decay)
    last = len(net.nodes) - 1
    history = []
    for epoch in range(epochs):
        rng = sub_rng(seed, "shuffle", epoch)
        rec = []
        for idx in _batches(len(ds), batch_size, rng):
            x = ds.images[idx]
            if augment:
                x = augment_batch(x, rng)
            y = ds.labels[idx]
            with Tape() as tape:
                acts = run(net, Tensor(x), mode="train")
                l_f = T.softmax_cross_entropy(acts[last], y)
                l_s = discrimination_loss(head, acts[head.attach_layer], y, "train") if head else None
            losses = [l_f.item()] + ([l_s.item()] if l_s is not None else [])
            if not np.all(np.isfinite(losses)):
                raise FloatingPointError(f"non-finite fine-tuning loss at epoch {epoch}")
            if l_s is not None:
                tape.backward(l_s)
                g_s = [p.grad for p in params + head_params]
                tape.backward(l_f)
                g_f = [p.grad for p in params] + [None] * len(head_params)
                opt.step(g_s)
                opt.step(g_f)
            else:
                tape.backward(l_f)
                opt.step([p.grad for p in params])
            opt.lr *= decay
            rec.append((losses[1] if l_s is not None else np.nan, losses[0]))
        history.append(tuple(float(v) for v in np.mean(rec, axis=0)))
    return history


def evaluate(net: NetworkDef, ds: Dataset, batch_size: int = 500) -> dict[str, float]:
    """Top-1 (and top-5 when there are at least 5 classes) error in eval mode."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if ds.num_classes != net.num_classes:
        raise ValueError(f"dataset has {ds.num_classes} classes, model has {net.num_classes}")
    wrong1 = wrong5 = 0
    for s in range(0, len(ds), batch_size):
        logits = run(net, Tensor(ds.images[s:s + batch_size]), mode="eval")[len(net.nodes) - 1]
        z = logits.data[:, :, 0, 0]
        y = ds.labels[s:s + batch_size]
        wrong1 += int(np.count_nonzero(z.argmax(axis=1) != y))
        if net.num_classes >= 5:
            top5 = np.argsort(-z, axis=1, kind="stable")[:, :5]
            wrong5 += int(np.count_nonzero(~np.any(top5 == y[:, None], axis=1)))
    out = {"top1_error": wrong1 / len(ds)}
    if net.num_classes >= 5:
        out["top5_error"] = wrong5 / len(ds)
    return out


# ------------------------------------------------------------------ baseline selectors


def select_random(c: int, budget: int, seed: int = 0) -> list[int]:
    """Uniform ``budget``-subset of ``range(c)``."""
    if not 1 <= budget <= c:
        raise ValueError(f"budget {budget} outside [1, {c}]")
    return sorted(int(k) for k in np.random.default_rng(seed).choice(c, size=budget, replace=False))


def select_weight_sum(weight: np.ndarray, budget: int) -> list[int]:
    """Keep the ``budget`` input channels with the largest sum of absolute weights."""
    c = weight.shape[1]
    if not 1 <= budget <= c:
        raise ValueError(f"budget {budget} outside [1, {c}]")
    score = np.abs(weight).sum(axis=(0, 2, 3))
    return sorted(int(k) for k in np.argsort(-score, kind="stable")[:budget])


# ------------------------------------------------------------------ driver


@dataclass
class LayerRecord:
    layer: int
    name: str
    channels: int
    kept: int
    l20: int
    selected: list[int]
    loss_first: Optional[float] = None
    loss_last: Optional[float] = None
    iterations: int = 0
    backtracks: int = 0


@dataclass
class PruneResult:
    net: NetworkDef
    layers: list[LayerRecord]
    plan: StagePlan
    metrics: dict = field(default_factory=dict)

    def report(self) -> dict:
        return {
            "layers": [asdict(r) for r in self.layers],
            "boundaries": self.plan.boundaries,
            "stages": self.plan.stages,
            **self.metrics,
        }


def _stop_rule(cfg: PruneConfig, budget: int) -> StopRule:
    if cfg.stop_mode == "budget":
        return StopRule("budget", budget=budget)
    if cfg.stop_mode == "tolerance":
        return StopRule("tolerance", tolerance=cfg.epsilon)
    return StopRule("whichever-first", budget=budget, tolerance=cfg.epsilon)


def _layer_budget(cfg: PruneConfig, net: NetworkDef, layer: int) -> int:
    c = net.nodes[layer].weight.shape[1]
    if cfg.budgets and layer in cfg.budgets:
        b = int(cfg.budgets[layer])
        if not 1 <= b <= c:
            raise ValueError(f"budget {b} for layer {layer} outside [1, {c}]")
        return b
    return channel_budget(c, cfg.keep_ratio)


def run_dcp(
    pretrained: NetworkDef,
    train_ds: Dataset,
    config: PruneConfig,
    test_ds: Optional[Dataset] = None,
) -> PruneResult:
    """Prune ``pretrained`` stage by stage and fine-tune the result.

    For each stage: attach a loss head at the stage boundary, fine-tune with
    the head loss and the final loss, then select channels for every layer
    of the stage in depth order.  Reconstruction targets come from the
    untouched ``pretrained`` network.  A whole-network fine-tune with the
    final loss follows the last stage.
    """
    t0 = time.perf_counter()
    cfg = config
    baseline = pretrained
    net = pretrained.copy()
    m = net.num_classes
    layers = prunable_layers(net, include_input=cfg.prune_input)
    if not layers:
        raise ValueError("network has no prunable layers")
    heads = cfg.heads if cfg.heads is not None else default_heads(net, layers)
    plan = plan_stages(net, heads, layers)
    records: list[LayerRecord] = []

    for p, stage in enumerate(plan.stages):
        if not stage:
            continue
        final = p == len(plan.stages) - 1
        head = None if final else build_head(net, plan.boundaries[p], m, sub_seed(cfg.seed, "init", p))
        finetune_stage(
            net, head, train_ds, cfg.stage_epochs, cfg.finetune_lr, cfg.finetune_decay,
            cfg.momentum, cfg.weight_decay, cfg.batch_size, sub_seed(cfg.seed, "shuffle", p), cfg.augment,
        )
        subset = sample_subset(train_ds, min(cfg.subset_size, len(train_ds)), sub_seed(cfg.seed, "subset", p))
        cache = capture_baseline(baseline, subset.images, stage)
        for layer in stage:
            budget = _layer_budget(cfg, net, layer)
            net, rec = _prune_layer(net, layer, head, subset, cache, cfg, budget)
            records.append(rec)
            log.info("stage %d %s: kept %d/%d", p + 1, rec.name, rec.kept, rec.channels)

    finetune_stage(
        net, None, train_ds, cfg.final_epochs, cfg.finetune_lr, cfg.finetune_decay,
        cfg.momentum, cfg.weight_decay, cfg.batch_size, sub_seed(cfg.seed, "shuffle", 10_000), cfg.augment,
    )
    for r in records:
        if l20_norm(net.nodes[r.layer].weight.data) > r.kept:
            raise AssertionError(f"masked channels of {r.name} became non-zero")

    metrics = {
        "params_before": count_params(baseline),
        "params_after": count_params(net),
        "flops_before": count_flops(baseline),
        "flops_after": count_flops(net),
    }
    if test_ds is not None:
        before = evaluate(baseline, test_ds)
        after = evaluate(net, test_ds)
        metrics.update(
            error_before=before["top1_error"],
            error_after=after["top1_error"],
            error_gap=after["top1_error"] - before["top1_error"],
        )
        if "top5_error" in after:
            metrics.update(top5_error_before=before["top5_error"], top5_error_after=after["top5_error"])
    metrics["wall_time"] = time.perf_counter() - t0
    return PruneResult(net, records, plan, metrics)


def _prune_layer(net, layer, head, subset, cache, cfg: PruneConfig, budget: int):
    node = net.nodes[layer]
    c = node.weight.shape[1]
    strategy = cfg.strategy
    lam = 0.0 if strategy == "dcp-lambda0" else cfg.lam
    sel_seed = sub_seed(cfg.seed, "selection", layer)
    rec = LayerRecord(layer, node.name, c, 0, 0, [])
    if cfg.stop_mode == "budget" and budget >= c:
        # nothing to remove: keep the fine-tuned weights untouched
        rec.selected, rec.kept, rec.l20 = list(range(c)), c, l20_norm(node.weight.data)
        return net, rec
    problem = LayerProblem(
        net, layer, subset.images, subset.labels, cache, head, lam=lam,
        use_reconstruction=strategy != "dcp-ls-only", head_bn_mode=cfg.head_bn_mode,
    )
    if strategy in ("dcp", "dcp-lambda0", "dcp-ls-only"):
        res = select_channels(
            problem, _stop_rule(cfg, budget), cfg.selection_lr, cfg.inner_steps,
            cfg.selection_batch, sel_seed,
        )
        selected, weight = res.selected, res.weight
        h = res.state.loss_history
        rec.loss_first, rec.loss_last = h[0], h[-1]
        rec.iterations, rec.backtracks = res.state.t, res.state.backtracks
    else:
        if strategy == "random":
            selected = select_random(c, budget, sel_seed)
        else:
            selected = select_weight_sum(node.weight.data, budget)
        # same active-set refit the greedy loop performs, with its total step count
        weight = _refit(problem, node.weight.data, selected, cfg, sel_seed)
        rec.iterations = len(selected)
    node.weight.data[...] = weight
    net = apply_mask(net, layer, selected)
    rec.selected = list(selected)
    rec.kept = len(selected)
    rec.l20 = l20_norm(net.nodes[layer].weight.data)
    return net, rec


def _refit(problem, weight, selected, cfg: PruneConfig, seed: int, max_backtracks: int = 4):
    """Baseline refit of the kept slices, halving the step on divergence like the greedy loop."""
    step = cfg.selection_lr
    for attempt in range(max_backtracks + 1):
        try:
            w, _ = optimize_active(
                problem, weight, selected, step, cfg.inner_steps * len(selected),
                cfg.selection_batch, np.random.default_rng(seed),
            )
            return w
        except DivergenceError:
            if attempt == max_backtracks:
                raise
            step *= 0.5
