"""Greedy channel selection for one convolution layer.

Starting from an empty active set, each outer iteration ranks the remaining
input channels by the Frobenius norm of the joint-loss gradient on their
weight slice, activates the strongest one, and re-optimizes the active
slices by SGD while the inactive slices are held at exactly zero.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .loss import BaselineCache, LossHead, discrimination_loss, joint_loss, reconstruction_loss
from .network import NetworkDef, l20_norm, run
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Inner SGD blew up; the selection learning rate is too large."""


def channel_budget(c: int, keep_ratio: float) -> int:
    """Number of channels to keep: ceil(keep_ratio * c)."""
    if c < 1:
        raise ValueError(f"channel count must be positive, got {c}")
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError(f"keep_ratio must lie in (0, 1], got {keep_ratio}")
    # guard against 0.7 * 10 = 7.000000000000001
    return min(c, math.ceil(round(keep_ratio * c, 9)))


@dataclass
class StopRule:
    mode: str = "budget"  # budget | tolerance | whichever-first
    budget: Optional[int] = None
    tolerance: Optional[float] = None

    def __post_init__(self):
        if self.mode not in ("budget", "tolerance", "whichever-first"):
            raise ValueError(f"unknown stop mode {self.mode!r}")
        if self.mode in ("budget", "whichever-first") and (self.budget is None or self.budget < 1):
            raise ValueError("budget stopping needs a channel budget >= 1")
        if self.mode in ("tolerance", "whichever-first") and not (self.tolerance and self.tolerance > 0):
            raise ValueError("tolerance stopping needs epsilon > 0")


@dataclass
class SelectionState:
    selected: list[int] = field(default_factory=list)
    t: int = 0
    loss_history: list[float] = field(default_factory=list)
    grad_norms: Optional[np.ndarray] = None
    # inner solves whose step size had to be reduced to keep descent
    backtracks: int = 0


def should_stop(state: SelectionState, rule: StopRule) -> bool:
    budget_hit = rule.mode != "tolerance" and len(state.selected) >= rule.budget
    if rule.mode == "budget":
        return budget_hit
    if state.t < 1:
        if rule.mode == "tolerance":
            raise ValueError("tolerance stopping is defined only after the first iteration")
        return budget_hit
    h = state.loss_history
    if h[0] == 0:
        raise ZeroDivisionError("initial loss L(W^0) is zero; relative tolerance undefined")
    converged = abs(h[state.t - 1] - h[state.t]) / h[0] <= rule.tolerance
    return converged or budget_hit


@dataclass
class LayerProblem:
    """Everything needed to evaluate the joint loss as a function of one layer's weight.

    ``prefix`` holds activations (over the whole selection subset) of every
    earlier node the sub-network ``layer..stop`` consumes, so each evaluation
    only re-runs the layers between ``layer`` and the loss.
    """

    net: NetworkDef
    layer: int
    images: np.ndarray
    labels: np.ndarray
    cache: Optional[BaselineCache]
    head: Optional[LossHead]
    lam: float = 1.0
    use_reconstruction: bool = True
    head_bn_mode: str = "batch"
    prefix: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        node = self.net.nodes[self.layer]
        if node.kind != "conv":
            raise ValueError(f"layer {self.layer} ({node.name}) is not a convolution")
        if not self.prefix:
            self.prefix = self._capture_prefix()

    @property
    def stop(self) -> int:
        if self.head is None:
            return len(self.net.nodes) - 1
        return max(self.head.attach_layer, self.layer)

    @property
    def uses_discrimination(self) -> bool:
        return self.lam > 0 or not self.use_reconstruction

    def _capture_prefix(self) -> dict[int, np.ndarray]:
        needed = {-1}
        for node in self.net.nodes[self.layer:self.stop + 1]:
            needed.update(j for j in node.inputs if j < self.layer)
        acts = run(self.net, Tensor(self.images), stop=self.layer - 1, mode="eval")
        return {j: acts[j].data for j in needed}

    @property
    def size(self) -> int:
        return self.images.shape[0]

    def objective(self, weight: Tensor, index: Optional[np.ndarray] = None) -> Tensor:
        """Joint loss with ``weight`` substituted into the layer, on samples ``index``."""
        acts = {j: Tensor(a if index is None else a[index]) for j, a in self.prefix.items()}
        stop = self.stop if self.uses_discrimination else self.layer
        acts = run(self.net, None, start=self.layer, stop=stop, acts=acts,
                   overrides={self.layer: {"weight": weight}}, mode="eval")
        l_m = None
        if self.use_reconstruction:
            l_m = reconstruction_loss(acts[self.layer], self.cache, self.layer, index)
        l_s = None
        if self.uses_discrimination:
            labels = self.labels if index is None else self.labels[index]
            if self.head is None:
                l_s = T.softmax_cross_entropy(acts[stop], labels)
            else:
                l_s = discrimination_loss(self.head, acts[self.head.attach_layer], labels, self.head_bn_mode)
        lam = self.lam if self.use_reconstruction else 1.0
        return joint_loss(l_m, l_s, lam)

    def value(self, weight: np.ndarray) -> float:
        return self.objective(Tensor(weight)).item()

    def gradient(self, weight: np.ndarray, index: Optional[np.ndarray] = None) -> tuple[float, np.ndarray]:
        w = Tensor(weight.copy(), requires_grad=True)
        with Tape() as tape:
            loss = self.objective(w, index)
        tape.backward(loss)
        return loss.item(), w.grad


def channel_grad_norms(grad: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(grad * grad, axis=(0, 2, 3)))


def rank_channels(problem: LayerProblem, weight: np.ndarray, exclude) -> tuple[int, np.ndarray]:
    """Channel outside ``exclude`` with the largest gradient norm (lowest index on ties).

    The gradient is taken at ``weight`` with every non-excluded slice zeroed,
    i.e. at the current iterate of the greedy loop.
    """
    c = weight.shape[1]
    exclude = set(exclude)
    if len(exclude) >= c:
        raise ValueError("all channels are already selected")
    w = weight.copy()
    inactive = np.array([k not in exclude for k in range(c)])
    w[:, inactive] = 0.0
    _, grad = problem.gradient(w)
    norms = channel_grad_norms(grad)
    masked = np.where(inactive, norms, -np.inf)
    return int(np.argmax(masked)), norms


def optimize_active(
    problem: LayerProblem,
    weight: np.ndarray,
    active,
    lr: float,
    inner_steps: int,
    batch_size: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> tuple[np.ndarray, float]:
    """Run ``inner_steps`` SGD updates on the active slices; inactive slices stay zero.

    Returns the new weight and the joint loss on the full selection subset.
    """
    if len(active) == 0:
        raise ValueError("active set is empty")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    rng = rng or np.random.default_rng(0)
    c = weight.shape[1]
    mask = np.zeros((1, c, 1, 1))
    mask[0, list(active)] = 1.0
    w = weight * mask
    n = problem.size
    bs = n if batch_size is None or batch_size >= n else batch_size
    start = problem.value(w)
    over = 0
    for _ in range(inner_steps):
        index = None if bs == n else rng.choice(n, size=bs, replace=False)
        loss, grad = problem.gradient(w, index)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite loss during channel selection; try a smaller learning rate than {lr}")
        over = over + 1 if loss > 10 * start else 0
        if over >= 3:
            raise DivergenceError(
                f"selection loss exceeded 10x its starting value {start:.4g} for 3 consecutive steps; "
                f"try a smaller learning rate than {lr}"
            )
        w = w - lr * (grad * mask)
    return w, problem.value(w)


@dataclass
class SelectionResult:
    selected: list[int]
    weight: np.ndarray
    state: SelectionState
    l20: int


def select_channels(
    problem: LayerProblem,
    rule: StopRule,
    lr: float = 0.01,
    inner_steps: int = 20,
    batch_size: Optional[int] = 64,
    seed: int = 0,
    max_backtracks: int = 4,
) -> SelectionResult:
    """Greedy selection loop for ``problem.layer``.

    Newly activated slices are warm-started from the layer's current
    (fine-tuned) weights unless that start raises the objective, in which
    case they start at zero.  If an inner solve ends above the previous
    objective (or diverges), it is retried from the same start with half the
    step size; after ``max_backtracks`` halvings the start point itself is
    kept, unless the last attempt diverged too.
    """
    rng = np.random.default_rng(seed)
    pretrained = problem.net.nodes[problem.layer].weight.data.copy()
    c = pretrained.shape[1]
    w = np.zeros_like(pretrained)
    state = SelectionState()
    state.loss_history.append(problem.value(w))

    # at least one channel is always selected, so the rule is first consulted at t = 1
    while len(state.selected) < c and (state.t == 0 or not should_stop(state, rule)):
        k, norms = rank_channels(problem, w, state.selected)
        state.grad_norms = norms
        state.selected.append(k)
        prev = state.loss_history[-1]
        start = w.copy()
        start[:, k] = pretrained[:, k]
        if problem.value(start) > prev:
            start[:, k] = 0.0
        step = lr
        for attempt in range(max_backtracks + 1):
            try:
                new_w, new_loss = optimize_active(problem, start, state.selected, step, inner_steps, batch_size, rng)
            except DivergenceError:
                if attempt == max_backtracks:
                    raise
                new_loss = math.inf
            if new_loss <= prev:
                break
            state.backtracks += 1
            step *= 0.5
        else:
            # no step size helped: keep the start point, which is never worse than prev
            new_w, new_loss = start, problem.value(start)
        w = new_w
        state.t += 1
        state.loss_history.append(new_loss)
        log.debug("layer %d: +channel %d, loss %.6g", problem.layer, k, new_loss)

    return SelectionResult(sorted(state.selected), w, state, l20_norm(w))
