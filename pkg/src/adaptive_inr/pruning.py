"""Targeted weight decay (TWD) and structured neuron pruning.

Candidates are the ``K`` neurons of a layer with the smallest outgoing
column L1 norm.  During the TWD stage the loss gains
``alpha * sum_{j in I} ||W_{*j}||_1`` on exactly those columns, with ``alpha``
ramped linearly from 0 to 1.  Afterwards every candidate whose norm is at most
``epsilon`` is masked; with ``force`` the remaining candidates are masked too
so the final architecture is fixed in advance.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .siren import SirenNet, column_l1, forward, forward_with_tape, inf_norm
from .tensor import l1_columns, l1_columns_grad, mse, mse_grad

DEFAULT_EPSILON = 1e-4


@dataclass
class TwdConfig:
    layer_targets: list[tuple[int, int]]
    epochs: int
    alpha_start: float = 0.0
    alpha_end: float = 1.0
    epsilon: float = DEFAULT_EPSILON
    input_epsilon: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha_start <= self.alpha_end <= 1.0:
            raise ValueError(f"need 0 <= alpha_start <= alpha_end <= 1, got {self.alpha_start}, {self.alpha_end}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")

    def alpha(self, epoch: int) -> float:
        return alpha_schedule(epoch, self.epochs, self.alpha_start, self.alpha_end)


def alpha_schedule(epoch: int, epochs: int, start: float = 0.0, end: float = 1.0) -> float:
    """Linear ramp: ``start`` at the first epoch of the stage, ``end`` at the last."""
    if epochs <= 1:
        return end
    return start + (end - start) * epoch / (epochs - 1)


@dataclass
class PrunePlan:
    """Frozen candidate sets per layer, with the scores they were chosen by."""

    selected: dict[int, np.ndarray]
    scores: dict[int, np.ndarray] = field(default_factory=dict)
    epoch: int = 0

    def to_json(self) -> dict:
        return {
            "epoch": self.epoch,
            "selected": {str(k): [int(i) for i in v] for k, v in self.selected.items()},
            "scores": {str(k): [float(s) for s in v] for k, v in self.scores.items()},
        }

    @classmethod
    def from_json(cls, data: dict) -> "PrunePlan":
        return cls(
            selected={int(k): np.array(v, dtype=np.int64) for k, v in data["selected"].items()},
            scores={int(k): np.array(v, dtype=np.float64) for k, v in data.get("scores", {}).items()},
            epoch=int(data.get("epoch", 0)),
        )


@dataclass
class PruneEvent:
    epoch: int
    layer: int
    index: int
    norm: float
    action: str

    def to_json(self) -> str:
        return json.dumps(
            {"epoch": self.epoch, "layer": self.layer, "index": self.index, "norm": self.norm, "action": self.action}
        )


@dataclass
class StabilityReport:
    layer: int
    lhs: float
    rhs: float
    sample_count: int
    slack: float = 0.0

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs + self.slack


def select_candidates(net: SirenNet, layer: int, K: int) -> np.ndarray:
    """Indices of the ``K`` active neurons with the smallest outgoing L1 norm (sorted)."""
    active = np.flatnonzero(net.masks[layer])
    if not 0 <= K <= len(active):
        raise ValueError(f"cannot select {K} candidates from {len(active)} active neurons in layer {layer}")
    scores = column_l1(net, layer)[active]
    chosen = active[np.argsort(scores, kind="stable")[:K]]
    return np.sort(chosen)


def make_plan(net: SirenNet, targets, epoch: int = 0) -> PrunePlan:
    selected, scores = {}, {}
    for layer, K in targets:
        layer, K = int(layer), int(K)
        if layer in selected:
            raise ValueError(f"layer {layer} targeted twice")
        selected[layer] = select_candidates(net, layer, K)
        scores[layer] = column_l1(net, layer)[selected[layer]]
    return PrunePlan(selected=selected, scores=scores, epoch=epoch)


def _outgoing_name(net: SirenNet, layer: int) -> str:
    return f"W{layer + 1}" if layer < net.depth else "L"


def twd_penalty(net: SirenNet, plan: PrunePlan) -> float:
    return sum(l1_columns(net.outgoing(layer), idx) for layer, idx in plan.selected.items())


def twd_loss(net: SirenNet, X, Y, plan: PrunePlan | None, alpha: float):
    """MSE plus ``alpha`` times the L1 norm of the targeted outgoing columns.

    Returns ``(loss, data_loss, grads)``.  The penalty subgradient is
    ``alpha * sign(w)`` with ``sign(0) = 0``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    out, backward = forward_with_tape(net, X)
    data_loss = mse(out, Y)
    grads = backward(mse_grad(out, Y))
    loss = data_loss
    if plan is not None and alpha > 0.0:
        loss = data_loss + alpha * twd_penalty(net, plan)
        for layer, idx in plan.selected.items():
            name = _outgoing_name(net, layer)
            grads[name] = grads[name] + alpha * l1_columns_grad(net.outgoing(layer), idx)
    return loss, data_loss, grads


def prune_below(
    net: SirenNet,
    plan: PrunePlan,
    epsilon: float = DEFAULT_EPSILON,
    force: bool = False,
    input_epsilon: float | None = None,
    epoch: int = 0,
) -> tuple[SirenNet, list[PruneEvent]]:
    """Mask every candidate whose outgoing L1 norm is at most ``epsilon``.

    ``input_epsilon`` overrides the threshold for layer 0 (input frequencies).
    With ``force`` the candidates above threshold are masked as well and
    logged as ``force_pruned``; otherwise they are logged as ``kept``.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    out = net.copy()
    events = []
    for layer, idx in sorted(plan.selected.items()):
        eps = input_epsilon if (layer == 0 and input_epsilon is not None) else epsilon
        norms = column_l1(net, layer)
        for j in idx:
            j = int(j)
            norm = float(norms[j])
            if norm <= eps:
                action = "pruned"
            elif force:
                action = "force_pruned"
            else:
                events.append(PruneEvent(epoch, layer, j, norm, "kept"))
                continue
            out.set_mask(layer, j)
            events.append(PruneEvent(epoch, layer, j, norm, action))
    return out, events


def pruned_indices(events) -> list[tuple[int, int]]:
    return [(e.layer, e.index) for e in events if e.action != "kept"]


def write_events(path, events, append: bool = True) -> None:
    path = os.fspath(path)
    with open(path, "a" if append else "w") as fh:
        for e in events:
            fh.write(e.to_json() + "\n")


def perturbation_bound(net: SirenNet, layer: int, dW_norm: float, db_norm: float = 0.0) -> float:
    """``(dW + db) * ||L|| * prod_{i > layer} ||W^i||`` in induced infinity norms."""
    if not 0 <= layer <= net.depth:
        raise IndexError(f"layer {layer} out of range [0, {net.depth}]")
    downstream = math.prod(inf_norm(net.weights[i]) for i in range(layer + 1, net.depth + 1))
    return (dW_norm + db_norm) * inf_norm(net.final_weight) * downstream


def _sample_inputs(net: SirenNet, n_samples: int, seed) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-1.0, 1.0, size=(n_samples, net.in_dim))


def _slack(*outputs) -> float:
    scale = max(float(np.abs(o).max(initial=0.0)) for o in outputs)
    return 1e-12 * (1.0 + scale)


def stability_bound(
    net: SirenNet,
    layer: int,
    W_tilde,
    b_tilde,
    n_samples: int = 10_000,
    seed=0,
    rhs_scale: float = 1.0,
) -> StabilityReport:
    """Compare the sampled output change of a one-layer perturbation with its bound.

    ``rhs_scale`` multiplies the bound; it exists so callers can check that a
    deliberately corrupted bound is detected.
    """
    W_tilde = np.asarray(W_tilde, dtype=np.float64)
    b_tilde = np.asarray(b_tilde, dtype=np.float64)
    if W_tilde.shape != net.weights[layer].shape or b_tilde.shape != net.biases[layer].shape:
        raise ValueError(
            f"perturbed shapes {W_tilde.shape}/{b_tilde.shape} do not match layer {layer} "
            f"({net.weights[layer].shape}/{net.biases[layer].shape})"
        )
    other = net.copy()
    other.weights[layer] = W_tilde.copy()
    other.biases[layer] = b_tilde.copy()
    X = _sample_inputs(net, n_samples, seed)
    f, g = forward(net, X), forward(other, X)
    lhs = float(np.abs(f - g).max(initial=0.0))
    rhs = rhs_scale * perturbation_bound(
        net, layer, inf_norm(net.weights[layer] - W_tilde), inf_norm(net.biases[layer] - b_tilde)
    )
    return StabilityReport(layer=layer, lhs=lhs, rhs=rhs, sample_count=n_samples, slack=_slack(f, g))


def column_zeroing_bound(
    net: SirenNet, layer: int, unit: int, n_samples: int = 10_000, seed=0, rhs_scale: float = 1.0
) -> StabilityReport:
    """Bound for removing neuron ``(layer, unit)`` using its outgoing column L1 norm.

    Zeroing the column perturbs the next layer (``layer + 1``, or ``L`` when
    ``layer`` is the last sinusoidal layer).  The column L1 norm stands in for
    ``||dW||_inf``; since it dominates the max-abs entry it still yields a
    valid bound.
    """
    col_norm = float(np.abs(net.outgoing(layer)[:, unit]).sum())
    pruned = net.copy()
    pruned.outgoing(layer)[:, unit] = 0.0
    X = _sample_inputs(net, n_samples, seed)
    f, g = forward(net, X), forward(pruned, X)
    lhs = float(np.abs(f - g).max(initial=0.0))
    if layer < net.depth:
        rhs = perturbation_bound(net, layer + 1, col_norm)
    else:
        rhs = col_norm
    return StabilityReport(layer=layer + 1, lhs=lhs, rhs=rhs_scale * rhs, sample_count=n_samples, slack=_slack(f, g))
