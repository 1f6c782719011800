"""Monte-Carlo checks of the expansion identity and the perturbation bound.

Each check compares a measured quantity ``lhs`` with an analytic bound
``rhs``.  ``rhs_scale`` multiplies every bound; values below 1 are a test hook
for confirming that violations are reported.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pruning import column_zeroing_bound, stability_bound
from .siren import NeuronRef, SirenNet, init_siren
from .spectral import count_multi_indices, expand_neuron, expand_weights, pre_activations

MAX_VERIFY_TERMS = 200_000


@dataclass
class Check:
    suite: str
    label: str
    lhs: float
    rhs: float
    tol: float = 0.0  # floating-point allowance on top of the analytic bound

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs + self.tol

    def line(self) -> str:
        status = "ok" if self.holds else "VIOLATED"
        return f"{self.suite:<10} {self.label:<40} {self.lhs:.3e} <= {self.rhs:.3e} (+{self.tol:.1e})  {status}"


def _grid(n_inputs: int, n_points: int) -> np.ndarray:
    """About ``n_points`` points covering ``[-pi, pi]^n_inputs``."""
    if n_inputs == 1:
        return np.linspace(-np.pi, np.pi, n_points)[:, None]
    side = max(2, int(round(n_points ** (1.0 / n_inputs))))
    axes = np.meshgrid(*([np.linspace(-np.pi, np.pi, side)] * n_inputs), indexing="ij")
    return np.stack([a.ravel() for a in axes], axis=1)


def _expansion_check(exp, y, label, rhs_scale) -> Check:
    direct = np.sin(np.sin(y) @ exp.weights + exp.phase)
    lhs = float(np.abs(exp.evaluate(y) - direct).max())
    return Check("expansion", label, lhs, rhs_scale * exp.discarded_bound, rhs_scale * exp.rounding_allowance())


def random_expansion_checks(
    n_trials: int = 50, seed=0, order: int = 10, n_points: int = 100, input_dims=(1, 2), w_max: float = 1.0,
    rhs_scale: float = 1.0,
) -> list[Check]:
    """Random neurons ``sin(<w, sin y> + b)`` with ``||w||_inf <= w_max``."""
    rng = np.random.default_rng(seed)
    checks = []
    for t in range(n_trials):
        n = int(input_dims[t % len(input_dims)])
        w = rng.uniform(-w_max, w_max, size=n)
        b = rng.uniform(-np.pi, np.pi)
        exp = expand_weights(w, b, order)
        checks.append(_expansion_check(exp, _grid(n, n_points), f"random neuron {t} (n={n})", rhs_scale))
    return checks


def feasible_order(n_inputs: int, requested: int, max_terms: int = MAX_VERIFY_TERMS) -> int:
    order = requested
    while order > 0 and count_multi_indices(n_inputs, order) > max_terms:
        order -= 1
    return order


def net_expansion_checks(
    net: SirenNet, n_neurons: int = 20, seed=0, order: int = 10, n_points: int = 100, rhs_scale: float = 1.0
) -> list[Check]:
    """Expand layer-1 neurons of ``net`` and compare on pre-activations of sampled inputs.

    The order is lowered until the multi-index count stays manageable.
    """
    if net.depth < 1:
        return []
    rng = np.random.default_rng(seed)
    order = feasible_order(net.widths[1], order)
    X = rng.uniform(-1.0, 1.0, size=(n_points, net.in_dim))
    y = pre_activations(net, X, 0)
    y = np.where(np.isnan(y), 0.0, y)
    active = np.flatnonzero(net.masks[1])
    units = rng.choice(active, size=min(n_neurons, len(active)), replace=False)
    checks = []
    for j in np.sort(units):
        exp = expand_neuron(net, NeuronRef(1, int(j)), order)
        checks.append(_expansion_check(exp, y, f"layer 1 unit {j} (order {order})", rhs_scale))
    return checks


def random_net(rng: np.random.Generator) -> SirenNet:
    depth = int(rng.integers(1, 4))
    widths = [int(rng.integers(1, 4))] + [int(w) for w in rng.integers(2, 17, size=depth + 1)]
    omega0 = float(rng.choice([1.0, 5.0, 30.0]))
    net = init_siren(widths, out_dim=int(rng.integers(1, 4)), omega0=omega0, seed=int(rng.integers(2**31)))
    for b in net.biases:
        b[:] = rng.uniform(-1.0, 1.0, size=b.shape)
    return net


def _perturb(net: SirenNet, layer: int, rng, scale: float):
    W = net.weights[layer] + scale * rng.standard_normal(net.weights[layer].shape)
    b = net.biases[layer] + scale * rng.standard_normal(net.biases[layer].shape)
    return W, b


def _stability_check(net: SirenNet, rng, zero_column: bool, n_samples: int, rhs_scale: float) -> Check:
    layer = int(rng.integers(0, net.depth + 1))
    if zero_column:
        unit = int(rng.integers(net.widths[layer + 1]))
        r = column_zeroing_bound(net, layer, unit, n_samples, seed=rng.integers(2**31), rhs_scale=rhs_scale)
        label = f"zero column {unit} after layer {layer}"
    else:
        W, b = _perturb(net, layer, rng, float(10.0 ** rng.uniform(-4, -1)))
        r = stability_bound(net, layer, W, b, n_samples, seed=rng.integers(2**31), rhs_scale=rhs_scale)
        label = f"perturb layer {layer}"
    return Check("stability", label, r.lhs, r.rhs, r.slack)


def net_stability_checks(
    net: SirenNet, n_trials: int = 20, seed=0, n_samples: int = 10_000, rhs_scale: float = 1.0
) -> list[Check]:
    """Alternating random single-layer perturbations and single-column zeroings of ``net``."""
    rng = np.random.default_rng(seed)
    return [_stability_check(net, rng, bool(t % 2), n_samples, rhs_scale) for t in range(n_trials)]


def random_stability_checks(n_trials: int = 100, seed=0, n_samples: int = 10_000, rhs_scale: float = 1.0):
    """One check per random network; odd trials zero a single outgoing column."""
    rng = np.random.default_rng(seed)
    checks = []
    for t in range(n_trials):
        c = _stability_check(random_net(rng), rng, bool(t % 2), n_samples, rhs_scale)
        c.label = f"net {t}: {c.label}"
        checks.append(c)
    return checks


def verify_random(n: int, seed=0, order: int = 10, n_samples: int = 10_000, rhs_scale: float = 1.0) -> list[Check]:
    return random_expansion_checks(n, seed, order, rhs_scale=rhs_scale) + random_stability_checks(
        n, seed, n_samples, rhs_scale
    )


def verify_net(net: SirenNet, n: int = 20, seed=0, order: int = 10, n_samples: int = 10_000, rhs_scale: float = 1.0):
    return net_expansion_checks(net, n, seed, order, rhs_scale=rhs_scale) + net_stability_checks(
        net, n, seed, n_samples, rhs_scale
    )
