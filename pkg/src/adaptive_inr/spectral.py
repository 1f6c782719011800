"""Bessel-amplitude harmonic expansion of sinusoidal neurons and densification.

A neuron ``h(y) = sin(sum_l w_l sin(y_l) + b)`` equals
``sum_k alpha_k sin(<k, y> + b)`` over integer multi-indices ``k`` with
``alpha_k = prod_l J_{k_l}(w_l)`` and ``|alpha_k| <= prod_l (|w_l|/2)^|k_l| / |k_l|!``.
Truncating to ``|k|_1 <= order`` therefore has an error no larger than the sum
of that factorial bound over the discarded indices, which :func:`tail_bound`
computes without enumerating them.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .siren import NeuronRef, SirenNet, column_l1, forward_trace

BESSEL_MAX_ARG = 50.0
SERIES_MAX_ARG = 10.0
MAX_TERMS = 10**7


class BesselDomainError(ValueError):
    pass


class EnumerationGuardError(ValueError):
    pass


def _bessel_series(n: int, x: float) -> float:
    half = 0.5 * x
    term = 1.0
    for i in range(1, n + 1):
        term *= half / i
    total = term
    sq = half * half
    m = 0
    while True:
        m += 1
        term *= -sq / (m * (m + n))
        total += term
        if m > half and abs(term) <= 1e-17 * max(abs(total), 1e-300):
            break
        if term == 0.0:
            break
    return total


def _bessel_miller(n: int, x: float) -> float:
    # Downward recurrence J_{j-1} = (2j/x) J_j - J_{j+1}, normalised with
    # J_0 + 2 * sum J_{2m} = 1.
    top = max(n, int(x))
    start = 2 * ((top + 30 + int(math.sqrt(40.0 * top))) // 2)
    j_next, j_cur = 0.0, 1e-30
    norm = 0.0
    result = 0.0
    for j in range(start, 0, -1):
        j_prev = (2.0 * j / x) * j_cur - j_next
        j_next, j_cur = j_cur, j_prev
        if abs(j_cur) > 1e250:
            j_cur *= 1e-250
            j_next *= 1e-250
            norm *= 1e-250
            result *= 1e-250
        if (j - 1) % 2 == 0 and j - 1 > 0:
            norm += 2.0 * j_cur
        if j - 1 == n:
            result = j_cur
    norm += j_cur
    return result / norm


def bessel_j(k: int, x: float) -> float:
    """Bessel function of the first kind ``J_k(x)`` for integer ``k`` and ``|x| <= 50``."""
    k = int(k)
    x = float(x)
    if not math.isfinite(x) or abs(x) > BESSEL_MAX_ARG:
        raise BesselDomainError(f"|x| must be <= {BESSEL_MAX_ARG}, got {x}")
    n = abs(k)
    ax = abs(x)
    if ax == 0.0:
        return 1.0 if n == 0 else 0.0
    value = _bessel_series(n, ax) if ax <= SERIES_MAX_ARG else _bessel_miller(n, ax)
    # J_{-n}(x) = (-1)^n J_n(x) and J_n(-x) = (-1)^n J_n(x)
    flips = (k < 0) + (x < 0)
    if n % 2 == 1 and flips == 1:
        value = -value
    return value


def bessel_table(max_order: int, x) -> np.ndarray:
    """``J_m(x)`` for ``m = -max_order..max_order`` stacked on a leading axis."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    out = np.empty((2 * max_order + 1, flat.size))
    for idx, v in enumerate(flat):
        for m in range(0, max_order + 1):
            j = bessel_j(m, v)
            out[max_order + m, idx] = j
            out[max_order - m, idx] = -j if m % 2 else j
    return out.reshape((2 * max_order + 1,) + x.shape)


def amplitude(k, w_row) -> float:
    """``prod_l J_{k_l}(w_l)``."""
    k = np.asarray(k, dtype=np.int64).ravel()
    w_row = np.asarray(w_row, dtype=np.float64).ravel()
    if k.shape != w_row.shape:
        raise ValueError(f"multi-index length {k.size} does not match weight length {w_row.size}")
    return math.prod(bessel_j(int(kl), float(wl)) for kl, wl in zip(k, w_row))


def amplitude_bound(k, w_row) -> float:
    """Factorial majorant ``prod_l (|w_l|/2)^|k_l| / |k_l|!`` of ``|amplitude(k, w)|``."""
    k = np.abs(np.asarray(k, dtype=np.int64).ravel())
    w_row = np.abs(np.asarray(w_row, dtype=np.float64).ravel())
    return math.prod((wl / 2.0) ** int(kl) / math.factorial(int(kl)) for kl, wl in zip(k, w_row))


def count_multi_indices(n: int, order: int) -> int:
    """Number of ``k`` in ``Z^n`` with ``|k|_1 <= order``."""
    return sum(2**i * math.comb(n, i) * math.comb(order, i) for i in range(min(n, order) + 1))


def _sparse_multi_indices(n: int, order: int):
    """Yield ``(positions, values)`` blocks covering every ``k`` with ``|k|_1 <= order``.

    Each block has a fixed support size ``s``: ``positions`` is ``(m, s)`` and
    ``values`` is ``(m, s)`` with nonzero entries.  The zero vector comes first
    as a block with ``s = 0``.
    """
    yield np.zeros((1, 0), dtype=np.int64), np.zeros((1, 0), dtype=np.int64)
    for s in range(1, min(n, order) + 1):
        supports = np.array(list(combinations(range(n), s)), dtype=np.int64)
        mags = [c for c in _compositions(s, order)]
        mags = np.array(mags, dtype=np.int64)
        signs = np.array(np.meshgrid(*([[1, -1]] * s), indexing="ij")).reshape(s, -1).T
        values = (mags[:, None, :] * signs[None, :, :]).reshape(-1, s)
        positions = np.repeat(supports, len(values), axis=0)
        yield positions, np.tile(values, (len(supports), 1))


def _compositions(parts: int, max_total: int):
    """Tuples of ``parts`` positive integers with sum at most ``max_total``."""
    if parts == 0:
        yield ()
        return
    for first in range(1, max_total - parts + 2):
        for rest in _compositions(parts - 1, max_total - first):
            yield (first,) + rest


def enumerate_multi_indices(n: int, order: int) -> np.ndarray:
    """Dense ``(m, n)`` array of every ``k`` with ``|k|_1 <= order``."""
    total = count_multi_indices(n, order)
    if total > MAX_TERMS:
        raise EnumerationGuardError(
            f"{total} multi-indices for n={n}, order={order} exceeds the limit of {MAX_TERMS}; lower the order"
        )
    blocks = []
    for positions, values in _sparse_multi_indices(n, order):
        dense = np.zeros((positions.shape[0], n), dtype=np.int64)
        if positions.shape[1]:
            np.put_along_axis(dense, positions, values, axis=1)
        blocks.append(dense)
    return np.vstack(blocks)


def tail_bound(w_row, order: int) -> float:
    """Upper bound on ``sum_{|k|_1 > order} |alpha_k(w)|``.

    The factorial majorants summed by total degree ``s = |k|_1`` are the
    coefficients of ``prod_l (2 exp(a_l t) - 1)`` with ``a_l = |w_l|/2``.  They
    are computed exactly up to a cut-off degree; the remainder beyond it is
    bounded coefficient-wise by ``exp(2 t sum_l a_l)``.
    """
    a = np.abs(np.asarray(w_row, dtype=np.float64).ravel()) / 2.0
    two_a = 2.0 * float(a.sum())
    cutoff = max(order + 40, int(3.0 * two_a) + 20)
    degrees = np.arange(cutoff + 1)
    log_fact = np.array([math.lgamma(d + 1.0) for d in degrees])
    poly = np.zeros(cutoff + 1)
    poly[0] = 1.0
    for al in a:
        if al == 0.0:
            continue
        factor = np.zeros(cutoff + 1)
        factor[0] = 1.0
        factor[1:] = 2.0 * np.exp(degrees[1:] * math.log(al) - log_fact[1:])
        poly = np.convolve(poly, factor)[: cutoff + 1]
    tail = float(poly[order + 1 :].sum())
    if two_a > 0.0:
        s = cutoff + 1
        while True:
            term = math.exp(s * math.log(two_a) - math.lgamma(s + 1.0))
            tail += term
            if term < 1e-300 or term < 1e-18 * tail:
                break
            s += 1
    return tail


@dataclass
class Expansion:
    """Truncated amplitude-phase representation of one neuron.

    ``evaluate(y)`` sums ``alpha_k sin(<k, y> + phase)`` over the stored terms.
    All indices with ``|k|_1 <= truncation_order`` are kept; ``amplitude_floor``
    only affects :meth:`report`.
    """

    ks: np.ndarray
    amplitudes: np.ndarray
    phase: float
    truncation_order: int
    amplitude_floor: float = 0.0
    discarded_bound: float = 0.0
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def evaluate(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        return np.sin(y @ self.ks.T.astype(np.float64) + self.phase) @ self.amplitudes

    def report(self) -> list[tuple[tuple[int, ...], float]]:
        keep = np.abs(self.amplitudes) >= self.amplitude_floor
        return [(tuple(int(v) for v in k), float(a)) for k, a in zip(self.ks[keep], self.amplitudes[keep])]

    def rounding_allowance(self) -> float:
        """Floating-point slack for comparing :meth:`evaluate` with a direct evaluation."""
        n_terms = len(self.amplitudes)
        return 8.0 * np.finfo(float).eps * (n_terms + 4) * (float(np.abs(self.amplitudes).sum()) + 1.0)


def expand_weights(w_row, phase: float, order: int, amplitude_floor: float = 0.0) -> Expansion:
    """Expansion of ``sin(sum_l w_l sin(y_l) + phase)`` truncated at ``|k|_1 <= order``."""
    w_row = np.asarray(w_row, dtype=np.float64).ravel()
    ks = enumerate_multi_indices(w_row.size, order)
    table = bessel_table(order, w_row)  # (2*order+1, n)
    cols = np.arange(w_row.size)
    amps = np.prod(table[ks + order, cols], axis=1) if w_row.size else np.ones(len(ks))
    return Expansion(
        ks=ks,
        amplitudes=amps,
        phase=float(phase),
        truncation_order=order,
        amplitude_floor=amplitude_floor,
        discarded_bound=tail_bound(w_row, order),
        weights=w_row.copy(),
    )


def expand_neuron(net: SirenNet, ref: NeuronRef, truncation_order: int, amplitude_floor: float = 0.0) -> Expansion:
    """Expand neuron ``ref`` (layer >= 1) over the pre-activations of the layer before it."""
    if not 1 <= ref.layer <= net.depth:
        raise ValueError(f"expansion needs a neuron in layers 1..{net.depth}, got layer {ref.layer}")
    W = net.weights[ref.layer]
    if not 0 <= ref.unit < W.shape[0]:
        raise IndexError(f"unit {ref.unit} out of range for layer {ref.layer} of width {W.shape[0]}")
    # masked inputs never reach this neuron
    w_row = np.where(net.masks[ref.layer - 1], W[ref.unit], 0.0)
    return expand_weights(w_row, net.biases[ref.layer][ref.unit], truncation_order, amplitude_floor)


def pre_activations(net: SirenNet, X, layer: int) -> np.ndarray:
    """``y`` feeding the neurons of ``layer + 1``, i.e. the pre-activation of ``layer``."""
    _, pre, _ = forward_trace(net, X)
    return pre[layer]


@dataclass
class Spectrum:
    """Generated frequencies ``<k, omega>`` of the first two sinusoidal layers.

    ``positions``/``values`` give each ``k`` sparsely (padded with -1 / 0),
    ``frequencies`` the vector ``sum_l k_l omega_l`` and ``weights`` the summed
    ``|alpha_k|`` over the neurons of layer 1.
    """

    positions: np.ndarray
    values: np.ndarray
    frequencies: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.weights)

    def k_labels(self) -> list[str]:
        labels = []
        for pos, val in zip(self.positions, self.values):
            parts = [f"{p}:{v:+d}" for p, v in zip(pos, val) if p >= 0]
            labels.append(" ".join(parts) if parts else "0")
        return labels

    def to_csv(self, path) -> None:
        path = os.fspath(path)
        tmp = path + ".tmp"
        dims = self.frequencies.shape[1]
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k"] + [f"freq_{d}" for d in range(dims)] + ["amplitude"])
            for label, freq, weight in zip(self.k_labels(), self.frequencies, self.weights):
                writer.writerow([label] + [repr(float(f)) for f in freq] + [repr(float(weight))])
        os.replace(tmp, path)


def layer0_spectrum(net: SirenNet, truncation_order: int, amplitude_floor: float = 0.0) -> Spectrum:
    """Enumerate ``<k, omega>`` for ``|k|_1 <= order`` with aggregated amplitudes."""
    if net.depth < 1:
        raise ValueError("spectrum needs at least two sinusoidal layers")
    keep_in = np.flatnonzero(net.masks[0])
    keep_out = np.flatnonzero(net.masks[1])
    omega = net.weights[0][keep_in]
    W = net.weights[1][np.ix_(keep_out, keep_in)]
    n = len(keep_in)
    total = count_multi_indices(n, truncation_order)
    if total > MAX_TERMS:
        raise EnumerationGuardError(
            f"{total} multi-indices for {n} input neurons at order {truncation_order} exceeds "
            f"the limit of {MAX_TERMS}; lower the order"
        )
    order = truncation_order
    table = bessel_table(order, W)  # (2*order+1, units, n)
    with np.errstate(divide="ignore"):
        log_abs = np.log(np.abs(table))
    log_j0 = log_abs[order]  # (units, n)
    base = log_j0.sum(axis=1)  # log prod_l |J_0(W_jl)|

    all_pos, all_val, all_w = [], [], []
    chunk = max(1, 2_000_000 // max(1, W.shape[0] * order))
    for positions, values in _sparse_multi_indices(n, order):
        s = positions.shape[1]
        if s == 0:
            w = np.exp(base).sum(keepdims=True)
        else:
            w = np.empty(len(positions))
            for lo in range(0, len(positions), chunk):
                p = positions[lo : lo + chunk]
                v = values[lo : lo + chunk]
                # swap J_0 for J_{k_l} on the support, in log space
                delta = log_abs[v + order, :, p] - log_j0.T[p]  # (m, s, units)
                with np.errstate(invalid="ignore"):
                    delta = np.nan_to_num(delta, nan=-np.inf, posinf=np.inf, neginf=-np.inf)
                    logs = base[None, :] + delta.sum(axis=1)
                w[lo : lo + chunk] = np.exp(logs).sum(axis=1)
        all_pos.append(positions)
        all_val.append(values)
        all_w.append(w)
    width = min(n, order)
    positions = np.full((total, width), -1, dtype=np.int64)
    values = np.zeros((total, width), dtype=np.int64)
    row = 0
    for p, v in zip(all_pos, all_val):
        positions[row : row + len(p), : p.shape[1]] = p
        values[row : row + len(p), : v.shape[1]] = v
        row += len(p)
    weights = np.concatenate(all_w)
    freqs = np.zeros((total, omega.shape[1]))
    for col in range(width):
        valid = positions[:, col] >= 0
        freqs[valid] += values[valid, col, None] * omega[positions[valid, col]]
    # report original input-neuron indices
    positions = np.where(positions >= 0, keep_in[np.maximum(positions, 0)], -1)
    keep = weights >= amplitude_floor
    return Spectrum(positions[keep], values[keep], freqs[keep], weights[keep])


@dataclass
class DensifyPlan:
    source_indices: np.ndarray
    new_frequencies: np.ndarray
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))


def plan_densification(net: SirenNet, count: int) -> DensifyPlan:
    """Pick the ``count`` input neurons with the largest outgoing L1 norm and double them.

    Ties go to the lower index; masked input neurons are never selected.
    """
    n1 = int(net.masks[0].sum())
    if count < 0 or count > n1:
        raise ValueError(f"cannot densify {count} neurons from {n1} active input neurons")
    scores = column_l1(net, 0)
    ranked = np.where(net.masks[0], scores, -np.inf)
    source = np.argsort(-ranked, kind="stable")[:count]
    return DensifyPlan(
        source_indices=source,
        new_frequencies=2.0 * net.weights[0][source],
        scores=scores[source],
    )
