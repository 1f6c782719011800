"""Sinusoidal MLP ``f(x) = L(S^d(...S^0(x)))`` with structured column masks.

Layer ``i`` is ``S^i(a) = sin(W^i a + b^i)`` with ``W^i`` of shape
``(n_{i+1}, n_i)``.  The first layer's rows are the input frequencies and are
stored with ``omega0`` already folded in.  A neuron of layer ``i`` is one of
the ``n_{i+1}`` outputs of ``S^i``; its outgoing weights are column ``j`` of
``W^{i+1}`` (or of ``L`` for the last sinusoidal layer), and masking it zeroes
that column.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .tensor import GradTape, ShapeError, as_matrix

CHECKPOINT_VERSION = 1
DEFAULT_OMEGA0 = 30.0


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NeuronRef:
    layer: int
    unit: int


@dataclass
class SirenNet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    final_weight: np.ndarray
    final_bias: np.ndarray
    omega0: float = DEFAULT_OMEGA0
    masks: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.masks:
            self.masks = [np.ones(W.shape[0], dtype=bool) for W in self.weights]
        self.check()

    @property
    def depth(self) -> int:
        """Index ``d`` of the last sinusoidal layer."""
        return len(self.weights) - 1

    @property
    def widths(self) -> list[int]:
        """``[n_0, n_1, ..., n_{d+1}]``: input dimension followed by layer widths."""
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def hidden_widths(self) -> list[int]:
        return self.widths[1:]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.final_weight.shape[0]

    @property
    def is_masked(self) -> bool:
        return any(not m.all() for m in self.masks)

    def outgoing(self, layer: int) -> np.ndarray:
        """Weight matrix that consumes the outputs of sinusoidal layer ``layer``."""
        if not 0 <= layer <= self.depth:
            raise IndexError(f"layer {layer} out of range [0, {self.depth}]")
        return self.weights[layer + 1] if layer < self.depth else self.final_weight

    def parameters(self) -> dict[str, np.ndarray]:
        """Live references to every trainable array, keyed by name."""
        params = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            params[f"W{i}"] = W
            params[f"b{i}"] = b
        params["L"] = self.final_weight
        params["c"] = self.final_bias
        return params

    def param_count(self, active_only: bool = True) -> int:
        """Number of scalar parameters; masked neurons are excluded by default."""
        if not active_only or not self.is_masked:
            return sum(p.size for p in self.parameters().values())
        sizes = [self.in_dim] + [int(m.sum()) for m in self.masks]
        count = sum(sizes[i + 1] * sizes[i] + sizes[i + 1] for i in range(len(self.weights)))
        return count + self.out_dim * sizes[-1] + self.out_dim

    def copy(self) -> "SirenNet":
        return SirenNet(
            weights=[W.copy() for W in self.weights],
            biases=[b.copy() for b in self.biases],
            final_weight=self.final_weight.copy(),
            final_bias=self.final_bias.copy(),
            omega0=self.omega0,
            masks=[m.copy() for m in self.masks],
        )

    def check(self) -> None:
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise ShapeError("need at least one sinusoidal layer and one bias per layer")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ShapeError(f"layer {i}: W shape {W.shape} incompatible with b shape {b.shape}")
            if i > 0 and W.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(
                    f"layer {i} expects {W.shape[1]} inputs but layer {i - 1} has {self.weights[i - 1].shape[0]} outputs"
                )
        if self.final_weight.shape[1] != self.weights[-1].shape[0]:
            raise ShapeError(f"L shape {self.final_weight.shape} does not match last width {self.weights[-1].shape[0]}")
        if self.final_bias.shape != (self.final_weight.shape[0],):
            raise ShapeError(f"c shape {self.final_bias.shape} does not match L shape {self.final_weight.shape}")
        if len(self.masks) != len(self.weights):
            raise ShapeError("one mask per sinusoidal layer required")
        for i, m in enumerate(self.masks):
            if m.shape != (self.weights[i].shape[0],):
                raise ShapeError(f"mask {i} has shape {m.shape}, expected ({self.weights[i].shape[0]},)")

    def set_mask(self, layer: int, unit: int) -> None:
        """Mask neuron ``(layer, unit)`` and zero its outgoing column."""
        self.masks[layer][unit] = False
        self.outgoing(layer)[:, unit] = 0.0


def init_siren(widths, out_dim: int = 1, omega0: float = DEFAULT_OMEGA0, seed: int = 0) -> SirenNet:
    """Initialise a sinusoidal MLP.

    ``widths`` is ``[n_0, n_1, ..., n_{d+1}]`` (input dimension first).  The
    first layer is drawn from ``U[-1/n_0, 1/n_0]`` and multiplied by ``omega0``;
    later layers, including ``L``, from ``U[-sqrt(6/n)/omega0, sqrt(6/n)/omega0]``
    with ``n`` the fan-in.  Biases start at zero.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise ConfigError("widths must list the input dimension and at least one layer width")
    if any(w <= 0 for w in widths) or out_dim <= 0:
        raise ConfigError(f"all widths must be positive, got {widths} and out_dim={out_dim}")
    if not omega0 > 0:
        raise ConfigError(f"omega0 must be positive, got {omega0}")
    rng = np.random.default_rng(seed)
    n0 = widths[0]
    weights = [rng.uniform(-1.0 / n0, 1.0 / n0, size=(widths[1], n0)) * omega0]
    for n_in, n_out in zip(widths[1:-1], widths[2:]):
        bound = np.sqrt(6.0 / n_in) / omega0
        weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
    bound = np.sqrt(6.0 / widths[-1]) / omega0
    final_weight = rng.uniform(-bound, bound, size=(out_dim, widths[-1]))
    return SirenNet(
        weights=weights,
        biases=[np.zeros(W.shape[0]) for W in weights],
        final_weight=final_weight,
        final_bias=np.zeros(out_dim),
        omega0=float(omega0),
    )


def _active_view(net: SirenNet):
    """Parameters restricted to unmasked neurons plus the kept indices per layer.

    Returns ``(weights, biases, L, keep)``; ``keep`` is ``None`` when nothing is
    masked, in which case the arrays are the live parameters.
    """
    if not net.is_masked:
        return net.weights, net.biases, net.final_weight, None
    keep = [np.flatnonzero(m) for m in net.masks]
    weights, biases = [], []
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        rows = W[keep[i]]
        weights.append(rows if i == 0 else rows[:, keep[i - 1]])
        biases.append(b[keep[i]])
    return weights, biases, net.final_weight[:, keep[-1]], keep


def _run(net: SirenNet, X, tape: GradTape | None = None):
    X = as_matrix(X, "X")
    if X.shape[1] != net.in_dim:
        raise ShapeError(f"input has shape {X.shape}, network expects {net.in_dim} columns")
    weights, biases, L, keep = _active_view(net)
    tape = tape if tape is not None else GradTape()
    pre, post = [], []
    a = X
    for i, (W, b) in enumerate(zip(weights, biases)):
        z = tape.affine(a, W, b, f"W{i}", f"b{i}")
        a = tape.sine(z)
        pre.append(z)
        post.append(a)
    out = tape.affine(a, L, net.final_bias, "L", "c")
    return out, pre, post, keep, tape


def forward(net: SirenNet, X) -> np.ndarray:
    """Evaluate the network on a batch ``X`` of shape ``(batch, n_0)``.

    Masked neurons are skipped entirely, so a masked network computes exactly
    what its compacted counterpart computes.
    """
    return _run(net, X)[0]


def forward_trace(net: SirenNet, X):
    """Return ``(output, pre_activations, activations)`` for every sinusoidal layer.

    Pre-activations and activations are full width; masked units are reported
    as ``nan`` since they are never evaluated.
    """
    out, pre, post, keep, _ = _run(net, X)
    if keep is not None:
        pre = [_scatter_cols(z, k, m.size, np.nan) for z, k, m in zip(pre, keep, net.masks)]
        post = [_scatter_cols(a, k, m.size, np.nan) for a, k, m in zip(post, keep, net.masks)]
    return out, pre, post


def _scatter_cols(a: np.ndarray, keep: np.ndarray, width: int, fill: float) -> np.ndarray:
    full = np.full((a.shape[0], width), fill)
    full[:, keep] = a
    return full


def _scatter_grads(net: SirenNet, grads: dict, keep) -> dict[str, np.ndarray]:
    if keep is None:
        return grads
    full = {}
    for i, W in enumerate(net.weights):
        g = np.zeros_like(W)
        cols = np.arange(W.shape[1]) if i == 0 else keep[i - 1]
        g[np.ix_(keep[i], cols)] = grads[f"W{i}"]
        full[f"W{i}"] = g
        gb = np.zeros(W.shape[0])
        gb[keep[i]] = grads[f"b{i}"]
        full[f"b{i}"] = gb
    gL = np.zeros_like(net.final_weight)
    gL[:, keep[-1]] = grads["L"]
    full["L"] = gL
    full["c"] = grads["c"]
    return full


def forward_with_tape(net: SirenNet, X):
    """Forward pass that also returns a callable producing full-shape gradients.

    ``backward(grad_out)`` maps the gradient w.r.t. the network output onto
    every parameter of ``net`` (zeros for masked entries).
    """
    out, _, _, keep, tape = _run(net, X)

    def backward(grad_out) -> dict[str, np.ndarray]:
        return _scatter_grads(net, tape.backward(grad_out), keep)

    return out, backward


def neuron_output(net: SirenNet, ref: NeuronRef, X) -> np.ndarray:
    """Activation ``h`` of a single neuron over a batch."""
    if not 0 <= ref.layer <= net.depth or not 0 <= ref.unit < net.weights[ref.layer].shape[0]:
        raise IndexError(f"invalid neuron reference {ref} for widths {net.widths}")
    if not net.masks[ref.layer][ref.unit]:
        raise IndexError(f"neuron {ref} is masked")
    _, _, post = forward_trace(net, X)
    return post[ref.layer][:, ref.unit]


def column_l1(net: SirenNet, layer: int) -> np.ndarray:
    """Outgoing-weight L1 norm of every neuron in sinusoidal layer ``layer``.

    Rows that belong to masked neurons of the next layer are ignored.
    """
    W = net.outgoing(layer)
    if layer < net.depth:
        W = W[net.masks[layer + 1]]
    return np.abs(W).sum(axis=0)


def append_input_neurons(net: SirenNet, new_rows, new_phases=None, seed: int = 0, init_scale: float = 1e-4) -> SirenNet:
    """Return a copy of ``net`` with ``k`` extra input frequencies.

    The new rows of ``W^0`` are ``new_rows`` (already in folded units), their
    phases default to zero, and the matching new columns of the next matrix are
    drawn from ``U[-init_scale, init_scale]``.
    """
    new_rows = as_matrix(new_rows, "new_rows")
    k = new_rows.shape[0]
    out = net.copy()
    if k == 0:
        return out
    if new_rows.shape[1] != net.in_dim:
        raise ShapeError(f"new rows have shape {new_rows.shape}, network input dimension is {net.in_dim}")
    phases = np.zeros(k) if new_phases is None else np.asarray(new_phases, dtype=np.float64)
    if phases.shape != (k,):
        raise ShapeError(f"new_phases has shape {phases.shape}, expected ({k},)")
    rng = np.random.default_rng(seed)
    nxt = out.outgoing(0)
    cols = rng.uniform(-init_scale, init_scale, size=(nxt.shape[0], k))
    if out.depth >= 1:
        cols[~out.masks[1]] = 0.0
    out.weights[0] = np.vstack([out.weights[0], new_rows])
    out.biases[0] = np.concatenate([out.biases[0], phases])
    out.masks[0] = np.concatenate([out.masks[0], np.ones(k, dtype=bool)])
    widened = np.hstack([nxt, cols])
    if out.depth >= 1:
        out.weights[1] = widened
    else:
        out.final_weight = widened
    out.check()
    return out


def remove_pruned(net: SirenNet) -> tuple[SirenNet, list[np.ndarray]]:
    """Physically delete masked neurons.

    Returns the compacted network and, per layer, the indices that were kept
    (so callers can slice any per-parameter state the same way).
    """
    weights, biases, L, keep = _active_view(net)
    if keep is None:
        return net.copy(), [np.arange(m.size) for m in net.masks]
    out = SirenNet(
        weights=[np.array(W) for W in weights],
        biases=[np.array(b) for b in biases],
        final_weight=np.array(L),
        final_bias=net.final_bias.copy(),
        omega0=net.omega0,
    )
    return out, keep


def expected_param_count(widths, out_dim: int) -> int:
    """Closed-form parameter count of ``[n_0, ..., n_{d+1}]`` with ``out_dim`` outputs."""
    widths = list(widths)
    count = sum(widths[i + 1] * widths[i] + widths[i + 1] for i in range(len(widths) - 1))
    return count + out_dim * widths[-1] + out_dim


def inf_norm(A) -> float:
    """Induced infinity norm: max absolute row sum (max abs entry for vectors)."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        return float(np.abs(A).max(initial=0.0))
    return float(np.abs(A).sum(axis=1).max(initial=0.0))


# -- checkpoints ------------------------------------------------------------


def net_arrays(net: SirenNet, prefix: str = "net/") -> dict[str, np.ndarray]:
    arrays = {}
    for i, (W, b, m) in enumerate(zip(net.weights, net.biases, net.masks)):
        arrays[f"{prefix}W{i}"] = W
        arrays[f"{prefix}b{i}"] = b
        arrays[f"{prefix}mask{i}"] = m
    arrays[f"{prefix}L"] = net.final_weight
    arrays[f"{prefix}c"] = net.final_bias
    return arrays


def net_from_arrays(arrays, meta: dict, prefix: str = "net/") -> SirenNet:
    depth = int(meta["depth"])
    try:
        net = SirenNet(
            weights=[np.array(arrays[f"{prefix}W{i}"], dtype=np.float64) for i in range(depth + 1)],
            biases=[np.array(arrays[f"{prefix}b{i}"], dtype=np.float64) for i in range(depth + 1)],
            final_weight=np.array(arrays[f"{prefix}L"], dtype=np.float64),
            final_bias=np.array(arrays[f"{prefix}c"], dtype=np.float64),
            omega0=float(meta["omega0"]),
            masks=[np.array(arrays[f"{prefix}mask{i}"], dtype=bool) for i in range(depth + 1)],
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing array {exc}") from None
    if net.widths != list(meta["widths"]):
        raise CheckpointError(f"stored widths {meta['widths']} do not match arrays {net.widths}")
    return net


def net_meta(net: SirenNet) -> dict:
    return {"depth": net.depth, "widths": net.widths, "out_dim": net.out_dim, "omega0": net.omega0}


def write_npz_atomic(path, arrays: dict, meta: dict) -> None:
    """Write ``arrays`` plus a JSON metadata record to ``path`` via temp file and rename."""
    path = os.fspath(path)
    payload = dict(arrays)
    payload["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_npz(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(os.fspath(path), allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path} has no metadata record")
    meta = json.loads(str(arrays.pop("__meta__")))
    return arrays, meta


def save_checkpoint(net: SirenNet, path, extra_meta: dict | None = None) -> None:
    meta = {"format_version": CHECKPOINT_VERSION, "kind": "siren", **net_meta(net)}
    if extra_meta:
        meta.update(extra_meta)
    write_npz_atomic(path, net_arrays(net), meta)


def load_checkpoint(path) -> SirenNet:
    arrays, meta = read_npz(path)
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {meta.get('format_version')} is not supported (expected {CHECKPOINT_VERSION})"
        )
    return net_from_arrays(arrays, meta)
