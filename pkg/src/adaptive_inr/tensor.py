"""Dense float64 primitives and closed-form reverse-mode gradients.

Only the operations a sinusoidal MLP needs are provided: an affine map, the
elementwise sine, a mean squared error and an L1 column penalty.  Arrays are
plain ``numpy.ndarray`` objects in float64; a :class:`GradTape` records the
forward pass so that :meth:`GradTape.backward` can apply the layer-local
backward rules in reverse.

Two reduction orders are available for the affine map.  ``"blas"`` hands the
product to the linked BLAS (deterministic for a fixed shape on a single
thread).  ``"sequential"`` accumulates over the inner dimension left to right,
which makes results invariant to inserting exactly-zero terms; the structural
invariants (zero-column appends, masking) are checked under that order.
"""

from __future__ import annotations

import contextlib
import math
from collections.abc import Iterator
from dataclasses import dataclass, field

import numpy as np

_REDUCTIONS = ("blas", "sequential")
_reduction = "blas"


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeStateError(RuntimeError):
    """Raised when a tape is replayed without a fresh forward pass."""


@contextlib.contextmanager
def reduction_order(order: str) -> Iterator[None]:
    """Temporarily switch the inner-product reduction order."""
    global _reduction
    if order not in _REDUCTIONS:
        raise ValueError(f"unknown reduction order {order!r}; expected one of {_REDUCTIONS}")
    previous, _reduction = _reduction, order
    try:
        yield
    finally:
        _reduction = previous


def current_reduction_order() -> str:
    return _reduction


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def as_vector(a, name: str = "vector") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def _matmul_t(X: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Return ``X @ W.T`` under the active reduction order."""
    if _reduction == "blas":
        return X @ W.T
    out = np.zeros((X.shape[0], W.shape[0]))
    for l in range(W.shape[1]):
        out += np.multiply.outer(X[:, l], W[:, l])
    return out


def affine_forward(W, b, X) -> np.ndarray:
    """Compute ``out[p, j] = sum_l W[j, l] * X[p, l] + b[j]``."""
    W = as_matrix(W, "W")
    b = as_vector(b, "b")
    X = as_matrix(X, "X")
    if W.shape[1] != X.shape[1]:
        raise ShapeError(f"W has shape {W.shape} but X has shape {X.shape}; W.cols must equal X.cols")
    if b.shape[0] != W.shape[0]:
        raise ShapeError(f"b has shape {b.shape} but W has shape {W.shape}; b.len must equal W.rows")
    return _matmul_t(X, W) + b


def sine_forward(Y) -> np.ndarray:
    return np.sin(np.asarray(Y, dtype=np.float64))


def mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred has shape {pred.shape} but target has shape {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff))


def mse_grad(pred, target) -> np.ndarray:
    """Gradient of :func:`mse` with respect to ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred has shape {pred.shape} but target has shape {target.shape}")
    return (2.0 / pred.size) * (pred - target)


def l1_columns(W, cols) -> float:
    """Sum of absolute values over the selected columns of ``W``."""
    W = as_matrix(W, "W")
    cols = np.asarray(cols, dtype=np.intp)
    return float(np.abs(W[:, cols]).sum())


def l1_columns_grad(W, cols) -> np.ndarray:
    """Subgradient of :func:`l1_columns`; zero at exactly-zero entries."""
    W = as_matrix(W, "W")
    g = np.zeros_like(W)
    cols = np.asarray(cols, dtype=np.intp)
    g[:, cols] = np.sign(W[:, cols])
    return g


@dataclass
class GradTape:
    """Ordered record of a chain of affine/sine operations.

    Each affine entry keeps its input activation and weight so the reverse
    pass can produce ``dW = g^T X``, ``db = sum(g)`` and ``dX = g W``; each sine
    entry keeps its pre-activation for the ``cos`` factor.
    """

    _ops: list = field(default_factory=list)
    _consumed: bool = False

    def affine(self, X, W, b, w_name: str, b_name: str) -> np.ndarray:
        out = affine_forward(W, b, X)
        self._ops.append(("affine", np.asarray(X, dtype=np.float64), np.asarray(W, dtype=np.float64), w_name, b_name))
        self._consumed = False
        return out

    def sine(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=np.float64)
        self._ops.append(("sine", Z))
        self._consumed = False
        return sine_forward(Z)

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, grad_out) -> dict[str, np.ndarray]:
        """Propagate ``grad_out`` (gradient w.r.t. the last output) to every parameter."""
        if not self._ops:
            raise TapeStateError("nothing recorded on tape")
        if self._consumed:
            raise TapeStateError("tape already replayed; run a new forward pass first")
        self._consumed = True
        g = np.asarray(grad_out, dtype=np.float64)
        grads: dict[str, np.ndarray] = {}
        for idx in range(len(self._ops) - 1, -1, -1):
            op = self._ops[idx]
            if op[0] == "sine":
                g = g * np.cos(op[1])
                continue
            _, X, W, w_name, b_name = op
            if w_name in grads or b_name in grads:
                raise TapeStateError(f"parameter {w_name}/{b_name} recorded twice")
            grads[w_name] = g.T @ X
            grads[b_name] = g.sum(axis=0)
            if idx > 0:
                g = g @ W
        self._ops.clear()
        return grads


@dataclass
class AdamState:
    """First/second moment estimates keyed by parameter name, plus the step count."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def copy(self) -> "AdamState":
        return AdamState(
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            t=self.t,
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Apply one bias-corrected Adam update in place and return the state.

    Missing moment buffers are created as zeros.  Parameters without a
    gradient entry are left untouched.
    """
    state.t += 1
    bc1 = 1.0 - math.pow(beta1, state.t)
    bc2 = 1.0 - math.pow(beta2, state.t)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            v = state.v[name] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ShapeError(f"optimizer state for {name} has shape {m.shape}, parameter has {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state
