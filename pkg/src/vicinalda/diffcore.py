"""Reverse-mode automatic differentiation core.

A deliberately small tape engine: float64 numpy storage, eager ops that
record a vector-Jacobian product per node, topological-order backward,
and SGD with momentum. The op set is exactly what the adaptation method
needs (affine layers, ReLU, concatenation, row gathering, softmax, and
the two losses), nothing more.

Tracked tensors are never mutated in place; the only writers of raw
buffers are the optimizer (parameters, velocities) and backward (grad).
"""

from __future__ import annotations

import numpy as np

LOG_EPS = 1e-12  # floor inside losses so log(0) never produces -inf


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's dimension contract."""


class ContractError(ValueError):
    """An op precondition (other than pure shape agreement) was violated."""


class Tensor:
    """Dense float64 array with optional gradient tracking.

    `data` is row-major float64. `grad` is lazily allocated by backward()
    and accumulates additively until cleared. Nodes produced by ops carry
    `_parents` and `_vjp`, the vector-Jacobian product mapping the output
    gradient to one gradient array per parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same data, cut from the tape (no parents, no grad tracking)."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all semantics live in the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    """Wrap scalars/arrays as constant tensors; pass tensors through."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), vjp)


def concat_cols(a, b) -> Tensor:
    """Concatenate two [m x k] blocks along columns."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"concat_cols row counts disagree: {a.shape} vs {b.shape}")
    ka = a.data.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def vjp(g):
        return g[:, :ka], g[:, ka:]

    return _node(out, (a, b), vjp)


def take_rows(a, idx) -> Tensor:
    """Gather rows by integer index; backward scatters additively."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _node(out, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _node(out, (a,), vjp)


def tsum(a) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    a = as_tensor(a)

    def vjp(g):
        return (np.full_like(a.data, float(g)),)

    return _node(np.asarray(a.data.sum()), (a,), vjp)


def tmean(a) -> Tensor:
    """Mean of all entries, as a scalar tensor."""
    a = as_tensor(a)
    n = a.data.size

    def vjp(g):
        return (np.full_like(a.data, float(g) / n),)

    return _node(np.asarray(a.data.mean()), (a,), vjp)


# ---------------------------------------------------------------------------
# softmax and the two losses


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits) -> Tensor:
    """Row-wise softmax, stabilized by max subtraction."""
    a = as_tensor(logits)
    if a.data.ndim != 2 or a.data.shape[1] < 1:
        raise ShapeError(f"softmax expects [m x n] with n >= 1, got {a.shape}")
    p = _softmax_np(a.data)

    def vjp(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return _node(p, (a,), vjp)


def _check_label_rows(t: np.ndarray) -> None:
    if np.any(t < -1e-12):
        raise ContractError("label rows must be nonnegative")
    sums = t.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ContractError("label rows must sum to 1 within 1e-6")


def cross_entropy(logits, target) -> Tensor:
    """Batch-mean cross entropy against one-hot or soft label rows.

    Computes mean_i of -sum_k target_ik * log(max(p_ik, eps)) with
    p = softmax(logits). The target is treated as a constant: no gradient
    flows into it even if it is a tracked tensor.
    """
    a = as_tensor(logits)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if a.data.shape != t.shape:
        raise ShapeError(f"logits {a.shape} and target {t.shape} shapes disagree")
    _check_label_rows(t)
    m = a.data.shape[0]
    p = _softmax_np(a.data)
    clipped = np.maximum(p, LOG_EPS)
    value = -(t * np.log(clipped)).sum() / m

    def vjp(g):
        # exact derivative of the clipped expression: entries at the floor
        # contribute nothing through the log
        dldp = np.where(p > LOG_EPS, -t / clipped, 0.0) / m
        dot = (dldp * p).sum(axis=1, keepdims=True)
        return (float(g) * p * (dldp - dot),)

    return _node(np.asarray(value), (a,), vjp)


def entropy(logits) -> Tensor:
    """Batch-mean Shannon entropy of row-wise softmax predictions."""
    a = as_tensor(logits)
    if a.data.ndim != 2 or a.data.shape[1] < 2:
        raise ShapeError(f"entropy expects [m x n] with n >= 2, got {a.shape}")
    m = a.data.shape[0]
    p = _softmax_np(a.data)
    logp = np.log(np.maximum(p, LOG_EPS))
    value = -(p * logp).sum() / m

    def vjp(g):
        active = (p > LOG_EPS).astype(np.float64)
        dhdp = -(logp + active) / m
        dot = (dhdp * p).sum(axis=1, keepdims=True)
        return (float(g) * p * (dhdp - dot),)

    return _node(np.asarray(value), (a,), vjp)


def entropy_rows_np(logits: np.ndarray) -> np.ndarray:
    """Per-row prediction entropy, no tape. Shares the loss stabilization."""
    p = _softmax_np(np.asarray(logits, dtype=np.float64))
    return -(p * np.log(np.maximum(p, LOG_EPS))).sum(axis=1)


def softmax_np(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax on a plain array, no tape."""
    return _softmax_np(np.asarray(logits, dtype=np.float64))


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into .grad for every tracked node.

    Repeated calls without zeroing accumulate additively. Propagation uses
    a per-call table so earlier accumulated grads never feed back into the
    current pass.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tracked tensor")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.get(id(node))
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = pg


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """SGD with classical momentum over a fixed parameter list.

    step() applies v <- momentum*v + grad; p <- p - lr*v, then clears the
    grads of its own parameters. Parameters and velocity buffers are the
    only arrays this class mutates.
    """

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0):
        if lr < 0.0:
            raise ContractError(f"learning rate must be >= 0, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ContractError(f"momentum must be in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocities):
            if p.grad is None:
                raise ContractError("sgd step with a missing gradient")
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
