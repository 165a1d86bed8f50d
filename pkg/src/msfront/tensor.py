"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations needed by the front ends and the acoustic model are
provided.  Every op builds a node holding its parents and a closure that maps
the output gradient to parent gradients; :meth:`Tensor.backward` walks the
resulting graph in reverse topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf from its inputs."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, double backward)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise ValueError("tensor must have at least one element")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> "Tape":
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward() already ran on this graph; rebuild it first")
        tape = Tape.from_loss(self)
        tape.run(self)
        self._consumed = True
        return tape


@dataclass
class Tape:
    """Topologically ordered record of the nodes reachable from a loss."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def is_topological(self) -> bool:
        position = {id(n): i for i, n in enumerate(self.nodes)}
        return all(position[id(p)] < i for i, n in enumerate(self.nodes) for p in n._parents)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]

    def run(self, loss: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None or not node.requires_grad:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            # free closures (and the activations they hold) once consumed
            node._backward = None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = op
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    out._consumed = False
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# --- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _node(np.array([x.data.sum()]), (x,),
                 lambda g: (np.full(x.shape, g[0]),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _node(np.array([x.data.mean()]), (x,),
                 lambda g: (np.full(x.shape, g[0] / n),), "mean")


def scale(x: Tensor, factor: float) -> Tensor:
    return _node(x.data * factor, (x,), lambda g: (g * factor,), "scale")


# --- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` fused into one node."""
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear inner dimensions differ: {x.shape} x {weight.shape}")
    out = x.data @ weight.data
    if bias is None:
        return _node(out, (x, weight), lambda g: (g @ weight.data.T, x.data.T @ g), "linear")
    out = out + bias.data
    return _node(out, (x, weight, bias),
                 lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0)), "linear")


# --- shape plumbing --------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[0]:
        raise ValueError(f"row slice [{start}:{stop}] outside tensor of {x.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _node(x.data[start:stop].copy(), (x,), backward, "slice_rows")


def split_rows(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    bounds = np.cumsum([0] + list(sizes))
    if bounds[-1] != x.shape[0]:
        raise ValueError(f"split sizes sum to {bounds[-1]}, tensor has {x.shape[0]} rows")
    return [slice_rows(x, int(bounds[i]), int(bounds[i + 1])) for i in range(len(sizes))]


# --- convolution and pooling -----------------------------------------------

def conv_output_length(n: int, window: int, stride: int) -> int:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if n < window:
        raise ValueError(f"input too short: {n} frames < window {window}")
    return (n - window) // stride + 1


def conv1d(x: Tensor, filters: Tensor, stride: int = 1, bias: Optional[Tensor] = None) -> Tensor:
    """Valid cross-correlation of ``x[T, Cin]`` with ``filters[K, Cin, Cout]``."""
    if x.data.ndim != 2 or filters.data.ndim != 3:
        raise ValueError(f"conv1d expects x[T,Cin] and filters[K,Cin,Cout], got {x.shape}, {filters.shape}")
    T, cin = x.shape
    K, fcin, cout = filters.shape
    if fcin != cin:
        raise ValueError(f"channel mismatch: input has {cin}, filters expect {fcin}")
    n_out = conv_output_length(T, K, stride)
    # (T', Cin, K) -> (T', K, Cin) -> (T', K*Cin)
    windows = np.lib.stride_tricks.sliding_window_view(x.data, K, axis=0)[::stride][:n_out]
    patches = np.ascontiguousarray(windows.transpose(0, 2, 1)).reshape(n_out, K * cin)
    w2 = filters.data.reshape(K * cin, cout)
    out = patches @ w2
    if bias is not None:
        out = out + bias.data

    def backward(g):
        dw = (patches.T @ g).reshape(K, cin, cout)
        dpatch = (g @ w2.T).reshape(n_out, K, cin)
        dx = np.zeros_like(x.data)
        span = stride * (n_out - 1) + 1
        for k in range(K):
            dx[k:k + span:stride] += dpatch[:, k, :]
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=0)

    parents = (x, filters) if bias is None else (x, filters, bias)
    return _node(out, parents, backward, "conv1d")


def max_pool(x: Tensor, stride: int) -> tuple[Tensor, np.ndarray]:
    """Non-overlapping max pooling over time; ties resolve to the lowest index.

    Returns the pooled tensor and the absolute row index of every maximum.
    """
    if stride < 1:
        raise ValueError(f"pool stride must be >= 1, got {stride}")
    T, C = x.shape
    n_out = T // stride
    if n_out == 0:
        raise ValueError(f"max_pool output would be empty: {T} frames < stride {stride}")
    blocks = x.data[: n_out * stride].reshape(n_out, stride, C)
    local = blocks.argmax(axis=1)
    rows = local + (np.arange(n_out) * stride)[:, None]
    cols = np.broadcast_to(np.arange(C), rows.shape)
    out = x.data[rows, cols]

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[rows, cols] = g
        return (dx,)

    return _node(out, (x,), backward, "max_pool"), rows


# --- normalization ---------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-feature normalization with statistics over every row of ``x``.

    Rows are all (utterance, frame) pairs of a batch, so statistics are
    shared across time instead of being computed per timestep.
    """
    n = x.shape[0]
    mu = x.data.mean(axis=0)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = gamma.data * xhat + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _node(out, (x, gamma, beta), backward, "batch_norm")


def batch_norm_inference(x: Tensor, gamma: Tensor, beta: Tensor,
                         running_mean: np.ndarray, running_var: np.ndarray,
                         eps: float = 1e-5) -> Tensor:
    inv_std = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean) * inv_std
    out = gamma.data * xhat + beta.data
    return _node(out, (x, gamma, beta),
                 lambda g: (g * gamma.data * inv_std, (g * xhat).sum(axis=0), g.sum(axis=0)),
                 "batch_norm_inference")


# --- recurrence ------------------------------------------------------------

def _relu_rnn_forward(xw: np.ndarray, u: np.ndarray) -> np.ndarray:
    T, H = xw.shape
    h = np.empty((T, H))
    prev = np.zeros(H)
    for t in range(T):
        prev = np.maximum(xw[t] + prev @ u, 0.0)
        h[t] = prev
    return h


def _relu_rnn_backward(h: np.ndarray, u: np.ndarray, gh: np.ndarray) -> np.ndarray:
    """Returns d(loss)/d(pre-activation) for every step."""
    T, H = h.shape
    da = np.empty((T, H))
    carry = np.zeros(H)
    for t in range(T - 1, -1, -1):
        d = (gh[t] + carry) * (h[t] > 0)
        da[t] = d
        carry = d @ u.T
    return da


def bidirectional_rnn(x: Tensor, params: Sequence[Tensor]) -> Tensor:
    """Simple bidirectional recurrent layer with ReLU between timesteps.

    ``params`` is ``(w_fwd, u_fwd, b_fwd, w_bwd, u_bwd, b_bwd)`` with
    ``w[C, H]``, ``u[H, H]``, ``b[H]``.  Each direction computes
    ``h_t = relu(x_t @ w + h_prev @ u + b)`` from a zero initial state; the
    output is ``[h_fwd, h_bwd]`` on the feature axis, shape ``[T, 2H]``.
    """
    w_f, u_f, b_f, w_b, u_b, b_b = params
    if x.shape[0] == 0:
        raise ValueError("bidirectional_rnn needs a non-empty sequence")
    xd = x.data
    h_f = _relu_rnn_forward(xd @ w_f.data + b_f.data, u_f.data)
    h_b = _relu_rnn_forward(xd[::-1] @ w_b.data + b_b.data, u_b.data)
    H = h_f.shape[1]
    out = np.concatenate([h_f, h_b[::-1]], axis=1)

    def backward(g):
        da_f = _relu_rnn_backward(h_f, u_f.data, g[:, :H])
        da_b = _relu_rnn_backward(h_b, u_b.data, g[::-1, H:])
        dx = da_f @ w_f.data.T + (da_b @ w_b.data.T)[::-1]
        du_f = h_f[:-1].T @ da_f[1:]
        du_b = h_b[:-1].T @ da_b[1:]
        return (dx, xd.T @ da_f, du_f, da_f.sum(axis=0),
                xd[::-1].T @ da_b, du_b, da_b.sum(axis=0))

    return _node(out, (x, *params), backward, "bidirectional_rnn")


# --- losses ----------------------------------------------------------------

def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Register an op whose forward was computed outside this module."""
    return _node(np.asarray(data, dtype=np.float64), parents, backward, op)
