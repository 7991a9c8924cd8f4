"""Reverse-mode automatic differentiation on an append-only tape, the MLP
control network, and the Adam optimizer.

Nodes record numpy arrays; the tape's append order is a topological order, so
the backward sweep is a single reverse pass. Values and adjoints are released
as the sweep consumes them, keeping peak memory near the forward pass alone.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tape",
    "Node",
    "GradientError",
    "ControlNet",
    "AdamState",
    "adam_step",
    "backward",
]


class GradientError(RuntimeError):
    """Raised on non-finite gradients or misuse of a consumed tape."""


class Node:
    """One recorded value; adjoint is filled by the backward sweep."""

    __slots__ = ("value", "parents", "vjp", "adjoint")

    def __init__(self, value, parents=(), vjp=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.adjoint = None


def _unbroadcast(adj: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an adjoint back down to the shape it was broadcast from."""
    if adj.shape == shape:
        return adj
    extra = adj.ndim - len(shape)
    if extra > 0:
        adj = adj.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and adj.shape[i] != 1)
    if keep:
        adj = adj.sum(axis=keep, keepdims=True)
    return adj


class Tape:
    """Append-only record of one differentiable computation."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False

    def leaf(self, value: np.ndarray) -> Node:
        node = Node(np.asarray(value, dtype=np.float64))
        self.nodes.append(node)
        return node

    def _record(self, value, parents, vjp) -> Node:
        node = Node(value, parents, vjp)
        self.nodes.append(node)
        return node

    # -- primitives ---------------------------------------------------------

    def add(self, a: Node, b) -> Node:
        if isinstance(b, Node):
            out = a.value + b.value

            def vjp(adj):
                return (
                    (a, _unbroadcast(adj, a.value.shape)),
                    (b, _unbroadcast(adj, b.value.shape)),
                )

            return self._record(out, (a, b), vjp)
        const = np.asarray(b, dtype=np.float64)
        return self._record(
            a.value + const, (a,), lambda adj: ((a, _unbroadcast(adj, a.value.shape)),)
        )

    def sub(self, a: Node, b: Node) -> Node:
        out = a.value - b.value

        def vjp(adj):
            return (
                (a, _unbroadcast(adj, a.value.shape)),
                (b, _unbroadcast(-adj, b.value.shape)),
            )

        return self._record(out, (a, b), vjp)

    def mul(self, a: Node, b) -> Node:
        if isinstance(b, Node):
            av, bv = a.value, b.value
            out = av * bv

            def vjp(adj):
                return (
                    (a, _unbroadcast(adj * bv, av.shape)),
                    (b, _unbroadcast(adj * av, bv.shape)),
                )

            return self._record(out, (a, b), vjp)
        const = np.asarray(b, dtype=np.float64)
        return self._record(
            a.value * const,
            (a,),
            lambda adj: ((a, _unbroadcast(adj * const, a.value.shape)),),
        )

    def matmul(self, a: Node, w: Node) -> Node:
        """a @ w with both sides on the tape."""
        av, wv = a.value, w.value
        out = av @ wv

        def vjp(adj):
            return ((a, adj @ wv.T), (w, av.T @ adj))

        return self._record(out, (a, w), vjp)

    def matmul_const(self, a: Node, const: np.ndarray) -> Node:
        const = np.asarray(const, dtype=np.float64)
        return self._record(
            a.value @ const, (a,), lambda adj: ((a, adj @ const.T),)
        )

    def matmul_t(self, a: Node, b: Node) -> Node:
        """a @ b.T; the workhorse of pairwise-distance assembly."""
        av, bv = a.value, b.value
        out = av @ bv.T

        def vjp(adj):
            return ((a, adj @ bv), (b, adj.T @ av))

        return self._record(out, (a, b), vjp)

    def matmul_t_const(self, a: Node, const: np.ndarray) -> Node:
        const = np.asarray(const, dtype=np.float64)
        return self._record(
            a.value @ const.T, (a,), lambda adj: ((a, adj @ const),)
        )

    def tanh(self, a: Node) -> Node:
        out = np.tanh(a.value)
        return self._record(out, (a,), lambda adj: ((a, adj * (1.0 - out * out)),))

    def exp(self, a: Node) -> Node:
        out = np.exp(a.value)
        return self._record(out, (a,), lambda adj: ((a, adj * out),))

    def square(self, a: Node) -> Node:
        av = a.value
        return self._record(av * av, (a,), lambda adj: ((a, adj * (2.0 * av)),))

    def sum(self, a: Node, axis=None, keepdims: bool = False) -> Node:
        av = a.value
        out = av.sum(axis=axis, keepdims=keepdims)

        def vjp(adj):
            g = np.asarray(adj)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return ((a, np.broadcast_to(g, av.shape).copy()),)

        return self._record(out, (a,), vjp)

    def mean(self, a: Node, axis=None, keepdims: bool = False) -> Node:
        av = a.value
        out = av.mean(axis=axis, keepdims=keepdims)
        count = av.size if axis is None else av.shape[axis]

        def vjp(adj):
            g = np.asarray(adj) / count
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return ((a, np.broadcast_to(g, av.shape).copy()),)

        return self._record(out, (a,), vjp)

    def hstack_const(self, const_col: np.ndarray, a: Node) -> Node:
        """[const | a] along columns; constants take no adjoint."""
        const_col = np.asarray(const_col, dtype=np.float64)
        width = const_col.shape[1]
        out = np.concatenate([const_col, a.value], axis=1)
        return self._record(out, (a,), lambda adj: ((a, adj[:, width:]),))

    def gather_rows(self, a: Node, index: np.ndarray) -> Node:
        index = np.asarray(index, dtype=np.intp)
        av = a.value

        def vjp(adj):
            g = np.zeros_like(av)
            np.add.at(g, index, adj)
            return ((a, g),)

        return self._record(av[index], (a,), vjp)


def backward(tape: Tape, loss: Node, wrt: list[Node], *, release: bool = True) -> list[np.ndarray]:
    """Adjoints of a scalar loss with respect to the given leaves.

    The tape is consumed: one reverse pass in append order, each node visited
    once. Nodes unreachable from the loss keep a zero adjoint.
    """
    if tape.consumed:
        raise GradientError("tape already consumed by a previous backward pass")
    if np.ndim(loss.value) != 0 and np.size(loss.value) != 1:
        raise GradientError("loss node must be scalar")
    tape.consumed = True
    loss.adjoint = np.ones_like(np.asarray(loss.value, dtype=np.float64))
    keep = set(map(id, wrt))
    for node in reversed(tape.nodes):
        adj = node.adjoint
        if adj is None or node.vjp is None:
            continue
        for parent, contrib in node.vjp(adj):
            if parent.adjoint is None:
                parent.adjoint = contrib
            else:
                parent.adjoint = parent.adjoint + contrib
        if release:
            node.vjp = None
            node.parents = ()
            node.value = None
            if id(node) not in keep:
                node.adjoint = None
    grads = []
    for leaf in wrt:
        if leaf.adjoint is None:
            grads.append(np.zeros_like(leaf.value))
        else:
            grads.append(np.asarray(leaf.adjoint, dtype=np.float64))
    return grads


# ---------------------------------------------------------------------------
# Control network
# ---------------------------------------------------------------------------

_CKPT_MAGIC = 0x4D4D42434B5054  # "MMBCKPT"
_CKPT_VERSION = 1


class ControlNet:
    """MLP u(t, x): input (t, x) in R^(1+d), tanh hidden layers, linear output.

    tanh keeps the realized control bounded with bounded derivative, which the
    Girsanov-type rollout needs; weights start Glorot-uniform with zero biases
    so the controlled dynamics begin near the base process.
    """

    def __init__(self, dims: list[int], *, rng: np.random.Generator | None = None):
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        self.dims = list(int(v) for v in dims)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        rng = rng or np.random.default_rng(0)
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def state_dim(self) -> int:
        return self.dims[0] - 1

    @property
    def output_dim(self) -> int:
        return self.dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def theta(self) -> np.ndarray:
        """Parameters flattened layer by layer, weights (row-major) then bias."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_theta(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.param_count():
            raise ValueError("parameter vector has wrong length")
        pos = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = theta[pos : pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[i] = theta[pos : pos + b.size].copy()
            pos += b.size

    def forward(self, t: float, x: np.ndarray) -> np.ndarray:
        """Control value at a single (t, x)."""
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        if x.shape != (self.state_dim,):
            raise ValueError(f"state must have dimension {self.state_dim}")
        return self.forward_batch(t, x.reshape(1, -1))[0]

    def forward_batch(self, t: float | np.ndarray, X: np.ndarray) -> np.ndarray:
        """Vectorized control over rows of X, without recording a tape."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        tcol = np.broadcast_to(np.asarray(t, dtype=np.float64), (X.shape[0],)).reshape(-1, 1)
        h = np.concatenate([tcol, X], axis=1)
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.tanh(h)
        return h

    def leaves(self, tape: Tape) -> list[Node]:
        """Parameter leaves on a tape, in theta order (W then b per layer)."""
        nodes = []
        for w, b in zip(self.weights, self.biases):
            nodes.append(tape.leaf(w))
            nodes.append(tape.leaf(b))
        return nodes

    def forward_tape(self, tape: Tape, leaves: list[Node], t: float, X: Node) -> Node:
        """Tape-recorded control for a batch node X of shape (M, d)."""
        n_rows = X.value.shape[0]
        tcol = np.full((n_rows, 1), float(t))
        h = tape.hstack_const(tcol, X)
        last = self.n_layers - 1
        for i in range(self.n_layers):
            w, b = leaves[2 * i], leaves[2 * i + 1]
            h = tape.add(tape.matmul(h, w), b)
            if i < last:
                h = tape.tanh(h)
        return h

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<3Q", _CKPT_MAGIC, _CKPT_VERSION, len(self.dims)))
            fh.write(struct.pack(f"<{len(self.dims)}Q", *self.dims))
            fh.write(self.theta().astype("<f8").tobytes())

    @staticmethod
    def load(path: str) -> "ControlNet":
        with open(path, "rb") as fh:
            magic, version, ndims = struct.unpack("<3Q", fh.read(24))
            if magic != _CKPT_MAGIC:
                raise ValueError("not a control-net checkpoint")
            if version != _CKPT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            dims = struct.unpack(f"<{ndims}Q", fh.read(8 * ndims))
            theta = np.frombuffer(fh.read(), dtype="<f8")
        net = ControlNet(list(dims))
        net.set_theta(theta)
        return net

    @staticmethod
    def equal_width_dims(state_dim: int, output_dim: int, hidden_layers: int, width: int) -> list[int]:
        return [1 + state_dim] + [width] * hidden_layers + [output_dim]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Moment estimates for Adam; bias correction applied every step."""

    learning_rate: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def fresh(n_params: int, learning_rate: float) -> "AdamState":
        return AdamState(
            learning_rate=learning_rate,
            m=np.zeros(n_params),
            v=np.zeros(n_params),
        )


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray) -> tuple[np.ndarray, AdamState]:
    """One Adam update; returns the new parameters and advanced state."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape:
        raise ValueError("gradient and parameter shapes differ")
    if not np.all(np.isfinite(grad)):
        bad = int(np.count_nonzero(~np.isfinite(grad)))
        raise GradientError(f"non-finite gradient in {bad} of {grad.size} coordinates")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_theta = theta - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(
        learning_rate=state.learning_rate,
        m=m,
        v=v,
        step=t,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
    )
    return new_theta, new_state
