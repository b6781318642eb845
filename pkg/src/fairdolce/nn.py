"""Small dense networks with exact reverse-mode gradients and Adam.

Everything runs in float64 on row-major batches: a batch of ``n`` inputs of
width ``k`` is an ``(n, k)`` array and a dense layer computes
``act(x @ W + b)``.

Training code records forward computations on a :class:`Tape`; evaluation
code uses the plain numpy forward functions (:func:`forward` and the
``encode_*``/``decode``/``classify`` helpers), which perform the same
arithmetic in the same order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

LEAKY_SLOPE = 0.01
ACTIVATIONS = ("leaky_relu", "relu", "sigmoid", "identity")
_SIGMOID_LO = float(np.nextafter(0.0, 1.0))
_SIGMOID_HI = float(np.nextafter(1.0, 0.0))

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_VERSION = 1

# (dW, db) per layer, same order as DenseBlock.layers
BlockGrads = list[tuple[np.ndarray, np.ndarray]]


# --------------------------------------------------------------------------
# activations


def _activate(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == "leaky_relu":
        return np.where(x > 0, x, LEAKY_SLOPE * x)
    if activation == "relu":
        return np.where(x > 0, x, 0.0)
    if activation == "sigmoid":
        return _sigmoid(x)
    if activation == "identity":
        return x
    raise ValueError(f"unknown activation {activation!r}")


def _activation_grad(x: np.ndarray, y: np.ndarray, activation: str) -> np.ndarray:
    # x is the pre-activation, y the activation output; kinks take the lower branch
    if activation == "leaky_relu":
        return np.where(x > 0, 1.0, LEAKY_SLOPE)
    if activation == "relu":
        return np.where(x > 0, 1.0, 0.0)
    if activation == "sigmoid":
        return y * (1.0 - y)
    return np.ones_like(x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep the open interval (0, 1) once float64 saturates
    return np.clip(out, _SIGMOID_LO, _SIGMOID_HI)


# --------------------------------------------------------------------------
# parameter containers


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class AdamState:
    """Per-parameter Adam accumulators, ordered (W0, b0, W1, b1, ...)."""

    first_moment: tuple[np.ndarray, ...]
    second_moment: tuple[np.ndarray, ...]
    step_count: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    epsilon_adam: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray]) -> "AdamState":
        return cls(
            first_moment=tuple(np.zeros_like(a) for a in arrays),
            second_moment=tuple(np.zeros_like(a) for a in arrays),
        )


@dataclass(frozen=True)
class DenseBlock:
    layers: tuple[Layer, ...]
    adam: AdamState = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("a dense block needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(
                    f"layer dimensions do not compose: {prev.out_dim} -> {nxt.in_dim}"
                )
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.out_dim,):
                raise ValueError("bias shape does not match layer output")
        if self.adam is None:
            object.__setattr__(self, "adam", AdamState.zeros_like(self.arrays()))

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_arrays(self, arrays: Sequence[np.ndarray], adam: AdamState | None = None) -> "DenseBlock":
        layers = tuple(
            Layer(arrays[2 * i], arrays[2 * i + 1], layer.activation)
            for i, layer in enumerate(self.layers)
        )
        return DenseBlock(layers, self.adam if adam is None else adam)


def init_block(
    dims: Sequence[int],
    activations: Sequence[str],
    rng: np.random.Generator,
) -> DenseBlock:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    if len(dims) != len(activations) + 1:
        raise ValueError("need one activation per layer")
    if any(d < 1 for d in dims):
        raise ValueError(f"nonpositive dimension in {list(dims)}")
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append(Layer(w, b, act))
    return DenseBlock(tuple(layers))


def zeros_grads(block: DenseBlock) -> BlockGrads:
    return [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in block.layers]


# --------------------------------------------------------------------------
# plain forward passes


def forward(block: DenseBlock, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != block.in_dim:
        raise ValueError(f"expected input width {block.in_dim}, got {h.shape[1]}")
    for layer in block.layers:
        h = _activate(h @ layer.weight + layer.bias, layer.activation)
    return h[0] if single else h


def encode_semantic(semantic_block: DenseBlock, x: np.ndarray) -> np.ndarray:
    """Semantic factor s = h_s(x)."""
    return forward(semantic_block, x)


def encode_variation(variation_block: DenseBlock, x: np.ndarray) -> np.ndarray:
    """Variation factor v = h_v(x)."""
    return forward(variation_block, x)


def decode(decoder_block: DenseBlock, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if s.shape[-1] + v.shape[-1] != decoder_block.in_dim:
        raise ValueError(
            f"|s| + |v| = {s.shape[-1] + v.shape[-1]} does not match decoder input {decoder_block.in_dim}"
        )
    return forward(decoder_block, np.concatenate([s, v], axis=-1))


def classify(classifier_block: DenseBlock, s: np.ndarray) -> np.ndarray | float:
    """Sigmoid score; a single latent vector gives a float, a batch a 1-d array."""
    out = forward(classifier_block, s)
    if out.shape[-1] != 1:
        raise ValueError("classifier must produce a single score")
    return float(out[0]) if out.ndim == 1 else out[:, 0]


# --------------------------------------------------------------------------
# reverse-mode tape


class Node:
    __slots__ = ("value", "parents", "backward_fn", "tape", "index")

    def __init__(self, value, parents, backward_fn, tape: "Tape"):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return np.shape(self.value)


class Tape:
    """Records a forward computation so gradients of a scalar can be pulled back.

    Nodes are appended in creation order, which is a valid topological order,
    so :meth:`backward` simply walks the list in reverse.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        # smallest |input| seen by any kinked op (leaky_relu, relu, abs)
        self.kink_margin = np.inf

    def leaf(self, value) -> Node:
        return Node(np.asarray(value, dtype=np.float64), (), None, self)

    def _note_kink(self, x: np.ndarray) -> None:
        if x.size:
            self.kink_margin = min(self.kink_margin, float(np.min(np.abs(x))))

    def backward(self, root: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
        if not self.nodes:
            raise RuntimeError("backward called without a recorded forward computation")
        if root.tape is not self or root.index >= len(self.nodes) or self.nodes[root.index] is not root:
            raise RuntimeError("loss was not recorded on this tape")
        if np.size(root.value) != 1:
            raise ValueError("backward needs a scalar loss")
        grads: dict[int, np.ndarray] = {root.index: np.ones_like(root.value)}
        for node in reversed(self.nodes[: root.index + 1]):
            g = grads.pop(node.index, None)
            if g is None or node.backward_fn is None:
                if g is not None:
                    grads[node.index] = g  # keep leaf grads
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None:
                    continue
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg
        return [grads.get(n.index, np.zeros_like(n.value)) for n in wrt]


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def affine(x: Node, w: Node, b: Node) -> Node:
    xv, wv = x.value, w.value

    def back(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return Node(xv @ wv + b.value, (x, w, b), back, x.tape)


def activate(x: Node, activation: str) -> Node:
    if activation in ("leaky_relu", "relu"):
        x.tape._note_kink(x.value)
    y = _activate(x.value, activation)
    if activation == "identity":
        return x

    def back(g):
        return (g * _activation_grad(x.value, y, activation),)

    return Node(y, (x,), back, x.tape)


def concat(a: Node, b: Node) -> Node:
    k = a.value.shape[1]

    def back(g):
        return g[:, :k], g[:, k:]

    return Node(np.concatenate([a.value, b.value], axis=1), (a, b), back, a.tape)


def add(a: Node, b: Node) -> Node:
    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Node(a.value + b.value, (a, b), back, a.tape)


def sub(a: Node, b: Node) -> Node:
    def back(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return Node(a.value - b.value, (a, b), back, a.tape)


def scale(a: Node, c: float) -> Node:
    return Node(a.value * c, (a,), lambda g: (g * c,), a.tape)


def square(a: Node) -> Node:
    return Node(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,), a.tape)


def l1_rows(a: Node) -> Node:
    """Row-wise l1 norm of a 2-d node; sign(0) is taken as 0."""
    a.tape._note_kink(a.value)
    sign = np.sign(a.value)
    return Node(np.abs(a.value).sum(axis=1), (a,), lambda g: (g[:, None] * sign,), a.tape)


def column(a: Node, j: int = 0) -> Node:
    shape = a.value.shape

    def back(g):
        out = np.zeros(shape)
        out[:, j] = g
        return (out,)

    return Node(a.value[:, j], (a,), back, a.tape)


def mean(a: Node) -> Node:
    n = a.value.size
    if n == 0:
        raise ValueError("mean of an empty node")
    shape = a.value.shape
    return Node(np.asarray(a.value.mean()), (a,), lambda g: (np.full(shape, g / n),), a.tape)


def dot_const(a: Node, w: np.ndarray) -> Node:
    """Scalar sum(a * w) with a constant weight vector."""
    w = np.asarray(w, dtype=np.float64)
    return Node(np.asarray(np.dot(a.value, w)), (a,), lambda g: (g * w,), a.tape)


def binary_cross_entropy(score: Node, label: np.ndarray, clamp: float = 1e-12) -> Node:
    """Elementwise -y log p - (1-y) log(1-p) with p clamped to [clamp, 1-clamp]."""
    p = score.value
    y = np.asarray(label, dtype=np.float64)
    pc = np.clip(p, clamp, 1.0 - clamp)
    inside = (p >= clamp) & (p <= 1.0 - clamp)
    val = -y * np.log(pc) - (1.0 - y) * np.log(1.0 - pc)

    def back(g):
        return (g * np.where(inside, -y / pc + (1.0 - y) / (1.0 - pc), 0.0),)

    return Node(val, (score,), back, score.tape)


@dataclass
class TracedBlock:
    """A DenseBlock whose arrays live on a tape as leaves."""

    block: DenseBlock
    params: list[tuple[Node, Node]]

    def __call__(self, x: Node) -> Node:
        if x.value.shape[1] != self.block.in_dim:
            raise ValueError(f"expected input width {self.block.in_dim}, got {x.value.shape[1]}")
        h = x
        for (w, b), layer in zip(self.params, self.block.layers):
            h = activate(affine(h, w, b), layer.activation)
        return h

    def leaves(self) -> list[Node]:
        return [n for pair in self.params for n in pair]


def trace_block(tape: Tape, block: DenseBlock) -> TracedBlock:
    return TracedBlock(block, [(tape.leaf(l.weight), tape.leaf(l.bias)) for l in block.layers])


def backward(tape: Tape, loss: Node, blocks: Sequence[TracedBlock]) -> list[BlockGrads]:
    """Gradients of a recorded scalar ``loss`` for every parameter of ``blocks``.

    Parameters the loss does not depend on get zero gradients.
    """
    leaves = [n for tb in blocks for n in tb.leaves()]
    flat = tape.backward(loss, leaves)
    out: list[BlockGrads] = []
    pos = 0
    for tb in blocks:
        grads = []
        for _ in tb.params:
            grads.append((flat[pos], flat[pos + 1]))
            pos += 2
        out.append(grads)
    return out


# --------------------------------------------------------------------------
# Adam


def adam_step(block: DenseBlock, grads: BlockGrads, lr: float) -> DenseBlock:
    """One bias-corrected Adam step; returns a new block carrying the new state."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(grads) != len(block.layers):
        raise ValueError("gradient blocks do not match parameter blocks")
    flat_grads = []
    for (gw, gb), layer in zip(grads, block.layers):
        if np.shape(gw) != layer.weight.shape or np.shape(gb) != layer.bias.shape:
            raise ValueError("gradient shape does not match parameter shape")
        flat_grads.extend((np.asarray(gw, dtype=np.float64), np.asarray(gb, dtype=np.float64)))

    st = block.adam
    step = st.step_count + 1
    c1 = 1.0 - st.beta1**step
    c2 = 1.0 - st.beta2**step
    new_arrays, m_out, v_out = [], [], []
    for p, g, m, v in zip(block.arrays(), flat_grads, st.first_moment, st.second_moment):
        m = st.beta1 * m + (1.0 - st.beta1) * g
        v = st.beta2 * v + (1.0 - st.beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        new_arrays.append(p - lr * m_hat / (np.sqrt(v_hat) + st.epsilon_adam))
        m_out.append(m)
        v_out.append(v)
    new_state = replace(st, first_moment=tuple(m_out), second_moment=tuple(v_out), step_count=step)
    return block.with_arrays(new_arrays, new_state)


# --------------------------------------------------------------------------
# checkpoints


def save_blocks(path: str | Path, blocks: dict[str, DenseBlock]) -> None:
    """Write blocks (in insertion order) to an ``.npz`` file with a JSON header."""
    header = {"format_version": CHECKPOINT_VERSION, "blocks": []}
    arrays: dict[str, np.ndarray] = {}
    for name, block in blocks.items():
        st = block.adam
        header["blocks"].append(
            {
                "name": name,
                "dims": [block.in_dim] + [l.out_dim for l in block.layers],
                "activations": [l.activation for l in block.layers],
                "adam": {
                    "step_count": st.step_count,
                    "beta1": st.beta1,
                    "beta2": st.beta2,
                    "epsilon_adam": st.epsilon_adam,
                },
            }
        )
        for i, a in enumerate(block.arrays()):
            arrays[f"{name}/p{i}"] = a
            arrays[f"{name}/m{i}"] = st.first_moment[i]
            arrays[f"{name}/v{i}"] = st.second_moment[i]
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_blocks(path: str | Path) -> dict[str, DenseBlock]:
    with np.load(path) as data:
        header = json.loads(data["__header__"].tobytes().decode())
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
        out = {}
        for spec in header["blocks"]:
            name = spec["name"]
            n = 2 * len(spec["activations"])
            p = [data[f"{name}/p{i}"] for i in range(n)]
            m = tuple(data[f"{name}/m{i}"] for i in range(n))
            v = tuple(data[f"{name}/v{i}"] for i in range(n))
            dims = spec["dims"]
            layers = []
            for i, act in enumerate(spec["activations"]):
                w, b = p[2 * i], p[2 * i + 1]
                if w.shape != (dims[i], dims[i + 1]):
                    raise ValueError(f"checkpoint block {name!r} has inconsistent dimensions")
                layers.append(Layer(w, b, act))
            adam = AdamState(first_moment=m, second_moment=v, **spec["adam"])
            out[name] = DenseBlock(tuple(layers), adam)
    return out

