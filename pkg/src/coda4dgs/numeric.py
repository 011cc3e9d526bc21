"""Small differentiable toolkit: affine layers, activations, Adam, gradient checks.

Every differentiable piece follows the same contract: ``forward(*inputs)``
returns ``(out, cache)`` and ``backward(cache, grad_out)`` returns one gradient
per input.  There is no tape; larger pipelines chain these by hand.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class FormatError(ValueError):
    """Malformed binary file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


@dataclass
class ParamBlock:
    name: str
    values: np.ndarray
    grad: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        if self.grad.shape != self.values.shape:
            raise ShapeError(f"{self.name}: grad shape {self.grad.shape} != {self.values.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def for_block(cls, block: ParamBlock) -> "AdamState":
        return cls(np.zeros_like(block.values), np.zeros_like(block.values))


def adam_step(param: ParamBlock, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in place; clears ``param.grad`` afterwards."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient in parameter block {param.name!r}")
    state.step_count += 1
    k = state.step_count
    m, v = state.first_moment, state.second_moment
    m *= state.beta1
    m += (1.0 - state.beta1) * g
    v *= state.beta2
    v += (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**k)
    v_hat = v / (1.0 - state.beta2**k)
    param.values -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    param.zero_grad()


def exponential_lr(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    if total_steps <= 1:
        return lr_start
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return float(lr_start * (lr_end / lr_start) ** frac)


# ---------------------------------------------------------------- affine


def affine_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``W @ x + b``; ``x`` may be a single vector or a batch of row vectors."""
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"affine: W{W.shape}, b{b.shape}, x{x.shape} are incompatible")
    return x @ W.T + b


def affine_backward(W, b, x, grad_out):
    """Gradients of ``affine_forward`` w.r.t. (W, b, x)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    if x.ndim == 1:
        return np.outer(g, x), g.copy(), W.T @ g
    return g.T @ x, g.sum(axis=0), g @ W


class Affine:
    @staticmethod
    def forward(W, b, x):
        return affine_forward(W, b, x), (W, b, x)

    @staticmethod
    def backward(cache, grad_out):
        return affine_backward(*cache, grad_out)


# ----------------------------------------------------------- activations

ACTIVATIONS = ("relu", "sigmoid", "exp", "sin", "identity")


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(kind: str, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite input to {kind}")
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "exp":
        return np.exp(x)
    if kind == "sin":
        return np.sin(x)
    if kind == "identity":
        return x.copy()
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(kind: str, x, y, grad_out) -> np.ndarray:
    """Gradient w.r.t. the input given input ``x`` and output ``y``."""
    if kind == "relu":
        return grad_out * (x > 0)
    if kind == "sigmoid":
        return grad_out * y * (1.0 - y)
    if kind == "exp":
        return grad_out * y
    if kind == "sin":
        return grad_out * np.cos(x)
    if kind == "identity":
        return np.array(grad_out, dtype=np.float64)
    raise ValueError(f"unknown activation {kind!r}")


class Activation:
    def __init__(self, kind: str):
        self.kind = kind

    def forward(self, x):
        y = activation(self.kind, x)
        return y, (x, y)

    def backward(self, cache, grad_out):
        x, y = cache
        return (activation_backward(self.kind, x, y, grad_out),)


class Chain:
    """Composition of single-input ops, used to check deeper stacks."""

    def __init__(self, ops: Sequence):
        self.ops = list(ops)

    def forward(self, x):
        caches = []
        for op in self.ops:
            x, c = op.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, caches, grad_out):
        g = grad_out
        for op, c in zip(reversed(self.ops), reversed(caches)):
            (g,) = op.backward(c, g)
        return (g,)


# -------------------------------------------------------------- reductions


class Mean:
    @staticmethod
    def forward(x):
        x = np.asarray(x, dtype=np.float64)
        return np.float64(x.mean()), x.shape

    @staticmethod
    def backward(shape, grad_out):
        return (np.full(shape, float(grad_out) / int(np.prod(shape))),)


class SumSquares:
    @staticmethod
    def forward(x):
        x = np.asarray(x, dtype=np.float64)
        return np.float64(np.sum(x * x)), x

    @staticmethod
    def backward(x, grad_out):
        return (2.0 * float(grad_out) * x,)


# -------------------------------------------------------- linear layers


def linear_block(name: str, n_in: int, n_out: int, rng: np.random.Generator | None,
                 zero: bool = False) -> ParamBlock:
    """One affine layer stored as a single ``(n_out, n_in + 1)`` block, bias last."""
    values = np.zeros((n_out, n_in + 1))
    if not zero:
        bound = 1.0 / np.sqrt(n_in)
        values[:, :n_in] = rng.uniform(-bound, bound, size=(n_out, n_in))
        values[:, n_in] = rng.uniform(-bound, bound, size=n_out)
    return ParamBlock(name, values)


def linear(block: ParamBlock, x: np.ndarray) -> np.ndarray:
    v = block.values
    if x.shape[-1] != v.shape[1] - 1:
        raise ShapeError(f"{block.name}: expects width {v.shape[1] - 1}, got {x.shape[-1]}")
    # one product per row: a row's result never depends on which other rows share the
    # batch, so evaluating a subset of Gaussians reproduces the full batch bit for bit
    return np.matmul(x[..., None, :], v[:, :-1].T)[..., 0, :] + v[:, -1]


def linear_backward(block: ParamBlock, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    v = block.values
    block.grad[:, :-1] += grad_out.T @ x
    block.grad[:, -1] += grad_out.sum(axis=0)
    return grad_out @ v[:, :-1]


@dataclass
class MLP:
    """Stack of linear layers with one activation between them (none after the last)."""

    layers: list[ParamBlock]
    hidden: str = "relu"

    @classmethod
    def build(cls, prefix: str, widths: Sequence[int], rng: np.random.Generator,
              zero_last: bool = False, hidden: str = "relu") -> "MLP":
        layers = []
        n = len(widths) - 1
        for i in range(n):
            layers.append(linear_block(f"{prefix}/layer{i}", widths[i], widths[i + 1], rng,
                                       zero=zero_last and i == n - 1))
        return cls(layers, hidden)

    @property
    def in_width(self) -> int:
        return self.layers[0].shape[1] - 1

    @property
    def out_width(self) -> int:
        return self.layers[-1].shape[0]

    def forward(self, x: np.ndarray):
        inputs, pre = [], []
        h = x
        for i, layer in enumerate(self.layers):
            inputs.append(h)
            z = linear(layer, h)
            if i < len(self.layers) - 1:
                pre.append(z)
                h = activation(self.hidden, z)
            else:
                h = z
        return h, (inputs, pre)

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        inputs, pre = cache
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            g = linear_backward(self.layers[i], inputs[i], g)
            if i > 0:
                z = pre[i - 1]
                g = activation_backward(self.hidden, z, inputs[i], g)
        return g

    def blocks(self) -> list[ParamBlock]:
        return list(self.layers)


# ----------------------------------------------------------- grad check


def grad_check(op, inputs: Sequence, eps: float = 1e-5, seed: int = 0,
               wrt: Sequence[int] | None = None) -> float:
    """Max relative error between ``op.backward`` and central differences.

    The output is reduced to a scalar by a fixed random projection so every
    output coordinate is exercised.  Error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    out, cache = op.forward(*inputs)
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite forward output")
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(out.shape)
    analytic = op.backward(cache, proj if out.ndim else float(proj))
    idx = range(len(inputs)) if wrt is None else wrt
    worst = 0.0
    for k in idx:
        x = inputs[k]
        ga = np.asarray(analytic[k], dtype=np.float64)
        flat = x.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(np.sum(proj * np.asarray(op.forward(*inputs)[0])))
            flat[j] = orig - eps
            fm = float(np.sum(proj * np.asarray(op.forward(*inputs)[0])))
            flat[j] = orig
            num = (fp - fm) / (2 * eps)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("non-finite value during finite differencing")
            err = abs(ga.reshape(-1)[j] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst


class FunctionOp:
    """Adapter for plain ``f(*inputs) -> out`` / ``g(*inputs, grad_out) -> grads`` pairs."""

    def __init__(self, f: Callable, g: Callable):
        self.f, self.g = f, g

    def forward(self, *inputs):
        return self.f(*inputs), inputs

    def backward(self, cache, grad_out):
        return self.g(*cache, grad_out)


# -------------------------------------------------------- serialization


def pack_blocks(blocks: Sequence[ParamBlock]) -> bytes:
    """Name, shape, then little-endian float64 data for every block."""
    out = [struct.pack("<I", len(blocks))]
    for b in blocks:
        name = b.name.encode("utf-8")
        out.append(struct.pack("<I", len(name)))
        out.append(name)
        out.append(struct.pack("<I", b.values.ndim))
        out.append(struct.pack(f"<{b.values.ndim}Q", *b.values.shape))
        out.append(np.ascontiguousarray(b.values, dtype="<f8").tobytes())
    return b"".join(out)


@dataclass
class _Reader:
    data: bytes
    pos: int = 0
    base: int = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what}", self.base + self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def unpack_blocks(data: bytes, base_offset: int = 0) -> tuple[list[ParamBlock], int]:
    r = _Reader(data, 0, base_offset)
    (count,) = r.unpack("<I", "block count")
    blocks = []
    for _ in range(count):
        (nlen,) = r.unpack("<I", "block name length")
        name = r.take(nlen, "block name").decode("utf-8")
        (ndim,) = r.unpack("<I", f"rank of {name}")
        shape = r.unpack(f"<{ndim}Q", f"shape of {name}") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        raw = r.take(8 * n, f"data of {name}")
        values = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        blocks.append(ParamBlock(name, values))
    return blocks, r.pos

