"""Small reverse-mode autodiff engine over numpy arrays.

Every kernel here is a plain function that takes :class:`Tensor` inputs and
returns a new :class:`Tensor` whose ``_backward`` closure pushes the output
gradient into its parents.  Everything runs in float64; float32 only appears
inside serialized artifacts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
NEG_INF = -np.inf


class DimensionError(ValueError):
    pass


class MaskedRowError(ValueError):
    """A softmax row had no admissible entry (every logit was -inf)."""


class DistributionError(ValueError):
    pass


class EvaluationError(ArithmeticError):
    pass


# --------------------------------------------------------------------------
# RNG
# --------------------------------------------------------------------------


@dataclass
class RngState:
    """Caller-owned counter-based RNG state.

    Draws go through numpy's Philox generator keyed by ``seed`` and
    positioned at ``counter``; every draw advances ``counter`` so the state
    can be checkpointed and replayed.
    """

    seed: int
    counter: int = 0

    def generator(self) -> np.random.Generator:
        bitgen = np.random.Philox(key=self.seed & (2**64 - 1), counter=self.counter)
        return np.random.Generator(bitgen)

    def _draw(self, fn: Callable[[np.random.Generator], np.ndarray]):
        gen = self.generator()
        out = fn(gen)
        # Philox counter is a 256-bit int spread over 4 words; we only ever
        # need the low word to advance.
        self.counter = int(gen.bit_generator.state["state"]["counter"][0])
        return out

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._draw(lambda g: g.normal(0.0, std, size=shape))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._draw(lambda g: g.uniform(low, high, size=shape))

    def integers(self, low: int, high: int, size=None):
        return self._draw(lambda g: g.integers(low, high, size=size))

    def permutation(self, n: int) -> np.ndarray:
        return self._draw(lambda g: g.permutation(n))

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._draw(lambda g: g.choice(n, size=size, replace=replace))

    def spawn(self, tag: int) -> "RngState":
        """Independent stream derived from this seed and an integer tag."""
        mixed = np.random.SeedSequence([self.seed & (2**64 - 1), tag]).generate_state(2, np.uint64)
        return RngState(int(mixed[0]), 0)


# --------------------------------------------------------------------------
# Tensor
# --------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward=None):
        arr = np.asarray(data)
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def _accumulate(self, g: np.ndarray, owned: bool = False) -> None:
        # owned=True: g is a fresh array nobody else holds, so it can be kept as-is
        if self.grad is None:
            self.grad = g if owned and g.dtype == DTYPE and g.shape == self.shape else np.array(g, dtype=DTYPE)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every upstream ``grad``.

        Leaves keep summing across calls; intermediate nodes are cleared
        first so a second pass through the same graph adds exactly one more
        contribution.
        """
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _toposort(self)
        for node in order:
            if node._backward is not None:
                node.grad = None
        self._accumulate(np.asarray(grad, dtype=DTYPE).reshape(self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar for the handful of cases the model needs
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=live, _backward=backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise / structural kernels
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape), owned=True)

    return _make(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c
    return _make(out, (a,), lambda g: a._accumulate(g * c, owned=True))


def sum_all(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,),
                 lambda g: a._accumulate(np.broadcast_to(g, a.shape)))


def mean_all(a: Tensor) -> Tensor:
    n = max(a.data.size, 1)
    return _make(np.asarray(a.data.sum() / n), (a,),
                 lambda g: a._accumulate(np.broadcast_to(g / n, a.shape)))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _make(out, (a,), lambda g: a._accumulate(g.transpose(inv)))


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape)
    return _make(out, (a,), lambda g: a._accumulate(_unbroadcast(g, a.shape)))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def backward(g):
        start = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, start + n)
                p._accumulate(g[tuple(idx)])
            start += n

    return _make(out, parts, backward)


def take(a: Tensor, index, axis: int) -> Tensor:
    """Gather along ``axis`` (slices or integer arrays); backward scatter-adds."""
    idx = [slice(None)] * a.ndim
    idx[axis] = index
    idx = tuple(idx)
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(out, (a,), backward)


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape), owned=True)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape), owned=True)

    return _make(out, (a, b), backward)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w.T`` for weights stored as [d_out, d_in]."""
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear shape mismatch: {x.shape} x {w.shape}^T")
    out = x.data @ w.data.T

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data, owned=True)
        if w.requires_grad:
            w._accumulate(g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1]), owned=True)

    return _make(out, (x, w), backward)


# --------------------------------------------------------------------------
# nonlinearities and normalisation
# --------------------------------------------------------------------------


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def backward(g):
        x._accumulate(g * (sig * (1.0 + x.data * (1.0 - sig))), owned=True)

    return _make(out, (x,), backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    normed = x.data * inv
    out = normed * gain.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * normed).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gn = g * gain.data
            dot = (gn * x.data).sum(axis=-1, keepdims=True)
            x._accumulate(inv * gn - x.data * (inv ** 3) * dot / d, owned=True)

    return _make(out, (x, gain), backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(full)

    return _make(out, (table,), backward)


def rope_tables(positions, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape [len(positions), head_dim // 2]."""
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=DTYPE) * 2.0 / head_dim)
    ang = np.asarray(positions, dtype=DTYPE)[..., None] * inv_freq
    return np.cos(ang), np.sin(ang)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate channel pairs (i, i + d/2) of ``x[..., T, d]`` by position angle."""
    half = x.shape[-1] // 2
    x1, x2 = x.data[..., :half], x.data[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def backward(g):
        g1, g2 = g[..., :half], g[..., half:]
        x._accumulate(np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1), owned=True)

    return _make(out, (x,), backward)


def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    m = x.max(axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):  # NaNs pass through and surface as a non-finite loss
        raise MaskedRowError("softmax row has no finite entry; attention mask is malformed")
    e = np.subtract(x, m)
    np.exp(e, out=e)
    e /= e.sum(axis=axis, keepdims=True)
    return e


def log_softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    m = x.max(axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise MaskedRowError("log_softmax row has no finite entry")
    z = x - m
    with np.errstate(divide="ignore"):
        return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, allow: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``allow`` (broadcastable boolean) marks admissible entries; the rest are
    treated as exact -inf and come out as exact zeros.
    """
    logits = x.data if allow is None else np.where(allow, x.data, NEG_INF)
    p = softmax_array(logits)

    def backward(g):
        gx = g * p
        gx -= p * gx.sum(axis=-1, keepdims=True)
        x._accumulate(gx, owned=True)

    return _make(p, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    out = log_softmax_array(x.data)
    p = np.exp(out)

    def backward(g):
        x._accumulate(g - p * g.sum(axis=-1, keepdims=True))

    return _make(out, (x,), backward)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def kl_divergence(p, q_logits: Tensor, atol: float = 1e-9) -> Tensor:
    """Mean over rows of KL(p || softmax(q_logits)); zero-probability terms drop out."""
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=DTYPE)
    q_logits = as_tensor(q_logits)
    if p.shape != q_logits.shape:
        raise DimensionError(f"kl_divergence shape mismatch: {p.shape} vs {q_logits.shape}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > atol):
        raise DistributionError("rows of p must be probability vectors (sum to 1 within 1e-9)")
    n_rows = max(int(np.prod(p.shape[:-1])), 1)
    logq = log_softmax_array(q_logits.data)
    pos = p > 0
    logp = np.zeros_like(p)
    logp[pos] = np.log(p[pos])
    terms = np.where(pos, p * (logp - logq), 0.0)
    out = np.asarray(terms.sum() / n_rows)
    q = np.exp(logq)

    def backward(g):
        q_logits._accumulate(g * (q * p.sum(axis=-1, keepdims=True) - p) / n_rows)

    return _make(out, (q_logits,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits[..., V]``."""
    targets = np.asarray(targets, dtype=np.int64)
    flat = logits.data.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    n = max(len(t), 1)
    logp = log_softmax_array(flat)
    out = np.asarray(-logp[np.arange(len(t)), t].sum() / n)

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(len(t)), t] -= 1.0
        logits._accumulate((g * grad / n).reshape(logits.shape))

    return _make(out, (logits,), backward)


def mse(a: Tensor, b) -> Tensor:
    b = as_tensor(b)
    diff = a.data - b.data
    n = max(diff.size, 1)
    out = np.asarray((diff * diff).sum() / n)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 2.0 * diff / n)
        if b.requires_grad:
            b._accumulate(-g * 2.0 * diff / n)

    return _make(out, (a, b), backward)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
               indices: Iterable[int] | None = None) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``indices`` restricts the comparison to a subset of flat positions of
    ``x`` (useful for large parameter tensors).  The relative error uses the
    denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    x.requires_grad = True
    saved_grad = x.grad
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    if not np.all(np.isfinite(out.data)):
        raise EvaluationError("f(x) is not finite")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = saved_grad

    flat = x.data.reshape(-1)
    positions = range(flat.size) if indices is None else list(indices)
    worst = 0.0
    for i in positions:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data)
        flat[i] = orig - eps
        fm = float(f(x).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"f is not finite around flat index {i}")
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        denom = max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, abs(a - numeric) / denom)
    return worst


def place_rows(base: Tensor, rows: Tensor, positions) -> Tensor:
    """Copy of ``base[..., L, d]`` with ``base[..., positions, :]`` replaced by ``rows``."""
    positions = np.asarray(positions, dtype=np.int64)
    out = base.data.copy()
    out[..., positions, :] = rows.data

    def backward(g):
        if base.requires_grad:
            gb = g.copy()
            gb[..., positions, :] = 0.0
            base._accumulate(gb)
        if rows.requires_grad:
            rows._accumulate(_unbroadcast(g[..., positions, :], rows.shape))

    return _make(out, (base, rows), backward)
