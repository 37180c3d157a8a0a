"""Dense float64 tensors with a reverse-mode gradient tape.

Everything in this package (CF encoders, the query generator, the toy LM)
is built from the ops below. Values are always float64 and row-major; a
Tensor produced by an op remembers its parents and a backward closure, and
``Tensor.backward()`` walks the tape in reverse topological order.

Design constraints honoured here:
  * gradients are checked against central finite differences (``grad_check``),
    so every backward closure is written for correctness, not speed;
  * masked softmax keeps +/-inf out of tensor payloads entirely (masked slots
    are exactly 0 after normalization);
  * all randomness flows through ``Rng``, a counter-based splitmix64 stream,
    so a seed pins runs bit for bit.
"""

from __future__ import annotations

import threading

import numpy as np


class NumericsError(RuntimeError):
    """Non-finite values or an inconsistent tape."""


class ShapeError(NumericsError):
    """Operands whose extents cannot be combined."""


_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def _debug_enabled() -> bool:
    return getattr(_local, "debug", False)


class no_grad:
    """Context manager: ops inside build no tape (values only)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _local.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _local.grad_enabled = self._prev
        return False


def set_debug(flag: bool) -> None:
    """Toggle per-op NaN/Inf detection (raises NumericsError when tripped)."""
    _local.debug = bool(flag)


def _check_finite(data: np.ndarray) -> None:
    if _debug_enabled() and not np.all(np.isfinite(data)):
        raise NumericsError("non-finite value produced by an op")


class Tensor:
    """A float64 ndarray plus an optional slot on the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        _check_finite(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._parents = ()
        out._backward = None
        out.requires_grad = False
        _check_finite(data)
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- tape ------------------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; fills ``grad`` on reachable leaves."""
        if self.data.size != 1:
            raise NumericsError("backward() requires a scalar tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ops --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def _bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._from_op(out_data, (a, b), _bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def _bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(out_data, (a, b), _bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``.

    Supports 2-D x 2-D, batched x batched with identical leading dims, and
    batched x 2-D (shared right operand, e.g. a weight matrix).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner extents disagree: {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batch extents disagree: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                ga = a.data.reshape(-1, a.shape[-1])
                gg = g.reshape(-1, g.shape[-1])
                b._accumulate(ga.T @ gg)
            else:
                b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return Tensor._from_op(out_data, (a, b), _bw)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    inv = np.argsort(axes)
    out_data = np.ascontiguousarray(a.data.transpose(axes))

    def _bw(g):
        a._accumulate(g.transpose(inv))

    return Tensor._from_op(out_data, (a,), _bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def _bw(g):
        a._accumulate(g.reshape(a.shape))

    return Tensor._from_op(out_data, (a,), _bw)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    out_data = np.ascontiguousarray(np.broadcast_to(a.data, shape))

    def _bw(g):
        a._accumulate(_unbroadcast(g, a.shape))

    return Tensor._from_op(out_data, (a,), _bw)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor._from_op(out_data, tuple(tensors), _bw)


def index_select(a: Tensor, idx) -> Tensor:
    """Gather rows ``a[idx]`` along axis 0; scatter-adds on backward."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out_data = a.data[idx]

    def _bw(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        a._accumulate(acc)

    return Tensor._from_op(out_data, (a,), _bw)


def select_position(a: Tensor, positions) -> Tensor:
    """Per-batch row pick: ``out[b] = a[b, positions[b]]`` for a [B, L, ...] input."""
    a = _as_tensor(a)
    pos = np.asarray(positions, dtype=np.intp)
    batch = np.arange(a.shape[0])
    out_data = np.ascontiguousarray(a.data[batch, pos])

    def _bw(g):
        acc = np.zeros_like(a.data)
        acc[batch, pos] = g
        a._accumulate(acc)

    return Tensor._from_op(out_data, (a,), _bw)


def take_columns(a: Tensor, cols) -> Tensor:
    """Gather ``a[..., cols]`` along the last axis."""
    a = _as_tensor(a)
    cols = np.asarray(cols, dtype=np.intp)
    out_data = np.ascontiguousarray(a.data[..., cols])

    def _bw(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc.reshape(-1, a.shape[-1]), (slice(None), cols), g.reshape(-1, len(cols)))
        a._accumulate(acc)

    return Tensor._from_op(out_data, (a,), _bw)


def sparse_matmul(sp, x: Tensor) -> Tensor:
    """Product of a constant scipy sparse matrix with a dense tensor."""
    x = _as_tensor(x)
    out_data = np.ascontiguousarray(sp @ x.data)

    def _bw(g):
        x._accumulate(np.ascontiguousarray(sp.T @ g))

    return Tensor._from_op(out_data, (x,), _bw)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return Tensor._from_op(np.asarray(out_data), (a,), _bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.empty_like(a.data)
    pos = a.data >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def _bw(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return Tensor._from_op(out_data, (a,), _bw)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))
    out_data = a.data * s

    def _bw(g):
        a._accumulate(g * (s + a.data * s * (1.0 - s)))

    return Tensor._from_op(out_data, (a,), _bw)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.log(a.data)

    def _bw(g):
        a._accumulate(g / a.data)

    return Tensor._from_op(out_data, (a,), _bw)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient is zero where the clip is active."""
    a = _as_tensor(a)
    out_data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def _bw(g):
        a._accumulate(g * inside)

    return Tensor._from_op(out_data, (a,), _bw)


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stabilized softmax along ``axis``.

    ``mask`` (optional, broadcastable bool, True = keep) zeroes slots exactly;
    masked rows must keep at least one live slot. Infinities never enter the
    tensor payload: masking happens on the exp weights.
    """
    a = _as_tensor(a)
    x = a.data
    if mask is not None:
        neg = np.where(mask, x, -np.inf)
        m = neg.max(axis=axis, keepdims=True)
        e = np.exp(np.where(mask, x - m, 0.0)) * mask
    else:
        m = x.max(axis=axis, keepdims=True)
        e = np.exp(x - m)
    denom = e.sum(axis=axis, keepdims=True)
    if mask is not None and np.any(denom == 0.0):
        raise NumericsError("softmax row fully masked")
    out_data = e / denom

    def _bw(g):
        dot = (out_data * g).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return Tensor._from_op(out_data, (a,), _bw)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale each trailing-axis row to unit RMS, then multiply by ``gain``."""
    x, gain = _as_tensor(x), _as_tensor(gain)
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"gain {gain.shape} does not match last extent of {x.shape}")
    n = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    normed = x.data * inv
    out_data = normed * gain.data

    def _bw(g):
        if x.requires_grad:
            gg = g * gain.data
            dot = (x.data * gg).sum(axis=-1, keepdims=True)
            x._accumulate(inv * gg - (inv ** 3 / n) * x.data * dot)
        if gain.requires_grad:
            gain._accumulate((g * normed).reshape(-1, n).sum(axis=0))

    return Tensor._from_op(out_data, (x, gain), _bw)


def bce_loss(p: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of probabilities against {0,1} labels.

    ``p`` is clamped to [1e-7, 1 - 1e-7] before the logs; composed with a
    sigmoid the gradient at the logit is (p - y) / batch.
    """
    p = _as_tensor(p)
    y = np.asarray(labels, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("bce_loss labels must be exactly 0 or 1")
    if y.shape != p.shape:
        raise ShapeError(f"labels {y.shape} do not match p {p.shape}")
    pc = clamp(p, 1e-7, 1.0 - 1e-7)
    terms = add(mul(log(pc), y), mul(log(add(1.0, mul(pc, -1.0))), 1.0 - y))
    return mul(mean(terms), -1.0)


def cross_entropy_logits(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean next-token cross-entropy over the unmasked positions.

    ``logits`` is [..., V]; ``targets`` holds int ids with the leading shape;
    ``mask`` (optional bool, same leading shape) selects positions that count.
    """
    logits = _as_tensor(logits)
    tgt = np.asarray(targets, dtype=np.intp)
    lead = logits.shape[:-1]
    if tgt.shape != lead:
        raise ShapeError(f"targets {tgt.shape} do not match logits {logits.shape}")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = (x - m) - np.log(z)
    probs = e / z
    if mask is None:
        valid = np.ones(lead, dtype=bool)
    else:
        valid = np.asarray(mask, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        raise NumericsError("cross_entropy_logits: no unmasked positions")
    flat_idx = np.arange(tgt.size)
    picked = logp.reshape(-1, logits.shape[-1])[flat_idx, tgt.reshape(-1)].reshape(lead)
    out_data = np.asarray(-(picked * valid).sum() / count)

    def _bw(g):
        gl = probs.copy().reshape(-1, logits.shape[-1])
        gl[flat_idx, tgt.reshape(-1)] -= 1.0
        gl = gl.reshape(logits.shape)
        gl *= (valid / count)[..., None]
        logits._accumulate(gl * g)

    return Tensor._from_op(out_data, (logits,), _bw)


# -- gradient checking ---------------------------------------------------------


def grad_check(f, params: list[Tensor], step: float = 1e-5) -> float:
    """Max discrepancy between tape gradients and central finite differences.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    Tensor. The discrepancy per entry is relative where either gradient is
    meaningfully sized and absolute where both are ~0.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericsError("grad_check: non-finite loss")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            with no_grad():
                flat[j] = orig + step
                hi = f().item()
                flat[j] = orig - step
                lo = f().item()
            flat[j] = orig
            fd = (hi - lo) / (2.0 * step)
            denom = max(abs(gflat[j]), abs(fd))
            err = abs(gflat[j] - fd) if denom < 1e-6 else abs(gflat[j] - fd) / denom
            worst = max(worst, err)
    return worst


# -- deterministic RNG ------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


class Rng:
    """Counter-based splitmix64 stream; one seed pins every draw."""

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0
        self._spare: np.ndarray | None = None

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            z = self._seed + idx * _GOLDEN
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        return z

    def uniform(self, shape=None) -> np.ndarray | float:
        """Uniforms in (0, 1]."""
        n = 1 if shape is None else int(np.prod(shape))
        u = ((self._raw(n) >> np.uint64(11)) + np.uint64(1)) * (2.0 ** -53)
        return float(u[0]) if shape is None else u.reshape(shape)

    def normal(self, shape, std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u1 = self.uniform((m,))
        u2 = self.uniform((m,))
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return (mean + std * z).reshape(shape)

    def randint(self, n: int) -> int:
        return int(self._raw(1)[0] % np.uint64(n))

    def randints(self, n: int, size: int) -> np.ndarray:
        return (self._raw(size) % np.uint64(n)).astype(np.intp)

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> np.ndarray:
        idx = list(range(n))
        self.shuffle(idx)
        return np.array(idx, dtype=np.intp)

    def choice(self, n: int, size: int) -> np.ndarray:
        """``size`` draws without replacement from range(n)."""
        if size > n:
            raise ValueError("sample larger than population")
        picked: dict[int, int] = {}
        out = np.empty(size, dtype=np.intp)
        for i in range(size):
            j = i + self.randint(n - i)
            out[i] = picked.get(j, j)
            picked[j] = picked.get(i, i)
        return out
