"""Dense tensors over numpy with a reverse-mode tape and MAC instrumentation.

Tensors are row-major, float32 by default, with float64 reserved for gradient
checking. Ops build the graph as they run; backward() walks it once in reverse
topological order. There is no implicit broadcasting between tensors: binary
ops require identical shapes, and the only broadcast cases are constants
(masks, rotary tables) whose documented shapes broadcast into the tensor
operand. Forward matmul-like ops report their multiply-accumulate counts to
any active MacCounter; backward passes are never counted, so a counted region
measures inference cost only.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, StateError

# ---- MAC instrumentation ----


@dataclass
class MacCounter:
    """Multiply-accumulate tally; one MAC = one fused multiply+add."""

    total: int = 0
    by_label: dict = field(default_factory=dict)


_counters: list[MacCounter] = []
_labels: list[str] = []


def _tally(macs: int) -> None:
    if not _counters:
        return
    label = _labels[-1] if _labels else "other"
    for c in _counters:
        c.total += macs
        c.by_label[label] = c.by_label.get(label, 0) + macs


@contextmanager
def count_macs():
    """Collect MACs of forward ops executed in this block."""
    c = MacCounter()
    _counters.append(c)
    try:
        yield c
    finally:
        _counters.remove(c)


@contextmanager
def mac_scope(label: str):
    """Attribute MACs inside the block to `label` in MacCounter.by_label."""
    _labels.append(label)
    try:
        yield
    finally:
        _labels.pop()


# ---- Autodiff core ----

_grad_enabled: list[bool] = [True]


@contextmanager
def no_grad():
    """Run forward ops without recording the tape."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.requires_grad = bool(requires_grad) and _grad_enabled[-1]
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._vjp = None

    # graph-node constructor used by every op
    @staticmethod
    def _compose(data: np.ndarray, parents: tuple, vjp) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _grad_enabled[-1] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """Named trainable leaf."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


def _add_grad(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def backward(out: Tensor, seed: np.ndarray | None = None) -> None:
    """Accumulate d(out)/d(leaf) into .grad for every reachable leaf.

    `seed` is the upstream gradient of `out`; defaults to ones for scalars.
    """
    if not out.requires_grad:
        raise StateError(
            "backward called on a tensor with no recorded computation "
            "(forward ran under no_grad, or no input requires gradients)"
        )
    if seed is None:
        if out.data.size != 1:
            raise ShapeError(f"backward on non-scalar output {out.data.shape} requires a seed gradient")
        seed = np.ones_like(out.data)
    else:
        seed = np.asarray(seed, dtype=out.data.dtype)
        if seed.shape != out.data.shape:
            raise ShapeError(f"seed shape {seed.shape} does not match output shape {out.data.shape}")

    # iterative post-order over grad-requiring parents
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    out.grad = seed
    for node in reversed(topo):
        if node._vjp is not None:
            node._vjp(node.grad)


# ---- Shape/dtype guards ----


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtypes {a.data.dtype} and {b.data.dtype} differ")


# ---- Elementwise and structural ops ----


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")

    def vjp(g):
        _add_grad(a, g)
        _add_grad(b, g)

    return Tensor._compose(a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")

    def vjp(g):
        _add_grad(a, g)
        _add_grad(b, -g)

    return Tensor._compose(a.data - b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")

    def vjp(g):
        _add_grad(a, g * b.data)
        _add_grad(b, g * a.data)

    return Tensor._compose(a.data * b.data, (a, b), vjp)


def scale(x: Tensor, s: float) -> Tensor:
    def vjp(g):
        _add_grad(x, g * s)

    return Tensor._compose(x.data * x.data.dtype.type(s), (x,), vjp)


def add_const(x: Tensor, c) -> Tensor:
    """x + c where c is a non-differentiated array broadcastable into x's shape."""
    out = x.data + np.asarray(c, dtype=x.data.dtype)
    if out.shape != x.data.shape:
        raise ShapeError(f"add_const: constant {np.shape(c)} does not broadcast into {x.data.shape}")

    def vjp(g):
        _add_grad(x, g)

    return Tensor._compose(out, (x,), vjp)


def mul_const(x: Tensor, c) -> Tensor:
    """x * c where c is a non-differentiated array broadcastable into x's shape."""
    c = np.asarray(c, dtype=x.data.dtype)
    out = x.data * c
    if out.shape != x.data.shape:
        raise ShapeError(f"mul_const: constant {c.shape} does not broadcast into {x.data.shape}")

    def vjp(g):
        _add_grad(x, g * c)

    return Tensor._compose(out, (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.data.shape

    def vjp(g):
        _add_grad(x, g.reshape(src))

    return Tensor._compose(x.data.reshape(shape), (x,), vjp)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        _add_grad(x, g.transpose(inv))

    return Tensor._compose(x.data.transpose(axes), (x,), vjp)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    ax = axis if axis >= 0 else parts[0].data.ndim + axis
    sizes = [p.data.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            _add_grad(p, g[tuple(sl)])

    return Tensor._compose(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), vjp)


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Gather along the token axis (second to last); duplicate rows allowed."""
    rows = np.asarray(rows, dtype=np.int64)
    if x.data.ndim < 2:
        raise ShapeError(f"take_rows needs ndim >= 2, got {x.data.shape}")
    lead = (slice(None),) * (x.data.ndim - 2)
    # unique rows take the fast path: assignment into zeros accumulates the
    # same values np.add.at would, without its scatter overhead
    unique = len(np.unique(rows)) == len(rows)

    def vjp(g):
        gx = np.zeros_like(x.data)
        if unique:
            gx[lead + (rows,)] = g
        else:
            np.add.at(gx, lead + (rows,), g)
        _add_grad(x, gx)

    return Tensor._compose(x.data[lead + (rows,)], (x,), vjp)


def scatter_rows(values: Tensor, length: int, rows: np.ndarray) -> Tensor:
    """Place rows of `values` at `rows` in a zero tensor of token length `length`."""
    rows = np.asarray(rows, dtype=np.int64)
    if values.data.shape[-2] != len(rows):
        raise ShapeError(f"scatter_rows: {values.data.shape} does not carry {len(rows)} rows")
    if len(np.unique(rows)) != len(rows):
        raise ShapeError("scatter_rows: duplicate target rows")
    lead = (slice(None),) * (values.data.ndim - 2)
    out = np.zeros(values.data.shape[:-2] + (length,) + values.data.shape[-1:], dtype=values.data.dtype)
    out[lead + (rows,)] = values.data

    def vjp(g):
        _add_grad(values, g[lead + (rows,)])

    return Tensor._compose(out, (values,), vjp)


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """table (V, d), ids int array of any shape -> (*ids.shape, d)."""
    ids = np.asarray(ids, dtype=np.int64)

    def vjp(g):
        vocab = table.data.shape[0]
        flat_ids = ids.reshape(-1)
        flat_g = g.reshape(len(flat_ids), -1)
        # scatter-add as a one-hot matmul: ids repeat heavily, np.add.at is
        # an order of magnitude slower than one BLAS call at these sizes
        onehot = np.zeros((vocab, len(flat_ids)), dtype=g.dtype)
        onehot[flat_ids, np.arange(len(flat_ids))] = 1
        _add_grad(table, onehot @ flat_g)

    return Tensor._compose(table.data[ids], (table,), vjp)


def tile_leading(x: Tensor, reps: int) -> Tensor:
    """Stack `reps` copies of x along a new leading axis."""

    def vjp(g):
        _add_grad(x, g.sum(axis=0))

    return Tensor._compose(np.broadcast_to(x.data, (reps,) + x.data.shape).copy(), (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    def vjp(g):
        _add_grad(x, np.full_like(x.data, g))

    return Tensor._compose(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), vjp)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def vjp(g):
        _add_grad(x, np.full_like(x.data, g / n))

    return Tensor._compose(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,), vjp)


# ---- Matrix products (the only MAC-counted ops besides grid pooling) ----


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a (m, k) @ b (k, n) -> (m, n)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    m, k = a.data.shape
    n = b.data.shape[1]
    _tally(m * k * n)

    def vjp(g):
        _add_grad(a, g @ b.data.T)
        _add_grad(b, a.data.T @ g)

    return Tensor._compose(a.data @ b.data, (a, b), vjp)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x (..., k) @ w (k, n) -> (..., n)."""
    if w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"linear: {x.data.shape} @ {w.data.shape}")
    k, n = w.data.shape
    rows = x.data.size // k
    _tally(rows * k * n)

    def vjp(g):
        _add_grad(x, g @ w.data.T)
        _add_grad(w, x.data.reshape(-1, k).T @ g.reshape(-1, n))

    return Tensor._compose(x.data @ w.data, (x, w), vjp)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """a (..., m, k) @ b (..., k, n) with identical leading dims."""
    if a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2] or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"bmm: {a.data.shape} @ {b.data.shape}")
    m, k = a.data.shape[-2:]
    n = b.data.shape[-1]
    batch = int(np.prod(a.data.shape[:-2], dtype=np.int64)) if a.data.ndim > 2 else 1
    _tally(batch * m * k * n)

    def vjp(g):
        _add_grad(a, g @ np.swapaxes(b.data, -1, -2))
        _add_grad(b, np.swapaxes(a.data, -1, -2) @ g)

    return Tensor._compose(a.data @ b.data, (a, b), vjp)


# ---- Nonlinear kernels with fused VJPs ----


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis`; rows sum to one."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        _add_grad(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return Tensor._compose(y, (x,), vjp)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    sig = 1.0 / (1.0 + np.exp(-x.data))
    y = x.data * sig

    def vjp(g):
        _add_grad(x, g * (sig * (1.0 + x.data * (1.0 - sig))))

    return Tensor._compose(y, (x,), vjp)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """Root-mean-square normalization over the last axis, scaled by gain (d,)."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,):
        raise ShapeError(f"rms_norm: gain {gain.data.shape} does not match last axis of {x.data.shape}")
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    normed = x.data * inv

    def vjp(g):
        gu = g * gain.data
        # d(normed)/dx: inv * (I - x x^T inv^2 / d)
        dot = (gu * x.data).sum(axis=-1, keepdims=True)
        _add_grad(x, inv * gu - (inv ** 3 / d) * dot * x.data)
        _add_grad(gain, (g * normed).reshape(-1, d).sum(axis=0))

    return Tensor._compose(normed * gain.data, (x, gain), vjp)


def gated_ffn(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """silu(x @ w_gate) * (x @ w_up) @ w_down; the standard three-matrix block."""
    return linear(mul(silu(linear(x, w_gate)), linear(x, w_up)), w_down)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood; logits (R, V), integer targets (R,)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-d logits, got {logits.data.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    r, v = logits.data.shape
    if targets.shape != (r,):
        raise ShapeError(f"cross_entropy: targets {targets.shape} do not match logits rows {r}")
    if targets.min() < 0 or targets.max() >= v:
        raise ShapeError(f"cross_entropy: target out of range [0, {v})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logprobs = z - logsumexp
    loss = -logprobs[np.arange(r), targets].mean()

    def vjp(g):
        probs = np.exp(logprobs)
        probs[np.arange(r), targets] -= 1.0
        _add_grad(logits, probs * (g / r))

    return Tensor._compose(np.asarray(loss, dtype=logits.data.dtype), (logits,), vjp)


# ---- Rotary position op ----


def rope_tables(positions: np.ndarray, head_dim: int, base: float = 10000.0, dtype=np.float32):
    """cos/sin tables (n, head_dim) for the given integer positions.

    Pairing convention: dimension i rotates with dimension i + head_dim/2;
    the tables duplicate the half-dim angles so they apply elementwise.
    """
    if head_dim % 2 != 0:
        raise ShapeError(f"rotary embedding needs an even head dim, got {head_dim}")
    half = head_dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    ang = np.concatenate([ang, ang], axis=-1)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Apply rotary rotation; x (..., n, head_dim), tables (n, head_dim) constants."""
    half = x.data.shape[-1] // 2

    def rot(v):  # (a, b) -> (-b, a) on the half split
        return np.concatenate([-v[..., half:], v[..., :half]], axis=-1)

    y = x.data * cos + rot(x.data) * sin
    if y.shape != x.data.shape:
        raise ShapeError(f"rope_rotate: tables {cos.shape} do not broadcast into {x.data.shape}")

    def vjp(g):
        _add_grad(x, g * cos - rot(g * sin))

    return Tensor._compose(y, (x,), vjp)
