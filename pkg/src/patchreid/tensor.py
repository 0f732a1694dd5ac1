"""Dense tensors with tape-based reverse-mode differentiation.

Everything else in the package is built from the ops in this module. The
design is deliberately small: a ``Tensor`` wraps a numpy array plus an
optional gradient buffer, and a ``Tape`` records each op's backward rule in
execution order. ``Tape.backward`` replays the records in reverse,
accumulating gradients into every leaf that requires them.

Ops are plain functions (``matmul(a, b)`` rather than ``a @ b``) so the
recording semantics stay explicit. Most ops accept arrays of any rank and
treat the last axis as the feature axis, which lets the training loop run
whole batches through one recorded graph. All ops validate that their
outputs are finite; a NaN or Inf anywhere raises ``NonFiniteError`` naming
the op that produced it.

Training math runs in float32. The same graph can be evaluated in float64
(create the inputs as float64), which the gradient checker uses for sharp
finite-difference comparisons.
"""

from __future__ import annotations

import math

import numpy as np

LAYER_NORM_EPS = 1e-5
L2_NORM_EPS = 1e-12


class NonFiniteError(FloatingPointError):
    """A tensor op produced (or was handed) NaN/Inf values."""

    def __init__(self, op: str):
        super().__init__(f"non-finite values produced by op '{op}'")
        self.op = op


def _check_finite(data: np.ndarray, op: str) -> None:
    # min/max propagate NaN and catch both infinities without a temp array.
    if data.size and not (np.isfinite(data.max()) and np.isfinite(data.min())):
        raise NonFiniteError(op)


class Tensor:
    """A dense real-valued array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _fresh(arr: np.ndarray, requires_grad: bool) -> Tensor:
    # Internal constructor: skips the redundant finite re-check done by ops.
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.grad = None
    t.requires_grad = requires_grad
    return t


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of ops; replaying it backwards computes gradients.

    Use as a context manager around the forward pass:

        with Tape() as tape:
            loss = ...
        tape.backward(loss)

    Each recorded node is visited exactly once during backward, in reverse
    recording order. Fan-out is handled by gradient accumulation.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, object, str]] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active; the tape is single-writer")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, backward, name: str) -> None:
        self._nodes.append((out, backward, name))

    def backward(self, root: Tensor) -> None:
        """Seed ``root`` with a unit gradient and replay the tape in reverse."""
        if root.data.size != 1:
            raise ValueError("backward requires a scalar root tensor")
        root.grad = np.ones_like(root.data)
        for out, bwd, _name in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue
            bwd(g)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, name: str) -> Tensor:
    _check_finite(data, name)
    tape = _ACTIVE_TAPE
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = _fresh(data, needs)
    if needs:
        tape.record(out, backward(out), name)
    return out


def _lead_axes(g: np.ndarray) -> tuple:
    return tuple(range(g.ndim - 1))


# ---------------------------------------------------------------------------
# Elementwise and shape ops (rank-agnostic)
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    data = a.data + b.data

    def bwd(out):
        def run(g):
            _accum(a, g)
            _accum(b, g)
        return run

    return _result(data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    data = a.data - b.data

    def bwd(out):
        def run(g):
            _accum(a, g)
            _accum(b, -g)
        return run

    return _result(data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    data = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(out):
        def run(g):
            _accum(a, g * bd)
            _accum(b, g * ad)
        return run

    return _result(data, (a, b), bwd, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    data = a.data * s

    def bwd(out):
        def run(g):
            _accum(a, g * s)
        return run

    return _result(data, (a,), bwd, "scale")


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a 1xd vector to every row (last axis) of x."""
    if v.shape != (1, x.shape[-1]):
        raise ValueError(f"add_rowvec: incompatible shapes {x.shape} and {v.shape}")
    data = x.data + v.data

    def bwd(out):
        def run(g):
            _accum(x, g)
            _accum(v, g.sum(axis=_lead_axes(g)).reshape(1, -1))
        return run

    return _result(data, (x, v), bwd, "add_rowvec")


def mul_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Multiply every row (last axis) of x by a 1xd vector."""
    if v.shape != (1, x.shape[-1]):
        raise ValueError(f"mul_rowvec: incompatible shapes {x.shape} and {v.shape}")
    data = x.data * v.data
    xd, vd = x.data, v.data

    def bwd(out):
        def run(g):
            _accum(x, g * vd)
            _accum(v, (g * xd).sum(axis=_lead_axes(g)).reshape(1, -1))
        return run

    return _result(data, (x, v), bwd, "mul_rowvec")


def add_broadcast(x: Tensor, p: Tensor) -> Tensor:
    """Add p to every leading slice of x, where p.shape == x.shape[1:]."""
    if p.shape != x.shape[1:]:
        raise ValueError(f"add_broadcast: {p.shape} does not match trailing {x.shape}")
    data = x.data + p.data

    def bwd(out):
        def run(g):
            _accum(x, g)
            _accum(p, g.sum(axis=0))
        return run

    return _result(data, (x, p), bwd, "add_broadcast")


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)
    in_shape = x.data.shape

    def bwd(out):
        def run(g):
            _accum(x, g.reshape(in_shape))
        return run

    return _result(data, (x,), bwd, "reshape")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes (plain transpose for 2-d tensors)."""
    if x.data.ndim < 2:
        raise ValueError("transpose expects at least 2 dimensions")
    data = np.ascontiguousarray(np.swapaxes(x.data, -1, -2))

    def bwd(out):
        def run(g):
            _accum(x, np.swapaxes(g, -1, -2))
        return run

    return _result(data, (x,), bwd, "transpose")


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat of zero tensors")
    nd = tensors[0].data.ndim
    ax = axis % nd
    data = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.shape[ax] for t in tensors]

    def bwd(out):
        def run(g):
            off = 0
            for t, sz in zip(tensors, sizes):
                sl = tuple(
                    slice(off, off + sz) if d == ax else slice(None) for d in range(nd)
                )
                _accum(t, g[sl])
                off += sz
        return run

    return _result(data, tuple(tensors), bwd, "concat")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice along axis 0."""
    data = x.data[start:stop].copy()

    def bwd(out):
        def run(g):
            if x.requires_grad:
                if x.grad is None:
                    x.grad = np.zeros_like(x.data)
                x.grad[start:stop] += g
        return run

    return _result(data, (x,), bwd, "slice_rows")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the last axis."""
    data = x.data[..., start:stop].copy()

    def bwd(out):
        def run(g):
            if x.requires_grad:
                if x.grad is None:
                    x.grad = np.zeros_like(x.data)
                x.grad[..., start:stop] += g
        return run

    return _result(data, (x,), bwd, "slice_cols")


def slice_axis1(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice along axis 1 (token axis of a batched token stack)."""
    data = x.data[:, start:stop].copy()

    def bwd(out):
        def run(g):
            if x.requires_grad:
                if x.grad is None:
                    x.grad = np.zeros_like(x.data)
                x.grad[:, start:stop] += g
        return run

    return _result(data, (x,), bwd, "slice_axis1")


def gather_rows(x: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    data = x.data[idx].copy()

    def bwd(out):
        def run(g):
            if x.requires_grad:
                if x.grad is None:
                    x.grad = np.zeros_like(x.data)
                np.add.at(x.grad, idx, g)
        return run

    return _result(data, (x,), bwd, "gather_rows")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def mean_axis0(x: Tensor) -> Tensor:
    """Mean over rows: n x d -> 1 x d."""
    if x.data.ndim != 2:
        raise ValueError("mean_axis0 expects a 2-d tensor")
    n = x.shape[0]
    data = x.data.mean(axis=0, keepdims=True)

    def bwd(out):
        def run(g):
            _accum(x, np.broadcast_to(g / n, x.data.shape))
        return run

    return _result(data, (x,), bwd, "mean_axis0")


def mean_axis(x: Tensor, axis: int) -> Tensor:
    """Mean over one axis (dropped from the shape)."""
    n = x.shape[axis]
    data = x.data.mean(axis=axis)

    def bwd(out):
        def run(g):
            _accum(x, np.broadcast_to(np.expand_dims(g / n, axis), x.data.shape))
        return run

    return _result(data, (x,), bwd, "mean_axis")


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.dtype)

    def bwd(out):
        def run(g):
            _accum(x, np.broadcast_to(g, x.data.shape).astype(x.dtype, copy=False))
        return run

    return _result(data, (x,), bwd, "sum_all")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    data = np.asarray(x.data.mean(), dtype=x.dtype)

    def bwd(out):
        def run(g):
            _accum(x, np.broadcast_to(g / n, x.data.shape).astype(x.dtype, copy=False))
        return run

    return _result(data, (x,), bwd, "mean_all")


# ---------------------------------------------------------------------------
# Linear algebra and nonlinearities
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b with a of any rank >= 2 against a 2-d weight matrix b.

    The contraction runs over a's last axis; b gradients reduce over all of
    a's leading axes.
    """
    if b.data.ndim != 2:
        raise ValueError("matmul expects a 2-d right operand (use bmm for batched)")
    if a.data.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    data = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(out):
        def run(g):
            _accum(a, g @ bd.T)
            if b.requires_grad:
                if ad.ndim == 2:
                    _accum(b, ad.T @ g)
                else:
                    k = ad.shape[-1]
                    n = g.shape[-1]
                    _accum(b, ad.reshape(-1, k).T @ g.reshape(-1, n))
        return run

    return _result(data, (a, b), bwd, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: leading axes must match; contracts the trailing pair."""
    if a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"bmm: leading axes differ, {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"bmm: inner extents differ, {a.shape} x {b.shape}")
    data = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(out):
        def run(g):
            _accum(a, g @ np.swapaxes(bd, -1, -2))
            _accum(b, np.swapaxes(ad, -1, -2) @ g)
        return run

    return _result(data, (a, b), bwd, "bmm")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b broadcast over rows)."""
    out = matmul(x, w)
    if b is not None:
        out = add_rowvec(out, b)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; slices sum to 1."""
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)
    y = data

    def bwd(out):
        def run(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accum(x, y * (g - dot))
        return run

    return _result(data, (x,), bwd, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine.

    ``gamma`` and ``beta`` are 1xd vectors applied to every row.
    """
    d = x.shape[-1]
    if d < 2:
        raise ValueError("layer_norm needs at least 2 features")
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise ValueError("layer_norm: gamma/beta must be 1xd")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    data = xhat * gamma.data + beta.data
    gd = gamma.data

    def bwd(out):
        def run(g):
            gx = g * gd  # gradient wrt xhat
            term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(x, term * inv)
            _accum(gamma, (g * xhat).sum(axis=_lead_axes(g)).reshape(1, -1))
            _accum(beta, g.sum(axis=_lead_axes(g)).reshape(1, -1))
        return run

    return _result(data, (x, gamma, beta), bwd, "layer_norm")


def l2_normalize(x: Tensor, eps: float = L2_NORM_EPS) -> Tensor:
    """Scale rows (last axis) to unit Euclidean norm. Near-zero rows are rejected."""
    norms = np.linalg.norm(x.data, axis=-1, keepdims=True)
    if np.any(norms <= eps):
        raise ValueError("l2_normalize: degenerate near-zero row")
    data = x.data / norms
    y = data

    def bwd(out):
        def run(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accum(x, (g - y * dot) / norms)
        return run

    return _result(data, (x,), bwd, "l2_normalize")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Smooth GELU (tanh form)."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    data = 0.5 * xd * (1.0 + t)

    def bwd(out):
        def run(g):
            sech2 = 1.0 - t * t
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
            _accum(x, g * (0.5 * (1.0 + t) + 0.5 * xd * sech2 * dinner))
        return run

    return _result(data, (x,), bwd, "gelu")


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Softmax cross-entropy of a 1xm logit row against an integer label."""
    if logits.data.ndim != 2 or logits.shape[0] != 1:
        raise ValueError("cross_entropy expects 1xm logits")
    m = logits.shape[1]
    if not 0 <= target < m:
        raise ValueError(f"label {target} out of range for {m} classes")
    row = logits.data[0]
    shifted = row - row.max()
    lse = np.log(np.exp(shifted).sum())
    data = np.asarray(lse - shifted[target], dtype=logits.dtype)
    probs = np.exp(shifted - lse)

    def bwd(out):
        def run(g):
            gl = probs.copy()
            gl[target] -= 1.0
            _accum(logits, (g * gl).reshape(1, m))
        return run

    return _result(data, (logits,), bwd, "cross_entropy")


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Per-row softmax cross-entropy: (n, m) logits + n labels -> (n, 1) losses."""
    if logits.data.ndim != 2:
        raise ValueError("cross_entropy_rows expects 2-d logits")
    idx = np.asarray(targets, dtype=np.int64)
    n, m = logits.shape
    if idx.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {idx.shape}")
    if idx.min() < 0 or idx.max() >= m:
        raise ValueError(f"label out of range for {m} classes")
    rows = logits.data
    shifted = rows - rows.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    data = lse - shifted[np.arange(n), idx][:, None]
    probs = np.exp(shifted - lse)

    def bwd(out):
        def run(g):
            gl = probs.copy()
            gl[np.arange(n), idx] -= 1.0
            _accum(logits, g * gl)
        return run

    return _result(data, (logits,), bwd, "cross_entropy_rows")


def add_n(terms: list[Tensor]) -> Tensor:
    """Sum a list of same-shape tensors in the given (deterministic) order."""
    if not terms:
        raise ValueError("add_n of zero terms")
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


# ---------------------------------------------------------------------------
# Parameter initialization
# ---------------------------------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) samples re-drawn until they land within +/- 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def parameter(data, requires_grad: bool = True) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=requires_grad)
