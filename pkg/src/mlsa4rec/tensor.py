"""Minimal dense-tensor arithmetic with reverse-mode differentiation.

Tensors wrap numpy arrays (rank <= 3, row-major) and record a tape of
backward closures so that gradients of a scalar loss reach every
parameter analytically.  Default precision is float32; a float64 mode
exists because finite-difference gradient checking is unreliable in
single precision.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Iterable

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

CHECKPOINT_MAGIC = b"MLSA"
CHECKPOINT_VERSION = 1

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand dimensions do not satisfy an operation's contract."""


class NumericsError(ArithmeticError):
    """An operation produced NaN/Inf; never silently propagated."""


class CheckpointError(IOError):
    """Checkpoint file is malformed or version-incompatible."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / benchmarks)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    """A real-valued array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = _as_array(data, dtype)
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of 3")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._op = "leaf"

    # -- introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self._op})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    # -- autodiff -----------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar root, accumulating into .grad slots."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar root")
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                parent_grads = node._backward(g)
                for p, pg in zip(node._parents, parent_grads):
                    if pg is None or not p.requires_grad:
                        continue
                    prev = grads.get(id(p))
                    # a closure may hand the same buffer to several
                    # parents, so accumulate without in-place writes
                    grads[id(p)] = pg if prev is None else prev + pg
            else:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g


def make_op(data: np.ndarray, parents: Iterable[Tensor],
            backward: Callable[[np.ndarray], tuple], op: str) -> Tensor:
    """Create an op-result Tensor, enforcing the finite-values invariant."""
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by '{op}'")
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# elementary operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a rank-1 bias broadcast on the last axis."""
    if a.shape == b.shape:
        def bwd(g):
            return g, g
    elif b.data.ndim == 1 and a.shape[-1] == b.shape[0]:
        def bwd(g):
            axes = tuple(range(g.ndim - 1))
            return g, g.sum(axis=axes)
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return make_op(a.data + b.data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        return g, -g
    return make_op(a.data - b.data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; also accepts a rank-1 vector on the last axis."""
    if a.shape == b.shape:
        def bwd(g):
            return g * b.data, g * a.data
    elif b.data.ndim == 1 and a.shape[-1] == b.shape[0]:
        def bwd(g):
            axes = tuple(range(g.ndim - 1))
            return g * b.data, (g * a.data).sum(axis=axes)
    else:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return make_op(a.data * b.data, (a, b), bwd, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        return (g * c,)
    return make_op(a.data * c, (a,), bwd, "scale")


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports (m,k)@(k,p), batched (B,m,k)@(k,p) with a shared right
    operand, and (B,m,k)@(B,k,p).  No other broadcasting.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul requires rank >= 2 operands")
    if ad.ndim == 2 and bd.ndim == 3:
        raise ShapeError("matmul: batched right operand needs a batched left operand")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree {a.shape} @ {b.shape}")
    if ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise ShapeError(f"matmul: batch dims disagree {a.shape} @ {b.shape}")
    out = ad @ bd

    def bwd(g):
        if ad.ndim == bd.ndim or ad.ndim == 2:
            da = g @ np.swapaxes(bd, -1, -2)
            db = np.swapaxes(ad, -1, -2) @ g
        else:  # (B,m,k) @ (k,p): fold batch into the reduction for db
            da = g @ bd.T
            db = np.einsum("bmk,bmp->kp", ad, g)
        return da, db
    return make_op(out, (a, b), bwd, "matmul")


def transpose_last(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise ShapeError("transpose_last requires rank >= 2")

    def bwd(g):
        return (np.ascontiguousarray(np.swapaxes(g, -1, -2)),)
    return make_op(np.ascontiguousarray(np.swapaxes(a.data, -1, -2)), (a,), bwd, "transpose")


def concat_last(tensors: list[Tensor]) -> Tensor:
    widths = [t.shape[-1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=-1)

    def bwd(g):
        pieces, start = [], 0
        for w in widths:
            pieces.append(g[..., start:start + w])
            start += w
        return tuple(pieces)
    return make_op(out, tensors, bwd, "concat")


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    out = np.ascontiguousarray(a.data[..., start:stop])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)
    return make_op(out, (a,), bwd, "slice")


def take_row(a: Tensor, idx: int) -> Tensor:
    """Select one index along axis -2 (one sequence position), dropping it."""
    if a.data.ndim < 2:
        raise ShapeError("take_row requires rank >= 2")
    out = np.ascontiguousarray(a.data[..., idx, :])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[..., idx, :] = g
        return (full,)
    return make_op(out, (a,), bwd, "take_row")


def tsum(a: Tensor) -> Tensor:
    def bwd(g):
        return (np.full_like(a.data, float(g)),)
    return make_op(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), bwd, "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g):
        return (np.full_like(a.data, float(g) / n),)
    return make_op(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), bwd, "mean")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Exp-normalize along an axis with max-subtraction for stability."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)
    return make_op(out, (x,), bwd, "softmax")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Standardize each row over the last axis, then apply gain and bias."""
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layernorm: gain/bias must match the feature width")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias
    return make_op(out, (x, gain, bias), bwd, "layernorm")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def bwd(g):
        return (g * s * (1.0 - s),)
    return make_op(s, (x,), bwd, "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s

    def bwd(g):
        return (g * s * (1.0 + x.data * (1.0 - s)),)
    return make_op(out, (x,), bwd, "silu")


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF form: x * Phi(x)."""
    phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * phi_cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (phi_cdf + x.data * pdf),)
    return make_op(out.astype(x.data.dtype, copy=False), (x,), bwd, "gelu")


def softplus(x: Tensor) -> Tensor:
    out = np.where(x.data > 30.0, x.data, np.log1p(np.exp(np.minimum(x.data, 30.0))))

    def bwd(g):
        return (g * _sigmoid(x.data),)
    return make_op(out.astype(x.data.dtype, copy=False), (x,), bwd, "softplus")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bwd(g):
        return (g * out,)
    return make_op(out, (x,), bwd, "exp")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: output position t is table[ids[t]].  ids may be batched."""
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise IndexError(
            f"item id out of range [0, {table.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}")
    out = table.data[ids]

    def bwd(g):
        dtab = np.zeros_like(table.data)
        np.add.at(dtab, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (dtab,)
    return make_op(out, (table,), bwd, "embedding")


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)

    def bwd(g):
        return (g * keep,)
    return make_op(x.data * keep, (x,), bwd, "dropout")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the target classes, via log-sum-exp.

    logits is [V] or [B, V]; targets is a scalar id or an id per row.
    Padding id 0 is never a valid target.
    """
    ld = logits.data if logits.data.ndim == 2 else logits.data[None, :]
    tg = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if tg.shape[0] != ld.shape[0]:
        raise ShapeError("cross_entropy: one target per logit row required")
    if tg.min() < 1 or tg.max() >= ld.shape[1]:
        raise ValueError("cross_entropy: target must be a real item id (>= 1)")
    m = ld.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(ld - m).sum(axis=1))
    rows = np.arange(ld.shape[0])
    losses = lse - ld[rows, tg]
    out = np.asarray(losses.mean(), dtype=logits.data.dtype)

    def bwd(g):
        soft = np.exp(ld - m)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[rows, tg] -= 1.0
        soft *= float(g) / ld.shape[0]
        return (soft.reshape(logits.shape),)
    return make_op(out, (logits,), bwd, "cross_entropy")


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------

class ParameterStore:
    """Named parameter tensors with persistent gradient slots."""

    def __init__(self, rng_seed: int = 0, dtype=DEFAULT_DTYPE):
        self.entries: dict[str, Tensor] = {}
        self.rng_seed = int(rng_seed)
        self.rng = np.random.default_rng(self.rng_seed)
        self.dtype = np.dtype(dtype)

    def add(self, name: str, data) -> Tensor:
        if name in self.entries:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(data, dtype=self.dtype), requires_grad=True)
        t.grad = np.zeros_like(t.data)
        self.entries[name] = t
        return t

    def uniform(self, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self.add(name, np.zeros(shape))

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self) -> list[str]:
        return list(self.entries)

    def zero_grads(self) -> None:
        for t in self.entries.values():
            t.grad[...] = 0.0

    def num_params(self) -> int:
        return sum(t.data.size for t in self.entries.values())

    def astype(self, dtype) -> "ParameterStore":
        """Copy of this store (values only) in another precision."""
        out = ParameterStore(self.rng_seed, dtype=dtype)
        for name, t in self.entries.items():
            out.add(name, t.data.astype(dtype))
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.entries.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            if name not in self.entries:
                raise KeyError(f"unknown parameter: {name}")
            if self.entries[name].data.shape != arr.shape:
                raise ShapeError(f"shape mismatch loading {name}")
            self.entries[name].data[...] = arr.astype(self.dtype)


# ---------------------------------------------------------------------------
# checkpoint serialization (bit-exact format, gradients never stored)
# ---------------------------------------------------------------------------

def save_checkpoint(store: ParameterStore, path: str) -> None:
    """Write: magic "MLSA", u32 version, u32 count, then per tensor:
    u32 name length, UTF-8 name, u32 rank, u32 dims, f32-LE values."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(store.entries)))
        for name, t in store.entries.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.data.ndim))
            for d in t.data.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path: str, rng_seed: int = 0, dtype=DEFAULT_DTYPE) -> ParameterStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    store = ParameterStore(rng_seed, dtype=dtype)
    off = 12
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        store.add(name, values)
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return store


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[ParameterStore], Tensor], params: ParameterStore,
               n_samples: int = 50, eps: float = 1e-4, seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    f must be a deterministic scalar function of the store (seed fixed,
    dropout disabled).  The store must be in float64.
    """
    if params.dtype != np.float64:
        raise ValueError("grad_check requires a float64 parameter store")
    params.zero_grads()
    loss = f(params)
    loss.backward()

    coords = []
    for name, t in params.entries.items():
        coords.extend((name, i) for i in range(t.data.size))
    rng = np.random.default_rng(seed)
    picked = [coords[i] for i in rng.choice(len(coords),
                                            size=min(n_samples, len(coords)),
                                            replace=False)]
    worst = 0.0
    with no_grad():
        for name, idx in picked:
            flat = params[name].data.reshape(-1)
            orig = flat[idx]
            flat[idx] = orig + eps
            f_plus = float(f(params).data)
            flat[idx] = orig - eps
            f_minus = float(f(params).data)
            flat[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            an = float(params[name].grad.reshape(-1)[idx])
            denom = max(abs(fd), abs(an))
            if denom < 1e-7:
                continue  # both effectively zero
            worst = max(worst, abs(fd - an) / denom)
    return worst
