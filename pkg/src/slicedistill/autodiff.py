"""Dense float32 tensors with reverse-mode automatic differentiation.

The graph is implicit: every op closes over its parents and records a
backward closure on the output tensor. `backward(loss)` walks the graph
in reverse topological order and accumulates gradients additively into
every reachable tensor, so fan-out works without extra bookkeeping.
Only the ops the transformer backbone and the losses need are
registered.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NaNGradient, NonScalarLoss, ShapeMismatch


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data)
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op})"

    # arithmetic sugar; scalars only on the right where ambiguous
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    def __radd__(self, other):
        return add_scalar(self, float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    def __rmul__(self, other):
        return mul_scalar(self, float(other))

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul_scalar(other, -1.0))
        return add_scalar(self, -float(other))

    def __truediv__(self, other):
        return mul_scalar(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return _transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce(self, axis, keepdims, mean=False)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce(self, axis, keepdims, mean=True)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str,
          backward: Callable[[np.ndarray], None]) -> Tensor:
    data = np.asarray(data)
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad on every tensor reachable from `loss`.

    Raises NonScalarLoss unless `loss` has exactly one element, and
    NaNGradient (naming the op) if any propagated gradient goes
    non-finite.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss._accum(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is None:
            continue
        g = node.grad
        if g is None:
            continue
        node._backward(g)
        for p in node._parents:
            if p.requires_grad and p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NaNGradient(f"op '{node.op}' produced a non-finite gradient")


# ---------------------------------------------------------------------------
# elementwise and scalar ops

def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b. Shapes must match, or b may broadcast as a trailing bias
    (b.shape == a.shape[-b.ndim:])."""
    if a.shape != b.shape:
        if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
            raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    out = a.data + b.data
    lead = a.ndim - b.ndim

    def back(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            gb = g.sum(axis=tuple(range(lead))) if lead else g
            b._accum(gb)

    return _make(out, (a, b), "add", back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def back(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return _make(out, (a, b), "mul", back)


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data + s

    def back(g):
        a._accum(g)

    return _make(out, (a,), "add_scalar", back)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s

    def back(g):
        a._accum(g * s)

    return _make(out, (a,), "mul_scalar", back)


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"div: {a.shape} vs {b.shape}")
    out = a.data / b.data

    def back(g):
        if a.requires_grad:
            a._accum(g / b.data)
        if b.requires_grad:
            b._accum(-g * a.data / (b.data * b.data))

    return _make(out, (a, b), "div", back)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def back(g):
        a._accum(g / a.data)

    return _make(out, (a,), "log", back)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation (the variant the tests differentiate)."""
    c = float(np.sqrt(2.0 / np.pi))
    k = 0.044715
    x = a.data
    inner = c * (x + k * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * k * x * x)
        a._accum(g * d)

    return _make(out, (a,), "gelu", back)


# ---------------------------------------------------------------------------
# shape ops

def _reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def back(g):
        a._accum(g.reshape(a.data.shape))

    return _make(out, (a,), "reshape", back)


def _transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = np.ascontiguousarray(a.data.transpose(axes))
    inv = np.argsort(axes)

    def back(g):
        a._accum(g.transpose(inv))

    return _make(out, (a,), "transpose", back)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = np.broadcast_to(a.data, shape).copy()
    lead = len(shape) - a.ndim
    expanded = tuple(i + lead for i, d in enumerate(a.data.shape)
                     if d == 1 and shape[i + lead] != 1)
    axes = tuple(range(lead)) + expanded

    def back(g):
        gb = g.sum(axis=axes, keepdims=False) if axes else g
        a._accum(gb.reshape(a.data.shape))

    return _make(out, (a,), "broadcast_to", back)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def back(g):
        start = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, start + n)
                t._accum(g[tuple(idx)])
            start += n

    return _make(out, tuple(tensors), "concat", back)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(a.data[idx])

    def back(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[idx] += g

    return _make(out, (a,), "narrow", back)


def split(a: Tensor, sections: int, axis: int) -> list[Tensor]:
    n = a.shape[axis]
    if n % sections != 0:
        raise ShapeMismatch(f"split: axis {axis} size {n} not divisible by {sections}")
    step = n // sections
    return [narrow(a, axis, i * step, step) for i in range(sections)]


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Embedding-style gather of rows along axis 0 by integer index."""
    idx = np.asarray(indices, dtype=np.int64)
    out = table.data[idx]

    def back(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    return _make(out, (table,), "gather_rows", back)


# ---------------------------------------------------------------------------
# matmul

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b over the last two axes. b is either a 2-D weight shared
    across a's leading batch axes, or batched with the same leading
    shape as a."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs ndim>=2, got {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul: leading dims {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dims {a.shape} vs {b.shape}")
    k = a.shape[-1]
    if b.ndim == 2 and a.ndim > 2:
        # fuse the leading batch axes into one gemm
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def back(g):
            g2 = g.reshape(-1, b.shape[1])
            if a.requires_grad:
                a._accum((g2 @ b.data.T).reshape(a.data.shape))
            if b.requires_grad:
                b._accum(a2.T @ g2)

        return _make(out, (a, b), "matmul", back)
    out = np.matmul(a.data, b.data)

    def back(g):
        if a.requires_grad:
            a._accum(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if b.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, *b.data.shape).sum(axis=0)
            b._accum(gb)

    return _make(out, (a, b), "matmul", back)


# ---------------------------------------------------------------------------
# reductions

def _reduce(a: Tensor, axis, keepdims: bool, mean: bool) -> Tensor:
    if mean:
        out = a.data.mean(axis=axis, keepdims=keepdims)
    else:
        out = a.data.sum(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    scale = 1.0 / count if mean else 1.0

    def back(g):
        gg = np.asarray(g)
        if not keepdims and axis is not None:
            axes = axis if isinstance(axis, tuple) else (axis,)
            gg = np.expand_dims(gg, axes)
        a._accum(np.broadcast_to(gg * scale, a.data.shape).astype(a.data.dtype, copy=False))

    return _make(out, (a,), "mean" if mean else "sum", back)


# ---------------------------------------------------------------------------
# normalization / activation compounds

def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, max-subtracted for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        a._accum((g - dot) * y)

    return _make(y, (a,), "softmax", back)


def log_softmax(a: Tensor) -> Tensor:
    m = a.data.max(axis=-1, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def back(g):
        a._accum(g - sm * g.sum(axis=-1, keepdims=True))

    return _make(out, (a,), "log_softmax", back)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-last-axis layer norm with learnable scale and shift."""
    if gain.shape != (a.shape[-1],) or bias.shape != (a.shape[-1],):
        raise ShapeMismatch(f"layer_norm: params {gain.shape}/{bias.shape} vs {a.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = xhat * gain.data + bias.data
    n = a.shape[-1]

    def back(g):
        if gain.requires_grad:
            gain._accum((g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            bias._accum(g.reshape(-1, n).sum(axis=0))
        if a.requires_grad:
            gg = g * gain.data
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * xhat).mean(axis=-1, keepdims=True)
            a._accum((gg - m1 - xhat * m2) * inv)

    return _make(out, (a, gain, bias), "layer_norm", back)


def l2_normalize(a: Tensor, eps: float = 1e-8) -> Tensor:
    """x / sqrt(sum(x^2) + eps) along the last axis."""
    sq = (a.data * a.data).sum(axis=-1, keepdims=True)
    s = 1.0 / np.sqrt(sq + eps)
    y = a.data * s

    def back(g):
        dot = (g * a.data).sum(axis=-1, keepdims=True)
        a._accum(g * s - a.data * (s ** 3) * dot)

    return _make(y, (a,), "l2_normalize", back)


def cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross entropy of integer class targets against row logits."""
    t = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or t.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy: {logits.shape} vs targets {t.shape}")
    m = logits.data.max(axis=-1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    n = logits.shape[0]
    out = np.asarray(-logp[np.arange(n), t].mean(), dtype=logits.data.dtype)
    sm = np.exp(logp)

    def back(g):
        d = sm.copy()
        d[np.arange(n), t] -= 1.0
        logits._accum(d * (np.asarray(g) / n))

    return _make(out, (logits,), "cross_entropy", back)


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    worst_index: tuple
    analytic: np.ndarray
    numeric: np.ndarray


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor,
               h: float = 1e-3, tol: float = 1e-3) -> GradCheckReport:
    """Compare the analytic gradient of scalar-valued f at x against
    central finite differences, elementwise.

    Both sides are evaluated at float64 so the difference quotient
    resolves below tol; the backward formulas under test are the same
    ones the float32 training path runs.
    """
    x64 = x.data.astype(np.float64)
    leaf = Tensor(x64, requires_grad=True, dtype=np.float64)
    loss = f(leaf)
    backward(loss)
    analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(x64)

    numeric = np.zeros_like(x64)
    flat = x64.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        bump = flat.copy()
        bump[i] = flat[i] + h
        fp = float(f(Tensor(bump.reshape(x64.shape), dtype=np.float64)).data)
        bump[i] = flat[i] - h
        fm = float(f(Tensor(bump.reshape(x64.shape), dtype=np.float64)).data)
        nflat[i] = (fp - fm) / (2.0 * h)

    errs = np.array([_rel_err(float(a), float(n))
                     for a, n in zip(analytic.reshape(-1), numeric.reshape(-1))])
    worst = int(np.argmax(errs)) if errs.size else 0
    max_err = float(errs[worst]) if errs.size else 0.0
    return GradCheckReport(
        passed=max_err < tol,
        max_rel_err=max_err,
        worst_index=np.unravel_index(worst, x.data.shape) if errs.size else (),
        analytic=analytic,
        numeric=numeric,
    )


def grad_check_directional(f: Callable[[Tensor], Tensor], x: Tensor,
                           rng: np.random.Generator, n_dirs: int = 8,
                           h: float = 1e-3, tol: float = 1e-3) -> GradCheckReport:
    """Jacobian-vector-product check: analytic grad dotted with random
    unit directions against the directional central difference.
    Evaluated at float64, like grad_check."""
    x64 = x.data.astype(np.float64)
    leaf = Tensor(x64, requires_grad=True, dtype=np.float64)
    loss = f(leaf)
    backward(loss)
    analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(x64)

    a_vals = np.zeros(n_dirs)
    n_vals = np.zeros(n_dirs)
    for d in range(n_dirs):
        v = rng.standard_normal(x64.shape)
        v /= np.linalg.norm(v.reshape(-1)) + 1e-12
        fp = float(f(Tensor(x64 + h * v, dtype=np.float64)).data)
        fm = float(f(Tensor(x64 - h * v, dtype=np.float64)).data)
        a_vals[d] = float((analytic * v).sum())
        n_vals[d] = (fp - fm) / (2.0 * h)

    errs = np.array([_rel_err(a, n) for a, n in zip(a_vals, n_vals)])
    worst = int(np.argmax(errs))
    return GradCheckReport(
        passed=float(errs[worst]) < tol,
        max_rel_err=float(errs[worst]),
        worst_index=(worst,),
        analytic=a_vals,
        numeric=n_vals,
    )


# ---------------------------------------------------------------------------
# checkpoint tensor table ("VDCK"): little-endian, float32 payloads

_MAGIC = b"VDCK"
_VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(tensors)))
        for name, arr in tensors.items():
            a = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", a.ndim))
            for d in a.shape:
                fh.write(struct.pack("<I", d))
            fh.write(a.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    from .errors import BadMagic, TruncatedData

    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise BadMagic(f"expected {_MAGIC!r} header in {path}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise BadMagic(f"unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        end = off + 4 * n
        if end > len(blob):
            raise TruncatedData(f"tensor '{name}' payload truncated")
        arr = np.frombuffer(blob[off:end], dtype="<f4").reshape(dims).copy()
        off = end
        out[name] = arr
    return out
