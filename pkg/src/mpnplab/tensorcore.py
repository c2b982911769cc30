"""Dense numpy tensors on a reverse-mode tape, with FLOPs accounting.

Every op executed while a :class:`Tape` is active adds its forward FLOPs to
the active region (see :func:`region`).  ``Tape.backward`` walks the recorded
nodes in reverse creation order and attributes the FLOPs of every gradient it
produces either to ``backward_dy`` (activation gradients) or ``backward_dw``
(weight gradients), under the region of the op that consumed the operand.

Classification rule:

* a gradient flowing into a tensor flagged ``is_param`` is a weight gradient,
  except for the left operand of :func:`matmul`, which is always an
  activation gradient (``x @ W``: ``dx`` is dy, ``dW`` is dw);
* every other gradient is an activation gradient.

FLOPs convention: one multiply-accumulate is 2 FLOPs, so a ``(m,k)@(k,n)``
matmul costs ``2*m*k*n`` and each of its two backward matmuls costs the same.
Non-matmul ops use the fixed per-element constants in :data:`ELEMENTWISE_FLOPS`
(counted per output element forward, per element of each operand that
receives a gradient backward).  Gradient accumulation into an already
populated buffer is not counted.

Without an active tape ops run as plain numpy: nothing is recorded, nothing is
counted, and results never require grad.
"""

from __future__ import annotations

import builtins
import contextlib
from collections import defaultdict
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "Tape", "FlopsCounters", "RegionFlops", "ShapeError", "NonFiniteError",
    "TapeError", "region", "current_tape", "current_region", "detach_boundary",
    "parameter", "constant", "set_default_dtype", "default_dtype", "precision",
    "matmul", "add", "sub", "mul", "scale", "concat", "gelu", "sigmoid", "softmax",
    "layer_norm", "embedding", "cross_entropy", "reshape", "transpose", "getitem",
    "sum", "mean", "ELEMENTWISE_FLOPS", "REGION_TAGS",
]

# (forward per output element, backward per element of each grad-receiving operand)
ELEMENTWISE_FLOPS: Mapping[str, tuple[int, int]] = MappingProxyType({
    "add": (1, 1),
    "sub": (1, 1),
    "mul": (1, 2),
    "scale": (1, 1),
    "gelu": (8, 12),
    "sigmoid": (4, 3),
    "softmax": (5, 4),
    "layer_norm": (8, 14),
    "embedding": (0, 1),
    "cross_entropy": (5, 2),
    "sum": (1, 1),
    "concat": (0, 0),
    "reshape": (0, 0),
    "transpose": (0, 0),
    "getitem": (0, 0),
})

REGION_TAGS = ("encoder", "aligner", "gate", "input_embedding", "output_embedding",
               "head", "other")  # plus "block[i]"

_DEFAULT_DTYPE = [np.float32]
_TAPES: list["Tape"] = []
_REGIONS: list[str] = ["other"]


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def set_default_dtype(bits: int) -> None:
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _DEFAULT_DTYPE[0] = np.float32 if bits == 32 else np.float64


def default_dtype():
    return _DEFAULT_DTYPE[0]


@contextlib.contextmanager
def precision(bits: int):
    old = _DEFAULT_DTYPE[0]
    set_default_dtype(bits)
    try:
        yield
    finally:
        _DEFAULT_DTYPE[0] = old


def _valid_region(tag: str) -> bool:
    if tag in REGION_TAGS:
        return True
    return tag.startswith("block[") and tag.endswith("]") and tag[6:-1].isdigit()


@contextlib.contextmanager
def region(tag: str):
    """Attribute every op issued inside the block to ``tag``."""
    if not _valid_region(tag):
        raise ValueError(f"unknown region tag {tag!r}")
    _REGIONS.append(tag)
    try:
        yield
    finally:
        _REGIONS.pop()


def current_region() -> str:
    return _REGIONS[-1]


def current_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """An n-d array that may take part in a gradient tape.

    ``is_param`` marks trainable-capable weights (their gradients count as dw);
    toggling ``requires_grad`` freezes or unfreezes them.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, region_tag: str | None = None,
                 is_param: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind == "f" and arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        elif arr.dtype.kind in "iub" and requires_grad:
            arr = arr.astype(default_dtype())
        self.data = arr
        self._requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.region_tag = region_tag if region_tag is not None else current_region()
        self.is_param = is_param
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op: str | None = None

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, value: bool) -> None:
        self._requires_grad = bool(value)
        if not value:
            self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, region={self.region_tag!r}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def parameter(data, name: str | None = None, region_tag: str | None = None,
              trainable: bool = True, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or default_dtype()), requires_grad=trainable,
                  region_tag=region_tag, is_param=True, name=name)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=default_dtype()))


@dataclass(frozen=True)
class RegionFlops:
    forward: int = 0
    backward_dy: int = 0
    backward_dw: int = 0

    @property
    def backward(self) -> int:
        return self.backward_dy + self.backward_dw


@dataclass(frozen=True)
class FlopsCounters:
    """Immutable snapshot of a tape's counters, grouped by region."""

    by_region: Mapping[str, RegionFlops] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "by_region", MappingProxyType(dict(self.by_region)))

    @property
    def forward(self) -> int:
        return builtins.sum(r.forward for r in self.by_region.values())

    @property
    def backward_dy(self) -> int:
        return builtins.sum(r.backward_dy for r in self.by_region.values())

    @property
    def backward_dw(self) -> int:
        return builtins.sum(r.backward_dw for r in self.by_region.values())

    @property
    def backward(self) -> int:
        return self.backward_dy + self.backward_dw

    def region(self, tag: str) -> RegionFlops:
        return self.by_region.get(tag, RegionFlops())

    def blocks(self) -> dict[int, RegionFlops]:
        out = {}
        for tag, r in self.by_region.items():
            if tag.startswith("block["):
                out[int(tag[6:-1])] = r
        return dict(sorted(out.items()))

    def __sub__(self, other: "FlopsCounters") -> "FlopsCounters":
        tags = set(self.by_region) | set(other.by_region)
        diff = {}
        for t in sorted(tags):
            a, b = self.region(t), other.region(t)
            diff[t] = RegionFlops(a.forward - b.forward, a.backward_dy - b.backward_dy,
                                  a.backward_dw - b.backward_dw)
        return FlopsCounters(diff)

    def __add__(self, other: "FlopsCounters") -> "FlopsCounters":
        tags = set(self.by_region) | set(other.by_region)
        tot = {}
        for t in sorted(tags):
            a, b = self.region(t), other.region(t)
            tot[t] = RegionFlops(a.forward + b.forward, a.backward_dy + b.backward_dy,
                                 a.backward_dw + b.backward_dw)
        return FlopsCounters(tot)

    def as_dict(self) -> dict:
        return {t: {"forward": r.forward, "backward_dy": r.backward_dy,
                    "backward_dw": r.backward_dw} for t, r in sorted(self.by_region.items())}


class Tape:
    """Records ops for one backward pass and owns the FLOPs counters.

    Use as a context manager; tapes nest, the innermost one records.
    ``checked=True`` rejects non-finite op inputs.
    """

    def __init__(self, checked: bool = False):
        self.checked = checked
        self.nodes: list[Tensor] = []
        self.consumed = False
        self._counts: dict[str, list[int]] = defaultdict(lambda: [0, 0, 0])

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def count_forward(self, tag: str, flops: int) -> None:
        if flops:
            self._counts[tag][0] += int(flops)

    def flops_report(self) -> FlopsCounters:
        return FlopsCounters({t: RegionFlops(*c) for t, c in sorted(self._counts.items())})

    def reset(self) -> None:
        """Drop recorded nodes so the tape can record a fresh pass; counters persist."""
        self.nodes = []
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward")
        if loss._backward is _consumed_backward:
            raise TapeError("tape already consumed by a previous backward")
        if not loss.requires_grad or loss._backward is None:
            raise TapeError("loss does not depend on any tensor that requires grad")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g
            need = tuple(p.requires_grad for p in node._parents)
            results = node._backward(g, need)
            weight_slots = getattr(node._backward, "weight_slots", None)
            counts = self._counts[node.region_tag]
            for slot, (parent, res) in enumerate(zip(node._parents, results)):
                if res is None or not parent.requires_grad:
                    continue
                pg, flops = res
                is_dw = parent.is_param and (weight_slots is None or slot in weight_slots)
                counts[2 if is_dw else 1] += int(flops)
                if parent._backward is None:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
        self.nodes = []
        _release(loss)


def _release(loss: Tensor) -> None:
    # break reference cycles so consumed graphs can be collected
    stack = [loss]
    seen = set()
    while stack:
        t = stack.pop()
        if id(t) in seen or t._backward is None:
            continue
        seen.add(id(t))
        stack.extend(t._parents)
        t._backward = _consumed_backward
        t._parents = ()


def _consumed_backward(g, need):
    raise TapeError("tape already consumed")


def _check_finite(op: str, tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        if t.data.dtype.kind == "f" and not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{op}: non-finite input of shape {t.shape}")


def _record(op: str, out: np.ndarray, parents: Sequence[Tensor], backward, fwd_flops: int,
            weight_slots: tuple[int, ...] | None = None) -> Tensor:
    tape = current_tape()
    tag = current_region()
    if tape is None:
        return Tensor(out, region_tag=tag, dtype=out.dtype)
    if tape.checked:
        _check_finite(op, parents)
    tape.count_forward(tag, fwd_flops)
    needs = any(p.requires_grad for p in parents)
    res = Tensor(out, requires_grad=needs, region_tag=tag, dtype=out.dtype)
    if needs:
        if tape.consumed:
            tape.reset()
        if weight_slots is not None:
            backward.weight_slots = weight_slots
        res._parents = tuple(parents)
        res._backward = backward
        res._op = op
        tape.nodes.append(res)
    return res


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _ew(op: str) -> tuple[int, int]:
    return ELEMENTWISE_FLOPS[op]


# --- ops ---------------------------------------------------------------------

def matmul(a, b, transpose_b: bool = False) -> Tensor:
    """Batched ``a @ b`` (or ``a @ b.T`` on the last two axes of ``b``)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need >= 2-d operands, got {a.shape} and {b.shape}")
    bd = np.swapaxes(b.data, -1, -2) if transpose_b else b.data
    if a.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ "
                         f"{b.shape}{'^T' if transpose_b else ''}")
    try:
        out = np.matmul(a.data, bd)
    except ValueError as e:
        raise ShapeError(f"matmul: cannot broadcast {a.shape} and {b.shape}") from e
    m, k, n = a.shape[-2], a.shape[-1], bd.shape[-1]
    batch = int(np.prod(out.shape[:-2], dtype=np.int64))
    flops = 2 * batch * m * k * n
    a_data, b_data, a_shape, b_shape = a.data, bd, a.shape, b.shape

    def backward(g, need):
        ga = gb = None
        if need[0]:
            ga = (_unbroadcast(np.matmul(g, np.swapaxes(b_data, -1, -2)), a_shape), flops)
        if need[1]:
            gbd = np.matmul(np.swapaxes(a_data, -1, -2), g)
            if transpose_b:
                gbd = np.swapaxes(gbd, -1, -2)
            gb = (_unbroadcast(gbd, b_shape), flops)
        return ga, gb

    # the right operand is the weight unless only the left one is a parameter
    slots = (0,) if (a.is_param and not b.is_param) else (1,)
    return _record("matmul", out, (a, b), backward, flops, weight_slots=slots)


def _binary(op, a, b, fn, grads):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = fn(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from e
    fwd, bwd = _ew(op)
    a_shape, b_shape = a.shape, b.shape

    def backward(g, need):
        ga, gb = grads(g, a.data, b.data)
        res = [None, None]
        if need[0]:
            res[0] = (_unbroadcast(ga, a_shape), bwd * g.size)
        if need[1]:
            res[1] = (_unbroadcast(gb, b_shape), bwd * g.size)
        return res

    return _record(op, out, (a, b), backward, fwd * out.size)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y: (g, g))


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y: (g, -g))


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, x, y: (g * y, g * x))


def scale(x, c: float) -> Tensor:
    """Multiply by a python scalar."""
    x = _as_tensor(x)
    c = x.data.dtype.type(c)
    out = x.data * c
    fwd, bwd = _ew("scale")

    def backward(g, need):
        return [(g * c, bwd * g.size)]

    return _record("scale", out, (x,), backward, fwd * out.size)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g, need):
        res = []
        for i, n in enumerate(need):
            if not n:
                res.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            res.append((g[tuple(sl)], 0))
        return res

    return _record("concat", out, ts, backward, 0)


_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = _as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT_HALF))
    out = (xd * cdf).astype(xd.dtype, copy=False)
    fwd, bwd = _ew("gelu")

    def backward(g, need):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return [((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False), bwd * g.size)]

    return _record("gelu", out, (x,), backward, fwd * out.size)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    fwd, bwd = _ew("sigmoid")

    def backward(g, need):
        return [(g * out * (1.0 - out), bwd * g.size)]

    return _record("sigmoid", out, (x,), backward, fwd * out.size)


def softmax(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (broadcastable bool, True = keep)
    gives exact zeros at masked entries."""
    x = _as_tensor(x)
    xd = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        shifted = np.where(mask, xd, -np.inf)
    else:
        shifted = xd
    mx = np.max(shifted, axis=-1, keepdims=True)
    e = np.exp(shifted - mx)
    out = e / e.sum(axis=-1, keepdims=True)
    fwd, bwd = _ew("softmax")

    def backward(g, need):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return [(out * (g - dot), bwd * g.size)]

    return _record("softmax", out, (x,), backward, fwd * out.size)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias shapes {gamma.shape}, {beta.shape} "
                         f"do not match feature dim {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    fwd, bwd = _ew("layer_norm")

    def backward(g, need):
        res = [None, None, None]
        if need[0]:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            res[0] = (gx, bwd * g.size)
        lead = tuple(range(g.ndim - 1))
        if need[1]:
            res[1] = ((g * xhat).sum(axis=lead), 2 * g.size)
        if need[2]:
            res[2] = (g.sum(axis=lead), g.size)
        return res

    return _record("layer_norm", out, (x, gamma, beta), backward, fwd * out.size)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids is an integer array of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids.data if isinstance(ids, Tensor) else ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding: ids must be integers, got {ids.dtype}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding: id out of range [0, {vocab}) in table {table.shape}")
    out = table.data[ids]
    _, bwd = _ew("embedding")

    def backward(g, need):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return [(gt, bwd * g.size)]

    return _record("embedding", out, (table,), backward, 0)


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Weighted mean of ``-log softmax(logits)[target]`` over leading positions.

    ``weights`` (same shape as ``targets``) selects/weights positions; the
    mean divides by ``weights.sum()``.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != targets.shape:
        raise ShapeError(f"cross_entropy: weights {w.shape} vs targets {targets.shape}")
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: empty mask")
    ld = logits.data
    mx = ld.max(axis=-1, keepdims=True)
    shifted = ld - mx
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    wd = w.astype(ld.dtype)
    loss = np.asarray(-(picked * wd).sum() / ld.dtype.type(total), dtype=ld.dtype)
    fwd, bwd = _ew("cross_entropy")

    def backward(g, need):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None],
                          np.take_along_axis(p, targets[..., None], axis=-1) - 1, axis=-1)
        gl = p * (wd / ld.dtype.type(total))[..., None] * g
        return [(gl.astype(ld.dtype, copy=False), bwd * ld.size)]

    return _record("cross_entropy", loss, (logits,), backward, fwd * ld.size)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from e
    in_shape = x.shape

    def backward(g, need):
        return [(g.reshape(in_shape), 0)]

    return _record("reshape", out, (x,), backward, 0)


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    out = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def backward(g, need):
        return [(np.transpose(g, inv), 0)]

    return _record("transpose", out, (x,), backward, 0)


def getitem(x, index) -> Tensor:
    x = _as_tensor(x)
    out = np.array(x.data[index])
    in_shape, dtype = x.shape, x.dtype

    def backward(g, need):
        gx = np.zeros(in_shape, dtype=dtype)
        np.add.at(gx, index, g)
        return [(gx, 0)]

    return _record("getitem", out, (x,), backward, 0)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    in_shape = x.shape
    fwd, bwd = _ew("sum")

    def backward(g, need):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [(np.broadcast_to(g, in_shape).copy(), bwd * int(np.prod(in_shape)))]

    return _record("sum", out, (x,), backward, fwd * x.size)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def detach_boundary(x: Tensor, keep_grad: bool = False) -> Tensor:
    """Cut the gradient path at ``x``.

    The result shares ``x``'s values but has no producers, so backward never
    reaches them.  With ``keep_grad=True`` the result is a gradient sink: it
    still requires grad, so the activation gradient arriving *at* the boundary
    is computed (and counted) and stored on the result, but nothing below it.
    """
    out = Tensor(x.data, requires_grad=keep_grad, region_tag=x.region_tag, dtype=x.dtype)
    return out


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
