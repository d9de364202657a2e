"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

The tape records every primitive operation. Backward passes are built from
the same primitives, so with ``create_graph=True`` the gradient computation
itself lands on the tape and can be differentiated again (double backprop).
That property is what makes the exact second-order hypergradient of the
bi-level engine possible without any symbolic work.

Conventions:
  - all payloads are C-contiguous ``numpy`` float64 arrays
  - broadcasting is restricted to scalars (a python number or a size-1
    tensor); anything richer must be spelled out with ``expand``
  - a tensor either lives on exactly one tape (it has a node id) or is a
    constant (``tape is None``); constants never receive gradients
"""

from __future__ import annotations

import math
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class NumericalError(RuntimeError):
    """Raised when checked mode finds a non-finite value or a domain error."""


class TapeError(RuntimeError):
    """Raised on structural misuse of tapes (mixed tapes, missing graph)."""


_grad_enabled = True
_check_finite = False


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def checked():
    """Enable NaN/Inf detection and domain checks inside the block."""
    global _check_finite
    prev = _check_finite
    _check_finite = True
    try:
        yield
    finally:
        _check_finite = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


# --------------------------------------------------------------------------
# op registry
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class OpDef:
    forward: Callable  # (aux, *arrays) -> array
    vjp: Callable      # (g, inputs, out, aux) -> tuple of cotangents


_OPS: dict[str, OpDef] = {}


def _register(kind: str, forward: Callable, vjp: Callable) -> None:
    _OPS[kind] = OpDef(forward, vjp)


@dataclass
class Node:
    kind: str
    # one entry per operand: node id (int) or None when the operand was a
    # constant; constant payloads are kept alongside so the tape can replay
    inputs: tuple
    consts: tuple
    aux: dict
    value: np.ndarray


class Tape:
    """Append-only record of primitive ops; node inputs always precede them."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data) -> "Tensor":
        arr = _as_array(data)
        self.nodes.append(Node("leaf", (), (), {}, arr))
        return Tensor(arr, self, len(self.nodes) - 1)

    def tensor_for(self, node_id: int) -> "Tensor":
        return Tensor(self.nodes[node_id].value, self, node_id)

    def replay_check(self) -> bool:
        """Recompute every node from the leaves; all values must match bit for bit."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.kind == "leaf":
                values.append(node.value)
                continue
            args = []
            for node_id, const in zip(node.inputs, node.consts):
                args.append(values[node_id] if node_id is not None else const)
            out = _OPS[node.kind].forward(node.aux, *args)
            if not np.array_equal(out, node.value):
                raise TapeError(f"replay mismatch at node {len(values)} ({node.kind})")
            values.append(out)
        return True


def _contig(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray promotes 0-d to 1-d; keep true scalars scalar
    if arr.ndim == 0:
        return arr if arr.flags.c_contiguous else arr.copy()
    return np.ascontiguousarray(arr)


def _as_array(data) -> np.ndarray:
    return _contig(np.asarray(data, dtype=np.float64))


class Tensor:
    """float64 array bound to at most one tape node."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = _as_array(data)
        self.tape = tape
        self.node = node

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = "const" if self.node is None else f"node {self.node}"
        return f"Tensor({tag}, shape={self.shape})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_const(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_const(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        return add_const(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __rtruediv__(self, other):
        return div(constant(np.full(self.shape, float(other))), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, float(p))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)


def constant(data) -> Tensor:
    return Tensor(data)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(kind: str, operands: Sequence[Tensor], aux: dict | None = None) -> Tensor:
    aux = aux or {}
    tape = None
    if _grad_enabled:
        for t in operands:
            if t.tape is not None:
                if tape is None:
                    tape = t.tape
                elif tape is not t.tape:
                    raise TapeError(f"{kind}: operands live on different tapes")
    with np.errstate(all="ignore"):
        out = _OPS[kind].forward(aux, *[t.data for t in operands])
    if _check_finite and not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite result in op '{kind}'")
    if tape is None:
        return Tensor(out)
    inputs = tuple(t.node if t.tape is tape else None for t in operands)
    consts = tuple(None if t.tape is tape else t.data for t in operands)
    tape.nodes.append(Node(kind, inputs, consts, aux, out))
    return Tensor(out, tape, len(tape.nodes) - 1)


# --------------------------------------------------------------------------
# primitive definitions
# --------------------------------------------------------------------------

def _binary_shapes(kind, a, b):
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise ValueError(f"{kind}: shape mismatch {a.shape} vs {b.shape} (only scalar broadcast allowed)")


def _debroadcast(g: Tensor, shape: tuple) -> Tensor:
    # reduce a cotangent back to a scalar operand's shape
    if g.shape == shape:
        return g
    return reshape(reduce_sum(g, axes=tuple(range(g.ndim)), keepdims=False), shape)


_register("add", lambda aux, a, b: a + b,
          lambda g, ins, out, aux: (_debroadcast(g, ins[0].shape), _debroadcast(g, ins[1].shape)))

_register("sub", lambda aux, a, b: a - b,
          lambda g, ins, out, aux: (_debroadcast(g, ins[0].shape), _debroadcast(neg(g), ins[1].shape)))

_register("mul", lambda aux, a, b: a * b,
          lambda g, ins, out, aux: (_debroadcast(mul(g, ins[1]), ins[0].shape),
                                    _debroadcast(mul(g, ins[0]), ins[1].shape)))


def _div_forward(aux, a, b):
    if _check_finite and np.any(b == 0.0):
        raise NumericalError("div: zero divisor")
    return a / b


_register("div", _div_forward,
          lambda g, ins, out, aux: (_debroadcast(div(g, ins[1]), ins[0].shape),
                                    _debroadcast(neg(div(mul(g, ins[0]), mul(ins[1], ins[1]))), ins[1].shape)))

_register("neg", lambda aux, a: -a,
          lambda g, ins, out, aux: (neg(g),))

_register("scale", lambda aux, a: a * aux["c"],
          lambda g, ins, out, aux: (scale(g, aux["c"]),))

_register("add_const", lambda aux, a: a + aux["c"],
          lambda g, ins, out, aux: (g,))


def _power_forward(aux, a):
    if _check_finite and aux["p"] != round(aux["p"]) and np.any(a < 0.0):
        raise NumericalError("power: negative base with fractional exponent")
    return a ** aux["p"]


_register("power", _power_forward,
          lambda g, ins, out, aux: (scale(mul(g, power(ins[0], aux["p"] - 1.0)), aux["p"]),))

_register("relu", lambda aux, a: np.maximum(a, 0.0),
          lambda g, ins, out, aux: (mul(g, constant((ins[0].data > 0.0).astype(np.float64))),))

_register("exp", lambda aux, a: np.exp(a),
          lambda g, ins, out, aux: (mul(g, out),))


def _log_forward(aux, a):
    if _check_finite and np.any(a <= 0.0):
        raise NumericalError("log: non-positive operand")
    return np.log(a)


_register("log", _log_forward,
          lambda g, ins, out, aux: (div(g, ins[0]),))


def _matmul_vjp(g, ins, out, aux):
    a, b = ins
    return (matmul(g, transpose(b, (1, 0))), matmul(transpose(a, (1, 0)), g))


_register("matmul", lambda aux, a, b: a @ b, _matmul_vjp)

_register("transpose", lambda aux, a: _contig(np.transpose(a, aux["axes"])),
          lambda g, ins, out, aux: (transpose(g, tuple(np.argsort(aux["axes"]))),))

_register("reshape", lambda aux, a: _contig(a.reshape(aux["shape"])),
          lambda g, ins, out, aux: (reshape(g, ins[0].shape),))


def _expand_vjp(g, ins, out, aux):
    in_shape = ins[0].shape
    axes = tuple(i for i, (s, t) in enumerate(zip(in_shape, aux["shape"])) if s == 1 and t != 1)
    return (reduce_sum(g, axes=axes, keepdims=True) if axes else g,)


_register("expand", lambda aux, a: _contig(np.broadcast_to(a, aux["shape"])), _expand_vjp)


def _reduce_sum_forward(aux, a):
    out = np.sum(a, axis=aux["axes"], keepdims=aux["keepdims"])
    return _contig(np.asarray(out, dtype=np.float64))


def _reduce_sum_vjp(g, ins, out, aux):
    in_shape = ins[0].shape
    if aux["keepdims"]:
        kept = g
    else:
        shape = list(in_shape)
        for ax in aux["axes"]:
            shape[ax] = 1
        kept = reshape(g, tuple(shape))
    return (expand(kept, in_shape),)


_register("reduce_sum", _reduce_sum_forward, _reduce_sum_vjp)


def _slices(aux):
    return tuple(slice(s, e, st) for (s, e, st) in aux["slices"])


_register("slice", lambda aux, a: _contig(a[_slices(aux)]),
          lambda g, ins, out, aux: (scatter_slice(g, ins[0].shape, aux["slices"]),))


def _scatter_forward(aux, a):
    out = np.zeros(aux["shape"], dtype=np.float64)
    out[_slices(aux)] = a
    return out


_register("scatter_slice", _scatter_forward,
          lambda g, ins, out, aux: (slice_by_spec(g, aux["slices"]),))


def _concat_forward(aux, *arrays):
    return _contig(np.concatenate(arrays, axis=aux["axis"]))


def _concat_vjp(g, ins, out, aux):
    axis = aux["axis"]
    grads = []
    off = 0
    for t in ins:
        n = t.shape[axis]
        spec = [(0, s, 1) for s in g.shape]
        spec[axis] = (off, off + n, 1)
        grads.append(slice_by_spec(g, tuple(spec)))
        off += n
    return tuple(grads)


_register("concat", _concat_forward, _concat_vjp)


# --------------------------------------------------------------------------
# primitive wrappers
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes("add", a, b)
    return _apply("add", (a, b))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes("sub", a, b)
    return _apply("sub", (a, b))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes("mul", a, b)
    return _apply("mul", (a, b))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes("div", a, b)
    return _apply("div", (a, b))


def neg(a) -> Tensor:
    return _apply("neg", (_wrap(a),))


def scale(a, c: float) -> Tensor:
    return _apply("scale", (_wrap(a),), {"c": float(c)})


def add_const(a, c: float) -> Tensor:
    return _apply("add_const", (_wrap(a),), {"c": float(c)})


def power(a, p: float) -> Tensor:
    return _apply("power", (_wrap(a),), {"p": float(p)})


def relu(a) -> Tensor:
    return _apply("relu", (_wrap(a),))


def exp(a) -> Tensor:
    return _apply("exp", (_wrap(a),))


def log(a) -> Tensor:
    return _apply("log", (_wrap(a),))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "scale": scale, "relu": relu, "exp": exp, "log": log, "power": power,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Uniform entry point for the elementwise family.

    ``scale`` and ``power`` take their constant as ``b``; ``neg``/``relu``/
    ``exp``/``log`` are unary and reject ``b``.
    """
    if kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind '{kind}'")
    fn = _ELEMENTWISE[kind]
    if kind in ("neg", "relu", "exp", "log"):
        if b is not None:
            raise ValueError(f"{kind} is unary")
        return fn(a)
    if kind in ("scale", "power"):
        return fn(a, float(b))
    return fn(a, b)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul: 2-D operands only")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner extents differ ({a.shape} vs {b.shape})")
    return _apply("matmul", (a, b))


def transpose(a, axes: tuple) -> Tensor:
    return _apply("transpose", (_wrap(a),), {"axes": tuple(int(x) for x in axes)})


def reshape(a, shape: tuple) -> Tensor:
    a = _wrap(a)
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise ValueError(f"reshape: cannot view {a.shape} as {shape}")
    return _apply("reshape", (a,), {"shape": shape})


def expand(a, shape: tuple) -> Tensor:
    a = _wrap(a)
    shape = tuple(int(s) for s in shape)
    if len(shape) != a.ndim or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ValueError(f"expand: {a.shape} does not expand to {shape}")
    return _apply("expand", (a,), {"shape": shape})


def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None or axes == ():
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(ax % ndim for ax in axes))


def reduce_sum(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axes(axes, a.ndim)
    return _apply("reduce_sum", (a,), {"axes": axes, "keepdims": bool(keepdims)})


def reduce_mean(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axes(axes, a.ndim)
    n = math.prod(a.shape[ax] for ax in axes) if a.ndim else 1
    return scale(reduce_sum(a, axes, keepdims), 1.0 / max(n, 1))


def reduce(a, kind: str, axes=None, keepdims: bool = False) -> Tensor:
    """Reduction entry point; an empty axis list means full reduction."""
    if kind == "sum":
        return reduce_sum(a, axes, keepdims)
    if kind == "mean":
        return reduce_mean(a, axes, keepdims)
    raise ValueError(f"unknown reduction '{kind}'")


def _canonical_slice_spec(a: Tensor, idx) -> tuple:
    if not isinstance(idx, tuple):
        idx = (idx,)
    if len(idx) > a.ndim:
        raise ValueError("slice: too many indices")
    spec = []
    for ax, s in enumerate(idx):
        if isinstance(s, int):
            raise ValueError("slice: integer indices unsupported; use a 1-length range")
        start, stop, step = s.indices(a.shape[ax])
        if step < 1:
            raise ValueError("slice: step must be >= 1")
        spec.append((start, stop, step))
    for ax in range(len(idx), a.ndim):
        spec.append((0, a.shape[ax], 1))
    return tuple(spec)


def slice_(a, idx) -> Tensor:
    a = _wrap(a)
    return _apply("slice", (a,), {"slices": _canonical_slice_spec(a, idx)})


def slice_by_spec(a, spec: tuple) -> Tensor:
    return _apply("slice", (_wrap(a),), {"slices": tuple(spec)})


def scatter_slice(a, shape: tuple, spec: tuple) -> Tensor:
    """Embed ``a`` into zeros of ``shape`` at the given slice spec (dual of slice)."""
    return _apply("scatter_slice", (_wrap(a),), {"shape": tuple(int(s) for s in shape), "slices": tuple(spec)})


def concat(tensors: Sequence, axis: int) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty input list")
    axis = axis % tensors[0].ndim
    return _apply("concat", tuple(tensors), {"axis": axis})


def detach(a: Tensor) -> Tensor:
    return a.detach()


# --------------------------------------------------------------------------
# composite ops
# --------------------------------------------------------------------------

def pad2d(x, pad: int) -> Tensor:
    """Zero-pad the two trailing spatial axes of a B x C x H x W tensor."""
    if pad == 0:
        return x
    B, C, H, W = x.shape
    spec = ((0, B, 1), (0, C, 1), (pad, pad + H, 1), (pad, pad + W, 1))
    return scatter_slice(x, (B, C, H + 2 * pad, W + 2 * pad), spec)


def conv2d(x, w, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) via im2col and a single matmul.

    Built entirely from recorded primitives so second derivatives come for
    free from the tape.
    """
    x, w = _wrap(x), _wrap(w)
    B, C, H, W = x.shape
    O, C2, kh, kw = w.shape
    if C != C2:
        raise ValueError(f"conv2d: channel mismatch (input {C}, weight {C2})")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if kh > H + 2 * pad or kw > W + 2 * pad:
        raise ValueError("conv2d: kernel larger than padded input")
    xp = pad2d(x, pad)
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    patches = []
    for i in range(kh):
        for j in range(kw):
            spec = ((0, B, 1), (0, C, 1),
                    (i, i + stride * (Ho - 1) + 1, stride),
                    (j, j + stride * (Wo - 1) + 1, stride))
            patches.append(slice_by_spec(xp, spec))
    col = concat(patches, axis=1)                       # B x (kh*kw*C) x Ho x Wo
    col = transpose(col, (0, 2, 3, 1))
    col = reshape(col, (B * Ho * Wo, kh * kw * C))
    wmat = reshape(transpose(w, (0, 2, 3, 1)), (O, kh * kw * C))
    out = matmul(col, transpose(wmat, (1, 0)))          # (B*Ho*Wo) x O
    out = transpose(reshape(out, (B, Ho, Wo, O)), (0, 3, 1, 2))
    if bias is not None:
        bias = _wrap(bias)
        out = add(out, expand(reshape(bias, (1, O, 1, 1)), out.shape))
    return out


def avg_down(x, factor: int) -> Tensor:
    x = _wrap(x)
    B, C, H, W = x.shape
    if H % factor or W % factor:
        raise ValueError(f"avg_down: extents {H}x{W} not divisible by {factor}")
    r = reshape(x, (B, C, H // factor, factor, W // factor, factor))
    return scale(reduce_sum(r, axes=(3, 5)), 1.0 / (factor * factor))


def nearest_up(x, factor: int) -> Tensor:
    x = _wrap(x)
    B, C, H, W = x.shape
    r = reshape(x, (B, C, H, 1, W, 1))
    r = expand(r, (B, C, H, factor, W, factor))
    return reshape(r, (B, C, H * factor, W * factor))


def resample(x, mode: str, factor: int) -> Tensor:
    """Spatial rescaling: 'avg-down' distributes 1/factor^2, 'nearest-up' sums."""
    if factor < 1:
        raise ValueError("resample: factor must be >= 1")
    if mode == "avg-down":
        return avg_down(x, factor)
    if mode == "nearest-up":
        return nearest_up(x, factor)
    raise ValueError(f"resample: unknown mode '{mode}'")


def masked_mean(x, mask) -> tuple[Tensor, np.ndarray]:
    """Per-(batch, channel) mean of ``x`` over positions where ``mask`` is 1.

    ``mask`` is a constant B x H x W array of {0,1}. Batch elements whose mask
    is empty yield a zero row; the returned boolean validity vector marks
    which rows are real means. Empty rows must be excluded from any
    downstream similarity terms.
    """
    x = _wrap(x)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    B, C, H, W = x.shape
    if m.shape != (B, H, W):
        raise ValueError(f"masked_mean: mask shape {m.shape} does not match {(B, H, W)}")
    bad = (m != 0.0) & (m != 1.0)
    if np.any(bad):
        raise ValueError("masked_mean: mask values must be 0 or 1")
    counts = m.sum(axis=(1, 2))                          # (B,)
    m_full = np.ascontiguousarray(np.broadcast_to(m[:, None, :, :], (B, C, H, W)))
    s = reduce_sum(mul(x, constant(m_full)), axes=(2, 3))   # B x C
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    inv_full = np.ascontiguousarray(np.broadcast_to(inv[:, None], (B, C)))
    out = mul(s, constant(inv_full))
    return out, counts > 0


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

class ParamSet:
    """Ordered name -> Tensor map with a role tag.

    Shapes are frozen at construction; iteration order is insertion order and
    therefore deterministic.
    """

    def __init__(self, role: str, entries: Iterable[tuple[str, Tensor]] = ()):
        self.role = role
        self._entries: dict[str, Tensor] = {}
        for name, t in entries:
            self.add(name, t)

    def add(self, name: str, t: Tensor) -> None:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name '{name}'")
        self._entries[name] = _wrap(t)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __setitem__(self, name: str, t: Tensor) -> None:
        t = _wrap(t)
        if name in self._entries and self._entries[name].shape != t.shape:
            raise ValueError(f"parameter '{name}' shape is frozen at {self._entries[name].shape}")
        self._entries[name] = t

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries.keys())

    def tensors(self) -> list[Tensor]:
        return list(self._entries.values())

    def items(self):
        return self._entries.items()

    def num_params(self) -> int:
        return sum(t.size for t in self._entries.values())

    def clone(self) -> "ParamSet":
        return ParamSet(self.role, [(n, Tensor(t.data.copy())) for n, t in self.items()])

    def detached(self) -> "ParamSet":
        return ParamSet(self.role, [(n, t.detach()) for n, t in self.items()])

    def bind(self, tape: Tape) -> "ParamSet":
        """Register every entry as a leaf on ``tape`` (data is shared, not copied)."""
        return ParamSet(self.role, [(n, tape.leaf(t.data)) for n, t in self.items()])

    def map_with(self, other: "ParamSet", fn) -> "ParamSet":
        if self.names() != other.names():
            raise ValueError("ParamSet name mismatch")
        return ParamSet(self.role, [(n, fn(self[n], other[n])) for n in self.names()])


# --------------------------------------------------------------------------
# reverse pass
# --------------------------------------------------------------------------

def backprop(outputs: Sequence[Tensor], seeds: Sequence[Tensor | np.ndarray],
             wrt: Sequence[Tensor], create_graph: bool = False,
             stop_at: Sequence[Tensor] = (), reached_out: list | None = None) -> list[Tensor]:
    """General vector-Jacobian product over one tape.

    Seeds cotangents at ``outputs`` and pulls them back to ``wrt`` (leaves or
    intermediates). Nodes listed in ``stop_at`` act as graph boundaries: the
    pass records their cotangent but does not continue into their inputs.
    With ``create_graph`` the cotangent arithmetic is recorded, so the result
    is differentiable again. Entries of ``wrt`` that the pass never touched
    come back as zeros; ``reached_out`` (if given) is filled with one boolean
    per entry.
    """
    if not outputs:
        raise ValueError("backprop: no outputs")
    tape = None
    for y in outputs:
        if y.tape is None:
            raise TapeError("backprop: output is not on a tape")
        if tape is None:
            tape = y.tape
        elif tape is not y.tape:
            raise TapeError("backprop: outputs on different tapes")

    cot: dict[int, Tensor] = {}
    for y, s in zip(outputs, seeds):
        s = _wrap(s)
        if s.shape != y.shape:
            raise ValueError("backprop: seed shape mismatch")
        cot[y.node] = add(cot[y.node], s) if y.node in cot else s

    barrier = {t.node for t in stop_at if t.tape is tape}
    limit = max(cot)

    def run():
        for i in range(limit, -1, -1):
            if i not in cot:
                continue
            node = tape.nodes[i]
            if node.kind == "leaf" or i in barrier:
                continue
            g = cot[i]
            ins = tuple(tape.tensor_for(j) if j is not None else Tensor(c)
                        for j, c in zip(node.inputs, node.consts))
            out_t = tape.tensor_for(i)
            contribs = _OPS[node.kind].vjp(g, ins, out_t, node.aux)
            for j, contrib in zip(node.inputs, contribs):
                if j is None or contrib is None:
                    continue
                cot[j] = add(cot[j], contrib) if j in cot else contrib

    if create_graph:
        run()
    else:
        with no_grad():
            run()

    results = []
    for w in wrt:
        hit = w.tape is tape and w.node in cot
        if reached_out is not None:
            reached_out.append(hit)
        results.append(cot[w.node] if hit else Tensor(np.zeros(w.shape)))
    return results


def grad(loss: Tensor, params: ParamSet | Sequence[Tensor], create_graph: bool = False,
         stop_at: Sequence[Tensor] = ()) -> ParamSet | list[Tensor]:
    """Gradients of a scalar loss; mirrors the shape of ``params``.

    Parameters unreachable from the loss get zero gradients and a
    RuntimeWarning. With ``create_graph=True`` the gradients stay on the tape
    and can be differentiated once more.
    """
    if loss.size != 1:
        raise ValueError("grad: loss must be scalar")
    if loss.tape is None:
        raise TapeError("grad: loss is not on a tape")
    as_paramset = isinstance(params, ParamSet)
    tensors = params.tensors() if as_paramset else list(params)
    names = params.names() if as_paramset else [str(i) for i in range(len(tensors))]
    seed = Tensor(np.ones(loss.shape))
    reached: list[bool] = []
    grads = backprop([loss], [seed], tensors, create_graph=create_graph,
                     stop_at=stop_at, reached_out=reached)
    unreached = [n for n, hit in zip(names, reached) if not hit]
    if unreached:
        warnings.warn(f"grad: parameters unreachable from loss: {unreached}", RuntimeWarning, stacklevel=2)
    if as_paramset:
        return ParamSet(params.role, list(zip(names, grads)))
    return grads


# --------------------------------------------------------------------------
# finite-difference verification
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    per_param: dict[str, tuple[float, float]] = field(default_factory=dict)  # name -> (max_rel, mean_rel)
    max_rel: float = 0.0
    mean_rel: float = 0.0

    def passed(self, tol: float) -> bool:
        return self.max_rel < tol

    def __str__(self) -> str:
        lines = [f"{name}: max {mx:.3e} mean {mn:.3e}" for name, (mx, mn) in self.per_param.items()]
        lines.append(f"overall: max {self.max_rel:.3e} mean {self.mean_rel:.3e}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / denom


def check_grad(f: Callable[[ParamSet], Tensor], params: ParamSet, eps: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` must be a deterministic closure mapping a tape-bound ParamSet to a
    scalar Tensor. Relative errors use denominator max(|analytic|, |numeric|,
    1e-12) so exactly-zero pairs compare clean.
    """
    if eps <= 0:
        raise ValueError("check_grad: eps must be positive")
    tape = Tape()
    bound = params.bind(tape)
    y = f(bound)
    if not np.isfinite(y.data).all():
        raise NumericalError("check_grad: non-finite function value")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        analytic = grad(y, bound)

    work = params.clone()

    def eval_at() -> float:
        with no_grad():
            val = f(work)
        v = val.item()
        if not math.isfinite(v):
            raise NumericalError("check_grad: non-finite probe value")
        return v

    report = GradCheckReport()
    all_rel = []
    for name in params.names():
        arr = work[name].data
        num = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = eval_at()
            flat[i] = orig - eps
            fm = eval_at()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * eps)
        rel = relative_error(analytic[name].data, num)
        all_rel.append(rel.reshape(-1))
        report.per_param[name] = (float(rel.max()) if rel.size else 0.0,
                                  float(rel.mean()) if rel.size else 0.0)
    joined = np.concatenate(all_rel) if all_rel else np.zeros(1)
    report.max_rel = float(joined.max())
    report.mean_rel = float(joined.mean())
    return report
