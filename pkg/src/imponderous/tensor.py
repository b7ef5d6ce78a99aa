"""Dense tensors with tape-based reverse-mode differentiation.

Values are plain ``numpy.ndarray`` objects in channels-first layout
(``[N, C, H, W]`` for image batches).  The main path runs in float32; a
float64 copy of the same graph is what :func:`grad_check` differentiates
numerically.  Operations only record onto a tape when one is active::

    with Tape() as tape:
        loss = softmax_cross_entropy(dense(x, w, b), labels)
    backward(tape, loss)

Outside a ``Tape`` block every op is a plain forward computation, which is
what inference and benchmarking use.
"""
from __future__ import annotations

import contextlib
import itertools
import os
import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels


class InvalidArgumentError(ValueError):
    """Raised when an op receives shapes or arguments it cannot accept."""


_ids = itertools.count(1)
_local = threading.local()

CONV_ALGORITHMS = ("auto", "im2col", "winograd")
_conv_algorithm = os.environ.get("IMPONDEROUS_CONV", "auto").strip().lower()
if _conv_algorithm not in CONV_ALGORITHMS:
    raise ValueError(f"IMPONDEROUS_CONV must be one of {CONV_ALGORITHMS}, got {_conv_algorithm!r}")


@contextlib.contextmanager
def conv_algorithm(name: str):
    """Temporarily force the forward convolution algorithm.

    ``auto`` uses Winograd for stride-1, pad-1 3x3 convolutions on
    even-sized maps when the numba kernels are active (the numpy tile
    transforms are slower than plain im2col) and im2col + GEMM elsewhere.
    The tile is F(4x4, 3x3) when both sides divide by 4, else F(2x2, 3x3).
    Gradients always come from the im2col formulation.
    """
    global _conv_algorithm
    if name not in CONV_ALGORITHMS:
        raise ValueError(f"unknown conv algorithm {name!r}")
    prev, _conv_algorithm = _conv_algorithm, name
    try:
        yield
    finally:
        _conv_algorithm = prev


class _Selections:
    """Winner masks of the max-type ops, recorded once and replayed.

    Replaying pins every max, MFM and pooling choice to the one made at the
    recording point, so a perturbed forward pass stays on the same smooth
    branch.  ``crossings`` counts replayed ops whose own choice would have
    differed.
    """

    def __init__(self):
        self.masks: list = []
        self.replay = False
        self.cursor = 0
        self.crossings = 0

    def take(self, natural):
        """Record ``natural`` or hand back the frozen mask in its place."""
        if not self.replay:
            self.masks.append(natural)
            return natural
        frozen = self.masks[self.cursor]
        self.cursor += 1
        if not np.array_equal(frozen, natural):
            self.crossings += 1
        return frozen


@contextlib.contextmanager
def _selections(sel: _Selections):
    prev = getattr(_local, "selections", None)
    _local.selections = sel
    sel.cursor = 0
    try:
        yield sel
    finally:
        _local.selections = prev


def _active_selections() -> _Selections | None:
    return getattr(_local, "selections", None)


def _as_float(value) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Variable:
    """A value plus an optional gradient, identified on a tape by ``tape_id``."""

    __slots__ = ("value", "grad", "requires_grad", "tape_id", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = _as_float(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Variable{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations for one lane.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction.  A tape belongs to the thread that opened it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._outer: Tape | None = None

    def __enter__(self) -> "Tape":
        self._outer = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._outer
        self._outer = None

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


def _record(inputs: Sequence[Variable], out_value: np.ndarray, backward: Callable) -> Variable:
    """Wrap ``out_value``; register ``backward(g) -> grads per input`` if needed."""
    tape = active_tape()
    needs = tape is not None and any(v.requires_grad for v in inputs)
    out = Variable(out_value, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(tuple(inputs), out, backward))
    return out


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise InvalidArgumentError(msg)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def _conv_geometry(x: Variable, kernel: Variable, bias: Variable, stride: int, pad: int) -> tuple:
    _check(x.value.ndim == 4, f"conv2d expects x of rank 4, got shape {x.shape}")
    _check(kernel.value.ndim == 4, f"conv2d expects a rank-4 kernel, got shape {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    _check(kcin == cin, f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    _check(bias.shape == (cout,), f"conv2d bias shape {bias.shape} does not match {cout} output channels")
    _check(stride >= 1 and pad >= 0, f"invalid stride={stride} / pad={pad}")
    hp, wp = h + 2 * pad, w + 2 * pad
    _check(kh <= hp and kw <= wp, f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    _check((hp - kh) % stride == 0 and (wp - kw) % stride == 0,
           f"non-integer output size for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}")
    return n, cin, h, w, cout, kh, kw, (hp - kh) // stride + 1, (wp - kw) // stride + 1


def _use_winograd(geom, stride: int, pad: int) -> bool:
    _, _, h, w, _, kh, kw, _, _ = geom
    fits = kh == 3 and kw == 3 and stride == 1 and pad == 1 and h % 2 == 0 and w % 2 == 0
    wanted = _conv_algorithm == "winograd" or (_conv_algorithm == "auto" and kernels.BACKEND == "numba")
    return fits and wanted


def _conv_backward(x: Variable, kernel: Variable, bias: Variable, xv: np.ndarray, geom, stride: int, pad: int):
    n, cin, h, w, cout, kh, kw, ho, wo = geom
    pointwise = kh == 1 and kw == 1 and stride == 1 and pad == 0
    wmat = kernel.value.reshape(cout, cin * kh * kw)

    def backward(g):
        g = g.reshape(n, cout, ho * wo)
        # columns are recomputed rather than kept alive between passes
        c = xv.reshape(n, cin, h * w) if pointwise else kernels.im2col(xv, kh, kw, stride, pad, ho, wo)
        gk = None
        if kernel.requires_grad:
            gk = np.zeros_like(wmat)
            for i in range(n):
                gk += g[i] @ c[i].T
            gk = gk.reshape(kernel.shape)
        gb = g.sum(axis=(0, 2)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g)
            if pointwise:
                gx = gcols.reshape(n, cin, h, w)
            else:
                gx = kernels.col2im(gcols, cin, h, w, kh, kw, stride, pad, ho, wo)
        return gx, gk, gb

    return backward


def conv2d(x: Variable, kernel: Variable, bias: Variable, stride: int = 1, pad: int = 0) -> Variable:
    """2-d cross-correlation with zero padding, computed as im2col + GEMM."""
    geom = _conv_geometry(x, kernel, bias, stride, pad)
    n, cin, h, w, cout, kh, kw, ho, wo = geom
    pointwise = kh == 1 and kw == 1 and stride == 1 and pad == 0
    xv = np.ascontiguousarray(x.value)
    if _use_winograd(geom, stride, pad):
        out = _winograd_conv3x3(xv, kernel.value, bias.value)
    else:
        cols = xv.reshape(n, cin, h * w) if pointwise else kernels.im2col(xv, kh, kw, stride, pad, ho, wo)
        out = np.matmul(kernel.value.reshape(cout, cin * kh * kw), cols)
        out += bias.value[:, None]
        out = out.reshape(n, cout, ho, wo)
        del cols
    return _record((x, kernel, bias), out, _conv_backward(x, kernel, bias, xv, geom, stride, pad))


def conv2d_mfm(x: Variable, kernel: Variable, bias: Variable, pad: int = 0) -> Variable:
    """``max_halves(conv2d(x, kernel, bias, 1, pad))`` without materialising the 2C-channel map.

    The fused form applies on the Winograd path; elsewhere (and while max
    selections are being frozen for a gradient check) it is the plain
    composition.
    """
    geom = _conv_geometry(x, kernel, bias, 1, pad)
    n, _, _, _, cout, _, _, ho, wo = geom
    _check(cout % 2 == 0, f"conv2d_mfm needs an even number of output channels, got {cout}")
    if not _use_winograd(geom, 1, pad) or _active_selections() is not None:
        return max_halves(conv2d(x, kernel, bias, 1, pad))
    xv = np.ascontiguousarray(x.value)
    out, take_first = _winograd_conv3x3(xv, kernel.value, bias.value, fuse_mfm=True)
    conv_backward = _conv_backward(x, kernel, bias, xv, geom, 1, pad)
    c = cout // 2

    def backward(g):
        gpre = np.zeros((n, cout, ho, wo), dtype=g.dtype)
        np.copyto(gpre[:, :c], g, where=take_first)
        np.copyto(gpre[:, c:], g, where=~take_first)
        return conv_backward(gpre)

    return _record((x, kernel, bias), out, backward)


def _winograd_conv3x3(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, fuse_mfm: bool = False):
    n, _, h, w = x.shape
    tile = 4 if h % 4 == 0 and w % 4 == 0 else 2
    th, tw = h // tile, w // tile
    u = kernels.winograd_filter(kernel, tile, role="u")
    v = kernels.winograd_input(x, 1, tile, role="v")
    m = kernels.tile_planes(u.shape[0], kernel.shape[0], v.shape[2], x.dtype, role="m")
    np.matmul(u, v, out=m)
    if fuse_mfm:
        return kernels.winograd_output_mfm(m, bias, n, th, tw, tile)
    return kernels.winograd_output(m, bias, n, th, tw, tile)


def maxpool2(x: Variable) -> Variable:
    """Non-overlapping 2x2 max pooling, stride 2."""
    _check(x.value.ndim == 4, f"maxpool2 expects rank 4, got shape {x.shape}")
    h, w = x.shape[2:]
    _check(h % 2 == 0 and w % 2 == 0, f"maxpool2 needs even spatial size, got {h}x{w}")
    out, arg = kernels.maxpool2_forward(x.value)
    sel = _active_selections()
    if sel is not None:
        arg = sel.take(arg)
        out = kernels.maxpool2_gather(x.value, arg)

    def backward(g):
        return (kernels.maxpool2_backward(np.ascontiguousarray(g), arg),)

    return _record((x,), out, backward)


def conv1d_channels(v: Variable, kernel: Variable) -> Variable:
    """Bias-free 1-d convolution along the channel axis of ``[N, C]``, 'same' zero padding."""
    _check(v.value.ndim == 2, f"conv1d_channels expects [N, C], got {v.shape}")
    _check(kernel.value.ndim == 1, f"conv1d_channels expects a 1-d kernel, got {kernel.shape}")
    k = kernel.shape[0]
    n, c = v.shape
    _check(k % 2 == 1, f"conv1d_channels kernel size must be odd, got {k}")
    _check(k <= c, f"kernel size {k} exceeds channel count {c}")
    half = (k - 1) // 2
    vp = np.pad(v.value, ((0, 0), (half, half)))
    win = np.lib.stride_tricks.sliding_window_view(vp, k, axis=1)  # [N, C, k]
    out = win @ kernel.value

    def backward(g):
        gk = np.einsum("nc,nck->k", g, win) if kernel.requires_grad else None
        gv = None
        if v.requires_grad:
            gp = np.zeros_like(vp)
            for j in range(k):
                gp[:, j:j + c] += g * kernel.value[j]
            gv = gp[:, half:half + c]
        return gv, gk

    return _record((v, kernel), out, backward)


# ---------------------------------------------------------------------------
# dense and elementwise
# ---------------------------------------------------------------------------

def dense(x: Variable, weight: Variable, bias: Variable) -> Variable:
    """Affine map ``x @ weight + bias`` with ``weight`` laid out ``[D, M]``."""
    _check(x.value.ndim == 2 and weight.value.ndim == 2,
           f"dense expects x [N, D] and weight [D, M], got {x.shape} and {weight.shape}")
    _check(x.shape[1] == weight.shape[0], f"dense dimension mismatch: {x.shape} @ {weight.shape}")
    _check(bias.shape == (weight.shape[1],), f"dense bias shape {bias.shape} != ({weight.shape[1]},)")
    # one vector-matrix product per row: a row's result must not depend on
    # how many rows share the call (BLAS picks gemv or gemm by batch size)
    out = np.matmul(x.value[:, None, :], weight.value)[:, 0] + bias.value

    def backward(g):
        return (
            g @ weight.value.T if x.requires_grad else None,
            x.value.T @ g if weight.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return _record((x, weight, bias), out, backward)


def elemwise_max(a: Variable, b: Variable) -> Variable:
    """Elementwise maximum; on ties the gradient goes to ``a``."""
    _check(a.shape == b.shape, f"elemwise_max shape mismatch: {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    out = np.maximum(av, bv)
    sel = _active_selections()
    frozen = None
    if sel is not None:
        frozen = sel.take(av >= bv)
        out = np.where(frozen, av, bv)

    def backward(g):
        take_a = av >= bv if frozen is None else frozen
        zero = np.zeros((), dtype=g.dtype)
        return np.where(take_a, g, zero), np.where(take_a, zero, g)

    return _record((a, b), out, backward)


def max_halves(x: Variable) -> Variable:
    """``max(x[:, :C], x[:, C:])`` along axis 1 without materialising the halves.

    Same values and tie rule as ``elemwise_max`` on the two crops; this is
    the fused form the max-feature-map activation uses.
    """
    _check(x.value.ndim >= 2 and x.shape[1] % 2 == 0,
           f"max_halves needs an even axis-1 size, got shape {x.shape}")
    c = x.shape[1] // 2
    first, second = x.value[:, :c], x.value[:, c:]
    out = np.maximum(first, second)
    sel = _active_selections()
    frozen = None
    if sel is not None:
        frozen = sel.take(first >= second)
        out = np.where(frozen, first, second)

    def backward(g):
        take_first = first >= second if frozen is None else frozen
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.copyto(gx[:, :c], g, where=take_first)
        np.copyto(gx[:, c:], g, where=~take_first)
        return (gx,)

    return _record((x,), out, backward)


def add(a: Variable, b: Variable) -> Variable:
    _check(a.shape == b.shape, f"add shape mismatch: {a.shape} vs {b.shape}")
    return _record((a, b), a.value + b.value, lambda g: (g, g))


def mul(a: Variable, b: Variable) -> Variable:
    _check(a.shape == b.shape, f"mul shape mismatch: {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return _record((a, b), av * bv, lambda g: (g * bv, g * av))


def scale(x: Variable, factor: float) -> Variable:
    """Multiply by a Python constant."""
    f = x.value.dtype.type(factor)
    return _record((x,), x.value * f, lambda g: (g * f,))


def sigmoid(x: Variable) -> Variable:
    v = x.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype)
    return _record((x,), out, lambda g: (g * out * (1 - out),))


def global_avg_pool(x: Variable) -> Variable:
    _check(x.value.ndim == 4, f"global_avg_pool expects [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    out = x.value.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w)).copy(),)

    return _record((x,), out, backward)


def scale_channels(x: Variable, s: Variable) -> Variable:
    """Multiply every spatial position of channel ``c`` by ``s[n, c]``."""
    _check(x.value.ndim == 4 and s.shape == x.shape[:2],
           f"scale_channels expects x [N, C, H, W] and s [N, C], got {x.shape} and {s.shape}")
    sv = s.value[:, :, None, None]
    out = x.value * sv

    def backward(g):
        return (
            g * sv if x.requires_grad else None,
            np.einsum("nchw,nchw->nc", g, x.value) if s.requires_grad else None,
        )

    return _record((x, s), out, backward)


def crop(x: Variable, index: tuple) -> Variable:
    """Basic-slice view (e.g. a channel half or a spatial quadrant), copied."""
    out = np.ascontiguousarray(x.value[index])
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[index] = g
        return (gx,)

    return _record((x,), out, backward)


def sum_all(x: Variable) -> Variable:
    out = np.asarray(x.value.sum(), dtype=x.dtype)
    shape = x.shape
    return _record((x,), out, lambda g: (np.full(shape, g, dtype=x.dtype),))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Variable, labels) -> Variable:
    """Batch-mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    _check(logits.value.ndim == 2, f"logits must be [N, K], got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    _check(labels.shape == (n,), f"expected {n} labels, got shape {labels.shape}")
    _check(np.issubdtype(labels.dtype, np.integer), "labels must be integers")
    bad = (labels < 0) | (labels >= k)
    _check(not bad.any(), f"label out of range [0, {k}): {labels[bad][:5].tolist()}")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _record((logits,), loss, backward)


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def backward(tape: Tape, root: Variable) -> None:
    """Populate ``.grad`` of every ``requires_grad`` Variable reachable from ``root``.

    Leaf gradients are added onto whatever ``.grad`` already holds, so several
    backward passes accumulate (used for micro-batching); call ``zero_grad``
    between optimizer steps.
    """
    _check(root.value.size == 1 and root.value.ndim == 0,
           f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    if all(node.output is not root for node in tape.nodes):
        # root is itself a leaf
        root.grad = np.ones((), dtype=root.dtype) if root.grad is None else root.grad + 1
        return
    grads: dict[int, np.ndarray] = {root.tape_id: np.ones((), dtype=root.dtype)}
    produced = set()
    for node in reversed(tape.nodes):
        out = node.output
        produced.add(out.tape_id)
        g = grads.pop(out.tape_id, None)
        if g is None:
            continue
        out.grad = g
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            prev = grads.get(inp.tape_id)
            grads[inp.tape_id] = gi if prev is None else prev + gi
    # whatever remains belongs to leaves (parameters, inputs)
    leaves = {}
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.tape_id in grads and inp.tape_id not in produced:
                leaves[inp.tape_id] = inp
    for tid, var in leaves.items():
        g = grads[tid].astype(var.dtype, copy=False)
        var.grad = g if var.grad is None else var.grad + g


def grad_check(f: Callable[[Variable], Variable], x: Variable, h: float = 1e-3,
               coords: Sequence[int] | None = None, freeze_selections: bool = False) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a Variable to a scalar Variable.  Everything runs on a float64
    copy of ``x``; ``f`` is responsible for keeping its own parameters in
    float64 too.  The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``; a NaN anywhere yields
    ``inf``.  ``coords`` restricts the check to a subset of flat indices.

    With ``freeze_selections`` the perturbed evaluations reuse the max/MFM/
    pooling winners of the unperturbed pass (see :func:`grad_check_report`).
    """
    return grad_check_report(f, x, h, coords, freeze_selections)["max_error"]


def grad_check_report(f: Callable[[Variable], Variable], x: Variable, h: float = 1e-3,
                      coords: Sequence[int] | None = None, freeze_selections: bool = False) -> dict:
    """Like :func:`grad_check` but returns ``{"max_error", "checked", "crossings"}``.

    A piecewise-linear max is not differentiable where its winner changes.
    In a deep MFM network a step of ``h`` in one weight moves thousands of
    pre-activations, and some pair almost always swaps order, which puts a
    kink inside ``[x - h, x + h]``.  Freezing the winners evaluates the
    smooth branch that contains ``x``, whose derivative is exactly the
    gradient at ``x``.  ``crossings`` counts perturbed evaluations in which
    at least one winner would have changed.
    """
    x64 = Variable(np.array(x.value, dtype=np.float64), requires_grad=True)
    sel = _Selections() if freeze_selections else None
    ctx = _selections(sel) if sel is not None else contextlib.nullcontext()
    with ctx, Tape() as tape:
        y = f(x64)
    backward(tape, y)
    analytic = np.zeros_like(x64.value) if x64.grad is None else x64.grad
    flat = x64.value.reshape(-1)
    idx = range(flat.size) if coords is None else coords

    def evaluate():
        if sel is None:
            return float(f(Variable(x64.value)).value)
        sel.replay = True
        before = sel.crossings
        with _selections(sel):
            out = float(f(Variable(x64.value)).value)
        sel.crossings = before + (sel.crossings > before)
        return out

    worst, checked = 0.0, 0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate()
        flat[i] = orig - h
        fm = evaluate()
        flat[i] = orig
        numeric = (fp - fm) / (2 * h)
        a = float(analytic.reshape(-1)[i])
        err = abs(a - numeric) / max(1.0, abs(a))
        checked += 1
        if not np.isfinite(err):
            worst = float("inf")
            break
        worst = max(worst, err)
    return {"max_error": worst, "checked": checked, "crossings": 0 if sel is None else sel.crossings}
