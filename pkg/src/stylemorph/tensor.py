"""Reverse-mode autodiff over small dense float64 tensors.

Expression graphs are built once from :func:`leaf` / :func:`const` nodes and
the op builders below, then evaluated as pure functions of the leaf bindings.
Nodes are immutable, so a graph constructed outside an optimization loop can
be re-evaluated every step with fresh leaf values and shared across threads.

Values are plain ``numpy`` float64 arrays (row-major); every op validates
shapes at graph-build time and checks for non-finite results at evaluation
time.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Node", "TensorError", "ShapeError", "NonFiniteError", "GradCheck",
    "leaf", "const", "add", "sub", "mul", "div", "neg", "pow_scalar",
    "exp", "log", "sqrt", "absval", "matmul", "linear", "conv2d",
    "modulated_conv2d", "avgpool_2x", "upsample_2x", "resize_bilinear",
    "leaky_relu", "clamp", "reduce_sum", "reduce_mean", "softmax", "roll",
    "reshape", "l1_norm", "l2_norm", "topo_order", "evaluate", "gradients",
    "evaluate_with_gradients", "finite_diff_check", "bilinear_resize_array",
]


class TensorError(ValueError):
    """Base class for graph construction/evaluation errors."""


class ShapeError(TensorError):
    """Operand shapes violate an op contract."""


class NonFiniteError(ArithmeticError):
    """A forward value or gradient contains NaN/Inf; message names the node."""


_ids = itertools.count()


class Node:
    """One op in an expression graph.

    ``op`` is the op kind, ``inputs`` the operand nodes, ``params`` static
    op parameters, ``shape`` the inferred output shape. Identity is object
    identity; nodes hash by id so they key evaluation environments.
    """

    __slots__ = ("id", "op", "inputs", "params", "shape", "name")

    def __init__(self, op: str, inputs: tuple["Node", ...], params: dict,
                 shape: tuple[int, ...], name: str | None = None):
        self.id = next(_ids)
        self.op = op
        self.inputs = inputs
        self.params = params
        self.shape = shape
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node {self.id} {self.op}{label} {self.shape}>"

    # arithmetic sugar; scalars become const nodes
    def __add__(self, other):
        return add(self, _as_node(other))

    def __radd__(self, other):
        return add(_as_node(other), self)

    def __sub__(self, other):
        return sub(self, _as_node(other))

    def __rsub__(self, other):
        return sub(_as_node(other), self)

    def __mul__(self, other):
        return mul(self, _as_node(other))

    def __rmul__(self, other):
        return mul(_as_node(other), self)

    def __truediv__(self, other):
        return div(self, _as_node(other))

    def __rtruediv__(self, other):
        return div(_as_node(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, float(p))


def _as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return const(x)


def _asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def leaf(shape: Sequence[int], name: str | None = None) -> Node:
    """A placeholder bound to a value at evaluation time."""
    return Node("leaf", (), {}, tuple(int(s) for s in shape), name)


def const(value, name: str | None = None) -> Node:
    v = _asarray(value)
    return Node("const", (), {"value": v}, v.shape, name)


# ---------------------------------------------------------------------------
# op registry: forward(params, *inputs) -> value
#              vjp(params, grad, out_value, *inputs) -> per-input grads
# ---------------------------------------------------------------------------

_FWD: dict[str, Callable] = {}
_VJP: dict[str, Callable] = {}


def _op(name):
    def deco(fn):
        _FWD[name] = fn
        return fn
    return deco


def _vjp(name):
    def deco(fn):
        _VJP[name] = fn
        return fn
    return deco


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Node, b: Node, opname: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{opname}: cannot broadcast {a.shape} with {b.shape}") from e


# -- elementwise binary -----------------------------------------------------

def add(a: Node, b: Node) -> Node:
    return Node("add", (a, b), {}, _broadcast_shape(a, b, "add"))


def sub(a: Node, b: Node) -> Node:
    return Node("sub", (a, b), {}, _broadcast_shape(a, b, "sub"))


def mul(a: Node, b: Node) -> Node:
    return Node("mul", (a, b), {}, _broadcast_shape(a, b, "mul"))


def div(a: Node, b: Node) -> Node:
    return Node("div", (a, b), {}, _broadcast_shape(a, b, "div"))


_op("add")(lambda p, a, b: a + b)
_op("sub")(lambda p, a, b: a - b)
_op("mul")(lambda p, a, b: a * b)
_op("div")(lambda p, a, b: a / b)


@_vjp("add")
def _(p, g, y, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


@_vjp("sub")
def _(p, g, y, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


@_vjp("mul")
def _(p, g, y, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@_vjp("div")
def _(p, g, y, a, b):
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


# -- elementwise unary ------------------------------------------------------

def neg(a: Node) -> Node:
    return Node("neg", (a,), {}, a.shape)


def pow_scalar(a: Node, p: float) -> Node:
    return Node("pow", (a,), {"p": float(p)}, a.shape)


def exp(a: Node) -> Node:
    return Node("exp", (a,), {}, a.shape)


def log(a: Node) -> Node:
    return Node("log", (a,), {}, a.shape)


def sqrt(a: Node) -> Node:
    return Node("sqrt", (a,), {}, a.shape)


def absval(a: Node) -> Node:
    return Node("abs", (a,), {}, a.shape)


def leaky_relu(a: Node, slope: float = 0.2) -> Node:
    return Node("leaky_relu", (a,), {"slope": float(slope)}, a.shape)


def clamp(a: Node, lo: float, hi: float) -> Node:
    if not lo < hi:
        raise TensorError(f"clamp: lo {lo} must be < hi {hi}")
    return Node("clamp", (a,), {"lo": float(lo), "hi": float(hi)}, a.shape)


_op("neg")(lambda p, a: -a)
_op("pow")(lambda p, a: a ** p["p"])
_op("exp")(lambda p, a: np.exp(a))
_op("log")(lambda p, a: np.log(a))
_op("sqrt")(lambda p, a: np.sqrt(a))
_op("abs")(lambda p, a: np.abs(a))
_op("leaky_relu")(lambda p, a: np.where(a >= 0, a, p["slope"] * a))
_op("clamp")(lambda p, a: np.clip(a, p["lo"], p["hi"]))

_vjp("neg")(lambda p, g, y, a: (-g,))
_vjp("pow")(lambda p, g, y, a: (g * p["p"] * a ** (p["p"] - 1.0),))
_vjp("exp")(lambda p, g, y, a: (g * y,))
_vjp("log")(lambda p, g, y, a: (g / a,))
_vjp("sqrt")(lambda p, g, y, a: (g * 0.5 / y,))
_vjp("abs")(lambda p, g, y, a: (g * np.sign(a),))
_vjp("leaky_relu")(lambda p, g, y, a: (np.where(a >= 0, g, p["slope"] * g),))
_vjp("clamp")(lambda p, g, y, a: (g * ((a >= p["lo"]) & (a <= p["hi"])),))


# -- shape ops ---------------------------------------------------------------

def reshape(a: Node, shape: Sequence[int]) -> Node:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != int(np.prod(a.shape)):
        raise ShapeError(f"reshape: {a.shape} -> {shape} changes element count")
    return Node("reshape", (a,), {"shape": shape}, shape)


_op("reshape")(lambda p, a: a.reshape(p["shape"]))
_vjp("reshape")(lambda p, g, y, a: (g.reshape(a.shape),))


def roll(a: Node, shift: int, axis: int) -> Node:
    if not -len(a.shape) <= axis < len(a.shape):
        raise ShapeError(f"roll: axis {axis} out of range for {a.shape}")
    return Node("roll", (a,), {"shift": int(shift), "axis": int(axis)}, a.shape)


_op("roll")(lambda p, a: np.roll(a, p["shift"], axis=p["axis"]))
_vjp("roll")(lambda p, g, y, a: (np.roll(g, -p["shift"], axis=p["axis"]),))


# -- reductions ---------------------------------------------------------------

def _norm_axes(a: Node, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(len(a.shape)))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(ax % len(a.shape) for ax in axes)


def _reduced_shape(shape, axes, keepdims):
    if keepdims:
        return tuple(1 if i in axes else n for i, n in enumerate(shape))
    return tuple(n for i, n in enumerate(shape) if i not in axes)


def reduce_sum(a: Node, axes=None, keepdims: bool = False) -> Node:
    ax = _norm_axes(a, axes)
    return Node("sum", (a,), {"axes": ax, "keepdims": keepdims},
                _reduced_shape(a.shape, ax, keepdims))


def reduce_mean(a: Node, axes=None, keepdims: bool = False) -> Node:
    ax = _norm_axes(a, axes)
    return Node("mean", (a,), {"axes": ax, "keepdims": keepdims},
                _reduced_shape(a.shape, ax, keepdims))


_op("sum")(lambda p, a: np.sum(a, axis=p["axes"], keepdims=p["keepdims"]))
_op("mean")(lambda p, a: np.mean(a, axis=p["axes"], keepdims=p["keepdims"]))


def _expand_reduced(g, in_shape, axes, keepdims):
    if not keepdims:
        g = g.reshape(tuple(1 if i in axes else n for i, n in enumerate(in_shape)))
    return np.broadcast_to(g, in_shape)


@_vjp("sum")
def _(p, g, y, a):
    return (_expand_reduced(g, a.shape, p["axes"], p["keepdims"]).copy(),)


@_vjp("mean")
def _(p, g, y, a):
    count = 1
    for ax in p["axes"]:
        count *= a.shape[ax]
    return (_expand_reduced(g, a.shape, p["axes"], p["keepdims"]) / count,)


def softmax(a: Node, axes) -> Node:
    """Numerically stable softmax over the given axes."""
    ax = _norm_axes(a, axes)
    return Node("softmax", (a,), {"axes": ax}, a.shape)


@_op("softmax")
def _(p, a):
    m = np.max(a, axis=p["axes"], keepdims=True)
    e = np.exp(a - m)
    return e / np.sum(e, axis=p["axes"], keepdims=True)


@_vjp("softmax")
def _(p, g, y, a):
    inner = np.sum(g * y, axis=p["axes"], keepdims=True)
    return ((g - inner) * y,)


# -- linear algebra ------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return Node("matmul", (a, b), {}, (a.shape[0], b.shape[1]))


_op("matmul")(lambda p, a, b: a @ b)
_vjp("matmul")(lambda p, g, y, a, b: (g @ b.T, a.T @ g))


def linear(x: Node, w: Node, b: Node | None = None) -> Node:
    """x @ w + b with x of shape (N, in) and w of shape (in, out)."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


# -- convolution ----------------------------------------------------------------

def conv2d(x: Node, w: Node, pad: int = 0) -> Node:
    """2-D convolution, stride 1, zero padding; x (C,H,W), w (O,C,kh,kw)."""
    if len(x.shape) != 3 or len(w.shape) != 4:
        raise ShapeError(f"conv2d: x {x.shape}, w {w.shape}")
    c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input channels {c} != weight channels {ci}")
    oh, ow = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for {h}x{wd} pad {pad}")
    return Node("conv2d", (x, w), {"pad": int(pad)}, (o, oh, ow))


def _im2col(x: np.ndarray, kh: int, kw: int, pad: int):
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (C, OH, OW, kh, kw)
    oh, ow = win.shape[1], win.shape[2]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, c * kh * kw)
    return cols, oh, ow


@_op("conv2d")
def _(p, x, w):
    o, c, kh, kw = w.shape
    cols, oh, ow = _im2col(x, kh, kw, p["pad"])
    out = cols @ w.reshape(o, -1).T
    return out.T.reshape(o, oh, ow)


@_vjp("conv2d")
def _(p, g, y, x, w):
    o, c, kh, kw = w.shape
    pad = p["pad"]
    _, oh, ow = y.shape
    gmat = g.reshape(o, oh * ow).T                      # (OH*OW, O)
    cols, _, _ = _im2col(x, kh, kw, pad)
    dw = (gmat.T @ cols).reshape(o, c, kh, kw)
    dcols = gmat @ w.reshape(o, -1)                      # (OH*OW, C*kh*kw)
    dcols = dcols.reshape(oh, ow, c, kh, kw)
    ch, h, wd = x.shape
    dxp = np.zeros((ch, h + 2 * pad, wd + 2 * pad))
    for di in range(kh):
        for dj in range(kw):
            dxp[:, di:di + oh, dj:dj + ow] += dcols[:, :, :, di, dj].transpose(2, 0, 1)
    dx = dxp[:, pad:pad + h, pad:pad + wd] if pad else dxp
    return dx, dw


def modulated_conv2d(x: Node, w: Node, style: Node, pad: int = 0,
                     demodulate: bool = True, eps: float = 1e-8) -> Node:
    """Convolution with per-input-channel weight modulation by a style vector.

    Weights are scaled channel-wise by ``style`` and, when ``demodulate`` is
    set, each output channel is rescaled by the reciprocal root of its summed
    squared scaled weights. Composed from primitives, so gradients flow to
    x, w and style.
    """
    if len(style.shape) != 1 or style.shape[0] != w.shape[1]:
        raise ShapeError(f"modulated_conv2d: style {style.shape} vs weight {w.shape}")
    scaled = mul(w, reshape(style, (1, style.shape[0], 1, 1)))
    if demodulate:
        sq = reduce_sum(mul(scaled, scaled), axes=(1, 2, 3))
        coef = pow_scalar(add(sq, const(eps)), -0.5)
        scaled = mul(scaled, reshape(coef, (w.shape[0], 1, 1, 1)))
    return conv2d(x, scaled, pad=pad)


# -- pooling / resampling ---------------------------------------------------------

def avgpool_2x(a: Node) -> Node:
    """2x2 average pooling over the last two axes (extents must be even)."""
    h, w = a.shape[-2], a.shape[-1]
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool_2x: odd extents in {a.shape}")
    return Node("avgpool_2x", (a,), {}, a.shape[:-2] + (h // 2, w // 2))


@_op("avgpool_2x")
def _(p, a):
    h, w = a.shape[-2], a.shape[-1]
    r = a.reshape(a.shape[:-2] + (h // 2, 2, w // 2, 2))
    return r.mean(axis=(-3, -1))


@_vjp("avgpool_2x")
def _(p, g, y, a):
    return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) / 4.0,)


def _linear_coeffs(n_in: int, n_out: int):
    """Half-pixel-center source positions with border clamping."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(pos)
    frac = pos - base
    lo = np.clip(base, 0, n_in - 1).astype(np.intp)
    hi = np.clip(base + 1, 0, n_in - 1).astype(np.intp)
    return lo, hi, frac


def bilinear_resize_array(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of the last two axes of a plain array."""
    h, w = a.shape[-2], a.shape[-1]
    if out_h == h and out_w == w:
        return a.copy()
    ylo, yhi, fy = _linear_coeffs(h, out_h)
    xlo, xhi, fx = _linear_coeffs(w, out_w)
    fy = fy.reshape(-1, 1)
    fx = fx.reshape(1, -1)
    tl = a[..., ylo[:, None], xlo[None, :]]
    tr = a[..., ylo[:, None], xhi[None, :]]
    bl = a[..., yhi[:, None], xlo[None, :]]
    br = a[..., yhi[:, None], xhi[None, :]]
    top = tl * (1 - fx) + tr * fx
    bot = bl * (1 - fx) + br * fx
    return top * (1 - fy) + bot * fy


def resize_bilinear(a: Node, out_h: int, out_w: int) -> Node:
    """Differentiable bilinear resize of the last two axes."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize_bilinear: target {out_h}x{out_w}")
    if len(a.shape) < 2:
        raise ShapeError(f"resize_bilinear: rank-{len(a.shape)} input")
    return Node("resize_bilinear", (a,), {"out": (int(out_h), int(out_w))},
                a.shape[:-2] + (int(out_h), int(out_w)))


def upsample_2x(a: Node) -> Node:
    return resize_bilinear(a, 2 * a.shape[-2], 2 * a.shape[-1])


@_op("resize_bilinear")
def _(p, a):
    return bilinear_resize_array(a, *p["out"])


@_vjp("resize_bilinear")
def _(p, g, y, a):
    h, w = a.shape[-2], a.shape[-1]
    out_h, out_w = p["out"]
    if (out_h, out_w) == (h, w):
        return (g.copy(),)
    ylo, yhi, fy = _linear_coeffs(h, out_h)
    xlo, xhi, fx = _linear_coeffs(w, out_w)
    lead = a.shape[:-2]
    g2 = g.reshape(-1, out_h, out_w)
    da = np.zeros((g2.shape[0], h, w))
    bidx = np.arange(g2.shape[0])[:, None, None]
    wy = fy.reshape(1, -1, 1)
    wx = fx.reshape(1, 1, -1)
    for yi, wyv in ((ylo, 1 - wy), (yhi, wy)):
        for xi, wxv in ((xlo, 1 - wx), (xhi, wx)):
            np.add.at(da, (bidx, yi[None, :, None], xi[None, None, :]), g2 * wyv * wxv)
    return (da.reshape(lead + (h, w)),)


# -- composite norms --------------------------------------------------------------

def l1_norm(a: Node) -> Node:
    return reduce_sum(absval(a))


def l2_norm(a: Node) -> Node:
    return sqrt(reduce_sum(mul(a, a)))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def topo_order(outputs: Iterable[Node]) -> list[Node]:
    """Inputs-before-users ordering of every node reachable from outputs."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(n, False) for n in outputs]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for inp in node.inputs:
            if inp.id not in seen:
                stack.append((inp, False))
    return order


def _forward(order: list[Node], env: Mapping[Node, np.ndarray],
             check_finite: bool) -> dict[int, np.ndarray]:
    values: dict[int, np.ndarray] = {}
    for node in order:
        if node.op == "leaf":
            try:
                v = _asarray(env[node])
            except KeyError:
                raise TensorError(f"unbound leaf {node!r}") from None
            if v.shape != node.shape:
                raise ShapeError(f"leaf {node!r} bound to shape {v.shape}")
        elif node.op == "const":
            v = node.params["value"]
        else:
            args = [values[i.id] for i in node.inputs]
            with np.errstate(all="ignore"):  # non-finite check reports below
                v = _FWD[node.op](node.params, *args)
        if check_finite and not np.all(np.isfinite(v)):
            raise NonFiniteError(f"non-finite value at {node!r}")
        values[node.id] = v
    return values


def evaluate(outputs, env: Mapping[Node, np.ndarray],
             check_finite: bool = True):
    """Forward-evaluate the graph; returns one array or a list matching outputs.

    Deterministic: identical leaf bindings produce bit-identical results.
    """
    single = isinstance(outputs, Node)
    outs = [outputs] if single else list(outputs)
    values = _forward(topo_order(outs), env, check_finite)
    res = [values[n.id] for n in outs]
    return res[0] if single else res


def evaluate_with_gradients(outputs, loss: Node, wrt: Sequence[Node],
                            env: Mapping[Node, np.ndarray],
                            check_finite: bool = True):
    """One forward pass shared by the outputs and a reverse pass from ``loss``.

    Returns (output values list, {leaf: gradient}). ``loss`` must be scalar.
    """
    if loss.shape != ():
        raise ShapeError(f"gradient source must be scalar, got {loss.shape}")
    outs = list(outputs)
    order = topo_order(outs + [loss])
    values = _forward(order, env, check_finite)

    adjoint: dict[int, np.ndarray] = {loss.id: np.ones(())}
    for node in reversed(order):
        g = adjoint.pop(node.id, None)
        if g is None or node.op in ("leaf", "const"):
            if g is not None and node.op == "leaf":
                adjoint[node.id] = g
            continue
        args = [values[i.id] for i in node.inputs]
        with np.errstate(all="ignore"):
            in_grads = _VJP[node.op](node.params, g, values[node.id], *args)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or inp.op == "const":
                continue
            if check_finite and not np.all(np.isfinite(ig)):
                raise NonFiniteError(f"non-finite gradient into {inp!r}")
            acc = adjoint.get(inp.id)
            adjoint[inp.id] = ig if acc is None else acc + ig

    grads = {}
    for leaf_node in wrt:
        if leaf_node.op != "leaf":
            raise TensorError(f"gradients requested for non-leaf {leaf_node!r}")
        grads[leaf_node] = adjoint.get(leaf_node.id, np.zeros(leaf_node.shape))
    return [values[n.id] for n in outs], grads


def gradients(loss: Node, wrt: Sequence[Node], env: Mapping[Node, np.ndarray],
              check_finite: bool = True) -> dict[Node, np.ndarray]:
    """Reverse-mode d(loss)/d(leaf) for every leaf in ``wrt``."""
    _, grads = evaluate_with_gradients([], loss, wrt, env, check_finite)
    return grads


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheck:
    leaf: Node
    max_rel_err: float
    passed: bool


def finite_diff_check(loss: Node, env: Mapping[Node, np.ndarray],
                      wrt: Sequence[Node] | None = None,
                      epsilon: float = 1e-5,
                      tolerance: float = 1e-4) -> dict[Node, GradCheck]:
    """Compare analytic gradients against central finite differences.

    The numeric side uses only forward evaluation, keeping it independent of
    the VJP implementations it is checking. Per leaf, the relative error is
    the max absolute deviation scaled by the larger gradient magnitude, with
    a 1e-6 floor so near-zero gradients are judged on absolute error rather
    than finite-difference cancellation noise. Reports failures instead of
    raising.
    """
    if epsilon <= 0:
        raise TensorError("epsilon must be positive")
    if wrt is None:
        wrt = [n for n in topo_order([loss]) if n.op == "leaf"]
    analytic = gradients(loss, wrt, env)
    base = {k: _asarray(v) for k, v in env.items()}
    report = {}
    for node in wrt:
        x = base[node].copy()
        fd = np.zeros_like(x)
        flat = x.reshape(-1)
        fd_flat = fd.reshape(-1)
        probe = dict(base)
        probe[node] = x
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = float(evaluate(loss, probe, check_finite=False))
            flat[i] = orig - epsilon
            lo = float(evaluate(loss, probe, check_finite=False))
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * epsilon)
        a = analytic[node]
        scale = max(float(np.max(np.abs(a), initial=0.0)),
                    float(np.max(np.abs(fd), initial=0.0)), 1e-6)
        err = float(np.max(np.abs(a - fd), initial=0.0)) / scale
        report[node] = GradCheck(node, err, err <= tolerance)
    return report
