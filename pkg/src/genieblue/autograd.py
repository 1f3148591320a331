"""Dense float64 tensor kernels with a reverse-mode gradient tape.

Everything downstream (blocks, adapters, training) is built from the kernels
in this module. All data is contiguous row-major float64; kernels are pure
functions of their inputs, so identical inputs give bit-identical outputs.

Gradients are recorded on an explicit tape (a Wengert list): while a
``GradTape`` is active, every kernel whose inputs are tracked appends one
node holding the saved values its backward pass needs. ``backward`` replays
the list in reverse, which visits each node exactly once in reverse
topological order because recording order is execution order.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeMismatch",
    "NonFiniteError",
    "backward",
    "add",
    "sub",
    "mul",
    "matmul",
    "linear",
    "routed_linear",
    "gelu",
    "softmax",
    "rms_norm",
    "embed",
    "concat_seq",
    "attention",
    "masked_nll",
    "sum_all",
    "mean_all",
]


class ShapeMismatch(ValueError):
    """Operand shapes do not conform for the requested kernel."""


class NonFiniteError(FloatingPointError):
    """A non-finite value appeared where the contract requires finite data."""


class Tensor:
    """A shape plus contiguous row-major float64 data.

    ``requires_grad`` marks leaves (parameters) whose gradients ``backward``
    should return; intermediates get the flag set automatically while a tape
    is recording.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:  # 0-d arrays are already contiguous
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

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
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "out", "inputs", "vjp")

    def __init__(self, op, out, inputs, vjp):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_TAPE_STACK: list["GradTape"] = []


class GradTape:
    """Records kernel applications in execution order for reverse replay."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "GradTape exited out of order"

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _maybe_record(op: str, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(op, out, inputs, vjp))
    return out


def backward(tape: GradTape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) for every tracked leaf on the tape.

    Returns a dict keyed by the leaf Tensor objects themselves. Raises if the
    loss is not a scalar or if a non-finite gradient shows up mid-replay (the
    offending node's op name is included).
    """
    if loss.shape != ():
        raise ShapeMismatch(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[Tensor, np.ndarray] = {loss: np.ones((), dtype=np.float64)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out, None)
        if g is None:
            continue  # output never contributed to the loss
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient flowing into node '{node.op}'")
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            acc = grads.get(inp)
            grads[inp] = gi if acc is None else acc + gi
    return {t: g for t, g in grads.items() if t.requires_grad}


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g back down to `shape` after a broadcasting forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / broadcasting kernels
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeMismatch(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _maybe_record("add", out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError:
        raise ShapeMismatch(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _maybe_record("sub", out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeMismatch(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g * bd, a.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, b.shape) if b.requires_grad else None,
        )

    return _maybe_record("mul", out, (a, b), vjp)


# ---------------------------------------------------------------------------
# matrix products
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """General matrix product ``a @ b`` for operands with ndim >= 2."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul: operands must have ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ bd.swapaxes(-1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return _maybe_record("matmul", out, (a, b), vjp)


def linear(x, w) -> Tensor:
    """``x @ w.T`` for x (..., k) and a weight stored (out, k)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[-1]:
        raise ShapeMismatch(f"linear: x {x.shape} incompatible with weight {w.shape}")
    out = Tensor(x.data @ w.data.T)
    xd, wd = x.data, w.data

    def vjp(g):
        gx = gw = None
        if x.requires_grad:
            gx = g @ wd
        if w.requires_grad:
            k = xd.shape[-1]
            n = wd.shape[0]
            gw = g.reshape(-1, n).T @ xd.reshape(-1, k)
        return gx, gw

    return _maybe_record("linear", out, (x, w), vjp)


def routed_lora(x, down, up, route_mask: np.ndarray, scale: float = 1.0) -> Tensor:
    """Low-rank delta scale * (x @ down.T) @ up.T applied at masked rows only.

    Unmasked rows of the output are exactly zero without ever touching the
    adapter factors, so a text position can never observe adapter state.
    """
    x, down, up = _as_tensor(x), _as_tensor(down), _as_tensor(up)
    if x.ndim != 3 or down.ndim != 2 or up.ndim != 2 or x.shape[-1] != down.shape[-1]:
        raise ShapeMismatch(f"routed_lora: x {x.shape}, down {down.shape}, up {up.shape}")
    if up.shape[-1] != down.shape[0]:
        raise ShapeMismatch(f"routed_lora: rank mismatch, down {down.shape} vs up {up.shape}")
    mask = np.asarray(route_mask, dtype=bool)
    if mask.shape != x.shape[:2]:
        raise ShapeMismatch(f"routed_lora: mask {mask.shape} vs x {x.shape}")
    y = np.zeros(x.shape[:2] + (up.shape[0],))
    if mask.any():
        y[mask] = scale * ((x.data[mask] @ down.data.T) @ up.data.T)
    out = Tensor(y)
    xd, dd, ud = x.data, down.data, up.data

    def vjp(g):
        gx = gdown = gup = None
        sel = mask
        any_sel = sel.any()
        if x.requires_grad:
            gx = np.zeros_like(xd)
            if any_sel:
                gx[sel] = scale * ((g[sel] @ ud) @ dd)
        if down.requires_grad:
            gdown = (
                scale * ((g[sel] @ ud).T @ xd[sel]) if any_sel else np.zeros_like(dd)
            )
        if up.requires_grad:
            gup = (
                scale * (g[sel].T @ (xd[sel] @ dd.T)) if any_sel else np.zeros_like(ud)
            )
        return gx, gdown, gup

    return _maybe_record("routed_lora", out, (x, down, up), vjp)


def routed_linear(x, w_base, w_expert, route_mask: np.ndarray) -> Tensor:
    """Per-position projection: masked positions use the expert weight.

    ``x`` is (B, T, k); ``route_mask`` is a constant (B, T) bool array. Rows
    where the mask is False go through ``w_base`` exactly as a plain
    ``linear`` would compute them; the expert weight is only ever applied to
    (and only ever receives gradient from) masked rows.
    """
    x, wb, we = _as_tensor(x), _as_tensor(w_base), _as_tensor(w_expert)
    if wb.shape != we.shape:
        raise ShapeMismatch(f"routed_linear: base {wb.shape} vs expert {we.shape}")
    if x.ndim != 3 or x.shape[-1] != wb.shape[-1]:
        raise ShapeMismatch(f"routed_linear: x {x.shape} incompatible with weight {wb.shape}")
    if route_mask.shape != x.shape[:2]:
        raise ShapeMismatch(f"routed_linear: mask {route_mask.shape} vs x {x.shape}")
    mask = np.asarray(route_mask, dtype=bool)
    y = x.data @ wb.data.T
    if mask.any():
        y[mask] = x.data[mask] @ we.data.T
    out = Tensor(y)
    xd, wbd, wed = x.data, wb.data, we.data

    def vjp(g):
        gx = gwb = gwe = None
        sel = mask
        inv = ~mask
        if x.requires_grad:
            gx = g @ wbd
            if sel.any():
                gx[sel] = g[sel] @ wed
        if wb.requires_grad:
            gwb = g[inv].T @ xd[inv]
        if we.requires_grad:
            gwe = g[sel].T @ xd[sel] if sel.any() else np.zeros_like(wed)
        return gx, gwb, gwe

    return _maybe_record("routed_linear", out, (x, wb, we), vjp)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh form: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    x = _as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * xd * (1.0 + t))

    def vjp(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * xd * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * d,)

    return _maybe_record("gelu", out, (x,), vjp)


def softmax(x) -> Tensor:
    """Numerically stable softmax over the last axis."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def vjp(g):
        return (p * (g - (p * g).sum(axis=-1, keepdims=True)),)

    return _maybe_record("softmax", out, (x,), vjp)


_RMS_EPS = 1e-12


def rms_norm(x, gain=None) -> Tensor:
    """Scale each last-axis row to unit root-mean-square, then apply gain.

    The epsilon only guards all-zero rows; on ordinary data the output RMS
    is 1 to within float64 rounding.
    """
    x = _as_tensor(x)
    xd = x.data
    n = xd.shape[-1]
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + _RMS_EPS)
    y = xd * inv
    if gain is None:
        out = Tensor(y)

        def vjp(g):
            gx = inv * g - xd * (inv**3 / n) * (xd * g).sum(axis=-1, keepdims=True)
            return (gx,)

        return _maybe_record("rms_norm", out, (x,), vjp)

    gain = _as_tensor(gain)
    if gain.shape != (n,):
        raise ShapeMismatch(f"rms_norm: gain {gain.shape} vs feature width {n}")
    out = Tensor(y * gain.data)
    gd = gain.data

    def vjp(g):
        gx = ggain = None
        if x.requires_grad:
            h = g * gd
            gx = inv * h - xd * (inv**3 / n) * (xd * h).sum(axis=-1, keepdims=True)
        if gain.requires_grad:
            ggain = (y * g).reshape(-1, n).sum(axis=0)
        return gx, ggain

    return _maybe_record("rms_norm", out, (x, gain), vjp)


# ---------------------------------------------------------------------------
# embedding lookup and sequence concat
# ---------------------------------------------------------------------------


def embed(table, ids: np.ndarray) -> Tensor:
    """Gather rows of an embedding table; ids are a constant int array."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embed: id out of range for table with {table.shape[0]} rows")
    out = Tensor(table.data[ids])

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _maybe_record("embed", out, (table,), vjp)


def concat_seq(a, b) -> Tensor:
    """Concatenate two (B, T, d) tensors along the sequence axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise ShapeMismatch(f"concat_seq: shapes {a.shape} and {b.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    ta = a.shape[1]

    def vjp(g):
        return (
            g[:, :ta] if a.requires_grad else None,
            g[:, ta:] if b.requires_grad else None,
        )

    return _maybe_record("concat_seq", out, (a, b), vjp)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

_CAUSAL_MASKS: dict[int, np.ndarray] = {}


def _causal_mask(t: int) -> np.ndarray:
    m = _CAUSAL_MASKS.get(t)
    if m is None:
        m = np.triu(np.full((t, t), -np.inf), k=1)
        _CAUSAL_MASKS[t] = m
    return m


def attention(q, k, v, n_heads: int, causal: bool = True) -> Tensor:
    """Multi-head scaled-dot-product attention over (B, T, d) streams."""
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if not (q.shape == k.shape == v.shape) or q.ndim != 3:
        raise ShapeMismatch(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    bsz, t, d = q.shape
    if d % n_heads:
        raise ShapeMismatch(f"attention: width {d} not divisible by {n_heads} heads")
    hd = d // n_heads
    scale = 1.0 / math.sqrt(hd)

    def split(x):
        return x.reshape(bsz, t, n_heads, hd).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    s = np.matmul(qh, kh.swapaxes(-1, -2))
    s *= scale
    if causal:
        s += _causal_mask(t)
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    p = s
    o = np.matmul(p, vh)
    out = Tensor(o.transpose(0, 2, 1, 3).reshape(bsz, t, d))

    def vjp(g):
        gh = g.reshape(bsz, t, n_heads, hd).transpose(0, 2, 1, 3)
        gq = gk = gv = None
        if v.requires_grad:
            gv = np.matmul(p.swapaxes(-1, -2), gh).transpose(0, 2, 1, 3).reshape(bsz, t, d)
        if q.requires_grad or k.requires_grad:
            gp = np.matmul(gh, vh.swapaxes(-1, -2))
            gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
            gs *= scale
            if q.requires_grad:
                gq = np.matmul(gs, kh).transpose(0, 2, 1, 3).reshape(bsz, t, d)
            if k.requires_grad:
                gk = np.matmul(gs.swapaxes(-1, -2), qh).transpose(0, 2, 1, 3).reshape(bsz, t, d)
        return gq, gk, gv

    return _maybe_record("attention", out, (q, k, v), vjp)


# ---------------------------------------------------------------------------
# loss kernels and reductions
# ---------------------------------------------------------------------------


def masked_nll(logits, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted negative log-likelihood: sum_p weights[p] * nll[p].

    ``targets`` and ``weights`` are constants shaped like logits minus the
    vocabulary axis. The caller encodes its averaging convention in the
    weights (zero at ignored positions).
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    weights = np.asarray(weights, dtype=np.float64)
    if logits.shape[:-1] != targets.shape or targets.shape != weights.shape:
        raise ShapeMismatch(
            f"masked_nll: logits {logits.shape}, targets {targets.shape}, weights {weights.shape}"
        )
    ld = logits.data
    z = ld - ld.max(axis=-1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=-1, keepdims=True)
    p = e / denom
    logp = z - np.log(denom)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out = Tensor(-(weights * picked).sum())

    def vjp(g):
        gl = p * weights[..., None]
        np.subtract.at(
            gl.reshape(-1, gl.shape[-1]),
            (np.arange(targets.size), targets.reshape(-1)),
            weights.reshape(-1),
        )
        gl *= g
        return (gl,)

    return _maybe_record("masked_nll", out, (logits,), vjp)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.sum())
    shape = x.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _maybe_record("sum_all", out, (x,), vjp)


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.mean())
    shape, n = x.shape, x.size

    def vjp(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _maybe_record("mean_all", out, (x,), vjp)
