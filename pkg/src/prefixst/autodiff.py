"""Dense tensors with reverse-mode automatic differentiation.

Small tape-based engine over numpy arrays: enough primitives to express a
decoder-only transformer, prefix networks, and the training losses. Ops
record onto an explicit :class:`Tape` when one is active; with no active
tape they are plain numpy computations (the inference fast path).

Training runs in float32; gradient checking switches to float64 via
:func:`set_default_dtype` / :func:`precision`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "backward",
    "grad_check",
    "zero_grads",
    "op_catalog",
    "set_default_dtype",
    "get_default_dtype",
    "precision",
    "no_grad",
]

_DEFAULT_DTYPE = np.float32
_TAPE: "Tape | None" = None

LAYERNORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; message carries both shapes."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float width (64-bit for grad checks)."""
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """A dense float array, optionally carrying a gradient of identical shape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._is_leaf = True

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

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar (scalars fold into the op, no extra graph nodes)
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Topologically ordered record of operations, appended during forward.

    Records are inherently in topological order: an op can only consume
    tensors that already exist when it runs.
    """

    __slots__ = ("records",)

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        global _TAPE
        if _TAPE is not None:
            raise RuntimeError("a Tape is already active; nesting is not supported")
        _TAPE = self
        return self

    def __exit__(self, *exc):
        global _TAPE
        _TAPE = None
        return False

    def __len__(self) -> int:
        return len(self.records)


@contextlib.contextmanager
def no_grad():
    """Suspend recording on the active tape (detached generation, eval)."""
    global _TAPE
    prev, _TAPE = _TAPE, None
    try:
        yield
    finally:
        _TAPE = prev


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(out_data, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result; record it when a tape is active and grads can flow."""
    tape = _TAPE
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = track
    out.name = None
    out._is_leaf = not track
    if track:
        tape.records.append(_Record(out, inputs, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive catalog
# ---------------------------------------------------------------------------

_CATALOG: dict[str, Callable] = {}


def _primitive(fn):
    _CATALOG[fn.__name__] = fn
    return fn


def op_catalog() -> dict[str, Callable]:
    """The differentiable primitives, by name."""
    return dict(_CATALOG)


@_primitive
def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and not isinstance(a, Tensor):
        raise TypeError("add needs at least one Tensor operand")
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        c = float(b)
        return _emit(a.data + c, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_broadcast(a, b, "add")
    ash, bsh = a.shape, b.shape
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)),
    )


@_primitive
def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        c = float(b)
        return _emit(a.data - c, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        c = float(a)
        bsh = b.shape
        return _emit(c - b.data, (b,), lambda g: (-_unbroadcast(g, bsh),))
    _check_broadcast(a, b, "sub")
    ash, bsh = a.shape, b.shape
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, ash), -_unbroadcast(g, bsh)),
    )


@_primitive
def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        c = float(b)
        return _emit(a.data * c, (a,), lambda g: (g * c,))
    if not isinstance(a, Tensor):
        return mul(b, a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape
    return _emit(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh)),
    )


@_primitive
def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    if not isinstance(a, Tensor):
        c = float(a)
        bd = b.data
        bsh = b.shape
        out = c / bd
        return _emit(out, (b,), lambda g: (_unbroadcast(-g * out / bd, bsh),))
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape
    out = ad / bd
    return _emit(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ash), _unbroadcast(-g * out / bd, bsh)),
    )


@_primitive
def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


@_primitive
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ash), _unbroadcast(gb, bsh)

    return _emit(ad @ bd, (a, b), bwd)


@_primitive
def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


@_primitive
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


@_primitive
def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    # copy so downstream in-place consumers never alias the source
    out = np.broadcast_to(a.data, shape).copy()
    return _emit(out, (a,), lambda g: (_unbroadcast(g, old),))


@_primitive
def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/int/ellipsis) indexing with scatter-add backward."""
    ad = a.data
    out = ad[index]
    if not out.flags["C_CONTIGUOUS"]:
        out = np.ascontiguousarray(out)

    def bwd(g):
        ga = np.zeros_like(ad)
        ga[index] = g
        return (ga,)

    return _emit(out, (a,), bwd)


@_primitive
def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        slicer = [slice(None)] * g.ndim
        outs = []
        for i in range(len(parts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(np.ascontiguousarray(g[tuple(slicer)]))
        return tuple(outs)

    return _emit(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd)


@_primitive
def embedding(table: Tensor, ids) -> Tensor:
    """Row gather `table[ids]`; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding ids out of range for table of {table.shape[0]} rows")
    tshape = table.shape

    def bwd(g):
        gt = np.zeros(tshape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, tshape[-1]))
        return (gt,)

    return _emit(table.data[ids], (table,), bwd)


@_primitive
def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None, scale: float | None = None) -> Tensor:
    """Stable softmax, with optional fused pre-scale and additive mask.

    `scale` multiplies the logits and `mask` (a constant array, commonly
    0 / -1e9) is added before the max-subtracted exponentiation. Entries
    masked with -1e9 underflow to exactly 0 probability.
    """
    z = x.data
    if scale is not None:
        z = z * scale
    if mask is not None:
        if mask.dtype != z.dtype:
            mask = mask.astype(z.dtype)
        z = z + mask
    z = z - z.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    y = ez / ez.sum(axis=axis, keepdims=True)

    def bwd(g):
        gy = y * (g - (g * y).sum(axis=axis, keepdims=True))
        if scale is not None:
            gy = gy * scale
        return (gy,)

    return _emit(y, (x,), bwd)


@_primitive
def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalization over the last axis followed by the affine map."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    diff = xd - mu
    var = (diff * diff).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = diff * inv
    gd, bd = gain.data, bias.data
    n = xd.shape[-1]
    gsh, bsh = gain.shape, bias.shape

    def bwd(g):
        ggain = _unbroadcast(g * xhat, gsh)
        gbias = _unbroadcast(g, bsh)
        gxhat = g * gd
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggain, gbias

    return _emit(xhat * gd + bd, (x, gain, bias), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


@_primitive
def gelu(x: Tensor) -> Tensor:
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * (xd * xd * xd))
    t = np.tanh(inner)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * (xd * xd))
        dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        return (g * dx,)

    return _emit(0.5 * xd * (1.0 + t), (x,), bwd)


@_primitive
def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _emit(t, (x,), lambda g: (g * (1.0 - t * t),))


@_primitive
def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _emit(e, (x,), lambda g: (g * e,))


@_primitive
def log(x: Tensor) -> Tensor:
    xd = x.data
    return _emit(np.log(xd), (x,), lambda g: (g / xd,))


@_primitive
def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xsh = x.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xsh).copy(),)

    return _emit(x.data.sum(axis=axis, keepdims=keepdims), (x,), bwd)


@_primitive
def mean_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xsh = x.shape
    count = x.size if axis is None else np.prod([xsh[a] for a in np.atleast_1d(axis)])

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xsh) / count,)

    return _emit(x.data.mean(axis=axis, keepdims=keepdims), (x,), bwd)


@_primitive
def cross_entropy_logits(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted sum of -log softmax(logits)[target] over all positions.

    `targets` holds integer ids shaped like `logits` minus its last axis;
    `weights` (same shape as `targets`, default all-ones) both masks and
    normalizes: pass `mask / mask.sum()` for a masked mean.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(
            f"cross_entropy_logits: targets {targets.shape} vs logits {logits.shape}"
        )
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=-1, keepdims=True)
    logp = z - zmax - np.log(sez)
    flat_t = targets.reshape(-1)
    picked = logp.reshape(-1, z.shape[-1])[np.arange(flat_t.size), flat_t]
    picked = picked.reshape(targets.shape)
    w = np.ones_like(picked) if weights is None else np.asarray(weights, dtype=z.dtype)
    loss = -(picked * w).sum()

    def bwd(g):
        p = ez / sez
        gl = p.copy()
        flat = gl.reshape(-1, z.shape[-1])
        flat[np.arange(flat_t.size), flat_t] -= 1.0
        gl *= (w * g)[..., None]
        return (gl,)

    return _emit(np.asarray(loss, dtype=z.dtype), (logits,), bwd)


@_primitive
def attention_core(
    h: Tensor,
    wq: Tensor,
    k_full: Tensor,
    v_full: Tensor,
    wo: Tensor,
    mask: np.ndarray,
    num_heads: int,
) -> Tensor:
    """Fused multi-head attention: query projection, masked scaled softmax
    over the supplied key/value columns, context merge, output projection.

    `h` is (B,S,d) post-norm input; `k_full`/`v_full` are (B,K,d) and may
    include prefix columns ahead of the sentence keys; `mask` is an additive
    constant (B or 1, S, K). One tape record instead of a dozen.
    """
    B, S, d = h.shape
    K = k_full.shape[1]
    H = num_heads
    hd = d // H
    scale = 1.0 / np.sqrt(hd)

    q = h.data @ wq.data  # (B,S,d)
    q_h = np.ascontiguousarray(q.reshape(B, S, H, hd).transpose(0, 2, 1, 3))  # (B,H,S,hd)
    k_h = np.ascontiguousarray(k_full.data.reshape(B, K, H, hd).transpose(0, 2, 3, 1))  # (B,H,hd,K)
    v_h = np.ascontiguousarray(v_full.data.reshape(B, K, H, hd).transpose(0, 2, 1, 3))  # (B,H,K,hd)
    scores = (q_h @ k_h) * scale
    m = mask
    if m.dtype != scores.dtype:
        m = m.astype(scores.dtype)
    scores = scores + m[:, None, :, :]
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    probs = scores / scores.sum(axis=-1, keepdims=True)  # (B,H,S,K)
    ctx = probs @ v_h  # (B,H,S,hd)
    ctx_m = np.ascontiguousarray(ctx.transpose(0, 2, 1, 3)).reshape(B, S, d)
    out = ctx_m @ wo.data

    def bwd(g):
        g_ctx_m = g @ wo.data.T
        g_wo = ctx_m.reshape(-1, d).T @ g.reshape(-1, d)
        g_ctx = np.ascontiguousarray(g_ctx_m.reshape(B, S, H, hd).transpose(0, 2, 1, 3))
        g_probs = g_ctx @ np.ascontiguousarray(v_h.transpose(0, 1, 3, 2))
        g_v_h = np.ascontiguousarray(probs.transpose(0, 1, 3, 2)) @ g_ctx  # (B,H,K,hd)
        g_scores = probs * (g_probs - (g_probs * probs).sum(axis=-1, keepdims=True))
        g_scores *= scale
        g_q_h = g_scores @ np.ascontiguousarray(k_h.transpose(0, 1, 3, 2))  # (B,H,S,hd)
        g_k_h = np.ascontiguousarray(g_scores.transpose(0, 1, 3, 2)) @ q_h  # (B,H,K,hd)
        g_q = np.ascontiguousarray(g_q_h.transpose(0, 2, 1, 3)).reshape(B, S, d)
        g_h = g_q @ wq.data.T
        g_wq = h.data.reshape(-1, d).T @ g_q.reshape(-1, d)
        g_k_full = np.ascontiguousarray(g_k_h.transpose(0, 2, 1, 3)).reshape(B, K, d)
        g_v_full = np.ascontiguousarray(g_v_h.transpose(0, 2, 1, 3)).reshape(B, K, d)
        return g_h, g_wq, g_k_full, g_v_full, g_wo

    return _emit(out, (h, wq, k_full, v_full, wo), bwd)


@_primitive
def mlp_gelu(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Fused position-wise feed-forward: gelu(x @ w1) @ w2."""
    xd = x.data
    a = xd @ w1.data
    inner = _GELU_C * (a + 0.044715 * (a * a * a))
    t = np.tanh(inner)
    ga = 0.5 * a * (1.0 + t)
    out = ga @ w2.data
    d_in = xd.shape[-1]
    d_hidden = a.shape[-1]

    def bwd(g):
        g_ga = g @ w2.data.T
        g_w2 = ga.reshape(-1, d_hidden).T @ g.reshape(-1, g.shape[-1])
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * (a * a))
        g_a = g_ga * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner)
        g_x = g_a @ w1.data.T
        g_w1 = xd.reshape(-1, d_in).T @ g_a.reshape(-1, d_hidden)
        return g_x, g_w1, g_w2

    return _emit(out, (x, w1, w2), bwd)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/dp into `p.grad` for every reachable leaf with
    requires_grad; forward values and frozen tensors are never touched.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        out_id = id(rec.out)
        g = grads.pop(out_id, None)
        tensors.pop(out_id, None)
        if g is None:
            continue
        input_grads = rec.backward(g)
        for inp, ig in zip(rec.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
                tensors[key] = inp
    for key, g in grads.items():
        t = tensors[key]
        if not (t._is_leaf and t.requires_grad):
            continue
        if t.grad is None:
            t.grad = np.array(g, dtype=t.data.dtype, copy=True)
        else:
            t.grad = t.grad + g.astype(t.data.dtype, copy=False)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_coords_per_param: int = 8,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f(params)` must be a deterministic scalar; evaluate in 64-bit mode
    (install params under ``precision(np.float64)``). Coordinates are
    subsampled per parameter when tensors are large.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 params (got {p.data.dtype} for {p.name!r})")

    zero_grads(params)
    with Tape() as tape:
        loss = f(params)
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"grad_check: non-finite loss {float(loss.data)!r}")
    backward(tape, loss)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = float(f(params).data)
            flat[c] = orig - h
            fm = float(f(params).data)
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(
                    f"grad_check: non-finite f while perturbing {p.name or 'param'}[{c}]"
                )
            numeric = (fp - fm) / (2.0 * h)
            a = ga.reshape(-1)[c]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
