"""Small dense-tensor library with tape-based reverse-mode autodiff.

Only the primitives the detector and its losses need are provided.  Every
primitive computes its output with numpy and, when a :class:`Tape` is active
and an input requires gradients, records a closure mapping the output
gradient to input gradients.  Without an active tape nothing is recorded, so
inference runs the same functions at plain numpy cost.

Values are float32 unless a tensor is explicitly built as float64 (used by
finite-difference oracles); numpy's dtype promotion carries that through.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """An operation produced or would produce NaN/Inf."""


class ContractError(RuntimeError):
    """A caller violated an operation's preconditions."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.require(np.asarray(data, dtype=dtype or DTYPE), requirements="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(self, other)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(self, other)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)


def _not_scalar(t: Tensor):
    raise ContractError(f"tensor of shape {t.shape} is not a scalar")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: str
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered record of executed primitives, replayed in reverse by ``backward``."""

    nodes: list[Node] = field(default_factory=list)

    def __post_init__(self):
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.out))

    def backward(self, loss: Tensor) -> list[Node]:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ContractError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        visited = []
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            visited.append(node)
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise DimensionError(f"{node.op}: gradient shape {pg.shape} != input shape {parent.shape}")
                if id(parent) in self._produced:
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else prev + pg
                else:
                    parent.grad = pg.astype(parent.data.dtype, copy=True) if parent.grad is None else parent.grad + pg
        return visited


def backward(loss: Tensor, tape: Tape) -> list[Node]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    return tape.backward(loss)


def _emit(op: str, data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    # a sum is non-finite whenever any term is; the full scan only runs to rule out overflow
    with np.errstate(over="ignore", invalid="ignore"):
        quick = np.isfinite(data.sum())
    if not quick and not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(Node(op, out, parents, bwd))
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only scalar broadcasting is supported
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("add", a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1 - s),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s
    return _emit("silu", out, (a,), lambda g: (g * (s + out * (1 - s)),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0, x).astype(x.dtype)
    return _emit("softplus", out, (a,), lambda g: (g * _sigmoid(x),))


def log(a: Tensor) -> Tensor:
    x = a.data
    if (x <= 0).any():
        raise NumericError("log of non-positive value")
    return _emit("log", np.log(x), (a,), lambda g: (g / x,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    x = a.data
    keep = x > floor
    return _emit("clamp_min", np.where(keep, x, x.dtype.type(floor)), (a,), lambda g: (g * keep,))


def power(a: Tensor, exponent: float) -> Tensor:
    """``a ** exponent`` for a constant exponent and non-negative ``a``."""
    x = a.data
    if exponent == 0:
        return _emit("power", np.ones_like(x), (a,), lambda g: (np.zeros_like(x),))
    out = x ** x.dtype.type(exponent)

    def bwd(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = exponent * x ** x.dtype.type(exponent - 1)
        return (g * np.where(x > 0, d, 0 if exponent < 1 else d),)

    return _emit("power", out, (a,), bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow
    return 0.5 + 0.5 * np.tanh(0.5 * x)


# --------------------------------------------------------------------------
# broadcasting along the last axis (bias / scale vectors only)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} vs {bias.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _emit("add_bias", x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=lead)))


def mul_bias(x: Tensor, scale: Tensor) -> Tensor:
    if scale.data.ndim != 1 or x.shape[-1] != scale.shape[0]:
        raise DimensionError(f"mul_bias: {x.shape} vs {scale.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _emit("mul_bias", x.data * scale.data, (x, scale),
                 lambda g: (g * scale.data, (g * x.data).sum(axis=lead)))


# --------------------------------------------------------------------------
# linear algebra, reductions, indexing


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]``; leading axes of ``a`` act as a batch."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _emit("matmul", out, (a, b), bwd)


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    return _emit("sum", np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
                 lambda g: (np.full_like(a.data, g),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _emit("mean", np.asarray(a.data.sum() / n, dtype=a.data.dtype), (a,),
                 lambda g: (np.full_like(a.data, g / n),))


def dot(a: Tensor, weights: np.ndarray) -> Tensor:
    """Sum of ``a * weights`` with a constant weight array of the same shape."""
    w = np.asarray(weights, dtype=a.data.dtype)
    if w.shape != a.shape:
        raise DimensionError(f"dot: {a.shape} vs {w.shape}")
    return _emit("dot", np.asarray((a.data * w).sum(), dtype=a.data.dtype), (a,),
                 lambda g: (g * w,))


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[..., start:stop].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _emit("slice_last", out, (a,), bwd)


def gather_last(a: Tensor, index: np.ndarray) -> Tensor:
    """``out[...] = a[..., index[...]]``; ``index`` has ``a``'s leading shape."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise DimensionError(f"gather_last: index {idx.shape} vs {a.shape}")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _emit("gather_last", out, (a,), bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


# --------------------------------------------------------------------------
# normalisation and probabilities


def softmax(a: Tensor) -> Tensor:
    x = a.data
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    s = z / z.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", s, (a,), bwd)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: {x.shape} with weight {weight.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * weight.data + bias.data
    lead = tuple(range(x.data.ndim - 1))

    def bwd(g):
        gw = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gx_hat = g * weight.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gw, gb

    return _emit("layer_norm", out.astype(x.data.dtype, copy=False), (x, weight, bias), bwd)


# --------------------------------------------------------------------------
# sequence primitives


def causal_depthwise_conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                            prefix: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Per-channel causal convolution over the time axis (second to last).

    ``out[t, d] = sum_k kernel[k, d] * x[t - (K-1) + k, d]`` where indices
    before 0 read from ``prefix`` (the previous K-1 inputs) or zero.  Returns
    the output and the last K-1 inputs, which become the next call's prefix.
    """
    K, D = kernel.shape
    if x.shape[-1] != D or x.data.ndim < 2:
        raise DimensionError(f"conv1d: input {x.shape} vs kernel {kernel.shape}")
    if K < 1:
        raise DimensionError("conv1d: kernel length must be >= 1")
    T = x.shape[-2]
    lead = x.shape[:-2]
    if prefix is None:
        prefix = np.zeros(lead + (K - 1, D), dtype=x.data.dtype)
    elif prefix.shape != lead + (K - 1, D):
        raise DimensionError(f"conv1d: prefix {prefix.shape} vs expected {lead + (K - 1, D)}")
    xp = np.concatenate([prefix.astype(x.data.dtype, copy=False), x.data], axis=-2)
    out = np.zeros_like(x.data)
    for k in range(K):
        out += kernel.data[k] * xp[..., k:k + T, :]
    parents: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        out += bias.data
        parents = parents + (bias,)
    batch_axes = tuple(range(x.data.ndim - 1))

    def bwd(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kernel.data)
        for k in range(K):
            gxp[..., k:k + T, :] += kernel.data[k] * g
            gk[k] = (g * xp[..., k:k + T, :]).sum(axis=batch_axes)
        grads = [gxp[..., K - 1:, :], gk]
        if bias is not None:
            grads.append(g.sum(axis=batch_axes))
        return grads

    tail = xp[..., xp.shape[-2] - (K - 1):, :].copy()
    return _emit("causal_conv1d", out, parents, bwd), tail


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, skip: Tensor,
                   h0: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Input-dependent diagonal linear recurrence over the time axis.

    Shapes: ``u, delta: [..., T, E]``, ``A: [E, N]``, ``B, C: [..., T, N]``,
    ``skip: [E]``.  With zero-order hold on ``A`` and Euler on ``B``::

        h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * u_t
        y_t = h_t @ C_t + skip * u_t

    Returns ``y`` and the final state ``h_T`` (shape ``[..., E, N]``).
    ``h0`` is treated as a constant.
    """
    T, E = u.shape[-2:]
    N = A.shape[1]
    lead = u.shape[:-2]
    if delta.shape != u.shape or A.shape != (E, N) or B.shape != lead + (T, N) \
            or C.shape != lead + (T, N) or skip.shape != (E,):
        raise DimensionError("selective_scan: inconsistent operand shapes "
                             f"u{u.shape} delta{delta.shape} A{A.shape} B{B.shape} C{C.shape}")
    dt = u.data.dtype
    if h0 is None:
        h0 = np.zeros(lead + (E, N), dtype=dt)
    elif h0.shape != lead + (E, N):
        raise DimensionError(f"selective_scan: state {h0.shape} vs expected {lead + (E, N)}")
    h0 = h0.astype(dt, copy=False)
    # time-major copies so each step touches contiguous memory
    u_t = np.ascontiguousarray(np.moveaxis(u.data, -2, 0))        # [T, ..., E]
    d_t = np.ascontiguousarray(np.moveaxis(delta.data, -2, 0))
    B_t = np.ascontiguousarray(np.moveaxis(B.data, -2, 0))        # [T, ..., N]
    C_t = np.ascontiguousarray(np.moveaxis(C.data, -2, 0))
    du = d_t * u_t
    decay = np.exp(d_t[..., None] * A.data)                       # [T, ..., E, N]
    hs = du[..., None] * B_t[..., None, :]                        # drive term, overwritten by states
    h = h0
    for t in range(T):
        hs[t] += decay[t] * h
        h = hs[t]
    y_t = (hs @ C_t[..., None])[..., 0] + u_t * skip.data
    y = np.ascontiguousarray(np.moveaxis(y_t, 0, -2))

    def bwd(g):
        g_t = np.ascontiguousarray(np.moveaxis(g, -2, 0))         # [T, ..., E]
        gh = g_t[..., None] * C_t[..., None, :]
        for t in range(T - 2, -1, -1):
            gh[t] += gh[t + 1] * decay[t + 1]
        gdec = gh * decay                                         # grad wrt (delta*A), before h_prev
        gdec[0] *= h0
        gdec[1:] *= hs[:-1]
        ghB = (gh @ B_t[..., None])[..., 0]                       # [T, ..., E]
        gdelta = np.einsum("...en,en->...e", gdec, A.data)
        gdelta += ghB * u_t
        gA = (gdec * d_t[..., None]).reshape(-1, E, N).sum(axis=0)
        gu = ghB * d_t + g_t * skip.data
        gB = (du[..., None, :] @ gh)[..., 0, :]
        gC = (g_t[..., None, :] @ hs)[..., 0, :]
        gskip = (g_t * u_t).reshape(-1, E).sum(axis=0)
        back = lambda a: np.ascontiguousarray(np.moveaxis(a, 0, -2))
        return back(gu), back(gdelta), gA, back(gB), back(gC), gskip

    out = _emit("selective_scan", y, (u, delta, A, B, C, skip), bwd)
    return out, hs[-1].copy()


# --------------------------------------------------------------------------
# finite-difference audit


@dataclass
class GradCheckReport:
    """Per-parameter comparison of autodiff and central differences.

    ``errors`` holds, per parameter, max |autodiff - numeric| over the checked
    entries divided by the largest gradient magnitude of that parameter
    (a norm-wise relative error, robust to entries whose gradient is ~0).
    """

    errors: dict[str, float]
    checked: dict[str, int]
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def to_dict(self) -> dict:
        return {"tol": self.tol, "passed": self.passed, "max_error": self.max_error,
                "errors": self.errors, "checked": self.checked}


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-3,
               tol: float = 1e-2, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare tape gradients of ``f()`` with central finite differences.

    ``f`` must rebuild its graph from the current ``params`` each call.  With
    ``max_entries`` set, each tensor is probed at its largest-gradient entries
    plus a random sample instead of exhaustively.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    errors, checked = {}, {}
    for name, p in params.items():
        auto = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = _probe_indices(auto.reshape(-1), max_entries, rng)
        numeric = np.empty(len(idx), dtype=np.float64)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f().data)
            flat[i] = orig - h
            down = float(f().data)
            flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
        a = auto.reshape(-1)[idx].astype(np.float64)
        scale = max(float(np.abs(auto).max()), float(np.abs(numeric).max()), 1e-12)
        errors[name] = float(np.abs(a - numeric).max() / scale) if len(idx) else 0.0
        checked[name] = len(idx)
    for p in params.values():
        p.grad = None
    return GradCheckReport(errors, checked, tol)


def _probe_indices(g: np.ndarray, max_entries: int | None, rng: np.random.Generator) -> np.ndarray:
    n = g.size
    if max_entries is None or n <= max_entries:
        return np.arange(n)
    top = np.argsort(-np.abs(g), kind="stable")[: max_entries // 2]
    rest = np.setdiff1d(np.arange(n), top)
    extra = rng.choice(rest, size=max_entries - len(top), replace=False)
    return np.sort(np.concatenate([top, extra]))


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
