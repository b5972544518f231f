"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything is backed by numpy arrays. A Tensor produced by an op keeps
references to its parent Tensors and a closure that maps the output
gradient to parent gradients; backward() walks that implicit graph in
reverse topological order. Only leaf tensors (no parents) accumulate
into `.grad`; intermediate gradients live in a scratch dict and are
freed as soon as they have been consumed.

Two modes: unchecked (default) trusts the caller, checked validates
shapes and finiteness on every op. Toggle with set_checked().
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, ShapeError, UsageError

_checked = False


def set_checked(flag: bool) -> None:
    global _checked
    _checked = bool(flag)


def is_checked() -> bool:
    return _checked


def _validate(arr: np.ndarray, op: str) -> None:
    if _checked and not np.all(np.isfinite(arr)):
        raise DomainError(f"{op}: non-finite values in result")


class Tensor:
    """A float64 array plus the bookkeeping reverse-mode AD needs."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if _checked and not np.all(np.isfinite(arr)):
            raise DomainError("Tensor: non-finite input data")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the free functions do the work
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _result(data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    """Wrap an op output. Drops graph edges when no parent needs grad."""
    _validate(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _coerce(x):
    """Return (ndarray, tensor-or-None) for a Tensor or array-like operand."""
    if isinstance(x, Tensor):
        return x.data, x
    return np.asarray(x, dtype=np.float64), None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum-reduce a gradient down to the shape the operand actually had."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, fwd, bwd_a, bwd_b, op: str) -> Tensor:
    ad, at = _coerce(a)
    bd, bt = _coerce(b)
    out_data = fwd(ad, bd)
    parents = tuple(t for t in (at, bt) if t is not None)

    def backward_fn(g):
        grads = []
        if at is not None:
            grads.append(_unbroadcast(bwd_a(g, ad, bd), ad.shape))
        if bt is not None:
            grads.append(_unbroadcast(bwd_b(g, ad, bd), bd.shape))
        return grads

    return _result(out_data, parents, backward_fn, op)


def add(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def div(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y,
                   lambda g, x, y: -g * x / (y * y), "div")


def neg(a) -> Tensor:
    ad, at = _coerce(a)
    return _result(-ad, (at,) if at else (), lambda g: [-g], "neg")


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting. Both operands ndim >= 2."""
    ad, at = _coerce(a)
    bd, bt = _coerce(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul requires ndim >= 2, got {ad.ndim} and {bd.ndim}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    out_data = np.matmul(ad, bd)
    parents = tuple(t for t in (at, bt) if t is not None)

    def backward_fn(g):
        grads = []
        if at is not None:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            grads.append(_unbroadcast(ga, ad.shape))
        if bt is not None:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
            grads.append(_unbroadcast(gb, bd.shape))
        return grads

    return _result(out_data, parents, backward_fn, "matmul")


def sigmoid(a) -> Tensor:
    ad, at = _coerce(a)
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ez = np.exp(ad[~pos])
    out[~pos] = ez / (1.0 + ez)
    y = out
    return _result(y, (at,) if at else (), lambda g: [g * y * (1.0 - y)], "sigmoid")


def tanh(a) -> Tensor:
    ad, at = _coerce(a)
    y = np.tanh(ad)
    return _result(y, (at,) if at else (), lambda g: [g * (1.0 - y * y)], "tanh")


def relu(a) -> Tensor:
    ad, at = _coerce(a)
    y = np.maximum(ad, 0.0)
    return _result(y, (at,) if at else (), lambda g: [g * (ad > 0)], "relu")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    """GELU via the tanh approximation."""
    ad, at = _coerce(a)
    inner = _GELU_C * (ad + _GELU_A * ad ** 3)
    t = np.tanh(inner)
    y = 0.5 * ad * (1.0 + t)

    def backward_fn(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * ad * ad)
        dy = 0.5 * (1.0 + t) + 0.5 * ad * (1.0 - t * t) * d_inner
        return [g * dy]

    return _result(y, (at,) if at else (), backward_fn, "gelu")


def log(a) -> Tensor:
    ad, at = _coerce(a)
    if _checked and np.any(ad <= 0.0):
        raise DomainError("log: non-positive input")
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(ad)
    out = Tensor.__new__(Tensor)  # skip finiteness check: -inf allowed unchecked
    out.data = y
    out.grad = None
    if at is not None and at.requires_grad:
        out.requires_grad = True
        out._parents = (at,)
        out._backward = lambda g: [g / ad]
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def exp(a) -> Tensor:
    ad, at = _coerce(a)
    y = np.exp(ad)
    return _result(y, (at,) if at else (), lambda g: [g * y], "exp")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through the interior."""
    if lo >= hi:
        raise ConfigError(f"clip: lo {lo} must be < hi {hi}")
    ad, at = _coerce(a)
    y = np.clip(ad, lo, hi)
    mask = (ad >= lo) & (ad <= hi)
    return _result(y, (at,) if at else (), lambda g: [g * mask], "clip")


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    ad, at = _coerce(a)
    y = np.sum(ad, axis=axis, keepdims=keepdims)
    axes = _axis_tuple(axis, ad.ndim)

    def backward_fn(g):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return [np.broadcast_to(g, ad.shape)]

    return _result(np.asarray(y), (at,) if at else (), backward_fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    ad, at = _coerce(a)
    y = np.mean(ad, axis=axis, keepdims=keepdims)
    axes = _axis_tuple(axis, ad.ndim)
    n = 1
    for ax in axes:
        n *= ad.shape[ax]

    def backward_fn(g):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return [np.broadcast_to(g / n, ad.shape)]

    return _result(np.asarray(y), (at,) if at else (), backward_fn, "mean")


def reshape(a, shape) -> Tensor:
    ad, at = _coerce(a)
    y = ad.reshape(shape)
    return _result(y, (at,) if at else (), lambda g: [g.reshape(ad.shape)], "reshape")


def transpose(a, axes) -> Tensor:
    ad, at = _coerce(a)
    y = np.transpose(ad, axes)
    inv = np.argsort(axes)
    return _result(y, (at,) if at else (),
                   lambda g: [np.transpose(g, inv)], "transpose")


def getitem(a, idx) -> Tensor:
    ad, at = _coerce(a)
    y = ad[idx]
    if not isinstance(y, np.ndarray):
        y = np.asarray(y)

    def backward_fn(g):
        full = np.zeros_like(ad)
        np.add.at(full, idx, g)
        return [full]

    return _result(y, (at,) if at else (), backward_fn, "getitem")


def concat(tensors, axis: int = -1) -> Tensor:
    if not tensors:
        raise UsageError("concat: empty input list")
    datas, parents = [], []
    for t in tensors:
        d, tt = _coerce(t)
        datas.append(d)
        parents.append(tt)
    y = np.concatenate(datas, axis=axis)
    ax = axis % y.ndim
    sizes = [d.shape[ax] for d in datas]
    offsets = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        pieces = np.split(g, offsets, axis=ax)
        return [p for p, t in zip(pieces, parents) if t is not None]

    real_parents = tuple(t for t in parents if t is not None)
    return _result(y, real_parents, backward_fn, "concat")


def softmax_lastdim(a, additive_mask=None) -> Tensor:
    """Softmax over the last axis.

    `additive_mask` is a constant ndarray added to the logits before
    normalization; -inf entries zero out positions exactly. Rows that
    are fully masked yield all-zero probabilities (and zero gradient).
    """
    ad, at = _coerce(a)
    z = ad if additive_mask is None else ad + additive_mask
    m = np.max(z, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    denom = e.sum(axis=-1, keepdims=True)
    denom = np.where(denom == 0.0, 1.0, denom)
    y = e / denom

    def backward_fn(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return [(g - dot) * y]

    return _result(y, (at,) if at else (), backward_fn, "softmax_lastdim")


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    ad, at = _coerce(a)
    gd, gt = _coerce(gain)
    bd, bt = _coerce(bias)
    if gd.shape != ad.shape[-1:] or bd.shape != ad.shape[-1:]:
        raise ShapeError(f"layer_norm: gain/bias must have shape {ad.shape[-1:]}")
    mu = ad.mean(axis=-1, keepdims=True)
    xc = ad - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gd + bd
    parents = tuple(t for t in (at, gt, bt) if t is not None)

    def backward_fn(g):
        grads = []
        if at is not None:
            dxhat = g * gd
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            grads.append(inv * (dxhat - m1 - xhat * m2))
        if gt is not None:
            grads.append(_unbroadcast(g * xhat, gd.shape))
        if bt is not None:
            grads.append(_unbroadcast(g, bd.shape))
        return grads

    return _result(y, parents, backward_fn, "layer_norm")


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted-dropout mask: entries are 0 or 1/(1-rate), mean ~= 1."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return Tensor(np.ones(shape))
    keep = rng.random(shape) >= rate
    return Tensor(keep / (1.0 - rate))


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Populates `.grad` on every requires_grad leaf reachable from `loss`.
    Repeated calls accumulate; reset leaf grads between steps.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise UsageError("backward: loss does not depend on any requires_grad tensor")

    # iterative topological order over the subgraph that needs gradients
    topo, visited, stack = [], set(), [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, copy=True)
            else:
                node.grad = node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def gradient_check(f, wrt, h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` rebuilds the scalar loss from current tensor data on every call;
    `wrt` lists the requires_grad leaves to check.
    """
    for t in wrt:
        t.grad = None
    loss = f()
    backward(loss)
    analytic = [np.array(t.grad, copy=True) if t.grad is not None else np.zeros_like(t.data)
                for t in wrt]

    worst = 0.0
    for t, an in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            num = (up - down) / (2.0 * h)
            denom = max(abs(an_flat[i]), abs(num), 1e-4)
            worst = max(worst, abs(an_flat[i] - num) / denom)
    return worst


@dataclass
class AdamState:
    """Adam with decoupled weight decay and an optional L1 term.

    Moment buffers are keyed by parameter name and created lazily, so one
    state object can drive a subset of the parameters (frozen params are
    simply never passed in).
    """
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    l1_penalty: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0 or self.l1_penalty < 0:
            raise ConfigError("lr, weight_decay and l1_penalty must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must be in [0, 1)")


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update over `params`, in place.

    `grads` maps name -> ndarray (or None, treated as zero). Weight decay
    and L1 are decoupled from the adaptive update: after the Adam move,
    theta -= lr*wd*theta and theta -= lr*l1*sign(theta).
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param {p.data.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        if state.l1_penalty:
            p.data -= state.lr * state.l1_penalty * np.sign(p.data)
    return params
