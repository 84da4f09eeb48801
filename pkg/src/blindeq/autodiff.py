"""Minimal reverse-mode autodiff over real scalars/vectors, plus AMSGrad.

Values are numpy float64 arrays (rank 0 or 1). Every operation appends a node
to a Tape; node creation order is already topological, so the backward pass is
a single reverse sweep that visits each node exactly once. Tapes are rebuilt
each training step -- the networks here are tiny, so simplicity wins over
graph caching.

Scalar/vector mixing is supported (a scalar operand broadcasts against a
vector); general broadcasting is out of scope.
"""

from __future__ import annotations

import numpy as np


class TapeError(Exception):
    """Contract violation in tape construction or backward."""


def _as_value(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim > 1:
        raise TapeError(f"only rank-0/1 values supported, got shape {v.shape}")
    return v


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # collapse a vector gradient back onto a scalar operand
    if shape == () and np.ndim(grad) != 0:
        return np.sum(grad)
    return grad


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._parents: list[tuple] = []  # tuple of (parent_index, vjp)

    def __len__(self):
        return len(self._values)

    def push(self, value, parents=()) -> "Var":
        """Record one primitive op; `parents` pairs indices with VJP callables."""
        self._values.append(_as_value(value))
        self._parents.append(tuple(parents))
        return Var(self, len(self._values) - 1)

    def leaf(self, value) -> "Var":
        return self.push(value)

    def value(self, index: int) -> np.ndarray:
        return self._values[index]

    def backward(self, out: "Var") -> list:
        """Reverse sweep from a scalar node; returns per-node gradients."""
        if out.tape is not self:
            raise TapeError("node does not belong to this tape")
        if np.ndim(self._values[out.index]) != 0:
            raise TapeError("backward requires a scalar output node")
        grads: list = [None] * len(self._values)
        grads[out.index] = np.float64(1.0)
        for i in range(out.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            for j, vjp in self._parents[i]:
                contrib = vjp(g)
                grads[j] = contrib if grads[j] is None else grads[j] + contrib
        return grads


class Var:
    """Handle to one tape node."""

    __slots__ = ("tape", "index")

    # keep numpy from elementwise-dispatching over Var operands
    __array_ufunc__ = None

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.value(self.index)

    def __repr__(self):
        return f"Var({self.value!r})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return pow_const(self, p)


def _split(x):
    """Return (value, var_or_None) for a Var or constant operand."""
    if isinstance(x, Var):
        return x.value, x
    return _as_value(x), None


def _tape_of(*ops) -> Tape:
    for x in ops:
        if isinstance(x, Var):
            return x.tape
    raise TapeError("at least one operand must be a Var")


def _binary(a, b, fwd, vjp_a, vjp_b) -> Var:
    av, avar = _split(a)
    bv, bvar = _split(b)
    tape = _tape_of(a, b)
    out = fwd(av, bv)
    parents = []
    if avar is not None:
        parents.append((avar.index, lambda g, av=av, bv=bv: _unbroadcast(vjp_a(g, av, bv), av.shape)))
    if bvar is not None:
        parents.append((bvar.index, lambda g, av=av, bv=bv: _unbroadcast(vjp_b(g, av, bv), bv.shape)))
    return tape.push(out, parents)


def _unary(a: Var, fwd, vjp) -> Var:
    av = a.value
    return a.tape.push(fwd(av), [(a.index, lambda g, av=av: vjp(g, av))])


def add(a, b) -> Var:
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Var:
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Var:
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Var:
    return _binary(a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def pow_const(a: Var, p: float) -> Var:
    return _unary(a, lambda x: x ** p, lambda g, x: g * p * x ** (p - 1))


def vsum(a: Var) -> Var:
    return _unary(a, lambda x: np.sum(x),
                  lambda g, x: g * np.ones_like(x) if x.ndim else g)


def log(a: Var) -> Var:
    return _unary(a, np.log, lambda g, x: g / x)


def exp(a: Var) -> Var:
    return _unary(a, np.exp, lambda g, x: g * np.exp(x))


def tanh(a: Var) -> Var:
    return _unary(a, np.tanh, lambda g, x: g * (1.0 - np.tanh(x) ** 2))


def sigmoid(a: Var) -> Var:
    def fwd(x):
        return 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))

    return _unary(a, fwd, lambda g, x: g * fwd(x) * (1.0 - fwd(x)))


def softsign(a: Var) -> Var:
    # f(x) = x / (|x| + 1); derivative 1 / (|x| + 1)^2 (equals 1 at x=0)
    return _unary(a, lambda x: x / (np.abs(x) + 1.0),
                  lambda g, x: g / (np.abs(x) + 1.0) ** 2)


def relu(a: Var) -> Var:
    # subgradient 0 at x=0
    return _unary(a, lambda x: np.maximum(x, 0.0),
                  lambda g, x: g * (x > 0.0))


def clip(a: Var, lo=None, hi=None) -> Var:
    """Clamp values; gradient passes through strictly inside the bounds."""

    def fwd(x):
        return np.clip(x, lo, hi)

    def vjp(g, x):
        mask = np.ones_like(x, dtype=bool) if x.ndim else np.bool_(True)
        if lo is not None:
            mask = mask & (x > lo)
        if hi is not None:
            mask = mask & (x < hi)
        return g * mask

    return _unary(a, fwd, vjp)


def getitem(a: Var, i: int) -> Var:
    av = a.value

    def vjp(g, n=av.shape[0], i=i):
        z = np.zeros(n)
        z[i] = g
        return z

    return a.tape.push(av[i], [(a.index, vjp)])


_ACTIVATIONS = {"softsign": softsign, "tanh": tanh, "sigmoid": sigmoid, "relu": relu}


def activation(v, kind: str):
    """Elementwise activation; accepts a Var (on tape) or a plain array."""
    if kind not in _ACTIVATIONS:
        raise TapeError(f"unknown activation {kind!r}")
    if isinstance(v, Var):
        return _ACTIVATIONS[kind](v)
    t = Tape()
    return _ACTIVATIONS[kind](t.leaf(v)).value


def conv1d_offset(x, k, offset: int) -> Var:
    """Length-preserving convolution of x (length N) with k (length M).

    out[n] = sum_m k[m] * x[n + offset - m] with x zero-padded; differentiable
    in both arguments.
    """
    xv, xvar = _split(x)
    kv, kvar = _split(k)
    if xv.ndim != 1 or kv.ndim != 1:
        raise TapeError("conv1d expects vector operands")
    n, m = xv.shape[0], kv.shape[0]
    if n < 1 or m < 1:
        raise TapeError("conv1d operands must be non-empty")
    if not 0 <= offset < m:
        raise TapeError(f"offset {offset} outside kernel range 0..{m - 1}")
    tape = _tape_of(x, k)
    out = np.convolve(xv, kv)[offset:offset + n]
    parents = []
    if xvar is not None:
        def vjp_x(g, kv=kv, m=m, n=n, offset=offset):
            return np.convolve(g, kv[::-1])[m - 1 - offset:m - 1 - offset + n]

        parents.append((xvar.index, vjp_x))
    if kvar is not None:
        def vjp_k(g, xv=xv, m=m, n=n, offset=offset):
            return np.convolve(g, xv[::-1])[n - 1 - offset:n - 1 - offset + m]

        parents.append((kvar.index, vjp_k))
    return tape.push(out, parents)


def _mode_offset(mode: str, m: int) -> int:
    if mode == "causal":
        return 0
    if mode == "centered":
        if m % 2 == 0:
            raise TapeError("centered mode requires an odd kernel length")
        return (m - 1) // 2
    raise TapeError(f"unknown conv mode {mode!r}")


def conv1d_same(x, k, mode: str = "causal") -> Var:
    """Convolution with the kernel indexed causally (h_0..h_{M-1}) or
    centered (h_{-(M-1)/2}..h_{(M-1)/2}, odd M only)."""
    kv = k.value if isinstance(k, Var) else _as_value(k)
    return conv1d_offset(x, k, _mode_offset(mode, kv.shape[0]))


def complex_conv1d_same(x_pair, k_pair, mode: str = "causal"):
    """(xI + j xQ) * (kI + j kQ) via four real convolutions; returns (I, Q)."""
    xi, xq = x_pair
    ki, kq = k_pair
    ni = xi.value.shape[0] if isinstance(xi, Var) else _as_value(xi).shape[0]
    nq = xq.value.shape[0] if isinstance(xq, Var) else _as_value(xq).shape[0]
    if ni != nq:
        raise TapeError("I/Q signal lengths differ")
    mi = ki.value.shape[0] if isinstance(ki, Var) else _as_value(ki).shape[0]
    mq = kq.value.shape[0] if isinstance(kq, Var) else _as_value(kq).shape[0]
    if mi != mq:
        raise TapeError("I/Q kernel lengths differ")
    out_i = sub(conv1d_same(xi, ki, mode), conv1d_same(xq, kq, mode))
    out_q = add(conv1d_same(xi, kq, mode), conv1d_same(xq, ki, mode))
    return out_i, out_q


def record_and_backward(loss: Var, leaves: dict) -> dict:
    """Gradients of a scalar loss w.r.t. named leaf Vars.

    Leaves that did not participate in the forward pass map to zeros.
    """
    grads = loss.tape.backward(loss)
    out = {}
    for name, var in leaves.items():
        g = grads[var.index]
        out[name] = np.zeros_like(var.value) if g is None else np.asarray(g, dtype=np.float64)
    return out


class ParamStore:
    """Named parameter vectors with per-parameter AMSGrad state.

    Uses the bias-corrected AMSGrad variant: the max accumulator tracks the
    raw second moment, so it is monotone per coordinate, and the first update
    from a fresh state has magnitude ~lr.
    """

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._vmax: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value) -> None:
        v = _as_value(value).copy()
        if v.ndim == 0:
            v = v.reshape(1)
        self.values[name] = v
        self._m[name] = np.zeros_like(v)
        self._v[name] = np.zeros_like(v)
        self._vmax[name] = np.zeros_like(v)

    def names(self):
        return list(self.values)

    def leaves(self, tape: Tape) -> dict[str, Var]:
        """Fresh leaf Vars for the current values, keyed by name."""
        return {name: tape.leaf(v) for name, v in self.values.items()}

    def vmax(self, name: str) -> np.ndarray:
        return self._vmax[name].copy()

    def amsgrad_step(self, grads: dict, lr: float) -> "ParamStore":
        """One AMSGrad update from a gradient map (subset of params allowed)."""
        for name, g in grads.items():
            if name not in self.values:
                raise KeyError(f"unknown parameter {name!r}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.BETA1 ** t
        bc2 = 1.0 - self.BETA2 ** t
        for name, g in grads.items():
            g = np.asarray(g, dtype=np.float64).reshape(self.values[name].shape)
            m = self._m[name]
            v = self._v[name]
            m *= self.BETA1
            m += (1.0 - self.BETA1) * g
            v *= self.BETA2
            v += (1.0 - self.BETA2) * g * g
            np.maximum(self._vmax[name], v, out=self._vmax[name])
            denom = np.sqrt(self._vmax[name] / bc2) + self.EPS
            self.values[name] -= lr * (m / bc1) / denom
        return self


def amsgrad_step(params: ParamStore, grads: dict, lr: float) -> ParamStore:
    return params.amsgrad_step(grads, lr)
