"""Reverse-mode automatic differentiation over dense float64 tensors.

Values are computed eagerly; every differentiable operation appends a node to
an explicit tape. `Tape.backward` sweeps node ids in reverse, which is a valid
topological order because the tape is append-only. Adjoint accumulation over
fan-out happens in decreasing consumer-id order and never mutates an array in
place, so gradients are bitwise reproducible for identical tapes.

A tape built with `grad=False` executes the same forward arithmetic but keeps
no graph, which is the cheap path for evaluation-only rollouts.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    """Operand shapes incompatible with a primitive."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class NonFiniteError(AutodiffError):
    """A tensor left the finite range (NaN or Inf)."""


def _as_value(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr


class Tensor:
    """A node value on a tape: an n-d float64 array plus its node id.

    `nid` is -1 on tapes that record no graph.
    """

    __slots__ = ("tape", "nid", "value")

    def __init__(self, tape: "Tape", nid: int, value: np.ndarray):
        self.tape = tape
        self.nid = nid
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Tensor(nid={self.nid}, shape={self.value.shape})"

    # arithmetic sugar; scalars fold into fused constant ops
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise AutodiffError("division by a tracked tensor is not a primitive; "
                                "multiply by a reciprocal constant instead")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


BackwardRule = Callable[[np.ndarray], Sequence]


class Tape:
    """Append-only record of primitive operations for one rollout.

    Not shared across threads; independent tapes may run concurrently.
    """

    __slots__ = ("grad_enabled", "_parents", "_rules")

    def __init__(self, grad: bool = True):
        self.grad_enabled = grad
        self._parents: list[tuple[int, ...]] = []
        self._rules: list[BackwardRule | None] = []

    def __len__(self):
        return len(self._parents)

    def tensor(self, value) -> Tensor:
        """Record a leaf (parameter, state, or constant input)."""
        arr = _as_value(value)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("leaf tensor contains NaN or Inf")
        return self._emit(arr, (), None)

    def _emit(self, value: np.ndarray, parents: tuple[int, ...],
              rule: BackwardRule | None) -> Tensor:
        if not self.grad_enabled:
            return Tensor(self, -1, value)
        nid = len(self._parents)
        self._parents.append(parents)
        self._rules.append(rule)
        return Tensor(self, nid, value)

    def backward(self, root: Tensor) -> list:
        """Reverse sweep from a scalar root; returns adjoints indexed by node id.

        Entries are None for nodes the root does not depend on.
        """
        if not self.grad_enabled:
            raise AutodiffError("backward on a tape built with grad=False")
        if root.tape is not self or root.nid < 0:
            raise AutodiffError("root does not live on this tape")
        if root.size != 1:
            raise AutodiffError(f"backward root must be scalar, got shape {root.shape}")
        n = len(self._parents)
        grads: list = [None] * n
        # a rule may hand back a view; mutate in place only once this sweep
        # owns the accumulator (allocated it by the first out-of-place add)
        owned = bytearray(n)
        grads[root.nid] = np.ones_like(root.value)
        for nid in range(root.nid, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            rule = self._rules[nid]
            if rule is None:
                continue
            for pid, pg in zip(self._parents[nid], rule(g)):
                if pg is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg
                elif owned[pid]:
                    grads[pid] += pg
                else:
                    grads[pid] = grads[pid] + pg
                    owned[pid] = 1
        return grads


def backward(tape: Tape, root: Tensor) -> list:
    return tape.backward(root)


def _same_tape(op: str, a: Tensor, b: Tensor) -> Tape:
    if a.tape is not b.tape:
        raise AutodiffError(f"{op}: operands live on different tapes")
    return a.tape


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape("add", a, b)
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)
    out = a.value + b.value
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    return tape._emit(out, (a.nid, b.nid), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape("sub", a, b)
    if a.shape != b.shape:
        raise ShapeError("sub", a.shape, b.shape)
    out = a.value - b.value
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    return tape._emit(out, (a.nid, b.nid), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape("mul", a, b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    out = a.value * b.value
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    av, bv = a.value, b.value
    return tape._emit(out, (a.nid, b.nid), lambda g: (g * bv, g * av))


def neg(a: Tensor) -> Tensor:
    tape = a.tape
    out = -a.value
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    return tape._emit(out, (a.nid,), lambda g: (-g,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    tape = a.tape
    out = a.value + s
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    return tape._emit(out, (a.nid,), lambda g: (g,))


def scale(a: Tensor, s: float) -> Tensor:
    tape = a.tape
    out = a.value * s
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    return tape._emit(out, (a.nid,), lambda g: (g * s,))


def axpy(a: Tensor, b: Tensor, s: float) -> Tensor:
    """a + s*b, fused (Euler updates, cost accumulation)."""
    tape = _same_tape("axpy", a, b)
    if a.shape != b.shape:
        raise ShapeError("axpy", a.shape, b.shape)
    out = a.value + s * b.value
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    return tape._emit(out, (a.nid, b.nid), lambda g: (g, g * s))


def add_const(a: Tensor, c) -> Tensor:
    """a + fixed array (noise injections); no gradient into c."""
    tape = a.tape
    cv = _as_value(c)
    try:
        out = a.value + cv
    except ValueError:
        raise ShapeError("add_const", a.shape, cv.shape)
    if out.shape != a.shape:
        raise ShapeError("add_const", a.shape, cv.shape)
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    return tape._emit(out, (a.nid,), lambda g: (g,))


def mul_const(a: Tensor, c) -> Tensor:
    """a * fixed array, broadcasting allowed if the result keeps a's shape."""
    tape = a.tape
    cv = _as_value(c)
    out = a.value * cv
    if out.shape != a.shape:
        raise ShapeError("mul_const", a.shape, cv.shape)
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    return tape._emit(out, (a.nid,), lambda g: (g * cv,))


def square(a: Tensor) -> Tensor:
    tape = a.tape
    out = a.value * a.value
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    av = a.value
    return tape._emit(out, (a.nid,), lambda g: (g * (2.0 * av),))


def sqrt(a: Tensor) -> Tensor:
    tape = a.tape
    if np.any(a.value < 0):
        raise NonFiniteError("sqrt of negative entries")
    out = np.sqrt(a.value)
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    return tape._emit(out, (a.nid,), lambda g: (g * (0.5 / out),))


def exp(a: Tensor) -> Tensor:
    tape = a.tape
    out = np.exp(a.value)
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    return tape._emit(out, (a.nid,), lambda g: (g * out,))


def sigmoid(a: Tensor) -> Tensor:
    tape = a.tape
    out = expit(a.value)
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    return tape._emit(out, (a.nid,), lambda g: (g * (out * (1.0 - out)),))


def pow_int(a: Tensor, k: int) -> Tensor:
    if k < 1 or k != int(k):
        raise AutodiffError(f"pow_int: exponent must be a positive integer, got {k}")
    tape = a.tape
    if k == 1:
        out = a.value.copy()
        if not tape.grad_enabled:
            return tape._emit(out, (), None)
        return tape._emit(out, (a.nid,), lambda g: (g,))
    out = a.value ** k
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    av = a.value
    return tape._emit(out, (a.nid,), lambda g: (g * (k * av ** (k - 1)),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is the interior indicator (a.e. derivative)."""
    tape = a.tape
    out = np.clip(a.value, lo, hi)
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    mask = ((a.value > lo) & (a.value < hi)).astype(np.float64)
    return tape._emit(out, (a.nid,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape("matmul", a, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.value @ b.value
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    av, bv = a.value, b.value
    return tape._emit(out, (a.nid, b.nid), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Tensor) -> Tensor:
    tape = a.tape
    if a.value.ndim != 2:
        raise ShapeError("transpose", a.shape)
    out = a.value.T.copy()
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    return tape._emit(out, (a.nid,), lambda g: (g.T,))


def affine(x: Tensor, w: Tensor, b: Tensor, activation: str = "linear") -> Tensor:
    """Fused dense layer: act(x @ w + b), activation in {linear, sigmoid}."""
    tape = _same_tape("affine", x, w)
    _same_tape("affine", x, b)
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0] \
            or b.value.ndim != 1 or b.shape[0] != w.shape[1]:
        raise ShapeError("affine", x.shape, w.shape, b.shape)
    z = x.value @ w.value + b.value
    if activation == "sigmoid":
        out = expit(z)
    elif activation == "linear":
        out = z
    else:
        raise AutodiffError(f"affine: unknown activation {activation!r}")
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    xv, wv = x.value, w.value
    if activation == "sigmoid":
        def rule(g):
            gz = g * (out * (1.0 - out))
            return gz @ wv.T, xv.T @ gz, gz.sum(axis=0)
    else:
        def rule(g):
            return g @ wv.T, xv.T @ g, g.sum(axis=0)
    return tape._emit(out, (x.nid, w.nid, b.nid), rule)


def dense_chain(x: Tensor, layers: Sequence[tuple[Tensor, Tensor]],
                final_linear: bool = True) -> Tensor:
    """A whole feed-forward stack as one node: sigmoid hidden layers, with a
    linear (default) or sigmoid output layer. Equivalent to chaining `affine`;
    fused because the stack is the innermost loop of every simulation step.
    """
    if not layers:
        raise AutodiffError("dense_chain needs at least one layer")
    tape = x.tape
    h = x.value
    acts: list = []
    last = len(layers) - 1
    for idx, (w, b) in enumerate(layers):
        _same_tape("dense_chain", x, w)
        _same_tape("dense_chain", x, b)
        if h.ndim != 2 or w.value.ndim != 2 or h.shape[1] != w.value.shape[0] \
                or b.value.shape != (w.value.shape[1],):
            raise ShapeError("dense_chain", h.shape, w.value.shape, b.value.shape)
        z = h @ w.value + b.value
        h = z if idx == last and final_linear else expit(z)
        acts.append(h)
    if not tape.grad_enabled:
        return tape._emit(h, (), None)
    xv = x.value
    ws = [w.value for w, _ in layers]

    def rule(g):
        out: list = [None] * (2 * len(layers) + 1)
        for idx in range(last, -1, -1):
            linear = idx == last and final_linear
            gz = g if linear else g * (acts[idx] * (1.0 - acts[idx]))
            inp = xv if idx == 0 else acts[idx - 1]
            out[1 + 2 * idx] = inp.T @ gz
            out[2 + 2 * idx] = gz.sum(axis=0)
            g = gz @ ws[idx].T
        out[0] = g
        return out

    parents = (x.nid,) + tuple(t.nid for pair in layers for t in pair)
    return tape._emit(h, parents, rule)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    tape = a.tape
    out = np.asarray(a.value.sum())
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    shp = a.shape
    return tape._emit(out, (a.nid,), lambda g: (np.broadcast_to(g, shp),))


def mean_all(a: Tensor) -> Tensor:
    tape = a.tape
    out = np.asarray(a.value.mean())
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    shp, inv = a.shape, 1.0 / a.size
    return tape._emit(out, (a.nid,), lambda g: (np.broadcast_to(g * inv, shp),))


def sum_axis(a: Tensor, axis: int) -> Tensor:
    tape = a.tape
    if a.value.ndim != 2 or axis not in (0, 1):
        raise ShapeError("sum_axis", a.shape)
    out = a.value.sum(axis=axis)
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    n = a.shape[axis]
    if axis == 0:
        rule = lambda g: (np.broadcast_to(g, (n, g.shape[0])),)
    else:
        rule = lambda g: (np.broadcast_to(g[:, None], (g.shape[0], n)),)
    return tape._emit(out, (a.nid,), rule)


def mean_axis(a: Tensor, axis: int, canonical_order: bool = False) -> Tensor:
    """Mean along one axis of a 2-d tensor.

    With canonical_order=True the forward sum runs over sorted values so the
    result is bitwise invariant under row permutations (distribution summaries
    need this); the gradient 1/n per entry is unaffected.
    """
    tape = a.tape
    if a.value.ndim != 2 or axis not in (0, 1):
        raise ShapeError("mean_axis", a.shape)
    n = a.shape[axis]
    if canonical_order:
        out = np.sort(a.value, axis=axis).sum(axis=axis) / n
    else:
        out = a.value.mean(axis=axis)
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    inv = 1.0 / n
    if axis == 0:
        rule = lambda g: (np.broadcast_to(g * inv, (n, g.shape[0])),)
    else:
        rule = lambda g: (np.broadcast_to(g[:, None] * inv, (g.shape[0], n)),)
    return tape._emit(out, (a.nid,), rule)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape) -> Tensor:
    tape = a.tape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape)
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    orig = a.shape
    return tape._emit(out, (a.nid,), lambda g: (g.reshape(orig),))


def broadcast_row(v: Tensor, n: int) -> Tensor:
    """Tile a (w,) or (1, w) vector to n rows; backward sums the rows."""
    tape = v.tape
    row = v.value.reshape(-1)
    out = np.broadcast_to(row, (n, row.size)).copy()
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    orig = v.shape
    return tape._emit(out, (v.nid,), lambda g: (g.sum(axis=0).reshape(orig),))


def broadcast_col(v: Tensor, m: int) -> Tensor:
    """Tile a (n,) vector to (n, m) columns; backward sums over columns."""
    tape = v.tape
    col = v.value.reshape(-1)
    out = np.broadcast_to(col[:, None], (col.size, m)).copy()
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    orig = v.shape
    return tape._emit(out, (v.nid,), lambda g: (g.sum(axis=1).reshape(orig),))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise AutodiffError("concat_cols of nothing")
    tape = parts[0].tape
    rows = parts[0].shape[0]
    for p in parts:
        _same_tape("concat_cols", parts[0], p)
        if p.value.ndim != 2 or p.shape[0] != rows:
            raise ShapeError("concat_cols", *(q.shape for q in parts))
    out = np.concatenate([p.value for p in parts], axis=1)
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def rule(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(widths)))

    return tape._emit(out, tuple(p.nid for p in parts), rule)


def col_slice(a: Tensor, j0: int, j1: int) -> Tensor:
    tape = a.tape
    if a.value.ndim != 2 or not (0 <= j0 < j1 <= a.shape[1]):
        raise ShapeError("col_slice", a.shape, (j0, j1))
    out = a.value[:, j0:j1].copy()
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    shp = a.shape

    def rule(g):
        ga = np.zeros(shp)
        ga[:, j0:j1] = g
        return (ga,)

    return tape._emit(out, (a.nid,), rule)


# ---------------------------------------------------------------------------
# valid convolutions, stride 1


def conv1d(x: Tensor, k: Tensor, b: Tensor, activation: str = "linear") -> Tensor:
    """x: (L, Ci), k: (K, Ci, Co), b: (Co,) -> (L-K+1, Co)."""
    tape = _same_tape("conv1d", x, k)
    _same_tape("conv1d", x, b)
    if x.value.ndim != 2 or k.value.ndim != 3 or x.shape[1] != k.shape[1]:
        raise ShapeError("conv1d", x.shape, k.shape)
    L, ci = x.shape
    K, _, co = k.shape
    if K > L:
        raise ShapeError("conv1d", x.shape, k.shape)
    win = np.lib.stride_tricks.sliding_window_view(x.value, K, axis=0)  # (P, Ci, K)
    z = np.einsum("pck,kcf->pf", win, k.value, optimize=True) + b.value
    out = expit(z) if activation == "sigmoid" else z
    if activation not in ("linear", "sigmoid"):
        raise AutodiffError(f"conv1d: unknown activation {activation!r}")
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    xv, kv = x.value, k.value
    P = L - K + 1

    def rule(g):
        gz = g * (out * (1.0 - out)) if activation == "sigmoid" else g
        gk = np.einsum("pck,pf->kcf", win, gz, optimize=True)
        gx = np.zeros((L, ci))
        for u in range(K):
            gx[u:u + P] += gz @ kv[u].T
        return gx, gk, gz.sum(axis=0)

    return tape._emit(out, (x.nid, k.nid, b.nid), rule)


def conv2d(x: Tensor, k: Tensor, b: Tensor, activation: str = "linear") -> Tensor:
    """x: (H, W, Ci), k: (Kh, Kw, Ci, Co), b: (Co,) -> (H-Kh+1, W-Kw+1, Co)."""
    tape = _same_tape("conv2d", x, k)
    _same_tape("conv2d", x, b)
    if x.value.ndim != 3 or k.value.ndim != 4 or x.shape[2] != k.shape[2]:
        raise ShapeError("conv2d", x.shape, k.shape)
    H, W, ci = x.shape
    kh, kw, _, co = k.shape
    if kh > H or kw > W:
        raise ShapeError("conv2d", x.shape, k.shape)
    win = np.lib.stride_tricks.sliding_window_view(x.value, (kh, kw), axis=(0, 1))
    # win: (P, Q, Ci, Kh, Kw)
    z = np.einsum("pqcuv,uvcf->pqf", win, k.value, optimize=True) + b.value
    out = expit(z) if activation == "sigmoid" else z
    if activation not in ("linear", "sigmoid"):
        raise AutodiffError(f"conv2d: unknown activation {activation!r}")
    if not tape.grad_enabled:
        return tape._emit(out, (), None)
    kv = k.value
    P, Q = H - kh + 1, W - kw + 1

    def rule(g):
        gz = g * (out * (1.0 - out)) if activation == "sigmoid" else g
        gk = np.einsum("pqcuv,pqf->uvcf", win, gz, optimize=True)
        gx = np.zeros((H, W, ci))
        for u in range(kh):
            for v in range(kw):
                gx[u:u + P, v:v + Q] += gz @ kv[u, v].T
        return gx, gk, gz.sum(axis=(0, 1))

    return tape._emit(out, (x.nid, k.nid, b.nid), rule)


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
