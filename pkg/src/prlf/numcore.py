"""
Dense float64 arrays with a minimal reverse-mode tape.

Every quantity PRLF computes flows through the kernels in this module:
linear maps, ReLU/sigmoid, row softmax, dropout, concatenation, pooling
means, L1 normalization and the cross-entropy head. Each kernel records a
node on the active :class:`Tape`; ``Tape.backward`` replays the chain rule
in reverse creation order and accumulates gradients on leaf tensors.
``grad_check`` verifies any scalar-valued composition against central
differences.

Conventions:
  * everything is float64, row-major; outputs are validated finite after
    every kernel and construction rejects non-finite input,
  * ReLU's subgradient at exactly 0 is 0,
  * dropout is the inverted kind (surviving entries scaled by 1/(1-rate))
    and is the identity when ``training`` is false,
  * no general broadcasting: the few mixed-shape kernels that PRLF needs
    (bias add, row-vector scaling) are explicit ops.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from . import diagnostics
from .errors import ContractViolation, NumericError

L1_EPS = 1e-12
PROB_CLAMP = 1e-30


import math as _math


def _as_f64(data) -> np.ndarray:
    # np.asarray with order="C" keeps 0-d arrays 0-d (ascontiguousarray would
    # promote them to shape (1,)).
    return np.asarray(data, dtype=np.float64, order="C")


def _ensure_finite(arr: np.ndarray, where: str) -> None:
    # One reduction instead of isfinite().all(): any NaN/Inf entry makes the
    # sum non-finite, and desk-scale magnitudes cannot overflow the sum.
    if not _math.isfinite(float(arr.sum())):
        raise NumericError(f"non-finite values in {where}")


class Tensor:
    """A dense float64 array, optionally a trainable leaf.

    ``grad`` is allocated for leaves (``requires_grad=True``) and holds the
    accumulated gradient after ``Tape.backward``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_f64(data)
        _ensure_finite(self.data, f"tensor {name or '<anon>'}")
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.data.shape})"


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


class TapeNode:
    """One recorded operation: inputs, output, and its vector-Jacobian rule."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple, output: Tensor,
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class _TapeStack(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_tapes = _TapeStack()


def _active_tape():
    return _tapes.stack[-1] if _tapes.stack else None


class Tape:
    """Records kernels in creation order; single-writer, one backward pass.

    Use as a context manager. Nested tapes are allowed; kernels record on
    the innermost one only. Workers running concurrently must each own a
    private tape (the stack is thread-local).
    """

    def __init__(self):
        self._nodes: list[TapeNode] = []
        self._outputs: set = set()
        self._spent = False

    def __enter__(self) -> "Tape":
        _tapes.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tapes.stack.pop()
        assert popped is self

    def _record(self, node: TapeNode) -> None:
        self._nodes.append(node)
        self._outputs.add(id(node.output))

    def __len__(self) -> int:
        return len(self._nodes)

    def reset(self) -> None:
        self._nodes.clear()
        self._outputs.clear()
        self._spent = False

    def backward(self, loss: Tensor, accumulate: bool = True) -> dict:
        """Run reverse-mode through the recorded nodes from ``loss``.

        Returns a map ``id(tensor) -> gradient array`` for every leaf
        (``requires_grad``) tensor that the loss reaches; leaves the tape
        spent until ``reset``. With ``accumulate`` the gradients are also
        added into each leaf's ``grad`` buffer (callers zero the buffers).
        """
        if self._spent:
            raise ContractViolation("backward already ran on this tape; call reset() first")
        if loss.data.shape != ():
            raise ContractViolation(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if id(loss) not in self._outputs:
            raise ContractViolation("loss was not produced on this tape")
        self._spent = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        leaf_grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}
        # Accumulation rebinds (never adds in place), so partials may be
        # stored without copying even when one array backs several inputs.
        for node in reversed(self._nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            partials = node.backward_fn(g_out)
            for inp, g in zip(node.inputs, partials):
                if g is None or not isinstance(inp, Tensor):
                    continue
                key = id(inp)
                if inp.requires_grad:
                    prev = leaf_grads.get(key)
                    if prev is None:
                        leaf_grads[key] = g
                        leaves[key] = inp
                    else:
                        leaf_grads[key] = prev + g
                if key in self._outputs:
                    prev = grads.get(key)
                    grads[key] = g if prev is None else prev + g

        if accumulate:
            for key, g in leaf_grads.items():
                leaves[key].grad += g
        return leaf_grads


def _make(op: str, inputs: tuple, out_data: np.ndarray,
          backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(out_data, name=op)
    tape = _active_tape()
    if tape is not None:
        tape._record(TapeNode(op, inputs, out, backward_fn))
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ContractViolation(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# arithmetic kernels
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _make("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _make("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    _check_same_shape("mul", a, b)
    a_d, b_d = a.data, b.data
    return _make("mul", (a, b), a_d * b_d, lambda g: (g * b_d, g * a_d))


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a plain (non-differentiated) float."""
    c = float(c)
    return _make("scale", (x,), x.data * c, lambda g: (g * c,))


def smul(s: Tensor, x: Tensor) -> Tensor:
    """Scalar tensor times arbitrary tensor; gradients flow to both."""
    if s.data.shape != ():
        raise ContractViolation(f"smul: scalar operand has shape {s.data.shape}")
    s_d, x_d = s.data, x.data
    return _make("smul", (s, x), float(s_d) * x_d,
                 lambda g: (np.asarray((g * x_d).sum()), g * float(s_d)))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast bias: (R,C) + (C,)."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ContractViolation(
            f"add_bias: incompatible shapes {x.data.shape} and {b.data.shape}")
    return _make("add_bias", (x, b), x.data + b.data[None, :],
                 lambda g: (g, g.sum(axis=0)))


def mul_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Row-broadcast elementwise scaling: (R,C) * (C,)."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.data.shape[1] != v.data.shape[0]:
        raise ContractViolation(
            f"mul_rowvec: incompatible shapes {x.data.shape} and {v.data.shape}")
    x_d, v_d = x.data, v.data
    return _make("mul_rowvec", (x, v), x_d * v_d[None, :],
                 lambda g: (g * v_d[None, :], (g * x_d).sum(axis=0)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ContractViolation(
            f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    a_d, b_d = a.data, b.data
    return _make("matmul", (a, b), a_d @ b_d,
                 lambda g: (g @ b_d.T, a_d.T @ g))


def vecmat(v: Tensor, m: Tensor) -> Tensor:
    """(D,) @ (D,C) -> (C,)."""
    if v.data.ndim != 1 or m.data.ndim != 2 or v.data.shape[0] != m.data.shape[0]:
        raise ContractViolation(
            f"vecmat: incompatible shapes {v.data.shape} and {m.data.shape}")
    v_d, m_d = v.data, m.data
    return _make("vecmat", (v, m), v_d @ m_d,
                 lambda g: (m_d @ g, np.outer(v_d, g)))


def matmul_t(a: Tensor, b: Tensor, mult: float = 1.0) -> Tensor:
    """(R,D) @ (S,D)^T -> (R,S), times an optional constant factor."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ContractViolation(
            f"matmul_t: incompatible shapes {a.data.shape} and {b.data.shape}")
    a_d, b_d = a.data, b.data
    mult = float(mult)
    out = a_d @ b_d.T
    if mult != 1.0:
        out *= mult
    return _make("matmul_t", (a, b), out,
                 lambda g: ((g @ b_d) * mult, (g.T @ a_d) * mult))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ContractViolation(f"transpose: expected 2-d, got shape {x.data.shape}")
    return _make("transpose", (x,), np.ascontiguousarray(x.data.T),
                 lambda g: (np.ascontiguousarray(g.T),))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", (x,), np.maximum(x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    x_d = x.data
    out = np.empty_like(x_d)
    pos = x_d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x_d[pos]))
    ex = np.exp(x_d[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax; a 1-d input is treated as one row."""
    x_d = x.data
    if x_d.ndim == 1:
        shifted = x_d - x_d.max()
        e = np.exp(shifted)
        out = e / e.sum()

        def back_vec(g):
            return (out * (g - float(np.dot(g, out))),)

        return _make("softmax", (x,), out, back_vec)
    if x_d.ndim != 2:
        raise ContractViolation(f"softmax_rows: expected 1-d or 2-d, got {x_d.shape}")
    shifted = x_d - x_d.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _make("softmax", (x,), out, back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None,
            training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ContractViolation(f"dropout rate must be in [0,1), got {rate}")
    if not training or rate == 0.0:
        return x  # exact identity; no node needed
    if rng is None:
        raise ContractViolation("dropout in training mode needs an rng")
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return _make("dropout", (x,), x.data * keep, lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# shape kernels
# ---------------------------------------------------------------------------


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractViolation("concat_rows: empty input")
    cols = {p.data.shape[1] if p.data.ndim == 2 else -1 for p in parts}
    if len(cols) != 1 or -1 in cols:
        raise ContractViolation("concat_rows: inputs must be 2-d with equal columns")
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return _make("concat_rows", tuple(parts),
                 np.concatenate([p.data for p in parts], axis=0), back)


def concat_vec(parts: Sequence[Tensor]) -> Tensor:
    if not parts or any(p.data.ndim != 1 for p in parts):
        raise ContractViolation("concat_vec: inputs must be 1-d")
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return _make("concat_vec", tuple(parts),
                 np.concatenate([p.data for p in parts]), back)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not 0 <= start < stop <= x.data.shape[0]:
        raise ContractViolation(
            f"slice_rows: bad range [{start},{stop}) for shape {x.data.shape}")
    rows = x.data.shape[0]

    def back(g):
        full = np.zeros((rows, x.data.shape[1]))
        full[start:stop] = g
        return (full,)

    return _make("slice_rows", (x,), x.data[start:stop].copy(), back)


def stack_scalars(parts: Sequence[Tensor]) -> Tensor:
    if not parts or any(p.data.shape != () for p in parts):
        raise ContractViolation("stack_scalars: inputs must be scalars")

    def back(g):
        return tuple(np.asarray(g[i]) for i in range(len(parts)))

    return _make("stack_scalars", tuple(parts),
                 np.array([float(p.data) for p in parts]), back)


def pick(v: Tensor, index: int) -> Tensor:
    if v.data.ndim != 1 or not 0 <= index < v.data.shape[0]:
        raise ContractViolation(f"pick: index {index} out of range for shape {v.data.shape}")

    def back(g):
        out = np.zeros_like(v.data)
        out[index] = float(g)
        return (out,)

    return _make("pick", (v,), np.asarray(v.data[index]), back)


# ---------------------------------------------------------------------------
# reductions and normalizers
# ---------------------------------------------------------------------------


def mean_rows(x: Tensor) -> Tensor:
    """(R,C) -> (C,): mean over rows."""
    if x.data.ndim != 2:
        raise ContractViolation(f"mean_rows: expected 2-d, got {x.data.shape}")
    rows = x.data.shape[0]
    return _make("mean_rows", (x,), x.data.mean(axis=0),
                 lambda g: (np.repeat(g[None, :], rows, axis=0) / rows,))


def mean_all(x: Tensor) -> Tensor:
    size = x.data.size
    return _make("mean_all", (x,), np.asarray(x.data.mean()),
                 lambda g: (np.full_like(x.data, float(g) / size),))


def row_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner products: (R,C),(R,C) -> (R,)."""
    _check_same_shape("row_dot", a, b)
    if a.data.ndim != 2:
        raise ContractViolation(f"row_dot: expected 2-d, got {a.data.shape}")
    a_d, b_d = a.data, b.data
    return _make("row_dot", (a, b), (a_d * b_d).sum(axis=1),
                 lambda g: (g[:, None] * b_d, g[:, None] * a_d))


def square(x: Tensor) -> Tensor:
    x_d = x.data
    return _make("square", (x,), x_d * x_d, lambda g: (2.0 * g * x_d,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log: non-positive input")
    x_d = x.data
    return _make("log", (x,), np.log(x_d), lambda g: (g / x_d,))


def l1_normalize(v: Tensor) -> Tensor:
    """Divide by the L1 norm; a near-zero vector maps to the uniform one.

    The uniform fallback (norm <= 1e-12) is a constant branch, so it
    contributes zero gradient.
    """
    if v.data.ndim != 1:
        raise ContractViolation(f"l1_normalize: expected 1-d, got {v.data.shape}")
    n = v.data.shape[0]
    s = float(np.abs(v.data).sum())
    if s <= L1_EPS:
        return _make("l1_normalize_uniform", (v,), np.full(n, 1.0 / n),
                     lambda g: (np.zeros(n),))
    out = v.data / s
    sign = np.sign(v.data)

    def back(g):
        return ((g - sign * float(np.dot(g, out))) / s,)

    return _make("l1_normalize", (v,), out, back)


def masked_segment_mean(x: Tensor, mask: np.ndarray, segments: int) -> Tensor:
    """Pool (T,D) rows into (segments,D) by contiguous segment means.

    Only rows with a true mask bit participate; a segment with no live
    rows yields a zero row. Segment k covers rows
    [floor(k*T/segments), floor((k+1)*T/segments)).
    """
    if x.data.ndim != 2:
        raise ContractViolation(f"masked_segment_mean: expected 2-d, got {x.data.shape}")
    t, d = x.data.shape
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (t,):
        raise ContractViolation(
            f"masked_segment_mean: mask shape {mask.shape} does not match {t} rows")
    if not 1 <= segments <= t:
        raise ContractViolation(f"masked_segment_mean: segments={segments} with {t} rows")
    bounds = [(t * k) // segments for k in range(segments + 1)]
    out = np.zeros((segments, d))
    weights = np.zeros(t)
    for k in range(segments):
        lo, hi = bounds[k], bounds[k + 1]
        live = mask[lo:hi]
        n_live = int(live.sum())
        if n_live == 0:
            continue
        out[k] = x.data[lo:hi][live].sum(axis=0) / n_live
        weights[lo:hi][live] = 1.0 / n_live

    def back(g):
        dx = np.zeros((t, d))
        for k in range(segments):
            lo, hi = bounds[k], bounds[k + 1]
            dx[lo:hi] = g[k][None, :] * weights[lo:hi, None]
        return (dx,)

    return _make("masked_segment_mean", (x,), out, back)


# ---------------------------------------------------------------------------
# loss heads
# ---------------------------------------------------------------------------


def cross_entropy(probs: Tensor, label: int) -> Tensor:
    """Negative log probability of ``label`` under a given distribution.

    Probabilities below 1e-30 are clamped before the log; clamp events are
    counted under ``diagnostics['cross_entropy_clamped']``.
    """
    p = probs.data
    if p.ndim != 1:
        raise ContractViolation(f"cross_entropy: expected a 1-d distribution, got {p.shape}")
    if not 0 <= label < p.shape[0]:
        raise ContractViolation(f"cross_entropy: label {label} out of range {p.shape[0]}")
    if np.any(p < 0):
        raise ContractViolation("cross_entropy: negative probability")
    total = float(p.sum())
    if abs(total - 1.0) > 1e-9:
        raise ContractViolation(f"cross_entropy: probabilities sum to {total}, not 1")
    p_label = float(p[label])
    if p_label < PROB_CLAMP:
        diagnostics.bump("cross_entropy_clamped")
        p_label = PROB_CLAMP

    def back(g):
        out = np.zeros_like(p)
        out[label] = -float(g) / p_label
        return (out,)

    return _make("cross_entropy", (probs,), np.asarray(-np.log(p_label)), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b). Accepts (R,D) or (D,) input."""
    out = vecmat(x, w) if x.data.ndim == 1 else matmul(x, w)
    if b is not None:
        out = add(out, b) if out.data.ndim == 1 else add_bias(out, b)
    return out


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class ParameterStore:
    """Flat, ordered collection of named trainable tensors.

    Every parameter carries a zero-initialized gradient buffer that
    ``Tape.backward`` accumulates into; unreachable parameters therefore
    hold exact zeros after a backward over freshly zeroed buffers.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ContractViolation(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad[...] = 0.0

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ContractViolation(
                f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in state.items():
            t = self._params[name]
            arr = _as_f64(arr)
            if arr.shape != t.data.shape:
                raise ContractViolation(
                    f"parameter {name!r}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.copy()


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def grad_check(fn, points: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps Tensors (one per entry of ``points``) to a scalar Tensor
    and must be deterministic across calls. The relative error per
    coordinate is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    points = [_as_f64(p) for p in points]
    leaves = [Tensor(p.copy(), requires_grad=True) for p in points]
    with Tape() as tape:
        out = fn(*leaves)
    if out.data.shape != ():
        raise ContractViolation("grad_check: function under test must return a scalar")
    grad_map = tape.backward(out, accumulate=False)

    worst = 0.0
    for slot, base in enumerate(points):
        analytic = grad_map.get(id(leaves[slot]))
        if analytic is None:
            analytic = np.zeros_like(base)
        flat = base.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]

            def eval_at(value: float) -> float:
                args = [Tensor(p.copy()) for p in points]
                args[slot].data.reshape(-1)[j] = value
                return float(fn(*args).data)

            numeric = (eval_at(orig + h) - eval_at(orig - h)) / (2.0 * h)
            a = float(analytic.reshape(-1)[j])
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, rel)
    return worst
