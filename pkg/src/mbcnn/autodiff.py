"""Minimal define-by-run reverse-mode autodiff over NHWC numpy arrays.

A :class:`Tape` records every operation whose inputs carry a node id. Node
ids grow monotonically, so walking them backwards is a valid reverse
topological order. Tensors without a node id are constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np


class ShapeError(ValueError):
    """Raised when an operation receives incompatible inputs."""


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Record:
    inputs: Tuple[Optional[int], ...]
    backward: Optional[BackwardFn]


class Tape:
    """Ordered record of differentiable operations.

    ``mode="single"`` keeps float32 arithmetic; ``mode="double"`` promotes
    every variable to float64 and is meant for gradient verification.
    A tape created with ``record=False`` hands out constants only, which is
    what inference wants.
    """

    def __init__(self, mode: str = "single", record: bool = True):
        if mode not in ("single", "double"):
            raise ValueError(f"unknown tape mode {mode!r}")
        self.mode = mode
        self.record = record
        self.dtype = np.float32 if mode == "single" else np.float64
        self._records: List[_Record] = []
        self.params: Dict[str, Tensor] = {}

    def __len__(self) -> int:
        return len(self._records)

    def _push(self, inputs, backward) -> int:
        self._records.append(_Record(tuple(inputs), backward))
        return len(self._records) - 1

    def variable(self, data) -> "Tensor":
        """Leaf tensor whose gradient will be reported by :func:`backward`."""
        arr = np.array(data, dtype=self.dtype, copy=True)
        if not self.record:
            return Tensor(arr)
        return Tensor(arr, tape=self, node=self._push((), None))

    def constant(self, data) -> "Tensor":
        return Tensor(np.asarray(data, dtype=self.dtype))

    def param(self, name: str, data, trainable: bool = True) -> "Tensor":
        """Variable for a named model parameter, created once per tape."""
        t = self.params.get(name)
        if t is None:
            t = self.variable(data) if trainable else self.constant(data)
            self.params[name] = t
        return t


class Tensor:
    """Dense array plus optional linkage into a :class:`Tape`.

    Feature maps are (batch, height, width, channels). Parameter tensors keep
    their natural rank (a bias is 1-D, a kernel is 4-D).
    """

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Optional[Tape] = None, node: Optional[int] = None):
        if not isinstance(data, np.ndarray) or data.dtype not in (np.float32, np.float64):
            data = np.asarray(data, dtype=np.float32)
        self.data = data
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)


def _result(out: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    tape = next((t.tape for t in inputs if t.node is not None), None)
    if tape is None or not tape.record:
        return Tensor(out)
    if any(t.node is not None and t.tape is not tape for t in inputs):
        raise ValueError("operation mixes tensors recorded on different tapes")
    node = tape._push([t.node for t in inputs], backward)
    return Tensor(out, tape=tape, node=node)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _require_4d(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what} expects a 4-D NHWC tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def scale(x: Tensor, s) -> Tensor:
    """``s * x`` for a scalar ``s`` (a float or a single-element tensor)."""
    s = _as_tensor(s)
    if s.data.size != 1:
        raise ShapeError(f"scale: expected a scalar, got shape {s.shape}")
    sv = s.data.reshape(())
    xd = x.data

    def backward(g):
        return g * sv, np.asarray(np.sum(g * xd), dtype=g.dtype).reshape(s.shape)

    return _result(xd * sv, (x, s), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * sign,))


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    """Product of ``a`` with ``b`` of equal shape or a (batch, 1, 1, C) channel vector."""
    _require_4d(a, "mul_elementwise")
    _require_4d(b, "mul_elementwise")
    if b.shape != a.shape:
        n, _, _, c = a.shape
        if b.shape[1:3] != (1, 1) or b.shape[3] != c or b.shape[0] not in (1, n):
            raise ShapeError(f"mul_elementwise: cannot broadcast {b.shape} onto {a.shape}")
    ad, bd = a.data, b.data
    broadcast = b.shape != a.shape

    def backward(g):
        gb = g * ad
        if broadcast:
            gb = gb.sum(axis=(1, 2), keepdims=True)
            if bd.shape[0] == 1:
                gb = gb.sum(axis=0, keepdims=True)
        return g * bd, gb

    return _result(ad * bd, (a, b), backward)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    for x in xs:
        _require_4d(x, "concat_channels")
        if x.shape[:3] != xs[0].shape[:3]:
            raise ShapeError(f"concat_channels: spatial mismatch {x.shape} vs {xs[0].shape}")
    if len(xs) == 1:
        return _result(xs[0].data.copy(), xs, lambda g: (g,))
    bounds = np.cumsum([0] + [x.shape[3] for x in xs])

    def backward(g):
        return [g[..., bounds[i]:bounds[i + 1]] for i in range(len(xs))]

    return _result(np.concatenate([x.data for x in xs], axis=3), xs, backward)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# reductions


def sum_(x: Tensor) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(), dtype=x.data.dtype).reshape(1, 1, 1, 1)
    return _result(out, (x,), lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    out = np.asarray(x.data.mean(), dtype=x.data.dtype).reshape(1, 1, 1, 1)
    return _result(out, (x,), lambda g: (np.full(shape, g.reshape(()) / n, dtype=g.dtype),))


# ---------------------------------------------------------------------------
# gradients


def backward(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns gradients of all leaf nodes."""
    if loss.data.size != 1 or loss.data.ndim != 4:
        raise ShapeError(f"backward: loss must have shape (1, 1, 1, 1), got {loss.shape}")
    if loss.node is None or loss.tape is not tape:
        raise ValueError("backward: loss is not recorded on this tape")
    grads: Dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    leaves: Dict[int, np.ndarray] = {}
    for node in range(loss.node, -1, -1):
        g = grads.pop(node, None)
        if g is None:
            continue
        rec = tape._records[node]
        if rec.backward is None:
            leaves[node] = g
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if inp is None or gi is None:
                continue
            if inp in grads:
                grads[inp] = grads[inp] + gi
            else:
                grads[inp] = gi
    return leaves


def grad_check(f: Callable[..., Tensor], *xs: np.ndarray, eps: float = 1e-5,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` receives one tensor per array in ``xs`` and must return a scalar
    tensor. Analytic gradients come from a double-mode tape. With
    ``max_coords`` only that many randomly chosen coordinates per input are
    probed.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    tape = Tape("double")
    vs = [tape.variable(x) for x in xs]
    out = f(*vs)
    grads = backward(tape, out)
    rng = np.random.default_rng(seed)

    def evaluate(arrays) -> float:
        t = Tape("double", record=False)
        return float(f(*[t.constant(a) for a in arrays]).data.reshape(()))

    worst = 0.0
    for i, x in enumerate(xs):
        analytic = grads.get(vs[i].node, np.zeros_like(x))
        coords = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            coords = rng.choice(x.size, size=max_coords, replace=False)
        for k in coords:
            idx = np.unravel_index(k, x.shape)
            probe = [a.copy() for a in xs]
            probe[i][idx] = x[idx] + eps
            hi = evaluate(probe)
            probe[i][idx] = x[idx] - eps
            lo = evaluate(probe)
            num = (hi - lo) / (2 * eps)
            a = float(analytic[idx])
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
    return worst
