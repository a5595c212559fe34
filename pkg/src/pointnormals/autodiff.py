"""Reverse-mode automatic differentiation over dense float64 arrays.

A dynamic tape records each operation as it executes; `Tape.backward` replays
the records in exact reverse creation order and accumulates gradients into a
node-id -> array map. Matrix operands are 2-D, batched operands 3-D with the
batch as the leading axis; feature axes are always last.
"""

from __future__ import annotations

import numpy as np

NORM_FLOOR = 1e-12


class Tensor:
    """Value node on a tape: float64 array, node id, and a gradient slot."""

    __slots__ = ("values", "node_id", "requires_grad", "tape")

    def __init__(self, values: np.ndarray, node_id: int, requires_grad: bool, tape: "Tape"):
        self.values = values
        self.node_id = node_id
        self.requires_grad = requires_grad
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def grad(self) -> np.ndarray | None:
        """Gradient from the most recent backward pass, or None."""
        return self.tape.grads.get(self.node_id)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, node_id={self.node_id})"


class Tape:
    """Ordered operation record; single-threaded builder and backward sweep.

    With check_finite=True (the default) every forward result is verified
    finite, so NaN/Inf surfaces at the op that produced it. Hot loops may
    disable the guard and check their loss explicitly.
    """

    def __init__(self, check_finite: bool = True):
        self.check_finite = check_finite
        self._ops: list[tuple[int, tuple[tuple[int, bool], ...], object]] = []
        self._next_id = 0
        self.grads: dict[int, np.ndarray] = {}

    def tensor(self, values, requires_grad: bool = False) -> Tensor:
        """New leaf holding a float64 copy of `values`."""
        arr = np.array(values, dtype=np.float64)
        if self.check_finite and not np.isfinite(arr).all():
            raise FloatingPointError("leaf tensor contains non-finite values")
        t = Tensor(arr, self._next_id, requires_grad, self)
        self._next_id += 1
        return t

    def constant(self, values) -> Tensor:
        return self.tensor(values, requires_grad=False)

    def _record(self, values: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
        if self.check_finite and not np.isfinite(values).all():
            raise FloatingPointError("forward op produced non-finite values")
        requires_grad = any(t.requires_grad for t in inputs)
        out = Tensor(values, self._next_id, requires_grad, self)
        self._next_id += 1
        if requires_grad:
            meta = tuple((t.node_id, t.requires_grad) for t in inputs)
            self._ops.append((out.node_id, meta, backward))
        return out

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar loss; returns node_id -> gradient."""
        if loss.tape is not self:
            raise ValueError("loss lives on a different tape")
        if loss.values.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.values.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.values)}
        for out_id, inputs, backward_fn in reversed(self._ops):
            grad_out = grads.get(out_id)
            if grad_out is None:
                continue
            input_grads = backward_fn(grad_out)
            for (node_id, needs_grad), g in zip(inputs, input_grads):
                if not needs_grad or g is None:
                    continue
                acc = grads.get(node_id)
                # out-of-place accumulation: backward fns may alias grad_out
                grads[node_id] = g if acc is None else acc + g
        self.grads = grads
        return grads


def _same_tape(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ValueError("operands live on different tapes")
    return tape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the last two axes: 2Dx2D, 3Dx3D (batched), or 3Dx2D
    (shared right operand, e.g. a weight matrix applied per batch)."""
    tape = _same_tape(a, b)
    av, bv = a.values, b.values
    if av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise ValueError(f"matmul inner dims disagree: {av.shape} @ {bv.shape}")
    if (av.ndim, bv.ndim) == (2, 2):
        def backward(g):
            return g @ bv.T, av.T @ g
    elif (av.ndim, bv.ndim) == (3, 3):
        if av.shape[0] != bv.shape[0]:
            raise ValueError(f"batch dims disagree: {av.shape} @ {bv.shape}")
        def backward(g):
            return g @ bv.transpose(0, 2, 1), av.transpose(0, 2, 1) @ g
    elif (av.ndim, bv.ndim) == (3, 2):
        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            da = (g2 @ bv.T).reshape(av.shape)
            db = av.reshape(-1, av.shape[-1]).T @ g2
            return da, db
        # one large GEMM instead of a batch loop; same row-wise dot products
        flat = av.reshape(-1, av.shape[-1]) @ bv
        return tape._record(
            flat.reshape(av.shape[:2] + (bv.shape[1],)), (a, b), backward
        )
    else:
        raise ValueError(f"unsupported matmul ranks: {av.ndim}D @ {bv.ndim}D")
    return tape._record(av @ bv, (a, b), backward)


def _binary(a: Tensor, b: Tensor):
    tape = _same_tape(a, b)
    if a.values.shape != b.values.shape:
        raise ValueError(f"shape mismatch: {a.values.shape} vs {b.values.shape}")
    return tape


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _binary(a, b)
    return tape._record(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _binary(a, b)
    return tape._record(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _binary(a, b)
    av, bv = a.values, b.values
    return tape._record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.tape._record(a.values * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0.0  # gradient is zero at exactly 0
    return a.tape._record(a.values * mask, (a,), lambda g: (g * mask,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with a 1-D bias broadcast over all leading axes."""
    tape = _same_tape(x, b)
    if b.values.ndim != 1 or x.values.shape[-1] != b.values.shape[0]:
        raise ValueError(f"bias {b.values.shape} does not match {x.values.shape}")
    lead = tuple(range(x.values.ndim - 1))
    return tape._record(
        x.values + b.values, (x, b), lambda g: (g, g.sum(axis=lead))
    )


def concat(tensors: list[Tensor]) -> Tensor:
    """Concatenate along the feature (last) axis."""
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    tape = _same_tape(*tensors)
    lead = tensors[0].values.shape[:-1]
    for t in tensors[1:]:
        if t.values.shape[:-1] != lead:
            raise ValueError("concat operands disagree on leading dimensions")
    sizes = [t.values.shape[-1] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        # views are fine: gradient accumulation never mutates in place
        return tuple(np.split(g, splits, axis=-1))

    return tape._record(
        np.concatenate([t.values for t in tensors], axis=-1), tuple(tensors), backward
    )


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice of the feature axis; backward zero-pads."""
    xv = x.values

    def backward(g):
        dx = np.zeros_like(xv)
        dx[..., start:stop] = g
        return (dx,)

    return x.tape._record(np.ascontiguousarray(xv[..., start:stop]), (x,), backward)


def transpose_last2(x: Tensor) -> Tensor:
    return x.tape._record(
        np.ascontiguousarray(x.values.swapaxes(-1, -2)),
        (x,),
        lambda g: (g.swapaxes(-1, -2),),
    )


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.values.shape
    return x.tape._record(
        x.values.reshape(shape).copy(), (x,), lambda g: (g.reshape(old),)
    )


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds (duplicates allowed)."""
    idx = np.asarray(idx, dtype=np.int64)
    xv = x.values
    if xv.ndim != 2 or idx.ndim != 1:
        raise ValueError("gather_rows expects a 2-D tensor and 1-D indices")
    if idx.min(initial=0) < 0 or idx.max(initial=-1) >= xv.shape[0]:
        raise IndexError("gather index out of range")

    def backward(g):
        dx = np.zeros_like(xv)
        np.add.at(dx, idx, g)
        return (dx,)

    return x.tape._record(xv[idx], (x,), backward)


def gather_nodes(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-batch row gather: x is (B, n, F), idx is (B, m) -> (B, m, F)."""
    idx = np.asarray(idx, dtype=np.int64)
    xv = x.values
    if xv.ndim != 3 or idx.ndim != 2 or idx.shape[0] != xv.shape[0]:
        raise ValueError(
            f"gather_nodes expects (B, n, F) and (B, m), got {xv.shape} and {idx.shape}"
        )
    if idx.min() < 0 or idx.max() >= xv.shape[1]:
        raise IndexError("gather index out of range")
    batch_idx = np.arange(xv.shape[0])[:, None]

    def backward(g):
        dx = np.zeros_like(xv)
        np.add.at(dx, (batch_idx, idx), g)
        return (dx,)

    return x.tape._record(xv[batch_idx, idx], (x,), backward)


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Max over one axis; gradient flows to the first occurrence of the max."""
    xv = x.values
    if xv.shape[axis] < 1:
        raise ValueError("cannot reduce over an empty axis")

    def backward(g):
        argmax = np.argmax(xv, axis=axis)  # first occurrence on ties
        dx = np.zeros_like(xv)
        np.put_along_axis(
            dx, np.expand_dims(argmax, axis), np.expand_dims(g, axis), axis
        )
        return (dx,)

    return x.tape._record(np.max(xv, axis=axis), (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis with max-subtraction stabilization."""
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return x.tape._record(s, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis, then apply the learned affine."""
    tape = _same_tape(x, gamma, beta)
    f = x.values.shape[-1]
    if gamma.values.shape != (f,) or beta.values.shape != (f,):
        raise ValueError("gamma/beta must be 1-D of the feature size")
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gamma.values
    lead = tuple(range(x.values.ndim - 1))

    def backward(g):
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gv
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return tape._record(gv * xhat + beta.values, (x, gamma, beta), backward)


def broadcast_rows(x: Tensor, n: int) -> Tensor:
    """Repeat a (..., 1, F) tensor n times along the row axis."""
    xv = x.values
    if xv.shape[-2] != 1:
        raise ValueError(f"expected a singleton row axis, got {xv.shape}")
    out = np.broadcast_to(xv, xv.shape[:-2] + (n, xv.shape[-1])).copy()
    return x.tape._record(out, (x,), lambda g: (g.sum(axis=-2, keepdims=True),))


def repeat_rows(x: Tensor, times: int) -> Tensor:
    """Repeat each row of a (B, k, F) tensor `times` times consecutively,
    giving (B, k*times, F); the gradient is a plain sum over each group."""
    xv = x.values
    if xv.ndim != 3:
        raise ValueError(f"repeat_rows expects a 3-D tensor, got {xv.shape}")
    b, k, f = xv.shape

    def backward(g):
        return (g.reshape(b, k, times, f).sum(axis=2),)

    return x.tape._record(np.repeat(xv, times, axis=1), (x,), backward)


def cross_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise 3-D cross product on the last axis."""
    tape = _binary(a, b)
    av, bv = a.values, b.values
    if av.shape[-1] != 3:
        raise ValueError("cross_rows requires a trailing axis of size 3")
    return tape._record(
        np.cross(av, bv), (a, b), lambda g: (np.cross(bv, g), np.cross(g, av))
    )


def norm_rows(x: Tensor) -> Tensor:
    """Euclidean norm of the last axis (shape drops the trailing axis)."""
    xv = x.values
    n = np.sqrt((xv * xv).sum(axis=-1))
    safe = np.maximum(n, NORM_FLOOR)

    def backward(g):
        return ((g / safe)[..., None] * xv,)

    return x.tape._record(n, (x,), backward)


def normalize_rows(x: Tensor) -> Tensor:
    """Scale each last-axis vector to unit length (denominator floored at 1e-12)."""
    xv = x.values
    n = np.sqrt((xv * xv).sum(axis=-1, keepdims=True))
    d = np.maximum(n, NORM_FLOOR)
    y = xv / d

    def backward(g):
        live = n > NORM_FLOOR  # below the floor the denominator is constant
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(live, (g - y * dot) / d, g / d),)

    return x.tape._record(y, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.values.shape
    return x.tape._record(
        np.asarray(x.values.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),)
    )


def mean_all(x: Tensor) -> Tensor:
    shape = x.values.shape
    size = x.values.size
    return x.tape._record(
        np.asarray(x.values.mean()),
        (x,),
        lambda g: (np.broadcast_to(g / size, shape).copy(),),
    )


def finite_difference_check(f, params: dict[str, np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    `f(tape, tensors)` must build and return a scalar Tensor from the given
    leaf tensors (one per entry of `params`) and be deterministic. The
    relative error denominator is max(|analytic|, |numeric|, 1e-8). Non-smooth
    points (relu kinks, max-pool ties) are the caller's responsibility: nudge
    inputs away from them.
    """
    tape = Tape()
    tensors = {k: tape.tensor(v, requires_grad=True) for k, v in params.items()}
    loss = f(tape, tensors)
    tape.backward(loss)
    analytic = {
        k: (t.grad if t.grad is not None else np.zeros_like(t.values))
        for k, t in tensors.items()
    }

    def value_at(p: dict[str, np.ndarray]) -> float:
        eval_tape = Tape(check_finite=False)
        leaves = {k: eval_tape.tensor(v) for k, v in p.items()}
        return float(f(eval_tape, leaves).values)

    worst = 0.0
    work = {k: v.copy() for k, v in params.items()}
    for name, base in params.items():
        flat = work[name].ravel()
        an = analytic[name].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = value_at(work)
            flat[i] = orig - h
            down = value_at(work)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(an[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(an[i] - numeric) / denom)
    return worst
