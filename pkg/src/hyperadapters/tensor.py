"""Dense float tensors with a reverse-mode gradient tape.

Tensors wrap row-major numpy arrays (float32 by default; float64 is
accepted for oracle-style checks). Operations executed inside a
``with Tape() as tape:`` block record the backward rule for any output
whose inputs require gradients; ``backward(loss, tape)`` then walks the
tape once in reverse and accumulates ``.grad`` on every tensor that
requires one. Gradients are never zeroed implicitly — call
``Tensor.zero_grad`` (the trainer does this between steps), and a second
backward pass without a reset adds another full contribution.

Broadcasting support is deliberately limited to what the model needs:
elementwise add/mul with numpy-broadcastable shapes, matmul of 2D/3D
operands, and a handful of shape ops.
"""

from __future__ import annotations

import numpy as np

from . import _kernels as K


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class DegenerateInputError(ValueError):
    """Input is structurally empty (e.g. every pooled position masked)."""


_DTYPES = (np.float32, np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _DTYPES:
                dtype = data.dtype
            else:
                dtype = np.float32
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive ops; inputs always precede their node."""

    _stack: list["Tape"] = []
    _next_id = 0

    def __init__(self):
        self.nodes: list[_Node] = []
        self.tensors: list[Tensor] = []
        Tape._next_id += 1
        self.tape_id = Tape._next_id

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = Tape._stack.pop()
        assert popped is self
        return False

    def _register(self, t: Tensor) -> int:
        if t.node_id is not None and t.node_id[0] == self.tape_id:
            return t.node_id[1]
        idx = len(self.tensors)
        self.tensors.append(t)
        t.node_id = (self.tape_id, idx)
        return idx

    def add(self, inputs, output, backward_fn):
        for t in inputs:
            if t.requires_grad:
                self._register(t)
        self._register(output)
        self.nodes.append(_Node(inputs, output, backward_fn))


def _active_tape():
    return Tape._stack[-1] if Tape._stack else None


def _record(output: Tensor, inputs, backward_fn) -> Tensor:
    if any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape = _active_tape()
        if tape is not None:
            tape.add(tuple(inputs), output, backward_fn)
    return output


def backward(loss: Tensor, tape: Tape):
    """Populate ``.grad`` on every requires_grad tensor reachable from loss.

    Contributions accumulate additively, both across fan-out within this
    call and across repeated calls on the same tape.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node_id is None or loss.node_id[0] != tape.tape_id:
        raise ValueError("loss tensor is not recorded on this tape")

    flows: dict[int, np.ndarray] = {loss.node_id[1]: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        gy = flows.pop(node.output.node_id[1], None)
        if gy is None:
            continue
        if node.output.requires_grad:
            _accumulate_grad(node.output, gy)
        for t, g in zip(node.inputs, node.backward_fn(gy)):
            if g is None or not t.requires_grad:
                continue
            idx = t.node_id[1]
            if idx in flows:
                flows[idx] = flows[idx] + g
            else:
                flows[idx] = g
    # whatever is left never had a producing node: these are the leaves
    for idx, g in flows.items():
        t = tape.tensors[idx]
        if t.requires_grad:
            _accumulate_grad(t, g)


def _accumulate_grad(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return np.ascontiguousarray(g)


def _check_binary(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(gy):
        return _unbroadcast(gy, a.shape), _unbroadcast(gy, b.shape)

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bwd(gy):
        return _unbroadcast(gy, a.shape), _unbroadcast(-gy, b.shape)

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd(gy):
        return _unbroadcast(gy * b.data, a.shape), _unbroadcast(gy * a.data, b.shape)

    return _record(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)

    def bwd(gy):
        return (gy * c,)

    return _record(out, (a,), bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(K.relu_fwd(x.data))

    def bwd(gy):
        return (K.relu_bwd(x.data, gy),)

    return _record(out, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def bwd(gy):
        return (np.full_like(x.data, gy.reshape(())),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for the layouts the model uses.

    [m,k]@[k,n], [B,m,k]@[k,n] (folded) and [B,m,k]@[B,k,n] (batched).
    """
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
        out = Tensor(a.data @ b.data)

        def bwd(gy):
            ga = gy @ b.data.T if a.requires_grad else None
            gb = a.data.T @ gy if b.requires_grad else None
            return ga, gb

        return _record(out, (a, b), bwd)

    if a.ndim == 3 and b.ndim == 2:
        if a.shape[2] != b.shape[0]:
            raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
        bsz, m, k = a.shape
        out = Tensor((a.data.reshape(bsz * m, k) @ b.data).reshape(bsz, m, b.shape[1]))

        def bwd(gy):
            g2 = gy.reshape(bsz * m, b.shape[1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a.data.reshape(bsz * m, k).T @ g2 if b.requires_grad else None
            return ga, gb

        return _record(out, (a, b), bwd)

    if a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: batched shapes incompatible, {a.shape} @ {b.shape}")
        out = Tensor(np.matmul(a.data, b.data))

        def bwd(gy):
            ga = np.matmul(gy, b.data.transpose(0, 2, 1)) if a.requires_grad else None
            gb = np.matmul(a.data.transpose(0, 2, 1), gy) if b.requires_grad else None
            return ga, gb

        return _record(out, (a, b), bwd)

    raise ShapeError(f"matmul: unsupported ranks, {a.shape} @ {b.shape}")


# ---------------------------------------------------------------------------
# normalization / softmax / loss


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({d},) for input {x.shape}"
        )
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    x2 = x.data.reshape(-1, d)
    y2, mean, rstd = K.layer_norm_fwd(x2, gain.data, bias.data, eps)
    out = Tensor(y2.reshape(x.shape))

    def bwd(gy):
        gx2, ggain, gbias = K.layer_norm_bwd(x2, mean, rstd, gain.data, gy.reshape(-1, d))
        return (
            gx2.reshape(x.shape) if x.requires_grad else None,
            ggain if gain.requires_grad else None,
            gbias if bias.requires_grad else None,
        )

    return _record(out, (x, gain, bias), bwd)


def softmax(x: Tensor) -> Tensor:
    d = x.shape[-1]
    y2 = K.softmax_fwd(x.data.reshape(-1, d))
    out = Tensor(y2.reshape(x.shape))

    def bwd(gy):
        return (K.softmax_bwd(y2, gy.reshape(-1, d)).reshape(x.shape),)

    return _record(out, (x,), bwd)


def softmax_cross_entropy(logits: Tensor, targets, ignore_id: int) -> Tensor:
    """Mean negative log-likelihood over positions whose target != ignore_id.

    All-ignored batches yield loss 0 with zero gradient, so padded batches
    never produce NaN.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2D, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: targets {targets.shape} must be ({logits.shape[0]},)"
        )
    v = logits.shape[1]
    bad = targets[(targets != ignore_id) & ((targets < 0) | (targets >= v))]
    if bad.size:
        raise IndexError(f"softmax_cross_entropy: target id {bad[0]} outside vocab of {v}")
    loss, probs, n_kept = K.cross_entropy_fwd(logits.data, targets, ignore_id)
    out = Tensor(np.asarray(loss, dtype=logits.dtype))

    def bwd(gy):
        g = K.cross_entropy_bwd(probs, targets, ignore_id, n_kept, float(gy.reshape(())))
        return (g,)

    return _record(out, (logits,), bwd)


def mean_pool(x: Tensor, mask=None) -> Tensor:
    """Mean over unmasked rows: [n,d]->[d] or batched [B,n,d]->[B,d].

    mask is a boolean array marking rows to keep (None keeps all).
    """
    if x.ndim == 2:
        n, d = x.shape
        keep = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if keep.shape != (n,):
            raise ShapeError(f"mean_pool: mask {keep.shape} must be ({n},)")
        count = int(keep.sum())
        if count == 0:
            raise DegenerateInputError("mean_pool: every position is masked")
        out = Tensor(x.data[keep].mean(axis=0))

        def bwd(gy):
            gx = np.zeros_like(x.data)
            gx[keep] = gy / count
            return (gx,)

        return _record(out, (x,), bwd)

    if x.ndim == 3:
        bsz, n, d = x.shape
        keep = np.ones((bsz, n), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if keep.shape != (bsz, n):
            raise ShapeError(f"mean_pool: mask {keep.shape} must be ({bsz}, {n})")
        counts = keep.sum(axis=1)
        if (counts == 0).any():
            raise DegenerateInputError("mean_pool: a batch row has every position masked")
        kf = keep.astype(x.dtype)
        out = Tensor((x.data * kf[:, :, None]).sum(axis=1) / counts[:, None].astype(x.dtype))

        def bwd(gy):
            gx = kf[:, :, None] * (gy / counts[:, None].astype(x.dtype))[:, None, :]
            return (np.ascontiguousarray(gx),)

        return _record(out, (x,), bwd)

    raise ShapeError(f"mean_pool: rank must be 2 or 3, got {x.shape}")


# ---------------------------------------------------------------------------
# shape / indexing


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def bwd(gy):
        return (gy.reshape(x.shape),)

    return _record(out, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))

    def bwd(gy):
        return (np.ascontiguousarray(gy.transpose(inv)),)

    return _record(out, (x,), bwd)


def concat(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    out = Tensor(np.concatenate([a.data, b.data], axis=axis))
    split = a.shape[axis]

    def bwd(gy):
        ga, gb = np.split(gy, [split], axis=axis)
        return np.ascontiguousarray(ga), np.ascontiguousarray(gb)

    return _record(out, (a, b), bwd)


def broadcast_rows(x: Tensor, n: int) -> Tensor:
    """Repeat a 1D tensor into n rows; gradient sums back over rows."""
    if x.ndim != 1:
        raise ShapeError(f"broadcast_rows: need a 1D tensor, got {x.shape}")
    out = Tensor(np.broadcast_to(x.data, (n, x.shape[0])).copy())

    def bwd(gy):
        return (gy.sum(axis=0),)

    return _record(out, (x,), bwd)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim < 1 or stop > x.shape[0] or start < 0:
        raise ShapeError(f"slice_rows: [{start}:{stop}] outside tensor {x.shape}")
    out = Tensor(x.data[start:stop].copy())

    def bwd(gy):
        gx = np.zeros_like(x.data)
        gx[start:stop] = gy
        return (gx,)

    return _record(out, (x,), bwd)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; gradient scatter-adds back into it."""
    ids = np.asarray(ids, dtype=np.int64)
    if (ids < 0).any() or (ids >= table.shape[0]).any():
        raise IndexError(f"embedding: id outside table of {table.shape[0]} rows")
    out = Tensor(table.data[ids])

    def bwd(gy):
        if not table.requires_grad:
            return (None,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), gy.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(out, (table,), bwd)
