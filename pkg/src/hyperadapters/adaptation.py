"""Adapter layers and the hypernetworks that generate them.

Two conditioning flavours share one core: an input-conditioned
hypernetwork that consumes the pooled encoder output (optionally through
a two-layer MLP), and a task-conditioned baseline that consumes a learnt
per-task embedding instead. Either way a learnt layer embedding is
concatenated onto the conditioning vector so a single hypernetwork
serves every layer on its side.

Initialisation contract (verified by tests):
  * a directly-learnt adapter starts near the identity map:
    down-projection fan-in uniform (variance 1/d), up-projection at the
    small UP_SCALE variance, biases zero — small enough not to disturb
    the frozen model, non-zero so every gradient path is live;
  * generated adapters match that at step 0: the two weight heads are
    variance-scaled so the emitted projections land at the same 1/d and
    UP_SCALE^2 scales, and the bias heads start at zero so generated
    biases are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class AdapterParams:
    """Bottleneck adapter: up(relu(down(x))). Arrays are (d,a)/(a,)/(a,d)/(d,)
    when shared, or carry a leading batch axis when generated per example."""

    w_down: Tensor
    b_down: Tensor
    w_up: Tensor
    b_up: Tensor

    def named(self, prefix):
        yield f"{prefix}.w_down", self.w_down
        yield f"{prefix}.b_down", self.b_down
        yield f"{prefix}.w_up", self.w_up
        yield f"{prefix}.b_up", self.b_up


@dataclass
class HypernetCore:
    """Shared two-layer generator: bottleneck + four output heads."""

    w_in: Tensor        # (cond_dim + e_l, b)
    b_in: Tensor        # (b,)
    w_up_head: Tensor   # (b, a*d) -> W_up, reshaped (a, d)
    b_up_head: Tensor
    w_down_head: Tensor  # (b, d*a) -> W_down, reshaped (d, a)
    b_down_head: Tensor
    bias_up_head_w: Tensor    # (b, d) -> b_up
    bias_up_head_b: Tensor
    bias_down_head_w: Tensor  # (b, a) -> b_down
    bias_down_head_b: Tensor
    layer_embeds: Tensor      # (n_layers, e_l)
    adapter_dim: int
    d_model: int

    def named(self, prefix):
        yield f"{prefix}.w_in", self.w_in
        yield f"{prefix}.b_in", self.b_in
        yield f"{prefix}.w_up_head", self.w_up_head
        yield f"{prefix}.b_up_head", self.b_up_head
        yield f"{prefix}.w_down_head", self.w_down_head
        yield f"{prefix}.b_down_head", self.b_down_head
        yield f"{prefix}.bias_up_head_w", self.bias_up_head_w
        yield f"{prefix}.bias_up_head_b", self.bias_up_head_b
        yield f"{prefix}.bias_down_head_w", self.bias_down_head_w
        yield f"{prefix}.bias_down_head_b", self.bias_down_head_b
        yield f"{prefix}.layer_embeds", self.layer_embeds


@dataclass
class InputHypernet:
    """Generates adapters from the mean-pooled hidden states of the encoder."""

    pool_w1: Tensor  # (d, d)
    pool_b1: Tensor
    pool_w2: Tensor  # (d, d)
    pool_b2: Tensor
    core: HypernetCore

    def named(self, prefix):
        yield f"{prefix}.pool_w1", self.pool_w1
        yield f"{prefix}.pool_b1", self.pool_b1
        yield f"{prefix}.pool_w2", self.pool_w2
        yield f"{prefix}.pool_b2", self.pool_b2
        yield from self.core.named(f"{prefix}.core")


@dataclass
class TaskHypernet:
    """Generates adapters from a learnt per-task embedding (one table per side)."""

    task_embeds: Tensor  # (n_tasks, e_t)
    core: HypernetCore

    def named(self, prefix):
        yield f"{prefix}.task_embeds", self.task_embeds
        yield from self.core.named(f"{prefix}.core")


# ---------------------------------------------------------------------------
# forward


def adapter_forward(x: Tensor, p: AdapterParams) -> Tensor:
    """w_up @ relu(w_down @ x + b_down) + b_up, applied row-wise.

    Accepts x of rank 1..3; per-example parameter stacks (leading batch
    axis) require a rank-3 x with a matching batch.
    """
    squeeze = x.ndim == 1
    if squeeze:
        x = T.reshape(x, (1, x.shape[0]))
    if x.shape[-1] != p.w_down.shape[-2]:
        raise T.ShapeError(
            f"adapter_forward: input {x.shape} does not match down-projection {p.w_down.shape}"
        )
    if p.w_down.ndim == 3:
        b_down = T.reshape(p.b_down, (p.b_down.shape[0], 1, p.b_down.shape[1]))
        b_up = T.reshape(p.b_up, (p.b_up.shape[0], 1, p.b_up.shape[1]))
    else:
        b_down, b_up = p.b_down, p.b_up
    h = T.relu(T.add(T.matmul(x, p.w_down), b_down))
    out = T.add(T.matmul(h, p.w_up), b_up)
    if squeeze:
        out = T.reshape(out, (out.shape[-1],))
    return out


def pool_embed(enc_h: Tensor, mask, hyper: InputHypernet, use_mlp: bool) -> Tensor:
    """Mean over unmasked positions, optionally refined by the pooling MLP."""
    e = T.mean_pool(enc_h, mask)
    if not use_mlp:
        return e
    squeeze = e.ndim == 1
    if squeeze:
        e = T.reshape(e, (1, e.shape[0]))
    h = T.relu(T.add(T.matmul(e, hyper.pool_w1), hyper.pool_b1))
    e = T.add(T.matmul(h, hyper.pool_w2), hyper.pool_b2)
    if squeeze:
        e = T.reshape(e, (e.shape[-1],))
    return e


def hypernet_generate(e: Tensor, layer_embed: Tensor, core: HypernetCore) -> AdapterParams:
    """Emit one adapter from conditioning vector(s) e and a layer embedding.

    e may be (cond_dim,) for a single adapter or (B, cond_dim) for a
    per-example stack. Identical inputs produce bit-identical output.
    """
    squeeze = e.ndim == 1
    if squeeze:
        e = T.reshape(e, (1, e.shape[0]))
    bsz = e.shape[0]
    a, d = core.adapter_dim, core.d_model
    x = T.concat(e, T.broadcast_rows(layer_embed, bsz), axis=-1)
    if x.shape[-1] != core.w_in.shape[0]:
        raise T.ShapeError(
            f"hypernet_generate: conditioning {x.shape} does not match first layer {core.w_in.shape}"
        )
    h = T.relu(T.add(T.matmul(x, core.w_in), core.b_in))
    w_up = T.reshape(T.add(T.matmul(h, core.w_up_head), core.b_up_head), (bsz, a, d))
    w_down = T.reshape(T.add(T.matmul(h, core.w_down_head), core.b_down_head), (bsz, d, a))
    b_up = T.add(T.matmul(h, core.bias_up_head_w), core.bias_up_head_b)
    b_down = T.add(T.matmul(h, core.bias_down_head_w), core.bias_down_head_b)
    if squeeze:
        return AdapterParams(
            w_down=T.reshape(w_down, (d, a)),
            b_down=T.reshape(b_down, (a,)),
            w_up=T.reshape(w_up, (a, d)),
            b_up=T.reshape(b_up, (d,)),
        )
    return AdapterParams(w_down=w_down, b_down=b_down, w_up=w_up, b_up=b_up)


def generate_adapters_from_input(enc_h, mask, hyper: InputHypernet, use_mlp: bool):
    """One AdapterParams per layer, each per-example when enc_h is batched."""
    e = pool_embed(enc_h, mask, hyper, use_mlp)
    n_layers = hyper.core.layer_embeds.shape[0]
    out = []
    for i in range(n_layers):
        le = T.reshape(T.slice_rows(hyper.core.layer_embeds, i, i + 1), (-1,))
        out.append(hypernet_generate(e, le, hyper.core))
    return out


def generate_adapters_from_task(task_ids, hyper: TaskHypernet, use_mean_embedding=False):
    """One AdapterParams per layer, conditioned on the task embedding.

    ``use_mean_embedding`` replaces the per-task row with the arithmetic
    mean of the learnt table — the out-of-domain evaluation convention.
    """
    if use_mean_embedding:
        mean = T.mean_pool(hyper.task_embeds)
        bsz = len(np.atleast_1d(task_ids))
        emb = T.broadcast_rows(mean, bsz)
    else:
        ids = np.asarray(task_ids, dtype=np.int64)
        if (ids < 0).any() or (ids >= hyper.task_embeds.shape[0]).any():
            raise IndexError(
                f"task id outside table of {hyper.task_embeds.shape[0]} tasks"
            )
        emb = T.embedding(hyper.task_embeds, ids)
    n_layers = hyper.core.layer_embeds.shape[0]
    out = []
    for i in range(n_layers):
        le = T.reshape(T.slice_rows(hyper.core.layer_embeds, i, i + 1), (-1,))
        out.append(hypernet_generate(emb, le, hyper.core))
    return out


# ---------------------------------------------------------------------------
# construction / init


# std of a freshly initialised up-projection: small enough that a fresh
# adapter barely perturbs the frozen model, non-zero so every gradient
# path is live from step one
UP_SCALE = 5e-4
LAYER_EMBED_SCALE = 0.01


def _fan_in_uniform(rng, fan_in, shape, dtype):
    limit = np.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _uniform_with_var(rng, var, shape, dtype):
    limit = np.sqrt(3.0 * var)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_adapter(d, a, rng, dtype=np.float32) -> AdapterParams:
    return AdapterParams(
        w_down=Tensor(_fan_in_uniform(rng, d, (d, a), dtype), requires_grad=True),
        b_down=Tensor(np.zeros(a, dtype=dtype), requires_grad=True),
        w_up=Tensor(_uniform_with_var(rng, UP_SCALE**2, (a, d), dtype), requires_grad=True),
        b_up=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
    )


def init_manual_adapters(n_layers, d, a, rng, dtype=np.float32):
    return [init_adapter(d, a, rng, dtype) for _ in range(n_layers)]


def init_core(cond_dim, cond_second_moment, e_l, b, a, d, n_layers, rng, dtype=np.float32):
    """Build the shared generator.

    ``cond_second_moment`` is the per-entry second moment assumed for the
    conditioning vector (1/d for pooled encoder states, 1 for task
    embeddings). The weight heads are variance-scaled so the projections
    they emit match a directly initialised adapter: for a head with
    per-entry target variance t, Var(head) = t * 2 * in_dim / (b * s),
    where s is the total second moment of the concatenated conditioning
    input and the factor 2 undoes the ReLU's halving of it.
    """
    in_dim = cond_dim + e_l
    s = cond_dim * cond_second_moment + e_l * LAYER_EMBED_SCALE**2
    head_var = lambda target: target * 2.0 * in_dim / (b * s)  # noqa: E731

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    return HypernetCore(
        w_in=Tensor(_fan_in_uniform(rng, in_dim, (in_dim, b), dtype), requires_grad=True),
        b_in=zeros(b),
        w_up_head=Tensor(
            _uniform_with_var(rng, head_var(UP_SCALE**2), (b, a * d), dtype), requires_grad=True
        ),
        b_up_head=zeros(a * d),
        w_down_head=Tensor(
            _uniform_with_var(rng, head_var(1.0 / d), (b, d * a), dtype), requires_grad=True
        ),
        b_down_head=zeros(d * a),
        bias_up_head_w=zeros(b, d),
        bias_up_head_b=zeros(d),
        bias_down_head_w=zeros(b, a),
        bias_down_head_b=zeros(a),
        layer_embeds=Tensor(
            (rng.standard_normal((n_layers, e_l)) * LAYER_EMBED_SCALE).astype(dtype),
            requires_grad=True,
        ),
        adapter_dim=a,
        d_model=d,
    )


def init_input_hypernet(d, a, b, e_l, n_layers, rng, dtype=np.float32) -> InputHypernet:
    return InputHypernet(
        pool_w1=Tensor(_fan_in_uniform(rng, d, (d, d), dtype), requires_grad=True),
        pool_b1=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        pool_w2=Tensor(_fan_in_uniform(rng, d, (d, d), dtype), requires_grad=True),
        pool_b2=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        core=init_core(d, 1.0 / d, e_l, b, a, d, n_layers, rng, dtype),
    )


def init_task_hypernet(n_tasks, e_t, d, a, b, e_l, n_layers, rng, dtype=np.float32) -> TaskHypernet:
    return TaskHypernet(
        task_embeds=Tensor(rng.standard_normal((n_tasks, e_t)).astype(dtype), requires_grad=True),
        core=init_core(e_t, 1.0, e_l, b, a, d, n_layers, rng, dtype),
    )


def zero_generation_heads(core: HypernetCore):
    """Zero every output head: all generated adapters become the zero map,
    making the adapted model exactly equal to the unadapted one."""
    for t in (
        core.w_up_head,
        core.b_up_head,
        core.w_down_head,
        core.b_down_head,
        core.bias_up_head_w,
        core.bias_up_head_b,
        core.bias_down_head_w,
        core.bias_down_head_b,
    ):
        t.data[...] = 0.0
