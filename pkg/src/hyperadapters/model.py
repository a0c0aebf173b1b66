"""Encoder-decoder transformer with adapter hooks at every feed-forward.

Pre-layer-norm blocks with residual connections, learned absolute
positions, tied input/output embeddings. Each side (encoder, decoder)
carries an adaptation mode: none, manual (directly learnt adapters),
task (adapters generated from a learnt task embedding) or generated
(adapters generated from the pooled encoder output). The base weights
are plain frozen tensors unless the trainer marks them trainable.

"generated" on the encoder side uses a two-pass scheme: a first pass
without adapters produces the conditioning embedding, a second pass runs
with the generated adapters. The decoder side conditions on the final
encoder output.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from enum import Enum

import numpy as np

from . import tensor as T
from .adaptation import (
    InputHypernet,
    TaskHypernet,
    adapter_forward,
    generate_adapters_from_input,
    generate_adapters_from_task,
    init_input_hypernet,
    init_manual_adapters,
    init_task_hypernet,
    pool_embed,
)
from .tasks import BOS_ID, EOS_ID, PAD_ID
from .tensor import ShapeError, Tensor

NEG_INF = -1e9


class AdaptationMode(str, Enum):
    NONE = "none"
    MANUAL = "manual"
    TASK = "task"
    GENERATED = "generated"


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 48
    enc_adapter_dim: int = 8
    dec_adapter_dim: int = 8
    hypernet_bottleneck: int = 16
    layer_embed_dim: int = 8
    task_embed_dim: int = 8
    n_tasks: int = 1
    enc_mode: AdaptationMode = AdaptationMode.MANUAL
    dec_mode: AdaptationMode = AdaptationMode.GENERATED
    use_mlp: bool = True
    adapter_input_post_layernorm: bool = False

    def __post_init__(self):
        self.enc_mode = AdaptationMode(self.enc_mode)
        self.dec_mode = AdaptationMode(self.dec_mode)
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and not isinstance(v, bool) and v < 1:
                raise ValueError(f"ModelConfig.{f.name} must be >= 1, got {v}")
        if self.d_model % self.n_heads:
            raise ValueError(
                f"ModelConfig.d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )


@dataclass
class SideState:
    mode: AdaptationMode
    manual: list | None = None
    task: TaskHypernet | None = None
    gen: InputHypernet | None = None

    def named(self, prefix):
        if self.manual is not None:
            for i, p in enumerate(self.manual):
                yield from p.named(f"{prefix}.manual.{i}")
        if self.task is not None:
            yield from self.task.named(f"{prefix}.task")
        if self.gen is not None:
            yield from self.gen.named(f"{prefix}.gen")


def _glorot(rng, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def attention_core(q: Tensor, k: Tensor, v: Tensor, bias, n_heads: int, return_weights=False):
    """softmax(q kᵀ / sqrt(d_head) + bias) v per head, heads re-concatenated.

    q,k,v: (B, n, d); bias: additive numpy array broadcastable to the
    (B*heads, n_q, n_k) score matrix, or None. Output projection is the
    caller's job.
    """
    bsz, nq, d = q.shape
    nk = k.shape[1]
    if d % n_heads:
        raise ShapeError(f"attention_core: width {d} not divisible by {n_heads} heads")
    dh = d // n_heads

    def split(t, n):
        t = T.reshape(t, (bsz, n, n_heads, dh))
        t = T.transpose(t, (0, 2, 1, 3))
        return T.reshape(t, (bsz * n_heads, n, dh))

    qh, kh, vh = split(q, nq), split(k, nk), split(v, nk)
    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(dh))
    if bias is not None:
        bias = np.asarray(bias, dtype=scores.dtype)
        try:
            np.broadcast_shapes(bias.shape, scores.shape)
        except ValueError:
            raise ShapeError(
                f"attention_core: mask {bias.shape} does not broadcast to scores {scores.shape}"
            ) from None
        scores = T.add(scores, Tensor(bias))
    weights = T.softmax(scores)
    out = T.matmul(weights, vh)
    out = T.reshape(out, (bsz, n_heads, nq, dh))
    out = T.transpose(out, (0, 2, 1, 3))
    out = T.reshape(out, (bsz, nq, d))
    if return_weights:
        return out, weights
    return out


class Seq2SeqModel:
    def __init__(self, cfg: ModelConfig, rng=None, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = rng if rng is not None else np.random.default_rng(0)
        self.base: dict[str, Tensor] = {}
        self._init_base(rng)
        self.enc_side = self._init_side(cfg.enc_mode, cfg.n_enc_layers, cfg.enc_adapter_dim, rng)
        self.dec_side = self._init_side(cfg.dec_mode, cfg.n_dec_layers, cfg.dec_adapter_dim, rng)

    # -- parameters ---------------------------------------------------------

    def _init_base(self, rng):
        cfg, dt = self.cfg, self.dtype
        d, ff = cfg.d_model, cfg.d_ff

        def w(name, arr):
            self.base[name] = Tensor(arr, requires_grad=False)

        w("tok_embed", (rng.standard_normal((cfg.vocab_size, d)) * 0.02).astype(dt))
        w("pos_embed", (rng.standard_normal((cfg.max_len, d)) * 0.02).astype(dt))
        for side, n_layers, cross in (("enc", cfg.n_enc_layers, False), ("dec", cfg.n_dec_layers, True)):
            for i in range(n_layers):
                p = f"{side}.{i}"
                w(f"{p}.ln1.g", np.ones(d, dtype=dt))
                w(f"{p}.ln1.b", np.zeros(d, dtype=dt))
                for m in ("wq", "wk", "wv", "wo"):
                    w(f"{p}.attn.{m}", _glorot(rng, d, d, dt))
                if cross:
                    w(f"{p}.lnc.g", np.ones(d, dtype=dt))
                    w(f"{p}.lnc.b", np.zeros(d, dtype=dt))
                    for m in ("wq", "wk", "wv", "wo"):
                        w(f"{p}.cross.{m}", _glorot(rng, d, d, dt))
                w(f"{p}.ln2.g", np.ones(d, dtype=dt))
                w(f"{p}.ln2.b", np.zeros(d, dtype=dt))
                w(f"{p}.ff.w1", _glorot(rng, d, ff, dt))
                w(f"{p}.ff.b1", np.zeros(ff, dtype=dt))
                w(f"{p}.ff.w2", _glorot(rng, ff, d, dt))
                w(f"{p}.ff.b2", np.zeros(d, dtype=dt))
            w(f"{side}.ln_out.g", np.ones(d, dtype=dt))
            w(f"{side}.ln_out.b", np.zeros(d, dtype=dt))

    def _init_side(self, mode, n_layers, a, rng) -> SideState:
        cfg, dt = self.cfg, self.dtype
        if mode == AdaptationMode.MANUAL:
            return SideState(mode, manual=init_manual_adapters(n_layers, cfg.d_model, a, rng, dt))
        if mode == AdaptationMode.TASK:
            return SideState(
                mode,
                task=init_task_hypernet(
                    cfg.n_tasks, cfg.task_embed_dim, cfg.d_model, a,
                    cfg.hypernet_bottleneck, cfg.layer_embed_dim, n_layers, rng, dt,
                ),
            )
        if mode == AdaptationMode.GENERATED:
            return SideState(
                mode,
                gen=init_input_hypernet(
                    cfg.d_model, a, cfg.hypernet_bottleneck, cfg.layer_embed_dim,
                    n_layers, rng, dt,
                ),
            )
        return SideState(mode)

    def base_params(self):
        return dict(self.base)

    def adaptation_params(self):
        out = {}
        out.update(dict(self.enc_side.named("adapt.enc")))
        out.update(dict(self.dec_side.named("adapt.dec")))
        return out

    def named_params(self):
        out = {f"base.{k}": v for k, v in self.base.items()}
        out.update(self.adaptation_params())
        return out

    def state_dict(self):
        return {k: v.data for k, v in sorted(self.named_params().items())}

    def load_state_dict(self, arrays):
        params = self.named_params()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in params.items():
            if arrays[k].shape != t.data.shape:
                raise ShapeError(f"{k}: checkpoint shape {arrays[k].shape} != model {t.data.shape}")
            t.data = np.ascontiguousarray(arrays[k], dtype=t.data.dtype)

    # -- blocks -------------------------------------------------------------

    def _attn_sublayer(self, attn_prefix, ln_prefix, x, kv, bias):
        b = self.base
        h = T.layer_norm(x, b[f"{ln_prefix}.g"], b[f"{ln_prefix}.b"])
        src = h if kv is None else kv
        q = T.matmul(h, b[f"{attn_prefix}.wq"])
        k = T.matmul(src, b[f"{attn_prefix}.wk"])
        v = T.matmul(src, b[f"{attn_prefix}.wv"])
        core = attention_core(q, k, v, bias, self.cfg.n_heads)
        return T.add(x, T.matmul(core, b[f"{attn_prefix}.wo"]))

    def ff_with_adapter(self, layer_prefix, x, adapter):
        """FF(LayerNorm(x)) + Adapter(z) + x, with z = x unless the
        post-layernorm ablation flag routes z = LayerNorm(x)."""
        b = self.base
        h = T.layer_norm(x, b[f"{layer_prefix}.ln2.g"], b[f"{layer_prefix}.ln2.b"])
        ff = T.add(
            T.matmul(
                T.relu(T.add(T.matmul(h, b[f"{layer_prefix}.ff.w1"]), b[f"{layer_prefix}.ff.b1"])),
                b[f"{layer_prefix}.ff.w2"],
            ),
            b[f"{layer_prefix}.ff.b2"],
        )
        if adapter is not None:
            z = h if self.cfg.adapter_input_post_layernorm else x
            ff = T.add(ff, adapter_forward(z, adapter))
        return T.add(ff, x)

    def _embed(self, tokens):
        n = tokens.shape[1]
        tok = T.embedding(self.base["tok_embed"], tokens)
        pos = T.slice_rows(self.base["pos_embed"], 0, n)
        return T.add(tok, pos)

    def _check_tokens(self, tokens, what):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ShapeError(f"{what}: expected (batch, length) ids, got {tokens.shape}")
        if tokens.shape[1] > self.cfg.max_len:
            raise ShapeError(
                f"{what}: length {tokens.shape[1]} exceeds max_len {self.cfg.max_len}"
            )
        if (tokens < 0).any() or (tokens >= self.cfg.vocab_size).any():
            raise IndexError(f"{what}: token id outside vocab of {self.cfg.vocab_size}")
        return tokens

    # -- forward ------------------------------------------------------------

    def encode(self, tokens, adapters=None):
        """Hidden states (B, n, d) plus the padding mask (B, n)."""
        tokens = self._check_tokens(tokens, "encode")
        mask = tokens != PAD_ID
        if adapters is not None and len(adapters) != self.cfg.n_enc_layers:
            raise ShapeError(
                f"encode: {len(adapters)} adapters for {self.cfg.n_enc_layers} layers"
            )
        bias = np.where(mask, 0.0, NEG_INF).astype(np.float32)[:, None, :]
        bias = np.repeat(bias, self.cfg.n_heads, axis=0)
        x = self._embed(tokens)
        for i in range(self.cfg.n_enc_layers):
            x = self._attn_sublayer(f"enc.{i}.attn", f"enc.{i}.ln1", x, None, bias)
            x = self.ff_with_adapter(f"enc.{i}", x, adapters[i] if adapters else None)
        h = T.layer_norm(x, self.base["enc.ln_out.g"], self.base["enc.ln_out.b"])
        return h, mask

    def decode(self, enc_h, enc_mask, prefix, adapters=None):
        """Logits (B, m, vocab) for a BOS-led decoder prefix."""
        prefix = self._check_tokens(prefix, "decode")
        if (prefix[:, 0] != BOS_ID).any():
            raise ValueError(f"decode: prefix must begin with the start token {BOS_ID}")
        if adapters is not None and len(adapters) != self.cfg.n_dec_layers:
            raise ShapeError(
                f"decode: {len(adapters)} adapters for {self.cfg.n_dec_layers} layers"
            )
        bsz, m = prefix.shape
        causal = np.triu(np.full((m, m), NEG_INF, dtype=np.float32), k=1)[None, :, :]
        cross_bias = np.where(enc_mask, 0.0, NEG_INF).astype(np.float32)[:, None, :]
        cross_bias = np.repeat(cross_bias, self.cfg.n_heads, axis=0)
        x = self._embed(prefix)
        for i in range(self.cfg.n_dec_layers):
            x = self._attn_sublayer(f"dec.{i}.attn", f"dec.{i}.ln1", x, None, causal)
            x = self._attn_sublayer(f"dec.{i}.cross", f"dec.{i}.lnc", x, enc_h, cross_bias)
            x = self.ff_with_adapter(f"dec.{i}", x, adapters[i] if adapters else None)
        h = T.layer_norm(x, self.base["dec.ln_out.g"], self.base["dec.ln_out.b"])
        return T.matmul(h, T.transpose(self.base["tok_embed"], (1, 0)))

    def encode_adapted(self, tokens, task_ids=None, use_mean_task_embedding=False):
        """Encoder pass under the configured encoder adaptation mode."""
        side = self.enc_side
        if side.mode == AdaptationMode.NONE:
            return self.encode(tokens)
        if side.mode == AdaptationMode.MANUAL:
            return self.encode(tokens, side.manual)
        if side.mode == AdaptationMode.TASK:
            adapters = generate_adapters_from_task(task_ids, side.task, use_mean_task_embedding)
            return self.encode(tokens, adapters)
        # generated: pass 1 without adapters yields the conditioning embedding
        h0, mask = self.encode(tokens)
        adapters = generate_adapters_from_input(h0, mask, side.gen, self.cfg.use_mlp)
        return self.encode(tokens, adapters)

    def decoder_adapters(self, enc_h, enc_mask, task_ids=None, use_mean_task_embedding=False):
        side = self.dec_side
        if side.mode == AdaptationMode.NONE:
            return None
        if side.mode == AdaptationMode.MANUAL:
            return side.manual
        if side.mode == AdaptationMode.TASK:
            return generate_adapters_from_task(task_ids, side.task, use_mean_task_embedding)
        return generate_adapters_from_input(enc_h, enc_mask, side.gen, self.cfg.use_mlp)

    def pooled_embedding(self, tokens, task_ids=None):
        """The conditioning embedding e for the generated decoder mode."""
        if self.dec_side.mode != AdaptationMode.GENERATED:
            raise ValueError(
                f"pooled embedding undefined for decoder mode '{self.dec_side.mode.value}'"
            )
        enc_h, mask = self.encode_adapted(tokens, task_ids)
        return pool_embed(enc_h, mask, self.dec_side.gen, self.cfg.use_mlp)

    def forward_loss(self, enc_tokens, prefix, labels, task_ids=None):
        """Token cross-entropy of teacher-forced decoding; PAD labels ignored."""
        enc_h, enc_mask = self.encode_adapted(enc_tokens, task_ids)
        adapters = self.decoder_adapters(enc_h, enc_mask, task_ids)
        logits = self.decode(enc_h, enc_mask, prefix, adapters)
        bsz, m, v = logits.shape
        flat = T.reshape(logits, (bsz * m, v))
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        return T.softmax_cross_entropy(flat, labels, PAD_ID)

    def greedy_decode(self, enc_tokens, task_ids=None, max_new=None, use_mean_task_embedding=False):
        """Argmax decoding until EOS; returns one id list per batch row."""
        max_new = max_new if max_new is not None else self.cfg.max_len - 1
        enc_h, enc_mask = self.encode_adapted(enc_tokens, task_ids, use_mean_task_embedding)
        adapters = self.decoder_adapters(enc_h, enc_mask, task_ids, use_mean_task_embedding)
        bsz = enc_h.shape[0]
        prefix = np.full((bsz, 1), BOS_ID, dtype=np.int64)
        done = np.zeros(bsz, dtype=bool)
        for _ in range(max_new):
            logits = self.decode(enc_h, enc_mask, prefix, adapters)
            nxt = logits.data[:, -1, :].argmax(axis=1)
            nxt[done] = PAD_ID
            done |= nxt == EOS_ID
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
            if done.all() or prefix.shape[1] >= self.cfg.max_len:
                break
        out = []
        for row in prefix[:, 1:]:
            ids = []
            for t in row:
                if t in (EOS_ID, PAD_ID):
                    break
                ids.append(int(t))
            out.append(ids)
        return out
