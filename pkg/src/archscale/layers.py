"""Sequence-model building blocks parameterized by ModelConfig.

Every block owns named parameter tensors (registered through a ParamStore),
computes on batched activations ``[B, n, d_model]``, and applies its own
pre-norm and residual.  Projections are bias-free and norms are scale-only,
which is what makes the vanilla parameter count line up with T5.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ContractError(ValueError):
    """A block was called outside its contract (wrong length, causal cross, ...)."""


class ParamStore:
    """Ordered registry of named parameters for one model."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.rng = rng
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(data.astype(self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def dense(self, name: str, d_in: int, d_out: int) -> Tensor:
        return self.add(name, self.rng.normal(0.0, d_in ** -0.5, size=(d_in, d_out)))

    def zeros(self, name: str, *shape: int) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, *shape: int) -> Tensor:
        return self.add(name, np.ones(shape))

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self._params)

    def total_size(self) -> int:
        return sum(t.size for t in self._params.values())


# ---------------------------------------------------------------------------
# relative position buckets (shared bias table, T5 bucketing)


@lru_cache(maxsize=256)
def relative_position_buckets(n_q: int, n_k: int, bidirectional: bool,
                              num_buckets: int = 32, max_distance: int = 128) -> np.ndarray:
    """Bucket index matrix [n_q, n_k] for a learned relative-position bias."""
    ctx = np.arange(n_q)[:, None]
    mem = np.arange(n_k)[None, :]
    rel = mem - ctx
    buckets = num_buckets
    out = np.zeros_like(rel)
    n = -rel
    if bidirectional:
        buckets //= 2
        out = out + (n < 0) * buckets
        n = np.abs(n)
    else:
        n = np.maximum(n, 0)
    max_exact = buckets // 2
    is_small = n < max_exact
    large = max_exact + (
        np.log(np.maximum(n, 1) / max_exact)
        / math.log(max_distance / max_exact) * (buckets - max_exact)
    ).astype(np.int64)
    large = np.minimum(large, buckets - 1)
    out = out + np.where(is_small, n, large)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=64)
def causal_mask(n: int, dtype_str: str) -> np.ndarray:
    """Additive mask: -1e9 above the diagonal."""
    m = np.triu(np.full((n, n), -1e9, dtype=np.dtype(dtype_str)), k=1)
    m.setflags(write=False)
    return m


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[B, n, H*dk] -> [B, H, n, dk]"""
    b, n, inner = x.shape
    x = T.reshape(x, (b, n, n_heads, inner // n_heads))
    return T.transpose(x, (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[B, H, n, dk] -> [B, n, H*dk]"""
    b, h, n, dk = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dk))


# ---------------------------------------------------------------------------
# functional cores


def rel_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor,
                  bias_table: Tensor | None, causal: bool, n_heads: int,
                  num_buckets: int = 32, max_distance: int = 128) -> Tensor:
    """Multi-head scaled dot-product attention with bucketed relative bias.

    Inputs are projected activations [B, n, H*d_kv]; the bias table is
    [buckets, H] and is added to the logits.  ``causal`` masks future
    positions and is only legal for self-attention (query/key same length).
    """
    n, m = q_in.shape[1], k_in.shape[1]
    if causal and n != m:
        raise ContractError("causal masking requested on cross-attention")
    dk = q_in.shape[-1] // n_heads
    q = T.scale(split_heads(q_in, n_heads), dk ** -0.5)
    k = split_heads(k_in, n_heads)
    v = split_heads(v_in, n_heads)
    logits = T.matmul(q, T.swapaxes(k, -1, -2))  # [B, H, n, m]
    if bias_table is not None:
        idx = relative_position_buckets(n, m, bidirectional=not causal,
                                        num_buckets=num_buckets, max_distance=max_distance)
        bias = T.transpose(T.embed(idx, bias_table), (2, 0, 1))  # [H, n, m]
        logits = T.add(logits, T.reshape(bias, (1, n_heads, n, m)))
    if causal:
        logits = T.add(logits, Tensor(causal_mask(n, str(logits.dtype))))
    weights = T.softmax(logits, axis=-1)
    return merge_heads(T.matmul(weights, v))


def performer_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor,
                        causal: bool, n_heads: int, eps: float = 1e-6) -> Tensor:
    """ReLU-kernel linear attention: phi(Q) (phi(K)^T V) / (phi(Q) phi(K)^T 1 + eps).

    The causal variant accumulates key-value outer products with prefix sums,
    so cost grows linearly in sequence length.
    """
    n, m = q_in.shape[1], k_in.shape[1]
    if causal and n != m:
        raise ContractError("causal masking requested on cross-attention")
    qf = T.relu(split_heads(q_in, n_heads))
    kf = T.relu(split_heads(k_in, n_heads))
    v = split_heads(v_in, n_heads)
    b, h = qf.shape[0], n_heads
    if causal:
        kv = T.einsum2("bhnk,bhnv->bhnkv", kf, v)
        num = T.einsum2("bhnk,bhnkv->bhnv", qf, T.cumsum(kv, axis=2))
        den = T.einsum2("bhnk,bhnk->bhn", qf, T.cumsum(kf, axis=2))
    else:
        kv = T.einsum2("bhmk,bhmv->bhkv", kf, v)
        num = T.einsum2("bhnk,bhkv->bhnv", qf, kv)
        den = T.einsum2("bhnk,bhk->bhn", qf, T.reduce_sum(kf, axis=2))
    dv = v.shape[-1]
    out = T.div(num, T.reshape(T.add(den, eps), (b, h, n, 1)))
    return merge_heads(out)


# ---------------------------------------------------------------------------
# blocks


class AttentionBlock:
    """Pre-norm residual attention sublayer (self, causal self, or cross)."""

    def __init__(self, store: ParamStore, prefix: str, d_model: int, n_heads: int,
                 d_kv: int, bias_table: Tensor | None, causal: bool = False,
                 cross: bool = False, linear_kernel: bool = False,
                 num_buckets: int = 32, max_distance: int = 128,
                 share_from: "AttentionBlock | None" = None):
        inner = n_heads * d_kv
        self.n_heads = n_heads
        self.causal = causal
        self.cross = cross
        self.linear_kernel = linear_kernel
        self.bias_table = bias_table
        self.num_buckets = num_buckets
        self.max_distance = max_distance
        if share_from is not None:
            self.gain = share_from.gain
            self.wq, self.wk = share_from.wq, share_from.wk
            self.wv, self.wo = share_from.wv, share_from.wo
        else:
            self.gain = store.ones(f"{prefix}.norm", d_model)
            self.wq = store.dense(f"{prefix}.wq", d_model, inner)
            self.wk = store.dense(f"{prefix}.wk", d_model, inner)
            self.wv = store.dense(f"{prefix}.wv", d_model, inner)
            self.wo = store.dense(f"{prefix}.wo", inner, d_model)

    def __call__(self, x: Tensor, memory: Tensor | None = None) -> Tensor:
        h = T.rms_norm(x, self.gain)
        src = memory if self.cross else h
        if self.cross and memory is None:
            raise ContractError("cross-attention called without memory")
        q = T.matmul(h, self.wq)
        k = T.matmul(src, self.wk)
        v = T.matmul(src, self.wv)
        if self.linear_kernel:
            core = performer_attention(q, k, v, self.causal, self.n_heads)
        else:
            core = rel_attention(q, k, v, None if self.cross else self.bias_table,
                                 self.causal, self.n_heads,
                                 self.num_buckets, self.max_distance)
        return T.add(x, T.matmul(core, self.wo))


class FFNBlock:
    """Pre-norm residual ReLU feed-forward: x + W2 relu(W1 norm(x))."""

    def __init__(self, store: ParamStore, prefix: str, d_model: int, d_ff: int):
        self.gain = store.ones(f"{prefix}.norm", d_model)
        self.w1 = store.dense(f"{prefix}.w1", d_model, d_ff)
        self.w2 = store.dense(f"{prefix}.w2", d_ff, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.rms_norm(x, self.gain)
        return T.add(x, T.matmul(T.relu(T.matmul(h, self.w1)), self.w2))


class GLUFFNBlock:
    """Gated feed-forward (GEGLU): x + W2 (gelu(W h) * (V h))."""

    def __init__(self, store: ParamStore, prefix: str, d_model: int, d_ff: int):
        self.gain = store.ones(f"{prefix}.norm", d_model)
        self.w = store.dense(f"{prefix}.w", d_model, d_ff)
        self.v = store.dense(f"{prefix}.v", d_model, d_ff)
        self.w2 = store.dense(f"{prefix}.w2", d_ff, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.rms_norm(x, self.gain)
        gated = T.mul(T.gelu(T.matmul(h, self.w)), T.matmul(h, self.v))
        return T.add(x, T.matmul(gated, self.w2))


class MoEFFNBlock:
    """Top-1 routed mixture-of-experts feed-forward (Switch recipe).

    Each token goes to its argmax expert, capped at
    ``ceil(capacity_factor * tokens / n_experts)`` slots per expert in
    position order; overflow tokens fall through the residual untouched.
    Expert output is scaled by the router probability (this is what trains
    the router).  The returned auxiliary term is ``N_E * sum_i f_i p_i``
    (load fraction times mean router probability), unweighted.
    """

    def __init__(self, store: ParamStore, prefix: str, d_model: int, d_ff: int,
                 n_experts: int, capacity_factor: float = 1.25):
        self.n_experts = n_experts
        self.capacity_factor = capacity_factor
        self.d_model = d_model
        self.gain = store.ones(f"{prefix}.norm", d_model)
        self.router = store.dense(f"{prefix}.router", d_model, n_experts)
        self.w1 = store.add(f"{prefix}.experts.w1",
                            store.rng.normal(0.0, d_model ** -0.5, size=(n_experts, d_model, d_ff)))
        self.w2 = store.add(f"{prefix}.experts.w2",
                            store.rng.normal(0.0, d_ff ** -0.5, size=(n_experts, d_ff, d_model)))

    def __call__(self, x: Tensor, aux: list | None = None) -> Tensor:
        b, n, d = x.shape
        tokens = b * n
        e = self.n_experts
        h = T.rms_norm(x, self.gain)
        hf = T.reshape(h, (tokens, d))
        probs = T.softmax(T.matmul(hf, self.router), axis=-1)  # [tokens, E]
        assign = np.argmax(probs.data, axis=-1)
        capacity = math.ceil(self.capacity_factor * tokens / e)
        # position-ordered dispatch: earlier tokens win buffer slots
        idx = np.full((e, capacity), tokens, dtype=np.int64)
        for ei in range(e):
            pos = np.nonzero(assign == ei)[0][:capacity]
            idx[ei, :len(pos)] = pos
        gather_idx = np.minimum(idx, tokens - 1)  # padding slots read a dummy row
        onehot = np.zeros((tokens, e), dtype=probs.dtype)
        onehot[np.arange(tokens), assign] = 1.0
        p_token = T.reduce_sum(T.mul(probs, Tensor(onehot)), axis=-1, keepdims=True)
        p_buf = T.embed(gather_idx, p_token)                     # [E, cap, 1]
        x_buf = T.embed(gather_idx, hf)                          # [E, cap, d]
        out_buf = T.matmul(T.relu(T.matmul(x_buf, self.w1)), self.w2)
        combined = T.scatter_rows(T.mul(out_buf, p_buf), idx, tokens)
        if aux is not None:
            frac = np.bincount(assign, minlength=e).astype(probs.dtype) / tokens
            p_mean = T.reduce_mean(probs, axis=0)
            aux.append(T.scale(T.reduce_sum(T.mul(p_mean, Tensor(frac))), float(e)))
        return T.add(x, T.reshape(combined, (b, n, d)))


class ConvBlock:
    """Lightweight (static) or dynamic depthwise convolution sublayer.

    GLU input projection, softmax-normalized depthwise kernel shared across
    ``n_heads`` channel groups, output projection.  The dynamic variant
    predicts per-position kernels from the gated activation.
    """

    def __init__(self, store: ParamStore, prefix: str, d_model: int, n_heads: int,
                 width: int, causal: bool, dynamic: bool):
        self.width = width
        self.n_heads = n_heads
        self.causal = causal
        self.dynamic = dynamic
        self.gain = store.ones(f"{prefix}.norm", d_model)
        self.w_in = store.dense(f"{prefix}.w_in", d_model, 2 * d_model)
        if dynamic:
            self.w_kernel = store.dense(f"{prefix}.w_kernel", d_model, width * d_model)
        else:
            self.kernels = store.zeros(f"{prefix}.kernels", width, n_heads)
        self.w_out = store.dense(f"{prefix}.w_out", d_model, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        pad = "causal" if self.causal else "same"
        h = T.rms_norm(x, self.gain)
        proj = T.matmul(h, self.w_in)
        gated = T.mul(T.slice_axis(proj, -1, 0, d),
                      T.sigmoid(T.slice_axis(proj, -1, d, 2 * d)))
        if self.dynamic:
            raw = T.reshape(T.matmul(gated, self.w_kernel), (b, n, self.width, d))
            kern = T.softmax(raw, axis=-2)
            conv = T.depthwise_conv1d_dyn(gated, kern, padding=pad)
        else:
            kern = T.softmax(self.kernels, axis=0)
            conv = T.depthwise_conv1d(gated, kern, padding=pad)
        return T.add(x, T.matmul(conv, self.w_out))


class MixerBlock:
    """Token-mixing MLP across a fixed-length sequence, then a channel MLP."""

    def __init__(self, store: ParamStore, prefix: str, d_model: int, d_ff: int,
                 seq_len: int):
        self.seq_len = seq_len
        self.gain_tok = store.ones(f"{prefix}.norm_tok", d_model)
        self.w_tok1 = store.dense(f"{prefix}.w_tok1", seq_len, seq_len)
        self.w_tok2 = store.dense(f"{prefix}.w_tok2", seq_len, seq_len)
        self.gain_ch = store.ones(f"{prefix}.norm_ch", d_model)
        self.w_ch1 = store.dense(f"{prefix}.w_ch1", d_model, d_ff)
        self.w_ch2 = store.dense(f"{prefix}.w_ch2", d_ff, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.seq_len:
            raise ContractError(
                f"mixer block needs length {self.seq_len}, got {x.shape[1]}; pad upstream")
        h = T.swapaxes(T.rms_norm(x, self.gain_tok), 1, 2)           # [B, d, n]
        mixed = T.matmul(T.gelu(T.matmul(h, self.w_tok1)), self.w_tok2)
        y = T.add(x, T.swapaxes(mixed, 1, 2))
        h2 = T.rms_norm(y, self.gain_ch)
        return T.add(y, T.matmul(T.gelu(T.matmul(h2, self.w_ch1)), self.w_ch2))


class EvolvedEncCell:
    """Evolved-Transformer-style encoder cell at block granularity.

    Sublayers: sigmoid-gated linear unit; branched convolutions (1-wide into
    2d and 3-wide into d/2, summed and refined by a separable 9-wide conv);
    relative-bias self-attention; halved-width ReLU FFN.
    """

    def __init__(self, store: ParamStore, prefix: str, d_model: int, n_heads: int,
                 d_kv: int, d_ff: int, bias_table: Tensor,
                 num_buckets: int, max_distance: int):
        d = d_model
        self.d = d
        self.gain_glu = store.ones(f"{prefix}.glu.norm", d)
        self.w_val = store.dense(f"{prefix}.glu.w_val", d, d)
        self.w_gate = store.dense(f"{prefix}.glu.w_gate", d, d)
        self.gain_conv = store.ones(f"{prefix}.conv.norm", d)
        self.w_left = store.dense(f"{prefix}.conv.w_left", d, 2 * d)
        self.w_right = store.dense(f"{prefix}.conv.w_right", 3 * d, d // 2)
        self.gain_mid = store.ones(f"{prefix}.conv.norm_mid", 2 * d)
        self.sep_depth = store.zeros(f"{prefix}.conv.sep_depth", 9, 2 * d)
        self.sep_point = store.dense(f"{prefix}.conv.sep_point", 2 * d, d)
        self.attn = AttentionBlock(store, f"{prefix}.attn", d, n_heads, d_kv,
                                   bias_table, num_buckets=num_buckets,
                                   max_distance=max_distance)
        self.ffn = FFNBlock(store, f"{prefix}.ffn", d, d_ff)

    def __call__(self, x: Tensor) -> Tensor:
        d = self.d
        h = T.rms_norm(x, self.gain_glu)
        x = T.add(x, T.mul(T.matmul(h, self.w_val), T.sigmoid(T.matmul(h, self.w_gate))))
        h = T.rms_norm(x, self.gain_conv)
        left = T.relu(T.matmul(h, self.w_left))
        right = T.relu(T.matmul(T.unfold1d(h, 3, "same"), self.w_right))
        y = T.add(left, T.pad_axis(right, -1, 0, 2 * d - d // 2))
        y = T.rms_norm(y, self.gain_mid)
        y = T.matmul(T.depthwise_conv1d(y, self.sep_depth, "same"), self.sep_point)
        x = T.add(x, y)
        x = self.attn(x)
        return self.ffn(x)


class EvolvedDecCell:
    """Evolved-Transformer-style decoder cell: causal self-attention,
    cross-attention, separable 11-wide causal conv, halved-width FFN."""

    def __init__(self, store: ParamStore, prefix: str, d_model: int, n_heads: int,
                 d_kv: int, d_ff: int, bias_table: Tensor,
                 num_buckets: int, max_distance: int):
        d = d_model
        self.self_attn = AttentionBlock(store, f"{prefix}.self", d, n_heads, d_kv,
                                        bias_table, causal=True,
                                        num_buckets=num_buckets, max_distance=max_distance)
        self.cross = AttentionBlock(store, f"{prefix}.cross", d, n_heads, d_kv,
                                    None, cross=True,
                                    num_buckets=num_buckets, max_distance=max_distance)
        self.gain_conv = store.ones(f"{prefix}.conv.norm", d)
        self.sep_depth = store.zeros(f"{prefix}.conv.sep_depth", 11, d)
        self.sep_point = store.dense(f"{prefix}.conv.sep_point", d, d)
        self.ffn = FFNBlock(store, f"{prefix}.ffn", d, d_ff)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        x = self.self_attn(x)
        x = self.cross(x, memory)
        h = T.rms_norm(x, self.gain_conv)
        x = T.add(x, T.matmul(T.depthwise_conv1d(h, self.sep_depth, "causal"),
                              self.sep_point))
        return self.ffn(x)


class MoSHead:
    """Mixture-of-softmaxes readout over its own output embedding.

    Returns log-probabilities: log sum_k pi_k(h) softmax(tanh(h W_k) E^T / sqrt(d)).
    """

    def __init__(self, store: ParamStore, prefix: str, d_model: int, vocab: int,
                 k_mixtures: int):
        self.k = k_mixtures
        self.d_model = d_model
        self.out_embed = store.add(f"{prefix}.out_embed",
                                   store.rng.normal(0.0, d_model ** -0.5,
                                                    size=(vocab, d_model)))
        self.w_gate = store.dense(f"{prefix}.w_gate", d_model, k_mixtures)
        self.w_proj = [store.dense(f"{prefix}.w_proj{i}", d_model, d_model)
                       for i in range(k_mixtures)]

    def __call__(self, h: Tensor) -> Tensor:
        gates = T.softmax(T.matmul(h, self.w_gate), axis=-1)  # [B, n, K]
        et = T.swapaxes(self.out_embed, 0, 1)
        mix = None
        for i in range(self.k):
            logits = T.scale(T.matmul(T.tanh(T.matmul(h, self.w_proj[i])), et),
                             self.d_model ** -0.5)
            pk = T.softmax(logits, axis=-1)
            gk = T.slice_axis(gates, -1, i, i + 1)            # [B, n, 1]
            term = T.mul(pk, gk)
            mix = term if mix is None else T.add(mix, term)
        return T.log(mix)


class TiedEmbedding:
    """Shared input embedding and output projection (logits scaled by 1/sqrt(d))."""

    def __init__(self, store: ParamStore, prefix: str, vocab: int, d_model: int):
        self.d_model = d_model
        self.vocab = vocab
        self.table = store.add(f"{prefix}.table",
                               store.rng.normal(0.0, d_model ** -0.5,
                                                size=(vocab, d_model)))

    def encode(self, ids: np.ndarray) -> Tensor:
        return T.embed(ids, self.table)

    def logits(self, h: Tensor) -> Tensor:
        return T.scale(T.matmul(h, T.swapaxes(self.table, 0, 1)), self.d_model ** -0.5)


class FactorizedEmbedding:
    """ALBERT-style factorized embedding, tied through both factors."""

    def __init__(self, store: ParamStore, prefix: str, vocab: int, d_model: int,
                 width: int):
        self.d_model = d_model
        self.table = store.add(f"{prefix}.table",
                               store.rng.normal(0.0, width ** -0.5, size=(vocab, width)))
        self.proj = store.dense(f"{prefix}.proj", width, d_model)

    def encode(self, ids: np.ndarray) -> Tensor:
        return T.matmul(T.embed(ids, self.table), self.proj)

    def logits(self, h: Tensor) -> Tensor:
        narrow = T.matmul(h, T.swapaxes(self.proj, 0, 1))
        return T.scale(T.matmul(narrow, T.swapaxes(self.table, 0, 1)),
                       self.d_model ** -0.5)
