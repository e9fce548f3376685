"""Closed-form parameter and forward-FLOP accounting per family.

The multiply conventions mirror the tensor core exactly (matmul m*k*n;
one per element for mul/div/scale/tanh/sigmoid/log; two for softmax; four
for gelu; three per element plus two per row for rms_norm; width per element
for depthwise convs; zero for adds, gathers, relu and data movement), so the
analytic count equals the instrumented ``Tape.multiply_count`` for a real
forward pass.  FLOPs are reported as ``2 * multiplies`` (multiply + add) for
a single unbatched (n_enc, n_dec) sequence pair, embeddings through readout
scores, excluding the loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .config import ConfigError, ModelConfig
from .models import funnel_pool_after


@dataclass
class CostReport:
    params_total: int
    params_by_component: dict[str, int]
    flops_forward: int = 0
    flops_by_component: dict[str, int] = field(default_factory=dict)
    n_enc: int | None = None
    n_dec: int | None = None

    def to_dict(self) -> dict:
        return {
            "params_total": self.params_total,
            "params_by_component": self.params_by_component,
            "flops_forward": self.flops_forward,
            "flops_by_component": self.flops_by_component,
            "n_enc": self.n_enc,
            "n_dec": self.n_dec,
        }


class _Ledger:
    """Accumulates (component -> count) for params and multiplies."""

    def __init__(self):
        self.params: dict[str, int] = {}
        self.mults: dict[str, int] = {}

    def p(self, component: str, count: int):
        self.params[component] = self.params.get(component, 0) + count

    def m(self, component: str, count: int):
        self.mults[component] = self.mults.get(component, 0) + count


def _norm_m(rows: int, d: int) -> int:
    return 3 * rows * d + 2 * rows


def _attention(led: _Ledger, c: ModelConfig, n: int, m: int, cross: bool,
               counted_params: bool):
    """Dot-product attention sublayer (projections, logits, softmax, out)."""
    d, inner, h = c.d_model, c.d_inner, c.n_heads
    if counted_params:
        led.p("attention", 4 * d * inner)
        led.p("norms", d)
    if n:
        led.m("norms", _norm_m(n, d))
        led.m("attention", n * d * inner + 2 * m * d * inner)   # q, k, v
        led.m("attention", n * inner)                           # 1/sqrt(dk) scale
        led.m("attention", 2 * n * m * inner + 2 * h * n * m)   # logits, AV, softmax
        led.m("attention", n * inner * d)                       # output projection


def _performer(led: _Ledger, c: ModelConfig, n: int, m: int, cross: bool,
               counted_params: bool):
    d, inner, h, dk = c.d_model, c.d_inner, c.n_heads, c.d_kv
    if counted_params:
        led.p("attention", 4 * d * inner)
        led.p("norms", d)
    if n:
        led.m("norms", _norm_m(n, d))
        led.m("attention", n * d * inner + 2 * m * d * inner)   # q, k, v
        led.m("attention", h * m * dk * dk)                     # phi(K)^T V
        led.m("attention", h * n * dk * dk)                     # Q (phi(K)^T V)
        led.m("attention", h * n * dk)                          # normalizer dot
        led.m("attention", h * n * dk)                          # divide
        led.m("attention", n * inner * d)                       # output projection


def _ffn(led: _Ledger, c: ModelConfig, n: int, counted_params: bool,
         d_ff: int | None = None):
    d, f = c.d_model, d_ff if d_ff is not None else c.d_ff
    if counted_params:
        led.p("feed_forward", 2 * d * f)
        led.p("norms", d)
    if n:
        led.m("norms", _norm_m(n, d))
        led.m("feed_forward", 2 * n * d * f)


def _glu_ffn(led: _Ledger, c: ModelConfig, n: int, counted_params: bool):
    d, f = c.d_model, c.d_ff
    if counted_params:
        led.p("feed_forward", 3 * d * f)
        led.p("norms", d)
    if n:
        led.m("norms", _norm_m(n, d))
        led.m("feed_forward", 3 * n * d * f + 5 * n * f)  # gelu(4) + gate mul(1)


def _moe_ffn(led: _Ledger, c: ModelConfig, n: int, counted_params: bool):
    d, f, e = c.d_model, c.d_ff, c.n_experts
    if counted_params:
        led.p("router", d * e)
        led.p("experts", e * 2 * d * f)
        led.p("norms", d)
    if n:
        cap = math.ceil(c.capacity_factor * n / e)
        led.m("norms", _norm_m(n, d))
        led.m("router", n * d * e + 2 * n * e + n * e)  # logits, softmax, prob pick
        led.m("experts", e * 2 * cap * d * f)           # only dispatched slots
        led.m("experts", e * cap * d)                   # router-probability scale


def _conv_block(led: _Ledger, c: ModelConfig, n: int, dynamic: bool,
                counted_params: bool):
    d, w, h = c.d_model, c.conv_width, c.n_heads
    if counted_params:
        led.p("conv", 2 * d * d + d * d)            # GLU in-projection + out
        led.p("conv", d * w * d if dynamic else w * h)
        led.p("norms", d)
    if n:
        led.m("norms", _norm_m(n, d))
        led.m("conv", n * d * 2 * d)                # GLU projection
        led.m("conv", 2 * n * d)                    # sigmoid + gate mul
        if dynamic:
            led.m("conv", n * d * w * d)            # kernel prediction
            led.m("conv", 2 * n * w * d)            # kernel softmax
        else:
            led.m("conv", 2 * w * h)                # kernel softmax
        led.m("conv", w * n * d)                    # depthwise conv
        led.m("conv", n * d * d)                    # out projection


def _mixer_block(led: _Ledger, c: ModelConfig, n: int, counted_params: bool):
    d, f, s = c.d_model, c.d_ff, c.n_enc_fixed
    if counted_params:
        led.p("token_mixer", 2 * s * s)
        led.p("feed_forward", 2 * d * f)
        led.p("norms", 2 * d)
    if n:
        led.m("norms", _norm_m(n, d))
        led.m("token_mixer", d * n * s + 4 * d * s + d * s * n)  # mix + gelu + mix
        led.m("norms", _norm_m(n, d))
        led.m("feed_forward", 2 * n * d * f + 4 * n * f)         # gelu channel MLP


def _evolved_enc(led: _Ledger, c: ModelConfig, n: int, counted_params: bool):
    d = c.d_model
    if counted_params:
        led.p("conv", 2 * d * d)                          # gated linear unit
        led.p("conv", d * 2 * d + 3 * d * (d // 2))       # branched convolutions
        led.p("conv", 9 * 2 * d + 2 * d * d)              # separable refinement
        led.p("norms", 2 * d + 2 * d)                     # glu, conv, mid(2d)
    if n:
        led.m("norms", _norm_m(n, d))
        led.m("conv", 2 * n * d * d + 2 * n * d)          # glu: two mats, sigmoid, mul
        led.m("norms", _norm_m(n, d))
        led.m("conv", n * d * 2 * d)                      # left branch
        led.m("conv", n * 3 * d * (d // 2))               # right branch (width 3)
        led.m("norms", _norm_m(n, 2 * d))
        led.m("conv", 9 * n * 2 * d)                      # separable depthwise
        led.m("conv", n * 2 * d * d)                      # separable pointwise
    _attention(led, c, n, n, cross=False, counted_params=counted_params)
    _ffn(led, c, n, counted_params, d_ff=c.d_ff_evolved)


def _evolved_dec(led: _Ledger, c: ModelConfig, n: int, m: int,
                 counted_params: bool):
    d = c.d_model
    _attention(led, c, n, n, cross=False, counted_params=counted_params)
    _attention(led, c, n, m, cross=True, counted_params=counted_params)
    if counted_params:
        led.p("conv", 11 * d + d * d)
        led.p("norms", d)
    if n:
        led.m("norms", _norm_m(n, d))
        led.m("conv", 11 * n * d + n * d * d)
    _ffn(led, c, n, counted_params, d_ff=c.d_ff_evolved)


def _readout(led: _Ledger, c: ModelConfig, n: int):
    d, v = c.d_model, c.vocab
    if c.family == "albert":
        e = c.albert_embed_width
        led.m("readout", n * d * e + n * e * v + n * v)
    elif c.family == "mos":
        k = c.k_mixtures
        led.m("readout", n * d * k + 2 * n * k)  # gates
        led.m("readout", k * (n * d * d + n * d + n * d * v + 4 * n * v))
        led.m("readout", n * v)                  # final log
    else:
        led.m("readout", n * d * v + n * v)


def _walk(c: ModelConfig, n_enc: int | None, n_dec: int | None) -> _Ledger:
    led = _Ledger()
    fam = c.family
    d, v = c.d_model, c.vocab
    flops = n_enc is not None
    if fam == "mixer" and flops and n_enc != c.n_enc_fixed:
        raise ConfigError(
            f"mixer accounts at its fixed encoder length {c.n_enc_fixed}, got {n_enc}")

    # embedding and readout parameters
    if fam == "albert":
        e = c.albert_embed_width
        led.p("embedding", v * e + e * d)
    else:
        led.p("embedding", v * d)
    if fam == "mos":
        led.p("readout", v * d + d * c.k_mixtures + c.k_mixtures * d * d)

    # relative position bias tables (one per stack that has self-attention)
    if fam not in ("performer", "lconv", "dconv"):
        n_tables = 1 if fam == "mixer" else 2
        led.p("rel_bias", n_tables * c.rel_buckets * c.n_heads)

    shared = fam == "albert"
    repeats = c.n_recurrences if fam == "universal" else 1
    attn_fn = _performer if fam == "performer" else _attention

    # encoder stack
    n_cur = n_enc if flops else 0
    pool_after = funnel_pool_after(c.n_layers_enc) if fam == "funnel" else \
        [False] * c.n_layers_enc
    if flops and fam == "albert":
        led.m("embedding", n_enc * c.albert_embed_width * d)
    for i in range(c.n_layers_enc):
        count_p = (i == 0) if shared else True
        for _ in range(repeats if flops else 1):
            n_here = n_cur if flops else 0
            if fam in ("lconv", "dconv"):
                _conv_block(led, c, n_here, fam == "dconv", count_p)
                _ffn(led, c, n_here, count_p)
            elif fam == "mixer":
                _mixer_block(led, c, n_here, count_p)
            elif fam == "evolved":
                _evolved_enc(led, c, n_here, count_p)
            else:
                attn_fn(led, c, n_here, n_here, cross=False, counted_params=count_p)
                if fam == "glu":
                    _glu_ffn(led, c, n_here, count_p)
                elif fam == "switch" and i % c.moe_period == c.moe_period - 1:
                    _moe_ffn(led, c, n_here, count_p)
                else:
                    _ffn(led, c, n_here, count_p)
            count_p = False  # recurrence repeats share parameters
        if pool_after[i] and flops:
            n_cur = (n_cur + 1) // 2
            led.m("pooling", n_cur * d)
    led.p("norms", d)  # encoder final norm
    if flops:
        led.m("norms", _norm_m(n_cur, d))
    n_memory = n_cur

    # decoder stack
    if flops and fam == "albert":
        led.m("embedding", n_dec * c.albert_embed_width * d)
    for i in range(c.n_layers_dec):
        count_p = False if shared else True
        if shared and i == 0:
            # decoder self-attention and ffn reuse encoder weights; only the
            # cross-attention is decoder-owned
            _attention(led, c, 0, 0, cross=True, counted_params=True)
        for _ in range(repeats if flops else 1):
            n_here = n_dec if flops else 0
            if fam in ("lconv", "dconv"):
                _conv_block(led, c, n_here, fam == "dconv", count_p)
                attn_fn(led, c, n_here, n_memory if flops else 0,
                        cross=True, counted_params=count_p)
                _ffn(led, c, n_here, count_p)
            elif fam == "evolved":
                _evolved_dec(led, c, n_here, n_memory if flops else 0, count_p)
            else:
                attn_fn(led, c, n_here, n_here, cross=False, counted_params=count_p)
                attn_fn(led, c, n_here, n_memory if flops else 0,
                        cross=True, counted_params=(count_p and fam != "albert"))
                if fam == "glu":
                    _glu_ffn(led, c, n_here, count_p)
                elif fam == "switch" and i % c.moe_period == c.moe_period - 1:
                    _moe_ffn(led, c, n_here, count_p)
                else:
                    _ffn(led, c, n_here, count_p)
            count_p = False
    led.p("norms", d)  # decoder final norm
    if flops:
        led.m("norms", _norm_m(n_dec, d))
        _readout(led, c, n_dec)
    return led


def count_params(config: ModelConfig) -> CostReport:
    """Exact parameter count, matching the built model tensor-for-tensor."""
    led = _walk(config, None, None)
    return CostReport(params_total=sum(led.params.values()),
                      params_by_component=dict(led.params))


def count_flops(config: ModelConfig, n_enc: int = 512, n_dec: int = 512) -> CostReport:
    """Forward-pass FLOPs (2x multiply count) for one (n_enc, n_dec) pair."""
    if n_enc < 1 or n_dec < 1:
        raise ConfigError("sequence lengths must be >= 1")
    led = _walk(config, n_enc, n_dec)
    return CostReport(params_total=sum(led.params.values()),
                      params_by_component=dict(led.params),
                      flops_forward=2 * sum(led.mults.values()),
                      flops_by_component={k: 2 * v for k, v in led.mults.items()},
                      n_enc=n_enc, n_dec=n_dec)
