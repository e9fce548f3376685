"""Assembly of the twelve encoder-decoder families from a ModelConfig.

A built model owns a named parameter store, encoder/decoder layer stacks,
and an embedding/readout pair.  ``forward`` maps token ids to a
``[n_dec, vocab]`` score matrix (raw logits, or log-probabilities for the
mixture-of-softmaxes readout).  Decoders are causally masked for every
family.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelConfig
from .layers import (
    AttentionBlock, ConvBlock, EvolvedDecCell, EvolvedEncCell,
    FactorizedEmbedding, FFNBlock, GLUFFNBlock, MixerBlock, MoEFFNBlock,
    MoSHead, ParamStore, TiedEmbedding,
)

# sublayer kinds drive the forward loop: plain(x), cross(x, memory), moe(x, aux)
PLAIN, CROSS, MOE = "plain", "cross", "moe"


def funnel_pool_after(n_layers_enc: int) -> list[bool]:
    """Pooling schedule: halve the sequence after encoder blocks 2 and 4."""
    return [(i + 1) in (2, 4) for i in range(n_layers_enc)]


class Model:
    def __init__(self, config: ModelConfig, store: ParamStore, embedding,
                 enc_layers, dec_layers, enc_repeats: int, dec_repeats: int,
                 enc_final: T.Tensor, dec_final: T.Tensor, readout,
                 pool_after: list[bool]):
        self.config = config
        self.store = store
        self.params = store.as_dict()
        self.embedding = embedding
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.enc_repeats = enc_repeats
        self.dec_repeats = dec_repeats
        self.enc_final = enc_final
        self.dec_final = dec_final
        self.readout = readout          # None -> tied logits through the embedding
        self.pool_after = pool_after

    @property
    def param_count(self) -> int:
        return self.store.total_size()

    @property
    def log_prob_readout(self) -> bool:
        return self.readout is not None

    def encode(self, enc_ids: np.ndarray, aux: list | None = None) -> T.Tensor:
        h = self.embedding.encode(enc_ids)
        for layer, pool in zip(self.enc_layers, self.pool_after):
            for _ in range(self.enc_repeats):
                for kind, block in layer:
                    h = block(h, aux) if kind == MOE else block(h)
            if pool:
                h = T.mean_pool_stride2(h)
        return T.rms_norm(h, self.enc_final)

    def decode(self, dec_ids: np.ndarray, memory: T.Tensor,
               aux: list | None = None) -> T.Tensor:
        g = self.embedding.encode(dec_ids)
        for layer in self.dec_layers:
            for _ in range(self.dec_repeats):
                for kind, block in layer:
                    if kind == CROSS:
                        g = block(g, memory)
                    elif kind == MOE:
                        g = block(g, aux)
                    else:
                        g = block(g)
        g = T.rms_norm(g, self.dec_final)
        if self.readout is not None:
            return self.readout(g)
        return self.embedding.logits(g)

    def forward(self, enc_ids, dec_ids, collect_aux: bool = False):
        """Score matrix for decoder positions; ids are [n] or [B, n] ints.

        With ``collect_aux`` returns ``(scores, aux_terms)`` where aux_terms
        are the unweighted router load-balance losses (empty unless MoE).
        """
        enc_ids = np.asarray(enc_ids)
        dec_ids = np.asarray(dec_ids)
        squeeze = enc_ids.ndim == 1
        if squeeze:
            enc_ids = enc_ids[None, :]
            dec_ids = dec_ids[None, :]
        aux: list | None = [] if collect_aux else None
        memory = self.encode(enc_ids, aux)
        scores = self.decode(dec_ids, memory, aux)
        if squeeze:
            scores = T.reshape(scores, scores.shape[1:])
        return (scores, aux) if collect_aux else scores

    def loss(self, scores: T.Tensor, targets: np.ndarray,
             ignore_id: int | None = None) -> T.Tensor:
        if self.log_prob_readout:
            return T.nll_from_logprobs(scores, targets, ignore_id)
        return T.cross_entropy(scores, targets, ignore_id)


# ---------------------------------------------------------------------------
# builder


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Wire a complete model for the configured family."""
    store = ParamStore(np.random.default_rng(seed), dtype=dtype)
    fam = config.family
    c = config
    rb, rm = c.rel_buckets, c.rel_max_distance

    def attn(prefix, bias, causal=False, cross=False, share_from=None):
        block = AttentionBlock(store, prefix, c.d_model, c.n_heads, c.d_kv, bias,
                               causal=causal, cross=cross,
                               linear_kernel=(fam == "performer"),
                               num_buckets=rb, max_distance=rm)
        return block

    uses_enc_attn = fam not in ("lconv", "dconv", "mixer")
    uses_bias = fam != "performer"
    enc_bias = store.zeros("enc.rel_bias", rb, c.n_heads) \
        if (uses_enc_attn and uses_bias) else None
    dec_self_attn = fam not in ("lconv", "dconv")
    dec_bias = store.zeros("dec.rel_bias", rb, c.n_heads) \
        if (dec_self_attn and uses_bias) else None

    # embedding / readout
    readout = None
    if fam == "albert":
        embedding = FactorizedEmbedding(store, "embed", c.vocab, c.d_model,
                                        c.albert_embed_width)
    else:
        embedding = TiedEmbedding(store, "embed", c.vocab, c.d_model)
    if fam == "mos":
        readout = MoSHead(store, "mos", c.d_model, c.vocab, c.k_mixtures)

    def ffn_for(prefix, layer_idx):
        if fam == "glu":
            return (PLAIN, GLUFFNBlock(store, prefix, c.d_model, c.d_ff))
        if fam == "switch" and layer_idx % c.moe_period == c.moe_period - 1:
            return (MOE, MoEFFNBlock(store, prefix, c.d_model, c.d_ff,
                                     c.n_experts, c.capacity_factor))
        return (PLAIN, FFNBlock(store, prefix, c.d_model, c.d_ff))

    enc_layers: list = []
    dec_layers: list = []
    enc_repeats = dec_repeats = 1
    pool_after = [False] * c.n_layers_enc

    if fam == "albert":
        # one layer's weights reused across every encoder and decoder layer;
        # decoder self-attention borrows the projections, bias table aside
        shared_attn = attn("shared.attn", enc_bias)
        shared_ffn = FFNBlock(store, "shared.ffn", c.d_model, c.d_ff)
        dec_self = AttentionBlock(store, "shared.dec_self", c.d_model, c.n_heads,
                                  c.d_kv, dec_bias, causal=True,
                                  num_buckets=rb, max_distance=rm,
                                  share_from=shared_attn)
        cross = attn("shared.cross", None, cross=True)
        enc_layer = [(PLAIN, shared_attn), (PLAIN, shared_ffn)]
        dec_layer = [(PLAIN, dec_self), (CROSS, cross), (PLAIN, shared_ffn)]
        enc_layers = [enc_layer] * c.n_layers_enc
        dec_layers = [dec_layer] * c.n_layers_dec
    elif fam == "evolved":
        for i in range(c.n_layers_enc):
            cell = EvolvedEncCell(store, f"enc.l{i}", c.d_model, c.n_heads, c.d_kv,
                                  c.d_ff_evolved, enc_bias, rb, rm)
            enc_layers.append([(PLAIN, cell)])
        for i in range(c.n_layers_dec):
            cell = EvolvedDecCell(store, f"dec.l{i}", c.d_model, c.n_heads, c.d_kv,
                                  c.d_ff_evolved, dec_bias, rb, rm)
            dec_layers.append([(CROSS, cell)])
    elif fam == "mixer":
        for i in range(c.n_layers_enc):
            enc_layers.append([(PLAIN, MixerBlock(store, f"enc.l{i}", c.d_model,
                                                  c.d_ff, c.n_enc_fixed))])
        for i in range(c.n_layers_dec):
            dec_layers.append([
                (PLAIN, attn(f"dec.l{i}.self", dec_bias, causal=True)),
                (CROSS, attn(f"dec.l{i}.cross", None, cross=True)),
                ffn_for(f"dec.l{i}.ffn", i),
            ])
    elif fam in ("lconv", "dconv"):
        dynamic = fam == "dconv"
        for i in range(c.n_layers_enc):
            enc_layers.append([
                (PLAIN, ConvBlock(store, f"enc.l{i}.conv", c.d_model, c.n_heads,
                                  c.conv_width, causal=False, dynamic=dynamic)),
                ffn_for(f"enc.l{i}.ffn", i),
            ])
        for i in range(c.n_layers_dec):
            dec_layers.append([
                (PLAIN, ConvBlock(store, f"dec.l{i}.conv", c.d_model, c.n_heads,
                                  c.conv_width, causal=True, dynamic=dynamic)),
                (CROSS, attn(f"dec.l{i}.cross", None, cross=True)),
                ffn_for(f"dec.l{i}.ffn", i),
            ])
    else:
        # vanilla skeleton: transformer, glu, mos, switch, funnel, performer, universal
        for i in range(c.n_layers_enc):
            enc_layers.append([
                (PLAIN, attn(f"enc.l{i}.attn", enc_bias)),
                ffn_for(f"enc.l{i}.ffn", i),
            ])
        for i in range(c.n_layers_dec):
            dec_layers.append([
                (PLAIN, attn(f"dec.l{i}.self", dec_bias, causal=True)),
                (CROSS, attn(f"dec.l{i}.cross", None, cross=True)),
                ffn_for(f"dec.l{i}.ffn", i),
            ])
        if fam == "funnel":
            pool_after = funnel_pool_after(c.n_layers_enc)
        if fam == "universal":
            enc_repeats = dec_repeats = c.n_recurrences

    enc_final = store.ones("enc.final_norm", c.d_model)
    dec_final = store.ones("dec.final_norm", c.d_model)
    return Model(config, store, embedding, enc_layers, dec_layers,
                 enc_repeats, dec_repeats, enc_final, dec_final, readout,
                 pool_after)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    family: str
    seed: int
    max_rel_err: float
    worst_param: str
    checked: int
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < 1e-4


def gradcheck(config: ModelConfig, seed: int = 0, n_coords: int = 16,
              h: float = 1e-5, n_enc: int = 5, n_dec: int = 4) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences at float64.

    Meant for tiny configs (d_model <= 32); checks a random subset of
    parameter coordinates against a finite-difference oracle on the full
    training loss (cross-entropy plus weighted router aux terms).
    """
    if config.d_model > 32:
        raise ConfigError("gradcheck is for tiny configs (d_model <= 32)")
    model = build(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 7)
    n_e = config.n_enc_fixed if config.family == "mixer" else n_enc
    enc_ids = rng.integers(0, config.vocab, size=n_e)
    dec_ids = rng.integers(0, config.vocab, size=n_dec)
    targets = rng.integers(0, config.vocab, size=n_dec)

    def full_loss() -> T.Tensor:
        scores, aux = model.forward(enc_ids, dec_ids, collect_aux=True)
        loss = model.loss(scores, targets)
        for a in aux:
            loss = T.add(loss, T.scale(a, 0.01))
        return loss

    with T.Tape() as tape:
        loss = full_loss()
    grads = tape.backward(loss)
    if not np.isfinite(loss.item()):
        raise ArithmeticError("non-finite loss in gradcheck")

    names = list(model.params)
    per_param: dict[str, float] = {}
    worst = 0.0
    worst_param = ""
    for _ in range(n_coords):
        name = names[rng.integers(0, len(names))]
        p = model.params[name]
        flat_idx = int(rng.integers(0, p.size))
        idx = np.unravel_index(flat_idx, p.shape)
        orig = p.data[idx]
        p.data[idx] = orig + h
        fp = full_loss().item()
        p.data[idx] = orig - h
        fm = full_loss().item()
        p.data[idx] = orig
        fd = (fp - fm) / (2.0 * h)
        g = grads.get(p)
        ana = 0.0 if g is None else float(g[idx])
        err = abs(ana - fd) / max(abs(ana), abs(fd), 1e-3)
        per_param[name] = max(per_param.get(name, 0.0), err)
        if err > worst:
            worst, worst_param = err, name
    return GradCheckReport(config.family, seed, worst, worst_param,
                           n_coords, per_param)


# ---------------------------------------------------------------------------
# checkpoint serialization
#
# Layout (little-endian):
#   magic  b"ASCK"
#   u32    format version (1)
#   u32    config json byte length, then that many utf-8 bytes
#   u32    parameter count, then per parameter:
#            u16 name length, utf-8 name
#            u8  dtype code (0 = float32, 1 = float64)
#            u8  ndim, then ndim * u32 dims
#            raw C-order data bytes

_MAGIC = b"ASCK"
_DTYPES = {0: np.float32, 1: np.float64}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(model: Model, path: str) -> None:
    import struct

    cfg = model.config.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", 1))
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(model.params)))
        for name, t in model.params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", _DTYPE_CODES[t.data.dtype], t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data).tobytes())


def load_checkpoint(path: str) -> Model:
    import struct

    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != 1:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<I", fh.read(4))
        config = ModelConfig.from_json(fh.read(clen).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        arrays: dict[str, np.ndarray] = {}
        dtype = np.float32
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            code, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            dtype = _DTYPES[code]
            n_bytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
            arrays[name] = np.frombuffer(fh.read(n_bytes), dtype=dtype).reshape(shape).copy()
    model = build(config, dtype=dtype)
    if set(arrays) != set(model.params):
        missing = set(model.params) ^ set(arrays)
        raise ValueError(f"{path}: parameter names do not match the config ({missing})")
    for name, arr in arrays.items():
        t = model.params[name]
        if t.data.shape != arr.shape:
            raise ValueError(f"{path}: shape mismatch for {name}")
        t.data = arr
    return model
