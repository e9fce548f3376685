"""Model configuration shared by the builder, cost model, and ladders."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

FAMILIES = (
    "transformer", "evolved", "universal", "switch", "performer",
    "funnel", "albert", "mos", "glu", "lconv", "dconv", "mixer",
)

CONV_FAMILIES = ("lconv", "dconv")


class ConfigError(ValueError):
    """Invalid or inconsistent model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture family plus every hyperparameter the builder needs.

    Family-specific fields are ignored by other families: ``n_experts``
    (switch), ``n_recurrences`` (universal), ``k_mixtures`` (mos),
    ``share_enc_dec``/``embed_factor`` (albert), ``n_enc_fixed`` (mixer),
    ``conv_width`` (lconv/dconv/evolved).
    """

    family: str
    n_layers_enc: int
    n_layers_dec: int
    d_model: int
    d_ff: int
    d_kv: int
    n_heads: int
    vocab: int
    n_experts: int = 1
    n_recurrences: int = 1
    k_mixtures: int = 4
    share_enc_dec: bool = False
    embed_factor: int = 0          # albert factorized width; 0 means d_model // 2
    n_enc_fixed: int = 128
    conv_width: int = 7
    capacity_factor: float = 1.25
    moe_period: int = 2            # every moe_period-th ffn becomes a MoE layer
    rel_buckets: int = 32
    rel_max_distance: int = 128

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        for field in ("n_layers_enc", "n_layers_dec", "d_model", "d_ff", "d_kv",
                      "n_heads", "n_experts", "n_recurrences", "k_mixtures",
                      "n_enc_fixed", "conv_width"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be >= 1, got {getattr(self, field)}")
        if self.vocab < 2:
            raise ConfigError(f"vocab must be >= 2, got {self.vocab}")
        if self.family in CONV_FAMILIES and self.d_model % self.n_heads:
            raise ConfigError(
                f"{self.family} needs d_model divisible by n_heads "
                f"({self.d_model} % {self.n_heads} != 0)")
        if self.family == "evolved" and self.d_model % 2:
            raise ConfigError("evolved needs an even d_model")
        if self.family == "albert" and self.albert_embed_width >= self.d_model:
            raise ConfigError("albert embed_factor must be smaller than d_model")

    @property
    def d_inner(self) -> int:
        """Concatenated head width of every attention projection."""
        return self.n_heads * self.d_kv

    @property
    def albert_embed_width(self) -> int:
        return self.embed_factor if self.embed_factor else self.d_model // 2

    @property
    def d_ff_evolved(self) -> int:
        """Evolved cells carry extra conv sublayers; the final FFN is halved
        to keep the cell parameter-comparable to a vanilla layer."""
        return max(self.d_ff // 2, 1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def from_json(cls, s: str) -> "ModelConfig":
        return cls.from_dict(json.loads(s))
