"""Scaling ladders: published size grids, scaling protocols, desk miniatures."""

from __future__ import annotations

from .config import ConfigError, ModelConfig
from .costs import count_params

FULL_VOCAB = 32128
SIZES = ("tiny", "small", "base", "large", "xl")

# (n_layers per stack, d_ff, d_model, d_kv, n_heads) for the shared grid
_UNIFORM_GRID = {
    "tiny": (4, 1024, 256, 32, 4),
    "small": (6, 2048, 512, 32, 8),
    "base": (12, 3072, 768, 64, 12),
    "large": (24, 4096, 1024, 64, 16),
    "xl": (24, 16384, 1024, 128, 32),
}

# switch scales depth and expert count on its own grid
_SWITCH_GRID = {
    "tiny": (4, 1024, 512, 64, 12, 32),
    "small": (6, 2048, 512, 64, 12, 32),
    "base": (12, 3072, 768, 64, 12, 32),
    "large": (24, 3072, 768, 64, 12, 32),
    "xl": (48, 3072, 768, 64, 12, 128),
}

# universal reuses each layer n_recurrences times; the layer counts below are
# chosen so the shared-weight totals track the published sizes
_UNIVERSAL_GRID = {
    "tiny": (6, 1024, 128, 32, 8, 3),
    "small": (6, 2048, 512, 32, 8, 3),
    "base": (6, 3072, 768, 64, 12, 3),
    "large": (2, 32768, 1024, 64, 16, 3),
}

# sizes with a published row per family
FAMILY_SIZES = {
    "transformer": SIZES,
    "evolved": SIZES,
    "universal": ("tiny", "small", "base", "large"),
    "switch": SIZES,
    "performer": ("tiny", "small", "base", "large"),
    "funnel": SIZES,
    "albert": ("small", "base", "large"),
    "mos": SIZES,
    "glu": SIZES,
    "lconv": SIZES,
    "dconv": ("tiny", "small", "base", "large"),
    "mixer": ("small", "base", "large", "xl"),
}

# published parameter counts, for deviation reporting
REPORTED_PARAMS = {
    "transformer": {"tiny": 16e6, "small": 60e6, "base": 223e6, "large": 738e6, "xl": 2.9e9},
    "evolved": {"tiny": 19e6, "small": 79e6, "base": 218e6, "large": 1.0e9, "xl": 2.2e9},
    "universal": {"tiny": 11e6, "small": 52e6, "base": 127e6, "large": 283e6},
    "switch": {"tiny": 174e6, "small": 460e6, "base": 2.0e9, "large": 3.9e9, "xl": 29.6e9},
    "performer": {"tiny": 16e6, "small": 61e6, "base": 224e6, "large": 739e6},
    "funnel": {"tiny": 16e6, "small": 61e6, "base": 223e6, "large": 739e6, "xl": 2.9e9},
    "albert": {"small": 15e6, "base": 21e6, "large": 34e6},
    "mos": {"tiny": 27e6, "small": 81e6, "base": 257e6, "large": 800e6, "xl": 2.9e9},
    "glu": {"tiny": 26e6, "small": 77e6, "base": 248e6, "large": 748e6, "xl": 2.85e9},
    "lconv": {"tiny": 17e6, "small": 67e6, "base": 210e6, "large": 741e6, "xl": 2.3e9},
    "dconv": {"tiny": 22e6, "small": 96e6, "base": 324e6, "large": 1.2e9},
    "mixer": {"small": 67e6, "base": 233e6, "large": 739e6, "xl": 2.86e9},
}


def size_config(family: str, size: str, vocab: int = FULL_VOCAB) -> ModelConfig:
    """One named size for one family, hyperparameters per the published grids."""
    if family not in FAMILY_SIZES:
        raise ConfigError(f"unknown family {family!r}")
    if size not in FAMILY_SIZES[family]:
        raise ConfigError(f"family {family!r} has no size {size!r} "
                          f"(available: {FAMILY_SIZES[family]})")
    if family == "switch":
        nl, dff, dm, dkv, nh, ne = _SWITCH_GRID[size]
        return ModelConfig(family=family, n_layers_enc=nl, n_layers_dec=nl,
                           d_model=dm, d_ff=dff, d_kv=dkv, n_heads=nh,
                           vocab=vocab, n_experts=ne)
    if family == "universal":
        nl, dff, dm, dkv, nh, nr = _UNIVERSAL_GRID[size]
        return ModelConfig(family=family, n_layers_enc=nl, n_layers_dec=nl,
                           d_model=dm, d_ff=dff, d_kv=dkv, n_heads=nh,
                           vocab=vocab, n_recurrences=nr)
    nl, dff, dm, dkv, nh = _UNIFORM_GRID[size]
    extras = {}
    if family == "albert":
        extras["share_enc_dec"] = True
    if family == "mixer":
        extras["n_enc_fixed"] = 512  # matches the default accounting length
    return ModelConfig(family=family, n_layers_enc=nl, n_layers_dec=nl,
                       d_model=dm, d_ff=dff, d_kv=dkv, n_heads=nh,
                       vocab=vocab, **extras)


def standard_ladder(family: str, vocab: int = FULL_VOCAB) -> list[ModelConfig]:
    """Every published size for the family, smallest to largest."""
    return [size_config(family, s, vocab) for s in FAMILY_SIZES[family]]


def ladder_labels(family: str) -> tuple[str, ...]:
    return tuple(FAMILY_SIZES[family])


def deviation_report(family: str) -> list[dict]:
    """Closed-form counts next to the published ones, with relative deviation."""
    rows = []
    for size, config in zip(FAMILY_SIZES[family], standard_ladder(family)):
        ours = count_params(config).params_total
        reported = REPORTED_PARAMS[family][size]
        rows.append({
            "family": family, "size": size, "params": ours,
            "reported": int(reported),
            "deviation": ours / reported - 1.0,
        })
    return rows


def protocol_ladder(base_config: ModelConfig, protocol: str,
                    steps: int = 3) -> list[ModelConfig]:
    """Grow one axis: 'depth' doubles layer counts, 'width' doubles d_ff."""
    if steps < 2:
        raise ConfigError("protocol ladders need at least 2 steps")
    out = [base_config]
    for _ in range(steps - 1):
        prev = out[-1]
        d = prev.to_dict()
        if protocol == "depth":
            d["n_layers_enc"] *= 2
            d["n_layers_dec"] *= 2
        elif protocol == "width":
            d["d_ff"] *= 2
        else:
            raise ConfigError(f"unknown protocol {protocol!r}; use 'depth' or 'width'")
        out.append(ModelConfig.from_dict(d))
    return out


# desk grid: (d_model, d_ff, layers, heads) -- trainable in minutes on a CPU
_DESK_GRID = {
    "desk-s": (56, 224, 2, 4),
    "desk-m": (112, 448, 2, 4),
    "desk-l": (224, 896, 2, 4),
}
DESK_SIZES = tuple(_DESK_GRID)
DESK_SEQ_LEN = 64


def desk_config(family: str, size: str, vocab: int) -> ModelConfig:
    if size not in _DESK_GRID:
        raise ConfigError(f"unknown desk size {size!r} (available: {DESK_SIZES})")
    dm, dff, nl, nh = _DESK_GRID[size]
    extras = {}
    if family == "switch":
        extras["n_experts"] = 4
    if family == "universal":
        extras["n_recurrences"] = 2
    if family == "albert":
        extras["share_enc_dec"] = True
    if family == "mixer":
        extras["n_enc_fixed"] = DESK_SEQ_LEN
    return ModelConfig(family=family, n_layers_enc=nl, n_layers_dec=nl,
                       d_model=dm, d_ff=dff, d_kv=dm // nh, n_heads=nh,
                       vocab=vocab, **extras)


def desk_ladder(family: str, vocab: int | None = None) -> list[ModelConfig]:
    """Three miniature sizes with the same relative geometry as the grid."""
    if vocab is None:
        from .vocab import VOCAB_SIZE
        vocab = VOCAB_SIZE
    return [desk_config(family, s, vocab) for s in DESK_SIZES]
