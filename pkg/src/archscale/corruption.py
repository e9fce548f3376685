"""Span-corruption denoising: sentinel-masked encoder input, span targets."""

from __future__ import annotations

import numpy as np

from .vocab import EOS_ID, N_SENTINELS, sentinel


class SampleTooShort(ValueError):
    """Sequence too short to corrupt; callers should skip the sample."""


def _random_partition(total: int, parts: int, rng: np.random.Generator) -> np.ndarray:
    """Split ``total`` into ``parts`` positive integers uniformly at random."""
    if parts == 1:
        return np.array([total])
    cuts = np.sort(rng.choice(total - 1, size=parts - 1, replace=False)) + 1
    return np.diff(np.concatenate([[0], cuts, [total]]))


def span_corrupt(tokens, rate: float = 0.15, mean_span: float = 3.0,
                 rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Replace random token spans with sentinels.

    Returns ``(enc_ids, dec_target)``: the encoder keeps uncorrupted text with
    one sentinel per dropped span; the decoder target lists each sentinel
    followed by the tokens it hides.  Both end with EOS.  ``reconstruct``
    inverts the transform.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"rate must be in [0, 1), got {rate}")
    if mean_span < 1.0:
        raise ValueError(f"mean_span must be >= 1, got {mean_span}")
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(tokens)
    if n < 2:
        raise SampleTooShort(f"need at least 2 tokens, got {n}")
    rng = rng or np.random.default_rng()

    num_noise = min(n - 1, int(round(n * rate)))
    if num_noise == 0:
        return (np.concatenate([tokens, [EOS_ID]]),
                np.array([EOS_ID], dtype=np.int64))
    num_spans = int(np.clip(round(num_noise / mean_span), 1,
                            min(num_noise, n - num_noise, N_SENTINELS)))
    noise_lens = _random_partition(num_noise, num_spans, rng)
    keep_lens = _random_partition(n - num_noise, num_spans, rng)

    enc, dec = [], []
    pos = 0
    for i in range(num_spans):
        enc.extend(tokens[pos:pos + keep_lens[i]])
        pos += keep_lens[i]
        enc.append(sentinel(i))
        dec.append(sentinel(i))
        dec.extend(tokens[pos:pos + noise_lens[i]])
        pos += noise_lens[i]
    enc.extend(tokens[pos:])
    enc.append(EOS_ID)
    dec.append(EOS_ID)
    return np.array(enc, dtype=np.int64), np.array(dec, dtype=np.int64)


def reconstruct(enc_ids, dec_target) -> np.ndarray:
    """Invert span_corrupt: splice decoder spans back over the sentinels."""
    from .vocab import SENTINEL_BASE

    enc_ids = np.asarray(enc_ids)
    dec_target = np.asarray(dec_target)
    spans: dict[int, list[int]] = {}
    current: list[int] | None = None
    for t in dec_target:
        if t >= SENTINEL_BASE:
            current = spans.setdefault(int(t), [])
        elif t == EOS_ID:
            break
        elif current is not None:
            current.append(int(t))
    out: list[int] = []
    for t in enc_ids:
        if t >= SENTINEL_BASE:
            out.extend(spans.get(int(t), []))
        elif t != EOS_ID:
            out.append(int(t))
    return np.array(out, dtype=np.int64)
