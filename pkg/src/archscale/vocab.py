"""Byte-level vocabulary: 256 bytes, 3 specials, and corruption sentinels."""

from __future__ import annotations

import numpy as np

PAD_ID = 0
EOS_ID = 1
BOS_ID = 2
BYTE_OFFSET = 3                     # byte b maps to id b + 3
N_SENTINELS = 25
SENTINEL_BASE = 256 + BYTE_OFFSET   # 259; sentinel s is SENTINEL_BASE + s
VOCAB_SIZE = SENTINEL_BASE + N_SENTINELS


def sentinel(index: int) -> int:
    if not 0 <= index < N_SENTINELS:
        raise ValueError(f"sentinel index {index} out of range [0, {N_SENTINELS})")
    return SENTINEL_BASE + index


def encode_text(text: str) -> np.ndarray:
    """UTF-8 bytes to token ids (no specials appended)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64) + BYTE_OFFSET


def decode_ids(ids) -> str:
    """Token ids back to text; specials and sentinels are dropped."""
    ids = np.asarray(ids)
    keep = (ids >= BYTE_OFFSET) & (ids < SENTINEL_BASE)
    return bytes((ids[keep] - BYTE_OFFSET).astype(np.uint8)).decode("utf-8", errors="replace")
