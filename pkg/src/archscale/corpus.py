"""Synthetic pretraining corpus and downstream transduction tasks.

The pretraining corpus is seeded order-3 Markov text over a small alphabet:
structured enough that model capacity separates desk sizes within a few
thousand steps, deterministic given the seed.  Downstream tasks are
seq2seq transductions (copy, reverse, modular sum) scored by exact match.
"""

from __future__ import annotations

import numpy as np

ALPHABET = " abcdefghijklmnopqrstuvwxyz"
TASKS = ("copy", "reverse", "modsum")


class MarkovCorpus:
    """Order-3 character Markov chain with sparse, skewed transitions."""

    def __init__(self, seed: int = 0, branching: int = 5, concentration: float = 0.3):
        rng = np.random.default_rng(seed)
        k = len(ALPHABET)
        self.k = k
        n_ctx = k * k * k
        self.next_chars = np.empty((n_ctx, branching), dtype=np.int64)
        self.cum_probs = np.empty((n_ctx, branching))
        for ctx in range(n_ctx):
            self.next_chars[ctx] = rng.choice(k, size=branching, replace=False)
            self.cum_probs[ctx] = np.cumsum(rng.dirichlet(np.full(branching, concentration)))

    def sample_doc(self, rng: np.random.Generator, length: int) -> str:
        k = self.k
        out = list(rng.integers(0, k, size=3))
        u = rng.random(max(length - 3, 0))
        for i in range(len(u)):
            ctx = (out[-3] * k + out[-2]) * k + out[-1]
            j = int(np.searchsorted(self.cum_probs[ctx], u[i], side="right"))
            out.append(int(self.next_chars[ctx, min(j, self.cum_probs.shape[1] - 1)]))
        return "".join(ALPHABET[c] for c in out)

    def generate(self, n_docs: int, doc_len: int, seed: int = 0) -> list[str]:
        rng = np.random.default_rng(seed)
        return [self.sample_doc(rng, doc_len) for _ in range(n_docs)]


def synthetic_corpus(seed: int = 0, n_docs: int = 1024, doc_len: int = 512) -> list[str]:
    """Default pretraining corpus: one generated document per line."""
    return MarkovCorpus(seed).generate(n_docs, doc_len, seed=seed + 1)


def load_corpus(path: str) -> list[str]:
    """UTF-8 text, one document per line; blank lines are skipped."""
    with open(path, encoding="utf-8") as fh:
        docs = [line.rstrip("\n") for line in fh]
    docs = [d for d in docs if d.strip()]
    if not docs:
        raise ValueError(f"{path}: corpus is empty")
    return docs


def save_corpus(docs: list[str], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(d + "\n")


def task_sample(task: str, rng: np.random.Generator) -> tuple[str, str]:
    """One (input text, target text) pair for a downstream task."""
    if task == "copy":
        s = "".join(rng.choice(list(ALPHABET[1:]), size=rng.integers(4, 13)))
        return f"copy: {s}", s
    if task == "reverse":
        s = "".join(rng.choice(list(ALPHABET[1:]), size=rng.integers(4, 13)))
        return f"rev: {s}", s[::-1]
    if task == "modsum":
        digits = rng.integers(0, 10, size=rng.integers(2, 7))
        return "sum: " + " ".join(str(d) for d in digits), str(int(digits.sum()) % 10)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
