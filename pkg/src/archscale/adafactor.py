"""Adafactor with factored second moments and an inverse-sqrt schedule."""

from __future__ import annotations

import numpy as np

from .tensor import GradMap, Tensor


class Adafactor:
    """Memory-light adaptive optimizer.

    Second moments of matrices (and the trailing two axes of higher-rank
    parameters) are kept as row/column means instead of full accumulators;
    state is float64 so the factored product cannot underflow.  The step size
    follows ``lr_scale * min(step^-0.5, step * warmup^-1.5)``, is multiplied
    by the parameter RMS (relative step sizing), and updates are RMS-clipped
    at ``clip_threshold``.
    """

    def __init__(self, params: dict[str, Tensor], lr_scale: float = 1.0,
                 warmup: int = 100, decay_exponent: float = 0.8,
                 clip_threshold: float = 1.0, eps_grad: float = 1e-30,
                 eps_scale: float = 1e-3, scale_by_parameter: bool = True):
        self.params = params
        self.lr_scale = lr_scale
        self.warmup = warmup
        self.decay_exponent = decay_exponent
        self.clip_threshold = clip_threshold
        self.eps_grad = eps_grad
        self.eps_scale = eps_scale
        self.scale_by_parameter = scale_by_parameter
        self.step_count = 0
        self.skipped_steps = 0
        self._state: dict[str, tuple[np.ndarray, ...]] = {}
        for name, p in params.items():
            if p.data.ndim >= 2:
                row = np.zeros(p.data.shape[:-1], dtype=np.float64)
                col = np.zeros(p.data.shape[:-2] + p.data.shape[-1:], dtype=np.float64)
                self._state[name] = (row, col)
            else:
                self._state[name] = (np.zeros(p.data.shape, dtype=np.float64),)

    def learning_rate(self, step: int) -> float:
        return self.lr_scale * min(step ** -0.5, step * self.warmup ** -1.5)

    def step(self, grads: GradMap) -> bool:
        """Apply one update; returns False (and counts) on non-finite grads."""
        gs = {}
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                self.skipped_steps += 1
                return False
            gs[name] = g.astype(np.float64)
        self.step_count += 1
        t = self.step_count
        lr = self.learning_rate(t)
        beta2 = 1.0 - t ** (-self.decay_exponent)
        for name, g in gs.items():
            p = self.params[name]
            g2 = g * g + self.eps_grad
            state = self._state[name]
            if len(state) == 2:
                row, col = state
                row *= beta2
                row += (1 - beta2) * g2.mean(axis=-1)
                col *= beta2
                col += (1 - beta2) * g2.mean(axis=-2)
                denom = np.sqrt(row[..., :, None] / row.mean(axis=-1, keepdims=True)[..., None])
                denom = denom * np.sqrt(col[..., None, :])
            else:
                (acc,) = state
                acc *= beta2
                acc += (1 - beta2) * g2
                denom = np.sqrt(acc)
            update = g / denom
            rms = np.sqrt(np.mean(update * update))
            update /= max(1.0, rms / self.clip_threshold)
            step_size = lr
            if self.scale_by_parameter:
                p_rms = float(np.sqrt(np.mean(p.data.astype(np.float64) ** 2)))
                step_size *= max(p_rms, self.eps_scale)
            p.data = (p.data - step_size * update).astype(p.data.dtype)
        return True
