"""Classifier-free guidance and deterministic DDIM sampling."""

from __future__ import annotations

import numpy as np

from ..substrate import no_grad
from ..substrate.rng import RngKey
from .schedule import NoiseSchedule


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, scale: float) -> np.ndarray:
    """eps_uncond + scale * (eps_cond - eps_uncond); exact at scale 0 and 1."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("conditional/unconditional shapes differ")
    if scale == 1.0:
        return eps_cond
    if scale == 0.0:
        return eps_uncond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_indices(t_max: int, steps: int) -> np.ndarray:
    """Evenly strided sub-schedule from t_max-1 down to 0 inclusive."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps == 1:
        return np.array([t_max - 1])
    return np.unique(np.round(np.linspace(t_max - 1, 0, steps)).astype(np.int64))[::-1]


def ddim_sample(
    predict,
    schedule: NoiseSchedule,
    shape: tuple,
    key: RngKey,
    steps: int = 20,
    guidance: float = 3.0,
    clip_final: bool = True,
    x_init: np.ndarray | None = None,
) -> np.ndarray:
    """Deterministic (eta=0) DDIM.

    `predict(x, t_batch, guidance)` returns the guided noise estimate for a
    (B, ...) batch at one schedule index; drawing the initial noise is the
    only use of `key` (`x_init` overrides it for controlled starts).
    """
    idx = ddim_indices(schedule.t_max, steps)
    x = key.child("init").normal(shape, dtype=np.float32) if x_init is None else x_init.astype(np.float32)
    with no_grad():
        for i, t in enumerate(idx):
            t_batch = np.full(shape[0], t, dtype=np.int64)
            eps = predict(x, t_batch, guidance)
            ab_t = schedule.alpha_bars[t]
            x0_hat = (x - np.sqrt(1.0 - ab_t, dtype=np.float64).astype(np.float32) * eps) / np.float32(np.sqrt(ab_t))
            if i + 1 < len(idx):
                ab_next = schedule.alpha_bars[idx[i + 1]]
                x = np.float32(np.sqrt(ab_next)) * x0_hat + np.float32(np.sqrt(1.0 - ab_next)) * eps
            else:
                x = x0_hat
    return np.clip(x, 0.0, 1.0) if clip_final else x


def cfg_predictor(unet_call, tokens, null_tokens):
    """Wrap a conditional noise model into a guided predictor.

    `unet_call(x, t, tokens_batch)` runs the network; the conditional and
    unconditional passes are batched into one call.
    """
    import numpy as _np

    def predict(x, t_batch, guidance):
        if guidance == 1.0:
            return unet_call(x, t_batch, tokens)
        b = x.shape[0]
        null_b = _np.broadcast_to(null_tokens, tokens.shape)
        both = _np.concatenate([tokens, null_b], axis=0)
        x2 = _np.concatenate([x, x], axis=0)
        t2 = _np.concatenate([t_batch, t_batch], axis=0)
        eps = unet_call(x2, t2, both)
        return cfg_combine(eps[:b], eps[b:], guidance)

    return predict
