"""The denoising training objective."""

from __future__ import annotations

import numpy as np

from ..substrate import ops
from ..substrate.params import ParamStore
from ..substrate.rng import RngKey
from ..substrate.tensor import Tensor
from .schedule import (
    NoiseSchedule,
    offset_noise,
    q_sample,
    sample_timestep_bicubic,
    sample_timestep_uniform,
    v_target,
)
from .unet import UNetConfig, unet_forward


def diffusion_loss(
    x0: np.ndarray,
    tokens: Tensor,
    store: ParamStore,
    schedule: NoiseSchedule,
    config: UNetConfig,
    key: RngKey,
    use_lora: bool = False,
    timestep_sampling: str = "bicubic",
    offset_lambda: float = 0.1,
    parameterization: str = "eps",
    predictor=None,
) -> Tensor:
    """Mean-squared error between the network output and its denoising target.

    Per batch item: a timestep from the configured sampler, offset noise, the
    forward-noised image, one prediction. The target is the injected noise
    ('eps', the default contract) or the velocity ('v'); training uses 'v'
    because at a small step budget the eps target makes high-noise structure
    statistically invisible. `predictor` overrides the network (test stubs);
    it receives (x_t, t, tokens) and returns an ndarray in the target space.
    """
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    b = x0.shape[0]
    if timestep_sampling == "bicubic":
        t = sample_timestep_bicubic(key.child("t"), schedule.t_max, b)
    elif timestep_sampling == "uniform":
        t = sample_timestep_uniform(key.child("t"), schedule.t_max, b)
    else:
        raise ValueError(f"unknown timestep sampling {timestep_sampling!r}")
    eps = offset_noise(key.child("eps"), x0.shape, offset_lambda)
    x_t = q_sample(x0, t, eps, schedule)
    if parameterization == "eps":
        target = eps
    elif parameterization == "v":
        target = v_target(x0, t, eps, schedule)
    else:
        raise ValueError(f"unknown parameterization {parameterization!r}")
    if predictor is not None:
        out = predictor(x_t, t, tokens)
        out = out if isinstance(out, Tensor) else Tensor(out)
    else:
        out = unet_forward(x_t, t, tokens, store, config, use_lora=use_lora)
    return ops.mse_loss(out, target)
