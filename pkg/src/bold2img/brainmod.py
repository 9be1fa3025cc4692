"""Brain module: projects a voxel-by-time window to conditioning tokens.

Pipeline (aggregation at the output end, the default): a subject-specific
linear layer maps each time sample's C voxels to H channels, a per-timestep
linear layer applies distinct weights to each sample, then layer norm, GELU
and dropout, a learned weighted sum merges the time axis, and a final linear
layer emits P x D tokens. Subject and per-timestep layers are per subject;
everything else is shared, which is what makes multi-subject training and
new-subject adaptation cheap.

Variants (the design ablation): the per-timestep layer can be replaced by a
single shared matrix, and the temporal aggregation can be moved to the input
end (right after the subject layer, with one matrix after it).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .prep import Epoch
from .substrate import ops
from .substrate.gradcheck import register
from .substrate.params import ParamStore
from .substrate.rng import RngKey
from .substrate.tensor import Tensor

AGG_IN = "IN"
AGG_OUT = "OUT"


@dataclass
class BrainModuleConfig:
    hidden: int = 128  # paper-scale value: 1552
    tokens: int = 8  # paper-scale: 257
    token_dim: int = 64  # paper-scale: 768
    window_samples: int = 6
    dropout: float = 0.5
    timestep_layer_enabled: bool = True
    aggregation_position: str = AGG_OUT

    def validate(self):
        if min(self.hidden, self.tokens, self.token_dim, self.window_samples) <= 0:
            raise ValueError("hidden, tokens, token_dim and window_samples must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.aggregation_position not in (AGG_IN, AGG_OUT):
            raise ValueError(f"aggregation_position must be IN or OUT, got {self.aggregation_position}")

    @property
    def n_timestep_mats(self) -> int:
        if self.aggregation_position == AGG_IN or not self.timestep_layer_enabled:
            return 1
        return self.window_samples


def init_brain_module(
    config: BrainModuleConfig,
    subject_voxels: dict[str, int],
    key: RngKey,
    store: ParamStore | None = None,
) -> ParamStore:
    """Fresh parameters: scaled-normal weights (std 1/sqrt(fan_in)), zero biases,
    uniform-average aggregation weights."""
    config.validate()
    if not subject_voxels:
        raise ValueError("need at least one subject")
    store = store if store is not None else ParamStore()
    h, p, d, t = config.hidden, config.tokens, config.token_dim, config.window_samples
    for sid in sorted(subject_voxels):
        add_subject_layers(store, config, sid, subject_voxels[sid], key)
    store.add("brain/ln/g", np.ones(h, dtype=np.float32))
    store.add("brain/ln/b", np.zeros(h, dtype=np.float32))
    store.add("brain/agg/w", np.full(t, 1.0 / t, dtype=np.float32))
    store.add("brain/agg/b", np.zeros(1, dtype=np.float32))
    store.add("brain/out/w", key.child("out").normal((h, p * d), 1.0 / np.sqrt(h)))
    store.add("brain/out/b", np.zeros(p * d, dtype=np.float32))
    return store


def add_subject_layers(store: ParamStore, config: BrainModuleConfig, sid: str, n_voxels: int, key: RngKey):
    """Per-subject entries: the voxel projection and the timestep stack."""
    h = config.hidden
    m = config.n_timestep_mats
    store.add(f"brain/subject/{sid}/w", key.child("subj", sid).normal((n_voxels, h), 1.0 / np.sqrt(n_voxels)))
    store.add(f"brain/subject/{sid}/b", np.zeros(h, dtype=np.float32))
    store.add(f"brain/tstep/{sid}/w", key.child("tstep", sid).normal((m, h, h), 1.0 / np.sqrt(h)))
    store.add(f"brain/tstep/{sid}/b", np.zeros((m, 1, h), dtype=np.float32))


def subject_param_names(store: ParamStore, sid: str) -> list[str]:
    prefix = (f"brain/subject/{sid}/", f"brain/tstep/{sid}/")
    return [n for n in store.names() if n.startswith(prefix)]


def brain_forward_batch(
    x: np.ndarray,
    store: ParamStore,
    config: BrainModuleConfig,
    subject_id: str,
    training: bool = False,
    key: RngKey | None = None,
) -> Tensor:
    """Tokens for a batch of same-subject windows: (B, C, T) -> (B, P, D)."""
    config.validate()
    if f"brain/subject/{subject_id}/w" not in store:
        raise KeyError(f"no subject layer for {subject_id!r}")
    b, c, t = x.shape
    if t != config.window_samples:
        raise ValueError(f"window has {t} samples, config expects {config.window_samples}")
    if training and key is None:
        raise ValueError("training mode needs an rng key for dropout")

    xt = Tensor(np.ascontiguousarray(np.transpose(x, (0, 2, 1))))  # (B, T, C)
    z = ops.linear(xt, store[f"brain/subject/{subject_id}/w"], store[f"brain/subject/{subject_id}/b"])

    w_ts = store[f"brain/tstep/{subject_id}/w"]
    b_ts = store[f"brain/tstep/{subject_id}/b"]

    if config.aggregation_position == AGG_IN:
        u = ops.time_aggregate(z, store["brain/agg/w"], store["brain/agg/b"])  # (B, H)
        u = ops.add(ops.matmul(u, ops.reshape(w_ts, (config.hidden, config.hidden))), ops.reshape(b_ts, (1, config.hidden)))
        u = ops.layer_norm(u, store["brain/ln/g"], store["brain/ln/b"])
        u = ops.gelu(u)
        if training:
            u = ops.dropout(u, config.dropout, key.child("drop"), training=True)
    else:
        if config.timestep_layer_enabled:
            zt = ops.transpose(z, (1, 0, 2))  # (T, B, H)
            zt = ops.add(ops.matmul(zt, w_ts), b_ts)
            z = ops.transpose(zt, (1, 0, 2))
        else:
            z = ops.add(ops.matmul(z, ops.reshape(w_ts, (config.hidden, config.hidden))), ops.reshape(b_ts, (1, 1, config.hidden)))
        z = ops.layer_norm(z, store["brain/ln/g"], store["brain/ln/b"])
        z = ops.gelu(z)
        if training:
            z = ops.dropout(z, config.dropout, key.child("drop"), training=True)
        u = ops.time_aggregate(z, store["brain/agg/w"], store["brain/agg/b"])  # (B, H)

    tokens = ops.linear(u, store["brain/out/w"], store["brain/out/b"])
    return ops.reshape(tokens, (b, config.tokens, config.token_dim))


def brain_forward(
    epoch: Epoch,
    store: ParamStore,
    config: BrainModuleConfig,
    training: bool = False,
    key: RngKey | None = None,
) -> Tensor:
    """Tokens for one window: (C, T) -> (P, D)."""
    out = brain_forward_batch(epoch.X[None], store, config, epoch.subject_id, training, key)
    return ops.reshape(out, (config.tokens, config.token_dim))


# ---------------------------------------------------------------------------
# gradcheck registration for the three design variants


def _variant_config(name: str) -> BrainModuleConfig:
    small = dict(hidden=8, tokens=2, token_dim=3, window_samples=4, dropout=0.5)
    if name == "full":
        return BrainModuleConfig(**small)
    if name == "shared":
        return BrainModuleConfig(**small, timestep_layer_enabled=False)
    if name == "agg_in":
        return BrainModuleConfig(**small, aggregation_position=AGG_IN)
    raise KeyError(name)


def _brain_factory(variant: str):
    def factory(key: RngKey):
        config = _variant_config(variant)
        store = init_brain_module(config, {"s01": 5}, key.child("init"))
        x = key.child("x").normal((2, 5, config.window_samples), 1.0, np.float32)
        return store.astype(np.float64), [x.astype(np.float64)]

    return factory


def _brain_build(variant: str):
    config = _variant_config(variant)

    def build(store: ParamStore, inputs):
        return brain_forward_batch(
            inputs[0], store, config, "s01", training=True, key=RngKey(7, ("gradcheck", "braindrop"))
        )

    return build


for _variant in ("full", "shared", "agg_in"):
    register(f"brainmod_{_variant}", _brain_build(_variant), _brain_factory(_variant))
