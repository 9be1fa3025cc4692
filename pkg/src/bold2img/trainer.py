"""Training orchestration: generator pretraining, single-stage joint training,
finetuning regimes, multi-subject training, new-subject adaptation, inference.

One parameter store carries everything (unet/*, brain/*, lora/*, cond/*);
a regime is just a trainable-name predicate over that store. All per-step
randomness is keyed by the absolute step index, so resuming from a checkpoint
reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .brainmod import BrainModuleConfig, add_subject_layers, brain_forward_batch, init_brain_module
from .diffgen import (
    UNetConfig,
    cfg_predictor,
    create_lora_adapters,
    ddim_sample,
    diffusion_loss,
    diffusion_to_image,
    eps_from_v,
    image_to_diffusion,
    image_tokens,
    init_image_encoder,
    init_null_tokens,
    init_unet,
    make_schedule,
    unet_cross_attn_param_names,
    unet_forward,
    unet_linear_param_names,
)
from .prep import DEFAULT_WINDOW_D, DEFAULT_WINDOW_T, Epoch, PreprocCache, SplitSpec, extract_epochs, window_length
from .substrate import LrSchedule, OptimizerState, ParamStore, RngKey, Tensor, adamw_step, lr_at, no_grad, ops
from .substrate.checkpoint import load_checkpoint, save_checkpoint
from .synthcortex.dataset import DatasetManifest

REGIMES = ("all", "linear", "cross_attn", "none", "lora")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 10_000
    pretrain_steps: int = 5_000
    batch_size: int = 32
    max_lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    warmup_steps: int = 500
    cond_dropout: float = 0.1
    finetune_regime: str = "lora"
    window_t: float = DEFAULT_WINDOW_T
    window_d: float = DEFAULT_WINDOW_D
    delta: float = 0.0
    offset_lambda: float = 0.1
    parameterization: str = "v"  # training target space; 'eps' matches the plain contract
    pretrain_conditioning: str = "image"  # image | null (tokens fed while pretraining)
    shuffle_conditioning: bool = False
    seed: int = 0
    brain: BrainModuleConfig = field(default_factory=BrainModuleConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)

    def validate(self):
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ValueError("cond_dropout must be in [0, 1)")
        if self.warmup_steps >= self.steps:
            raise ValueError(f"warmup ({self.warmup_steps}) must be below steps ({self.steps})")
        if self.finetune_regime not in REGIMES:
            raise ValueError(f"unknown regime {self.finetune_regime!r}; choose from {REGIMES}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["brain"] = asdict(self.brain)
        d["unet"] = asdict(self.unet)
        d["unet"]["channels"] = list(self.unet.channels)
        return d

    @staticmethod
    def from_json(d: dict) -> "TrainConfig":
        d = dict(d)
        d["betas"] = tuple(d["betas"])
        d["brain"] = BrainModuleConfig(**d["brain"])
        u = dict(d["unet"])
        u["channels"] = tuple(u["channels"])
        d["unet"] = UNetConfig(**u)
        return TrainConfig(**d)


# ---------------------------------------------------------------------------
# regimes


def regime_trainable_names(store: ParamStore, regime: str, include_brain: bool = True) -> set[str]:
    names: set[str] = set()
    if include_brain:
        names |= {n for n in store.names() if n.startswith("brain/")}
        names.add("cond/null_tokens")
    if regime == "all":
        names |= {n for n in store.names() if n.startswith("unet/")}
    elif regime == "linear":
        names |= set(unet_linear_param_names(store))
    elif regime == "cross_attn":
        names |= set(unet_cross_attn_param_names(store))
    elif regime == "lora":
        lora = {n for n in store.names() if n.startswith("lora/")}
        if not lora:
            raise ValueError("regime 'lora' requires adapters attached to the store")
        names |= lora
    elif regime != "none":
        raise ValueError(f"unknown regime {regime!r}")
    return names


# ---------------------------------------------------------------------------
# training data


@dataclass
class TrainingSet:
    """Per-subject stacked windows and their target images."""

    subjects: list[str]
    x: dict[str, np.ndarray]  # sid -> (N, C, T)
    images: dict[str, np.ndarray]  # sid -> (N, R, R, 3)
    stimuli: dict[str, list[str]]  # sid -> stimulus id per row
    flat_index: list[tuple[str, int]]  # global row -> (sid, local row)

    @property
    def n_total(self) -> int:
        return len(self.flat_index)


def assemble_training_set(
    manifest: DatasetManifest,
    cache: PreprocCache,
    refs: dict[str, list[tuple[int, int]]],
    config: TrainConfig,
    shuffle_key: RngKey | None = None,
) -> TrainingSet:
    epochs, _ = extract_epochs(cache, refs, config.window_t, config.window_d, config.delta)
    by_subject: dict[str, list[Epoch]] = {}
    for e in epochs:
        by_subject.setdefault(e.subject_id, []).append(e)
    subjects = sorted(by_subject)
    image_cache = {s: manifest.load_image(s) for s in manifest.stimulus_ids}
    x, images, stimuli, flat = {}, {}, {}, []
    for sid in subjects:
        eps = by_subject[sid]
        stims = [e.stimulus_id for e in eps]
        if config.shuffle_conditioning:
            if shuffle_key is None:
                raise ValueError("shuffle_conditioning needs a key")
            perm = shuffle_key.child("shuffle", sid).permutation(len(stims))
            stims = [stims[i] for i in perm]
        x[sid] = np.stack([e.X for e in eps])
        images[sid] = np.stack([image_cache[s] for s in stims])
        stimuli[sid] = stims
        flat.extend((sid, i) for i in range(len(eps)))
    return TrainingSet(subjects, x, images, stimuli, flat)


# ---------------------------------------------------------------------------
# checkpoint container with optimizer state


def save_train_state(out_dir, store: ParamStore, opt: OptimizerState, config: TrainConfig, extra: dict):
    out_dir = Path(out_dir)
    full = store.clone()
    for name in sorted(opt.m):
        full.add(f"optim/m/{name}", opt.m[name], trainable=False)
        full.add(f"optim/v/{name}", opt.v[name], trainable=False)
    payload = {"step": opt.step, "train_config": config.to_json(), **extra}
    save_checkpoint(out_dir, full, payload)
    (out_dir / "train_config.json").write_text(json.dumps(config.to_json(), sort_keys=True, indent=1))


def load_train_state(ckpt_dir) -> tuple[ParamStore, OptimizerState, TrainConfig, dict]:
    full, extra = load_checkpoint(ckpt_dir)
    store = ParamStore()
    opt = OptimizerState(step=extra.get("step", 0))
    for name in full.names():
        if name.startswith("optim/m/"):
            opt.m[name[len("optim/m/") :]] = full[name].data
        elif name.startswith("optim/v/"):
            opt.v[name[len("optim/v/") :]] = full[name].data
        else:
            store.add(name, full[name].data, full.is_trainable(name))
    config = TrainConfig.from_json(extra["train_config"])
    return store, opt, config, extra


# ---------------------------------------------------------------------------
# loops


def _loss_csv(out_dir: Path, rows: list[tuple], resume: bool):
    path = out_dir / "loss.csv"
    mode = "a" if resume and path.exists() else "w"
    with open(path, mode) as f:
        if mode == "w":
            f.write("step,loss,lr,cond_dropped\n")
        for r in rows:
            f.write(f"{r[0]},{r[1]:.6f},{r[2]:.8f},{r[3]}\n")


class _DivergenceGuard:
    threshold_steps = 500

    def __init__(self):
        self.initial: float | None = None
        self.bad = 0

    def check(self, step: int, loss: float):
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at step {step}")
        if self.initial is None:
            self.initial = loss
        self.bad = self.bad + 1 if loss > 10.0 * self.initial else 0
        if self.bad >= self.threshold_steps:
            raise TrainingDiverged(
                f"loss {loss:.4f} above 10x initial ({self.initial:.4f}) for {self.bad} consecutive steps"
            )


def pretrain_generator(
    manifest: DatasetManifest,
    config: TrainConfig,
    out_dir,
    resume_from=None,
) -> Path:
    """Unconditional generator training on the train-split stimulus images.

    Conditioning is the learned null embedding throughout; timesteps are
    sampled uniformly.
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = RngKey(config.seed, ("pretrain",))
    if resume_from is not None:
        store, opt, _, _ = load_train_state(resume_from)
    else:
        store = init_unet(config.unet, root.child("init", "unet"))
        init_null_tokens(config.unet, root.child("init", "null"), store)
        init_image_encoder(config.unet, root.child("init", "imgenc"), store)
        opt = OptimizerState()
    store.set_trainable_by(lambda n: n.startswith("unet/") or n == "cond/null_tokens")
    trainable = store.trainable_names()

    raw_imgs = np.stack([manifest.load_image(s) for s in manifest.train_stimuli()])
    train_imgs = image_to_diffusion(raw_imgs)
    sched = make_schedule(config.unet.t_max)
    total = config.pretrain_steps
    if total == 0:
        _loss_csv(out_dir, [], resume_from is not None)
        save_train_state(out_dir, store, opt, config, {"phase": "pretrain"})
        return out_dir
    lr_sched = LrSchedule(config.max_lr, min(config.warmup_steps, total - 1), total)
    guard = _DivergenceGuard()
    rows = []
    start = opt.step
    for step in range(start, lr_sched.total_steps):
        skey = root.child("step", step)
        idx = skey.child("batch").generator().integers(0, len(train_imgs), config.batch_size)
        x0 = train_imgs[idx]
        store.zero_grads()
        n_dropped = 0
        if config.pretrain_conditioning == "image":
            # the generator learns to read token variation from a frozen image
            # encoder; dropout to the learned null keeps guidance available
            img_tok = image_tokens(raw_imgs[idx], config.unet, store)
            drop = skey.child("cdrop").generator().random(config.batch_size) < config.cond_dropout
            n_dropped = int(drop.sum())
            null_b = ops.expand_batch(store["cond/null_tokens"], config.batch_size)
            tokens = ops.where(drop[:, None, None], null_b, Tensor(img_tok))
        elif config.pretrain_conditioning == "null":
            tokens = ops.expand_batch(store["cond/null_tokens"], config.batch_size)
        else:
            raise ValueError(f"unknown pretrain_conditioning {config.pretrain_conditioning!r}")
        loss = diffusion_loss(
            x0, tokens, store, sched, config.unet, skey.child("loss"),
            use_lora=False, timestep_sampling="uniform", offset_lambda=config.offset_lambda,
            parameterization=config.parameterization,
        )
        loss.backward()
        grads = {n: store[n].grad if store[n].grad is not None else np.zeros_like(store[n].data) for n in trainable}
        lr, _ = lr_at(step, lr_sched)
        adamw_step(store, grads, opt, lr, config.weight_decay, *config.betas, config.adam_eps)
        guard.check(step, loss.item())
        rows.append((step, loss.item(), lr, n_dropped))
    _loss_csv(out_dir, rows, resume_from is not None)
    save_train_state(out_dir, store, opt, config, {"phase": "pretrain"})
    return out_dir


def _prepare_joint_store(
    pretrained_ckpt,
    manifest: DatasetManifest,
    subjects: list[str],
    config: TrainConfig,
    root: RngKey,
) -> ParamStore:
    store, _, _, _ = load_train_state(pretrained_ckpt)
    voxels = {sid: manifest.subject_voxels[sid] for sid in subjects}
    brain_cfg = replace(config.brain, window_samples=window_length(config.window_d, manifest.tr))
    init_brain_module(brain_cfg, voxels, root.child("init", "brain"), store)
    if config.finetune_regime == "lora":
        create_lora_adapters(config.unet, root.child("init", "lora"), store)
    return store


def train_single_stage(
    manifest: DatasetManifest,
    split: SplitSpec,
    pretrained_ckpt,
    config: TrainConfig,
    out_dir,
    subjects: list[str] | None = None,
    resume_from=None,
    store_override: ParamStore | None = None,
    opt_override: OptimizerState | None = None,
    lr_scale: dict[str, float] | None = None,
    refs_override: dict[str, list] | None = None,
    stop_after: int | None = None,
) -> Path:
    """Joint training of the brain module and conditioned generator.

    Every repetition is its own sample (no averaging); with probability
    cond_dropout a batch item's tokens are replaced by the learned null
    embedding so classifier-free guidance works at inference.
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    subjects = sorted(subjects if subjects is not None else manifest.subject_ids)
    root = RngKey(config.seed, ("joint",))

    if resume_from is not None:
        store, opt, _, _ = load_train_state(resume_from)
    elif store_override is not None:
        store = store_override
        opt = opt_override if opt_override is not None else OptimizerState()
    else:
        store = _prepare_joint_store(pretrained_ckpt, manifest, subjects, config, root)
        opt = OptimizerState()
    trainable_set = regime_trainable_names(store, config.finetune_regime)
    if lr_scale is None:
        store.set_trainable_by(lambda n: n in trainable_set)
    trainable = store.trainable_names()

    cache = PreprocCache(manifest).build()
    refs = refs_override if refs_override is not None else {sid: split.train_refs[sid] for sid in subjects}
    data = assemble_training_set(manifest, cache, refs, config, shuffle_key=root.child("labels"))
    brain_cfg = replace(config.brain, window_samples=window_length(config.window_d, manifest.tr))
    sched = make_schedule(config.unet.t_max)
    lr_sched = LrSchedule(config.max_lr, config.warmup_steps, config.steps)
    use_lora = config.finetune_regime == "lora"
    guard = _DivergenceGuard()
    rows = []

    # `stop_after` interrupts the run early (the schedule still spans
    # config.steps); resuming from the saved state is then bit-identical to
    # the uninterrupted run.
    last = config.steps if stop_after is None else min(config.steps, opt.step + stop_after)
    for step in range(opt.step, last):
        skey = root.child("step", step)
        pick = skey.child("batch").generator().integers(0, data.n_total, config.batch_size)
        chosen = [data.flat_index[i] for i in pick]
        by_sid: dict[str, list[int]] = {}
        for sid, row in chosen:
            by_sid.setdefault(sid, []).append(row)

        store.zero_grads()
        token_parts, image_parts = [], []
        for sid in sorted(by_sid):
            rows_idx = by_sid[sid]
            x = data.x[sid][rows_idx]
            token_parts.append(
                brain_forward_batch(x, store, brain_cfg, sid, training=True, key=skey.child("drop", sid))
            )
            image_parts.append(data.images[sid][rows_idx])
        tokens = token_parts[0] if len(token_parts) == 1 else ops.concat(token_parts, axis=0)
        x0 = image_to_diffusion(np.concatenate(image_parts, axis=0))

        drop = skey.child("cdrop").generator().random(config.batch_size) < config.cond_dropout
        n_dropped = int(drop.sum())
        if n_dropped:
            null_b = ops.expand_batch(store["cond/null_tokens"], config.batch_size)
            tokens = ops.where(drop[:, None, None], null_b, tokens)

        loss = diffusion_loss(
            x0, tokens, store, sched, config.unet, skey.child("loss"),
            use_lora=use_lora, timestep_sampling="bicubic", offset_lambda=config.offset_lambda,
            parameterization=config.parameterization,
        )
        loss.backward()
        grads = {n: store[n].grad if store[n].grad is not None else np.zeros_like(store[n].data) for n in trainable}
        lr, _ = lr_at(step, lr_sched)
        adamw_step(store, grads, opt, lr, config.weight_decay, *config.betas, config.adam_eps, lr_scale=lr_scale)
        guard.check(step, loss.item())
        rows.append((step, loss.item(), lr, n_dropped))

    _loss_csv(out_dir, rows, resume_from is not None)
    save_train_state(out_dir, store, opt, config, {"phase": "joint", "subjects": subjects, "split": split.kind})
    return out_dir


def train_multi_subject(
    manifest: DatasetManifest,
    split: SplitSpec,
    pretrained_ckpt,
    config: TrainConfig,
    out_dir,
    subjects: list[str],
) -> Path:
    """Joint training over several subjects: per-subject input and timestep
    layers, one shared trunk, shared adapters and null embedding."""
    if len(subjects) < 2:
        raise ValueError("multi-subject training needs at least 2 subjects")
    return train_single_stage(manifest, split, pretrained_ckpt, config, out_dir, subjects=subjects)


def adapt_new_subject(
    multi_ckpt,
    manifest: DatasetManifest,
    split: SplitSpec,
    new_subject: str,
    sessions_used: int,
    config: TrainConfig,
    out_dir,
    trunk_lr_scale: float = 0.1,
) -> Path:
    """Adapt a pretrained multi-subject model to an unseen subject.

    Fresh subject/timestep layers train at full rate; the shared trunk,
    adapters and null embedding finetune at max_lr * trunk_lr_scale. Only the
    first `sessions_used` runs of the new subject are used.
    """
    n_runs = len(manifest.runs[new_subject])
    if not 1 <= sessions_used <= n_runs:
        raise ValueError(f"sessions_used must be in [1, {n_runs}], got {sessions_used}")
    store, _, multi_config, _ = load_train_state(multi_ckpt)
    if f"brain/subject/{new_subject}/w" in store:
        raise ValueError(f"{new_subject} already present in the pretrained checkpoint")
    root = RngKey(config.seed, ("adapt", new_subject))
    brain_cfg = replace(config.brain, window_samples=window_length(config.window_d, manifest.tr))
    add_subject_layers(store, brain_cfg, new_subject, manifest.subject_voxels[new_subject], root.child("fresh"))

    fresh_prefix = (f"brain/subject/{new_subject}/", f"brain/tstep/{new_subject}/")
    trainable = set()
    scale = {}
    for n in store.names():
        if n.startswith(fresh_prefix):
            trainable.add(n)
            scale[n] = 1.0
        elif n.startswith("brain/subject/") or n.startswith("brain/tstep/"):
            continue  # other subjects' layers stay frozen, bit for bit
        elif n.startswith("brain/") or n.startswith("lora/") or n == "cond/null_tokens":
            trainable.add(n)
            scale[n] = trunk_lr_scale
    store.set_trainable_by(lambda n: n in trainable)

    refs = {new_subject: [(r, e) for r, e in split.train_refs[new_subject] if r < sessions_used]}
    return train_single_stage(
        manifest,
        split,
        None,
        config,
        out_dir,
        subjects=[new_subject],
        store_override=store,
        lr_scale=scale,
        refs_override=refs,
    )


# ---------------------------------------------------------------------------
# inference


def make_noise_predictor(store: ParamStore, config: TrainConfig, sched, use_lora: bool):
    """Wrap the network as an eps-predictor regardless of its training target."""

    def unet_call(x, t, tk):
        out = unet_forward(x, t, Tensor(tk), store, config.unet, use_lora=use_lora).data
        if config.parameterization == "v":
            return eps_from_v(x, out, t, sched)
        return out

    return unet_call


def sample_unconditional(ckpt_dir, n: int, key: RngKey, steps: int = 20, batch: int = 32) -> np.ndarray:
    """Images from the learned null embedding alone (generator quality checks)."""
    store, _, config, _ = load_train_state(ckpt_dir)
    sched = make_schedule(config.unet.t_max)
    null = store["cond/null_tokens"].data
    r = config.unet.resolution
    unet_call = make_noise_predictor(store, config, sched, use_lora=False)
    out = np.empty((n, r, r, 3), dtype=np.float32)
    with no_grad():
        for lo in range(0, n, batch):
            b = min(batch, n - lo)
            tokens = np.broadcast_to(null, (b,) + null.shape).copy()
            predict = cfg_predictor(unet_call, tokens, null)
            x = ddim_sample(predict, sched, (b, r, r, 3), key.child(lo), steps=steps, guidance=1.0, clip_final=False)
            out[lo : lo + b] = diffusion_to_image(x)
    return out


def infer(
    ckpt_dir,
    manifest: DatasetManifest,
    epochs: list[Epoch],
    key: RngKey,
    steps: int = 20,
    guidance: float = 3.0,
    batch: int = 16,
) -> tuple[np.ndarray, list[dict]]:
    """One image per epoch via guided DDIM; dropout inactive.

    The initial noise is keyed per epoch (subject, run, event, shift), so
    results do not depend on batch composition.
    """
    store, _, config, _ = load_train_state(ckpt_dir)
    brain_cfg = replace(config.brain, window_samples=window_length(config.window_d, manifest.tr))
    sched = make_schedule(config.unet.t_max)
    use_lora = config.finetune_regime == "lora" and any(n.startswith("lora/") for n in store.names())
    r = config.unet.resolution
    null = store["cond/null_tokens"].data

    for e in epochs:
        if e.n_samples != brain_cfg.window_samples:
            raise ValueError(
                f"epoch {e.stimulus_id} has {e.n_samples} samples; checkpoint expects {brain_cfg.window_samples}"
            )

    unet_call = make_noise_predictor(store, config, sched, use_lora)

    images = np.empty((len(epochs), r, r, 3), dtype=np.float32)
    records = []
    with no_grad():
        for lo in range(0, len(epochs), batch):
            group = epochs[lo : lo + batch]
            toks = []
            for e in group:
                t = brain_forward_batch(e.X[None], store, brain_cfg, e.subject_id, training=False)
                toks.append(t.data[0])
            tokens = np.stack(toks)
            init = np.stack(
                [
                    key.child("init", e.subject_id, e.run_id, e.event_index, e.delta).normal((r, r, 3))
                    for e in group
                ]
            )
            predict = cfg_predictor(unet_call, tokens, null)
            out = ddim_sample(
                predict, sched, (len(group), r, r, 3), key, steps=steps, guidance=guidance,
                clip_final=False, x_init=init,
            )
            images[lo : lo + len(group)] = diffusion_to_image(out)
            for e in group:
                records.append(
                    {
                        "subject": e.subject_id,
                        "stimulus_id": e.stimulus_id,
                        "run_id": e.run_id,
                        "event_index": e.event_index,
                        "delta": e.delta,
                        "repetition": e.repetition,
                        "steps": steps,
                        "guidance": guidance,
                    }
                )
    return images, records
