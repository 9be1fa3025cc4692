"""Command-line entry point wiring every stage together.

One flat binary with subcommands; a shared JSON config holds all knobs, CLI
flags override config keys through dotted paths (--train.steps=2000), and
every run writes its resolved config next to its outputs so any result can be
reproduced from that file alone. The only environment variable honored is
BOLD2IMG_OUT (output root).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .brainmod import AGG_IN, AGG_OUT, BrainModuleConfig
from .diffgen import UNetConfig
from .evalkit import duration_sweep, emit_report, emit_sweep, evaluate_split, time_sweep
from .prep import PreprocCache, build_split_standard, build_split_time_resolved, cache_epochs, extract_epochs
from .substrate import RngKey, write_tensor
from .synthcortex import DatasetConfig, NoiseConfig, SceneConfig, SubjectConfig, build_dataset, load_manifest
from .trainer import (
    REGIMES,
    TrainConfig,
    adapt_new_subject,
    infer,
    load_train_state,
    pretrain_generator,
    train_multi_subject,
    train_single_stage,
)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "workers": 0,  # 0 -> all available cores
    "paths": {"out_root": "b2i_out", "data": "", "pretrain": ""},
    "dataset": {
        "n_subjects": 4,
        "n_train_unique": 500,
        "n_test_unique": 100,
        "repetitions": 3,
        "trials_per_run": 50,
        "tr": 1.3,
        "resolution": 32,
        "noise_scale": 1.0,
        "drift_scale": 1.0,
        "voxel_lo": 400,
        "voxel_hi": 600,
    },
    "train": {
        "steps": 10000,
        "pretrain_steps": 5000,
        "batch_size": 32,
        "max_lr": 1e-3,
        "weight_decay": 0.01,
        "beta1": 0.9,
        "beta2": 0.999,
        "warmup_steps": 500,
        "cond_dropout": 0.1,
        "regime": "lora",
        "window_t": 3.0,
        "window_d": 8.0,
        "delta": 0.0,
        "offset_lambda": 0.1,
        "shuffle_conditioning": False,
        "brain": {
            "hidden": 128,
            "tokens": 8,
            "token_dim": 64,
            "dropout": 0.5,
            "timestep_layer_enabled": True,
            "aggregation_position": AGG_OUT,
        },
        "unet": {"channels": [32, 64, 128], "t_max": 1000},
    },
    "eval": {
        "steps": 20,
        "guidance": 3.0,
        "eval_resolution": 32,
        "test_run_fraction": 45.0 / 480.0,
        "deltas_tr": list(range(-6, 10)),  # the 16 shifted windows
        "max_trials_per_subject": 0,  # 0 -> all
    },
}


def _merge_validate(defaults, given, path=""):
    """Recursive merge rejecting unknown keys; returns the resolved dict."""
    if not isinstance(given, dict):
        raise ConfigError(path or "<root>", f"expected an object, got {type(given).__name__}")
    out = {}
    for key, dval in defaults.items():
        if key in given:
            gval = given[key]
            if isinstance(dval, dict):
                out[key] = _merge_validate(dval, gval, f"{path}.{key}" if path else key)
            else:
                out[key] = gval
        else:
            out[key] = json.loads(json.dumps(dval))  # deep copy
    for key in given:
        if key not in defaults:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
    return out


def _apply_override(config: dict, dotted: str, raw: str):
    keys = dotted.split(".")
    node = config
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(dotted, "unknown key")
        node = node[k]
    leaf = keys[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(dotted, "unknown key")
    try:
        node[leaf] = json.loads(raw)
    except json.JSONDecodeError:
        node[leaf] = raw  # bare strings (e.g. regime names)


def resolve_config(config_file: str | None, overrides: list[str]) -> dict:
    given = {}
    if config_file:
        doc = json.loads(Path(config_file).read_text())
        doc.pop("run", None)  # provenance block from an emitted resolved config
        given = doc
    config = _merge_validate(DEFAULT_CONFIG, given)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key.path=value")
        dotted, raw = item.split("=", 1)
        _apply_override(config, dotted, raw)
    root = os.environ.get("BOLD2IMG_OUT", config["paths"]["out_root"])
    config["paths"]["out_root"] = root
    if not config["paths"]["data"]:
        config["paths"]["data"] = str(Path(root) / "dataset")
    if not config["paths"]["pretrain"]:
        config["paths"]["pretrain"] = str(Path(root) / "pretrain")
    if not config["workers"]:
        config["workers"] = os.cpu_count() or 1
    return config


def dataset_config(c: dict) -> DatasetConfig:
    d = c["dataset"]
    return DatasetConfig(
        n_subjects=d["n_subjects"],
        n_train_unique=d["n_train_unique"],
        n_test_unique=d["n_test_unique"],
        repetitions=d["repetitions"],
        trials_per_run=d["trials_per_run"],
        tr=d["tr"],
        resolution=d["resolution"],
        scene=SceneConfig(),
        subject=SubjectConfig(voxel_range=(d["voxel_lo"], d["voxel_hi"])),
        noise=NoiseConfig(noise_scale=d["noise_scale"], drift_scale=d["drift_scale"]),
    )


def train_config(c: dict) -> TrainConfig:
    t = c["train"]
    brain = BrainModuleConfig(
        hidden=t["brain"]["hidden"],
        tokens=t["brain"]["tokens"],
        token_dim=t["brain"]["token_dim"],
        dropout=t["brain"]["dropout"],
        timestep_layer_enabled=t["brain"]["timestep_layer_enabled"],
        aggregation_position=t["brain"]["aggregation_position"],
    )
    unet = UNetConfig(
        resolution=c["dataset"]["resolution"],
        channels=tuple(t["unet"]["channels"]),
        tokens=t["brain"]["tokens"],
        token_dim=t["brain"]["token_dim"],
        t_max=t["unet"]["t_max"],
    )
    return TrainConfig(
        steps=t["steps"],
        pretrain_steps=t["pretrain_steps"],
        batch_size=t["batch_size"],
        max_lr=t["max_lr"],
        weight_decay=t["weight_decay"],
        betas=(t["beta1"], t["beta2"]),
        warmup_steps=t["warmup_steps"],
        cond_dropout=t["cond_dropout"],
        finetune_regime=t["regime"],
        window_t=t["window_t"],
        window_d=t["window_d"],
        delta=t["delta"],
        offset_lambda=t["offset_lambda"],
        shuffle_conditioning=t["shuffle_conditioning"],
        seed=c["seed"],
        brain=brain,
        unet=unet,
    )


def _write_resolved(config: dict, command: str, args: dict, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = dict(config)
    doc["run"] = {"command": command, "args": {k: v for k, v in args.items() if v is not None}}
    (out_dir / "resolved_config.json").write_text(json.dumps(doc, sort_keys=True, indent=1))


def _split_for(manifest, kind: str, config: dict):
    if kind == "standard":
        return build_split_standard(manifest)
    if kind == "time-resolved":
        return build_split_time_resolved(
            manifest, RngKey(config["seed"], ("split",)), config["eval"]["test_run_fraction"]
        )
    raise ConfigError("split", f"unknown split kind {kind!r}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(config, args):
    out = Path(config["paths"]["data"])
    manifest = build_dataset(
        dataset_config(config), RngKey(config["seed"], ("dataset",)), out, workers=config["workers"]
    )
    _write_resolved(config, "gen-data", vars(args), out)
    print(f"dataset: {len(manifest.stimulus_ids)} stimuli, {len(manifest.subject_ids)} subjects -> {out}")
    return EXIT_OK


def cmd_preprocess(config, args):
    manifest = load_manifest(config["paths"]["data"])
    cache = PreprocCache(manifest).build()
    split = build_split_standard(manifest)
    t, d = config["train"]["window_t"], config["train"]["window_d"]
    refs = {s: split.train_refs[s] + split.test_refs[s] for s in manifest.subject_ids}
    epoch_dir = cache_epochs(cache, refs, Path(config["paths"]["data"]) / f"epochs_t{t}_d{d}", t, d)
    _write_resolved(config, "preprocess", vars(args), cache.dir)
    print(f"preprocessed runs cached in {cache.dir}; epochs in {epoch_dir}")
    return EXIT_OK


def cmd_pretrain_gen(config, args):
    manifest = load_manifest(config["paths"]["data"])
    out = Path(config["paths"]["pretrain"])
    pretrain_generator(manifest, train_config(config), out)
    _write_resolved(config, "pretrain-gen", vars(args), out)
    print(f"pretrained generator -> {out}")
    return EXIT_OK


def cmd_train(config, args):
    manifest = load_manifest(config["paths"]["data"])
    tc = train_config(config)
    if args.regime:
        tc = replace(tc, finetune_regime=args.regime)
    if args.window_t is not None:
        tc = replace(tc, window_t=args.window_t)
    if args.window_d is not None:
        tc = replace(tc, window_d=args.window_d)
    if args.delta is not None:
        tc = replace(tc, delta=args.delta)
    tc.validate()
    split = _split_for(manifest, args.split, config)
    out = Path(args.out or Path(config["paths"]["out_root"]) / "train")
    subjects = args.subjects.split(",") if args.subjects else None
    if args.adapt_subject:
        if args.sessions_used is None:
            raise ConfigError("sessions-used", "required with --adapt-subject")
        ckpt = adapt_new_subject(
            args.from_ckpt, manifest, split, args.adapt_subject, args.sessions_used, tc, out
        )
    elif args.multi_subject:
        ckpt = train_multi_subject(manifest, split, config["paths"]["pretrain"], tc, out, subjects or manifest.subject_ids)
    else:
        ckpt = train_single_stage(manifest, split, config["paths"]["pretrain"], tc, out, subjects=subjects)
    _write_resolved(config, "train", vars(args), out)
    print(f"trained checkpoint -> {ckpt}")
    return EXIT_OK


def cmd_infer(config, args):
    manifest = load_manifest(config["paths"]["data"])
    split = _split_for(manifest, args.split, config)
    cache = PreprocCache(manifest).build()
    _, _, tc, _ = load_train_state(args.ckpt)
    refs = {s: split.test_refs[s][: args.limit] if args.limit else split.test_refs[s] for s in split.test_refs}
    epochs, _ = extract_epochs(cache, refs, tc.window_t, tc.window_d, args.delta or 0.0)
    key = RngKey(config["seed"], ("infer",))
    images, records = infer(
        args.ckpt, manifest, epochs, key, steps=config["eval"]["steps"], guidance=config["eval"]["guidance"]
    )
    out = Path(args.out or Path(config["paths"]["out_root"]) / "infer")
    out.mkdir(parents=True, exist_ok=True)
    for i, (img, rec) in enumerate(zip(images, records)):
        write_tensor(out / f"recon{i:05d}.bin", img)
    (out / "records.json").write_text(json.dumps(records, sort_keys=True, indent=1))
    _write_resolved(config, "infer", vars(args), out)
    print(f"{len(images)} reconstructions -> {out}")
    return EXIT_OK


def cmd_eval(config, args):
    manifest = load_manifest(config["paths"]["data"])
    split = _split_for(manifest, args.split, config)
    report = evaluate_split(
        args.ckpt,
        manifest,
        split,
        RngKey(config["seed"], ("eval",)),
        steps=config["eval"]["steps"],
        guidance=config["eval"]["guidance"],
        eval_resolution=config["eval"]["eval_resolution"],
    )
    out = Path(args.out or Path(config["paths"]["out_root"]) / "eval")
    emit_report(report, out)
    _write_resolved(config, "eval", vars(args), out)
    for metric, value in sorted(report.mean.items()):
        print(f"{metric}: {value:.4f} +- {report.sem[metric]:.4f}")
    return EXIT_OK


def cmd_sweep_time(config, args):
    manifest = load_manifest(config["paths"]["data"])
    split = _split_for(manifest, "time-resolved", config)
    specialized = {}
    for item in args.specialized or []:
        delta_str, ckpt = item.split("=", 1)
        specialized[float(delta_str)] = ckpt
    deltas = [k * manifest.tr for k in config["eval"]["deltas_tr"]]
    cap = config["eval"]["max_trials_per_subject"] or None
    sweep = time_sweep(
        args.general,
        specialized,
        manifest,
        split,
        RngKey(config["seed"], ("sweep-time",)),
        deltas,
        steps=config["eval"]["steps"],
        guidance=config["eval"]["guidance"],
        max_trials_per_subject=cap,
    )
    out = Path(args.out or Path(config["paths"]["out_root"]) / "sweep_time")
    emit_sweep(sweep, out, "sweep_time")
    _write_resolved(config, "sweep-time", vars(args), out)
    print(f"time sweep over {len(deltas)} shifts -> {out}")
    return EXIT_OK


def cmd_sweep_duration(config, args):
    manifest = load_manifest(config["paths"]["data"])
    split = _split_for(manifest, "standard", config)
    durations = [k * manifest.tr for k in (args.durations_tr or [1, 2, 3, 4, 5, 6])]
    out = Path(args.out or Path(config["paths"]["out_root"]) / "sweep_duration")
    sweep = duration_sweep(
        manifest,
        split,
        config["paths"]["pretrain"],
        train_config(config),
        durations,
        out,
        RngKey(config["seed"], ("sweep-duration",)),
    )
    emit_sweep(sweep, out, "sweep_duration")
    _write_resolved(config, "sweep-duration", vars(args), out)
    print(f"duration sweep over {durations} -> {out}")
    return EXIT_OK


def cmd_ablate_brainmod(config, args):
    manifest = load_manifest(config["paths"]["data"])
    split = _split_for(manifest, "standard", config)
    base = train_config(config)
    variants = {
        "no_timestep_agg_out": replace(base.brain, timestep_layer_enabled=False),
        "timestep_agg_in": replace(base.brain, aggregation_position=AGG_IN),
        "timestep_agg_out": base.brain,
    }
    out = Path(args.out or Path(config["paths"]["out_root"]) / "ablate_brainmod")
    results = {}
    for name, brain in sorted(variants.items()):
        tc = replace(base, brain=brain)
        ckpt = train_single_stage(manifest, split, config["paths"]["pretrain"], tc, out / name)
        report = evaluate_split(
            ckpt, manifest, split, RngKey(config["seed"], ("ablate", name)),
            steps=config["eval"]["steps"], guidance=config["eval"]["guidance"],
        )
        emit_report(report, out / name)
        results[name] = report.mean
    (out / "ablation.json").write_text(json.dumps(results, sort_keys=True, indent=1))
    _write_resolved(config, "ablate-brainmod", vars(args), out)
    for name, mean in sorted(results.items()):
        print(f"{name}: two_way_low={mean['two_way_low']:.1f} miou={mean['miou']:.3f}")
    return EXIT_OK


def cmd_selftest(config, args):
    from .selftest import run_selftest

    ok = run_selftest(verbose=True)
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bold2img", description=__doc__)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY.PATH=VALUE", help="config override")
    p.add_argument("--workers", type=int, help="worker pool size (default: all cores)")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data")
    sub.add_parser("preprocess")
    sub.add_parser("pretrain-gen")

    t = sub.add_parser("train")
    t.add_argument("--regime", choices=REGIMES)
    t.add_argument("--multi-subject", action="store_true")
    t.add_argument("--adapt-subject")
    t.add_argument("--from-ckpt")
    t.add_argument("--sessions-used", type=int)
    t.add_argument("--subjects")
    t.add_argument("--split", default="standard", choices=["standard", "time-resolved"])
    t.add_argument("--window-t", type=float)
    t.add_argument("--window-d", type=float)
    t.add_argument("--delta", type=float)
    t.add_argument("--out")

    i = sub.add_parser("infer")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--split", default="standard", choices=["standard", "time-resolved"])
    i.add_argument("--delta", type=float)
    i.add_argument("--limit", type=int)
    i.add_argument("--out")

    e = sub.add_parser("eval")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="standard", choices=["standard", "time-resolved"])
    e.add_argument("--out")

    st = sub.add_parser("sweep-time")
    st.add_argument("--general", required=True)
    st.add_argument("--specialized", action="append", metavar="DELTA=CKPT")
    st.add_argument("--out")

    sd = sub.add_parser("sweep-duration")
    sd.add_argument("--durations-tr", type=int, nargs="*")
    sd.add_argument("--out")

    ab = sub.add_parser("ablate-brainmod")
    ab.add_argument("--out")

    sub.add_parser("selftest")
    return p


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "preprocess": cmd_preprocess,
    "pretrain-gen": cmd_pretrain_gen,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "sweep-time": cmd_sweep_time,
    "sweep-duration": cmd_sweep_duration,
    "ablate-brainmod": cmd_ablate_brainmod,
    "selftest": cmd_selftest,
}


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args.config, args.set)
        if args.workers:
            config["workers"] = args.workers
        return _COMMANDS[args.command](config, args)
    except ConfigError as e:
        print(f"config error at {e.path}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
