"""Trial-wise evaluation protocol, time sweeps, and duration sweeps."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..prep import PreprocCache, SplitSpec, extract_epochs, pick_test_repetitions, window_length
from ..substrate.rng import RngKey
from ..synthcortex.dataset import DatasetManifest
from ..trainer import TrainConfig, infer, load_train_state, train_single_stage
from .metrics import ProbeSpec, miou, pixcorr, probe_features, resize_nearest, segment_by_palette, ssim, two_way_id

SCHEMA_VERSION = 1
METRICS = ("pixcorr", "ssim", "two_way_low", "two_way_high", "miou")
RESERVED_ABSENT = ("effnet", "swav", "dreamsim")

LOW = ProbeSpec("low")
HIGH = ProbeSpec("high")


@dataclass
class MetricsReport:
    per_subject: dict[str, dict[str, float]]
    mean: dict[str, float]
    sem: dict[str, float]
    protocol: dict
    reserved_absent: tuple = RESERVED_ABSENT
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "per_subject": self.per_subject,
            "mean": self.mean,
            "sem": self.sem,
            "protocol": self.protocol,
            "reserved_absent": list(self.reserved_absent),
        }

    @staticmethod
    def from_json(d: dict) -> "MetricsReport":
        return MetricsReport(
            per_subject=d["per_subject"],
            mean=d["mean"],
            sem=d["sem"],
            protocol=d["protocol"],
            reserved_absent=tuple(d["reserved_absent"]),
            schema_version=d["schema_version"],
        )


@dataclass
class SweepResult:
    kind: str  # time | duration
    points: list[dict]
    protocol: dict
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "kind": self.kind,
            "points": self.points,
            "protocol": self.protocol,
        }

    @staticmethod
    def from_json(d: dict) -> "SweepResult":
        return SweepResult(d["kind"], d["points"], d["protocol"], d["schema_version"])


def aggregate_subjects(per_subject: dict[str, dict[str, float]]) -> tuple[dict, dict]:
    """Cross-subject mean and SEM (sample std / sqrt(n))."""
    mean, sem = {}, {}
    subjects = sorted(per_subject)
    for metric in next(iter(per_subject.values())):
        vals = np.array([per_subject[s][metric] for s in subjects], dtype=np.float64)
        mean[metric] = float(vals.mean())
        sem[metric] = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return mean, sem


def _gt_features(manifest: DatasetManifest, cache: dict, stim: str, eval_res: int) -> tuple[np.ndarray, np.ndarray]:
    if stim not in cache:
        img = resize_nearest(manifest.load_image(stim), eval_res)
        cache[stim] = (probe_features(img, LOW), probe_features(img, HIGH))
    return cache[stim]


def score_trials(
    manifest: DatasetManifest,
    recon_images: np.ndarray,
    epochs: list,
    eval_res: int,
    gt_feature_cache: dict | None = None,
) -> dict[str, dict[str, float]]:
    """Per-subject means of all metrics for aligned (reconstruction, epoch) pairs."""
    gt_feature_cache = gt_feature_cache if gt_feature_cache is not None else {}
    by_subject: dict[str, dict] = {}
    n_classes = manifest.palette.shape[0]
    for img, ep in zip(recon_images, epochs):
        d = by_subject.setdefault(
            ep.subject_id,
            {"pix": [], "ssim": [], "miou": [], "rl": [], "rh": [], "gl": [], "gh": [], "labels": [], "flags": 0},
        )
        recon = resize_nearest(img, eval_res)
        gt_img = resize_nearest(manifest.load_image(ep.stimulus_id), eval_res)
        r, flagged = pixcorr(recon, gt_img)
        d["pix"].append(r)
        d["flags"] += int(flagged)
        d["ssim"].append(ssim(recon, gt_img))
        gt_mask = segment_by_palette(gt_img, manifest.palette)
        d["miou"].append(miou(segment_by_palette(recon, manifest.palette), gt_mask, n_classes))
        gl, gh = _gt_features(manifest, gt_feature_cache, ep.stimulus_id, eval_res)
        d["rl"].append(probe_features(recon, LOW))
        d["rh"].append(probe_features(recon, HIGH))
        d["gl"].append(gl)
        d["gh"].append(gh)
        d["labels"].append(ep.stimulus_id)

    out: dict[str, dict[str, float]] = {}
    for sid, d in sorted(by_subject.items()):
        low_id, low_excl = two_way_id(np.stack(d["rl"]), np.stack(d["gl"]), d["labels"])
        high_id, high_excl = two_way_id(np.stack(d["rh"]), np.stack(d["gh"]), d["labels"])
        out[sid] = {
            "pixcorr": float(np.mean(d["pix"])),
            "ssim": float(np.mean(d["ssim"])),
            "two_way_low": low_id,
            "two_way_high": high_id,
            "miou": float(np.mean(d["miou"])),
            "n_trials": len(d["labels"]),
            "flagged_constant": d["flags"],
            "excluded_features": low_excl + high_excl,
        }
    return out


def chosen_test_refs(manifest: DatasetManifest, split: SplitSpec, rep_map: dict[str, int]) -> dict[str, list]:
    """One (run, event) ref per test stimulus per subject, by repetition index."""
    refs: dict[str, list] = {}
    for sid in manifest.subject_ids:
        if sid not in split.test_refs:
            continue
        refs[sid] = []
        for stim in split.test_stimuli:
            locs = manifest.repetition_map[sid][stim]
            r, e = locs[rep_map[stim]]
            refs[sid].append((int(r), int(e)))
    return refs


def evaluate_split(
    ckpt_dir,
    manifest: DatasetManifest,
    split: SplitSpec,
    key: RngKey,
    steps: int = 20,
    guidance: float = 3.0,
    eval_resolution: int | None = None,
    decoder=None,
    window_t: float | None = None,
    window_d: float | None = None,
    delta: float = 0.0,
) -> MetricsReport:
    """Trial-wise metrics, per-subject means, SEM across subjects.

    On the standard split, one seeded repetition of three per test stimulus;
    on the time-resolved split every test-run trial is scored (repetition
    locations there may fall on training runs, so the one-of-three protocol
    does not apply).
    """
    if not split.test_stimuli:
        raise ValueError("split has an empty test side")
    if ckpt_dir is not None:
        _, _, tc, _ = load_train_state(ckpt_dir)
        window_t = tc.window_t if window_t is None else window_t
        window_d = tc.window_d if window_d is None else window_d
    window_t = 3.0 if window_t is None else window_t
    window_d = 8.0 if window_d is None else window_d
    eval_res = eval_resolution or manifest.resolution

    if split.kind == "time_resolved":
        rep_map = {}
        refs = split.test_refs
    else:
        rep_map = pick_test_repetitions(split, key.child("reps"))
        refs = chosen_test_refs(manifest, split, rep_map)
    cache = PreprocCache(manifest).build()
    epochs, _ = extract_epochs(cache, refs, window_t, window_d, delta)
    if decoder is not None:
        images = decoder(epochs)
    else:
        # keyed like the sweep's per-shift evaluation, so an unshifted sweep
        # point reproduces this report exactly
        images, _ = infer(ckpt_dir, manifest, epochs, key.child("gen", delta), steps=steps, guidance=guidance)

    per_subject = score_trials(manifest, images, epochs, eval_res)
    mean, sem = aggregate_subjects(per_subject)
    protocol = {
        "split": split.kind,
        "window_t": window_t,
        "window_d": window_d,
        "delta": delta,
        "steps": steps,
        "guidance": guidance,
        "eval_resolution": eval_res,
        "repetition_map": rep_map,
        "seed_path": repr(key),
    }
    return MetricsReport(per_subject, mean, sem, protocol)


# ---------------------------------------------------------------------------
# shifted-window sweep


def _sweep_point_eval(
    ckpt,
    manifest: DatasetManifest,
    epochs: list,
    key: RngKey,
    eval_res: int,
    steps: int,
    guidance: float,
    gt_cache: dict,
) -> tuple[dict, dict]:
    images, _ = infer(ckpt, manifest, epochs, key, steps=steps, guidance=guidance)
    per_subject = score_trials(manifest, images, epochs, eval_res, gt_cache)
    # identification of the previous / next stimulus from the same reconstructions
    neighbor: dict[str, dict[str, float]] = {}
    for which in ("prev", "next"):
        feats_by_sid: dict[str, dict] = {}
        for img, ep in zip(images, epochs):
            other = ep.prev_stimulus_id if which == "prev" else ep.next_stimulus_id
            if other is None:
                continue
            d = feats_by_sid.setdefault(ep.subject_id, {"r": [], "g": [], "labels": []})
            d["r"].append(probe_features(resize_nearest(img, eval_res), LOW))
            d["g"].append(_gt_features(manifest, gt_cache, other, eval_res)[0])
            d["labels"].append(other)
        vals = {}
        for sid, d in sorted(feats_by_sid.items()):
            if len(d["labels"]) >= 2:
                vals[sid], _ = two_way_id(np.stack(d["r"]), np.stack(d["g"]), d["labels"])
        if vals:
            neighbor[which] = vals
    return per_subject, neighbor


def time_sweep(
    general_ckpt,
    specialized_ckpts: dict[float, object],
    manifest: DatasetManifest,
    split: SplitSpec,
    key: RngKey,
    deltas: list[float],
    steps: int = 20,
    guidance: float = 3.0,
    eval_resolution: int | None = None,
    max_trials_per_subject: int | None = None,
) -> SweepResult:
    """Evaluate the general model on shifted test windows, and per-shift
    specialized models on the same epochs. Requires the time-resolved split so
    neighboring trials stay on the test side."""
    if split.kind != "time_resolved":
        raise ValueError("time sweeps need the time-resolved split")
    _, _, tc, _ = load_train_state(general_ckpt)
    t, d = tc.window_t, tc.window_d
    t_len = window_length(d, manifest.tr)
    eval_res = eval_resolution or manifest.resolution
    cache = PreprocCache(manifest).build()
    gt_cache: dict = {}

    refs = split.test_refs
    if max_trials_per_subject is not None:
        refs = {}
        for sid, lst in split.test_refs.items():
            if len(lst) <= max_trials_per_subject:
                refs[sid] = lst
            else:
                pick = key.child("cap", sid).generator().choice(len(lst), max_trials_per_subject, replace=False)
                refs[sid] = [lst[i] for i in sorted(pick)]

    points = []
    for delta in sorted(deltas):
        epochs, skipped = extract_epochs(cache, refs, t, d, delta, skip_out_of_bounds=True)
        general_subj, neighbor = _sweep_point_eval(
            general_ckpt, manifest, epochs, key.child("gen", delta), eval_res, steps, guidance, gt_cache
        )
        g_mean, g_sem = aggregate_subjects(general_subj)
        point = {
            "delta": delta,
            "window_end": t + delta + t_len * manifest.tr,
            "n_trials": len(epochs),
            "n_skipped": skipped,
            "general": {"per_subject": general_subj, "mean": g_mean, "sem": g_sem},
            "specialized": None,
        }
        for which, vals in neighbor.items():
            mean, sem = aggregate_subjects({s: {"two_way_low": v} for s, v in vals.items()})
            point[f"{which}_stimulus_id_general"] = {
                "per_subject": vals,
                "mean": mean["two_way_low"],
                "sem": sem["two_way_low"],
            }
        if delta in specialized_ckpts:
            spec_subj, _ = _sweep_point_eval(
                specialized_ckpts[delta], manifest, epochs, key.child("spec", delta), eval_res, steps, guidance, gt_cache
            )
            s_mean, s_sem = aggregate_subjects(spec_subj)
            point["specialized"] = {"per_subject": spec_subj, "mean": s_mean, "sem": s_sem}
        points.append(point)

    ends = [p["window_end"] for p in points]
    if ends != sorted(ends):
        raise RuntimeError("window-end times must increase with delta")
    protocol = {
        "window_t": t,
        "window_d": d,
        "deltas": sorted(deltas),
        "steps": steps,
        "guidance": guidance,
        "eval_resolution": eval_res,
        "max_trials_per_subject": max_trials_per_subject,
        "specialized_available": sorted(specialized_ckpts),
    }
    return SweepResult("time", points, protocol)


def duration_sweep(
    manifest: DatasetManifest,
    split: SplitSpec,
    pretrained_ckpt,
    base_config: TrainConfig,
    durations: list[float],
    out_root,
    key: RngKey,
    subjects: list[str] | None = None,
    steps: int = 20,
    guidance: float = 3.0,
) -> SweepResult:
    """Train one model per window duration and evaluate each on the split."""
    out_root = Path(out_root)
    points = []
    for dur in durations:
        t_len = window_length(dur, manifest.tr)
        cfg = replace(base_config, window_d=dur)
        ckpt = train_single_stage(
            manifest, split, pretrained_ckpt, cfg, out_root / f"dur_{t_len}tr", subjects=subjects
        )
        report = evaluate_split(ckpt, manifest, split, key.child("eval", t_len), steps=steps, guidance=guidance)
        points.append(
            {
                "duration_s": dur,
                "window_samples": t_len,
                "mean": report.mean,
                "sem": report.sem,
                "per_subject": report.per_subject,
            }
        )
    protocol = {"window_t": base_config.window_t, "durations": list(durations), "steps": steps, "guidance": guidance}
    return SweepResult("duration", points, protocol)
