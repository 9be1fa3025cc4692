"""Dataset assembly: stimulus catalog, per-subject runs, on-disk layout.

Layout under the dataset root:
    manifest.json
    stimuli/images/<stim>.bin   (32, 32, 3) float32 RGB
    stimuli/masks/<stim>.bin    (32, 32) int32 class ids
    subjects/<sub>/<field>.bin  voxel tuning arrays
    runs/<sub>_<run>.bin        (C, n_volumes) float32

Generation is a pure function of (config, seed): a rebuild is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..substrate.checkpoint import read_tensor, write_tensor
from ..substrate.rng import RngKey
from .scenes import DEFAULT_PALETTE, SceneConfig, StimulusScene, render_mask, render_scene, sample_scene, validate_palette
from .simulate import TR_DEFAULT, FmriRun, NoiseConfig, RunTimeline, Event, make_timeline, simulate_run
from .subjects import SubjectConfig, SubjectSpec, make_subject

SCHEMA_VERSION = 1

_SUBJECT_FIELDS = ("rf_center", "rf_width", "colorsel", "gain", "noise_sigma", "delay_jitter")


@dataclass
class DatasetConfig:
    n_subjects: int = 4
    n_train_unique: int = 500
    n_test_unique: int = 100
    repetitions: int = 3
    trials_per_run: int = 50
    tr: float = TR_DEFAULT
    resolution: int = 32
    scene: SceneConfig = field(default_factory=SceneConfig)
    subject: SubjectConfig = field(default_factory=SubjectConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    @property
    def n_unique(self) -> int:
        return self.n_train_unique + self.n_test_unique

    @property
    def trials_per_subject(self) -> int:
        return self.n_unique * self.repetitions

    @property
    def runs_per_subject(self) -> int:
        return self.trials_per_subject // self.trials_per_run


def plan_dataset(config: DatasetConfig) -> dict:
    """Trial/run bookkeeping without touching disk (scale dry-checks)."""
    if config.trials_per_subject % config.trials_per_run:
        raise ValueError(
            f"{config.trials_per_subject} trials per subject do not fill runs of {config.trials_per_run}"
        )
    return {
        "train_trials_per_subject": config.n_train_unique * config.repetitions,
        "test_trials_per_subject": config.n_test_unique * config.repetitions,
        "trials_per_subject": config.trials_per_subject,
        "runs_per_subject": config.runs_per_subject,
    }


@dataclass
class DatasetManifest:
    root: Path
    palette: np.ndarray
    tr: float
    resolution: int
    subject_ids: list[str]
    subject_voxels: dict[str, int]
    stimulus_ids: list[str]
    scenes: dict[str, StimulusScene]
    split_tag: dict[str, str]  # stimulus -> train | test
    runs: dict[str, list[dict]]  # subject -> [{run_id, file, events}]
    repetition_map: dict[str, dict[str, list]]  # subject -> stim -> [(run_idx, event_idx)] * reps
    config: dict

    def train_stimuli(self) -> list[str]:
        return [s for s in self.stimulus_ids if self.split_tag[s] == "train"]

    def test_stimuli(self) -> list[str]:
        return [s for s in self.stimulus_ids if self.split_tag[s] == "test"]

    def load_image(self, stim: str) -> np.ndarray:
        return read_tensor(self.root / "stimuli" / "images" / f"{stim}.bin")

    def load_mask(self, stim: str) -> np.ndarray:
        return read_tensor(self.root / "stimuli" / "masks" / f"{stim}.bin")

    def subject_spec(self, subject: str) -> SubjectSpec:
        d = self.root / "subjects" / subject
        fields = {f: read_tensor(d / f"{f}.bin") for f in _SUBJECT_FIELDS}
        fields = {k: v.astype(np.float64) for k, v in fields.items()}
        spec = SubjectSpec(subject, self.subject_voxels[subject], **fields)
        spec.validate()
        return spec

    def load_run(self, subject: str, run_idx: int) -> FmriRun:
        entry = self.runs[subject][run_idx]
        data = read_tensor(self.root / entry["file"])
        events = [Event(e["onset"], e["stimulus_id"], e["duration"]) for e in entry["events"]]
        tl = RunTimeline(self.tr, data.shape[1], events)
        return FmriRun(data, tl, subject, entry["run_id"])


def build_dataset(config: DatasetConfig, key: RngKey, out_dir, workers: int = 1) -> DatasetManifest:
    """Generate and write the full dataset; returns its manifest.

    Run synthesis parallelizes over runs (each draws from its own derived
    stream, so output bytes do not depend on `workers`).
    """
    plan = plan_dataset(config)
    validate_palette(DEFAULT_PALETTE)
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)

    # --- stimulus catalog (shared across subjects) ---
    stim_ids = [f"stim{i:05d}" for i in range(config.n_unique)]
    scenes: dict[str, StimulusScene] = {}
    split_tag: dict[str, str] = {}
    for i, sid in enumerate(stim_ids):
        scenes[sid] = sample_scene(key.child("scene", sid), config.scene)
        split_tag[sid] = "train" if i < config.n_train_unique else "test"
        write_tensor(root / "stimuli" / "images" / f"{sid}.bin", render_scene(scenes[sid], config.resolution))
        write_tensor(root / "stimuli" / "masks" / f"{sid}.bin", render_mask(scenes[sid], config.resolution))

    # --- subjects with distinct voxel counts ---
    subject_ids = [f"sub{i + 1:02d}" for i in range(config.n_subjects)]
    subjects: dict[str, SubjectSpec] = {}
    used_c: set[int] = set()
    for sid in subject_ids:
        for attempt in range(64):
            spec = make_subject(sid, key.child("subject", sid, attempt), config.subject)
            if spec.n_voxels not in used_c:
                break
        else:
            raise RuntimeError("could not draw distinct voxel counts")
        used_c.add(spec.n_voxels)
        subjects[sid] = spec
        for f in _SUBJECT_FIELDS:
            write_tensor(root / "subjects" / sid / f"{f}.bin", getattr(spec, f).astype(np.float64))

    # --- per-subject trial sequences and runs ---
    runs: dict[str, list[dict]] = {}
    rep_map: dict[str, dict[str, list]] = {}
    jobs = []
    for sid in subject_ids:
        sequence = np.repeat(np.arange(config.n_unique), config.repetitions)
        order = key.child("order", sid).permutation(len(sequence))
        sequence = sequence[order]
        runs[sid] = [None] * config.runs_per_subject
        rep_map[sid] = {s: [] for s in stim_ids}
        for r in range(config.runs_per_subject):
            chunk = sequence[r * config.trials_per_run : (r + 1) * config.trials_per_run]
            trial_stims = [stim_ids[i] for i in chunk]
            jobs.append((sid, r, trial_stims))
            for ei, stim in enumerate(trial_stims):
                rep_map[sid][stim].append([r, ei])

    def synthesize(job):
        sid, r, trial_stims = job
        timeline = make_timeline(trial_stims, config.tr)
        run_id = f"run{r:03d}"
        run = simulate_run(subjects[sid], timeline, scenes, key.child("run", sid, run_id), config.noise, run_id)
        return sid, r, run, timeline

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(synthesize, jobs))
    else:
        results = [synthesize(j) for j in jobs]
    for sid, r, run, timeline in results:
        rel = f"runs/{sid}_{run.run_id}.bin"
        write_tensor(root / rel, run.data)
        runs[sid][r] = {"run_id": run.run_id, "file": rel, "events": [e.to_json() for e in timeline.events]}

    for sid in subject_ids:
        for stim in stim_ids:
            if len(rep_map[sid][stim]) != config.repetitions:
                raise RuntimeError(f"{sid}/{stim}: {len(rep_map[sid][stim])} repetitions != {config.repetitions}")

    manifest = DatasetManifest(
        root=root,
        palette=DEFAULT_PALETTE.copy(),
        tr=config.tr,
        resolution=config.resolution,
        subject_ids=subject_ids,
        subject_voxels={s: subjects[s].n_voxels for s in subject_ids},
        stimulus_ids=stim_ids,
        scenes=scenes,
        split_tag=split_tag,
        runs=runs,
        repetition_map=rep_map,
        config={"plan": plan, **_config_json(config)},
    )
    _write_manifest(manifest)
    return manifest


def _config_json(config: DatasetConfig) -> dict:
    d = asdict(config)
    for k, v in list(d.get("scene", {}).items()):
        if isinstance(v, tuple):
            d["scene"][k] = list(v)
    return {"dataset_config": json.loads(json.dumps(d, default=list))}


def _write_manifest(m: DatasetManifest):
    doc = {
        "schema_version": SCHEMA_VERSION,
        "palette": m.palette.tolist(),
        "tr": m.tr,
        "resolution": m.resolution,
        "subjects": [{"id": s, "n_voxels": m.subject_voxels[s], "dir": f"subjects/{s}"} for s in m.subject_ids],
        "stimuli": [
            {
                "id": s,
                "split": m.split_tag[s],
                "scene": m.scenes[s].to_json(),
                "image": f"stimuli/images/{s}.bin",
                "mask": f"stimuli/masks/{s}.bin",
            }
            for s in m.stimulus_ids
        ],
        "runs": m.runs,
        "repetition_map": m.repetition_map,
        "config": m.config,
    }
    (m.root / "manifest.json").write_text(json.dumps(doc, sort_keys=True, indent=1))


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    doc = json.loads((root / "manifest.json").read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{root}: unsupported dataset schema")
    return DatasetManifest(
        root=root,
        palette=np.asarray(doc["palette"], dtype=np.float32),
        tr=doc["tr"],
        resolution=doc["resolution"],
        subject_ids=[s["id"] for s in doc["subjects"]],
        subject_voxels={s["id"]: s["n_voxels"] for s in doc["subjects"]},
        stimulus_ids=[s["id"] for s in doc["stimuli"]],
        scenes={s["id"]: StimulusScene.from_json(s["scene"]) for s in doc["stimuli"]},
        split_tag={s["id"]: s["split"] for s in doc["stimuli"]},
        runs=doc["runs"],
        repetition_map=doc["repetition_map"],
        config=doc["config"],
    )
