"""Dataset generation, staged training and the ablation arms of the toy experiment."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from spacepose import dataset as ds
from spacepose import geometry as geo
from spacepose import scenegen as sg
from spacepose.backbone import BackboneConfig
from spacepose.config import ExperimentConfig, SequenceSpec
from spacepose.diff import checkpoint
from spacepose.diff.rng import Rng
from spacepose.errors import ConfigError, FormatError
from spacepose.evaluation import AblationReport, SequenceReport, evaluate_sequence, emit_report, summary_table
from spacepose.model import ModelConfig, PoseNet
from spacepose.recurrent import ZoneoutConfig
from spacepose.trainer import RunLog, StageConfig, train_stage1, train_stage2, train_stage3

INDEX_NAME = "dataset.json"


# ---------------------------------------------------------------- datasets

def build_sequence(spec: SequenceSpec, target: sg.TargetModel | None = None) -> ds.Sequence:
    target = target or sg.make_default_target()
    return sg.generate_sequence(spec.guidance, spec.tumbling, target, spec.scene, spec.seq_id)


def write_dataset(cfg: ExperimentConfig, out) -> dict[str, str]:
    """Render every configured sequence into ``out/<seq_id>`` and write an index; returns seq_id -> hash."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if not cfg.sequences:
        raise ConfigError("config defines no sequences")
    target = sg.make_default_target()
    index = []
    for spec in cfg.sequences:
        seq = build_sequence(spec, target)
        ds.write_sequence(seq, out / spec.seq_id)
        index.append({"seq_id": spec.seq_id, "split": spec.split, "hash": ds.sequence_hash(seq)})
    (out / INDEX_NAME).write_text(json.dumps(index, indent=1) + "\n", encoding="utf-8")
    return {e["seq_id"]: e["hash"] for e in index}


def read_dataset(root, split: str | None = None) -> list[ds.Sequence]:
    """Load the sequences of a directory written by :func:`write_dataset` (or a single sequence dir)."""
    root = Path(root)
    index_path = root / INDEX_NAME
    if not index_path.is_file():
        if (root / "manifest.json").is_file():
            return [ds.read_sequence(root)]
        raise FormatError(f"no dataset index in {root}")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    return [ds.read_sequence(root / e["seq_id"]) for e in index if split is None or e["split"] == split]


def dataset_hash(sequences) -> str:
    h = hashlib.sha256()
    for s in sequences:
        h.update(ds.sequence_hash(s).encode())
    return h.hexdigest()


# ---------------------------------------------------------------- model persistence

def model_config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def model_config_from_dict(d: dict) -> ModelConfig:
    bb = d["backbone"]
    return ModelConfig(backbone=BackboneConfig(bb["in_channels"], tuple(bb["widths"]), bb["first_kernel"],
                                               bb["dropout"]),
                       hidden=d["hidden"], layers=d["layers"], grid=geo.ViewsphereGrid(**d["grid"]),
                       cnn_only=d["cnn_only"], zoneout=ZoneoutConfig(**d["zoneout"]))


def save_model(model: PoseNet, path) -> Path:
    """Checkpoint at ``path`` plus a JSON sidecar with the architecture and training intrinsics."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(path, model.state_dict())
    meta = {"model": model_config_to_dict(model.cfg),
            "intrinsics": asdict(model.intrinsics) if model.intrinsics is not None else None}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    return path


def load_model(path) -> PoseNet:
    path = Path(path)
    meta_path = path.with_suffix(".json")
    if not meta_path.is_file():
        raise FormatError(f"missing model sidecar {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    model = PoseNet(model_config_from_dict(meta["model"]))
    model.load_state_dict(checkpoint.load(path))
    if meta.get("intrinsics"):
        model.intrinsics = geo.CameraIntrinsics(**meta["intrinsics"])
    return model


def load_matching(model: PoseNet, state: dict[str, np.ndarray], prefixes: tuple[str, ...]) -> list[str]:
    """Copy the tensors whose names start with one of ``prefixes``; returns the copied names."""
    subset = {k: v for k, v in state.items() if k.startswith(prefixes)}
    model.load_state_dict(subset, strict=False)
    return sorted(subset)


# ---------------------------------------------------------------- training

def stage1_samples(sequences, model_cfg: ModelConfig, cfg: StageConfig) -> list[ds.Stage1Sample]:
    return ds.stage1_resample(sequences, model_cfg.grid, cfg.k_t, cfg.n_s2, Rng(cfg.seed).child(99))


def train_stages(model: PoseNet, sequences, stages: dict[int, StageConfig], run: tuple[int, ...], out=None,
                 tag: str = "model", after_stage=None) -> dict[int, float]:
    """Train ``model`` through the stages listed in ``run``; returns wall seconds per stage.

    ``after_stage(stage, model)`` is called after each stage finishes.
    """
    out = Path(out) if out is not None else None
    h = dataset_hash(sequences)
    timings = {}
    for s in run:
        log = RunLog(out / f"{tag}_stage{s}.ndjson" if out else None)
        ckpt = out / f"{tag}_stage{s}.ckpt" if out else None
        t0 = time.perf_counter()
        if s == 1:
            samples = stage1_samples(sequences, model.cfg, stages[1])
            train_stage1(model, samples, stages[1], sequences[0].intrinsics, log, ckpt, h)
        elif s == 2:
            train_stage2(model, sequences, stages[2], log, ckpt, h)
        else:
            train_stage3(model, sequences, stages[3], log, ckpt, h)
        timings[s] = time.perf_counter() - t0
        if out is not None:
            save_model(model, out / f"{tag}_stage{s}.ckpt")
        if after_stage is not None:
            after_stage(s, model)
    return timings


# ---------------------------------------------------------------- the ablation experiment

ARMS = ("s1s2s3", "s1s2", "s2only", "cnn_s1s2", "rgb_s1s2")
ABLATIONS = (
    ("stages_s2only_vs_s1s2", "s2only", "s1s2"),
    ("stages_s1s2_vs_s1s2s3", "s1s2", "s1s2s3"),
    ("recurrence_cnn_vs_drcnn", "cnn_s1s2", "s1s2"),
    ("modality_rgb_vs_rgbt", "rgb_s1s2", "s1s2"),
)


@dataclass
class ExperimentResult:
    reports: dict[str, list[SequenceReport]]
    timings: dict[str, float] = field(default_factory=dict)
    key: str = ""

    def ablations(self) -> list[AblationReport]:
        return [AblationReport(name, a, b, self.reports[a], self.reports[b]) for name, a, b in ABLATIONS]

    def report(self, arm: str, seq_id: str) -> SequenceReport:
        for r in self.reports[arm]:
            if r.seq_id == seq_id:
                return r
        raise KeyError((arm, seq_id))

    def to_dict(self) -> dict:
        return {"key": self.key, "timings": self.timings,
                "reports": {a: [r.to_dict() for r in rs] for a, rs in self.reports.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentResult":
        return cls({a: [SequenceReport.from_dict(r) for r in rs] for a, rs in d["reports"].items()},
                   d.get("timings", {}), d.get("key", ""))


def experiment_key(cfg: ExperimentConfig) -> str:
    """Hash of the configuration and of the package sources, used to reuse finished runs."""
    h = hashlib.sha256(repr(cfg).encode())
    for src in sorted(Path(__file__).parent.rglob("*.py")):
        h.update(src.name.encode())
        h.update(src.read_bytes())
    return h.hexdigest()


def _evaluate(model: PoseNet, tests, arm: str, out: Path | None) -> list[SequenceReport]:
    reports = [evaluate_sequence(model, seq, "stream", arm) for seq in tests]
    if out is not None:
        for r in reports:
            emit_report(r, "csv", out / "reports" / f"{arm}_{r.seq_id}.csv")
            emit_report(r, "json", out / "reports" / f"{arm}_{r.seq_id}.json")
    return reports


def run_experiment(cfg: ExperimentConfig, out=None, arms: tuple[str, ...] = ARMS, reuse: bool = True,
                   seed: int = 0, progress=None) -> ExperimentResult:
    """Train every arm on the train split and evaluate it on the test split.

    Arms: the full three-stage model (also evaluated after stage 2), stage 2
    from scratch, a recurrence-free variant whose trunk starts from the stage-1
    weights, and an RGB-only model trained through stages 1 and 2.
    """
    unknown = set(arms) - set(ARMS)
    if unknown:
        raise ConfigError(f"unknown arms {sorted(unknown)}")
    out = Path(out) if out is not None else None
    key = experiment_key(cfg) + f":{seed}:{','.join(arms)}"
    result_path = out / "results.json" if out else None
    if reuse and result_path is not None and result_path.is_file():
        cached = ExperimentResult.from_dict(json.loads(result_path.read_text(encoding="utf-8")))
        if cached.key == key:
            return cached
    say = progress or (lambda msg: None)
    target = sg.make_default_target()
    train = [build_sequence(s, target) for s in cfg.split("train")]
    tests = [build_sequence(s, target) for s in cfg.split("test")]
    if not train or not tests:
        raise ConfigError("experiment needs train and test sequences")
    say(f"rendered {len(train)} train and {len(tests)} test sequences")
    reports: dict[str, list[SequenceReport]] = {}
    timings: dict[str, float] = {}
    need = set(arms)

    def timed(name, fn):
        t0 = time.perf_counter()
        fn()
        timings[name] = time.perf_counter() - t0
        say(f"{name}: {timings[name]:.0f} s")

    if need & {"s1s2s3", "s1s2", "cnn_s1s2"}:
        main = PoseNet(cfg.model, seed=seed)
        s1_state = {}

        def after(stage, model):
            if stage == 1:
                s1_state.update(model.state_dict())
            if stage == 2 and "s1s2" in need:
                reports["s1s2"] = _evaluate(model, tests, "s1s2", out)
            if stage == 3:
                reports["s1s2s3"] = _evaluate(model, tests, "s1s2s3", out)

        run = (1, 2, 3) if "s1s2s3" in need else (1, 2)
        timed("main", lambda: train_stages(main, train, cfg.stages, run, out, "main", after))
        if "cnn_s1s2" in need:
            cnn = PoseNet(replace(cfg.model, cnn_only=True), seed=seed)
            load_matching(cnn, s1_state, ("backbone.", "s1_", "log_sigma_a", "log_sigma_t1"))

            def cnn_run():
                train_stages(cnn, train, cfg.stages, (2,), out, "cnn")
                reports["cnn_s1s2"] = _evaluate(cnn, tests, "cnn_s1s2", out)

            timed("cnn_s1s2", cnn_run)
    if "s2only" in need:
        scratch = PoseNet(cfg.model, seed=seed)
        # No stage-1 trunk to protect: train it from the first step with batch statistics.
        stages = {**cfg.stages, 2: replace(cfg.stages[2], freeze_fraction=0.0, freeze_bn=False)}

        def scratch_run():
            train_stages(scratch, train, stages, (2,), out, "s2only")
            reports["s2only"] = _evaluate(scratch, tests, "s2only", out)

        timed("s2only", scratch_run)
    if "rgb_s1s2" in need:
        rgb = PoseNet(replace(cfg.model, backbone=replace(cfg.model.backbone, in_channels=3)), seed=seed)

        def rgb_run():
            train_stages(rgb, train, cfg.stages, (1, 2), out, "rgb")
            reports["rgb_s1s2"] = _evaluate(rgb, tests, "rgb_s1s2", out)

        timed("rgb_s1s2", rgb_run)
    result = ExperimentResult({a: reports[a] for a in ARMS if a in reports}, timings, key)
    if out is not None:
        result_path.write_text(json.dumps(result.to_dict()) + "\n", encoding="utf-8")
        all_reports = [r for rs in result.reports.values() for r in rs]
        (out / "summary.txt").write_text(summary_table(all_reports), encoding="utf-8")
        if set(ARMS) <= set(result.reports):
            (out / "ablations.json").write_text(json.dumps([a.to_dict() for a in result.ablations()]) + "\n",
                                                encoding="utf-8")
    return result
