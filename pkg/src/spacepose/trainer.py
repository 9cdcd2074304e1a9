"""Adam, learning-rate schedules and the three training stages."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from spacepose import dataset as ds
from spacepose import geometry as geo
from spacepose import losses
from spacepose.diff import checkpoint
from spacepose.diff.node import Node, backward, check_finite, topological_order, zero_grads
from spacepose.diff.rng import Rng
from spacepose.errors import ConfigError, NumericError
from spacepose.model import PoseNet
from spacepose.recurrent import RecurrentState, ZoneoutConfig, stacked_forward

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
CYCLES = 5
STEP_EVERY = 9
STAGE3_EPOCH_CAP = 66


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Node], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update using each parameter's ``grad`` (missing grad counts as zero)."""
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        if g.shape != p.value.shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.value.shape} for {name}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}; step aborted")
        grads[name] = g
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m, v = state.m[name], state.v[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * (g * g)
        p.value -= (lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(p.value.dtype)


def lr_schedule(kind: str, epoch: int, total: int, base: float) -> float:
    """``cyclical``: 5 linear decays from the cycle peak to a tenth of it, each peak half the last.
    ``step``: halve every 9 epochs. ``constant``: ``base``."""
    if not 0 <= epoch < total:
        raise ConfigError(f"epoch {epoch} outside [0, {total})")
    if kind == "constant":
        return base
    if kind == "step":
        return base * 0.5 ** (epoch // STEP_EVERY)
    if kind == "cyclical":
        length = total / CYCLES
        cycle = min(int(epoch // length), CYCLES - 1)
        frac = (epoch - cycle * length) / length
        return base * 0.5 ** cycle * (1.0 - 0.9 * frac)
    raise ConfigError(f"unknown schedule {kind!r}")


# ---------------------------------------------------------------- config and logging

@dataclass
class StageConfig:
    stage: int = 1
    epochs: int = 100
    lr: float = 1e-3
    schedule: str = "cyclical"
    batch: int = 16
    window: int = 8
    stride: int = 4
    zoneout: float = 0.15
    dropout: float = 0.2
    seed: int = 0
    augment: float = 1.0
    freeze_fraction: float = 0.25
    patience: int = 10
    val_fraction: float = 0.1
    max_steps: int | None = None
    n_s2: int = 40
    k_t: int = 4
    partition_choices: tuple = ds.PARTITION_CHOICES
    freeze_bn: bool = False

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch must be >= 1")
        if self.window < 1 or self.stride < 1:
            raise ConfigError("window and stride must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if not self.partition_choices or min(self.partition_choices) <= 0:
            raise ConfigError("partition_choices must be positive durations in seconds")


class RunLog:
    """Append-only record list, mirrored to a newline-delimited JSON file when a path is given."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.t0 = time.perf_counter()
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, kind: str, **fields) -> dict:
        rec = {"kind": kind, **fields}
        self.records.append(rec)
        if self.path:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, default=_jsonable) + "\n")
        return rec

    def steps(self) -> list[dict]:
        return [r for r in self.records if r["kind"] == "step"]


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x)}")


@dataclass
class TrainResult:
    state: dict[str, np.ndarray]
    log: RunLog
    history: list[dict]
    best_epoch: int | None = None


def _sigmas(model: PoseNet) -> dict[str, float]:
    return {k: float(v.value[0]) for k, v in model.log_sigma.items()}


def _finish_step(model, params, adam, loss, lr, log, **extra):
    backward(loss)
    adam_step(params, adam, lr)
    zero_grads(model.parameters())
    value = float(loss.value)
    check_finite(np.asarray(value), "loss")
    return log.write("step", loss=value, lr=lr, sigma=_sigmas(model),
                     wall_s=round(time.perf_counter() - log.t0, 3), **extra)


def _guarded(fn, model: PoseNet, out: Path | None):
    """Run ``fn``; on a numeric failure restore the last good weights, save them and re-raise."""
    holder = {"good": model.state_dict()}
    try:
        return fn(holder)
    except NumericError:
        model.load_state_dict(holder["good"])
        if out is not None:
            checkpoint.save(out, holder["good"])
        raise


# ---------------------------------------------------------------- stage 1

def evaluate_stage1(model: PoseNet, samples) -> dict:
    if not samples:
        return {}
    correct, rel = 0, []
    for i in range(0, len(samples), 64):
        chunk = samples[i:i + 64]
        imgs = np.stack([s.image for s in chunk])
        logits, t_hat = model.stage1(imgs, train=False)
        correct += int((logits.value.argmax(axis=1) == [s.cls for s in chunk]).sum())
        for s, th in zip(chunk, t_hat.value):
            rel.append(float(np.linalg.norm(th - s.position) / np.linalg.norm(s.position)))
    return {"class_accuracy": correct / len(samples), "rel_position_error": float(np.mean(rel))}


def train_stage1(model: PoseNet, samples: list, cfg: StageConfig, k: geo.CameraIntrinsics,
                 log: RunLog | None = None, out: Path | None = None, data_hash: str = "") -> TrainResult:
    if cfg.stage != 1:
        raise ConfigError("train_stage1 needs a stage-1 config")
    if not samples:
        raise ConfigError("no stage-1 samples")
    log = log or RunLog()
    log.write("config", config=asdict(cfg), data_hash=data_hash)
    model.intrinsics = k
    rng = Rng(cfg.seed)
    order = rng.child(0).permutation(len(samples))
    n_val = int(round(cfg.val_fraction * len(samples)))
    val = [samples[i] for i in order[:n_val]]
    train = [samples[i] for i in order[n_val:]]
    model.init_position_bias(np.mean([s.position for s in train], axis=0))
    params = model.stage_parameters(1)
    adam = AdamState()
    history = []

    def run(holder):
        step = 0
        for epoch in range(cfg.epochs):
            lr = lr_schedule(cfg.schedule, epoch, cfg.epochs, cfg.lr)
            erng = rng.child(1, epoch)
            perm = erng.permutation(len(train))
            for b0 in range(0, len(perm), cfg.batch):
                idx = perm[b0:b0 + cfg.batch]
                if len(idx) < 2:
                    continue   # batch norm needs more than one sample
                srng = erng.child(step)
                batch = [ds.augment(train[i], srng.child(j), cfg.augment, k) for j, i in enumerate(idx)]
                imgs = np.stack([s.image for s in batch])
                logits, t_hat = model.stage1(imgs, True, srng.child(10_000), dropout=cfg.dropout)
                loss = losses.stage1_loss(logits, np.stack([s.onehot for s in batch]), t_hat,
                                          np.stack([s.position for s in batch]),
                                          model.log_sigma["a"], model.log_sigma["t1"])
                _finish_step(model, params, adam, loss, lr, log, stage=1, epoch=epoch, step=step)
                step += 1
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
            metrics = evaluate_stage1(model, val)
            history.append({"epoch": epoch, **metrics})
            log.write("epoch", stage=1, epoch=epoch, lr=lr, **metrics)
            holder["good"] = model.state_dict()
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break

    _guarded(run, model, out)
    state = model.state_dict()
    if out is not None:
        checkpoint.save(out, state)
    return TrainResult(state, log, history)


# ---------------------------------------------------------------- stages 2 and 3

@dataclass
class Partition:
    pid: int
    seq_index: int
    start: int
    stop: int
    windows: list


def make_partitions(sequences, train_lengths: list[int], cfg: StageConfig, rng) -> list[Partition]:
    """Cut the trainable prefix of each sequence into randomly sized partitions with their windows."""
    parts = []
    for si, (seq, usable) in enumerate(zip(sequences, train_lengths)):
        seconds = usable / seq.fps
        start = 0
        for p_len in ds.sample_training_lengths(seconds, rng.child(si), cfg.partition_choices):
            stop = min(usable, start + int(round(p_len * seq.fps)))
            wins = ds.sliding_windows(stop - start, cfg.window, cfg.stride, seq.seq_id) if stop - start >= cfg.window else []
            if wins:
                parts.append(Partition(len(parts), si, start, stop, wins))
            start = stop
    return parts


def _stack_state(states: list[list[np.ndarray]], layers: int) -> RecurrentState:
    h = [Node(np.concatenate([s[l] for s in states])) for l in range(layers)]
    c = [Node(np.concatenate([s[layers + l] for s in states])) for l in range(layers)]
    return RecurrentState(h, c)


def sequence_batches(parts: list[Partition], cfg: StageConfig, rng):
    """Yield (rank, [partitions]) groups: windows of equal rank from distinct partitions."""
    perm = [parts[i] for i in rng.permutation(len(parts))]
    for g0 in range(0, len(perm), cfg.batch):
        group = perm[g0:g0 + cfg.batch]
        for rank in range(max(len(p.windows) for p in group)):
            members = [p for p in group if rank < len(p.windows)]
            yield rank, members


def stream_sequence(model: PoseNet, seq, chunk: int = 64, reset: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Infer-mode pass over a whole sequence with state carried from a zero start.

    ``reset`` starts every frame from a zero state instead.
    """
    feats = []
    for i in range(0, len(seq), chunk):
        feats.append(model.pooled(seq.images[i:i + chunk], train=False).value)
    feats = np.concatenate(feats)
    if model.cfg.cnn_only:
        f = Node(feats)
        return model.att_head(f).value, model.pos_head(f).value
    if reset:
        state = model.recurrent.zero_state(len(seq), model.dtype)
        outs, _, _ = stacked_forward(model.recurrent, [Node(feats)], state, model.cfg.zoneout, None, "infer")
    else:
        state = model.recurrent.zero_state(1, model.dtype)
        outs, _, _ = stacked_forward(model.recurrent, [Node(feats[i:i + 1]) for i in range(len(seq))], state,
                                     model.cfg.zoneout, None, "infer")
    y = Node(np.concatenate([o.value for o in outs]))
    return model.att_head(y).value, model.pos_head(y).value


def sequence_metrics(seq, r6: np.ndarray, t_hat: np.ndarray, frames=None) -> dict:
    frames = range(len(seq)) if frames is None else frames
    dt, dtr, dq, reproj = [], [], [], []
    pts = seq.keypoints
    for kf in frames:
        gt = seq.pose(kf)
        try:
            rot = geo.sixd_to_rotation(r6[kf])
        except Exception:   # degenerate output counts as a maximal attitude error
            rot = None
        a, b = geo.position_error(t_hat[kf], gt.position)
        dt.append(a)
        dtr.append(b)
        if rot is None:
            dq.append(math.pi)
            reproj.append(math.hypot(seq.width, seq.height))
            continue
        dq.append(geo.attitude_error(geo.rotation_to_quaternion(rot), gt.quaternion))
        uv_gt, _ = geo.project_points(seq.intrinsics, gt, pts)
        uv, front = geo.project_points(seq.intrinsics, geo.Pose(rot, t_hat[kf]), pts)
        err = np.where(front, np.linalg.norm(np.nan_to_num(uv) - uv_gt, axis=1), math.hypot(seq.width, seq.height))
        reproj.append(float(err.mean()))
    return {"dt": float(np.mean(dt)), "dtr": float(np.mean(dtr)), "dq_deg": float(np.degrees(np.mean(dq))),
            "reproj_px": float(np.mean(reproj))}


def validation_metrics(model: PoseNet, sequences, train_lengths) -> dict:
    rows = []
    for seq, usable in zip(sequences, train_lengths):
        if usable >= len(seq):
            continue
        r6, t_hat = stream_sequence(model, seq)
        rows.append(sequence_metrics(seq, r6, t_hat, range(usable, len(seq))))
    if not rows:
        return {}
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def _train_sequences(model: PoseNet, sequences, cfg: StageConfig, log: RunLog, out: Path | None,
                     data_hash: str) -> TrainResult:
    if not sequences:
        raise ConfigError("no training sequences")
    log.write("config", config=asdict(cfg), data_hash=data_hash, cnn_only=model.cfg.cnn_only)
    rng = Rng(cfg.seed)
    usable = [len(s) - int(round(cfg.val_fraction * len(s))) for s in sequences]
    if cfg.stage == 2:
        model.init_position_bias(np.mean(np.concatenate([s.positions[:u] for s, u in zip(sequences, usable)]), axis=0))
    k = sequences[0].intrinsics
    model.intrinsics = k
    uv_cache = {}
    if cfg.stage == 3:
        for si, seq in enumerate(sequences):
            uv_cache[si] = losses.project_keypoints_gt(seq.rotations, seq.positions, k, seq.keypoints)
    layers = len(model.recurrent.layers)
    zoneout = ZoneoutConfig(cfg.zoneout, cfg.zoneout)
    adam = AdamState()
    history = []
    best = {"score": math.inf, "epoch": None, "state": None}
    epochs = min(cfg.epochs, STAGE3_EPOCH_CAP) if cfg.stage == 3 else cfg.epochs
    freeze_epochs = int(math.floor(cfg.freeze_fraction * epochs)) if cfg.stage == 2 else 0

    def consider(epoch, metrics):
        score = metrics.get("reproj_px", math.inf) if metrics else math.inf
        if score < best["score"]:
            best.update(score=score, epoch=epoch, state=model.state_dict())

    if cfg.stage == 3:
        m0 = validation_metrics(model, sequences, usable)
        history.append({"epoch": -1, **m0})
        log.write("epoch", stage=3, epoch=-1, **m0)
        consider(-1, m0)

    def run(holder):
        step = 0
        for epoch in range(epochs):
            lr = lr_schedule(cfg.schedule, epoch, epochs, cfg.lr)
            frozen = epoch < freeze_epochs
            params = model.stage_parameters(cfg.stage, freeze_trunk=frozen)
            erng = rng.child(1, epoch)
            parts = make_partitions(sequences, usable, cfg, erng.child(0))
            carried: dict[int, list[np.ndarray]] = {}
            for rank, members in sequence_batches(parts, cfg, erng.child(1)):
                srng = erng.child(2, step)
                frames, r_gt, t_gt, uv = [], [], [], []
                for j, p in enumerate(members):
                    w = p.windows[rank]
                    seq = sequences[p.seq_index]
                    idx = np.arange(p.start + w.start, p.start + w.stop)
                    imgs = seq.images[idx]
                    if cfg.augment > 0:
                        imgs = np.stack([ds.augment(seq.frame(int(i)), srng.child(j, int(i)), cfg.augment, k,
                                                    geometric=False).image for i in idx])
                    frames.append(imgs)
                    r_gt.append(geo.rotation_to_sixd(seq.rotations[idx]))
                    t_gt.append(seq.positions[idx])
                    if cfg.stage == 3:
                        uv.append(uv_cache[p.seq_index][idx])
                # time-major rows: [T, N, ...]
                frames = np.stack(frames, axis=1)
                r_gt = np.stack(r_gt, axis=1).reshape(-1, 6)
                t_gt = np.stack(t_gt, axis=1).reshape(-1, 3)
                zero = [np.zeros((1, model.cfg.hidden), model.dtype)] * (2 * layers)
                state = _stack_state([carried.get(p.pid, zero) for p in members], layers)
                chain = [[p.pid, p.windows[rank].carry_in, p.windows[rank].state_id] for p in members]
                for n_ in state.h + state.c:
                    if n_.requires_grad or n_.parents:
                        raise NumericError("carried state is attached to a previous graph")
                r_hat, t_hat, _, exported = model.sequence(frames, state, True, srng, freeze_trunk=frozen,
                                                           export_step=min(cfg.stride, cfg.window),
                                                           dropout=cfg.dropout, zoneout=zoneout,
                                                           batch_stats=False if cfg.freeze_bn else None)
                if cfg.stage == 2:
                    loss = losses.stage2_loss(r_hat, r_gt, t_hat, t_gt, model.log_sigma["r"], model.log_sigma["t2"])
                else:
                    uv_arr = np.stack(uv, axis=1).reshape(-1, *uv[0].shape[1:])
                    loss = losses.stage3_loss(r_hat, t_hat, uv_arr, k, sequences[0].keypoints,
                                              sequences[0].width, sequences[0].height)
                nodes = len(topological_order(loss))
                _finish_step(model, params, adam, loss, lr, log, stage=cfg.stage, epoch=epoch, step=step,
                             rank=rank, chain=chain, frozen=frozen, graph_nodes=nodes)
                if exported is not None:
                    vals = exported.values()
                    for j, p in enumerate(members):
                        carried[p.pid] = [v[j:j + 1].copy() for v in vals]
                step += 1
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
            metrics = validation_metrics(model, sequences, usable)
            history.append({"epoch": epoch, **metrics})
            log.write("epoch", stage=cfg.stage, epoch=epoch, lr=lr, **metrics)
            holder["good"] = model.state_dict()
            if cfg.stage == 3:
                consider(epoch, metrics)
                if best["epoch"] is not None and epoch - best["epoch"] >= cfg.patience:
                    log.write("early_stop", stage=3, epoch=epoch, best_epoch=best["epoch"])
                    break
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break

    _guarded(run, model, out)
    best_epoch = None
    if cfg.stage == 3 and best["state"] is not None:
        model.load_state_dict(best["state"])
        best_epoch = best["epoch"]
    state = model.state_dict()
    if out is not None:
        checkpoint.save(out, state)
    return TrainResult(state, log, history, best_epoch)


def train_stage2(model: PoseNet, sequences, cfg: StageConfig, log: RunLog | None = None, out: Path | None = None,
                 data_hash: str = "") -> TrainResult:
    if cfg.stage != 2:
        raise ConfigError("train_stage2 needs a stage-2 config")
    return _train_sequences(model, sequences, cfg, log or RunLog(), out, data_hash)


def train_stage3(model: PoseNet, sequences, cfg: StageConfig, log: RunLog | None = None, out: Path | None = None,
                 data_hash: str = "") -> TrainResult:
    if cfg.stage != 3:
        raise ConfigError("train_stage3 needs a stage-3 config")
    return _train_sequences(model, sequences, cfg, log or RunLog(), out, data_hash)
