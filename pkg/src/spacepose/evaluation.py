"""Per-frame error reports for whole sequences and paired ablation comparisons."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from spacepose import geometry as geo
from spacepose.errors import ConfigError, DegenerateRepresentation

METRICS = ("dt_m", "dtr", "dq_deg")


@dataclass
class SequenceReport:
    seq_id: str
    model_id: str
    tau: list[float] = field(default_factory=list)
    dt: list[float] = field(default_factory=list)     # metres
    dtr: list[float] = field(default_factory=list)    # fraction of range
    dq: list[float] = field(default_factory=list)     # radians

    def __len__(self) -> int:
        return len(self.tau)

    def columns(self) -> dict[str, np.ndarray]:
        return {"dt_m": np.asarray(self.dt), "dtr": np.asarray(self.dtr), "dq_deg": np.degrees(self.dq)}

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for name, col in self.columns().items():
            if col.size:
                out[name] = {"mean": float(col.mean()), "median": float(np.median(col)), "max": float(col.max())}
            else:
                out[name] = {"mean": math.nan, "median": math.nan, "max": math.nan}
        return out

    def to_dict(self) -> dict:
        return {"seq_id": self.seq_id, "model_id": self.model_id, "tau": self.tau, "dt": self.dt,
                "dtr": self.dtr, "dq": self.dq, "summary": self.summary()}

    @classmethod
    def from_dict(cls, d: dict) -> "SequenceReport":
        return cls(d["seq_id"], d["model_id"], list(d["tau"]), list(d["dt"]), list(d["dtr"]), list(d["dq"]))


class OraclePredictor:
    """Returns the ground truth; used to validate the evaluation path."""

    def predict_sequence(self, seq, mode: str = "stream"):
        return geo.rotation_to_sixd(seq.rotations), seq.positions.copy()


def evaluate_sequence(model, seq, mode: str = "stream", model_id: str = "model") -> SequenceReport:
    """Errors for every frame of ``seq``.

    ``model`` is a :class:`~spacepose.model.PoseNet` or anything with
    ``predict_sequence(seq, mode) -> (r6 [T, 6], t [T, 3])``. ``stream`` carries
    the recurrent state from a zero start across all frames; ``reset`` starts
    every frame from a zero state.
    """
    if mode not in ("stream", "reset"):
        raise ConfigError(f"unknown evaluation mode {mode!r}")
    if hasattr(model, "predict_sequence"):
        r6, t_hat = model.predict_sequence(seq, mode)
    else:
        from spacepose.trainer import stream_sequence
        trained_k = getattr(model, "intrinsics", None)
        if trained_k is not None and trained_k != seq.intrinsics:
            warnings.warn(f"sequence intrinsics {seq.intrinsics} differ from training {trained_k}", stacklevel=2)
        r6, t_hat = stream_sequence(model, seq, reset=(mode == "reset"))
    rep = SequenceReport(seq.seq_id, model_id)
    for k in range(len(seq)):
        gt = seq.pose(k)
        a, b = geo.position_error(t_hat[k], gt.position)
        try:
            q = geo.rotation_to_quaternion(geo.sixd_to_rotation(r6[k]))
            dq = geo.attitude_error(q, gt.quaternion)
        except DegenerateRepresentation:
            dq = math.pi
        rep.tau.append(float(seq.times[k]))
        rep.dt.append(a)
        rep.dtr.append(b)
        rep.dq.append(dq)
    return rep


def report_csv(report: SequenceReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tau_s", *METRICS])
    cols = report.columns()
    for i, tau in enumerate(report.tau):
        w.writerow([repr(tau)] + [repr(float(cols[m][i])) for m in METRICS])
    buf.write(f"# seq_id {report.seq_id} model_id {report.model_id} frames {len(report)}\n")
    for m, stats in report.summary().items():
        buf.write(f"# {m} mean {stats['mean']!r} median {stats['median']!r} max {stats['max']!r}\n")
    return buf.getvalue()


def emit_report(report: SequenceReport, fmt: str, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        path.write_text(report_csv(report), encoding="utf-8")
    elif fmt == "json":
        path.write_text(json.dumps(report.to_dict(), indent=1), encoding="utf-8")
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    return path


def load_report(path) -> SequenceReport:
    return SequenceReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------- ablations

@dataclass
class AblationReport:
    """Two arms evaluated on the same sequences, with per-sequence metric deltas (b - a)."""

    name: str
    arm_a: str
    arm_b: str
    reports_a: list[SequenceReport]
    reports_b: list[SequenceReport]

    def __post_init__(self):
        if [r.seq_id for r in self.reports_a] != [r.seq_id for r in self.reports_b]:
            raise ConfigError("ablation arms must cover the same sequences in the same order")

    def deltas(self) -> dict[str, dict[str, float]]:
        out = {}
        for a, b in zip(self.reports_a, self.reports_b):
            sa, sb = a.summary(), b.summary()
            out[a.seq_id] = {f"{m}_{s}": sb[m][s] - sa[m][s] for m in METRICS for s in ("mean", "median", "max")}
        return out

    def to_dict(self) -> dict:
        return {"name": self.name, "arm_a": self.arm_a, "arm_b": self.arm_b,
                "a": [r.to_dict() for r in self.reports_a], "b": [r.to_dict() for r in self.reports_b],
                "deltas": self.deltas()}


def summary_table(reports: list[SequenceReport]) -> str:
    """Plain-text table: one row per (sequence, model) with mean and median of each metric."""
    head = ["sequence", "model", "dt_m mean", "dt_m median", "dtr mean", "dtr median", "dq_deg mean",
            "dq_deg median"]
    rows = [head]
    for r in sorted(reports, key=lambda r: (r.seq_id, r.model_id)):
        s = r.summary()
        rows.append([r.seq_id, r.model_id] + [f"{s[m][k]:.4g}" for m in METRICS for k in ("mean", "median")])
    widths = [max(len(row[i]) for row in rows) for i in range(len(head))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
