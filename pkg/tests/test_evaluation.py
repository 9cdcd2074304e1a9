import csv
import io
import json
import math
import warnings

import numpy as np
import pytest

from spacepose import evaluation as ev
from spacepose import geometry as geo
from spacepose import scenegen as sg
from spacepose.backbone import BackboneConfig
from spacepose.dataset import Sequence
from spacepose.errors import ConfigError
from spacepose.model import ModelConfig, PoseNet

TINY = ModelConfig(backbone=BackboneConfig(widths=(8, 16, 32, 64)), hidden=16, layers=1)


@pytest.fixture(scope="module")
def tumbling():
    cfg = sg.SceneConfig(duration=30.0, fps=1.0, seed=3)
    gp = sg.GuidanceProfile(duration=30.0)
    return sg.generate_sequence(gp, sg.TumblingProfile(rate=6.0), sg.make_default_target(), cfg, "tumble")


class ConstantPose:
    def __init__(self, rotation, position):
        self.r6, self.t = geo.rotation_to_sixd(rotation), np.asarray(position, float)

    def predict_sequence(self, seq, mode="stream"):
        return np.tile(self.r6, (len(seq), 1)), np.tile(self.t, (len(seq), 1))


def permuted(seq, order):
    return Sequence(seq.seq_id, seq.intrinsics, seq.fps, seq.times[order], seq.images[order], seq.rotations[order],
                    seq.positions[order], seq.keypoints, seq.meta)


def test_oracle_gives_zero_errors(tumbling):
    rep = ev.evaluate_sequence(ev.OraclePredictor(), tumbling, model_id="oracle")
    assert len(rep) == len(tumbling) == 30
    assert max(rep.dt) == 0 and max(rep.dtr) == 0
    assert max(rep.dq) < 1e-6
    assert rep.seq_id == "tumble" and rep.model_id == "oracle"


def test_constant_pose_follows_tumble_angle(tumbling):
    # Single-axis tumble at 6 deg/s from the identity: the error to a fixed identity
    # prediction is the swept angle folded into [0, 180] deg.
    t0 = tumbling.positions[0]
    rep = ev.evaluate_sequence(ConstantPose(np.eye(3), t0), tumbling)
    for k, expected in ((0, 0.0), (5, 30.0), (20, 120.0), (29, 174.0)):
        assert math.degrees(rep.dq[k]) == pytest.approx(expected, abs=1e-6)


def test_degenerate_prediction_counts_as_max_attitude_error(tumbling):
    class Zero:
        def predict_sequence(self, seq, mode="stream"):
            return np.zeros((len(seq), 6)), seq.positions
    rep = ev.evaluate_sequence(Zero(), tumbling)
    assert rep.dq == [math.pi] * len(tumbling)


def test_summary_within_range(tumbling):
    rep = ev.evaluate_sequence(ConstantPose(np.eye(3), (0.0, 0.0, 9.0)), tumbling)
    for name, col in rep.columns().items():
        s = rep.summary()[name]
        assert col.min() <= s["mean"] <= col.max()
        assert col.min() <= s["median"] <= col.max()
        assert s["median"] == pytest.approx(float(np.median(col)))


def test_unknown_mode_rejected(tumbling):
    with pytest.raises(ConfigError):
        ev.evaluate_sequence(ev.OraclePredictor(), tumbling, mode="windowed")


def test_csv_layout_and_parse_back(tumbling, tmp_path):
    rep = ev.evaluate_sequence(ConstantPose(np.eye(3), (0.0, 0.0, 9.0)), tumbling)
    path = ev.emit_report(rep, "csv", tmp_path / "r.csv")
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if not r[0].startswith("#")]
    assert rows[0] == ["tau_s", "dt_m", "dtr", "dq_deg"]
    body = np.array(rows[1:], dtype=float)
    assert body.shape == (30, 4)
    np.testing.assert_allclose(body[:, 3], np.degrees(rep.dq))
    comments = [line for line in path.read_text().splitlines() if line.startswith("#")]
    assert any("dq_deg mean" in line for line in comments)


def test_empty_report_has_header_and_summary_only(tmp_path):
    path = ev.emit_report(ev.SequenceReport("s", "m"), "csv", tmp_path / "e.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "tau_s,dt_m,dtr,dq_deg"
    assert all(line.startswith("#") for line in lines[1:]) and len(lines) > 1


def test_json_round_trip(tumbling, tmp_path):
    rep = ev.evaluate_sequence(ConstantPose(np.eye(3), (0.1, 0.0, 9.0)), tumbling, model_id="const")
    path = ev.emit_report(rep, "json", tmp_path / "r.json")
    assert ev.load_report(path) == rep
    assert json.loads(path.read_text())["summary"]["dt_m"]["mean"] == pytest.approx(rep.summary()["dt_m"]["mean"])
    with pytest.raises(ConfigError):
        ev.emit_report(rep, "xml", tmp_path / "r.xml")


def test_report_bytes_are_deterministic(tumbling, tmp_path):
    model = PoseNet(TINY, seed=1)
    a = ev.report_csv(ev.evaluate_sequence(model, tumbling))
    b = ev.report_csv(ev.evaluate_sequence(model, tumbling))
    assert a == b


def test_cnn_only_is_order_equivariant(tumbling):
    model = PoseNet(ModelConfig(backbone=TINY.backbone, cnn_only=True), seed=2)
    order = np.random.default_rng(0).permutation(len(tumbling))
    base = ev.evaluate_sequence(model, tumbling)
    shuffled = ev.evaluate_sequence(model, permuted(tumbling, order))
    np.testing.assert_allclose(np.asarray(shuffled.dt), np.asarray(base.dt)[order], rtol=1e-6)
    np.testing.assert_allclose(np.asarray(shuffled.dq), np.asarray(base.dq)[order], rtol=1e-6, atol=1e-7)


def test_recurrent_model_is_order_sensitive(tumbling):
    model = PoseNet(TINY, seed=2)
    order = np.random.default_rng(0).permutation(len(tumbling))
    base = ev.evaluate_sequence(model, tumbling)
    shuffled = ev.evaluate_sequence(model, permuted(tumbling, order))
    assert not np.allclose(np.asarray(shuffled.dt), np.asarray(base.dt)[order], rtol=1e-6)
    reset = ev.evaluate_sequence(model, tumbling, mode="reset")
    assert reset.dt[0] == pytest.approx(base.dt[0], rel=1e-5)
    assert not np.allclose(reset.dt, base.dt)


def test_intrinsics_mismatch_warns_but_evaluates(tumbling):
    model = PoseNet(TINY, seed=3)
    model.intrinsics = geo.CameraIntrinsics(100.0, 100.0, 32.0, 32.0)
    with pytest.warns(UserWarning, match="intrinsics"):
        rep = ev.evaluate_sequence(model, tumbling)
    assert len(rep) == len(tumbling)
    model.intrinsics = tumbling.intrinsics
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ev.evaluate_sequence(model, tumbling)


def test_ablation_report_pairs_and_deltas(tumbling):
    a = ev.evaluate_sequence(ConstantPose(np.eye(3), (0.0, 0.0, 9.0)), tumbling, model_id="a")
    b = ev.evaluate_sequence(ev.OraclePredictor(), tumbling, model_id="b")
    abl = ev.AblationReport("test", "a", "b", [a], [b])
    d = abl.deltas()["tumble"]
    assert d["dt_m_mean"] == pytest.approx(-a.summary()["dt_m"]["mean"])
    assert json.loads(json.dumps(abl.to_dict()))["arm_b"] == "b"
    other = ev.SequenceReport("other", "b")
    with pytest.raises(ConfigError):
        ev.AblationReport("bad", "a", "b", [a], [other])


def test_summary_table_layout(tumbling):
    reps = [ev.evaluate_sequence(ev.OraclePredictor(), tumbling, model_id=m) for m in ("x", "y")]
    lines = ev.summary_table(reps).splitlines()
    assert lines[0].split()[:2] == ["sequence", "model"]
    assert set(lines[1]) <= {"-", " "}
    assert len(lines) == 4
    assert io.StringIO(ev.summary_table([])).read().count("\n") == 2
