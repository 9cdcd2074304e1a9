import csv
import json
import math

import pytest

from spacepose import cli
from spacepose import experiments as ex
from spacepose.config import load_config, parse_config, toy_config
from spacepose.errors import ConfigError

SMALL = """\
[scene]
fps = 10
duration = 1.6

[sequence a]
split = train
guidance = fixed-range
approach = v-bar
tumbling = single-axis
rate = 20
seed = 1

[sequence b]
split = train
guidance = forced-translation
approach = r-bar
tumbling = two-axis
seed = 2

[sequence c]
split = test
guidance = fixed-range
approach = r-bar
tumbling = precession
glare = 3
sun_direction = 0.5, 0.02, -1
seed = 3

[model]
widths = 8, 16, 32, 64
hidden = 16
layers = 1

[stage1]
epochs = 2
batch = 8
n_s2 = 4
k_t = 2

[stage2]
epochs = 1
batch = 2

[stage3]
epochs = 1
batch = 2
lr = 0.0001
schedule = step
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL)
    assert cli.main(["gen", "--config", str(cfg), "--out", str(root / "data")]) == 0
    return root, cfg


def tree_bytes(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_parse_config_reads_sections():
    cfg = parse_config(SMALL)
    assert [s.seq_id for s in cfg.sequences] == ["a", "b", "c"]
    assert [s.split for s in cfg.sequences] == ["train", "train", "test"]
    c = cfg.sequences[2]
    assert c.scene.glare == 3.0 and c.scene.sun_direction == (0.5, 0.02, -1.0)
    assert c.guidance.duration == 1.6 and c.tumbling.kind == "precession"
    assert cfg.sequences[0].tumbling.rate == 20.0
    assert cfg.model.backbone.widths == (8, 16, 32, 64) and cfg.model.layers == 1
    assert cfg.stages[3].lr == 1e-4 and cfg.stages[3].schedule == "step"


@pytest.mark.parametrize("text", ["[bogus]\nx = 1\n", "[sequence a]\nwhatever = 1\n", "[model]\nhidden = abc\n",
                                  "[sequence a]\nsplit = dev\n", "[stage2]\nepochs = 0\n", "not an ini"])
def test_bad_configs_raise_config_error(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_toy_config_matches_the_experiment_shape():
    cfg = toy_config()
    assert len(cfg.split("train")) == 6 and len(cfg.split("test")) == 2
    assert all(60 <= s.scene.duration <= 120 for s in cfg.sequences)
    assert {s.guidance.kind for s in cfg.sequences} == {"fixed-range", "forced-translation"}
    assert {s.tumbling.kind for s in cfg.sequences} == {"single-axis", "two-axis", "precession"}
    assert cfg.sequences[0].scene.width == 64 and cfg.sequences[0].scene.fps == 10


def test_gen_is_deterministic(workspace, tmp_path):
    root, cfg = workspace
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    assert tree_bytes(root / "data") == tree_bytes(tmp_path / "again")
    index = json.loads((root / "data" / "dataset.json").read_text())
    assert [e["seq_id"] for e in index] == ["a", "b", "c"]


def test_train_eval_chain_and_determinism(workspace, tmp_path):
    root, cfg = workspace
    data = str(root / "data")
    for run in ("r1", "r2"):
        out = tmp_path / run
        assert cli.main(["train", "--stage", "1", "--config", str(cfg), "--data", data, "--out", str(out),
                         "--steps", "3"]) == 0
        assert cli.main(["train", "--stage", "2", "--config", str(cfg), "--data", data, "--out", str(out),
                         "--init", str(out / "stage1.ckpt"), "--steps", "3"]) == 0
        assert cli.main(["train", "--stage", "3", "--config", str(cfg), "--data", data, "--out", str(out),
                         "--init", str(out / "stage2.ckpt"), "--steps", "2"]) == 0
        assert cli.main(["eval", "--checkpoint", str(out / "stage3.ckpt"), "--data", data,
                         "--out", str(out / "eval")]) == 0
    for name in ("stage1.ckpt", "stage2.ckpt", "stage3.ckpt", "eval/c.csv", "eval/c.json"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes(), name
    for stage in (1, 2, 3):
        logs = [[{k: v for k, v in json.loads(line).items() if k != "wall_s"}
                 for line in (tmp_path / run / f"stage{stage}.ndjson").read_text().splitlines()]
                for run in ("r1", "r2")]
        assert logs[0] == logs[1]
    steps = [json.loads(x) for x in (tmp_path / "r1" / "stage1.ndjson").read_text().splitlines()]
    assert 1 <= sum(r["kind"] == "step" for r in steps) <= 3


def test_eval_untrained_model_gives_finite_errors(workspace, tmp_path, capsys):
    root, cfg = workspace
    model = ex.PoseNet(parse_config(SMALL).model, seed=4)
    ex.save_model(model, tmp_path / "random.ckpt")
    code = cli.main(["eval", "--checkpoint", str(tmp_path / "random.ckpt"), "--data", str(root / "data"),
                     "--out", str(tmp_path / "eval"), "--split", "all"])
    assert code == 0
    for seq_id in ("a", "b", "c"):
        with open(tmp_path / "eval" / f"{seq_id}.csv", newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
        assert rows[0] == ["tau_s", "dt_m", "dtr", "dq_deg"]
        assert len(rows) == 17
        assert all(len(r) == 4 and all(math.isfinite(float(v)) for v in r) for r in rows[1:])
    assert "sequence" in capsys.readouterr().out


def test_report_merges_json_reports(workspace, tmp_path):
    root, _ = workspace
    model = ex.PoseNet(parse_config(SMALL).model, seed=5)
    ex.save_model(model, tmp_path / "m.ckpt")
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "m.ckpt"), "--data", str(root / "data"),
                     "--out", str(tmp_path / "ev"), "--split", "all"]) == 0
    assert cli.main(["report", str(tmp_path / "ev"), "--out", str(tmp_path / "table.txt")]) == 0
    lines = (tmp_path / "table.txt").read_text().splitlines()
    assert lines[0].split()[:2] == ["sequence", "model"]
    assert len(lines) == 2 + 3


def test_gradcheck_command_passes(capsys):
    assert cli.main(["gradcheck", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    assert "all pass" in out and "lstm_cell" in out


def test_config_command_writes_loadable_ini(tmp_path):
    assert cli.main(["config", "--out", str(tmp_path / "toy.cfg")]) == 0
    assert len(load_config(tmp_path / "toy.cfg").sequences) == 8


@pytest.mark.parametrize("argv", [["gen", "--bogus"], ["train", "--stage", "4", "--data", "x", "--out", "y"],
                                  ["nope"], []])
def test_usage_errors_exit_2(argv, capsys):
    assert cli.main(argv) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_files_exit_2(tmp_path):
    assert cli.main(["gen", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "d")]) == 2
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(tmp_path),
                     "--out", str(tmp_path / "e")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_blowup_exits_3(workspace, tmp_path):
    root, _ = workspace
    cfg = tmp_path / "hot.cfg"
    cfg.write_text(SMALL.replace("[stage1]\n", "[stage1]\nlr = 1e30\n"))
    code = cli.main(["train", "--stage", "1", "--config", str(cfg), "--data", str(root / "data"),
                     "--out", str(tmp_path / "hot"), "--steps", "5"])
    assert code == 3
    assert (tmp_path / "hot" / "stage1.ckpt").is_file()


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    out = capsys.readouterr().out
    for cmd in ("gen", "train", "eval", "gradcheck", "ablate", "report"):
        assert cmd in out
