"""Command-line entry point: dataset generation, staged training, evaluation and checks.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import replace
from pathlib import Path

from spacepose import evaluation as ev
from spacepose import experiments as ex
from spacepose.config import TOY_CONFIG, ExperimentConfig, load_config, toy_config
from spacepose.errors import ConfigError, FormatError, NumericError
from spacepose.model import PoseNet
from spacepose.trainer import RunLog, train_stage1, train_stage2, train_stage3

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so :func:`main` can map usage errors to exit code 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="INI experiment config (defaults to the built-in toy config)")
    p.add_argument("--seed", type=int, default=0, help="model initialisation seed (default 0)")
    p.add_argument("--out", required=out_required, help="output directory or file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spacepose", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("config", help="write the built-in toy config as an INI file")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen", help="render the configured sequences into a dataset directory")
    _common(p)

    p = sub.add_parser("train", help="run one training stage and write a checkpoint and run log")
    _common(p)
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--data", required=True, help="dataset directory written by gen")
    p.add_argument("--init", help="checkpoint to start from (its sidecar JSON supplies the architecture)")
    p.add_argument("--steps", type=int, help="stop after this many optimiser steps")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset and write per-frame reports")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test", "all"))
    p.add_argument("--mode", default="stream", choices=("stream", "reset"))

    p = sub.add_parser("gradcheck", help="finite-difference checks of all primitives and the LSTM cell")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="train every ablation arm and compare them on the test split")
    _common(p)
    p.add_argument("--arms", nargs="+", default=list(ex.ARMS), choices=ex.ARMS)
    p.add_argument("--fresh", action="store_true", help="ignore a cached result in --out")

    p = sub.add_parser("report", help="merge JSON reports into one summary table")
    p.add_argument("reports", nargs="+", help="JSON report files or directories containing them")
    p.add_argument("--out", help="write the table here instead of stdout")
    return parser


def _config(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else toy_config()


def _cmd_config(args) -> int:
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(TOY_CONFIG, encoding="utf-8")
    return EXIT_OK


def _cmd_gen(args) -> int:
    hashes = ex.write_dataset(_config(args), args.out)
    for seq_id, h in hashes.items():
        print(f"{seq_id} {h}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _config(args)
    sequences = ex.read_dataset(args.data, "train")
    if not sequences:
        raise ConfigError(f"no training sequences in {args.data}")
    model = ex.load_model(args.init) if args.init else PoseNet(cfg.model, seed=args.seed)
    stage_cfg = cfg.stages[args.stage]
    if args.steps is not None:
        stage_cfg = replace(stage_cfg, max_steps=args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = RunLog(out / f"stage{args.stage}.ndjson")
    ckpt = out / f"stage{args.stage}.ckpt"
    h = ex.dataset_hash(sequences)
    if args.stage == 1:
        samples = ex.stage1_samples(sequences, model.cfg, stage_cfg)
        result = train_stage1(model, samples, stage_cfg, sequences[0].intrinsics, log, ckpt, h)
    elif args.stage == 2:
        result = train_stage2(model, sequences, stage_cfg, log, ckpt, h)
    else:
        result = train_stage3(model, sequences, stage_cfg, log, ckpt, h)
    ex.save_model(model, ckpt)
    print(f"wrote {ckpt} after {len(result.log.steps())} steps")
    if result.history:
        print(json.dumps(result.history[-1]))
    return EXIT_OK


def _cmd_eval(args) -> int:
    model = ex.load_model(args.checkpoint)
    sequences = ex.read_dataset(args.data, None if args.split == "all" else args.split)
    if not sequences:
        raise ConfigError(f"no {args.split} sequences in {args.data}")
    out = Path(args.out)
    model_id = Path(args.checkpoint).stem
    reports = []
    for seq in sequences:
        rep = ev.evaluate_sequence(model, seq, args.mode, model_id)
        ev.emit_report(rep, "csv", out / f"{seq.seq_id}.csv")
        ev.emit_report(rep, "json", out / f"{seq.seq_id}.json")
        reports.append(rep)
    print(ev.summary_table(reports), end="")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from spacepose.gradsuite import format_results, run_suite
    results = run_suite(args.seeds, args.seed)
    print(format_results(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def _cmd_ablate(args) -> int:
    result = ex.run_experiment(_config(args), args.out, tuple(args.arms), reuse=not args.fresh, seed=args.seed,
                               progress=lambda msg: print(msg, flush=True))
    all_reports = [r for rs in result.reports.values() for r in rs]
    print(ev.summary_table(all_reports), end="")
    if set(ex.ARMS) <= set(result.reports):
        for abl in result.ablations():
            for seq_id, d in abl.deltas().items():
                print(f"{abl.name} {seq_id} ({abl.arm_b} - {abl.arm_a}): mean dt_m {d['dt_m_mean']:+.4f}, "
                      f"max dt_m {d['dt_m_max']:+.4f}, mean dq_deg {d['dq_deg_mean']:+.3f}")
    return EXIT_OK


def _cmd_report(args) -> int:
    paths = []
    for item in args.reports:
        p = Path(item)
        paths.extend(sorted(p.glob("*.json")) if p.is_dir() else [p])
    reports = []
    for p in paths:
        try:
            reports.append(ev.load_report(p))
        except (KeyError, json.JSONDecodeError) as exc:
            raise FormatError(f"{p} is not a sequence report") from exc
    table = ev.summary_table(reports)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(table, encoding="utf-8")
    else:
        print(table, end="")
    return EXIT_OK


COMMANDS = {"config": _cmd_config, "gen": _cmd_gen, "train": _cmd_train, "eval": _cmd_eval,
            "gradcheck": _cmd_gradcheck, "ablate": _cmd_ablate, "report": _cmd_report}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:   # --help
        return int(exc.code or 0)
    warnings.simplefilter("default")
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
