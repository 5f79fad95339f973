"""Command-line entry point: ``dsadlc <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import __version__
from . import model as M
from . import pipeline as P
from .config import RunConfig, dump_config, load_config
from .errors import ConfigError, DSADLCError
from .evaluation import comparison_csv, format_comparison
from .labeling import CASE_FORMAT_VERSION, CaseSet, split_and_balance
from .nn import WEIGHT_FORMAT_VERSION

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _base_config(args) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else RunConfig()


def cmd_synth(args) -> int:
    config = _base_config(args)
    if config.synth is None:
        raise UsageError("synth needs a config file with a [synth] table")
    if args.seed is not None:
        config = config.replace(synth=dataclasses.replace(config.synth, seed=args.seed))
    P.synthesize(config, args.out, _log)
    return EXIT_OK


def cmd_ingest(args) -> int:
    recordings = P.load_dataset(args.dataset_root, _log)
    for rid, rec in sorted(recordings.items()):
        merge = sorted(lid for _, lid in rec.merge_lane_ids())
        lanes = sum(len(ls) for ls in rec.lanes.values())
        print(f"recording {rid}: {len(rec.tracks)} vehicles, {lanes} lanes, merge lanes {merge or 'none'}, "
              f"{rec.frame_rate:g} Hz")
    return EXIT_OK


def cmd_extract(args) -> int:
    config = _base_config(args).replace(t_react=args.t_react, t_h=args.t_h, stride_s=args.stride)
    recordings = P.load_dataset(args.dataset_root, _log)
    cases = P.extract(recordings, config, _log)
    cases.write(args.out)
    counts = cases.label_counts()
    print(f"{len(cases)} cases written to {args.out} (" + ", ".join(f"{k} {v}" for k, v in counts.items()) + ")")
    return EXIT_OK


def cmd_train(args) -> int:
    cases = CaseSet.read(args.cases)
    mc = M.ModelConfig(ablation=args.ablation, epochs=args.epochs, seed=args.seed,
                       t_h=float(cases.meta.get("t_h", 1.5)))
    if args.no_split:
        train_set = cases
    else:
        train_set, test_set = split_and_balance(cases, args.train_fraction, args.dup_factor, args.seed)
        if args.test_out:
            test_set.write(args.test_out)
    net = M.build(mc)
    fit = M.train(net, train_set, mc, progress=lambda e, loss: _log(f"epoch {e}: loss {loss:.6f}"))
    M.save(net, args.out)
    print(f"{mc.ablation.title} model trained on {len(train_set)} rows, final loss {fit.history[-1]:.6f}; "
          f"weights in {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    net = M.load(args.model)
    cases = CaseSet.read(args.cases)
    probs, labels, masked = net.predict_cases(cases, args.mask)
    text = P.predictions_csv(cases, probs, labels, masked)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    net = M.load(args.model)
    cases = CaseSet.read(args.cases)
    recordings = P.load_dataset(args.recordings, _log) if args.recordings else None
    cm, impact = P.evaluate_model(net, cases, recordings, args.mask, float(cases.meta.get("t_react", 1.0)))
    table = format_comparison({net.config.ablation.title: cm})
    print(table, end="")
    if args.report:
        out = Path(args.report)
        out.mkdir(parents=True, exist_ok=True)
        (out / "accuracy.txt").write_text(table)
        (out / "accuracy.csv").write_text(comparison_csv({net.config.ablation.title: cm}))
        if impact is not None:
            impact.write(out / "impact")
    if impact is not None:
        print()
        print(impact.to_text(), end="")
    return EXIT_OK


def cmd_experiment(args) -> int:
    config = _base_config(args)
    changes = {"output_dir": args.out, "cases": args.cases, "dataset_root": args.dataset_root,
               "seed": args.seed, "epochs": args.epochs}
    if args.ablation:
        changes["ablations"] = tuple(args.ablation)
    config = config.replace(**changes)
    if not config.cases and not config.dataset_root and config.synth is None:
        raise UsageError("experiment needs --cases, --dataset-root, or a config with a dataset source")
    if config.cases and not Path(config.cases).exists() and not config.dataset_root and config.synth is None:
        raise UsageError(f"case file {config.cases} does not exist and no dataset root is given")
    result = P.run_experiment(config, _log)
    print(format_comparison(result.matrices), end="")
    return EXIT_OK


def cmd_validate(args) -> int:
    config = load_config(args.config)
    if args.show:
        print(dump_config(config))
    print("OK")
    return EXIT_OK


def cmd_version(args) -> int:
    print(f"dsadlc {__version__}")
    print(f"case file format {CASE_FORMAT_VERSION}")
    print(f"weight file format {WEIGHT_FORMAT_VERSION}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dsadlc", description="Driving-style-aware lane-change decision pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    abl = [a.value for a in M.Ablation]

    s = sub.add_parser("synth", help="generate synthetic recordings in the dataset layout")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, help="seed of the first recording (overrides synth.seed)")
    s.set_defaults(func=cmd_synth, stage="synth")

    s = sub.add_parser("ingest", help="load and check every recording under a dataset root")
    s.add_argument("--dataset-root", required=True)
    s.set_defaults(func=cmd_ingest, stage="ingest")

    s = sub.add_parser("extract", help="extract labelled cases into a case file")
    s.add_argument("--dataset-root", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--t-react", type=float, default=None)
    s.add_argument("--t-h", type=float, default=None)
    s.add_argument("--stride", type=float, default=None, help="lane-keep case spacing in seconds")
    s.add_argument("--config")
    s.set_defaults(func=cmd_extract, stage="extract")

    s = sub.add_parser("train", help="train one model on a case file")
    s.add_argument("--cases", required=True)
    s.add_argument("--ablation", choices=abl, default="full")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--train-fraction", type=float, default=0.9)
    s.add_argument("--dup-factor", type=int, default=16)
    s.add_argument("--no-split", action="store_true", help="train on the whole file as given")
    s.add_argument("--test-out", help="write the held-out split to this case file")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train, stage="train")

    s = sub.add_parser("predict", help="predict decisions for a case file")
    s.add_argument("--model", required=True)
    s.add_argument("--cases", required=True)
    s.add_argument("--mask", type=_on_off, default=True, help="alongside-vehicle safety mask (on|off)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_predict, stage="predict")

    s = sub.add_parser("eval", help="accuracy and lane-change impact report")
    s.add_argument("--model", required=True)
    s.add_argument("--cases", required=True)
    s.add_argument("--recordings", help="dataset root for the impact analysis")
    s.add_argument("--mask", type=_on_off, default=False)
    s.add_argument("--report", help="directory for report files")
    s.set_defaults(func=cmd_eval, stage="eval")

    s = sub.add_parser("experiment", help="train and compare the ablation variants")
    s.add_argument("--config")
    s.add_argument("--cases")
    s.add_argument("--dataset-root")
    s.add_argument("--ablation", choices=abl, action="append")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_experiment, stage="experiment")

    s = sub.add_parser("validate", help="check a run configuration")
    s.add_argument("--config", required=True)
    s.add_argument("--show", action="store_true", help="print the resolved configuration")
    s.set_defaults(func=cmd_validate, stage="validate")

    s = sub.add_parser("version", help="print package and file-format versions")
    s.set_defaults(func=cmd_version, stage="version")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error [{args.stage}]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DSADLCError, OSError, ValueError) as exc:
        print(f"error [{args.stage}]: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
