"""Command line entry point: ``flipseg <command> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import describe, load_config
from .errors import ConfigError, DataError, FlipsegError, NumericError

EXIT_CODES = """exit codes:
  0  success
  2  configuration error (bad file, unknown key, value out of bounds, bad flag)
  3  data error (missing or malformed image, mask, box or model file)
  4  numeric failure (non-finite loss or gradient)
"""


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI run configuration (see 'flipseg config-keys')")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one configuration value; repeatable")
    p.add_argument("--data", help="dataset root (overrides data.root)")
    p.add_argument("--seed", type=int, help="overrides run.seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flipseg", description="Box-supervised segmentation by multi-agent superpixel erasing.",
        epilog=EXIT_CODES, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=EXIT_CODES,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        _common(p)
        return p

    add("gen-data", "write a synthetic dataset (images, masks, boxes, manifest) to --out or data.root")

    p = add("train-classifier", "train the nodule/normal classifier on the train split")
    p.add_argument("--dump-candidates", action="store_true",
                   help="also write candidates.csv with every eraser candidate's normal score")

    p = add("train-agents", "train the erasing agents (writes agents.flnn after every epoch)")
    p.add_argument("--classifier", required=True, help="classifier file or directory")
    p.add_argument("--resume", help="checkpoint file or directory to continue from")
    p.add_argument("--epoch-scale", type=float, help="overrides agents.epoch_scale")
    p.add_argument("--epochs", type=int, help="overrides agents.epochs (full-length count)")

    p = add("segment", "segment one image or a whole split with trained agents")
    p.add_argument("--model", required=True, help="agents checkpoint file or directory")
    p.add_argument("--classifier", required=True, help="classifier file or directory")
    p.add_argument("--image", help="single image (.pgm or .flv)")
    p.add_argument("--box", help="box annotation for --image")
    p.add_argument("--split", choices=("train", "val", "test"), help="dataset split (default test)")
    p.add_argument("--dir", help="directory of <name>.pgm/.flv + <name>.box files")
    p.add_argument("--n-segment", type=int, help="superpixel count (default: final curriculum level)")

    p = add("eval", "score predicted masks against ground truth; CSV on stdout, eval.csv + eval.png in --out")
    p.add_argument("--pred", required=True, help="directory with <name>_mask files")
    p.add_argument("--gt", required=True, help="directory with ground-truth <name>_mask files")

    p = add("dump-trace-plot", "render a segment trace CSV as an SVG erasing curve")
    p.add_argument("--trace", required=True, help="<name>_trace.csv from segment")

    sub.add_parser("config-keys", help="list every configuration key with its default")
    return parser


def _resolve(args):
    overrides = list(args.overrides)
    if args.data:
        overrides.append(f"data.root={args.data}")
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if getattr(args, "epoch_scale", None) is not None:
        overrides.append(f"agents.epoch_scale={args.epoch_scale}")
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"agents.epochs={args.epochs}")
    return load_config(args.config, overrides)


def run(args) -> int:
    from . import pipeline

    if args.command == "config-keys":
        print(describe())
        return 0
    cfg = _resolve(args)
    if args.command == "gen-data":
        info = pipeline.cmd_gen_data(cfg, args.out)
        print(",".join(f"{k}={v}" for k, v in info.items()))
    elif args.command == "train-classifier":
        report = pipeline.cmd_train_classifier(cfg, args.out, args.dump_candidates)
        print("metric,value")
        for k, v in report.items():
            print(f"{k},{v}")
    elif args.command == "train-agents":
        info = pipeline.cmd_train_agents(cfg, args.classifier, args.out, args.resume)
        print(",".join(f"{k}={v}" for k, v in info.items()))
    elif args.command == "segment":
        cases = pipeline.select_cases(cfg, args.image, args.box, args.split, args.dir)
        rows = pipeline.cmd_segment(cfg, args.model, args.classifier, cases, args.out, args.n_segment)
        print(",".join(pipeline.SEGMENT_FIELDS))
        for r in rows:
            print(",".join(str(r.get(k, "")) for k in pipeline.SEGMENT_FIELDS))
    elif args.command == "eval":
        rows, agg = pipeline.cmd_eval(cfg, args.pred, args.gt, args.out)
        sys.stdout.write(pipeline.format_eval(rows, agg))
    elif args.command == "dump-trace-plot":
        print(pipeline.cmd_dump_trace_plot(args.trace, args.out))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"flipseg: config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"flipseg: data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"flipseg: data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"flipseg: numeric error: {exc}", file=sys.stderr)
        return 4
    except FlipsegError as exc:
        print(f"flipseg: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
