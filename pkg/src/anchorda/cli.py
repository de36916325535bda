"""Command-line entry point: ``anchorda <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 journey cells failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from anchorda import experiment as E
from anchorda.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from anchorda.metrics import UndefinedMetricError
from anchorda.models import KINDS, PairingError, SchemaMismatchError, fine_tune, train_base
from anchorda.synth import CalibrationError, DatasetParseError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CELLS = 0, 1, 2, 3
DATA_ERRORS = (E.ConfigError, DatasetParseError, CalibrationError, CheckpointError, SchemaMismatchError,
               PairingError, UndefinedMetricError, E.EmptyResultsError, FileNotFoundError, ValueError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _k(value: str):
    if value == "auto":
        return value
    k = int(value)
    if k < 1:
        raise argparse.ArgumentTypeError("k must be a positive integer or 'auto'")
    return k


def _fraction(value: str) -> float:
    f = float(value)
    if not 0.0 <= f <= 1.0:
        raise argparse.ArgumentTypeError("fraction must lie in [0, 1]")
    return f


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="anchorda", description="Anchored domain adaptation for tail-partner engagement prediction.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", type=Path, help="JSON experiment config (defaults used when omitted)")
        if data:
            sp.add_argument("--data", type=Path, required=True, help="dataset directory written by `generate`")

    sp = sub.add_parser("generate", help="write a synthetic dataset and its head/tail split")
    common(sp, data=False)
    sp.add_argument("--out", type=Path, required=True, help="output dataset directory")
    sp.add_argument("--seed", type=int, help="generator seed (overrides the config)")

    sp = sub.add_parser("grid-search", help="choose alpha on validation partners at cold start")
    common(sp)
    sp.add_argument("--model", choices=KINDS, required=True)
    sp.add_argument("--metric", choices=E.SELECT_METRICS, default="ap")
    sp.add_argument("--seed", type=int, help="use only this training seed (default: first grid_seeds config seeds)")
    sp.add_argument("--k", type=_k, help="cutoff for NDCG@k: integer or 'auto' (min(1000, ceil(0.1 n)))")

    sp = sub.add_parser("train-base", help="train a base model on head partners")
    common(sp)
    sp.add_argument("--model", choices=KINDS, required=True)
    sp.add_argument("--alpha", type=float, help="loss weight (default: config alphas[model][metric] or 0.8)")
    sp.add_argument("--metric", choices=E.SELECT_METRICS, default="ap", help="which configured alpha to use")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=Path, required=True, help="checkpoint path")

    sp = sub.add_parser("fine-tune", help="fine-tune a checkpoint on a fraction of tail-test train-day data")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--fraction", type=_fraction, required=True)
    sp.add_argument("--seed", type=int, default=0, help="seed of the nested fraction sample")
    sp.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("evaluate", help="evaluate a checkpoint on eval-day tail-test partners")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--fraction", type=_fraction, default=None,
                    help="journey position; 0 evaluates the target view, otherwise the source view")
    sp.add_argument("--k", type=_k, default="auto")
    sp.add_argument("--partners", choices=("test", "validation", "head"), default="test")
    sp.add_argument("--out", type=Path, help="write the report as CSV here (printed as JSON otherwise)")

    sp = sub.add_parser("journey", help="run base training and the fraction journey for all models and seeds")
    common(sp)
    sp.add_argument("--out", type=Path, required=True, help="results directory")
    sp.add_argument("--model", choices=KINDS, action="append", help="restrict to these models")
    sp.add_argument("--seed", type=int, action="append", help="restrict to these seeds")
    sp.add_argument("--k", type=_k)

    sp = sub.add_parser("report", help="seed-averaged tables and gains over NT from journey results")
    sp.add_argument("--out", type=Path, required=True, help="journey results directory")
    return p


def _alpha_for(cfg: E.ExperimentConfig, model: str, metric: str, alpha):
    if alpha is not None:
        return alpha
    if model == "nt":
        return 1.0
    return cfg.alphas.get(model, {}).get(metric, cfg.train.alpha)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except DATA_ERRORS as exc:
        print(f"anchorda {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


def _dispatch(args) -> int:
    if args.command == "report":
        res = E.cmd_report(args.out)
        print(f"wrote {args.out / 'summary.csv'} and {args.out / 'gains.csv'} ({len(res['summary'])} cells)")
        return EXIT_OK

    cfg = E.load_config(args.config)
    if getattr(args, "k", None) is not None:
        cfg.k = args.k

    if args.command == "generate":
        if args.seed is not None:
            cfg.generator.seed = args.seed
        out = E.cmd_generate(cfg, args.out)
        split = json.loads((out / "split.json").read_text())
        print(json.dumps({"out": str(out), "head": len(split["head"]), "validation": len(split["validation"]),
                          "test": len(split["test"])}))
        return EXIT_OK

    ds, split = E.load_data(args.data)

    if args.command == "grid-search":
        chosen, table = E.grid_search(ds, split, args.model, cfg, (args.metric,),
                                      None if args.seed is None else [args.seed])
        print(json.dumps({"model": args.model, "metric": args.metric, "alpha": chosen[args.metric],
                          "validation": {str(a): v[args.metric] for a, v in table.items()}}))
        return EXIT_OK

    if args.command == "train-base":
        x, y = E._head_xy(ds, split)
        tcfg = cfg.train_config(args.model, _alpha_for(cfg, args.model, args.metric, args.alpha), args.seed)
        ckpt = train_base(args.model, ds.records.schema, x, y, tcfg)
        save_checkpoint(ckpt, args.out)
        print(json.dumps({"checkpoint": str(args.out), "alpha": ckpt.bundle.alpha, "loss": ckpt.history}))
        return EXIT_OK

    if args.command == "fine-tune":
        base = E.load_base(args.checkpoint, ds)
        fx, fy = E.fraction_xy(ds, split.test, args.fraction, args.seed)
        ckpt = fine_tune(base, fx, fy, fraction=args.fraction)
        save_checkpoint(ckpt, args.out)
        print(json.dumps({"checkpoint": str(args.out), "phase": ckpt.phase, "n_records": len(fy)}))
        return EXIT_OK

    if args.command == "evaluate":
        ckpt = load_checkpoint(args.checkpoint, ds.records.schema.fingerprint)
        fraction = args.fraction
        if fraction is None:
            fraction = 0.0 if ckpt.phase == "base" else 1.0
        partners = getattr(split, args.partners)
        rep = E.evaluate(ckpt, ds, partners, E.view_for(fraction), cfg.k)
        if args.out:
            rows = E._rows(ckpt.bundle.kind, fraction, ckpt.config.seed, rep, list(rep.macro))
            E._write_csv(args.out, E.RESULT_COLUMNS, rows)
        print(json.dumps({"macro": rep.macro, "micro": rep.micro, "n_included": rep.n_included}, sort_keys=True))
        return EXIT_OK

    if args.command == "journey":
        if args.model:
            cfg.models = args.model
        if args.seed:
            cfg.seeds = args.seed
        cfg.validate()
        res = E.run_journey(args.data, cfg, args.out)
        if res["failures"]:
            print(f"{len(res['failures'])} cell(s) failed; see {args.out / 'failures.json'}", file=sys.stderr)
            return EXIT_CELLS
        print(f"wrote {args.out / 'results.csv'}")
        return EXIT_OK
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
