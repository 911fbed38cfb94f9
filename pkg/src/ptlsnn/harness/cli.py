"""Command-line entry point: ``ptlsnn <subcommand> [flags]``.

Subcommands
  pretrain      train the analog network and save ``ann.ckpt``
  convert       primitive conversion of the pre-trained network
  ptl           full pipeline: pre-train (unless ``ann.ckpt`` exists), convert, progressive conversion
  qat           progressive conversion with k-bit shared weights (``--bits``)
  eval          evaluate a saved checkpoint on the test set
  separate-toy  the synthetic two-source separation pipeline
  report        tabulate ``metrics.csv`` of one or more run directories
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..nn.layers import ConfigError
from .config import load_config

log = logging.getLogger("ptlsnn")

COMMANDS = ("pretrain", "convert", "ptl", "qat", "eval", "separate-toy", "report")


def build_parser():
    p = argparse.ArgumentParser(prog="ptlsnn", description="Progressive ANN-to-SNN conversion experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("runs", nargs="*", help="run directories (report only)")
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--task", choices=("mnist_cnn", "mnist_autoencoder", "toy_separation"))
    p.add_argument("--seed", type=int)
    p.add_argument("--ns", type=int, help="encoding time window N_s")
    p.add_argument("--patience", type=int, help="patience period T_p")
    p.add_argument("--bits", help="weight bit width, or 'off'")
    p.add_argument("--percentile", type=float)
    p.add_argument("--out", type=Path, default=Path("runs/default"))
    p.add_argument("--checkpoint", type=Path, help="checkpoint to evaluate (eval only)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config field")
    p.add_argument("--dry-run", action="store_true", help="validate the configuration and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args):
    out = dict(seed=args.seed, n_s=args.ns, t_p=args.patience, bits=args.bits, percentile=args.percentile, task=args.task)
    if args.command == "separate-toy":
        out["task"] = "toy_separation"
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return {k: v for k, v in out.items() if v is not None}


def _report(runs):
    from .experiments import read_metrics

    if not runs:
        raise ConfigError("report needs at least one run directory")
    print(f"{'run':30s} {'metric':34s} {'value':>12s} {'n_s':>4s} {'stage':>9s} {'seed':>4s}")
    for run in runs:
        for r in read_metrics(run):
            print(f"{str(run):30s} {r['metric']:34s} {r['value']:12.6g} {r['n_s']:>4s} {r['stage']:>9s} {r['seed']:>4s}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "report":
            _report(args.runs)
            return 0
        cfg = load_config(args.config, overrides=_overrides(args))
        if args.command == "qat" and not cfg.bits_spec().enabled:
            raise ConfigError("qat needs --bits K")
        if args.dry_run:
            print(cfg.to_text(), end="")
            return 0
        from . import experiments as ex
        from .checkpoint import analog_from_checkpoint, load_checkpoint, spiking_from_checkpoint

        if args.command == "eval":
            data = ex.load_task_data(cfg)
            path = args.checkpoint or ex.RunDir(args.out, cfg).checkpoint("snn")
            ck = load_checkpoint(path)
            model = spiking_from_checkpoint(ck) if ck.meta.get("kind") == "spiking" else analog_from_checkpoint(ck)
            if ck.meta.get("kind") == "analog":
                from ..conversion import fold_network

                model = fold_network(model)
            value = ex.evaluate_model(model, data.x_test, data.y_test, data.metric)
            print(f"{ex.metric_name(cfg)} = {value!r}")
            return 0
        run = ex.RunDir(args.out, cfg)
        data = ex.load_task_data(cfg)
        if args.command == "pretrain":
            ex.pretrain(cfg, data, run)
        elif args.command == "convert":
            ex.convert(cfg, data, ex.load_or_pretrain(cfg, data, run), run)
        elif args.command in ("ptl", "separate-toy"):
            net = ex.load_or_pretrain(cfg, data, run)
            ex.convert(cfg, data, net, run)
            ex.progressive(cfg, data, net, run)
        elif args.command == "qat":
            ex.progressive(cfg, data, ex.load_or_pretrain(cfg, data, run), run)
        _report([run.path])
        return 0
    except ConfigError as exc:
        print(f"ptlsnn: configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any stage failure with a nonzero exit
        log.exception("run failed")
        print(f"ptlsnn: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
