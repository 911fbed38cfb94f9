"""Acceptance experiments with cached JSON results.

Each suite trains whatever it needs under ``<root>/<suite>/`` and writes
``<root>/<suite>.json``. A present JSON file is returned as is, so the
acceptance tests only pay for an experiment once.

    python -m ptlsnn.harness.suites [suite ...] [--root runs/acceptance] [--force]
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from ..conversion import fold_network, primitive_convert
from ..quantization import WeightQuantSpec
from .config import ExperimentConfig
from .experiments import (
    RunDir,
    convert,
    evaluate_model,
    load_or_pretrain,
    load_task_data,
    measure_synops,
    progressive,
)

log = logging.getLogger(__name__)

DEFAULT_ROOT = Path(__file__).resolve().parents[3] / "runs" / "acceptance"

QAT_SEEDS = (0, 1, 2)
QAT_BITS = ("off", "8", "6", "4")
AUTOENCODER_WINDOWS = (32, 8, 1)
SYNOPS_WINDOWS = (2, 4, 8, 16, 32, 64)
SYNOPS_INPUTS = 200


def _final(run, name):
    rows = [r for r in _rows(run) if r["metric"] == name]
    return rows[-1]["value"]


def _rows(run):
    with open(run.metrics_jsonl) as fh:
        return [json.loads(line) for line in fh]


def mnist_ptl(root):
    """CNN pre-train, primitive conversion and full progressive conversion at N_s = 16, T_p = 6."""
    cfg = ExperimentConfig.preset("mnist_cnn")
    run = RunDir(root / "mnist_ptl", cfg)
    data = load_task_data(cfg)
    net = load_or_pretrain(cfg, data, run)
    convert(cfg, data, net, run)
    result = progressive(cfg, data, net, run)
    return dict(
        n_train=int(len(data.x_train) + len(data.x_val)),
        n_test=int(len(data.x_test)),
        ann_accuracy=_final(run, "ann_accuracy"),
        primitive_accuracy=_final(run, "primitive_snn_accuracy"),
        snn_accuracy=_final(run, "ptl_snn_accuracy"),
        synops_ratio=_final(run, "ptl_synops_ratio"),
        epochs=result.epochs_used,
        stages=result.hybrid.n_layers,
    )


def synops_sweep(root):
    """SynOps ratio of primitive conversions of the MNIST CNN over N_s on a fixed input set."""
    cfg = ExperimentConfig.preset("mnist_cnn")
    run = RunDir(root / "mnist_ptl", cfg)
    data = load_task_data(cfg)
    net = fold_network(load_or_pretrain(cfg, data, run))
    calib = data.x_train[: cfg.calibration_size]
    x, y = data.x_test[:SYNOPS_INPUTS], data.y_test[:SYNOPS_INPUTS]
    ratios, accuracy = [], []
    for n_s in SYNOPS_WINDOWS:
        snn, _ = primitive_convert(net, n_s, cfg.percentile, calib)
        ratios.append(measure_synops(snn, net.macs(), x).ratio)
        accuracy.append(evaluate_model(snn, x, y, data.metric))
    return dict(windows=list(SYNOPS_WINDOWS), ratios=ratios, accuracy=accuracy, n_inputs=len(x))


def qat_sweep(root, t_p=2, stage_epoch_cap=4):
    """Progressive conversion with k-bit shared weights over seeds; float runs use the same schedule."""
    out = {}
    for seed in QAT_SEEDS:
        cfg = ExperimentConfig.preset("mnist_cnn", seed=seed, t_p=t_p, stage_epoch_cap=stage_epoch_cap)
        run = RunDir(root / "qat" / f"seed{seed}", cfg)
        data = load_task_data(cfg)
        net = load_or_pretrain(cfg, data, run)
        accs = {"ann": _final(run, "ann_accuracy")}
        for bits in QAT_BITS:
            quant = WeightQuantSpec.parse(bits)
            result = progressive(cfg, data, net, run, quant=quant)
            accs["float" if bits == "off" else bits] = evaluate_model(result.snn, data.x_test, data.y_test, data.metric)
        out[str(seed)] = accs
    return dict(t_p=t_p, stage_epoch_cap=stage_epoch_cap, seeds=out)


def autoencoder_sweep(root):
    """Autoencoder ANN, then progressive conversion of that one network at each window length."""
    base = ExperimentConfig.preset("mnist_autoencoder")
    ann_run = RunDir(root / "autoencoder" / "ann", base)
    data = load_task_data(base)
    net = load_or_pretrain(base, data, ann_run)
    out = {}
    for n_s in AUTOENCODER_WINDOWS:
        cfg = base.updated(dict(n_s=n_s))
        run = RunDir(root / "autoencoder" / f"ns{n_s}", cfg)
        progressive(cfg, data, net, run)
        out[str(n_s)] = _final(run, "ptl_snn_mse")
    return dict(ann_mse=_final(ann_run, "ann_mse"), snn_mse=out)


def separation(root):
    """Toy two-source separation: mask-estimator ANN, then progressive conversion at N_s = 32."""
    cfg = ExperimentConfig.preset("toy_separation")
    run = RunDir(root / "separation", cfg)
    data = load_task_data(cfg)
    net = load_or_pretrain(cfg, data, run)
    result = progressive(cfg, data, net, run)
    return dict(
        ann_si_sdr=_final(run, "ann_pit_si_sdr"),
        snn_si_sdr=_final(run, "ptl_snn_pit_si_sdr"),
        n_s=cfg.n_s,
        epochs=result.epochs_used,
        n_test=int(len(data.x_test)),
    )


SUITES = {
    "separation": separation,
    "autoencoder": autoencoder_sweep,
    "mnist_ptl": mnist_ptl,
    "synops": synops_sweep,
    "qat": qat_sweep,
}


def result_path(name, root=None):
    return Path(root or DEFAULT_ROOT) / f"{name}.json"


def cached(name, root=None, force=False):
    """Result of suite ``name``, running it unless its JSON is already present."""
    root = Path(root or DEFAULT_ROOT)
    path = result_path(name, root)
    if path.exists() and not force:
        return json.loads(path.read_text())
    root.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    result = SUITES[name](root)
    result["seconds"] = round(time.time() - t0, 1)
    path.write_text(json.dumps(result, indent=2, default=_jsonable) + "\n")
    log.info("%s done in %.0fs: %s", name, result["seconds"], result)
    return json.loads(path.read_text())


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def main(argv=None):
    p = argparse.ArgumentParser(prog="python -m ptlsnn.harness.suites", description="Run cached acceptance experiments.")
    p.add_argument("suites", nargs="*", help=f"any of {', '.join(SUITES)} (default: all)")
    p.add_argument("--root", type=Path, default=DEFAULT_ROOT)
    p.add_argument("--force", action="store_true", help="rerun even if a cached result exists")
    args = p.parse_args(argv)
    unknown = set(args.suites) - set(SUITES)
    if unknown:
        p.error(f"unknown suites: {sorted(unknown)}")
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    for name in args.suites or SUITES:
        print(name, json.dumps(cached(name, args.root, args.force)), flush=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
