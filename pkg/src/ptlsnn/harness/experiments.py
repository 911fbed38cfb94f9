"""End-to-end experiment pipelines and run-directory artifacts."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..conversion import fold_network, primitive_convert
from ..metrics import SynOpsLedger, evaluate_metrics
from ..nn.losses import sigmoid
from ..nn.net import AnalogNet
from ..nn.optim import StepDecay
from ..nn.train import train_analog
from ..spiking.network import SpikingNet, SpikingRecord
from ..tandem import ptl_train
from .checkpoint import (
    analog_from_checkpoint,
    analog_to_checkpoint,
    load_checkpoint,
    save_checkpoint,
    spiking_to_checkpoint,
)
from .config import ExperimentConfig
from .data import default_mnist_dir, load_mnist_dir, synth_mixture_gen, train_val_split
from .separation import SeparationTask

log = logging.getLogger(__name__)

CSV_COLUMNS = ("metric", "value", "n_s", "stage", "seed")


class RunDir:
    """Artifacts of one experiment: config copy, stage log, metrics (JSON-lines and CSV), checkpoints."""

    def __init__(self, path, cfg: ExperimentConfig):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        (self.path / "config.txt").write_text(cfg.to_text())
        self.stage_log = self.path / "stage_log.jsonl"
        self.metrics_jsonl = self.path / "metrics.jsonl"
        self.metrics_csv = self.path / "metrics.csv"
        if not self.metrics_csv.exists():
            with open(self.metrics_csv, "w", newline="") as fh:
                csv.writer(fh).writerow(CSV_COLUMNS)

    def metric(self, name, value, stage="final", n_s=None):
        row = dict(metric=name, value=float(value), n_s=self.cfg.n_s if n_s is None else n_s, stage=stage, seed=self.cfg.seed)
        with open(self.metrics_jsonl, "a") as fh:
            fh.write(json.dumps(row) + "\n")
        with open(self.metrics_csv, "a", newline="") as fh:
            csv.writer(fh).writerow([row[c] for c in CSV_COLUMNS])
        log.info("metric %s", row)
        return row

    def checkpoint(self, name):
        return self.path / f"{name}.ckpt"


def read_metrics(path):
    """Rows of a run's ``metrics.csv`` as dicts with float values."""
    with open(Path(path) / "metrics.csv", newline="") as fh:
        return [dict(r, value=float(r["value"])) for r in csv.DictReader(fh)]


# --------------------------------------------------------------------- data


@dataclass
class TaskData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    loss: object
    metric: object
    output_activation: str | None = None
    separation: SeparationTask | None = None


def load_task_data(cfg: ExperimentConfig) -> TaskData:
    if cfg.task == "toy_separation":
        task = SeparationTask()
        train = synth_mixture_gen(cfg.seed, cfg.n_train)
        test = synth_mixture_gen(cfg.seed + 10_000, cfg.n_test)
        x, y = task.make_xy(train)
        xt, yt = task.make_xy(test)
        tr, va = train_val_split(len(x), cfg.val_fraction, cfg.seed)
        return TaskData(x[tr], y[tr], x[va], y[va], xt, yt, task.loss, task.metric, "sigmoid", task)
    d = load_mnist_dir(cfg.data_dir or default_mnist_dir())
    x, y = d["train"]
    xt, yt = d["test"]
    if cfg.train_limit:
        x, y = x[: cfg.train_limit], y[: cfg.train_limit]
    tr, va = train_val_split(len(x), cfg.val_fraction, cfg.seed)
    if cfg.task == "mnist_cnn":
        x, xt = x[:, None], xt[:, None]
        return TaskData(x[tr], y[tr], x[va], y[va], xt, yt, "cross_entropy", _accuracy)
    x, xt = x.reshape(len(x), -1), xt.reshape(len(xt), -1)
    return TaskData(x[tr], x[tr], x[va], x[va], xt, xt, "sigmoid_mse", _sigmoid_mse, "sigmoid")


def _accuracy(out, y):
    return evaluate_metrics("accuracy", out, y)


def _sigmoid_mse(out, y):
    return evaluate_metrics("mse", sigmoid(out), y)


def metric_name(cfg):
    return {"mnist_cnn": "accuracy", "mnist_autoencoder": "mse", "toy_separation": "pit_si_sdr"}[cfg.task]


def schedule_for(cfg):
    return StepDecay(cfg.lr, cfg.lr_decay_epoch or None, cfg.lr_decay_factor)


def evaluate_model(model, x, y, metric, batch_size=250):
    """Size-weighted metric of an analog or spiking network over ``(x, y)``."""
    total = 0.0
    for i in range(0, len(x), batch_size):
        out = model.forward(x[i : i + batch_size])
        total += metric(out, y[i : i + batch_size]) * len(out)
    return total / len(x)


def measure_synops(snn: SpikingNet, ann_macs, x, batch_size=250) -> SynOpsLedger:
    """SynOps ledger of ``snn`` over ``x``.

    The analog first layer is counted with its MACs, identically to the ANN;
    every later layer contributes spikes times fan-out.
    """
    ledger = SynOpsLedger(int(ann_macs))
    first = snn.layers[0].layer.macs(snn.input_shape)
    for i in range(0, len(x), batch_size):
        rec = SpikingRecord()
        xb = x[i : i + batch_size]
        snn.forward(xb, record=rec)
        ledger.add(sum(rec.synops) + first * len(xb), len(xb))
    return ledger


# --------------------------------------------------------------------- pipeline steps


def pretrain(cfg: ExperimentConfig, data: TaskData, run: RunDir | None = None) -> AnalogNet:
    net = AnalogNet.from_architecture(cfg.architecture, seed=cfg.seed, output_activation=data.output_activation)
    t0 = time.time()
    train_analog(
        net,
        data.x_train,
        data.y_train,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        loss=data.loss,
        schedule=schedule_for(cfg),
        seed=cfg.seed,
    )
    log.info("pre-training took %.1fs", time.time() - t0)
    if run is not None:
        save_checkpoint(run.checkpoint("ann"), analog_to_checkpoint(net, seed=cfg.seed))
        run.metric(f"ann_{metric_name(cfg)}", evaluate_model(fold_network(net), data.x_test, data.y_test, data.metric), stage="ann")
    return net


def load_or_pretrain(cfg, data, run):
    path = run.checkpoint("ann")
    if path.exists():
        return analog_from_checkpoint(load_checkpoint(path))
    return pretrain(cfg, data, run)


def convert(cfg, data, net, run=None):
    folded = fold_network(net)
    calib = data.x_train[: cfg.calibration_size]
    snn, report = primitive_convert(folded, cfg.n_s, cfg.percentile, calib)
    if run is not None:
        (run.path / "conversion_report.txt").write_text(report.to_text())
        run.metric(f"primitive_snn_{metric_name(cfg)}", evaluate_model(snn, data.x_test, data.y_test, data.metric), stage="primitive")
    return snn


def progressive(cfg, data, net, run=None, quant=None):
    quant = quant if quant is not None else cfg.bits_spec()
    result = ptl_train(
        net,
        data.x_train,
        data.y_train,
        data.x_val,
        data.y_val,
        cfg.n_s,
        cfg.t_p,
        loss=data.loss,
        metric=data.metric,
        percentile=cfg.percentile,
        calibration_size=cfg.calibration_size,
        epoch_budget=cfg.ptl_epochs,
        stage_epoch_cap=cfg.stage_epoch_cap,
        batch_size=cfg.batch_size,
        schedule=schedule_for(cfg),
        quant=quant,
        seed=cfg.seed,
        log_path=run.stage_log if run is not None else None,
    )
    if run is not None:
        name = metric_name(cfg)
        tag = "ptl" if not quant.enabled else f"ptl_{quant.bits}bit"
        save_checkpoint(
            run.checkpoint("snn" if not quant.enabled else f"snn_{quant.bits}bit"),
            spiking_to_checkpoint(result.snn, net.architecture, quant, seed=cfg.seed, stage=result.hybrid.stage),
        )
        run.metric(f"{tag}_snn_{name}", evaluate_model(result.snn, data.x_test, data.y_test, data.metric), stage="final")
        run.metric(f"{tag}_epochs", result.epochs_used, stage="final")
        if cfg.task != "toy_separation":
            ledger = measure_synops(result.snn, fold_network(net).macs(), data.x_test)
            run.metric(f"{tag}_synops_ratio", ledger.ratio, stage="final")
    return result


def run_experiment(cfg: ExperimentConfig, out) -> RunDir:
    """Pre-train, fold, convert primitively, run progressive conversion and evaluate."""
    run = RunDir(out, cfg)
    data = load_task_data(cfg)
    net = load_or_pretrain(cfg, data, run)
    convert(cfg, data, net, run)
    progressive(cfg, data, net, run)
    return run
