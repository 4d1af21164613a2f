"""Epoch loop over all devices, metric stream and checkpoints."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

from .data import DevicePartition, ImageSet
from .errors import ConfigError
from .evaluation import DetectionReport, compute_rates
from .mobility import ContactTrace
from .nn import CHECKPOINT_SUFFIX, save_checkpoint
from .wafl import DeviceState, EpochMetrics, ProtocolConfig, init_devices, run_epoch

log = logging.getLogger(__name__)

BASE_COLUMNS = ("epoch", "device", "alpha", "beta", "train_loss")


@dataclass
class SimulationResult:
    devices: list
    metrics: list = field(default_factory=list)
    evaluations: dict = field(default_factory=dict)
    anomaly_tags: list = field(default_factory=list)
    legitimate_tag: Optional[str] = None

    def columns(self) -> list[str]:
        cols = list(BASE_COLUMNS)
        if self.legitimate_tag is not None or self.anomaly_tags:
            cols += [f"tpr_{t}" for t in self.anomaly_tags] + ["fpr"]
        return cols

    def rows(self) -> list[dict]:
        out = []
        for m in self.metrics:
            row = {"epoch": m.epoch, "device": m.device, "alpha": m.alpha,
                   "beta": m.beta, "train_loss": m.train_loss}
            report = self.evaluations.get(m.epoch)
            for t in self.anomaly_tags:
                row[f"tpr_{t}"] = report.rate(m.device, t) if report else None
            if self.legitimate_tag is not None:
                row["fpr"] = report.rate(m.device, self.legitimate_tag) if report else None
            out.append(row)
        return out

    def metrics_csv(self) -> str:
        return format_metrics(self.rows(), self.columns())


def checkpoint_name(device_id: int, epoch: int) -> str:
    return f"dev{device_id}_ep{epoch}{CHECKPOINT_SUFFIX}"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_metrics(rows: Iterable[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _tags(test_sets):
    legit = [t.category_tag for t in test_sets if t.legitimate]
    if len(legit) > 1:
        raise ConfigError(f"expected at most one legitimate test set, got {legit}")
    return [t.category_tag for t in test_sets if not t.legitimate], (legit[0] if legit else None)


def run_simulation(cfg: ProtocolConfig, trace: ContactTrace,
                   partitions: Sequence[DevicePartition],
                   test_sets: Sequence[ImageSet] = (),
                   eval_interval: int = 0,
                   checkpoint_epochs: Iterable[int] = (),
                   checkpoint_dir=None,
                   on_epoch: Optional[Callable[[int, list], None]] = None) -> SimulationResult:
    """Initialize devices, then run ``cfg.epochs`` protocol epochs.

    With ``eval_interval > 0`` every device is scored on ``test_sets`` at
    epochs 0, eval_interval, 2*eval_interval, ... and at the final epoch.
    """
    cfg.validate()
    if len(partitions) != trace.num_nodes:
        raise ConfigError(f"{len(partitions)} partitions but trace has {trace.num_nodes} nodes")
    if sorted(p.device_id for p in partitions) != list(range(len(partitions))):
        raise ConfigError("partition device ids must be 0..N-1")
    if cfg.epochs > trace.num_epochs:
        raise ConfigError(f"trace covers {trace.num_epochs} epochs, {cfg.epochs} requested")
    checkpoint_epochs = set(checkpoint_epochs)
    if checkpoint_epochs and checkpoint_dir is None:
        raise ConfigError("checkpoint epochs given without a checkpoint directory")

    partitions = sorted(partitions, key=lambda p: p.device_id)
    devices: list[DeviceState] = init_devices(partitions, cfg)
    anomaly_tags, legit_tag = _tags(test_sets)
    result = SimulationResult(devices, anomaly_tags=anomaly_tags, legitimate_tag=legit_tag)

    for epoch in range(cfg.epochs):
        metrics: list[EpochMetrics] = run_epoch(devices, trace, epoch, cfg)
        result.metrics.extend(metrics)
        if test_sets and eval_interval > 0 and (
                epoch % eval_interval == 0 or epoch == cfg.epochs - 1):
            report: DetectionReport = compute_rates(devices, test_sets)
            result.evaluations[epoch] = report
            log.info("epoch %d: avg fpr %.4f %s", epoch,
                     report.average(legit_tag) if legit_tag else float("nan"),
                     " ".join(f"{t}={report.average(t):.3f}" for t in anomaly_tags))
        if epoch in checkpoint_epochs:
            out = Path(checkpoint_dir)
            out.mkdir(parents=True, exist_ok=True)
            for dev in devices:
                save_checkpoint(dev.model, out / checkpoint_name(dev.device_id, epoch))
        if on_epoch is not None:
            on_epoch(epoch, metrics)
    return result
