"""Threshold detection, TPR/FPR tables, reconstruction dumps, rate curves."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import ImageSet
from .nn import Autoencoder
from .wafl import anomaly_scores, anomaly_score

AVERAGE = "avg"
REPORT_HEADER = ("device", "category", "kind", "rate", "count")
CURVES_HEADER = ("epoch", "device", "category", "rate")


def detect(x, model: Autoencoder, alpha: float) -> bool:
    """Anomalous iff the score strictly exceeds alpha."""
    return anomaly_score(x, model) > alpha


@dataclass
class DetectionReport:
    """Positive counts per (device, category).

    Legitimate categories yield false-positive rates, anomaly categories
    true-positive rates.  The ``mnist-<y>`` cells break legitimate FPR down
    by implicit class.
    """

    positives: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    kinds: dict = field(default_factory=dict)

    @property
    def devices(self) -> list:
        return sorted({d for d, _ in self.counts})

    @property
    def categories(self) -> list:
        return list(self.kinds)

    def rate(self, device, category) -> float:
        if device == AVERAGE:
            return self.average(category)
        return self.positives[device, category] / self.counts[device, category]

    def average(self, category) -> float:
        """Unweighted mean over devices."""
        return float(np.mean([self.rate(d, category) for d in self.devices]))

    def rows(self, with_average: bool = True):
        for d in self.devices:
            for cat, kind in self.kinds.items():
                yield d, cat, kind, self.rate(d, cat), self.counts[d, cat]
        if with_average:
            for cat, kind in self.kinds.items():
                total = sum(self.counts[d, cat] for d in self.devices)
                yield AVERAGE, cat, kind, self.average(cat), total


def _device_view(dev):
    return getattr(dev, "device_id"), dev.model, dev.alpha


def compute_rates(devices: Iterable, test_sets: Sequence[ImageSet],
                  per_class: bool = True) -> DetectionReport:
    """Fraction of each test set flagged by each device's model and alpha.

    ``devices`` are objects with ``device_id``, ``model`` and ``alpha``.
    """
    report = DetectionReport()
    for ts in test_sets:
        if len(ts) == 0:
            raise ValueError(f"test set {ts.category_tag!r} is empty")
        report.kinds[ts.category_tag] = "FPR" if ts.legitimate else "TPR"
    if per_class:
        for ts in test_sets:
            if ts.legitimate:
                for y in np.unique(ts.labels):
                    report.kinds[f"{ts.category_tag}-{y}"] = "FPR"

    for dev in devices:
        d, model, alpha = _device_view(dev)
        for ts in test_sets:
            flagged = anomaly_scores(model, ts.vectors) > alpha
            report.positives[d, ts.category_tag] = int(flagged.sum())
            report.counts[d, ts.category_tag] = len(ts)
            if per_class and ts.legitimate:
                for y in np.unique(ts.labels):
                    sel = ts.labels == y
                    report.positives[d, f"{ts.category_tag}-{y}"] = int(flagged[sel].sum())
                    report.counts[d, f"{ts.category_tag}-{y}"] = int(sel.sum())
    return report


def write_report(report: DetectionReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for d, cat, kind, rate, count in report.rows():
            w.writerow([d, cat, kind, repr(float(rate)), count])


def read_report(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        r["rate"] = float(r["rate"])
        r["count"] = int(r["count"])
    return rows


# ------------------------------------------------------------------ images

def quantize(pixels) -> np.ndarray:
    """[0,1] -> 0..255 with round-half-up."""
    return np.floor(np.clip(np.asarray(pixels, dtype=np.float64), 0, 1) * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path, pixels) -> None:
    img = np.asarray(pixels, dtype=np.uint8)
    rows, cols = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (cols, rows))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5" or parts[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    cols, rows = int(parts[1]), int(parts[2])
    payload = parts[4]
    if len(payload) != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} pixel bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(rows, cols)


def dump_reconstructions(model: Autoencoder, samples: ImageSet, path, device_id: int = 0,
                         limit: int | None = None) -> list[Path]:
    """Write input/reconstruction PGM pairs named ``dev<id>_<tag>_<i>_{in,out}.pgm``."""
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = len(samples) if limit is None else min(limit, len(samples))
    shape = samples.images.shape[1:]
    recon = model.forward(samples.vectors[:n]) if n else np.empty((0,) + shape)
    written = []
    for i in range(n):
        stem = f"dev{device_id}_{samples.category_tag}_{i}"
        for suffix, img in (("in", samples.images[i]), ("out", recon[i].reshape(shape))):
            p = out_dir / f"{stem}_{suffix}.pgm"
            write_pgm(p, quantize(img))
            written.append(p)
    return written


# ------------------------------------------------------------------ curves

def rate_curves(metrics: Iterable[dict]) -> list[tuple]:
    """Long-format (epoch, device, category, rate) rows from a metric stream.

    Rate columns are ``tpr_<tag>`` and ``fpr``; the latter is reported under
    category ``mnist``.  Rows without evaluations are skipped.
    """
    out = []
    for row in metrics:
        for key, value in row.items():
            if value in (None, ""):
                continue
            if key.startswith("tpr_"):
                cat = key[4:]
            elif key == "fpr":
                cat = "mnist"
            else:
                continue
            out.append((int(row["epoch"]), int(row["device"]), cat, float(value)))
    out.sort(key=lambda r: (r[0], r[1], r[2]))
    return out


def write_curves(rows: Iterable[tuple], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CURVES_HEADER)
        for epoch, device, cat, rate in rows:
            w.writerow([epoch, device, cat, repr(float(rate))])
