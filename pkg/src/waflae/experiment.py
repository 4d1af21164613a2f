"""Experiment configuration (flat ``key = value`` files) and assembly of the
partitions, test sets and contact trace a run needs."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as D
from .errors import ConfigError
from .mobility import ContactTrace, RwpConfig, TOPOLOGIES, generate_trace, read_trace, static_trace
from .wafl import ProtocolConfig

DATA_ENV = "WAFL_DATA_DIR"


class MissingInputError(FileNotFoundError):
    """A dataset, trace or checkpoint file the run depends on is absent."""


def _key(name, **kw):
    return field(metadata={"key": name}, **kw)


@dataclass
class ExperimentConfig:
    # datasets; relative paths resolve against data_dir, then $WAFL_DATA_DIR
    data_dir: str = ""
    train_images: str = "mnist5k-train-images-idx3-ubyte.gz"
    train_labels: str = "mnist5k-train-labels-idx1-ubyte.gz"
    test_images: str = "mnist5k-test-images-idx3-ubyte.gz"
    test_labels: str = "mnist5k-test-labels-idx1-ubyte.gz"
    fashion_images: str = ""
    fashion_labels: str = ""
    kuzushiji_images: str = ""
    kuzushiji_labels: str = ""
    pool_per_class: int = 0
    test_per_class: int = 0
    blob_count: int = 1000

    # partitioning
    num_devices: int = 10
    p_home: float = 0.9995
    split_ratio: tuple = (4, 1)
    seed: int = 0

    # dirty case
    dirty: bool = False
    dirty_count: int = 50
    dirty_fraction: float = 0.0
    dirty_source: str = "auto"
    dirty_validation: bool = True

    # anomaly recipes
    noise_period: int = 10
    noise_phase: tuple = (0, 0)
    occlusion_center: tuple = (14, 20)
    occlusion_radius: float = 2.5

    # contacts
    topology: str = "rwp"
    trace_path: str = ""
    rwp_field_size: float = 500.0
    rwp_radio_range: float = 100.0
    rwp_speed_min: float = 5.0
    rwp_speed_max: float = 25.0
    rwp_pause_max: int = 5
    rwp_seed: int = -1

    # protocol and training
    lam: float = _key("lambda", default=0.1)
    gamma: float = 0.01
    delta: float = 0.999
    batch_size: int = 32
    epochs: int = 300
    learning_rate: float = 0.001
    momentum: float = 0.9
    layer_sizes: tuple = (784, 256, 64, 256, 784)
    workers: int = 1
    threshold_cadence: str = "epoch"

    # outputs
    eval_interval: int = 10
    checkpoint_epochs: tuple = ()
    out_dir: str = "runs/default"

    def validate(self):
        if self.topology not in TOPOLOGIES + ("rwp",):
            raise ConfigError(f"topology must be one of rwp, {', '.join(TOPOLOGIES)}")
        if self.dirty_source not in ("auto", "fashion", "blobs"):
            raise ConfigError("dirty_source must be auto, fashion or blobs")
        if not 0.0 <= self.p_home <= 1.0:
            raise ConfigError("p_home must lie in [0, 1]")
        if len(self.split_ratio) != 2 or min(self.split_ratio) < 0 or sum(self.split_ratio) == 0:
            raise ConfigError("split_ratio must be two nonnegative integers, e.g. 4:1")
        if self.dirty_count < 0 or not 0.0 <= self.dirty_fraction < 1.0:
            raise ConfigError("dirty_count must be >= 0 and dirty_fraction in [0, 1)")
        if bool(self.fashion_images) != bool(self.fashion_labels) or \
                bool(self.kuzushiji_images) != bool(self.kuzushiji_labels):
            raise ConfigError("image and label paths must be given together")
        if self.eval_interval < 0:
            raise ConfigError("eval_interval must be nonnegative")
        self.protocol().validate()
        self.rwp().validate()

    def protocol(self) -> ProtocolConfig:
        return ProtocolConfig(lam=self.lam, gamma=self.gamma, delta=self.delta,
                              batch_size=self.batch_size, epochs=self.epochs, seed=self.seed,
                              learning_rate=self.learning_rate, momentum=self.momentum,
                              layer_sizes=tuple(self.layer_sizes), workers=self.workers,
                              threshold_cadence=self.threshold_cadence)

    def rwp(self) -> RwpConfig:
        return RwpConfig(field_size=self.rwp_field_size, radio_range=self.rwp_radio_range,
                         speed_min=self.rwp_speed_min, speed_max=self.rwp_speed_max,
                         pause_epochs_max=self.rwp_pause_max, num_nodes=self.num_devices,
                         seed=self.seed if self.rwp_seed < 0 else self.rwp_seed)

    # -------------------------------------------------------- key = value I/O

    @classmethod
    def keys(cls) -> dict:
        return {f.metadata.get("key", f.name): f for f in fields(cls)}

    def set(self, key: str, raw: str) -> None:
        f = self.keys().get(key)
        if f is None:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(self, f.name, _parse_value(f, raw))

    def dumps(self) -> str:
        lines = [f"{k} = {_format_value(getattr(self, f.name))}" for k, f in self.keys().items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        cfg = dataclasses.replace(base) if base is not None else cls()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            cfg.set(key, raw)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except FileNotFoundError:
            raise MissingInputError(f"config file not found: {path}") from None
        return cls.loads(text)

    # ---------------------------------------------------------------- paths

    def resolve(self, name: str) -> Path:
        p = Path(name)
        if p.is_absolute():
            candidates = [p]
        else:
            roots = [r for r in (self.data_dir, os.environ.get(DATA_ENV, ""), "data") if r]
            candidates = [Path(r) / p for r in roots] + [p]
        for c in candidates:
            if c.exists():
                return c
        raise MissingInputError(f"input file not found: {name} (looked in "
                                f"{', '.join(str(c.parent) for c in candidates)})")


def _parse_value(f, raw: str):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "tuple":
            if not raw:
                return ()
            parts = raw.replace(":", ",").split(",")
            vals = [float(p) for p in parts]
            return tuple(int(v) if v.is_integer() else v for v in vals)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {f.name}: {raw!r}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ------------------------------------------------------------- assembling

def _per_class(data: D.ImageSet, k: int, seed) -> D.ImageSet:
    if k <= 0:
        return data
    rng = np.random.default_rng(seed)
    keep = [rng.permutation(np.flatnonzero(data.labels == y))[:k] for y in np.unique(data.labels)]
    return data.subset(np.sort(np.concatenate(keep)))


def load_pool(cfg: ExperimentConfig) -> D.ImageSet:
    pool = D.read_idx(cfg.resolve(cfg.train_images), cfg.resolve(cfg.train_labels))
    return _per_class(pool, cfg.pool_per_class, [cfg.seed, 11])


def load_test(cfg: ExperimentConfig) -> D.ImageSet:
    test = D.read_idx(cfg.resolve(cfg.test_images), cfg.resolve(cfg.test_labels))
    return _per_class(test, cfg.test_per_class, [cfg.seed, 12])


def load_optional(cfg: ExperimentConfig, which: str) -> Optional[D.ImageSet]:
    images = getattr(cfg, f"{which}_images")
    if not images:
        return None
    return D.read_idx(cfg.resolve(images), cfg.resolve(getattr(cfg, f"{which}_labels")), which)


def build_test_sets(cfg: ExperimentConfig) -> list[D.ImageSet]:
    """Legitimate test set first, then every anomaly category available."""
    test = load_test(cfg)
    sets = [test,
            D.make_noisy(test, cfg.noise_period, cfg.noise_phase),
            D.make_occluded(test, cfg.occlusion_center, cfg.occlusion_radius)]
    for which in (D.FASHION, D.KUZUSHIJI):
        extra = load_optional(cfg, which)
        if extra is not None:
            sets.append(_per_class(extra, cfg.test_per_class, [cfg.seed, 13]))
    sets.append(D.make_blobs(cfg.blob_count, seed=np.random.SeedSequence([cfg.seed, 101])))
    return sets


def dirty_anomalies(cfg: ExperimentConfig) -> D.ImageSet:
    source = cfg.dirty_source
    if source == "auto":
        source = D.FASHION if cfg.fashion_images else D.BLOBS
    if source == D.FASHION:
        fashion = load_optional(cfg, D.FASHION)
        if fashion is None:
            raise ConfigError("dirty_source = fashion needs fashion_images/fashion_labels")
        return fashion
    # disjoint stream from the blob test set
    return D.make_blobs(max(cfg.blob_count, 1000), seed=np.random.SeedSequence([cfg.seed, 202]))


def build_partitions(cfg: ExperimentConfig, pool: Optional[D.ImageSet] = None) -> list[D.DevicePartition]:
    pool = load_pool(cfg) if pool is None else pool
    parts = D.make_partitions(pool, cfg.num_devices, cfg.p_home, tuple(cfg.split_ratio), cfg.seed)
    if cfg.dirty:
        anomalies = dirty_anomalies(cfg)
        out = []
        for part in parts:
            local = len(part.train) + len(part.validation)
            count = round(cfg.dirty_fraction * local) if cfg.dirty_fraction > 0 else cfg.dirty_count
            if count > local:
                raise ConfigError(f"device {part.device_id} holds {local} samples, "
                                  f"cannot swap {count} for anomalies")
            out.append(D.inject_dirty(part, anomalies, count,
                                      seed=np.random.SeedSequence([cfg.seed, 303, part.device_id]),
                                      include_validation=cfg.dirty_validation))
        parts = out
    return parts


def build_trace(cfg: ExperimentConfig) -> ContactTrace:
    if cfg.trace_path:
        trace = read_trace(cfg.resolve(cfg.trace_path))
        if trace.num_nodes != cfg.num_devices:
            raise ConfigError(f"trace has {trace.num_nodes} nodes, config has {cfg.num_devices} devices")
        return trace
    if cfg.topology == "rwp":
        return generate_trace(cfg.rwp(), max(cfg.epochs, 1))
    return static_trace(cfg.topology, cfg.num_devices, max(cfg.epochs, 1))
