"""Device-to-device model aggregation and distributed threshold finding.

One epoch of the protocol runs in synchronous phases so that every device
sees the same snapshot of its neighbors, whatever order devices are updated
in:

1. snapshot all parameter vectors and thresholds
2. devices with neighbors pull their model toward the neighbors' snapshots
3. one shuffled pass of mini-batch SGD over the local train split
4. recompute the local threshold beta from validation-set anomaly scores
5. average alpha with the neighbors' snapshot alphas, weighting in beta

With ``threshold_cadence = "step"`` phases 4 and 5 run after every
mini-batch instead, all devices stepping in lockstep, so alpha gets one
exchange per local update rather than one per epoch.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import DevicePartition
from .errors import ConfigError, ShapeError
from .mobility import ContactTrace
from .nn import DEFAULT_LAYER_SIZES, Autoencoder, OptimizerState, ParamVector, train_step

DENSITY_FLOOR = 1e-6
CADENCES = ("epoch", "step")


@dataclass
class ProtocolConfig:
    lam: float = 0.1
    gamma: float = 0.01
    delta: float = 0.999
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    learning_rate: float = 0.001
    momentum: float = 0.9
    layer_sizes: tuple = DEFAULT_LAYER_SIZES
    workers: int = 1
    threshold_cadence: str = "epoch"

    def validate(self):
        # lam == 0 is allowed: it switches model exchange off
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be nonnegative, got {self.gamma}")
        if not 0.0 < self.delta <= 1.0:
            raise ConfigError(f"delta must lie in (0, 1], got {self.delta}")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need learning_rate >= 0 and 0 <= momentum < 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.threshold_cadence not in CADENCES:
            raise ConfigError(f"threshold_cadence must be one of {', '.join(CADENCES)}")


@dataclass
class DeviceState:
    device_id: int
    model: Autoencoder
    opt: OptimizerState
    partition: DevicePartition
    alpha: Optional[float] = None
    beta: Optional[float] = None


@dataclass
class EpochMetrics:
    epoch: int
    device: int
    alpha: float
    beta: float
    train_loss: float
    neighbors: list = field(default_factory=list)


# ------------------------------------------------------------ aggregation

def aggregate_models(own: ParamVector, neighbor_params: Sequence[ParamVector],
                     lam: float) -> ParamVector:
    """own + lam * sum_k(W_k - own) / (|nbr| + 1)."""
    own = np.asarray(own, dtype=np.float64)
    if not len(neighbor_params):
        return own.copy()
    acc = np.zeros_like(own)
    for w in neighbor_params:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != own.shape:
            raise ShapeError(f"neighbor vector shape {w.shape} != own {own.shape}")
        acc += w - own
    return own + lam * acc / (len(neighbor_params) + 1)


def aggregate_threshold(own_alpha: float, neighbor_alphas: Sequence[float],
                        own_beta: float, gamma: float) -> float:
    """(sum_k alpha_k + alpha + gamma*beta) / (|nbr| + 1 + gamma).

    Evaluated as own_alpha plus a weighted mean of differences, which returns
    own_alpha bit-for-bit when every input already agrees.
    """
    pull = sum(a - own_alpha for a in neighbor_alphas) + gamma * (own_beta - own_alpha)
    out = own_alpha + pull / (len(neighbor_alphas) + 1 + gamma)
    # convex combination; clip away last-ulp rounding overshoot
    vals = list(neighbor_alphas) + [own_alpha]
    if gamma > 0:
        vals.append(own_beta)
    return float(min(max(out, min(vals)), max(vals)))


# ---------------------------------------------------------------- scoring

def density(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("density of an empty vector")
    return float(x.mean())


def anomaly_scores(model: Autoencoder, x) -> np.ndarray:
    """Reconstruction MSE divided by input density, row-wise for a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x.reshape(len(x), -1)
    recon = model.forward(x2)
    err = np.mean((recon - x2) ** 2, axis=1)
    dens = np.maximum(x2.mean(axis=1), DENSITY_FLOOR)
    out = err / dens
    return out[0] if single else out


def anomaly_score(x, model: Autoencoder) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    return float(anomaly_scores(model, x))


def local_threshold(scores, delta: float) -> float:
    """Empirical inverse CDF: the ceil(delta*M)-th smallest score."""
    s = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    m = s.size
    if m == 0:
        raise ValueError("local_threshold needs at least one score")
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    # round first so 0.999*1000 style products don't ceil one rank too far
    k = math.ceil(round(delta * m, 9))
    return float(s[min(max(k, 1), m) - 1])


# ----------------------------------------------------------- device setup

def init_devices(partitions: Sequence[DevicePartition], cfg: ProtocolConfig) -> list[DeviceState]:
    """Fresh models seeded from (seed, device_id)."""
    devices = []
    for part in partitions:
        ss = np.random.SeedSequence([cfg.seed, part.device_id])
        model = Autoencoder.initialize(cfg.layer_sizes, seed=ss)
        if part.train.vectors.shape[1] != model.layer_sizes[0]:
            raise ConfigError(
                f"device {part.device_id}: images have {part.train.vectors.shape[1]} pixels, "
                f"model expects {model.layer_sizes[0]}")
        opt = OptimizerState.for_model(model, cfg.learning_rate, cfg.momentum)
        devices.append(DeviceState(part.device_id, model, opt, part))
    return devices


def epoch_batches(dev: DeviceState, epoch: int, cfg: ProtocolConfig) -> list[np.ndarray]:
    """Mini-batches of one shuffled pass, seeded by (seed, epoch, device)."""
    x = dev.partition.train.vectors
    rng = np.random.default_rng([cfg.seed, epoch, dev.device_id])
    order = rng.permutation(len(x))
    return [x[order[i:i + cfg.batch_size]] for i in range(0, len(x), cfg.batch_size)]


def local_epoch(dev: DeviceState, epoch: int, cfg: ProtocolConfig) -> float:
    """One shuffled pass of mini-batch training; returns the mean batch loss."""
    batches = epoch_batches(dev, epoch, cfg)
    if not batches:
        return float("nan")
    return float(np.mean([train_step(dev.model, dev.opt, b) for b in batches]))


def compute_beta(dev: DeviceState, delta: float) -> float:
    val = dev.partition.validation.vectors
    if len(val) == 0:
        val = dev.partition.train.vectors
    return local_threshold(anomaly_scores(dev.model, val), delta)


def run_epoch(devices: Sequence[DeviceState], trace: ContactTrace, epoch: int,
              cfg: ProtocolConfig) -> list[EpochMetrics]:
    if trace.num_nodes != len(devices):
        raise ConfigError(f"trace has {trace.num_nodes} nodes but there are {len(devices)} devices")
    nbrs = trace.neighbor_lists(epoch)
    params = [d.model.params.copy() for d in devices]
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def each(fn):
        idx = range(len(devices))
        return list(pool.map(fn, idx)) if pool else [fn(i) for i in idx]

    def mix(i):
        if nbrs[i]:
            devices[i].model.params[:] = aggregate_models(
                params[i], [params[k] for k in nbrs[i]], cfg.lam)

    try:
        if cfg.threshold_cadence == "epoch":
            def update(i):
                mix(i)
                loss = local_epoch(devices[i], epoch, cfg)
                devices[i].beta = compute_beta(devices[i], cfg.delta)
                return loss

            losses = each(update)
            _exchange_alpha(devices, nbrs, cfg.gamma)
        else:
            each(mix)
            batches = [epoch_batches(d, epoch, cfg) for d in devices]
            batch_losses = [[] for _ in devices]

            def step(i, s):
                if s < len(batches[i]):
                    batch_losses[i].append(train_step(devices[i].model, devices[i].opt, batches[i][s]))
                    devices[i].beta = compute_beta(devices[i], cfg.delta)

            for i, dev in enumerate(devices):
                if not batches[i]:  # nothing to train on; model moved only by mixing
                    dev.beta = compute_beta(dev, cfg.delta)
            for s in range(max(max(map(len, batches), default=0), 1)):
                each(lambda i: step(i, s))
                _exchange_alpha(devices, nbrs, cfg.gamma)
            losses = [float(np.mean(b)) if b else float("nan") for b in batch_losses]
    finally:
        if pool:
            pool.shutdown()

    return [EpochMetrics(epoch, d.device_id, d.alpha, d.beta, losses[i], nbrs[i])
            for i, d in enumerate(devices)]


def _exchange_alpha(devices: Sequence[DeviceState], nbrs, gamma: float) -> None:
    """Synchronous threshold round against snapshot alphas."""
    # alpha starts at the first beta
    for dev in devices:
        if dev.alpha is None:
            dev.alpha = dev.beta
    alphas = [d.alpha for d in devices]
    for i, dev in enumerate(devices):
        dev.alpha = aggregate_threshold(alphas[i], [alphas[k] for k in nbrs[i]], dev.beta, gamma)
