"""Random-waypoint mobility and per-epoch contact traces.

Contacts are sampled once per epoch boundary: nodes a and b are neighbors in
epoch e iff their positions at the start of epoch e are within radio range.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigError, FormatError

TRACE_MAGIC = "wafl-trace v1"
TOPOLOGIES = ("complete", "ring", "star", "none")


@dataclass(frozen=True)
class RwpConfig:
    field_size: float = 500.0
    radio_range: float = 100.0
    speed_min: float = 5.0
    speed_max: float = 25.0
    pause_epochs_max: int = 5
    num_nodes: int = 10
    seed: int = 0
    # optional (num_nodes, 2) start positions; drawn uniformly when None
    initial_positions: Optional[tuple] = None

    def validate(self):
        if self.field_size <= 0 or self.radio_range <= 0:
            raise ConfigError("field_size and radio_range must be positive")
        if self.speed_min < 0 or self.speed_min > self.speed_max:
            raise ConfigError("need 0 <= speed_min <= speed_max")
        if self.pause_epochs_max < 0:
            raise ConfigError("pause_epochs_max must be nonnegative")
        if self.num_nodes <= 0:
            raise ConfigError("num_nodes must be positive")
        if self.initial_positions is not None:
            pos = np.asarray(self.initial_positions, dtype=float)
            if pos.shape != (self.num_nodes, 2):
                raise ConfigError(f"initial_positions must be ({self.num_nodes}, 2)")
            if pos.min() < 0 or pos.max() > self.field_size:
                raise ConfigError("initial_positions must lie inside the field")


class ContactTrace:
    """Symmetric, irreflexive neighbor relation for each epoch."""

    def __init__(self, num_nodes: int, num_epochs: int,
                 contacts: Iterable[Iterable[tuple[int, int]]]):
        self.num_nodes = int(num_nodes)
        self.num_epochs = int(num_epochs)
        epochs = []
        for e, pairs in enumerate(contacts):
            clean = set()
            for a, b in pairs:
                a, b = int(a), int(b)
                if a == b:
                    raise ValueError(f"self-contact of node {a} in epoch {e}")
                if not (0 <= a < self.num_nodes and 0 <= b < self.num_nodes):
                    raise IndexError(f"node id out of range in epoch {e}: ({a}, {b})")
                clean.add((min(a, b), max(a, b)))
            epochs.append(frozenset(clean))
        if len(epochs) != self.num_epochs:
            raise ValueError(f"got contacts for {len(epochs)} epochs, expected {self.num_epochs}")
        self.contacts = tuple(epochs)

    def __eq__(self, other):
        return (isinstance(other, ContactTrace) and self.num_nodes == other.num_nodes
                and self.num_epochs == other.num_epochs and self.contacts == other.contacts)

    def _check(self, epoch, node):
        if not 0 <= epoch < self.num_epochs:
            raise IndexError(f"epoch {epoch} outside trace of {self.num_epochs} epochs")
        if not 0 <= node < self.num_nodes:
            raise IndexError(f"node {node} outside trace of {self.num_nodes} nodes")

    def neighbors(self, epoch: int, node: int) -> set[int]:
        self._check(epoch, node)
        out = set()
        for a, b in self.contacts[epoch]:
            if a == node:
                out.add(b)
            elif b == node:
                out.add(a)
        return out

    def neighbor_lists(self, epoch: int) -> list[list[int]]:
        """Sorted neighbor list of every node for one epoch."""
        self._check(epoch, 0)
        adj = [[] for _ in range(self.num_nodes)]
        for a, b in sorted(self.contacts[epoch]):
            adj[a].append(b)
            adj[b].append(a)
        return [sorted(x) for x in adj]


def neighbors(trace: ContactTrace, epoch: int, node: int) -> set[int]:
    return trace.neighbors(epoch, node)


def _uniform_point(rng, size):
    return rng.uniform(0.0, size, size=2)


def rwp_positions(cfg: RwpConfig, num_epochs: int) -> np.ndarray:
    """Node positions at every epoch boundary, shape ``(num_epochs, nodes, 2)``.

    Each node walks in a straight line to a uniform waypoint at a uniform
    speed, then rests a uniform integer number of whole epochs in
    ``[0, pause_epochs_max]``; a nonzero pause also forfeits the rest of the
    arrival epoch.
    """
    cfg.validate()
    if num_epochs <= 0:
        raise ValueError("num_epochs must be positive")
    rng = np.random.default_rng(cfg.seed)
    n = cfg.num_nodes
    if cfg.initial_positions is not None:
        pos = np.array(cfg.initial_positions, dtype=float)
    else:
        pos = np.array([_uniform_point(rng, cfg.field_size) for _ in range(n)])
    target = np.array([_uniform_point(rng, cfg.field_size) for _ in range(n)])
    speed = rng.uniform(cfg.speed_min, cfg.speed_max, size=n)
    pause = np.zeros(n, dtype=np.int64)

    out = np.empty((num_epochs, n, 2))
    for e in range(num_epochs):
        out[e] = pos
        for i in range(n):
            if pause[i] > 0:
                pause[i] -= 1
                continue
            budget = 1.0
            while budget > 0 and speed[i] > 0:
                step = target[i] - pos[i]
                dist = float(np.hypot(*step))
                reach = speed[i] * budget
                if reach < dist:
                    pos[i] = pos[i] + step * (reach / dist)
                    break
                pos[i] = target[i].copy()
                budget -= dist / speed[i]
                pause[i] = rng.integers(0, cfg.pause_epochs_max + 1)
                target[i] = _uniform_point(rng, cfg.field_size)
                speed[i] = rng.uniform(cfg.speed_min, cfg.speed_max)
                if pause[i] > 0:
                    break
        np.clip(pos, 0.0, cfg.field_size, out=pos)
    return out


def contacts_from_positions(positions: np.ndarray, radio_range: float) -> list[set]:
    epochs = []
    for pos in positions:
        d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
        a, b = np.nonzero(np.triu(d2 <= radio_range ** 2, k=1))
        epochs.append(set(zip(a.tolist(), b.tolist())))
    return epochs


def generate_trace(cfg: RwpConfig, num_epochs: int) -> ContactTrace:
    positions = rwp_positions(cfg, num_epochs)
    return ContactTrace(cfg.num_nodes, num_epochs,
                        contacts_from_positions(positions, cfg.radio_range))


def static_trace(topology: str, num_nodes: int, num_epochs: int) -> ContactTrace:
    """Same graph every epoch: complete, ring, star (hub 0), or none."""
    if topology == "complete":
        pairs = set(itertools.combinations(range(num_nodes), 2))
    elif topology == "ring":
        pairs = {(min(i, (i + 1) % num_nodes), max(i, (i + 1) % num_nodes))
                 for i in range(num_nodes) if num_nodes > 1}
    elif topology == "star":
        pairs = {(0, i) for i in range(1, num_nodes)}
    elif topology == "none":
        pairs = set()
    else:
        raise ConfigError(f"unknown topology {topology!r}; choose from {TOPOLOGIES}")
    return ContactTrace(num_nodes, num_epochs, [pairs] * num_epochs)


def format_trace(trace: ContactTrace) -> str:
    lines = [f"{TRACE_MAGIC} nodes={trace.num_nodes} epochs={trace.num_epochs}"]
    for e, pairs in enumerate(trace.contacts):
        lines.extend(f"{e},{a},{b}" for a, b in sorted(pairs))
    return "\n".join(lines) + "\n"


def write_trace(trace: ContactTrace, path) -> None:
    Path(path).write_text(format_trace(trace), encoding="ascii")


def parse_trace(text: str) -> ContactTrace:
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty trace file")
    head = lines[0].split()
    try:
        if " ".join(head[:2]) != TRACE_MAGIC or len(head) != 4:
            raise ValueError
        fields = dict(kv.split("=", 1) for kv in head[2:])
        nodes, epochs = int(fields["nodes"]), int(fields["epochs"])
    except (ValueError, KeyError):
        raise FormatError(f"bad trace header: {lines[0]!r}") from None
    contacts = [set() for _ in range(epochs)]
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            e, a, b = (int(tok) for tok in line.split(","))
        except ValueError:
            raise FormatError(f"line {lineno}: expected 'epoch,node_a,node_b', got {line!r}") from None
        if not (0 <= e < epochs and 0 <= a < nodes and 0 <= b < nodes):
            raise FormatError(f"line {lineno}: index out of range in {line!r}")
        if a >= b:
            raise FormatError(f"line {lineno}: need node_a < node_b, got {line!r}")
        if (a, b) in contacts[e]:
            raise FormatError(f"line {lineno}: duplicate contact {line!r}")
        contacts[e].add((a, b))
    return ContactTrace(nodes, epochs, contacts)


def read_trace(path) -> ContactTrace:
    return parse_trace(Path(path).read_text(encoding="ascii"))
