import math

import numpy as np
import pytest

from waflae.data import DevicePartition, ImageSet
from waflae.errors import ConfigError, ShapeError
from waflae.mobility import ContactTrace, static_trace
from waflae.nn import Autoencoder, load_checkpoint, save_checkpoint
from waflae.simulation import run_simulation
from waflae.wafl import (ProtocolConfig, aggregate_models, aggregate_threshold, anomaly_score,
                         anomaly_scores, density, init_devices, local_threshold, run_epoch)

SIZES = (4, 2, 4)


def tiny_partitions(n_devices, n_train=12, n_val=5, seed=0):
    rng = np.random.default_rng(seed)
    parts = []
    for d in range(n_devices):
        tr = ImageSet(rng.random((n_train, 2, 2)), np.full(n_train, d))
        va = ImageSet(rng.random((n_val, 2, 2)), np.full(n_val, d))
        parts.append(DevicePartition(d, tr, va))
    return parts


def tiny_cfg(**kw):
    base = dict(layer_sizes=SIZES, batch_size=4, epochs=5, learning_rate=0.05, seed=1)
    base.update(kw)
    return ProtocolConfig(**base)


# ------------------------------------------------------------- model mixing

def test_aggregate_models_examples():
    own = np.array([0.0])
    assert aggregate_models(own, [np.array([1.0])], 0.1)[0] == pytest.approx(0.05, abs=1e-15)
    w = np.array([0.3, -1.2, 7.0])
    assert np.array_equal(aggregate_models(w, [], 0.1), w)
    assert np.array_equal(aggregate_models(w, [w.copy(), w.copy()], 0.7), w)
    with pytest.raises(ShapeError):
        aggregate_models(w, [np.zeros(2)], 0.1)


def test_aggregate_models_matches_loop_oracle():
    rng = np.random.default_rng(0)
    own = rng.normal(size=6)
    nbrs = [rng.normal(size=6) for _ in range(3)]
    lam = 0.37
    expect = [own[j] + lam * sum(nb[j] - own[j] for nb in nbrs) / 4 for j in range(6)]
    np.testing.assert_allclose(aggregate_models(own, nbrs, lam), expect, rtol=1e-14)


@pytest.mark.parametrize("topology", ["complete", "ring"])
def test_mean_preserved_on_regular_graphs(topology):
    rng = np.random.default_rng(3)
    n = 6
    params = [rng.normal(size=10) for _ in range(n)]
    trace = static_trace(topology, n, 1)
    adj = trace.neighbor_lists(0)
    new = [aggregate_models(params[i], [params[k] for k in adj[i]], 0.3) for i in range(n)]
    np.testing.assert_allclose(np.sum(new, axis=0), np.sum(params, axis=0), atol=1e-12)


# --------------------------------------------------------------- thresholds

def test_aggregate_threshold_examples():
    assert aggregate_threshold(1.0, [], 2.0, 0.01) == pytest.approx(1.02 / 1.01, rel=1e-15)
    assert aggregate_threshold(1.0, [], 2.0, 0.01) == pytest.approx(1.009901, abs=1e-6)
    for a in (0.0, 0.1, 3.7, 1e9):
        assert aggregate_threshold(a, [], a, 0.01) == a
        assert aggregate_threshold(a, [a], a, 0.01) == a
        assert aggregate_threshold(a, [a, a, a], a, 0.5) == a


def test_aggregate_threshold_matches_formula():
    rng = np.random.default_rng(1)
    for _ in range(200):
        k = rng.integers(0, 6)
        nb = rng.random(k) * 5
        a, b, g = rng.random() * 5, rng.random() * 5, rng.random()
        expect = (nb.sum() + a + g * b) / (k + 1 + g)
        assert aggregate_threshold(a, list(nb), b, g) == pytest.approx(expect, rel=1e-12)


def test_aggregate_threshold_is_convex_combination():
    rng = np.random.default_rng(2)
    for _ in range(10_000):
        k = int(rng.integers(0, 9))
        scale = 10.0 ** rng.integers(-6, 7)
        nb = list(rng.random(k) * scale)
        a, b, g = rng.random() * scale, rng.random() * scale, float(rng.random() * 2)
        out = aggregate_threshold(a, nb, b, g)
        vals = nb + [a, b]
        assert min(vals) <= out <= max(vals)


def test_density_examples():
    assert density(np.ones(784)) == 1.0
    assert density(np.zeros(784)) == 0.0
    assert density([1, 0] * 392) == 0.5
    with pytest.raises(ValueError):
        density([])


class Constant:
    """Stand-in model whose reconstruction is a fixed vector."""

    def __init__(self, out):
        self.out = np.asarray(out, dtype=float)

    def forward(self, x):
        return np.broadcast_to(self.out, np.shape(x))


def test_anomaly_score_examples():
    x = np.linspace(0.1, 0.9, 16)
    perfect = Autoencoder([16, 4, 16])
    perfect.forward = lambda v: np.asarray(v, dtype=float)
    assert anomaly_score(x, perfect) == 0.0
    assert anomaly_score(np.ones(16), Constant(np.zeros(16))) == 1.0
    # all-black input: MSE against a 0.5 reconstruction is 0.25, density clamps to 1e-6
    assert anomaly_score(np.zeros(16), Constant(np.full(16, 0.5))) == pytest.approx(0.25 / 1e-6)


def test_anomaly_score_hand_evaluated():
    m = Autoencoder.initialize([8, 3, 8], seed=4)
    x = np.random.default_rng(4).random(8)
    recon = m.forward(x)
    err = sum((r - v) ** 2 for r, v in zip(recon, x)) / 8
    assert anomaly_score(x, m) == pytest.approx(err / (sum(x) / 8), rel=1e-12)
    batch = np.random.default_rng(5).random((6, 8))
    np.testing.assert_allclose(anomaly_scores(m, batch), [anomaly_score(b, m) for b in batch],
                               rtol=1e-14)


def test_anomaly_score_shape_error():
    with pytest.raises(ShapeError):
        anomaly_score(np.zeros(5), Autoencoder([4, 2, 4]))


def test_local_threshold_examples():
    assert local_threshold(np.arange(1, 1001), 0.999) == 999
    shuffled = np.random.default_rng(0).permutation(np.arange(1, 1001))
    assert local_threshold(shuffled, 0.999) == 999
    assert local_threshold([3.0, 9.0, 1.0], 1.0) == 9.0
    assert local_threshold([0.42], 0.3) == 0.42
    assert local_threshold(np.arange(1, 11), 0.25) == 3  # ceil(2.5)
    with pytest.raises(ValueError):
        local_threshold([], 0.5)


def test_checkpoint_rescore_invariance(tmp_path):
    m = Autoencoder.initialize([16, 8, 16], seed=6)
    x = np.random.default_rng(6).random((20, 16))
    save_checkpoint(m, tmp_path / "m.waflae")
    other = Autoencoder([16, 8, 16])
    load_checkpoint(other, tmp_path / "m.waflae")
    np.testing.assert_allclose(anomaly_scores(other, x), anomaly_scores(m, x), rtol=1e-6)


# ------------------------------------------------------------ epoch driver

def test_matrix_iteration_oracle_three_devices():
    """Zero learning rate isolates model mixing; compare with W <- A W."""
    n, lam = 3, 0.4
    cfg = tiny_cfg(learning_rate=0.0, lam=lam, epochs=50)
    devices = init_devices(tiny_partitions(n), cfg)
    trace = static_trace("complete", n, 50)
    adj = trace.neighbor_lists(0)
    a = np.zeros((n, n))
    for i in range(n):
        deg = len(adj[i])
        a[i, i] = 1 - lam * deg / (deg + 1)
        for k in adj[i]:
            a[i, k] = lam / (deg + 1)
    w = np.stack([d.model.params.copy() for d in devices])
    for e in range(50):
        run_epoch(devices, trace, e, cfg)
        w = a @ w
        got = np.stack([d.model.params for d in devices])
        np.testing.assert_allclose(got, w, rtol=0, atol=1e-10)


def test_full_mixing_reaches_initial_mean_on_complete_graph():
    n = 4
    cfg = tiny_cfg(learning_rate=0.0, lam=1.0)
    devices = init_devices(tiny_partitions(n), cfg)
    mean = np.mean([d.model.params for d in devices], axis=0)
    run_epoch(devices, static_trace("complete", n, 1), 0, cfg)
    for d in devices:
        np.testing.assert_allclose(d.model.params, mean, atol=1e-15)


def test_threshold_consensus_complete_graph():
    n = 5
    cfg = tiny_cfg(learning_rate=0.0, gamma=0.0, epochs=6)
    parts = tiny_partitions(n, seed=9)
    devices = init_devices(parts, cfg)
    trace = static_trace("complete", n, 6)
    spreads = []
    for e in range(6):
        run_epoch(devices, trace, e, cfg)
        alphas = [d.alpha for d in devices]
        spreads.append(max(alphas) - min(alphas))
    assert spreads[1] < 1e-12
    assert all(b <= a for a, b in zip(spreads, spreads[1:]))
    betas = [d.beta for d in devices]
    assert max(betas) - min(betas) > 1e-3  # the consensus is not trivial


def test_alpha_starts_at_first_beta_without_neighbors():
    cfg = tiny_cfg(epochs=1)
    devices = init_devices(tiny_partitions(2), cfg)
    metrics = run_epoch(devices, static_trace("none", 2, 1), 0, cfg)
    for m in metrics:
        assert m.alpha == m.beta and m.neighbors == []


def test_alpha_uses_snapshot_values():
    cfg = tiny_cfg(learning_rate=0.0, gamma=0.0)
    devices = init_devices(tiny_partitions(3), cfg)
    for d, a in zip(devices, (1.0, 2.0, 4.0)):
        d.alpha = a
    trace = ContactTrace(3, 1, [{(0, 1), (1, 2)}])
    run_epoch(devices, trace, 0, cfg)
    assert [d.alpha for d in devices] == pytest.approx([1.5, 7 / 3, 3.0], rel=1e-15)


def test_device_order_does_not_matter():
    cfg = tiny_cfg(epochs=4)
    parts = tiny_partitions(4)
    trace = static_trace("ring", 4, 4)
    fwd = init_devices(parts, cfg)
    for e in range(4):
        run_epoch(fwd, trace, e, cfg)
    threaded = init_devices(parts, ProtocolConfig(**{**cfg.__dict__, "workers": 3}))
    for e in range(4):
        run_epoch(threaded, trace, e, cfg)
    for a, b in zip(fwd, threaded):
        assert np.array_equal(a.model.params, b.model.params) and a.alpha == b.alpha


def test_empty_epoch_equals_self_training():
    cfg = tiny_cfg(epochs=3, lam=0.5)
    parts = tiny_partitions(3)
    a = run_simulation(cfg, static_trace("none", 3, 3), parts)
    b = run_simulation(ProtocolConfig(**{**cfg.__dict__, "lam": 0.0}),
                       static_trace("complete", 3, 3), parts)
    for x, y in zip(a.devices, b.devices):
        assert np.array_equal(x.model.params, y.model.params)
    for x, y in zip(a.metrics, b.metrics):
        assert (x.train_loss, x.beta) == (y.train_loss, y.beta)


def test_simulation_zero_epochs():
    r = run_simulation(tiny_cfg(epochs=0), static_trace("ring", 3, 1), tiny_partitions(3))
    assert r.metrics == [] and r.evaluations == {}
    assert all(d.alpha is None for d in r.devices)
    assert r.metrics_csv() == "epoch,device,alpha,beta,train_loss\n"


def test_simulation_is_deterministic():
    cfg = tiny_cfg(epochs=4)
    parts = tiny_partitions(3)
    trace = static_trace("ring", 3, 4)
    assert run_simulation(cfg, trace, parts).metrics_csv() == \
        run_simulation(cfg, trace, parts).metrics_csv()


def test_simulation_metric_rows_and_evaluations(tmp_path):
    cfg = tiny_cfg(epochs=5)
    parts = tiny_partitions(3)
    rng = np.random.default_rng(1)
    tests = [ImageSet(rng.random((10, 2, 2)), np.arange(10) % 2),
             ImageSet(rng.random((7, 2, 2)), np.zeros(7, int), "blobs")]
    r = run_simulation(cfg, static_trace("ring", 3, 5), parts, tests, eval_interval=2,
                       checkpoint_epochs=[4], checkpoint_dir=tmp_path)
    assert sorted(r.evaluations) == [0, 2, 4]
    assert r.columns() == ["epoch", "device", "alpha", "beta", "train_loss", "tpr_blobs", "fpr"]
    lines = r.metrics_csv().splitlines()
    assert len(lines) == 1 + 5 * 3
    assert lines[4].split(",")[5] == ""  # epoch 1 is not evaluated
    assert sorted(p.name for p in tmp_path.iterdir()) == [f"dev{d}_ep4.waflae" for d in range(3)]
    for row in r.rows():
        assert math.isfinite(row["alpha"]) and row["alpha"] >= 0


def test_simulation_rejects_inconsistent_inputs():
    with pytest.raises(ConfigError):
        run_simulation(tiny_cfg(epochs=2), static_trace("ring", 4, 2), tiny_partitions(3))
    with pytest.raises(ConfigError):
        run_simulation(tiny_cfg(epochs=3), static_trace("ring", 3, 2), tiny_partitions(3))
    with pytest.raises(ConfigError):
        run_simulation(tiny_cfg(lam=1.5), static_trace("ring", 3, 5), tiny_partitions(3))


# ------------------------------------------------------ per-step thresholds

def test_step_cadence_changes_only_alpha():
    parts = tiny_partitions(3, n_train=10)
    trace = static_trace("ring", 3, 3)
    a = run_simulation(tiny_cfg(epochs=3), trace, parts)
    b = run_simulation(tiny_cfg(epochs=3, threshold_cadence="step"), trace, parts)
    for x, y in zip(a.devices, b.devices):
        assert np.array_equal(x.model.params, y.model.params)
    for x, y in zip(a.metrics, b.metrics):
        assert (x.train_loss, x.beta) == (y.train_loss, y.beta)
    assert [m.alpha for m in a.metrics] != [m.alpha for m in b.metrics]


def test_step_cadence_one_exchange_per_batch():
    # frozen models keep beta constant; alone, alpha then relaxes
    # geometrically towards it once per mini-batch
    cfg = tiny_cfg(learning_rate=0.0, gamma=0.5, threshold_cadence="step")
    devices = init_devices(tiny_partitions(1, n_train=12), cfg)  # 3 batches of 4
    devices[0].alpha = 2.0
    run_epoch(devices, static_trace("none", 1, 1), 0, cfg)
    beta = devices[0].beta
    expect = 2.0
    for _ in range(3):
        expect = (expect + 0.5 * beta) / 1.5
    assert devices[0].alpha == pytest.approx(expect, rel=1e-14)


def test_step_cadence_handles_device_without_training_data():
    parts = tiny_partitions(3)
    empty = ImageSet(np.zeros((0, 2, 2)), np.zeros(0, int))
    parts[1] = DevicePartition(1, empty, parts[1].validation)
    r = run_simulation(tiny_cfg(epochs=2, threshold_cadence="step"), static_trace("ring", 3, 2), parts)
    assert all(math.isfinite(d.alpha) for d in r.devices)
    assert math.isnan(r.metrics[1].train_loss)


def test_unknown_cadence_rejected():
    with pytest.raises(ConfigError):
        tiny_cfg(threshold_cadence="hourly").validate()
