"""``waflae`` command line: gen-trace, gen-anomaly, simulate, report.

Exit codes: 0 success, 1 internal error, 2 usage or configuration error,
3 missing input (dataset, trace, config or checkpoint file).
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path

from . import data as D
from .errors import ConfigError, FormatError
from .evaluation import compute_rates, dump_reconstructions, rate_curves, write_curves, write_report
from .experiment import (ExperimentConfig, MissingInputError, build_partitions, build_test_sets,
                         build_trace)
from .mobility import RwpConfig, generate_trace, static_trace, write_trace
from .nn import Autoencoder, load_checkpoint
from .simulation import checkpoint_name, read_metrics, run_simulation
from .wafl import DeviceState

log = logging.getLogger("waflae")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3

CONFIG_FILE = "config.txt"
METRICS_FILE = "metrics.csv"
TRACE_FILE = "trace.txt"
REPORT_FILE = "report.csv"
CURVES_FILE = "curves.csv"
CHECKPOINT_DIR = "checkpoints"

GENERATORS = ("noisy", "occluded", "blobs")


def load_config(args, default_path=None) -> ExperimentConfig:
    """Config file (or defaults), then --set overrides, then --seed/--out-dir."""
    path = args.config or default_path
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig()
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    return cfg


# ---------------------------------------------------------------- commands

def cmd_gen_trace(args) -> int:
    cfg = load_config(args)
    nodes = args.nodes if args.nodes is not None else cfg.num_devices
    if args.topology == "rwp":
        rwp = RwpConfig(field_size=cfg.rwp_field_size, radio_range=cfg.rwp_radio_range,
                        speed_min=cfg.rwp_speed_min, speed_max=cfg.rwp_speed_max,
                        pause_epochs_max=cfg.rwp_pause_max, num_nodes=nodes, seed=cfg.seed)
        trace = generate_trace(rwp, args.epochs)
    else:
        trace = static_trace(args.topology, nodes, args.epochs)
    out = Path(args.out) if args.out else Path(cfg.out_dir) / TRACE_FILE
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trace(trace, out)
    print(out)
    return EXIT_OK


def cmd_gen_anomaly(args) -> int:
    cfg = load_config(args)
    if args.generator not in GENERATORS:
        raise ConfigError(f"unknown generator {args.generator!r}; choose from {', '.join(GENERATORS)}")
    if args.generator == "blobs":
        out_set = D.make_blobs(args.count, seed=cfg.seed)
    else:
        images = args.images or cfg.test_images
        labels = args.labels or cfg.test_labels
        src = D.read_idx(cfg.resolve(images), cfg.resolve(labels))
        if args.generator == "noisy":
            out_set = D.make_noisy(src, cfg.noise_period, cfg.noise_phase)
        else:
            out_set = D.make_occluded(src, cfg.occlusion_center, cfg.occlusion_radius)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prefix = args.prefix or args.generator
    img_path = out_dir / f"{prefix}-images-idx3-ubyte"
    lab_path = out_dir / f"{prefix}-labels-idx1-ubyte"
    D.write_idx(out_set, img_path, lab_path)
    print(f"{len(out_set)} images -> {img_path}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.trace:
        cfg.trace_path = args.trace
    if args.topology:
        cfg.topology = args.topology
    if args.self_train:
        cfg.trace_path, cfg.topology = "", "none"
    if args.dirty is not None:
        cfg.dirty, cfg.dirty_count = True, args.dirty
    if args.dirty_fraction is not None:
        cfg.dirty, cfg.dirty_fraction = True, args.dirty_fraction
    if args.workers is not None:
        cfg.workers = args.workers
    cfg.validate()

    partitions = build_partitions(cfg)
    test_sets = build_test_sets(cfg)
    trace = build_trace(cfg)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(cfg.dumps())
    write_trace(trace, out / TRACE_FILE)
    ckpt = cfg.checkpoint_epochs or ((cfg.epochs - 1,) if cfg.epochs else ())
    result = run_simulation(cfg.protocol(), trace, partitions, test_sets,
                            eval_interval=cfg.eval_interval, checkpoint_epochs=ckpt,
                            checkpoint_dir=out / CHECKPOINT_DIR)
    (out / METRICS_FILE).write_text(result.metrics_csv())
    if result.evaluations:
        write_curves(rate_curves(result.rows()), out / CURVES_FILE)
    print(out / METRICS_FILE)
    return EXIT_OK


def _latest_checkpoint_epoch(ckpt_dir: Path) -> int:
    epochs = {int(m.group(1)) for p in ckpt_dir.glob("dev*_ep*.waflae")
              if (m := re.search(r"_ep(\d+)\.waflae$", p.name))}
    if not epochs:
        raise MissingInputError(f"no checkpoints in {ckpt_dir}")
    return max(epochs)


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir or (args.out_dir or ExperimentConfig().out_dir))
    cfg = load_config(args, default_path=run_dir / CONFIG_FILE)
    ckpt_dir = run_dir / CHECKPOINT_DIR
    epoch = args.epoch if args.epoch is not None else _latest_checkpoint_epoch(ckpt_dir)

    metrics_path = run_dir / METRICS_FILE
    if not metrics_path.exists():
        raise MissingInputError(f"metrics file not found: {metrics_path}")
    rows = read_metrics(metrics_path)
    alphas = {int(r["device"]): float(r["alpha"]) for r in rows if int(r["epoch"]) == epoch}

    devices = []
    for d in range(cfg.num_devices):
        path = ckpt_dir / checkpoint_name(d, epoch)
        if not path.exists():
            raise MissingInputError(f"missing checkpoint {path}")
        if d not in alphas:
            raise MissingInputError(f"no alpha for device {d} at epoch {epoch} in {metrics_path}")
        model = Autoencoder(cfg.layer_sizes)
        load_checkpoint(model, path)
        devices.append(DeviceState(d, model, None, None, alpha=alphas[d]))

    test_sets = build_test_sets(cfg)
    report = compute_rates(devices, test_sets)
    write_report(report, run_dir / REPORT_FILE)
    if any(r.get("fpr") for r in rows):
        write_curves(rate_curves(rows), run_dir / CURVES_FILE)
    if args.dump > 0:
        for dev in devices:
            for ts in test_sets:
                dump_reconstructions(dev.model, ts, run_dir / "recon", dev.device_id, limit=args.dump)

    cats = [c for c in report.categories if "-" not in c]
    print(f"epoch {epoch}: " + "  ".join(
        f"{c}({report.kinds[c]})={100 * report.average(c):.2f}%" for c in cats))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="waflae", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", parents=[common], help="write a contact trace")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--nodes", type=int)
    p.add_argument("--topology", default="rwp", choices=("rwp", "complete", "ring", "star", "none"))
    p.add_argument("--out", help="trace path (default <out-dir>/trace.txt)")
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("gen-anomaly", parents=[common], help="write an anomaly test set as IDX")
    p.add_argument("generator", help="noisy, occluded or blobs")
    p.add_argument("--images", help="source IDX images (default: config test_images)")
    p.add_argument("--labels", help="source IDX labels (default: config test_labels)")
    p.add_argument("--count", type=int, default=1000, help="number of blob images")
    p.add_argument("--prefix", help="output file prefix (default: generator name)")
    p.set_defaults(func=cmd_gen_anomaly)

    p = sub.add_parser("simulate", parents=[common], help="run the device simulation")
    p.add_argument("--epochs", type=int)
    p.add_argument("--trace", help="replay this trace file")
    p.add_argument("--topology", choices=("rwp", "complete", "ring", "star", "none"))
    p.add_argument("--self-train", action="store_true", help="no device-to-device exchange")
    p.add_argument("--dirty", type=int, nargs="?", const=50, metavar="COUNT",
                   help="swap COUNT local samples per device for anomalies (default 50)")
    p.add_argument("--dirty-fraction", type=float,
                   help="swap this fraction of each device's samples instead")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", parents=[common], help="TPR/FPR report from checkpoints")
    p.add_argument("--run-dir", help="simulate output directory (default <out-dir>)")
    p.add_argument("--epoch", type=int, help="checkpoint epoch (default: latest)")
    p.add_argument("--dump", type=int, default=0, metavar="N",
                   help="write PGM input/reconstruction pairs for N samples per category")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MissingInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
