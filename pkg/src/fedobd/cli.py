"""Command line harness: ``fedobd run`` and ``fedobd suite``.

Config files hold flat ``key = value`` lines (``#`` starts a comment).  A
leading ``[experiment]`` header is optional.  Keys and defaults::

    mode = fedobd            # fedobd | fedavg | fedobd_sq | fedobd_no_stage2 | fedobd_no_dropout
    n_clients = 16
    subset_size =            # default ceil(n_clients / 2)
    rounds = 30
    local_epochs = 5
    stage2_epochs = 10
    dropout_rate = 0.3
    beta = 0.001
    batch_size = 64
    initial_lr = 0.1
    min_lr = 0.0
    total_epochs =           # default depends on lr_scope
    lr_scope = round         # round | global
    master_seed = 0
    sq_levels = 255
    layer_dims = 32,64,64,10 # default dims,64,64,classes
    blocks = layer1; layer2; head    # "name: layer,layer; ..." or bare layer names
    dataset = blobs          # blobs | csv
    classes = 10
    dims = 32
    per_class = 200
    spread = 1.0
    csv_path =
    label_column = label
    test_fraction = 0.2
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

from . import __version__
from .nn_model import ModelSpec
from .orchestrator import MODES, DatasetSpec, ExperimentConfig, MetricsRow, config_dict, run_experiment

SECTION = "experiment"

_INT = ("n_clients", "subset_size", "rounds", "local_epochs", "stage2_epochs", "batch_size",
        "total_epochs", "master_seed", "sq_levels", "repr_bits")
_FLOAT = ("dropout_rate", "beta", "initial_lr", "min_lr")
_STR = ("mode", "lr_scope")
_DATA_INT = ("classes", "dims", "per_class")
_DATA_FLOAT = ("spread", "test_fraction")
_DATA_STR = ("csv_path", "label_column")
KNOWN_KEYS = set(_INT + _FLOAT + _STR + _DATA_INT + _DATA_FLOAT + _DATA_STR) | {"layer_dims", "blocks", "dataset"}

METRIC_FIELDS = [f.name for f in fields(MetricsRow)]


class ConfigError(ValueError):
    pass


def _convert(key: str, raw: str, kind):
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"invalid value for {key!r}: {raw!r}") from None


def _parse_blocks(raw: str) -> tuple:
    blocks = []
    for item in filter(None, (p.strip() for p in raw.split(";"))):
        if ":" in item:
            name, layers = item.split(":", 1)
            layer_names = tuple(x.strip() for x in layers.split(",") if x.strip())
        else:
            name, layer_names = item, (item,)
        blocks.append((name.strip(), layer_names))
    return tuple(blocks)


def parse_config_text(text: str) -> ExperimentConfig:
    if not text.lstrip().startswith("["):
        text = f"[{SECTION}]\n" + text
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    if not parser.has_section(SECTION):
        raise ConfigError(f"config needs an [{SECTION}] section")
    items = {k: v.strip() for k, v in parser.items(SECTION) if v.strip() != ""}
    unknown = sorted(set(items) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")

    exp, data = {}, {}
    for key, raw in items.items():
        if key in _INT:
            exp[key] = _convert(key, raw, int)
        elif key in _FLOAT:
            exp[key] = _convert(key, raw, float)
        elif key in _STR:
            exp[key] = raw
        elif key in _DATA_INT:
            data[key] = _convert(key, raw, int)
        elif key in _DATA_FLOAT:
            data[key] = _convert(key, raw, float)
        elif key in _DATA_STR:
            data[key] = raw
    if "dataset" in items:
        data["kind"] = items["dataset"]

    try:
        dataset_spec = DatasetSpec(**data)
    except ValueError as exc:
        raise ConfigError(f"invalid dataset settings: {exc}") from None
    if "layer_dims" in items:
        layer_dims = tuple(_convert("layer_dims", x.strip(), int) for x in items["layer_dims"].split(","))
    elif dataset_spec.kind == "blobs":
        layer_dims = (dataset_spec.dims, 64, 64, dataset_spec.classes)
    else:
        raise ConfigError("missing key 'layer_dims' (required for csv datasets)")
    try:
        spec = ModelSpec(layer_dims, _parse_blocks(items.get("blocks", "")))
    except ValueError as exc:
        raise ConfigError(f"invalid value for 'layer_dims'/'blocks': {exc}") from None
    try:
        return ExperimentConfig(model_spec=spec, dataset_spec=dataset_spec, **exp)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(row).values()])
    return buf.getvalue()


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=list) + "\n"


def run_one(config: ExperimentConfig, out_dir, quiet: bool = False) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()

    def progress(row: MetricsRow):
        if not quiet:
            print(f"[{config.mode}] stage {row.stage} round {row.round:3d}  acc {row.accuracy:.4f}  "
                  f"loss {row.loss:.4f}  bytes {row.cumulative_bytes}", flush=True)

    result = run_experiment(config, on_row=progress)
    paths = {name: out / name for name in ("metrics.csv", "summary.json", "manifest.json")}
    paths["metrics.csv"].write_text(metrics_csv(result.rows), encoding="utf-8")
    summary = dict(result.summary, config=config_dict(config))
    paths["summary.json"].write_text(_json(summary), encoding="utf-8")
    manifest = {
        "config": config_dict(config),
        "started": started,
        "finished": time.time(),
        "outputs": {k: str(v) for k, v in paths.items()},
        "version": __version__,
    }
    paths["manifest.json"].write_text(_json(manifest), encoding="utf-8")
    if not quiet:
        print(f"[{config.mode}] final accuracy {summary['final_accuracy']:.4f}, "
              f"uplink {summary['uplink_mb']:.2f} MB, downlink {summary['downlink_mb']:.2f} MB, "
              f"total {summary['total_mb']:.2f} MB")
    return summary


def run(config_path, out_dir, seed: int | None = None, quiet: bool = False) -> int:
    config = parse_config(config_path)
    if seed is not None:
        config = replace(config, master_seed=seed)
    run_one(config, out_dir, quiet)
    return 0


def run_suite(config_path, out_dir, seed: int | None = None, quiet: bool = False) -> int:
    """All five modes on one shared seed, plus a comparison table."""
    base = parse_config(config_path)
    if seed is not None:
        base = replace(base, master_seed=seed)
    out = Path(out_dir)
    rows = []
    for mode in MODES:
        summary = run_one(replace(base, mode=mode), out / mode, quiet)
        rows.append(summary)
    table = io.StringIO()
    w = csv.writer(table, lineterminator="\n")
    w.writerow(["mode", "total_mb", "uplink_mb", "downlink_mb", "total_bytes", "final_accuracy"])
    for s in rows:
        w.writerow([s["mode"], f"{s['total_bytes'] / 1e6:.2f}", f"{s['uplink_bytes'] / 1e6:.2f}",
                    f"{s['downlink_bytes'] / 1e6:.2f}", s["total_bytes"], repr(s["final_accuracy"])])
    (out / "comparison.csv").write_text(table.getvalue(), encoding="utf-8")
    print(f"{'mode':<20}{'total MB':>10}{'accuracy':>10}")
    for s in rows:
        print(f"{s['mode']:<20}{s['total_bytes'] / 1e6:>10.2f}{s['final_accuracy']:>10.4f}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fedobd", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "run one experiment"), ("suite", "run all five modes and compare")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config")
        p.add_argument("--out", required=True, help="output directory (created if absent)")
        p.add_argument("--seed", type=int, default=None, help="override master_seed")
        p.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)
    fn = run if args.command == "run" else run_suite
    try:
        return fn(args.config, args.out, args.seed, args.quiet)
    except (ValueError, OSError, KeyError) as exc:
        print(f"fedobd: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
