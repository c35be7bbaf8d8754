"""Command-line entry point.

Runs are described by a flat text config (one `key = value` per line,
`#` comments) plus repeatable `--set key=value` overrides.  Every run
writes the fully resolved configuration next to its outputs so the file
alone reproduces the run bit-for-bit.

Exit codes: 0 success, 1 configuration error, 2 runtime divergence.
"""

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_io
from . import experiments as exp
from .net import DivergenceError, HyperParams, build_topology, init_params
from .plasticity import symmetry_metric
from .training import (
    RunConfig,
    run_generate,
    run_selfsupervised,
    run_supervised,
    run_test,
    run_unsupervised,
)


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_layers(text: str) -> tuple:
    try:
        return tuple(int(part) for part in str(text).split(","))
    except ValueError:
        raise ConfigError(f"not a layer list: {text!r}") from None


# key -> (parser, default)
KNOWN_KEYS = {
    "mode": (str, "supervised"),
    "layers": (_parse_layers, (784, 512, 10)),
    "seed": (int, 0),
    "total_updates": (int, 1000),
    "eps_s": (float, 0.4),
    "eps_l": (float, 0.5),
    "theta_s": (float, 0.25),
    "theta_l": (float, 0.4),
    "alpha": (float, 0.0001),
    "k": (float, 50.0),
    "m_avg": (float, 0.1),
    "inertia": (float, 0.5),
    "t_c": (float, 0.25),
    "iters_T": (int, 160),
    "iters_Tf": (int, 80),
    "batch": (int, 128),
    "smoothing_rate": (float, 0.0),
    "k_as_multiplier": (_parse_bool, False),
    "fake_targets": (_parse_bool, True),
    "momentum": (_parse_bool, True),
    "stability_threshold": (float, 0.001),
    "trace_every": (int, 1),
    "train_images": (str, ""),
    "train_labels": (str, ""),
    "test_images": (str, ""),
    "test_labels": (str, ""),
    "checkpoint_in": (str, ""),
    "checkpoint_out": (str, ""),
    "metrics_path": (str, ""),
    "mask_side": (int, 10),
    "mask_gray": (float, 0.5),
    "label": (int, 0),
    "count": (int, 1),
    "head_updates": (int, 0),
    "experiment": (str, ""),
}

# Overlay applied by --long: the full-size run the desk configs scale down.
LONG_OVERLAY = {
    "layers": (784, 512, 10),
    "batch": 128,
    "total_updates": 500000,
    "iters_T": 240,
    "iters_Tf": 80,
    "alpha": 0.0001,
}

HYPER_KEYS = {
    "eps_s": "eps_s", "eps_l": "eps_l", "theta_s": "theta_s",
    "theta_l": "theta_l", "alpha": "alpha", "k": "k", "m_avg": "m_avg",
    "t_c": "t_c", "iters_T": "iters", "iters_Tf": "free_iters",
    "inertia": "inertia", "batch": "batch",
    "smoothing_rate": "smoothing_rate", "k_as_multiplier": "k_as_multiplier",
}

EXPERIMENTS = ("stdp_curve", "rivalry", "adaptation", "state_relationship")


def parse_config_file(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def resolve_config(file_values: dict, overrides: dict, long_run: bool):
    """Merge defaults, the --long overlay, the file, and --set overrides.

    Returns (resolved, explicit) where explicit is the set of keys the
    user actually supplied.
    """
    resolved = {key: default for key, (_, default) in KNOWN_KEYS.items()}
    if long_run:
        resolved.update(LONG_OVERLAY)
    explicit = set()
    for source in (file_values, overrides):
        for key, value in source.items():
            if key not in KNOWN_KEYS:
                raise ConfigError(f"unknown configuration key {key!r}")
            parser, _ = KNOWN_KEYS[key]
            resolved[key] = parser(value) if isinstance(value, str) else value
            explicit.add(key)
    return resolved, explicit


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def write_snapshot(resolved: dict, out_dir: Path) -> Path:
    path = out_dir / "resolved.cfg"
    lines = [f"{key} = {format_value(resolved[key])}" for key in sorted(resolved)]
    path.write_text("\n".join(lines) + "\n")
    return path


def hyper_from(resolved: dict, base: HyperParams = None, explicit=None) -> HyperParams:
    """Hyperparameters from the resolved config.

    With a checkpoint-provided base, only keys the user actually wrote
    override it; otherwise every resolved value applies.
    """
    hyper = HyperParams() if base is None else HyperParams(**base.__dict__)
    for key, attr in HYPER_KEYS.items():
        if base is None or explicit is None or key in explicit:
            setattr(hyper, attr, resolved[key])
    hyper.validate()
    return hyper


def _require(resolved: dict, key: str) -> str:
    value = resolved[key]
    if not value:
        raise ConfigError(f"missing required key {key!r}")
    return value


def _load_dataset(resolved, images_key, labels_key, need_labels):
    images = _require(resolved, images_key)
    labels = resolved[labels_key] or None
    if need_labels and labels is None:
        raise ConfigError(f"missing required key {labels_key!r}")
    return data_io.load_idx(images, labels, name=Path(images).stem)


def _run_config(resolved: dict, topology, metrics_path, hyper=None) -> RunConfig:
    return RunConfig(
        mode=resolved["mode"],
        hyper=hyper if hyper is not None else hyper_from(resolved),
        topology=topology,
        total_updates=resolved["total_updates"],
        seed=resolved["seed"],
        fake_targets=resolved["fake_targets"],
        momentum=resolved["momentum"],
        stability_threshold=resolved["stability_threshold"],
        trace_every=resolved["trace_every"],
        metrics_path=metrics_path,
    )


def cmd_train(resolved: dict, explicit: set, out_dir: Path) -> int:
    mode = resolved["mode"]
    if mode not in ("unsupervised", "supervised", "selfsup"):
        raise ConfigError(f"mode {mode!r} is not trainable")
    topology = build_topology(resolved["layers"])
    metrics_path = resolved["metrics_path"] or str(out_dir / "metrics.jsonl")
    config = _run_config(resolved, topology, metrics_path)
    dataset = _load_dataset(resolved, "train_images", "train_labels",
                            need_labels=(mode != "selfsup" and topology.n_output > 0))
    if mode == "unsupervised":
        params, trace = run_unsupervised(config, dataset)
    elif mode == "supervised":
        params, trace = run_supervised(config, dataset)
    else:
        side = int(round(np.sqrt(topology.n_input)))
        if side * side != topology.n_input:
            raise ConfigError(
                f"selfsup needs a square image input layer, got {topology.n_input}")
        params, trace = run_selfsupervised(
            config, dataset,
            mask_side=resolved["mask_side"], mask_gray=resolved["mask_gray"],
            rows=side, cols=side,
            head_updates=resolved["head_updates"] or None,
        )
    ck_path = resolved["checkpoint_out"] or str(out_dir / "checkpoint.astdp")
    ck = data_io.Checkpoint(
        layer_sizes=topology.layer_sizes, params=params, hyper=config.hyper,
        update_count=trace.updates, dual=trace.final_state,
    )
    data_io.save_checkpoint(ck_path, ck)
    print(f"trained {trace.updates} updates -> {ck_path}")
    return 0


def cmd_test(resolved: dict, explicit: set, out_dir: Path) -> int:
    ck = data_io.load_checkpoint(_require(resolved, "checkpoint_in"))
    topology = build_topology(ck.layer_sizes)
    dataset = _load_dataset(resolved, "test_images", "test_labels", need_labels=True)
    resolved = dict(resolved)
    resolved["mode"] = "test"
    metrics_path = resolved["metrics_path"] or str(out_dir / "metrics.jsonl")
    hyper = hyper_from(resolved, base=ck.hyper, explicit=explicit)
    config = _run_config(resolved, topology, metrics_path, hyper=hyper)
    accuracy = run_test(config, ck.params, dataset)
    print(f"accuracy {accuracy:.4f} over {dataset.count} samples")
    return 0


def cmd_generate(resolved: dict, explicit: set, out_dir: Path) -> int:
    ck = data_io.load_checkpoint(_require(resolved, "checkpoint_in"))
    topology = build_topology(ck.layer_sizes)
    resolved = dict(resolved)
    resolved["mode"] = "generate"
    hyper = hyper_from(resolved, base=ck.hyper, explicit=explicit)
    config = _run_config(resolved, topology, None, hyper=hyper)
    label = resolved["label"]
    images = run_generate(config, ck.params, [label] * resolved["count"])
    side = int(round(np.sqrt(topology.n_input)))
    for i, image in enumerate(images):
        path = out_dir / f"gen_{label}_{i}.pgm"
        exp.emit_pgm(image, path, rows=side, cols=side)
    print(f"wrote {len(images)} images to {out_dir}")
    return 0


def cmd_experiment(resolved: dict, explicit: set, out_dir: Path) -> int:
    name = _require(resolved, "experiment")
    seed = resolved["seed"]
    if name == "stdp_curve":
        curve = exp.stdp_curve(exp.StdpSweepConfig())
        exp.emit_csv({"offset": curve.offsets, "dw": curve.dw},
                     out_dir / "stdp_curve.csv")
    elif name == "rivalry":
        trace = exp.binocular_rivalry(seed)
        exp.emit_csv(trace, out_dir / "rivalry.csv")
    elif name == "adaptation":
        trace = exp.neural_adaptation(seed)
        exp.emit_csv(trace, out_dir / "adaptation.csv")
    elif name == "state_relationship":
        tables = exp.state_relationship(seed)
        exp.emit_csv(
            {
                "train_stride": [1, 1, 3, 3],
                "test_stride": [1, 3, 1, 3],
                f"acc_{tables.full_iters}": tables.acc_full.ravel(),
                f"acc_{tables.half_iters}": tables.acc_half.ravel(),
            },
            out_dir / "state_relationship.csv",
        )
    else:
        raise ConfigError(f"unknown experiment {name!r}; choose from {EXPERIMENTS}")
    print(f"experiment {name} -> {out_dir}")
    return 0


def cmd_inspect(resolved: dict, explicit: set, out_dir: Path) -> int:
    ck = data_io.load_checkpoint(_require(resolved, "checkpoint_in"))
    w, b = ck.params.W, ck.params.b
    lines = [
        f"layers: {','.join(str(s) for s in ck.layer_sizes)}",
        f"neurons: {w.shape[0]}",
        f"updates: {ck.update_count}",
        f"weight_norm: {np.linalg.norm(w):.6g}",
        f"bias_norm: {np.linalg.norm(b):.6g}",
        f"symmetry_metric: {symmetry_metric(ck.params):.6g}",
    ]
    if ck.dual is not None:
        lines.append(f"dz_m_mean: {ck.dual.dz_m.mean():.6g}")
        lines.append(f"dz_m_max: {ck.dual.dz_m.max():.6g}")
    print("\n".join(lines))
    return 0


COMMANDS = {
    "train": cmd_train,
    "test": cmd_test,
    "generate": cmd_generate,
    "experiment": cmd_experiment,
    "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="astdp",
        description="Dual-replica STDP-style learning on continuous Hopfield networks",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat key = value configuration file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, help="override the seed")
    parser.add_argument("--long", action="store_true",
                        help="use the full-size training configuration")
    return parser


def parse_and_run(argv) -> int:
    args = build_parser().parse_args(argv)
    try:
        file_values = parse_config_file(args.config) if args.config else {}
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set needs KEY=VALUE, got {item!r}")
            key, _, value = item.partition("=")
            overrides[key.strip()] = value.strip()
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        resolved, explicit = resolve_config(file_values, overrides, args.long)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_snapshot(resolved, out_dir)
        return COMMANDS[args.command](resolved, explicit, out_dir)
    except (ConfigError, data_io.IdxError, data_io.CheckpointError,
            FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except DivergenceError as err:
        print(f"diverged: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(parse_and_run(sys.argv[1:]))


if __name__ == "__main__":
    main()
