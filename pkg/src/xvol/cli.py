"""Command-line surface: reproducible experiments driven by a merged JSON
config that is echoed to the output directory before any work.

Subcommands: phantom, train, finetune, eval, saliency, profile, ablate,
fedavg. Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as precision_config
from .analysis import TABLE_PLACEMENTS, count_flops, count_params
from .data import (
    PhantomConfig,
    load_record,
    read_manifest,
    read_volume,
    split_dataset,
    write_phantom_dataset,
)
from .errors import ConfigError, DataFormatError, NumericError, XvolError
from .federated import ClientState, harmonize_volume, run_fedavg
from .model import ArchitectureSpec, build_model, forward, load_model, save_model
from .saliency import care, export_heatmap, gradcam3d
from .tensor import Tensor
from .training import (
    TrainConfig,
    aggregate_metrics,
    evaluate,
    finetune_stage2,
    format_metrics_table,
    train_stage1,
    write_metrics,
)

DEFAULT_CONFIG = {
    "arch": {
        "variant": "H",
        "placement": None,
        "dropout_rate": 0.1,
        "input_dims": [32, 48, 28],
    },
    "train": {
        "epochs": 250,
        "batch_size": 4,
        "learning_rate": 1e-4,
        "patience": 25,
        "lam": 0.75,
        "unsup_loss": "MSE",
        "sampler": "none",
        "augment_flips": True,
        "augment_scale": True,
        "augment_intensity": True,
        "seed": 0,
        "trials": 5,
    },
    "data": {"manifest": None, "root": None, "fractions": [0.65, 0.15, 0.20]},
    "phantom": {
        "dims": [32, 48, 28],
        "n_volumes": 100,
        "balance": 0.5,
        "band_center": None,
        "band_thickness": 4,
        "delta": 0.5,
        "affected_side": "random",
        "sigma": 0.1,
        "seed": 0,
    },
    "model": None,
    "eval": {"threshold": 0.5},
    "saliency": {"method": "both", "layer": None, "volume": None,
                 "morphology": False, "overlay": False},
    "ablate": {"kind": "placement", "lambdas": [0.25, 0.5, 0.75, 0.9, 1.0]},
    "fed": {"clients": [], "rounds": 5, "local_epochs": 10, "harmonize": False,
            "target_dims": [64, 128, 64]},
    "out": "runs/out",
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def _apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def build_run_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {args.config}") from e
        except json.JSONDecodeError as e:
            raise DataFormatError(f"config file {args.config} is not valid JSON: {e}") from e
        cfg = _merge(cfg, loaded)
    for assignment in args.set or []:
        _apply_set(cfg, assignment)
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
        cfg["phantom"]["seed"] = args.seed
    if args.trials is not None:
        cfg["train"]["trials"] = args.trials
    if args.out is not None:
        cfg["out"] = args.out
    return cfg


def echo_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.echo.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True) + "\n"
    )


def _arch_spec(cfg: dict) -> ArchitectureSpec:
    a = cfg["arch"]
    placement = a["placement"]
    return ArchitectureSpec(
        variant=a["variant"],
        placement=tuple(placement) if placement is not None else None,
        dropout_rate=a["dropout_rate"],
        input_dims=tuple(a["input_dims"]),
    )


def _train_config(cfg: dict, **overrides) -> TrainConfig:
    t = {**cfg["train"], **overrides}
    return TrainConfig(**t)


def _phantom_config(cfg: dict) -> PhantomConfig:
    p = cfg["phantom"]
    return PhantomConfig(
        dims=tuple(p["dims"]), n_volumes=p["n_volumes"], balance=p["balance"],
        band_center=p["band_center"], band_thickness=p["band_thickness"],
        delta=p["delta"], affected_side=p["affected_side"], sigma=p["sigma"],
        seed=p["seed"],
    )


def _load_splits(cfg: dict):
    manifest_path = cfg["data"]["manifest"]
    if not manifest_path:
        raise ConfigError("data.manifest is required for this command")
    manifest = read_manifest(manifest_path)
    if not any(e.split for e in manifest.entries):
        manifest = split_dataset(
            manifest, tuple(cfg["data"]["fractions"]),
            np.random.default_rng(cfg["train"]["seed"]),
        )
    root = cfg["data"]["root"]
    return {
        name: [load_record(e, root) for e in manifest.subset(name).entries]
        for name in ("train", "val", "test")
    }


# ---------------------------------------------------------------------------
# commands


def cmd_phantom(cfg: dict, args) -> int:
    out_dir = Path(cfg["out"])
    echo_config(cfg, out_dir)
    manifest = write_phantom_dataset(_phantom_config(cfg), out_dir)
    labels = manifest.labels()
    print(f"wrote {len(manifest)} volumes to {out_dir} "
          f"({int(labels.sum())} positive / {int((labels == 0).sum())} negative)")
    return 0


def _run_one_trial(payload):
    cfg, trial, mode, force = payload
    spec = _arch_spec(cfg)
    seed = cfg["train"]["seed"] + trial
    tcfg = _train_config(cfg, seed=seed)
    splits = _load_splits(cfg)
    if mode == "stage2":
        if not cfg["model"]:
            raise ConfigError("model path is required for fine-tuning")
        model = load_model(cfg["model"])
        result = finetune_stage2(model, splits, tcfg, trial=trial, force=force)
    else:
        model = build_model(spec, seed=seed)
        result = train_stage1(model, splits, tcfg, trial=trial)
        if mode == "both":
            result = finetune_stage2(model, splits, tcfg, trial=trial)
    out_dir = Path(cfg["out"])
    model_path = out_dir / f"model_trial{trial}.xvm"
    save_model(result.model, model_path)
    return result.report


def _train_like(cfg: dict, args, mode: str) -> int:
    out_dir = Path(cfg["out"])
    echo_config(cfg, out_dir)
    trials = cfg["train"]["trials"]
    payloads = [(cfg, t, mode, bool(args.force)) for t in range(trials)]
    if args.parallel and trials > 1:
        with ProcessPoolExecutor() as pool:
            reports = list(pool.map(_run_one_trial, payloads))
    else:
        reports = [_run_one_trial(p) for p in payloads]
    write_metrics(reports, out_dir / "metrics.jsonl")
    table = format_metrics_table(reports)
    (out_dir / "metrics.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_train(cfg: dict, args) -> int:
    return _train_like(cfg, args, mode="stage1")


def cmd_finetune(cfg: dict, args) -> int:
    return _train_like(cfg, args, mode="stage2")


def cmd_eval(cfg: dict, args) -> int:
    out_dir = Path(cfg["out"])
    echo_config(cfg, out_dir)
    if not cfg["model"]:
        raise ConfigError("model path is required for evaluation")
    model = load_model(cfg["model"])
    splits = _load_splits(cfg)
    if not splits["test"]:
        raise ConfigError("test split is empty")
    report = evaluate(model, splits["test"], threshold=cfg["eval"]["threshold"],
                      batch_size=cfg["train"]["batch_size"], seed=cfg["train"]["seed"])
    write_metrics([report], out_dir / "metrics.jsonl")
    table = format_metrics_table([report])
    (out_dir / "metrics.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_saliency(cfg: dict, args) -> int:
    out_dir = Path(cfg["out"])
    echo_config(cfg, out_dir)
    s = cfg["saliency"]
    if not cfg["model"] or not s["volume"]:
        raise ConfigError("saliency needs both a model path and a volume path")
    model = load_model(cfg["model"])
    record = read_volume(s["volume"])
    trace = forward(model, Tensor(record.values[None]), mode="eval")
    placement = model.spec.placement
    written = []
    methods = ("care", "gradcam") if s["method"] == "both" else (s["method"],)
    for method in methods:
        if method == "care":
            layer = s["layer"] or (f"attn{max(placement)}" if placement else None)
            if layer not in trace.taps:
                raise ConfigError(
                    f"layer {layer!r} not available; taps: {sorted(trace.taps)}"
                )
            maps = care(trace.taps[layer], target_dims=record.dims, source_layer=layer)
        elif method == "gradcam":
            layer = s["layer"] or f"conv{model.spec.n_convs}"
            if layer not in trace.taps:
                raise ConfigError(
                    f"layer {layer!r} not available; taps: {sorted(trace.taps)}"
                )
            maps = gradcam3d(trace, class_c="pred", layer=layer, target_dims=record.dims)
        else:
            raise ConfigError(f"unknown saliency method {method!r}")
        written += export_heatmap(maps[0], out_dir / f"{method}.octv",
                                  volume=record if s["overlay"] else None,
                                  morphology=s["morphology"])
    for path in written:
        print(path)
    return 0


def cmd_profile(cfg: dict, args) -> int:
    out_dir = Path(cfg["out"])
    echo_config(cfg, out_dir)
    spec = _arch_spec(cfg)
    params = count_params(spec)
    flops = count_flops(spec)
    (out_dir / "complexity.csv").write_text(flops.to_csv())
    print(flops.to_table())
    print(f"\nbackbone parameters: {params.backbone_params:,}")
    print(f"total parameters:    {params.total_params:,}")
    print(f"total FLOPs:         {flops.total_flops:,} "
          f"({flops.total_flops / 1e9:.3f} GFLOPs at {flops.input_dims})")
    return 0


def cmd_ablate(cfg: dict, args) -> int:
    out_dir = Path(cfg["out"])
    echo_config(cfg, out_dir)
    kind = cfg["ablate"]["kind"]
    if kind == "placement":
        cells = [("placement", list(p), {"arch": {"placement": list(p)}})
                 for p in TABLE_PLACEMENTS]
    elif kind == "lambda":
        cells = [("lambda", lam, {"train": {"lam": lam}})
                 for lam in cfg["ablate"]["lambdas"]]
    elif kind == "unsup_loss":
        cells = [("unsup_loss", name, {"train": {"unsup_loss": name}})
                 for name in ("MSE", "SSIM", "Pearson", "GaussianPearson")]
    elif kind == "sampling":
        cells = [("sampler", name, {"train": {"sampler": name}})
                 for name in ("none", "weighted", "undersample")]
    else:
        raise ConfigError(f"unknown ablation kind {kind!r}")
    if kind in ("lambda", "unsup_loss"):
        mode = "stage2" if cfg["model"] else "both"
    else:
        mode = "stage1"
    rows = ["cell,value,auroc_mean,auroc_std,accuracy_mean,accuracy_std"]
    for name, value, override in cells:
        cell_cfg = _merge(cfg, override)
        cell_cfg["out"] = str(out_dir / f"{name}_{value}".replace(" ", ""))
        Path(cell_cfg["out"]).mkdir(parents=True, exist_ok=True)
        reports = [_run_one_trial((cell_cfg, t, mode, True))
                   for t in range(cfg["train"]["trials"])]
        agg = aggregate_metrics(reports)
        rows.append(
            f"{name},{json.dumps(value).replace(',', ';')},"
            f"{agg['auroc']['mean']:.4f},{agg['auroc']['std']:.4f},"
            f"{agg['accuracy']['mean']:.4f},{agg['accuracy']['std']:.4f}"
        )
    table = "\n".join(rows) + "\n"
    (out_dir / "ablation.csv").write_text(table)
    print(table)
    return 0


def cmd_fedavg(cfg: dict, args) -> int:
    out_dir = Path(cfg["out"])
    echo_config(cfg, out_dir)
    fed = cfg["fed"]
    if not fed["clients"]:
        raise ConfigError("fed.clients must list at least one manifest path")
    spec = _arch_spec(cfg)
    target = tuple(fed["target_dims"])
    clients = []
    for i, manifest_path in enumerate(fed["clients"]):
        client_cfg = copy.deepcopy(cfg)
        client_cfg["data"]["manifest"] = manifest_path
        splits = _load_splits(client_cfg)
        if fed["harmonize"]:
            spec = replace(spec, input_dims=target)
            splits = {
                name: [harmonize_volume(r, target=target) for r in recs]
                for name, recs in splits.items()
            }
        model = build_model(spec, seed=cfg["train"]["seed"] + i)
        clients.append(ClientState(client_id=f"client{i}", model=model, splits=splits))
    tcfg = _train_config(cfg, epochs=fed["local_epochs"])
    history = run_fedavg(clients, rounds=fed["rounds"],
                         local_epochs=fed["local_epochs"], cfg=tcfg)
    lines = ["round,client,local_loss"]
    for h in history:
        for cid, loss in h["logs"]:
            lines.append(f"{h['round']},{cid},{loss:.6f}")
    log = "\n".join(lines) + "\n"
    (out_dir / "rounds.csv").write_text(log)
    save_model(clients[0].model, out_dir / "global.xvm")
    print(log)
    return 0


# ---------------------------------------------------------------------------
# entry point

COMMANDS = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "saliency": cmd_saliency,
    "profile": cmd_profile,
    "ablate": cmd_ablate,
    "fedavg": cmd_fedavg,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xvol", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--trials", type=int)
        p.add_argument("--parallel", action="store_true")
        p.add_argument("--out", help="output directory")
        p.add_argument("--force", action="store_true",
                       help="override safety gates (e.g. fine-tuning a fresh model)")
    return parser


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
        cfg = build_run_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DataFormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3
    except XvolError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
