"""Command-line pipeline: make-toy, adapt, gen-proposals, train, eval, stats.

Configuration is one YAML/JSON file whose sections mirror :data:`DEFAULTS`;
``--set section.key=value`` and the dedicated flags override it. Flags win over
the file, the file over the defaults.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from collections import Counter
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

log = logging.getLogger("ezsd")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output_dir": "runs/ezsd",
    "workers": 1,
    "log_level": "INFO",
    "dataset": {"train": None, "test": None, "split": None},
    "toy": {
        "out_dir": None, "seed": 0, "n_images": 200, "canvas_size": 128,
        "base": ["red-square", "green-ellipse", "blue-triangle"],
        "novel": ["yellow-circle", "magenta-rectangle"],
        "objects_per_image": [1, 3], "object_size": [18, 44],
    },
    "encoder": {"kind": "mock", "seed": 0, "dim": 32, "input_side": 24, "checkpoint": None,
                "miscalibrate_seed": None},
    "adapt": {"learning_rate": 1e-4, "batch_size": 4, "epochs": 12, "grad_norm_clip": 0.1,
              "enlarge_factor": 1.2, "weight_decay": 0.0, "tau": 0.01},
    "proposals": {
        "anchors": {"stride": 32, "sizes": [32, 64, 128, 256, 512], "ratios": [1.0, 2.0, 0.5]},
        "resize": {"max_long_edge": 1333, "max_short_edge": 800},
        "nms_iou": 0.5, "top_k": 1000, "base_gt_filter_iou": 0.7, "train_subset_size": 200,
        "gt_enlarge": 1.2, "dictionary_mode": "all_categories", "listed_novel": [],
        "tau": 0.01, "prompt": "a photo of a {name}",
    },
    "detector": {
        "backbone_channels": 64, "backbone_blocks": 4, "backbone_stride": 8, "pool_size": 7,
        "head_channels": 64, "head_hidden": 1024, "reg_dim": 256, "tau": 0.01,
        "rpn_sizes": [16, 32, 64], "rpn_ratios": [0.5, 1.0, 2.0], "rpn_pos_iou": 0.7,
        "rpn_neg_iou": 0.3, "rpn_batch": 256, "rpn_pos_fraction": 0.5,
        "rpn_pre_nms_train": 2000, "rpn_post_nms_train": 512, "rpn_pre_nms_test": 1000,
        "rpn_post_nms_test": 300, "rpn_nms_iou": 0.7, "fg_iou": 0.5, "bg_iou": 0.5,
        "rois_per_image": 512, "fg_fraction": 0.25, "distill": True, "distill_normalize": False,
    },
    "train": {"iterations": 90000, "batch_size": 4, "learning_rate": 0.005, "momentum": 0.9,
              "weight_decay": 1e-4, "warmup_iters": 500, "warmup_ratio": 1e-3,
              "lr_steps": [60000, 80000], "lr_gamma": 0.1, "grad_clip": None},
    "eval": {"score_threshold": 0.05, "nms_iou": 0.5, "max_dets": 100, "iou_threshold": 0.5,
             "format": "csv"},
    "stats": {"thresholds": [0.8, 0.5], "format": "csv"},
}

# keys whose default is a published hyperparameter of the method
PAPER_DEFAULTS = {
    "adapt.learning_rate", "adapt.batch_size", "adapt.epochs", "adapt.grad_norm_clip",
    "adapt.enlarge_factor", "proposals.anchors.stride", "proposals.anchors.sizes",
    "proposals.anchors.ratios", "proposals.resize.max_long_edge", "proposals.resize.max_short_edge",
    "proposals.top_k", "proposals.train_subset_size", "proposals.gt_enlarge",
    "train.batch_size", "train.learning_rate", "train.momentum", "train.weight_decay",
    "train.warmup_iters", "train.warmup_ratio",
}

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class StageError(RuntimeError):
    """A pipeline stage failed on a named artifact."""

    def __init__(self, stage: str, artifact, message: str):
        super().__init__(f"{stage}: {artifact}: {message}")
        self.stage, self.artifact = stage, artifact


# ------------------------------------------------------------------ config

def _merge(base: dict, over: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}{k}"
        if k not in out:
            raise ValueError(f"unknown config key {key!r}")
        if isinstance(out[k], dict) and isinstance(v, Mapping):
            out[k] = _merge(out[k], v, key + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set_path(cfg: dict, dotted: str, value) -> None:
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ValueError(f"unknown config key {dotted!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ValueError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def _flatten(d: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def load_config(path=None, overrides: Sequence[str] = ()) -> dict:
    """Defaults, then the file at ``path``, then ``key=value`` overrides (values parsed as YAML)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ValueError(f"cannot read config {path}: {e}") from e
        data = yaml.safe_load(text) or {}
        if not isinstance(data, Mapping):
            raise ValueError(f"config {path} must be a mapping")
        cfg = _merge(cfg, data)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        _set_path(cfg, key.strip(), yaml.safe_load(raw))
    return cfg


def config_help() -> str:
    lines = ["configuration keys and defaults (* = published value of the method):"]
    for k, v in _flatten(DEFAULTS).items():
        lines.append(f"  {'*' if k in PAPER_DEFAULTS else ' '} {k} = {json.dumps(v)}")
    lines.append(f"environment: ${'{'}EZSD_CLIP_CHECKPOINT{'}'} locates a pretrained encoder when encoder.kind=pretrained")
    return "\n".join(lines)


# --------------------------------------------------------------- builders

def _split(cfg):
    from .dataset import DatasetSplit, load_split_config

    src = cfg["dataset"]["split"]
    if src is None:
        return None
    return load_split_config(src) if not isinstance(src, DatasetSplit) else src


def _load_dataset(cfg, which: str, stage: str):
    from .dataset import load_dataset

    path = cfg["dataset"][which]
    if path is None:
        raise StageError(stage, f"dataset.{which}", "not configured")
    if not Path(path).exists():
        raise StageError(stage, path, "annotation file not found")
    split = _split(cfg)
    if split is None:
        guess = Path(path).parent / "split.json"
        if not guess.exists():
            raise StageError(stage, "dataset.split", "not configured and no split.json beside the annotations")
        split = guess
    try:
        return load_dataset(path, split)
    except Exception as e:  # noqa: BLE001 - surfaced with the artifact name
        raise StageError(stage, path, str(e)) from e


def _encoder(cfg, stage: str, allow_checkpoint: bool = True):
    """Adapted checkpoint if configured, else a freshly built encoder."""
    from .encoder import CHECKPOINT_ENV, build_encoder, load_encoder

    ecfg = dict(cfg["encoder"])
    ckpt = ecfg.get("checkpoint")
    if allow_checkpoint and ckpt:
        if not Path(ckpt).exists():
            raise StageError(stage, ckpt, "encoder checkpoint not found")
        try:
            return load_encoder(ckpt)
        except Exception as e:  # noqa: BLE001
            raise StageError(stage, ckpt, f"cannot load encoder checkpoint: {e}") from e
    if ecfg.get("kind") == "pretrained":
        locator = os.environ.get(CHECKPOINT_ENV) or ecfg.get("checkpoint")
        try:
            return build_encoder({"kind": "pretrained", "checkpoint": locator})
        except Exception as e:  # noqa: BLE001
            raise StageError(stage, locator or f"${CHECKPOINT_ENV}", f"cannot load pretrained encoder: {e}") from e
    enc = build_encoder(ecfg)
    if ecfg.get("miscalibrate_seed") is not None:
        enc = enc.miscalibrate(int(ecfg["miscalibrate_seed"]))
    return enc


def _proposal_cfg(cfg):
    from .proposals import ProposalGenConfig

    d = dict(cfg["proposals"])
    d["listed_novel"] = tuple(d.get("listed_novel") or ())
    d["anchors"] = dict(d["anchors"], sizes=tuple(d["anchors"]["sizes"]), ratios=tuple(d["anchors"]["ratios"]))
    d["seed"] = cfg["seed"]
    return ProposalGenConfig.from_dict(d)


def _out(cfg, *parts) -> Path:
    root = Path(cfg["output_dir"])
    root.mkdir(parents=True, exist_ok=True)
    return root.joinpath(*parts)


# ---------------------------------------------------------------- commands

def cmd_make_toy(cfg, args) -> int:
    from .dataset import make_toy_dataset

    t = cfg["toy"]
    out = args.out or t["out_dir"] or str(_out(cfg, "toy"))
    split = {"base": list(t["base"]), "novel": list(t["novel"])}
    try:
        root = make_toy_dataset(out, int(t["seed"]), int(t["n_images"]), int(t["canvas_size"]),
                                list(t["base"]) + list(t["novel"]), split,
                                tuple(t["objects_per_image"]), tuple(t["object_size"]))
    except Exception as e:  # noqa: BLE001
        raise StageError("make-toy", out, str(e)) from e
    anns = json.loads((root / "annotations.json").read_text())
    counts = Counter(c["name"] for a in anns["annotations"] for c in anns["categories"]
                     if c["id"] == a["category_id"])
    print(f"toy dataset {root}: {len(anns['images'])} images, {len(anns['annotations'])} instances")
    for name in split["base"] + split["novel"]:
        role = "base" if name in split["base"] else "novel"
        print(f"  {name:<20} {role:<6} {counts.get(name, 0)}")
    return EXIT_OK


def cmd_adapt(cfg, args) -> int:
    import torch

    from .adaptation import AdaptConfig, adapt_encoder, evaluate_all_settings
    from .encoder import save_encoder

    torch.set_num_threads(max(1, cfg["workers"]))
    data = _load_dataset(cfg, "train", "adapt")
    enc = _encoder(cfg, "adapt")
    acfg = AdaptConfig(**dict(cfg["adapt"], seed=cfg["seed"]))
    before = evaluate_all_settings(enc, data, enlarge_factor=acfg.enlarge_factor)
    history: list[float] = []
    adapted = adapt_encoder(enc, data, acfg, history=history)
    after = evaluate_all_settings(adapted, data, enlarge_factor=acfg.enlarge_factor)
    ckpt = _out(cfg, "encoder.ckpt")
    save_encoder(adapted, ckpt)
    before.to_csv(_out(cfg, "acc_before.csv"))
    after.to_csv(_out(cfg, "acc_after.csv"))
    for s in ("base", "novel", "general"):
        a, b = before.accuracy(s), after.accuracy(s)
        if a is not None:
            print(f"{s:<8} ACC {a:.4f} -> {b:.4f}")
    print(f"adapted encoder written to {ckpt}")
    return EXIT_OK


def cmd_gen_proposals(cfg, args) -> int:
    import torch

    from .proposals import generate_store

    torch.set_num_threads(1)
    data = _load_dataset(cfg, "train", "gen-proposals")
    enc = _encoder(cfg, "gen-proposals")
    pcfg = _proposal_cfg(cfg)
    path = Path(args.store) if args.store else _out(cfg, "store")
    t = time.time()
    store = generate_store(path, data, enc, pcfg, workers=max(1, cfg["workers"]))
    sizes = np.array([len(v) for v in store.values()])
    hist, edges = np.histogram(sizes, bins=min(10, max(1, len(np.unique(sizes)))))
    log.info("proposal counts per image: %s", ", ".join(f"[{edges[i]:.0f},{edges[i + 1]:.0f}]: {h}"
                                                          for i, h in enumerate(hist)))
    print(f"store {path}: {len(store)} images, {int(sizes.sum())} proposals "
          f"(mean {sizes.mean() if len(sizes) else 0:.1f}) in {time.time() - t:.0f}s")
    return EXIT_OK


def _read_store(path, stage):
    from .proposals import StoreError, read_store

    if not Path(path).exists():
        raise StageError(stage, path, "proposal store not found")
    try:
        return read_store(path)
    except StoreError as e:
        raise StageError(stage, path, str(e)) from e


def cmd_train(cfg, args) -> int:
    import torch

    from .detector import Detector, DetectorConfig, TrainConfig, build_samples, save_detector, train
    from .detector.train import _stage_seed

    torch.set_num_threads(max(1, cfg["workers"]))
    data = _load_dataset(cfg, "train", "train")
    dcfg = dict(cfg["detector"])
    if args.no_distill:
        dcfg["distill"] = False
    dcfg["rpn_sizes"] = tuple(dcfg["rpn_sizes"])
    dcfg["rpn_ratios"] = tuple(dcfg["rpn_ratios"])
    det_cfg = DetectorConfig(**dcfg)
    tcfg = TrainConfig.from_dict(dict(cfg["train"], seed=cfg["seed"]))
    store = None
    if det_cfg.distill:
        store, _ = _read_store(args.store or _out(cfg, "store"), "train")
    enc = _encoder(cfg, "train")
    samples = build_samples(data, store, _proposal_cfg(cfg))
    if not samples:
        raise StageError("train", cfg["dataset"]["train"], "no image has a base annotation")
    torch.manual_seed(int(np.random.default_rng(_stage_seed(cfg["seed"], "detector-init")).integers(2**31)))
    model = Detector(det_cfg, enc.encode_text(data.split.base_categories, cfg["proposals"]["prompt"]))
    csv_path = _out(cfg, "losses.csv")
    rows = train(model, samples, tcfg, loss_csv=csv_path)
    ckpt = Path(args.checkpoint) if args.checkpoint else _out(cfg, "detector.ckpt")
    save_detector(model, ckpt, {"train": tcfg.to_dict(), "base": list(data.split.base_categories)})
    print(f"trained {len(rows)} iterations on {len(samples)} images; final L={rows[-1]['L']:.4f}; "
          f"checkpoint {ckpt}, losses {csv_path}")
    return EXIT_OK


def _load_detections(path):
    from .detector import Detection

    try:
        items = json.loads(Path(path).read_text())
        return [Detection(int(d["image_id"]), tuple(map(float, d["box"])), d["category"], float(d["score"]))
                for d in items]
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise StageError("eval", path, f"unreadable detections: {e}") from e


def cmd_eval(cfg, args) -> int:
    import torch

    from .detector import detect_dataset, load_detector
    from .evalstats import emit_report, evaluate_detections

    torch.set_num_threads(max(1, cfg["workers"]))
    data = _load_dataset(cfg, "test", "eval")
    e = cfg["eval"]
    if args.detections:
        dets = _load_detections(args.detections)
    else:
        ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg["output_dir"]) / "detector.ckpt"
        if not ckpt.exists():
            raise StageError("eval", ckpt, "detector checkpoint not found")
        try:
            model, _ = load_detector(ckpt)
        except Exception as err:  # noqa: BLE001
            raise StageError("eval", ckpt, f"cannot load detector: {err}") from err
        enc = _encoder(cfg, "eval")
        split = data.split
        model.classifier.set_novel(enc.encode_text(split.novel_categories, cfg["proposals"]["prompt"])
                                   if split.novel_categories else None)
        dets = detect_dataset(model, data, list(split.all_categories), e["score_threshold"], e["nms_iou"],
                              e["max_dets"])
        _out(cfg, "detections.json").write_text(json.dumps([d.to_dict() for d in dets]) + "\n")
    result = evaluate_detections(dets, data.annotations, data.split, e["iou_threshold"])
    path = Path(args.report) if args.report else _out(cfg, f"eval.{e['format']}")
    emit_report(result, path, e["format"])
    for row in result.rows():
        print(f"{row['category']:<20} {row['role']:<9} AP{int(100 * e['iou_threshold'])} {row['AP']:.4f}")
    print(f"report {path}")
    return EXIT_OK


def cmd_stats(cfg, args) -> int:
    from .evalstats import emit_report, iogt_statistics

    data = _load_dataset(cfg, "train", "stats")
    store, _ = _read_store(args.store or _out(cfg, "store"), "stats")
    s = cfg["stats"]
    report = iogt_statistics(store, data.annotations, data.split, tuple(s["thresholds"]))
    path = Path(args.report) if args.report else _out(cfg, f"iogt.{s['format']}")
    emit_report(report, path, s["format"])
    for row in report.rows():
        print(f"{row['metric']:<24} {row['value']}")
    print(f"report {path}")
    return EXIT_OK


COMMANDS = {
    "make-toy": (cmd_make_toy, "render a synthetic shape dataset"),
    "adapt": (cmd_adapt, "finetune the encoder's normalization layers on base crops"),
    "gen-proposals": (cmd_gen_proposals, "score anchors with the encoder and write the proposal store"),
    "train": (cmd_train, "train the detector with distillation on stored proposals"),
    "eval": (cmd_eval, "AP of a detector checkpoint (or a detections file) on the test set"),
    "stats": (cmd_stats, "IoGT coverage of novel ground truth by stored proposals"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ezsd", description=__doc__.splitlines()[0],
                                epilog=config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        c = sub.add_parser(name, help=help_, description=help_, epilog=config_help(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        c.add_argument("-c", "--config", help="YAML or JSON run config")
        c.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (dotted path, YAML value)")
        c.add_argument("--seed", type=int, help="global seed")
        c.add_argument("--output-dir", help="directory for every artifact of the run")
        c.add_argument("--workers", type=int, help="cap on worker threads")
        c.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
        c.add_argument("-v", "--verbose", action="store_true")
        if name == "make-toy":
            c.add_argument("--out", help="dataset directory (default toy.out_dir or <output_dir>/toy)")
            c.add_argument("--n-images", type=int)
        if name in ("gen-proposals", "train", "stats"):
            c.add_argument("--store", help="proposal store directory (default <output_dir>/store)")
        if name == "train":
            c.add_argument("--no-distill", action="store_true", help="drop the distillation term")
            c.add_argument("--iterations", type=int)
        if name in ("train", "eval"):
            c.add_argument("--checkpoint", help="detector checkpoint path (default <output_dir>/detector.ckpt)")
        if name == "eval":
            c.add_argument("--detections", help="evaluate this detections JSON instead of running a checkpoint")
        if name in ("eval", "stats"):
            c.add_argument("--report", help="report path (default <output_dir>/eval.<fmt> or iogt.<fmt>)")
    return p


def _resolve(args) -> dict:
    overrides = list(args.set)
    for flag, key in (("seed", "seed"), ("output_dir", "output_dir"), ("workers", "workers"),
                      ("n_images", "toy.n_images"), ("iterations", "train.iterations")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides.append(f"{key}={json.dumps(v)}")
    if getattr(args, "no_distill", False):
        overrides.append("detector.distill=false")
    return load_config(args.config, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args)
    except ValueError as e:
        print(f"ezsd {args.command}: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if args.print_config:
        sys.stdout.write(yaml.safe_dump(cfg, sort_keys=False))
        return EXIT_OK
    level = logging.DEBUG if args.verbose else getattr(logging, str(cfg["log_level"]).upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    fn = COMMANDS[args.command][0]
    try:
        return fn(cfg, args)
    except StageError as e:
        print(f"ezsd {args.command}: error in stage {e}", file=sys.stderr)
        return EXIT_FAIL
    except (ValueError, OSError, FloatingPointError, KeyError) as e:
        print(f"ezsd {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
