"""Command-line entry point: generate, train, explain, eval.

Every command resolves a JSON run config (defaults < --config file < flags),
writes the resolved copy to ``<out>/run_config.json`` and exits nonzero with a
one-line message on any error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from .arch import KINDS, build_model, load_checkpoint, predict_proba_batch, save_checkpoint
from .backbone import BackboneConfig
from .core import Dataset, DatasetError, MultiViewSchema, default_schema, load_dataset, split_dataset, subset
from .explain import METHODS, ExplainError, ExplainParams, build_explainer, explain_view, save_overlay
from .metrics import dilate, evaluate_predictions, pointing_game, positive_class_index, topq_iou
from .synth import SyntheticSpec, generate, load_masks, write_synthetic
from .train import TrainConfig, TrainingError, train_model, write_curves_plot

log = logging.getLogger("mvexplain")

DEFAULTS = {
    "data": {"path": None, "schema": None, "synthetic": {}, "train_fraction": 0.7},
    "model": {"kind": "SSG", "pool_mode": "max", "head_depth": 1, "seed": 0, "backbone": {}},
    "train": {},
    "explain": {"method": "lime", "samples": [], "view": "all", "overlay_q": 0.2, "head_epochs": None,
                "params": {}},
    "eval": {"localization_method": "lime", "max_localization": 20, "tolerance_px": 3, "iou_q": 0.2},
    "output_dir": None,
}


class CliError(Exception):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        p = Path(args.config)
        if not p.exists():
            raise CliError(f"config file not found: {p}")
        try:
            cfg = _merge(cfg, json.loads(p.read_text()))
        except json.JSONDecodeError as e:
            raise CliError(f"config file {p} is not valid JSON: {e}") from e
    if args.out:
        cfg["output_dir"] = args.out
    if cfg["output_dir"] is None:
        raise CliError("no output directory: pass --out or set output_dir in the config")
    if args.seed is not None:
        cfg["data"]["synthetic"]["seed"] = args.seed
        cfg["model"]["seed"] = args.seed
        cfg["train"]["seed"] = args.seed
        cfg["explain"]["params"]["seed"] = args.seed
    if getattr(args, "data", None):
        cfg["data"]["path"] = args.data
    if getattr(args, "arch", None):
        cfg["model"]["kind"] = args.arch.upper()
    if getattr(args, "epochs", None) is not None:
        cfg["train"]["epochs"] = args.epochs
    if getattr(args, "ckpt", None):
        cfg["ckpt"] = args.ckpt
    if getattr(args, "sample", None):
        cfg["explain"]["samples"] = list(args.sample)
    if getattr(args, "view", None) is not None:
        cfg["explain"]["view"] = args.view
    if getattr(args, "method", None):
        cfg["explain"]["method"] = args.method
        cfg["eval"]["localization_method"] = args.method
    if getattr(args, "n_segments", None) is not None:
        cfg["explain"]["params"]["n_segments"] = args.n_segments
    return cfg


def _prepare_out(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "run_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    except OSError as e:
        raise CliError(f"cannot write to output directory {out}: {e}") from e
    return out


def _schema_for(data_dir: Path, cfg: dict) -> MultiViewSchema:
    if cfg["data"].get("schema"):
        return MultiViewSchema.from_dict(cfg["data"]["schema"])
    if (data_dir / "schema.json").exists():
        return MultiViewSchema.from_dict(json.loads((data_dir / "schema.json").read_text()))
    if (data_dir / "synthetic_spec.json").exists():
        return MultiViewSchema.from_dict(json.loads((data_dir / "synthetic_spec.json").read_text())["schema"])
    return default_schema()


def _load_data(cfg: dict) -> Dataset:
    path = cfg["data"].get("path")
    if not path and cfg.get("ckpt"):
        # fall back to the dataset the checkpoint was trained on
        prev = Path(cfg["ckpt"]).parent / "run_config.json"
        if prev.exists():
            path = json.loads(prev.read_text())["data"].get("path")
            cfg["data"]["path"] = path
    if not path:
        raise CliError("no dataset: pass --data or set data.path in the config")
    d = Path(path)
    if not d.is_dir():
        raise CliError(f"dataset directory not found: {d}")
    return load_dataset(d, _schema_for(d, cfg))


def _split(ds: Dataset, cfg: dict, split_file: Path | None = None) -> tuple[Dataset, Dataset]:
    """Reuse a stored split when one exists, so explain/eval see the training partition."""
    if split_file is not None and split_file.exists():
        ids = json.loads(split_file.read_text())
        missing = set(ids["train"]) - set(ds.sample_ids)
        if missing:
            raise CliError(f"dataset lacks {len(missing)} training sample(s) recorded in {split_file}")
        return subset(ds, ids["train"], "train"), subset(ds, ids["test"], "test")
    return split_dataset(ds, cfg["data"]["train_fraction"], cfg["train"].get("seed", 0))


def _train_config(cfg: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(cfg["train"]) - known
    if unknown:
        raise CliError(f"unknown train option(s): {sorted(unknown)}")
    return TrainConfig(**cfg["train"])


def _load_ckpt(cfg: dict):
    ckpt = cfg.get("ckpt")
    if not ckpt:
        raise CliError("no checkpoint: pass --ckpt")
    return load_checkpoint(ckpt), Path(ckpt)


# ----------------------------------------------------------------- commands

def cmd_generate(cfg: dict) -> int:
    spec = SyntheticSpec.from_dict(cfg["data"]["synthetic"])
    cfg["data"]["synthetic"] = spec.to_dict()
    out = _prepare_out(cfg)
    ds, masks = generate(spec)
    write_synthetic(ds, masks, out, spec)
    (out / "schema.json").write_text(json.dumps(spec.schema.to_dict(), indent=2, sort_keys=True))
    log.info("wrote %d samples to %s", len(ds), out)
    return 0


def cmd_train(cfg: dict) -> int:
    kind = cfg["model"]["kind"]
    if kind not in KINDS:
        raise CliError(f"unknown architecture {kind!r}; expected one of {[k.lower() for k in KINDS]}")
    tcfg = _train_config(cfg)
    cfg["train"] = tcfg.to_dict()
    bcfg = BackboneConfig(**cfg["model"]["backbone"])
    cfg["model"]["backbone"] = bcfg.to_dict()
    out = _prepare_out(cfg)
    ds = _load_data(cfg)
    train_ds, test_ds = _split(ds, cfg)
    m = cfg["model"]
    model = build_model(kind, ds.schema, bcfg, m["pool_mode"], m["seed"], m["head_depth"])
    report = train_model(model, train_ds, test_ds, tcfg)
    ckpt = out / "checkpoint"
    save_checkpoint(model, ckpt)
    (ckpt / "split.json").write_text(json.dumps({"train": train_ds.sample_ids, "test": test_ds.sample_ids}, indent=2))
    report.write(out, "train")
    write_curves_plot(report, out / "train_curves.png", title=kind)
    log.info("%s: final test acc %.3f auc %.3f", kind, report.final_test_acc, report.final_test_auc)
    return 0


def _explainer(model, ckpt: Path, cfg: dict):
    ds = _load_data(cfg)
    train_ds, test_ds = _split(ds, cfg, ckpt / "split.json")
    tcfg = _train_config(cfg)
    if cfg["explain"].get("head_epochs") is not None:
        tcfg = TrainConfig(**{**tcfg.to_dict(), "epochs": cfg["explain"]["head_epochs"]})
    return ds, test_ds, build_explainer(model, train_ds, tcfg)


def _params(cfg: dict) -> ExplainParams:
    known = {f.name for f in fields(ExplainParams)}
    unknown = set(cfg["explain"]["params"]) - known
    if unknown:
        raise CliError(f"unknown explain option(s): {sorted(unknown)}")
    return ExplainParams(**cfg["explain"]["params"])


def cmd_explain(cfg: dict) -> int:
    method = cfg["explain"]["method"]
    if method not in METHODS:
        raise CliError(f"unknown method {method!r}; expected one of {list(METHODS)}")
    params = _params(cfg)
    model, ckpt = _load_ckpt(cfg)
    out = _prepare_out(cfg)
    ds, test_ds, bundle = _explainer(model, ckpt, cfg)
    view = cfg["explain"]["view"]
    views = list(range(ds.schema.num_views)) if str(view) == "all" else [int(view)]
    for v in views:
        if not 0 <= v < ds.schema.num_views:
            raise CliError(f"view {v} out of range for {ds.schema.num_views} views")
    ids = cfg["explain"]["samples"] or test_ds.sample_ids[:1]
    for sid in ids:
        try:
            sample = ds.get(sid)
        except KeyError:
            raise CliError(f"sample {sid!r} not found in {cfg['data']['path']}") from None
        d = out / sid
        d.mkdir(parents=True, exist_ok=True)
        for v in views:
            amap = explain_view(bundle, sample, v, method, None, params)
            amap.save(d / f"view_{v}_{method}")
            save_overlay(d / f"view_{v}_{method}_overlay.png", sample.views[v], amap.per_pixel,
                         cfg["explain"]["overlay_q"])
    log.info("explained %d sample(s) x %d view(s) into %s", len(ids), len(views), out)
    return 0


def cmd_eval(cfg: dict) -> int:
    model, ckpt = _load_ckpt(cfg)
    out = _prepare_out(cfg)
    ds = _load_data(cfg)
    _, test_ds = _split(ds, cfg, ckpt / "split.json")
    probs = predict_proba_batch(model, test_ds.view_array())
    report = evaluate_predictions(probs, test_ds.labels, ds.schema.class_names)
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label", *[f"p_{c}" for c in ds.schema.class_names]])
        for sid, y, p in zip(test_ds.sample_ids, test_ds.labels, probs):
            w.writerow([sid, int(y), *[repr(float(x)) for x in p]])
    data_dir = Path(cfg["data"]["path"])
    if (data_dir / "masks").is_dir():
        report.explanation = _localization(model, ckpt, cfg, test_ds, load_masks(data_dir, ds))
    (out / "eval_report.json").write_text(report.to_json())
    log.info("accuracy %.3f auc %.3f", report.accuracy, report.auc)
    return 0


def _localization(model, ckpt, cfg, test_ds, masks) -> dict:
    ev = cfg["eval"]
    method = ev["localization_method"]
    params = _params(cfg)
    _, _, bundle = _explainer(model, ckpt, cfg)
    pos = positive_class_index(test_ds.schema.class_names)
    hits, ious, rates = [], [], []
    for s in test_ds:
        if len(hits) >= ev["max_localization"]:
            break
        if s.label != pos:
            continue
        for v in range(test_ds.schema.num_views):
            m = masks.get((s.sample_id, v))
            if m is None or not m.any():
                continue
            amap = explain_view(bundle, s, v, method, pos, params)
            hits.append(pointing_game(amap, m, ev["tolerance_px"]))
            ious.append(topq_iou(amap, m, ev["iou_q"]))
            rates.append(float(dilate(m, ev["tolerance_px"]).mean()))
            break
    if not hits:
        return {}
    return {
        "method": method,
        "n": len(hits),
        "pointing_game": float(np.mean(hits)),
        "random_baseline": float(np.mean(rates)),
        "topq_iou": float(np.mean(ious)),
    }


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "explain": cmd_explain, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvexplain", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def shared(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")

    shared(sub.add_parser("generate", help="write a synthetic dataset with defect masks"))
    t = sub.add_parser("train", help="train one multi-view model")
    shared(t)
    t.add_argument("--arch", choices=[k.lower() for k in KINDS])
    t.add_argument("--data")
    t.add_argument("--epochs", type=int)
    for name in ("explain", "eval"):
        e = sub.add_parser(name, help="per-view attributions" if name == "explain" else "metrics on the test split")
        shared(e)
        e.add_argument("--ckpt", help="checkpoint directory written by train")
        e.add_argument("--data")
        e.add_argument("--method", choices=list(METHODS))
        e.add_argument("--n-segments", type=int, dest="n_segments")
        if name == "explain":
            e.add_argument("--sample", action="append", help="sample id (repeatable)")
            e.add_argument("--view", help="view index or 'all'")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)  # keeps reruns bit-identical
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (CliError, DatasetError, ExplainError, TrainingError, ValueError, KeyError, FileNotFoundError,
            OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
