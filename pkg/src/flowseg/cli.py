"""Batch command-line surface: synth | targets | pretrain | adapt | segment |
eval | experiment | report.

Every command is deterministic given its inputs and --seed; JSON configs are
documented in docs/config.md and individual flags override config fields.
Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import labelgen, net, protocol, reporting, synthgen
from .datamodel import (Checkpoint, load_checkpoint, read_pgm, save_checkpoint,
                        write_tensors)
from .errors import ConfigError, FlowsegError
from .evaluator import evaluate_dataset, score_masks
from .losses import AdaptConfig, LossConfig
from .segmenter import HeadConfig, segment
from .synthgen import SynthConfig, gen_dataset, load_dataset, write_dataset

DEFAULT_GEOMETRY = {
    "h": 64, "w": 64, "cells_per_image": [2, 4], "radius": [2.0, 3.0],
    "skeleton_length": [8, 18], "curvature": 0.25, "branch_prob": 0.2,
    "noise_sigma": 0.03, "blur_sigma": 0.8,
}

DEFAULT_EXPERIMENT = {
    "source": dict(DEFAULT_GEOMETRY, domain="phase", seed=101),
    "target": dict(DEFAULT_GEOMETRY, domain="fluor", seed=202),
    "n_train": 200,
    "n_test": 50,
    "test_seed_offset": 5000,
    "model": {"levels": 2, "base_channels": 16},
    "train": {"lr": 0.03, "epochs": 30, "batch": 4, "wd": 1e-5, "patch": 64, "augment": True},
    "adapt": {},
    "head": {},
    "loss": {},
    "k_grid": [1, 2, 3, 5, 10],
    "seeds": [1, 2, 3],
    "ablation_k_grid": [1],
    "write_data": True,
    "write_checkpoints": True,
}


def _load_json(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON in {path}: {e}")


def _merge(defaults: dict, override: dict, path="") -> dict:
    out = dict(defaults)
    for key, val in override.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict) and isinstance(val, dict):
            out[key] = _merge(defaults[key], val, path=f"{path}{key}.")
        else:
            out[key] = val
    return out


def _build(cls, section: dict, **extra):
    try:
        return cls(**{**section, **extra})
    except TypeError as e:
        raise ConfigError(f"bad {cls.__name__} config: {e}")


def _synth_config(section: dict, n_images: int, seed=None) -> SynthConfig:
    d = dict(section)
    d["n_images"] = n_images
    if seed is not None:
        d["seed"] = seed
    return SynthConfig.from_dict(d)


# ---------------------------------------------------------------------------
# Subcommand implementations.


def cmd_synth(args) -> int:
    cfg_dict = dict(DEFAULT_GEOMETRY, domain="phase", seed=0, n_images=16)
    if args.config:
        user = _load_json(args.config)
        split = user.pop("split", "train")
        cfg_dict = _merge(cfg_dict, user)
    else:
        split = "train"
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    cfg = SynthConfig.from_dict(cfg_dict)
    ds = gen_dataset(cfg, split=split)
    write_dataset(ds, args.out, cfg)
    print(f"wrote {len(ds)} image/mask pairs to {args.out}")
    return 0


def cmd_targets(args) -> int:
    ds = load_dataset(args.data)
    tensors = {}
    for i, (_, msk) in enumerate(ds.items):
        t = labelgen.make_targets(msk)
        stem = f"img_{i:04d}"
        tensors[f"{stem}.d"] = t.d
        tensors[f"{stem}.gx"] = t.gx
        tensors[f"{stem}.gy"] = t.gy
        tensors[f"{stem}.b"] = t.b.astype(np.float32)
    out = args.out
    if os.path.isdir(out):
        out = os.path.join(out, "targets.madc")
    write_tensors(out, tensors)
    print(f"wrote target fields for {len(ds)} masks to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = {"model": dict(DEFAULT_EXPERIMENT["model"]), "train": dict(DEFAULT_EXPERIMENT["train"], seed=0), "loss": {}}
    if args.config:
        cfg = _merge(cfg, _load_json(args.config))
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    mcfg = _build(net.ModelConfig, cfg["model"])
    tcfg = _build(protocol.TrainConfig, cfg["train"])
    lcfg = _build(LossConfig, cfg["loss"])
    ds = load_dataset(args.data)
    init = net.init_params(mcfg, seed=tcfg.seed)
    ckpt, report = protocol.pretrain(init, ds, tcfg, lcfg=lcfg)
    save_checkpoint(ckpt, args.out)
    if args.log:
        with open(args.log, "w") as f:
            f.write("epoch,mean_loss\n")
            for i, l in enumerate(report.epoch_losses):
                f.write(f"{i},{l:.6f}\n")
    print(f"pretrained {tcfg.epochs} epochs; final loss "
          f"{report.epoch_losses[-1]:.4f}" if report.epoch_losses else "pretrained 0 epochs")
    return 0


def cmd_adapt(args) -> int:
    cfg = {"adapt": {}, "loss": {}, "k": 1,
           "phase1_epochs": protocol.PHASE_EPOCHS, "phase2_epochs": protocol.PHASE_EPOCHS,
           "phase1_lr": protocol.PHASE1_LR, "phase2_lr": protocol.PHASE2_LR, "seed": 0}
    if args.config:
        cfg = _merge(cfg, _load_json(args.config))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.k is not None:
        cfg["k"] = args.k
    acfg = _build(AdaptConfig, cfg["adapt"])
    lcfg = _build(LossConfig, cfg["loss"])
    pretrained = load_checkpoint(args.checkpoint)
    source = load_dataset(args.source)
    target = load_dataset(args.target)
    src_diam = protocol.mean_diameter(source)
    ratio = src_diam / protocol.mean_diameter(target)
    target_r = protocol.rescale_dataset(target, ratio)
    shots = protocol.extract_shots(target_r, cfg["k"], cfg["seed"], src_diam)
    ckpt, report = protocol.adapt(
        pretrained, source, shots, acfg, seed=cfg["seed"], lcfg=lcfg,
        phase1_epochs=cfg["phase1_epochs"], phase2_epochs=cfg["phase2_epochs"],
        phase1_lr=cfg["phase1_lr"], phase2_lr=cfg["phase2_lr"],
    )
    save_checkpoint(ckpt, args.out)
    if args.log:
        with open(args.log, "w") as f:
            f.write("epoch,mean_loss\n")
            for i, l in enumerate(report.epoch_losses):
                f.write(f"{i},{l:.6f}\n")
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"adapted with K={cfg['k']}; {report.steps} optimizer steps, "
          f"{report.mining_failures} mining failures")
    return 0


def cmd_segment(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    mcfg = net.model_config_from_checkpoint(ckpt)
    head = HeadConfig(**_load_json(args.config)) if args.config else HeadConfig()
    os.makedirs(args.out, exist_ok=True)
    names = sorted(f for f in os.listdir(args.images) if f.startswith("img_") and f.endswith(".pgm"))
    if not names:
        raise FlowsegError(f"no img_*.pgm files in {args.images}")
    for name in names:
        img = read_pgm(os.path.join(args.images, name))
        Z, _ = net.forward(ckpt.params, img.data, mcfg, with_tape=False)
        mask = segment(Z, head)
        from .datamodel import write_pgm

        write_pgm(mask, os.path.join(args.out, name.replace("img_", "msk_", 1)))
        rgb = reporting.overlay_rgb(img, mask)
        reporting.write_ppm(rgb, os.path.join(args.out, name.replace("img_", "overlay_", 1).replace(".pgm", ".ppm")))
    print(f"segmented {len(names)} images into {args.out}")
    return 0


def cmd_eval(args) -> int:
    gt_names = sorted(f for f in os.listdir(args.gt) if f.startswith("msk_") and f.endswith(".pgm"))
    if not gt_names:
        raise FlowsegError(f"no msk_*.pgm files in {args.gt}")
    pairs = []
    for name in gt_names:
        gt = read_pgm(os.path.join(args.gt, name))
        pred = read_pgm(os.path.join(args.pred, name))
        pairs.append((gt, pred))
    report = score_masks(pairs)
    with open(args.out, "w") as f:
        f.write("\n".join(report.csv_lines()) + "\n")
    print(f"mean AP {report.mean_ap:.4f}, pooled AP {report.pooled_ap:.4f} "
          f"over {len(pairs)} images -> {args.out}")
    return 0


def cmd_experiment(args) -> int:
    cfg = DEFAULT_EXPERIMENT
    if args.config:
        cfg = _merge(cfg, _load_json(args.config))
    if args.seed is not None:
        cfg = dict(cfg, seeds=[args.seed])
    out = args.out
    os.makedirs(out, exist_ok=True)
    mcfg = _build(net.ModelConfig, cfg["model"])
    tcfg = _build(protocol.TrainConfig, cfg["train"], seed=0)
    acfg = _build(AdaptConfig, cfg["adapt"])
    head = _build(HeadConfig, cfg["head"])
    lcfg = _build(LossConfig, cfg["loss"])

    datasets = {}
    for role in ("source", "target"):
        sec = cfg[role]
        datasets[role] = {
            "train": gen_dataset(_synth_config(sec, cfg["n_train"]), split="train"),
            "test": gen_dataset(_synth_config(sec, cfg["n_test"], seed=sec["seed"] + cfg["test_seed_offset"]), split="test"),
        }
        if cfg["write_data"]:
            for split, ds in datasets[role].items():
                write_dataset(ds, os.path.join(out, "data", f"{role}_{split}"),
                              _synth_config(sec, len(ds), seed=None if split == "train" else sec["seed"] + cfg["test_seed_offset"]))

    t0 = time.perf_counter()
    rows, checkpoints = protocol.run_baselines(
        datasets["source"]["train"], datasets["target"]["train"], datasets["target"]["test"],
        k_grid=cfg["k_grid"], seeds=cfg["seeds"], mcfg=mcfg, tcfg=tcfg, acfg=acfg,
        head=head, lcfg=lcfg, ablation_k_grid=cfg["ablation_k_grid"],
        threads=args.threads, progress=lambda m: print(m, file=sys.stderr),
    )
    wall = time.perf_counter() - t0
    reporting.write_results_csv(rows, os.path.join(out, "results.csv"))
    reporting.write_timings_csv(rows, os.path.join(out, "timings.csv"))
    extra = []
    if set(cfg["ablation_k_grid"]) & set(cfg["k_grid"]) or cfg["ablation_k_grid"]:
        k0 = cfg["ablation_k_grid"][0] if cfg["ablation_k_grid"] else None
        if k0 is not None:
            identical = all(
                all(np.array_equal(checkpoints[("ADAPT_NOBOTH", k0, s)].params[n],
                                   checkpoints[("FT", k0, s)].params[n])
                    for n in checkpoints[("FT", k0, s)].params)
                for s in cfg["seeds"]
                if ("FT", k0, s) in checkpoints and ("ADAPT_NOBOTH", k0, s) in checkpoints
            )
            extra.append("")
            extra.append(f"No-both ablation bit-identical to FT at K={k0}: {identical}")
    reporting.write_summary_md(rows, os.path.join(out, "summary.md"), extra_lines=extra)
    reporting.svg_bar_chart(rows, os.path.join(out, "ap_vs_k.svg"))
    if cfg["write_checkpoints"]:
        ck_dir = os.path.join(out, "checkpoints")
        os.makedirs(ck_dir, exist_ok=True)
        for (variant, k, seed), ck in checkpoints.items():
            save_checkpoint(ck, os.path.join(ck_dir, f"{variant}_k{k}_s{seed}.madc"))
    print(f"experiment finished in {wall/60:.1f} min; wrote {out}/results.csv")
    return 0


def cmd_report(args) -> int:
    rows = reporting.read_results_csv(args.results)
    reporting.write_summary_md(rows, args.out)
    checks = reporting.trend_checks(rows)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and dispatch.


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowseg", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True, out_help="output path"):
        sp.add_argument("--config", help="JSON config file (see docs/config.md)")
        sp.add_argument("--seed", type=int, help="seed override")
        sp.add_argument("--out", required=out_required, help=out_help)
        sp.add_argument("--threads", type=int, default=1, help="worker threads for per-image stages")

    sp = sub.add_parser("synth", help="generate a synthetic PGM dataset")
    common(sp, out_help="output dataset directory")
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("targets", help="compute supervision fields for a dataset")
    sp.add_argument("--data", required=True, help="dataset directory")
    common(sp, out_help="output .madc path or directory")
    sp.set_defaults(fn=cmd_targets)

    sp = sub.add_parser("pretrain", help="train a model on a source dataset")
    sp.add_argument("--data", required=True, help="training dataset directory")
    sp.add_argument("--log", help="per-epoch loss CSV path")
    common(sp, out_help="output checkpoint path")
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("adapt", help="run K-shot adaptation of a checkpoint")
    sp.add_argument("--checkpoint", required=True, help="pretrained checkpoint")
    sp.add_argument("--source", required=True, help="source dataset directory")
    sp.add_argument("--target", required=True, help="target train dataset directory")
    sp.add_argument("--k", type=int, help="number of shots (overrides config)")
    sp.add_argument("--log", help="per-epoch loss CSV path")
    common(sp, out_help="output checkpoint path")
    sp.set_defaults(fn=cmd_adapt)

    sp = sub.add_parser("segment", help="segment a directory of images")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--images", required=True, help="directory with img_*.pgm files")
    common(sp, out_help="output directory for masks and overlays")
    sp.set_defaults(fn=cmd_segment)

    sp = sub.add_parser("eval", help="score predicted masks against ground truth")
    sp.add_argument("--gt", required=True, help="ground-truth dataset directory")
    sp.add_argument("--pred", required=True, help="prediction directory")
    common(sp, out_help="output report CSV path")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("experiment", help="full baseline/adaptation grid")
    common(sp, out_help="output directory")
    sp.set_defaults(fn=cmd_experiment)

    sp = sub.add_parser("report", help="summarize a results.csv with trend checks")
    sp.add_argument("--results", required=True, help="results.csv path")
    common(sp, out_help="output summary.md path")
    sp.set_defaults(fn=cmd_report)
    return p


def cli_dispatch(argv) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FlowsegError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
