"""Command-line entry point: ``twostage <subcommand> ...``.

Every subcommand takes the experiment configuration from ``--preset``,
``--config FILE`` and repeated ``--set key=value`` overrides (applied in that
order).  Failures print one line ``error: <category>: <message>`` on stderr
and exit with the category's code (2 config, 3 data, 4 model, 5 divergence).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import artifacts
from .config import ExperimentConfig, apply_overrides, iter_keys
from .data import (build_one_class_protocol, load_class_folder_dataset, load_digits_dataset,
                   load_folder_dataset, synth_defect_dataset, write_folder_dataset)
from .errors import AnomalyError, ConfigError, ModelNotReadyError
from .training import (ABLATION_ROWS, SINGLE_DISABLED_ROWS, ImpressionDataset, detect,
                       evaluate, generate_impression_set, load_expert_checkpoint,
                       load_ie_checkpoint, output_lock, reconstruct_all, run_ablation,
                       score_batch, to_numpy, to_tensor, train_expert_net, train_ie_net)

PRESETS = {"default": ExperimentConfig, "small": ExperimentConfig.small,
           "desk": ExperimentConfig.desk}


def config_help() -> str:
    lines = ["configuration keys (override with --set key=value):"]
    for key, value, type_name in iter_keys():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif value == "":
            value = '""'
        lines.append(f"  {key:<38} {type_name:<18} default: {value}")
    return "\n".join(lines)


def _common(p: argparse.ArgumentParser, data: bool = False, out: bool = True):
    p.add_argument("--preset", choices=sorted(PRESETS), default="default",
                   help="base configuration (default: %(default)s)")
    p.add_argument("--config", type=Path, help="YAML configuration file")
    p.add_argument("--set", "-s", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override one configuration key (repeatable)")
    if out:
        p.add_argument("--out", "-o", type=Path, required=True, help="output directory")
    if data:
        p.add_argument("--data", type=Path, required=True,
                       help="dataset root: category folder (train/good, test/<label>, "
                            "ground_truth/<label>) or, with --normal-class, a class folder "
                            "(train/<class>, test/<class>)")
        p.add_argument("--normal-class", help="one-class protocol: the class treated as normal")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twostage", description="Two-stage unsupervised anomaly detection and segmentation.",
        epilog=config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--quiet", "-q", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, **kw):
        return sub.add_parser(name, help=help_text, description=help_text, epilog=config_help(),
                              formatter_class=argparse.RawDescriptionHelpFormatter, **kw)

    p = add("prepare", "materialize a dataset in folder layout and write its manifest")
    _common(p)
    p.add_argument("--kind", choices=["synthetic", "digits", "folder"], default="synthetic")
    p.add_argument("--n-clean", type=int, default=200, help="synthetic: clean training images")
    p.add_argument("--n-defect", type=int, default=50, help="synthetic: defect test images")
    p.add_argument("--n-test-clean", type=int, default=0, help="synthetic: clean test images")
    p.add_argument("--data-seed", type=int, default=7, help="synthetic: generator seed")
    p.add_argument("--source", type=Path, help="folder: existing category root to index")

    p = add("train-ie", "train the impression extractor")
    _common(p, data=True)

    p = add("impress", "generate the impression set from an IE-Net checkpoint")
    _common(p, data=True)
    p.add_argument("--ie", type=Path, required=True, help="IE-Net checkpoint")
    p.add_argument("--force", action="store_true", help="regenerate even if stale")

    p = add("train-expert", "train the expert network on an impression set")
    _common(p)
    p.add_argument("--impressions", type=Path, required=True,
                   help="directory holding impressions/manifest.json")
    p.add_argument("--ie", type=Path, help="IE-Net checkpoint to verify the set against")

    p = add("evaluate", "score a test split and write maps, masks and report.json")
    _common(p, data=True)
    p.add_argument("--ie", type=Path, required=True)
    p.add_argument("--expert", type=Path, help="required unless ablation.use_expert_net=false")
    p.add_argument("--format", choices=["table", "json", "csv"], default="table")

    p = add("detect", "run both stages on one image and write the five panels plus raw map")
    _common(p)
    p.add_argument("image", type=Path)
    p.add_argument("--ie", type=Path, required=True)
    p.add_argument("--expert", type=Path, required=True)

    p = add("visualize", "write comparison strips (x, m, x_hat, m_hat, heatmap, mask)")
    _common(p, data=True)
    p.add_argument("--ie", type=Path, required=True)
    p.add_argument("--expert", type=Path, required=True)
    p.add_argument("--limit", type=int, default=8, help="number of test images")

    p = add("ablate", "train and evaluate the toggle rows, one comparative report")
    _common(p, data=True)
    p.add_argument("--rows", choices=["table", "single"], default="table",
                   help="table: the seven cumulative rows; single: full model and each "
                        "component disabled alone")
    return parser


# ----------------------------------------------------------------------

def _config(args) -> ExperimentConfig:
    cfg = PRESETS[args.preset]()
    if args.config is not None:
        loaded = ExperimentConfig.load(args.config)
        cfg = loaded if args.preset == "default" else apply_overrides(cfg, _diff(loaded))
    return apply_overrides(cfg, args.overrides) if args.overrides else cfg


def _diff(cfg: ExperimentConfig) -> dict:
    base = {k: v for k, v, _ in iter_keys(ExperimentConfig())}
    return {k: v for k, v, _ in iter_keys(cfg) if base[k] != v}


def _splits(args, cfg):
    if args.normal_class is not None:
        data = load_class_folder_dataset(args.data, cfg.image_size, cfg.channels)
        return build_one_class_protocol(data, args.normal_class)
    return (load_folder_dataset(args.data, "train", cfg.image_size, cfg.channels),
            load_folder_dataset(args.data, "test", cfg.image_size, cfg.channels))


def _write_config(out: Path, cfg: ExperimentConfig):
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")


def cmd_prepare(args, cfg):
    out = args.out
    if args.kind == "folder":
        if args.source is None:
            raise ConfigError("--kind folder needs --source")
        source = args.source
    elif args.kind == "synthetic":
        source = out
        write_folder_dataset(synth_defect_dataset(
            args.n_clean, args.n_defect, cfg.image_size, args.data_seed,
            n_test_clean=args.n_test_clean, channels=cfg.channels), out)
    else:
        write_folder_dataset(load_digits_dataset(cfg.image_size, cfg.channels), out)
        load_class_folder_dataset(out, cfg.image_size, cfg.channels).write_manifest(
            out / "index.txt")
        print(out)
        return 0
    out.mkdir(parents=True, exist_ok=True)
    for split in ("train", "test"):
        load_folder_dataset(source, split, cfg.image_size,
                            cfg.channels).write_manifest(out / f"{split}.txt")
    print(out)
    return 0


def cmd_train_ie(args, cfg):
    train, _ = _splits(args, cfg)
    with output_lock(args.out):
        _write_config(args.out, cfg)
        res = train_ie_net(cfg, train, args.out)
    print(res.checkpoint)
    return 0


def cmd_impress(args, cfg):
    train, _ = _splits(args, cfg)
    load_ie_checkpoint(args.ie, cfg)
    with output_lock(args.out):
        imps = generate_impression_set(args.ie, train, args.out, force=args.force)
    print(f"{len(imps.pairs)} impressions -> {args.out / 'impressions'}")
    return 0


def cmd_train_expert(args, cfg):
    imps = ImpressionDataset.open(args.impressions)
    with output_lock(args.out):
        _write_config(args.out, cfg)
        res = train_expert_net(cfg, imps, args.out, ie_checkpoint=args.ie)
    print(res.checkpoint)
    return 0


def cmd_evaluate(args, cfg):
    _, test = _splits(args, cfg)
    if cfg.ablation.use_expert_net and args.expert is None:
        raise ModelNotReadyError("--expert is required unless ablation.use_expert_net=false")
    expert = args.expert if cfg.ablation.use_expert_net else None
    with output_lock(args.out):
        report = evaluate(args.ie, expert, test, cfg, args.out)
    print({"table": report.to_table, "json": report.to_json, "csv": report.to_csv}[args.format]())
    return 0


def cmd_detect(args, cfg):
    res = detect(args.ie, args.expert, args.image, cfg, args.out)
    print(json.dumps({"score": res["score"],
                      "artifacts": {k: str(v) for k, v in res["paths"].items()}}, indent=2))
    return 0


def cmd_visualize(args, cfg):
    from .perceptual import AnomalyMap, build_backbone, segment

    _, test = _splits(args, cfg)
    ie = load_ie_checkpoint(args.ie, cfg)
    expert = load_expert_checkpoint(args.expert, cfg)
    backbone = build_backbone(cfg.pm) if cfg.pm.mode == "perceptual" else None
    items = test.items[:max(args.limit, 0)]
    if not items:
        raise ModelNotReadyError("nothing to visualize")
    import torch
    gen = torch.Generator().manual_seed(cfg.seed + 4)
    x = to_tensor(np.stack([test.load_image(it) for it in items]))
    recon = reconstruct_all(ie, expert, x, cfg, gen)
    raw = score_batch(recon, cfg, backbone).numpy()
    rows = []
    for i, it in enumerate(items):
        amap = AnomalyMap.from_raw(raw[i], cfg.pm.normalization, cfg.pm.percentile)
        mask = segment(amap, cfg.pm.alpha).y * 255
        panels = [artifacts.to_uint8(to_numpy(recon[k][i:i + 1])[0])
                  for k in ("x", "m", "x_hat", "m_hat")]
        panels.append(artifacts.render_heatmap(amap.normalized))
        panels.append(mask.astype(np.uint8))
        if it.has_mask:
            panels.append((test.load_mask(it) * 255).astype(np.uint8))
        rows.append([p if p.ndim == 3 and p.shape[2] == 3 else
                     np.repeat(p.reshape(p.shape[0], p.shape[1], 1), 3, axis=2) for p in panels])
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "comparison.png"
    from PIL import Image
    Image.fromarray(artifacts.grid(rows)).save(path)
    print(path)
    return 0


def cmd_ablate(args, cfg):
    train, test = _splits(args, cfg)
    rows = ABLATION_ROWS if args.rows == "table" else SINGLE_DISABLED_ROWS
    with output_lock(args.out):
        _write_config(args.out, cfg)
        outcome = run_ablation(cfg, train, test, rows, args.out)
    print(outcome.to_table())
    return 0


COMMANDS = {"prepare": cmd_prepare, "train-ie": cmd_train_ie, "impress": cmd_impress,
            "train-expert": cmd_train_expert, "evaluate": cmd_evaluate, "detect": cmd_detect,
            "visualize": cmd_visualize, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except AnomalyError as exc:
        print(f"error: {exc.category}: {_one_line(exc)}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to exit code 1
        print(f"error: internal: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1


def _one_line(exc) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
