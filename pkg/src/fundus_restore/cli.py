"""Command line entry point: ``fundus-restore <command> [options]``.

Every command writes into one output root (``--out``, else ``$FUNDUS_RESTORE_OUT``,
else ``./runs``) with the fixed layout::

    checkpoints/  reports/  restored/  logs/  manifest.json

``manifest.json`` is written before any work starts and records everything
needed to rerun the command.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .attention import flops_msa, flops_w_msa
from .checkpoint import config_hash
from .data import image_bits, load_dataset, read_image, write_fixture_tree, write_image
from .discriminator import Discriminator, receptive_field
from .errors import CheckpointError, ConfigError, DataError, FundusRestoreError, PlanCoverageError
from .evaluation import TilePlan, direct_restore, evaluate, plot_history, plot_report, tiled_restore
from .generator import PAPER_CALIBRATED, generator_macs, param_count
from .training import TrainConfig, export_generator, fit, load_generator, set_deterministic

log = logging.getLogger("fundus_restore")

ENV_OUT = "FUNDUS_RESTORE_OUT"
LAYOUT = ("checkpoints", "reports", "restored", "logs")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4
EXIT_CHECKPOINT = 5

# Reference statistics of the published model, shown next to ours by ``bench``.
PAPER_PARAMS_M = 21.11
PAPER_FLOPS_G = 11.36
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config: dict
    output_dir: str
    seed: int
    version: str
    argv: list
    started: str

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str))
        return path


# -- config handling ----------------------------------------------------------


def load_config_file(path) -> dict:
    """YAML or JSON mapping (JSON is valid YAML)."""
    if path is None:
        return {}
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML/JSON: {e}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping, got {type(data).__name__}")
    return data


def apply_overrides(config: dict, overrides) -> dict:
    """Apply ``key=value`` strings; dotted keys reach into sections, values parse as YAML."""
    config = json.loads(json.dumps(config))
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        *parents, leaf = key.split(".")
        node = config
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p!r} is not a section")
        node[leaf] = yaml.safe_load(raw)
    return config


def resolve_train_config(args) -> tuple[TrainConfig, dict]:
    """TrainConfig plus the leftover CLI-only keys (currently just ``data``)."""
    raw = apply_overrides(load_config_file(args.config), args.set)
    extras = {k: raw.pop(k) for k in ("data",) if k in raw}
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        return TrainConfig.from_dict(raw), extras
    except TypeError as e:
        raise ConfigError(str(e)) from None


def output_root(args) -> Path:
    root = Path(args.out or os.environ.get(ENV_OUT) or "runs")
    for sub in LAYOUT:
        (root / sub).mkdir(parents=True, exist_ok=True)
    return root


def start_run(args, config: dict) -> Path:
    out = output_root(args)
    RunManifest(
        command=args.command,
        config_path=str(getattr(args, "config", None)) if getattr(args, "config", None) else None,
        config=config,
        output_dir=str(out.resolve()),
        seed=args.seed if args.seed is not None else config.get("seed", 0),
        version=__version__,
        argv=list(sys.argv[1:]) if args.argv is None else list(args.argv),
        started=time.strftime("%Y-%m-%dT%H:%M:%S"),
    ).write(out)
    return out


def tile_plan(args) -> TilePlan | None:
    if args.tile is None:
        return None
    return TilePlan(args.tile, args.overlap, args.blend)


# -- commands -----------------------------------------------------------------


def cmd_make_fixtures(args) -> int:
    seed = 0 if args.seed is None else args.seed
    target = Path(args.dest) if args.dest else output_root(args) / "fixtures"
    out = start_run(args, {"n": args.n, "size": args.size, "seed": seed, "dest": str(target)})
    ds = write_fixture_tree(target, n=args.n, seed=seed, size=args.size)
    log.info("wrote %d pairs to %s (run %s)", len(ds), target, out)
    print(f"{len(ds)} pairs written to {target}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, extras = resolve_train_config(args)
    data_root = args.data or extras.get("data")
    if not data_root:
        raise ConfigError("no dataset given: pass --data or set 'data' in the config")
    out = start_run(args, {**cfg.to_dict(), "data": str(data_root)})
    ds = load_dataset(data_root).split("train")
    state = fit(ds, cfg, out, resume=args.resume)
    export_generator(state.generator, out / "checkpoints" / "generator.ckpt")
    if args.plot:
        plot_history(state.history, out / "reports" / "train_loss.png")
    last = state.history[-1] if state.history else {}
    print(f"trained {state.step} steps; final loss_g={last.get('loss_g', float('nan')):.6f}; "
          f"checkpoints in {out / 'checkpoints'}")
    return EXIT_OK


def _expected_generator(args):
    if not args.config and not args.set:
        return None
    return resolve_train_config(args)[0].generator


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise DataError(f"no images found in {path}")
        return files
    if not path.exists():
        raise DataError(f"input {path} does not exist")
    return [path]


def cmd_restore(args) -> int:
    out = start_run(args, {"checkpoint": str(args.checkpoint), "input": str(args.input),
                           "tile": args.tile, "overlap": args.overlap, "blend": args.blend})
    model = load_generator(args.checkpoint, _expected_generator(args))
    plan = tile_plan(args)
    dest = Path(args.output) if args.output else out / "restored"
    dest.mkdir(parents=True, exist_ok=True)
    files = _inputs(Path(args.input))
    for f in files:
        img = read_image(f)
        y = tiled_restore(img, model, plan) if plan else direct_restore(img, model)
        write_image(dest / f.name, np.clip(y, 0.0, 1.0), bits=image_bits(f))
    print(f"restored {len(files)} image(s) into {dest}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = start_run(args, {"checkpoint": str(args.checkpoint), "data": str(args.data),
                           "split": args.split, "against_identity": args.against_identity})
    model = load_generator(args.checkpoint, _expected_generator(args))
    ds = load_dataset(args.data).split(args.split)
    report = evaluate(ds, model, tile_plan(args), against_identity=args.against_identity,
                      metadata={"checkpoint": str(args.checkpoint), "split": args.split,
                                "config_hash": config_hash(model.cfg.to_dict())})
    jpath, cpath = report.write(out / "reports")
    if args.plot:
        plot_report(report, out / "reports" / "metrics.png")
    print(f"{len(report.rows)} images: PSNR {report.mean_psnr:.3f} dB, SSIM {report.mean_ssim:.4f}")
    if report.baseline is not None:
        b = report.to_dict()["identity_baseline"]["aggregate"]
        b_psnr = "inf" if b["psnr_infinite"] else f"{b['psnr']:.3f}"
        print(f"identity baseline: PSNR {b_psnr} dB, SSIM {b['ssim']:.4f}")
    print(f"reports: {jpath} {cpath}")
    return EXIT_OK


def bench_report(cfg: TrainConfig, sizes) -> dict:
    g, dcfg = cfg.generator, cfg.discriminator
    d_params = param_count(Discriminator(dcfg))
    g_params = param_count(g)
    rows = []
    for s in sizes:
        rows.append({"size": s, "generator_macs": generator_macs(g, s, s)})
    C, L = g.base_channels, g.window_size
    attention = []
    for s in sizes:
        wm, m = flops_w_msa(L, C, s, s), flops_msa(C, s, s)
        attention.append({"size": s, "w_msa": wm, "msa": m, "ratio": m / wm})
    return {
        "generator_params": g_params,
        "discriminator_params": d_params,
        "total_params": g_params + d_params,
        "macs": rows,
        "discriminator_receptive_field": receptive_field(dcfg),
        "attention_cost": {"channels": C, "window": L, "rows": attention},
        "paper_reported": {"params_m": PAPER_PARAMS_M, "flops_g": PAPER_FLOPS_G},
    }


def format_bench(rep: dict) -> str:
    lines = [
        f"{'':28}{'this config':>16}{'paper-reported':>18}",
        f"{'params (G + D)':28}{rep['total_params'] / 1e6:>14.2f} M{PAPER_PARAMS_M:>16.2f} M",
        f"{'  generator':28}{rep['generator_params'] / 1e6:>14.2f} M",
        f"{'  discriminator':28}{rep['discriminator_params'] / 1e6:>14.2f} M",
    ]
    for i, r in enumerate(rep["macs"]):
        ref = f"{PAPER_FLOPS_G:>16.2f} G" if i == 0 else ""
        lines.append(f"{'FLOPs (MACs) @ ' + str(r['size']) + '^2':28}{r['generator_macs'] / 1e9:>14.2f} G{ref}")
    lines.append(f"{'D receptive field':28}{rep['discriminator_receptive_field']:>13d} px")
    a = rep["attention_cost"]
    lines += ["", f"attention cost, C={a['channels']}, L={a['window']}",
              f"{'size':>8}{'W-MSA':>16}{'MSA':>20}{'MSA / W-MSA':>14}"]
    for r in a["rows"]:
        lines.append(f"{r['size']:>8}{r['w_msa']:>16,}{r['msa']:>20,}{r['ratio']:>14.1f}")
    lines.append("paper-reported values are listed for side-by-side display; the input size "
                 "behind the published FLOPs figure is not known.")
    return "\n".join(lines)


def cmd_bench(args) -> int:
    if args.preset == "paper":
        c = PAPER_CALIBRATED.base_channels
        args.set = [f"generator.base_channels={c}", f"discriminator.base_channels={c}", *(args.set or [])]
    cfg, _ = resolve_train_config(args)
    out = start_run(args, {**cfg.to_dict(), "sizes": args.sizes})
    rep = bench_report(cfg, args.sizes)
    (out / "reports" / "bench.json").write_text(json.dumps(rep, indent=2))
    print(format_bench(rep))
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _add_config_flags(p, required=False):
    p.add_argument("--config", required=required, help="YAML or JSON run config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key, e.g. --set generator.base_channels=8 (repeatable)")


def _add_tile_flags(p):
    p.add_argument("--tile", type=int, default=None, help="tile size in pixels (default: untiled)")
    p.add_argument("--overlap", type=int, default=32, help="tile overlap in pixels")
    p.add_argument("--blend", choices=("crop-center", "feathered"), default="crop-center")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fundus-restore", description=__doc__.split("\n")[0])
    parser.add_argument("--seed", type=int, default=None, help="global seed (overrides the config)")
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded deterministic kernels for bit-identical reruns")
    parser.add_argument("--out", default=None, help=f"output root (default ${ENV_OUT} or ./runs)")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-fixtures", help="write a synthetic paired dataset")
    p.add_argument("dest", nargs="?", help="dataset directory (default <out>/fixtures)")
    p.add_argument("--n", type=int, default=6, help="number of pairs")
    p.add_argument("--size", type=int, default=128, help="image side in pixels")
    p.set_defaults(func=cmd_make_fixtures)

    p = sub.add_parser("train", help="train generator and discriminator")
    _add_config_flags(p)
    p.add_argument("--data", help="dataset root with train/ and test/ (or 'data' in the config)")
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.add_argument("--plot", action="store_true", help="also write a loss-curve PNG")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("restore", help="restore an image or a directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--output", help="destination directory (default <out>/restored)")
    _add_config_flags(p)
    _add_tile_flags(p)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("evaluate", help="PSNR/SSIM report on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--against-identity", action="store_true",
                   help="also score the raw LQ input as a baseline")
    p.add_argument("--plot", action="store_true", help="also write a per-image PSNR bar chart")
    _add_config_flags(p)
    _add_tile_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="parameter, FLOP and receptive-field report")
    _add_config_flags(p)
    p.add_argument("--preset", choices=("default", "paper"), default="default",
                   help="'paper' uses the width calibrated to the published parameter count")
    p.add_argument("--sizes", type=int, nargs="+", default=[128, 256, 512])
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.deterministic:
        set_deterministic(True)
    if args.seed is not None:
        import torch

        torch.manual_seed(args.seed)
    try:
        return args.func(args)
    except (ConfigError, PlanCoverageError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FundusRestoreError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
