"""Command-line entry point: ``hybridmim <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import config as C
from .data import PhantomSpec, make_corpus, read_volume, write_corpus, write_volume
from .errors import CheckpointError, ConfigError, FormatError, HybridMIMError
from .masking import GridSpec, apply_mask, make_plan

log = logging.getLogger("hybridmim")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _out_dir(args, command: str) -> Path:
    base = args.out_dir or os.environ.get("HMIM_OUT_DIR") or os.path.join("runs", command)
    return Path(base)


def _write_manifest(path: Path, manifest: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(C.to_plain(manifest), indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


@contextlib.contextmanager
def _threads(n: Optional[int]):
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def _common(p: argparse.ArgumentParser, steps_help: str) -> None:
    p.add_argument("--config", help="YAML config file or a previous run manifest")
    p.add_argument("--seed", type=int, help="override the top-level seed")
    p.add_argument("--out-dir", help="output directory (default: $HMIM_OUT_DIR or runs/<command>)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, repeatable (e.g. optim.lr_init=3e-3)")
    p.add_argument("--steps", type=int, help=steps_help)
    p.add_argument("--device-threads", type=int, help="cap BLAS worker threads")


def _resolve(args, defaults: dict, steps_key: str) -> dict:
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.steps is not None:
        overrides.append(f"{steps_key}={args.steps}")
    return C.load_config(args.config, defaults, overrides)


# -- commands --------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    from .pretrain import checkpoint_name, run_pretrain

    cfg_dict = _resolve(args, C.PRETRAIN_DEFAULTS, "total_steps")
    cfg = C.pretrain_from_dict(cfg_dict)
    if args.resume and not Path(args.resume).is_file():
        raise UsageError(f"resume checkpoint not found: {args.resume}")
    out = _out_dir(args, "pretrain")
    out.mkdir(parents=True, exist_ok=True)
    every = cfg.checkpoint_every
    planned = set(range(every, cfg.total_steps + 1, every)) if every else set()
    planned = sorted(planned | {cfg.total_steps})
    manifest = {
        "command": "pretrain", "tool_version": __version__, "config": cfg_dict,
        "seeds": {"seed": cfg.seed, "data_seed": cfg_dict["data"]["seed"]},
        "artifacts": {"metrics_csv": str(out / "metrics.csv"),
                      "checkpoints": [str(out / checkpoint_name(s)) for s in planned]},
        "resume_from": args.resume, "started": _now(), "finished": None,
    }
    _write_manifest(out / "run_manifest.json", manifest)
    volumes = C.pretrain_volumes(cfg_dict)
    with _threads(args.device_threads):
        result = run_pretrain(cfg, volumes, out, resume_from=args.resume)
    manifest["finished"] = _now()
    manifest["artifacts"]["final_checkpoint"] = str(result.checkpoint)
    _write_manifest(out / "run_manifest.json", manifest)
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(f"step {last.step}: loss_total {last.loss_total:.4f} (pr {last.loss_pr:.4f})")
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    from .finetune import finetune_run

    if args.init != "scratch" and not Path(args.init).is_file():
        raise UsageError(f"--init checkpoint not found: {args.init}")
    cfg_dict = _resolve(args, C.FINETUNE_DEFAULTS, "epochs")
    cfg = C.finetune_from_dict(cfg_dict, init=args.init)
    out = _out_dir(args, "finetune")
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": "finetune", "tool_version": __version__, "config": cfg_dict, "init": args.init,
        "seeds": {"seed": cfg.seed, "data_seed": cfg_dict["data"]["seed"]},
        "artifacts": {"curves_csv": str(out / "curves.csv"), "summary_json": str(out / "summary.json")},
        "started": _now(), "finished": None,
    }
    _write_manifest(out / "run_manifest.json", manifest)
    train, val = C.finetune_splits(cfg_dict)
    with _threads(args.device_threads):
        result = finetune_run(cfg, train, val, out_dir=out)
    manifest["finished"] = _now()
    _write_manifest(out / "run_manifest.json", manifest)
    m = result.best
    print(f"best epoch {result.best_epoch}")
    print(f"{'class':>6} {'dice':>8} {'hd95':>8}")
    for k, d, h in zip(m.classes, m.dice, m.hd95):
        print(f"{k:>6} {d:8.4f} {h:8.3f}")
    print(f"{'mean':>6} {m.mean_dice:8.4f} {m.mean_hd95:8.3f}")
    return EXIT_OK


def mask_preview_image(original: np.ndarray, masked: np.ndarray, mask: np.ndarray, scale: int = 4) -> np.ndarray:
    """Mid-slice (first axis) panels original | masked | mask as a [0, 1] array."""
    mid = original.shape[0] // 2
    lo, hi = float(original.min()), float(original.max())
    span = hi - lo if hi > lo else 1.0
    panels = [(original[mid] - lo) / span, np.clip((masked[mid] - lo) / span, 0, 1), mask[mid].astype(float)]
    gap = np.ones((original.shape[1], 2))
    row = np.concatenate([panels[0], gap, panels[1], gap, panels[2]], axis=1)
    return np.kron(row, np.ones((scale, scale)))


def cmd_mask_preview(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import image as mpimg

    path = Path(args.volume)
    if not path.is_file():
        raise UsageError(f"volume not found: {path}")
    vol = read_volume(path)
    s2 = args.patch if args.patch else args.sub_volume // 2
    grid = GridSpec(vol.shape[1:], args.sub_volume, s2)
    plan = make_plan(grid, args.ratio, args.seed)
    masked = apply_mask(vol, plan)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_volume(out, masked)
    voxel_mask = plan.voxel_mask()
    write_volume(out.with_name(out.stem + "_mask.hmim"), voxel_mask.astype(np.uint8))
    (out.with_name(out.stem + "_plan.bin")).write_bytes(plan.to_bytes())
    img = mask_preview_image(vol[0], masked[0], voxel_mask)
    mpimg.imsave(out.with_name(out.stem + "_preview.png"), img, cmap="gray", vmin=0.0, vmax=1.0)
    print(f"masked {plan.n_masked} of {grid.n_patches} patches -> {out}")
    return EXIT_OK


def _read_csv(path: Path) -> tuple[list, list]:
    if not path.is_file():
        raise UsageError(f"CSV not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise UsageError(f"CSV has no data rows: {path}")
    return rows[0], rows[1:]


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    columns = [c for c in args.columns.split(",") if c] if args.columns else ["loss_total"]
    series = []
    for name in args.csv:
        path = Path(name)
        header, rows = _read_csv(path)
        xcol = args.x or ("step" if "step" in header else "epoch" if "epoch" in header else header[0])
        for col in [xcol] + columns:
            if col not in header:
                raise UsageError(f"column '{col}' not in {path} (has {', '.join(header)})")
        xi = header.index(xcol)
        for col in columns:
            ci = header.index(col)
            xs = [float(r[xi]) for r in rows]
            ys = [float(r[ci]) if r[ci] not in ("", "nan") else float("nan") for r in rows]
            label = path.stem if len(columns) == 1 else f"{path.stem}:{col}"
            series.append((label, xs, ys, xcol))

    plt.rcParams["svg.hashsalt"] = "hybridmim"
    plt.rcParams["svg.fonttype"] = "none"  # keep labels as <text>
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, xs, ys, _ in series:
        ax.plot(xs, ys, label=label)
    ax.set_xlabel(series[0][3])
    ax.set_ylabel(columns[0] if len(columns) == 1 else "value")
    ax.legend()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    spec = PhantomSpec(volume_shape=tuple(args.shape), n_objects=args.objects, noise_sigma=args.noise)
    samples = make_corpus(args.count, spec, args.seed)
    manifest = write_corpus(args.out_dir, samples, val_count=args.val_count)
    print(f"wrote {args.count} phantoms and {manifest}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridmim", description="Hierarchical masked pre-training "
                                     "for 3D volumes, at desk scale.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="self-supervised pre-training")
    _common(p, "total pre-training steps")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="segmentation fine-tuning")
    _common(p, "fine-tuning epochs")
    p.add_argument("--init", default="scratch", help="checkpoint path or 'scratch'")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("mask-preview", help="mask a volume file and render a mid-slice preview")
    p.add_argument("volume")
    p.add_argument("--sub-volume", type=int, required=True, help="first-level sub-volume side")
    p.add_argument("--patch", type=int, help="second-level patch side (default: half the sub-volume)")
    p.add_argument("--ratio", type=float, default=0.4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="masked volume path; siblings get _mask, _plan, _preview")
    p.set_defaults(func=cmd_mask_preview)

    p = sub.add_parser("plot", help="plot CSV columns to an SVG")
    p.add_argument("csv", nargs="+")
    p.add_argument("--columns", help="comma-separated column names (default loss_total)")
    p.add_argument("--x", help="x-axis column (default step or epoch)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("generate", help="write a phantom corpus and manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--val-count", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", type=int, nargs=3, default=[32, 32, 32])
    p.add_argument("--objects", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (HybridMIMError, OSError, ArithmeticError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
