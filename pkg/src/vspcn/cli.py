"""Command-line surface.

Subcommands: gen-data, train, eval, sweep-tau, ablate, gradcheck,
export-attn. Every config key is mirrored as --key VALUE; precedence is
defaults < config file < VSPCN_SEED < flags. Commands that take a
checkpoint layer its embedded config underneath the file/flags, so runs at
custom dimensions evaluate without restating them.

Exit codes: 0 success, 2 configuration/data/checkpoint problems, 3 numeric
failure (non-finite values or a failed gradient check).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import tensor as tensor_mod
from .config import RunConfig, apply_overrides, load_config_file, parse_value
from .data import save_dataset, synth_gzsl_dataset
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetFormatError,
    NumericError,
    ShapeError,
    TrainingAbort,
)
from .evaluation import (
    EvalReport,
    evaluate,
    render_sweep_svg,
    sweep_tau,
    write_sweep_csv,
)
from .fusion import forward_vspcn
from .losses import LossWeights, loss_total
from .model import init_model
from .tensor import Tensor, backward, max_relative_error, no_grad
from .training import (
    ablate,
    checkpoint_load,
    resolve_dataset,
    restore_model,
    seen_train_accuracy,
    train,
)

_CONFIG_KEYS = [f.name for f in fields(RunConfig)]


def _add_common(sp: argparse.ArgumentParser, with_checkpoint: bool = False):
    sp.add_argument("--config", metavar="PATH", help="flat key=value config file")
    sp.add_argument("--out", metavar="DIR", default="out", help="output directory")
    if with_checkpoint:
        sp.add_argument("--checkpoint", metavar="PATH", required=True,
                        help="checkpoint to load")
    for key in _CONFIG_KEYS:
        sp.add_argument(f"--{key}", metavar="V", default=None, help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="vspcn",
        description="Prompt-collaboration transformer: synthetic GZSL training and evaluation.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("gen-data", help="synthesize a dataset and write dataset.vspd"))
    _add_common(sub.add_parser("train", help="train; writes train_log.csv and checkpoint.vspc"))
    _add_common(sub.add_parser("eval", help="evaluate a checkpoint at the configured tau"),
                with_checkpoint=True)
    _add_common(sub.add_parser("sweep-tau", help="sweep the calibration grid; CSV + SVG"),
                with_checkpoint=True)
    _add_common(sub.add_parser("ablate", help="run the 8 component-toggle rows"))

    gc = sub.add_parser("gradcheck", help="compare reverse-mode against central differences")
    _add_common(gc)
    gc.add_argument("--coords", type=int, default=8,
                    help="coordinates checked per tensor (0 = every coordinate)")
    gc.add_argument("--tol", type=float, default=1e-4, help="max relative error allowed")
    gc.add_argument("--step", type=float, default=1e-5, help="finite-difference step")

    ea = sub.add_parser("export-attn", help="write all attention rows for one sample")
    _add_common(ea, with_checkpoint=True)
    ea.add_argument("--split", choices=("train", "test"), default="test")
    ea.add_argument("--sample", type=int, default=0, help="sample index within the split")
    return p


def _build_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "checkpoint", None):
        cfg = checkpoint_load(args.checkpoint).cfg
    if args.config:
        cfg = apply_overrides(cfg, load_config_file(args.config))
    env_seed = os.environ.get("VSPCN_SEED")
    if env_seed is not None:
        cfg = apply_overrides(cfg, {"seed": parse_value("seed", env_seed, " (VSPCN_SEED)")})
    overrides = {}
    for key in _CONFIG_KEYS:
        raw = getattr(args, key, None)
        if raw is not None:
            overrides[key] = parse_value(key, raw, " (command line)")
    cfg = apply_overrides(cfg, overrides)
    cfg.validated()
    tensor_mod.set_precision(cfg.precision)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_gen_data(args) -> int:
    cfg = _build_config(args)
    ds = synth_gzsl_dataset(cfg, cfg.seed)
    path = _out_dir(args) / "dataset.vspd"
    save_dataset(ds, path)
    print(f"wrote {path}: {ds.n_seen} seen / {ds.n_unseen} unseen classes, "
          f"{len(ds.train_labels)} train / {len(ds.test_labels)} test images")
    return 0


def _cmd_train(args) -> int:
    cfg = _build_config(args)
    out = _out_dir(args)
    result = train(cfg, out_dir=out)
    acc = seen_train_accuracy(result.model, cfg, result.dataset)
    report = evaluate(result.model, cfg, result.dataset)
    print(f"trained {cfg.epochs} epochs ({len(result.log_lines) - 1} steps); "
          f"seen-train top-1 {100 * acc:.2f}%")
    print(report.to_text(), end="")
    print(f"wrote {out / 'train_log.csv'} and {out / 'checkpoint.vspc'}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _build_config(args)
    model, _ = restore_model(checkpoint_load(args.checkpoint), cfg)
    ds = resolve_dataset(cfg)
    report = evaluate(model, cfg, ds)
    path = _out_dir(args) / "eval.csv"
    path.write_text(EvalReport.CSV_HEADER + "\n" + report.csv_row() + "\n", encoding="utf-8")
    print(report.to_text(), end="")
    print(f"wrote {path}")
    return 0


def _cmd_sweep_tau(args) -> int:
    cfg = _build_config(args)
    model, _ = restore_model(checkpoint_load(args.checkpoint), cfg)
    ds = resolve_dataset(cfg)
    reports, best_tau = sweep_tau(model, cfg, ds)
    out = _out_dir(args)
    write_sweep_csv(reports, out / "tau_sweep.csv")
    render_sweep_svg(reports, out / "tau_sweep.svg")
    best = max(reports, key=lambda r: r.h)
    print(f"swept {len(reports)} points in [{cfg.tau_min}, {cfg.tau_max}]; "
          f"best H {best.h:.2f}% at tau {best_tau}")
    print(f"wrote {out / 'tau_sweep.csv'} and {out / 'tau_sweep.svg'}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _build_config(args)
    lines, _ = ablate(cfg)
    path = _out_dir(args) / "ablation.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    for line in lines:
        print(line)
    print(f"wrote {path}")
    return 0


def _cmd_gradcheck(args) -> int:
    cfg = _build_config(args)
    if cfg.precision != "float64":
        raise ConfigError("gradcheck requires precision=float64")
    worst = gradcheck_model(cfg, coords=args.coords, h=args.step, report=print)
    print(f"worst relative error {worst:.3e} (tolerance {args.tol:g})")
    if worst > args.tol:
        print("gradient check FAILED", file=sys.stderr)
        return 3
    print("gradient check passed")
    return 0


def gradcheck_model(cfg: RunConfig, coords: int = 0, h: float = 1e-5,
                    report=None, seed: int | None = None) -> float:
    """Reverse-mode vs central differences on the total loss at cfg dims.

    coords limits how many coordinates are probed per tensor (0 = all).
    Returns the worst relative error over all probed coordinates.
    """
    seed = cfg.seed if seed is None else seed
    ds = synth_gzsl_dataset(cfg, seed)
    model = init_model(cfg, seed=[seed, 1])
    weights = LossWeights.from_config(cfg).check()
    image = ds.train_images[0]
    y = int(ds.train_labels[0])
    s0 = Tensor(ds.word_vectors)
    attrs_seen = Tensor(ds.class_attributes[: cfg.n_seen])

    def objective() -> float:
        from .data import embed_prototypes

        seq = forward_vspcn(image, s0, model, cfg)
        protos = embed_prototypes(attrs_seen, model.w_d)
        total, _ = loss_total(seq.cls, seq.vp, seq.sp, protos, y, model.w_c,
                              weights, cfg.kl_on_logits)
        return total

    model.zero_grad()
    backward(objective())

    rng = np.random.default_rng([seed, 3])
    worst = 0.0
    for name, t, _ in model.entries():
        flat = t.data.reshape(-1)
        grad = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        if coords and coords < flat.size:
            picked = rng.choice(flat.size, size=coords, replace=False)
        else:
            picked = range(flat.size)
        t_worst = 0.0
        with no_grad():
            for i in picked:
                orig = flat[i]
                flat[i] = orig + h
                fp = objective().item()
                flat[i] = orig - h
                fm = objective().item()
                flat[i] = orig
                fd = (fp - fm) / (2.0 * h)
                err = max_relative_error(np.array([grad[i]]), np.array([fd]))
                t_worst = max(t_worst, err)
        if report is not None:
            report(f"{name:24s} rel err {t_worst:.3e}")
        worst = max(worst, t_worst)
    return worst


def _cmd_export_attn(args) -> int:
    cfg = _build_config(args)
    model, _ = restore_model(checkpoint_load(args.checkpoint), cfg)
    ds = resolve_dataset(cfg)
    images = ds.train_images if args.split == "train" else ds.test_images
    if not 0 <= args.sample < len(images):
        raise ConfigError(
            f"sample {args.sample} out of range for {args.split} split of {len(images)}"
        )
    from .backbone import AttentionSink

    sink = AttentionSink()
    with no_grad():
        forward_vspcn(images[args.sample], Tensor(ds.word_vectors), model, cfg, sink)
    lines = ["layer,query_token,key_token,weight"]
    for site, mat in sink.records:
        for qi in range(mat.shape[0]):
            for kj in range(mat.shape[1]):
                lines.append(f"{site},{qi},{kj},{repr(float(mat[qi, kj]))}")
    path = _out_dir(args) / "attention.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {path}: {len(sink.records)} attention matrices, {len(lines) - 1} rows")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep-tau": _cmd_sweep_tau,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
    "export-attn": _cmd_export_attn,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # the precision mode is process-global; restore it so in-process callers
    # (tests, notebooks) are not left in float32 by one float32 command
    prev_precision = tensor_mod.precision()
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DatasetFormatError, CheckpointError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingAbort as e:
        print(f"error: {e}", file=sys.stderr)
        if e.checkpoint_path is not None:
            print(f"last-good checkpoint: {e.checkpoint_path}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3
    finally:
        tensor_mod.set_precision(prev_precision)


if __name__ == "__main__":
    sys.exit(main())
