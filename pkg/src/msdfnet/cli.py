"""Command-line front end.

Every command writes ``manifest.txt`` into ``--out``; passing that file back
via ``--manifest`` replays the command with the recorded arguments and
resolved configuration.  Exit codes: 0 success, 1 check failure,
2 configuration error, 3 I/O or data error.
"""
from __future__ import annotations

import argparse
import dataclasses
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .config import RunConfig, format_config, load_config, parse_config, save_config
from .data import Dataset, load_dataset, make_synthetic, read_image, resize_nearest, save_dataset
from .errors import ConfigError, DataError, ShapeError
from .model import PARAM_RANGE, build_model, load_weights, weights_to_bytes, Model, save_weights
from .train import evaluate, run_protocol, train

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3

ABLATIONS = {
    "full": dict(use_projection=True, use_dsa=True),
    "no-dsa": dict(use_projection=True, use_dsa=False),
    "no-proj": dict(use_projection=False, use_dsa=True),
    "bare": dict(use_projection=False, use_dsa=False),
}

# options recorded in (and replayed from) the manifest, per command
RECORDED = {
    "train": ("data", "synthetic", "epochs", "ablation"),
    "eval": ("weights", "data", "synthetic"),
    "protocol": ("data", "synthetic", "ratio", "runs", "epochs", "ablation"),
    "gradcheck": (),
    "params": ("ablation",),
    "predict": ("weights", "image"),
    "synth": ("synthetic", "format"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="key=value config file")
    shared.add_argument("--seed", type=int, help="overrides the config seed")
    shared.add_argument("--out", help="output directory (default runs/<command>)")
    shared.add_argument("--manifest", help="replay the command recorded in this manifest")

    p = _Parser(prog="msdf", description="MSDF-Net micro-engine")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_opts(sp):
        sp.add_argument("--data", help="class-per-folder dataset root")
        sp.add_argument("--synthetic", help="K,N: K grating classes with N images each")

    sp = sub.add_parser("train", parents=[shared], help="train a model")
    data_opts(sp)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--ablation", choices=sorted(ABLATIONS))

    sp = sub.add_parser("eval", parents=[shared], help="accuracy of saved weights on a dataset")
    sp.add_argument("--weights", required=True)
    data_opts(sp)

    sp = sub.add_parser("protocol", parents=[shared], help="repeated stratified splits, mean ± std")
    data_opts(sp)
    sp.add_argument("--ratio", type=float, required=True)
    sp.add_argument("--runs", type=int, default=5)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--ablation", choices=sorted(ABLATIONS))

    sub.add_parser("gradcheck", parents=[shared], help="finite-difference gradient suite")

    sp = sub.add_parser("params", parents=[shared], help="parameter audit")
    sp.add_argument("--ablation", choices=sorted(ABLATIONS))

    sp = sub.add_parser("predict", parents=[shared], help="classify one image")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--image", required=True)

    sp = sub.add_parser("synth", parents=[shared], help="write a synthetic dataset to disk")
    sp.add_argument("--synthetic", required=True)
    sp.add_argument("--format", choices=("rt", "ppm"), default="rt")
    return p


# ---------------------------------------------------------------- manifest


def read_manifest(path) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from None
    out = {}
    for line in text.splitlines():
        if line and not line.startswith("#") and "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    if "command" not in out:
        raise DataError(f"{path} is not a manifest (no command entry)")
    return out


def write_manifest(out_dir: Path, args, cfg: RunConfig, extra: dict[str, str] | None = None):
    lines = [f"command={args.command}"]
    for name in RECORDED[args.command]:
        value = getattr(args, name, None)
        if value is not None:
            lines.append(f"arg.{name}={value}")
    lines += [f"config.{line}" for line in format_config(cfg).splitlines() if not line.startswith("#")]
    lines += [f"version.msdfnet={__version__}", f"version.numpy={np.__version__}",
              f"version.python={platform.python_version()}"]
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def _resolve(argv):
    parser = build_parser()
    # a manifest supplies the required arguments, so look for it before the strict parse
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--manifest")
    pre.add_argument("--out")
    early, _ = pre.parse_known_args(argv)
    if early.manifest and early.command in RECORDED:
        m = read_manifest(early.manifest)
        if m["command"] != early.command:
            raise ConfigError(f"manifest records command {m['command']!r}, not {early.command!r}")
        replay = [early.command]
        for name in RECORDED[early.command]:
            if f"arg.{name}" in m:
                replay += [f"--{name}", m[f"arg.{name}"]]
        args = parser.parse_args(replay)
        args.out, args.manifest = early.out, early.manifest
        cfg_text = "\n".join(f"{k[7:]}={v}" for k, v in m.items() if k.startswith("config."))
        cfg = parse_config(cfg_text)
    else:
        args = parser.parse_args(argv)
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = RunConfig(cfg.model, dataclasses.replace(cfg.train, seed=args.seed))
    if getattr(args, "ablation", None):
        cfg = RunConfig(dataclasses.replace(cfg.model, **ABLATIONS[args.ablation]), cfg.train)
    if getattr(args, "epochs", None) is not None:
        cfg = RunConfig(cfg.model, dataclasses.replace(cfg.train, total_epochs=args.epochs))
    out_dir = Path(args.out or Path("runs") / args.command)
    out_dir.mkdir(parents=True, exist_ok=True)
    return args, cfg, out_dir


# ---------------------------------------------------------------- helpers


def _parse_synthetic(text: str) -> tuple[int, int]:
    try:
        k, n = (int(s) for s in text.split(","))
    except ValueError:
        raise ConfigError(f"--synthetic expects K,N, got {text!r}") from None
    return k, n


def _dataset(args, cfg: RunConfig) -> tuple[Dataset, RunConfig]:
    """Load the requested dataset and adopt its class count into the model config."""
    if args.data and args.synthetic:
        raise ConfigError("give either --data or --synthetic, not both")
    if args.data:
        ds = load_dataset(args.data, cfg.model.input_size)
    elif args.synthetic:
        k, n = _parse_synthetic(args.synthetic)
        ds = make_synthetic(k, n, cfg.model.input_size, seed=cfg.train.seed)
    else:
        raise ConfigError("one of --data or --synthetic is required")
    model_cfg = dataclasses.replace(cfg.model, num_classes=ds.num_classes)
    return ds, RunConfig(model_cfg, cfg.train)


def _write_classes(out_dir: Path, names):
    (out_dir / "classes.txt").write_text("\n".join(names) + "\n")


def _model_from_weights(args, cfg: RunConfig) -> tuple[Model, RunConfig, list[str]]:
    """Rebuild the model that produced ``--weights``; sibling model.cfg wins over defaults."""
    wdir = Path(args.weights).parent
    if not args.config and not args.manifest and (wdir / "model.cfg").exists():
        cfg = load_config(wdir / "model.cfg")
    classes_file = wdir / "classes.txt"
    if classes_file.exists():
        names = classes_file.read_text().split()
    else:
        names = [f"class{k}" for k in range(cfg.model.num_classes)]
    if len(names) != cfg.model.num_classes:
        raise ConfigError(f"{classes_file} lists {len(names)} classes, config has {cfg.model.num_classes}")
    model = build_model(cfg.model, cfg.train.seed)
    load_weights(model, args.weights)
    return model, cfg, names


# ---------------------------------------------------------------- commands


def cmd_train(args, cfg, out_dir) -> int:
    ds, cfg = _dataset(args, cfg)
    model = build_model(cfg.model, cfg.train.seed)

    def log(r):
        print(f"epoch {r.epoch:4d}  lr {r.lr:.6g}  l_n {r.l_n:.4f}  l_r {r.l_r:.4f}  "
              f"l_dual {r.l_dual:.4f}  acc {r.train_acc:.3f}", flush=True)

    history = train(model, ds, cfg.train, log=log)
    (out_dir / "history.csv").write_text(history.to_csv())
    size = save_weights(model, out_dir / "weights.msdf")
    save_config(cfg, out_dir / "model.cfg")
    _write_classes(out_dir, ds.class_names)
    write_manifest(out_dir, args, cfg)
    print(f"wrote {out_dir / 'history.csv'} and {out_dir / 'weights.msdf'} ({size} bytes)")
    return EXIT_OK


def cmd_eval(args, cfg, out_dir) -> int:
    model, cfg, names = _model_from_weights(args, cfg)
    ds, _ = _dataset(args, cfg)
    if ds.num_classes != len(names):
        raise ConfigError(f"dataset has {ds.num_classes} classes, weights were trained on {len(names)}")
    acc = evaluate(model, ds)
    (out_dir / "eval.csv").write_text(f"metric,value\naccuracy,{float(acc)!r}\nitems,{len(ds)}\n")
    write_manifest(out_dir, args, cfg)
    print(f"accuracy: {acc:.4f} ({len(ds)} items)")
    return EXIT_OK


def cmd_protocol(args, cfg, out_dir) -> int:
    if not 0 < args.ratio < 1:
        raise ConfigError(f"--ratio must lie in (0, 1), got {args.ratio}")
    if args.runs < 1:
        raise ConfigError("--runs must be at least 1")
    ds, cfg = _dataset(args, cfg)
    report = run_protocol(ds, args.ratio, args.runs, cfg.train, cfg.model,
                          log=lambda i, a, ta: print(f"run {i}: test {a:.4f}  train {ta:.4f}", flush=True))
    (out_dir / "report.csv").write_text(report.to_csv())
    (out_dir / "summary.txt").write_text(report.summary() + "\n")
    write_manifest(out_dir, args, cfg)
    print(report.summary())
    return EXIT_OK


def cmd_gradcheck(args, cfg, out_dir) -> int:
    from .gradcheck import run_gradcheck

    results = run_gradcheck(cfg.train.seed)
    rows = ["op,worst_rel_error,tolerance,passed"]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:24s} worst rel err {r.worst:.3e}  (tol {r.tol:g})  {status}")
        rows.append(f"{r.name},{r.worst:.6e},{r.tol:g},{int(r.passed)}")
    (out_dir / "gradcheck.csv").write_text("\n".join(rows) + "\n")
    write_manifest(out_dir, args, cfg)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check FAILED for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    print(f"all {len(results)} gradient checks passed")
    return EXIT_OK


def cmd_params(args, cfg, out_dir) -> int:
    model = build_model(cfg.model, cfg.train.seed)
    total = model.param_count()
    breakdown = model.breakdown()
    size = len(weights_to_bytes(model))
    lo, hi = PARAM_RANGE
    print(f"total parameters: {total} ({total / 1e6:.3f}M; budget {lo}-{hi})")
    for name, n in breakdown.items():
        print(f"  {name:10s} {n:9d}")
    print(f"projected weight file: {size} bytes ({size / 1e6:.3f} MB)")
    rows = ["module,parameters"] + [f"{k},{v}" for k, v in breakdown.items()] + [f"total,{total}"]
    (out_dir / "params.csv").write_text("\n".join(rows) + "\n")
    write_manifest(out_dir, args, cfg, {"result.total_params": str(total), "result.file_bytes": str(size)})
    return EXIT_OK


def cmd_predict(args, cfg, out_dir) -> int:
    model, cfg, names = _model_from_weights(args, cfg)
    img = resize_nearest(read_image(args.image), cfg.model.input_size)
    with T.no_grad():
        _, _, s_agg = model.forward(T.Tensor(img[None]), training=False)
        probs = T.softmax(s_agg).data[0].astype(np.float64)
    top = int(np.argmax(probs))
    print(f"top1: {names[top]} ({probs[top]:.6f})")
    lines = ["class,probability"]
    for name, p in zip(names, probs):
        print(f"  {name}: {p:.6f}")
        lines.append(f"{name},{float(p)!r}")
    (out_dir / "prediction.csv").write_text("\n".join(lines) + "\n")
    write_manifest(out_dir, args, cfg)
    return EXIT_OK


def cmd_synth(args, cfg, out_dir) -> int:
    k, n = _parse_synthetic(args.synthetic)
    ds = make_synthetic(k, n, cfg.model.input_size, seed=cfg.train.seed)
    save_dataset(ds, out_dir / "data", args.format)
    write_manifest(out_dir, args, cfg)
    print(f"wrote {len(ds)} images in {k} classes to {out_dir / 'data'}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "protocol": cmd_protocol, "gradcheck": cmd_gradcheck,
    "params": cmd_params, "predict": cmd_predict, "synth": cmd_synth,
}


def main(argv=None) -> int:
    try:
        args, cfg, out_dir = _resolve(argv)
        return COMMANDS[args.command](args, cfg, out_dir)
    except SystemExit as e:
        return int(e.code or 0)
    except (ConfigError, ShapeError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
