"""Train the small config on synthetic gratings with the repeated-split protocol."""
import argparse
import dataclasses
from pathlib import Path

from msdfnet.config import load_config
from msdfnet.data import make_synthetic
from msdfnet.train import run_protocol

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "small.cfg"))
    ap.add_argument("--classes", type=int, default=4)
    ap.add_argument("--per-class", type=int, default=16)
    ap.add_argument("--ratio", type=float, default=0.5)
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--epochs", type=int)
    args = ap.parse_args()

    cfg = load_config(args.config)
    train_cfg = cfg.train if args.epochs is None else dataclasses.replace(cfg.train, total_epochs=args.epochs)
    model_cfg = dataclasses.replace(cfg.model, num_classes=args.classes)
    ds = make_synthetic(args.classes, args.per_class, model_cfg.input_size, seed=train_cfg.seed)

    def log(run, acc, train_acc):
        print(f"run {run}: held-out {acc:.4f}  train {train_acc:.4f}")

    report = run_protocol(ds, args.ratio, args.runs, train_cfg, model_cfg, log)
    print(report.summary())
    print("confusion matrix of the last run:")
    print(report.confusion)


if __name__ == "__main__":
    main()
