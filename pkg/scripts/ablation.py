"""Compare full, projection-only and bare variants on identical splits and seeds."""
import argparse
import dataclasses
from pathlib import Path

from msdfnet.config import load_config
from msdfnet.data import make_synthetic
from msdfnet.model import build_model
from msdfnet.train import run_protocol

ROOT = Path(__file__).resolve().parents[1]
VARIANTS = {
    "full": {},
    "+proj": dict(use_dsa=False),
    "bare": dict(use_dsa=False, use_projection=False),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "small.cfg"))
    ap.add_argument("--per-class", type=int, default=16)
    ap.add_argument("--ratio", type=float, default=0.5)
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--epochs", type=int)
    args = ap.parse_args()

    cfg = load_config(args.config)
    train_cfg = cfg.train if args.epochs is None else dataclasses.replace(cfg.train, total_epochs=args.epochs)
    ds = make_synthetic(cfg.model.num_classes, args.per_class, cfg.model.input_size, seed=train_cfg.seed)

    results = {}
    for name, flags in VARIANTS.items():
        model_cfg = dataclasses.replace(cfg.model, **flags)
        results[name] = run_protocol(ds, args.ratio, args.runs, train_cfg, model_cfg)
        n = build_model(model_cfg, 0).param_count()
        print(f"{name:6s} {n:8d} params  {results[name].summary()}")

    ordered = [f >= p >= b for f, p, b in zip(*(results[k].accuracies for k in VARIANTS))]
    print(f"full >= +proj >= bare holds in {sum(ordered)}/{len(ordered)} seed groups")


if __name__ == "__main__":
    main()
