#!/usr/bin/env python3
"""Full transfer study: pretrain on the clean split, adapt on the shifted one.

Runs the shipped recipe end to end and prints a comparison table:

    python scripts/run_transfer.py --workdir runs/transfer
    python scripts/run_transfer.py --workdir /tmp/quick --epochs 10   # smoke

Strategies come from the config files in configs/; pass --strategies to
run a subset.  Wall-clock for the full recipe is roughly 12 minutes on one
core.
"""

import argparse
import json
import sys
import time
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"

STRATEGY_FILES = {
    "linear_probe": "transfer_b_linear_probe.cfg",
    "dapt": "transfer_b_dapt.cfg",
    "full": "transfer_b_full.cfg",
    "tfts_only": "ablation_tfts_only.cfg",
    "adapter_serial": "ablation_adapter_serial.cfg",
    "external_prompt": "ablation_external_prompt.cfg",
}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="runs/transfer")
    ap.add_argument("--strategies", nargs="*", default=["linear_probe", "dapt", "full"],
                    choices=sorted(STRATEGY_FILES))
    ap.add_argument("--epochs", type=int, default=None,
                    help="override train.epochs everywhere (smoke runs)")
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()

    from pointpetl.config import (build_config, config_hash, to_dataset_specs,
                                  to_train)
    from pointpetl.data import build_dataset
    from pointpetl.petl import count_params
    from pointpetl.trainer import load_backbone, save_checkpoint, train
    from pointpetl.tensor import Rng

    def overrides():
        sets = []
        if args.epochs is not None:
            sets.append(f"train.epochs={args.epochs}")
            sets.append(f"train.warmup_epochs={max(1, args.epochs // 10)}")
        if args.seed is not None:
            sets.append(f"run.seed={args.seed}")
        return sets

    def make_model(cfg):
        from pointpetl.config import to_backbone, to_head, to_petl
        from pointpetl.trainer import Model
        return Model(to_backbone(cfg), to_petl(cfg), to_head(cfg),
                     cfg["data.classes"], Rng(cfg["run.seed"]))

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)

    t0 = time.time()
    pre_cfg = build_config(CONFIGS / "pretrain_a.cfg", overrides())
    tr_spec, va_spec = to_dataset_specs(pre_cfg)
    pre_train, pre_val = build_dataset(tr_spec), build_dataset(va_spec)
    print(f"[pretrain] split A: {len(pre_train)} train / {len(pre_val)} val")
    pre_model = make_model(pre_cfg)
    hist = train(pre_model, pre_train, to_train(pre_cfg), pre_val,
                 report_path=str(work / "pretrain.jsonl"))
    pre_ckpt = work / "pretrain_a.ckpt"
    save_checkpoint(str(pre_ckpt), pre_model.store, config_hash(pre_cfg))
    print(f"[pretrain] train acc {hist['final_train_acc']:.3f} "
          f"val acc {hist['final_val_acc']:.3f} -> {pre_ckpt}")

    rows = []
    for strategy in args.strategies:
        cfg = build_config(CONFIGS / STRATEGY_FILES[strategy], overrides())
        tr_spec, va_spec = to_dataset_specs(cfg)
        t_ds, v_ds = build_dataset(tr_spec), build_dataset(va_spec)
        model = make_model(cfg)
        load_backbone(str(pre_ckpt), model.store)
        h = train(model, t_ds, to_train(cfg), v_ds,
                  report_path=str(work / f"{strategy}.jsonl"))
        rep = count_params(model.store)
        delta = strategy != "full"
        ckpt = work / f"{strategy}_b.ckpt"
        save_checkpoint(str(ckpt), model.store, config_hash(cfg), delta=delta)
        rows.append({"strategy": strategy, "val_acc": h["final_val_acc"],
                     "tunable": rep["tunable"], "ratio": rep["ratio"]})
        print(f"[{strategy}] val acc {h['final_val_acc']:.3f} "
              f"tunable {rep['tunable']:,} ({100 * rep['ratio']:.2f}%)")

    print(f"\ntotal wall time {time.time() - t0:.0f}s\n")
    print(f"{'strategy':<18}{'val acc':>9}{'tunable':>10}{'%':>8}")
    for r in sorted(rows, key=lambda r: -r["val_acc"]):
        print(f"{r['strategy']:<18}{r['val_acc']:>9.3f}{r['tunable']:>10,}"
              f"{100 * r['ratio']:>8.2f}")
    (work / "summary.json").write_text(json.dumps(rows, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
