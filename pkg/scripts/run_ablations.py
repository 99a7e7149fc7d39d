#!/usr/bin/env python3
"""Desk-scale ablations over the adapter design axes.

Varies one axis at a time around the default recipe (dynamic scaling,
mean pooling, scale+shift on norms and linears) and reports validation
accuracy after a short adaptation run on the shifted split:

    python scripts/run_ablations.py --workdir runs/ablations --epochs 20

Axes:
  scale   dynamic | dynamic_no_relu | fixed | learnable_scalar
  pool    mean | max | topk
  tfts    ln_linear | ln_only | off
  prompt  accumulate | latest | off
"""

import argparse
import json
import sys
import time
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
BASE = ROOT / "configs" / "transfer_b_dapt.cfg"

AXES = {
    "scale": [("petl.scale_mode", v)
              for v in ("dynamic", "dynamic_no_relu", "fixed", "learnable_scalar")],
    "pool": [("petl.prompt_pool", v) for v in ("mean", "max", "topk")],
    "tfts": [("petl.tfts_granularity", v) for v in ("ln_linear", "ln_only", "off")],
    "prompt": [("petl.prompt_accumulate", "true"), ("petl.prompt_accumulate", "false"),
               ("petl.prompt_mode", "off")],
}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="runs/ablations")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--axes", nargs="*", default=sorted(AXES), choices=sorted(AXES))
    ap.add_argument("--pretrain-ckpt", default=None,
                    help="reuse an existing pretrain_a.ckpt instead of training one")
    args = ap.parse_args()

    from pointpetl.config import (build_config, config_hash, to_backbone,
                                  to_dataset_specs, to_head, to_petl, to_train)
    from pointpetl.data import build_dataset
    from pointpetl.petl import count_params
    from pointpetl.tensor import Rng
    from pointpetl.trainer import Model, load_backbone, save_checkpoint, train

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)

    if args.pretrain_ckpt:
        pre_ckpt = Path(args.pretrain_ckpt)
    else:
        pre_ckpt = work / "pretrain_a.ckpt"
        cfg = build_config(ROOT / "configs" / "pretrain_a.cfg")
        tr, va = (build_dataset(s) for s in to_dataset_specs(cfg))
        model = Model(to_backbone(cfg), to_petl(cfg), to_head(cfg),
                      cfg["data.classes"], Rng(cfg["run.seed"]))
        h = train(model, tr, to_train(cfg), va)
        save_checkpoint(str(pre_ckpt), model.store, config_hash(cfg))
        print(f"[pretrain] val acc {h['final_val_acc']:.3f} -> {pre_ckpt}")

    t0 = time.time()
    rows = []
    seen = set()
    for axis in args.axes:
        for key, val in AXES[axis]:
            if (key, val) in seen:
                continue
            seen.add((key, val))
            sets = [f"{key}={val}", f"train.epochs={args.epochs}",
                    f"train.warmup_epochs={max(1, args.epochs // 10)}"]
            cfg = build_config(BASE, sets)
            tr, va = (build_dataset(s) for s in to_dataset_specs(cfg))
            model = Model(to_backbone(cfg), to_petl(cfg), to_head(cfg),
                          cfg["data.classes"], Rng(cfg["run.seed"]))
            load_backbone(str(pre_ckpt), model.store)
            tag = f"{axis}_{val}".replace(".", "")
            h = train(model, tr, to_train(cfg), va,
                      report_path=str(work / f"{tag}.jsonl"))
            rep = count_params(model.store)
            rows.append({"axis": axis, "setting": f"{key}={val}",
                         "val_acc": h["final_val_acc"], "tunable": rep["tunable"]})
            print(f"[{axis}] {key}={val}: val acc {h['final_val_acc']:.3f} "
                  f"({rep['tunable']:,} tunable)")

    print(f"\ntotal wall time {time.time() - t0:.0f}s\n")
    print(f"{'axis':<8}{'setting':<34}{'val acc':>9}{'tunable':>10}")
    for r in rows:
        print(f"{r['axis']:<8}{r['setting']:<34}{r['val_acc']:>9.3f}{r['tunable']:>10,}")
    (work / "summary.json").write_text(json.dumps(rows, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
