"""``pointpetl`` command line.

Subcommands: gen, pretrain, finetune, eval, fewshot, count, gradcheck,
scale-stats.  Every subcommand takes ``--config FILE`` plus repeatable
``--set key=value`` overrides.  Exit codes: 0 success, 1 usage/config,
2 data/format, 3 numeric failure.

Heavy imports happen inside the handlers so that the ``PETL_THREADS``
environment variable can cap the BLAS thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import ConfigError, DataError, FormatError, NumericError, ShapeError


def _apply_thread_env() -> None:
    v = os.environ.get("PETL_THREADS")
    if not v:
        return
    if not v.isdigit() or int(v) < 1:
        raise ConfigError(f"PETL_THREADS must be a positive integer, got {v!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ.setdefault(var, v)


def _add_common(sub):
    sub.add_argument("--config", default=None, help="flat key = value config file")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override one config entry (repeatable)")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pointpetl",
                                description="parameter-efficient transfer on point clouds")
    subs = p.add_subparsers(dest="command", required=True)

    g = subs.add_parser("gen", help="materialize train/val splits to disk")
    _add_common(g)
    g.add_argument("--out", required=True, help="output dataset directory")
    g.set_defaults(fn=cmd_gen)

    t = subs.add_parser("pretrain", help="train from random init, save a full checkpoint")
    _add_common(t)
    t.add_argument("--data", default=None, help="dataset dir from gen (default: in-memory)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--report", default=None, help="JSONL per-epoch report path")
    t.set_defaults(fn=cmd_pretrain)

    f = subs.add_parser("finetune", help="adapt a backbone with the configured strategy")
    _add_common(f)
    f.add_argument("--data", default=None)
    f.add_argument("--backbone", default=None, help="checkpoint providing frozen weights")
    f.add_argument("--out", required=True)
    f.add_argument("--report", default=None)
    f.add_argument("--save-full", action="store_true",
                   help="write every tensor instead of the tunables-only delta")
    f.set_defaults(fn=cmd_finetune)

    e = subs.add_parser("eval", help="restore a checkpoint and score the val split")
    _add_common(e)
    e.add_argument("--data", default=None)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--backbone", default=None,
                   help="base weights (required to restore a delta checkpoint)")
    e.set_defaults(fn=cmd_eval)

    w = subs.add_parser("fewshot", help="episodic evaluation on the val split")
    _add_common(w)
    w.add_argument("--data", default=None)
    w.add_argument("--backbone", default=None)
    w.add_argument("--way", type=int, default=5)
    w.add_argument("--shot", type=int, default=5)
    w.add_argument("--episodes", type=int, default=10)
    w.set_defaults(fn=cmd_fewshot)

    c = subs.add_parser("count", help="parameter, FLOP, and optimizer-state accounting")
    _add_common(c)
    c.add_argument("--embed-profile", choices=("mini", "grouped"), default="mini",
                   help="embedding cost model used for the FLOP estimate")
    c.set_defaults(fn=cmd_count)

    gc = subs.add_parser("gradcheck", help="finite-difference check on a tiny model")
    _add_common(gc)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(fn=cmd_gradcheck)

    s = subs.add_parser("scale-stats", help="per-layer dynamic scale summary CSV")
    _add_common(s)
    s.add_argument("--data", default=None)
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--backbone", default=None)
    s.add_argument("--out", default=None, help="CSV path (default stdout)")
    s.add_argument("--batch", type=int, default=16)
    s.set_defaults(fn=cmd_scale_stats)
    return p


# ------------------------------------------------------------------ helpers

def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _load_cfg(args):
    from .config import build_config
    return build_config(args.config, args.set)


def _build_model(cfg):
    from .config import to_backbone, to_head, to_petl
    from .tensor import Rng
    from .trainer import Model
    return Model(to_backbone(cfg), to_petl(cfg), to_head(cfg),
                 cfg["data.classes"], Rng(cfg["run.seed"]))


def _load_split(cfg, data_dir, split):
    from .config import to_dataset_specs
    from .data import build_dataset, load_manifest
    if data_dir is not None:
        return load_manifest(os.path.join(data_dir, f"{split}.manifest"))
    train, val = to_dataset_specs(cfg)
    return build_dataset(train if split == "train" else val)


def _restore(model, cfg, checkpoint=None, backbone=None):
    """Backbone first, then the (possibly delta) checkpoint on top."""
    from .config import config_hash
    from .trainer import load_backbone, load_checkpoint, read_checkpoint
    if backbone:
        load_backbone(backbone, model.store)
    if checkpoint:
        _, digest, _ = read_checkpoint(checkpoint)
        if digest != config_hash(cfg) and digest.strip(b"\0"):
            print("warning: checkpoint was written under a different config",
                  file=sys.stderr)
        load_checkpoint(checkpoint, model.store)


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    from .config import config_echo, to_dataset_specs
    from .data import generate, write_manifest, write_pcb
    cfg = _load_cfg(args)
    tspec, vspec = to_dataset_specs(cfg)
    os.makedirs(args.out, exist_ok=True)
    counts = {}
    for split, spec in (("train", tspec), ("val", vspec)):
        sub = os.path.join(args.out, split)
        os.makedirs(sub, exist_ok=True)
        entries = []
        for i in range(spec.size):
            cloud = generate(spec, i)
            rel = f"{split}/{i:06d}.pcb"
            write_pcb(os.path.join(args.out, rel), cloud)
            entries.append((rel, cloud.label))
        write_manifest(os.path.join(args.out, f"{split}.manifest"), entries)
        counts[split] = len(entries)
    with open(os.path.join(args.out, "config.echo"), "w", encoding="utf-8") as f:
        f.write(config_echo(cfg))
    _emit({"out": args.out, **counts})
    return 0


def cmd_pretrain(args) -> int:
    from .config import config_hash, to_train
    from .trainer import save_checkpoint, train
    cfg = _load_cfg(args)
    model = _build_model(cfg)
    train_ds = _load_split(cfg, args.data, "train")
    val_ds = _load_split(cfg, args.data, "val")
    history = train(model, train_ds, to_train(cfg), val_ds, report_path=args.report)
    size = save_checkpoint(args.out, model.store, config_hash(cfg), delta=False)
    _emit({"checkpoint": args.out, "bytes": size,
           "final_val_acc": history["final_val_acc"],
           "final_train_acc": history["final_train_acc"]})
    return 0


def cmd_finetune(args) -> int:
    from .config import config_hash, to_train
    from .trainer import save_checkpoint, train
    cfg = _load_cfg(args)
    model = _build_model(cfg)
    _restore(model, cfg, backbone=args.backbone)
    train_ds = _load_split(cfg, args.data, "train")
    val_ds = _load_split(cfg, args.data, "val")
    history = train(model, train_ds, to_train(cfg), val_ds, report_path=args.report)
    delta = not args.save_full and cfg["petl.strategy"] != "full"
    size = save_checkpoint(args.out, model.store, config_hash(cfg), delta=delta)
    _emit({"checkpoint": args.out, "bytes": size, "delta": delta,
           "tunable": model.store.n_tunable(), "total": model.store.n_params(),
           "final_val_acc": history["final_val_acc"],
           "final_train_acc": history["final_train_acc"]})
    return 0


def cmd_eval(args) -> int:
    from .trainer import evaluate
    cfg = _load_cfg(args)
    model = _build_model(cfg)
    _restore(model, cfg, checkpoint=args.checkpoint, backbone=args.backbone)
    val_ds = _load_split(cfg, args.data, "val")
    loss, acc = evaluate(model, val_ds, cfg["train.batch_size"])
    _emit({"val_loss": loss, "val_acc": acc, "n": len(val_ds)})
    return 0


def cmd_fewshot(args) -> int:
    from .config import to_train
    from .trainer import run_fewshot
    cfg = _load_cfg(args)
    val_ds = _load_split(cfg, args.data, "val")

    def build():
        model = _build_model(cfg)
        _restore(model, cfg, backbone=args.backbone)
        return model

    out = run_fewshot(build, val_ds, args.way, args.shot, args.episodes,
                      to_train(cfg), seed=cfg["run.seed"])
    _emit({"way": args.way, "shot": args.shot, "episodes": args.episodes,
           "mean_acc": out["mean"], "std_acc": out["std"], "per_episode": out["episodes"]})
    return 0


def cmd_count(args) -> int:
    from .config import to_backbone, to_petl
    from .petl import count_flops, count_params, optimizer_state_bytes
    cfg = _load_cfg(args)
    model = _build_model(cfg)
    report = count_params(model.store)
    flops = count_flops(to_backbone(cfg), to_petl(cfg), cfg["data.classes"],
                        head_inputs=len(model.head_inputs),
                        head_hidden=model.head_hidden,
                        embed_profile=args.embed_profile)
    _emit({"params": report,
           "flops": {"baseline_macs": flops.baseline_macs,
                     "model_macs": flops.model_macs,
                     "ratio": flops.ratio,
                     "breakdown": flops.breakdown},
           "optimizer_bytes": optimizer_state_bytes(report["tunable"])})
    return 0


def _op_battery(rng):
    """Central-difference check of each differentiable op in isolation.

    Returns {op_name: max_rel_err}.  Inputs are tiny fixed-seed tensors;
    outputs are folded to a scalar through a random weighting so every
    element of the op's output contributes to the gradient.
    """
    from . import tensor as T
    from .tensor import Tensor, gradcheck

    def leaf(r, shape, scale=1.0):
        return Tensor(r.normal(shape, scale=scale), requires_grad=True)

    def mix(r, out):
        w = Tensor(r.normal(out.shape))
        return T.tensor_sum(out * w)

    errs = {}

    def run(name, build):
        r = rng.split(len(errs))
        fn, params = build(r)
        errs[name] = float(gradcheck(fn, params).max_err)

    def binop(op):
        def build(r):
            a, b = leaf(r.split(0), (2, 3)), leaf(r.split(1), (3,))
            return (lambda: mix(r.split(2), op(a, b))), [a, b]
        return build

    def unop(op, shape=(2, 5), scale=1.0):
        def build(r):
            a = leaf(r.split(0), shape, scale)
            return (lambda: mix(r.split(1), op(a))), [a]
        return build

    run("add", binop(T.add))
    run("sub", binop(T.sub))
    run("mul", binop(T.mul))
    run("neg", unop(T.neg))

    def build_matmul(r):
        a, b = leaf(r.split(0), (2, 3, 4)), leaf(r.split(1), (4, 5))
        return (lambda: mix(r.split(2), T.matmul(a, b))), [a, b]
    run("matmul", build_matmul)

    run("reshape", unop(lambda a: T.reshape(a, (5, 2))))
    run("swapaxes", unop(lambda a: T.swapaxes(a, 0, 2), shape=(2, 3, 4)))
    run("broadcast_to", unop(lambda a: T.broadcast_to(a, (4, 2, 5))))
    run("narrow", unop(lambda a: T.narrow(a, 1, 1, 3)))

    def build_concat(r):
        a, b = leaf(r.split(0), (2, 3)), leaf(r.split(1), (2, 2))
        return (lambda: mix(r.split(2), T.concat([a, b], axis=1))), [a, b]
    run("concat", build_concat)

    run("tensor_sum", unop(lambda a: T.tensor_sum(a, axis=1, keepdims=True)))
    run("mean_pool", unop(lambda a: T.mean_pool(a, axis=0)))
    run("max_pool", unop(lambda a: T.max_pool(a, axis=1)))
    run("topk_pool", unop(lambda a: T.topk_pool(a, axis=1, k=3), shape=(3, 7)))
    run("relu", unop(T.relu))
    run("gelu", unop(T.gelu))
    run("softmax", unop(T.softmax))
    run("log_softmax", unop(T.log_softmax))

    def build_layer_norm(r):
        x = leaf(r.split(0), (2, 3, 8))
        gamma = leaf(r.split(1), (8,), 0.5)
        beta = leaf(r.split(2), (8,), 0.5)
        return (lambda: mix(r.split(3), T.layer_norm(x, gamma, beta))), [x, gamma, beta]
    run("layer_norm", build_layer_norm)
    return errs


def cmd_gradcheck(args) -> int:
    import numpy as np

    from .config import to_head, to_petl
    from .backbone import BackboneConfig
    from .tensor import Rng, gradcheck
    from .trainer import Model, cross_entropy
    cfg = _load_cfg(args)
    bb = BackboneConfig(depth=2, dim=16, heads=2, ffn_ratio=2, patches=8, patch_size=8)
    petl_cfg = to_petl(cfg)
    if petl_cfg.rank > 4:
        from dataclasses import replace
        petl_cfg = replace(petl_cfg, rank=4, prompt_topk=min(petl_cfg.prompt_topk, 4))
    model = Model(bb, petl_cfg, to_head(cfg), 4, Rng(cfg["run.seed"]))
    rng = Rng(cfg["run.seed"] + 1)
    groups = rng.split(0).normal((2, bb.patches, bb.patch_size, 3), scale=0.3)
    centers = rng.split(1).normal((2, bb.patches, 3), scale=0.5)
    labels = np.array([0, 2])
    params = model.store.tunable_items()

    def loss():
        return cross_entropy(model.forward(groups, centers), labels)

    res = gradcheck(loss, [p for _, p in params], names=[n for n, _ in params])
    ops = _op_battery(Rng(cfg["run.seed"] + 2))
    ok = bool(res.ok(args.tol)) and max(ops.values()) < args.tol
    _emit({"strategy": petl_cfg.strategy, "max_err": float(res.max_err),
           "worst": res.worst, "tol": args.tol, "ok": ok, "ops": ops,
           "n_checked": int(sum(p.size for _, p in params))})
    if not ok:
        worst = max(res.max_err, max(ops.values()))
        raise NumericError(f"gradcheck max_err {worst:.3e} exceeds {args.tol}")
    return 0


def cmd_scale_stats(args) -> int:
    from .petl import scale_stats_csv, scale_stats_from_capture
    cfg = _load_cfg(args)
    if cfg["petl.scale_mode"] not in ("dynamic", "dynamic_no_relu") \
            or cfg["petl.strategy"] != "dapt":
        raise ConfigError("scale-stats needs petl.strategy=dapt with a dynamic scale_mode")
    model = _build_model(cfg)
    _restore(model, cfg, checkpoint=args.checkpoint, backbone=args.backbone)
    val_ds = _load_split(cfg, args.data, "val")
    from .tensor import no_grad
    from .trainer import clouds_to_arrays
    capture = {}
    with no_grad():
        clouds = val_ds.clouds[: args.batch]
        groups, centers = clouds_to_arrays(clouds, model.bb_cfg)
        model.forward(groups, centers, capture=capture)
    stats = scale_stats_from_capture(capture)
    text = scale_stats_csv(stats)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    _emit({"layers": stats.layers, "mean_scale": stats.mean_scale,
           "adjusted_ratio": stats.adjusted_ratio, "batch": len(clouds)})
    return 0


def main(argv=None) -> int:
    try:
        _apply_thread_env()
        parser = _build_parser()
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:
            return 0 if e.code == 0 else 1
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ShapeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
