"""Model assembly, optimization, checkpoints, and evaluation loops.

A Model owns one ParameterStore holding backbone + strategy + head tensors,
with the tunable mask sealed at assembly time.  Training runs AdamW with
decoupled weight decay under a linear-warmup cosine schedule and writes one
JSON line per epoch.  Checkpoints are a small binary container that can hold
either every tensor or just the tunables ("delta" mode) — restoring a delta
checkpoint on top of the same frozen backbone reproduces the full model.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, replace

import numpy as np

from . import backbone as bb
from . import tensor as T
from .data import Dataset, augment, patchify, sample_episode
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .petl import PETLConfig, build_petl_params, make_runtime, tunable_mask
from .tensor import Rng, Tensor

HEAD_FEATURES = ("cls", "prompt_pool", "patch_pool")


@dataclass(frozen=True)
class HeadConfig:
    hidden: int = 0        # 0 -> max(32, 2 * dim // 3)
    inputs: str = "auto"   # "auto" or comma list drawn from HEAD_FEATURES

    def resolve_inputs(self, petl_cfg: PETLConfig) -> tuple:
        if self.inputs == "auto":
            if petl_cfg.effective_prompt_mode() != "off":
                return ("cls", "prompt_pool", "patch_pool")
            return ("cls", "patch_pool")
        parts = tuple(p.strip() for p in self.inputs.split(",") if p.strip())
        bad = [p for p in parts if p not in HEAD_FEATURES]
        if bad or not parts:
            raise ConfigError(f"head inputs must be drawn from {HEAD_FEATURES}, got {self.inputs!r}")
        return parts

    def resolve_hidden(self, dim: int) -> int:
        if self.hidden < 0:
            raise ConfigError("head hidden must be >= 0")
        return self.hidden if self.hidden else max(32, 2 * dim // 3)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    warmup_epochs: int = 5
    batch_size: int = 32
    lr: float = 5e-4
    min_lr: float = 1e-6
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    label_smoothing: float = 0.0
    augment: str = "scale-translate"
    eval_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs]")
        if self.lr <= 0 or self.min_lr < 0 or self.min_lr > self.lr:
            raise ConfigError("need 0 <= min_lr <= lr and lr > 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")


class Model:
    """Backbone + strategy + head sharing one store; mask sealed on build."""

    def __init__(self, bb_cfg: bb.BackboneConfig, petl_cfg: PETLConfig,
                 head_cfg: HeadConfig, n_classes: int, rng: Rng):
        if n_classes < 2:
            raise ConfigError("need at least two classes")
        self.bb_cfg = bb_cfg
        self.petl_cfg = petl_cfg
        self.n_classes = n_classes
        self.head_inputs = head_cfg.resolve_inputs(petl_cfg)
        self.head_hidden = head_cfg.resolve_hidden(bb_cfg.dim)
        store = bb.init_backbone(bb_cfg, rng.split(0))
        build_petl_params(store, bb_cfg, petl_cfg, rng.split(1))
        d, hid = bb_cfg.dim, self.head_hidden
        hr = rng.split(2)
        fan_in = len(self.head_inputs) * d
        store.add("head.fc1.weight", _glorot(hr.split(0), fan_in, hid))
        store.add("head.fc1.bias", np.zeros(hid))
        store.add("head.fc2.weight", _glorot(hr.split(1), hid, hid))
        store.add("head.fc2.bias", np.zeros(hid))
        store.add("head.fc3.weight", _glorot(hr.split(2), hid, n_classes))
        store.add("head.fc3.bias", np.zeros(n_classes))
        store.set_tunable(tunable_mask(store, petl_cfg))
        self.store = store
        self.runtime = make_runtime(store, bb_cfg, petl_cfg)

    def forward(self, groups: np.ndarray, centers: np.ndarray, capture=None) -> Tensor:
        seq = bb.forward(self.store, self.bb_cfg, groups, centers, self.runtime, capture)
        return self.head_forward(seq)

    def head_forward(self, seq: bb.TokenSequence) -> Tensor:
        t = seq.tokens
        B, _, d = t.shape
        feats = []
        for kind in self.head_inputs:
            if kind == "cls":
                feats.append(T.narrow(t, 1, 0, 1).reshape(B, d))
            elif kind == "prompt_pool":
                if seq.n_prompts == 0:
                    raise ConfigError("head asked for prompt_pool but no prompts are present")
                block = T.narrow(t, 1, 1, seq.n_prompts)
                feats.append(T.mean_pool(block, axis=1))
            else:
                block = T.narrow(t, 1, 1 + seq.n_prompts, seq.n_patches)
                feats.append(T.max_pool(block, axis=1))
        x = T.concat(feats, axis=1) if len(feats) > 1 else feats[0]
        s = self.store
        h = T.gelu(T.matmul(x, s["head.fc1.weight"]) + s["head.fc1.bias"])
        h = T.gelu(T.matmul(h, s["head.fc2.weight"]) + s["head.fc2.bias"])
        return T.matmul(h, s["head.fc3.weight"]) + s["head.fc3.bias"]


def _glorot(rng: Rng, fan_in: int, fan_out: int):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out))


# ------------------------------------------------------------------- loss

def cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Mean smoothed cross-entropy; target = (1-eps)*onehot + eps/C."""
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} != ({B},)")
    logp = T.log_softmax(logits, axis=1)
    target = np.full((B, C), smoothing / C)
    target[np.arange(B), labels] += 1.0 - smoothing
    return T.tensor_sum(logp * Tensor(target)) * (-1.0 / B)


def accuracy(logits: Tensor, labels: np.ndarray) -> float:
    return float((np.argmax(logits.data, axis=1) == labels).mean())


# -------------------------------------------------------------- optimizer

class AdamW:
    """Adam with decoupled weight decay; moments in float64."""

    def __init__(self, params, lr: float = 1e-3, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)  # (name, Tensor) pairs
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    @classmethod
    def from_config(cls, params, cfg: TrainConfig) -> "AdamW":
        return cls(params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                   beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)

    def step(self, lr: float = None) -> None:
        if lr is None:
            lr = self.lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state_bytes(self) -> int:
        return 16 * sum(p.size for _, p in self.params)


def cosine_lr(step: int, total_steps: int, warmup_steps: int,
              base_lr: float, min_lr: float = 0.0) -> float:
    """Linear warmup from zero, then cosine decay to ``min_lr``."""
    if total_steps < 1:
        raise ConfigError("total_steps must be >= 1")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + np.cos(np.pi * progress))


# --------------------------------------------------------------- batching

def clouds_to_arrays(clouds, bb_cfg: bb.BackboneConfig, aug_policy: str = "none",
                     rng: Rng = None):
    """Patchify a list of clouds -> (groups (B,N,k,3), centers (B,N,3))."""
    gs, cs = [], []
    for i, cloud in enumerate(clouds):
        pts = cloud.points
        if aug_policy != "none":
            pts = augment(pts, aug_policy, rng.split(i))
        g, c = patchify(pts, bb_cfg.patches, bb_cfg.patch_size)
        gs.append(g)
        cs.append(c)
    return np.stack(gs), np.stack(cs)


def _check_finite(model: Model, loss_val: float, step: int) -> None:
    if np.isfinite(loss_val):
        return
    for name, t in model.store.items():
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"non-finite values in parameter {name!r} at step {step}")
    raise NumericError(f"non-finite loss {loss_val!r} at step {step}")


def evaluate(model: Model, dataset: Dataset, batch_size: int = 32,
             smoothing: float = 0.0):
    """(mean loss, accuracy) over a dataset without augmentation."""
    losses, hits = [], 0
    with T.no_grad():
        for lo in range(0, len(dataset), batch_size):
            clouds = dataset.clouds[lo:lo + batch_size]
            labels = dataset.labels[lo:lo + batch_size]
            groups, centers = clouds_to_arrays(clouds, model.bb_cfg)
            logits = model.forward(groups, centers)
            losses.append(cross_entropy(logits, labels, smoothing).item() * len(clouds))
            hits += int((np.argmax(logits.data, axis=1) == labels).sum())
    return sum(losses) / len(dataset), hits / len(dataset)


def train(model: Model, train_ds: Dataset, cfg: TrainConfig, val_ds: Dataset = None,
          report_path=None, quiet: bool = True) -> dict:
    """Optimize the tunables; returns a history dict and optionally writes
    one JSON line per epoch (plus a final summary line) to ``report_path``."""
    n = len(train_ds)
    if n == 0:
        raise ConfigError("empty training set")
    opt = AdamW.from_config(model.store.tunable_items(), cfg)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    root = Rng(cfg.seed)
    sink = open(report_path, "w", encoding="utf-8") if report_path else None
    history = {"epochs": [], "final_val_acc": None, "final_train_acc": None}
    step = 0
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            er = root.split(epoch)
            perm = er.split(0).permutation(n)
            loss_sum, hit_sum = 0.0, 0
            lr = opt.lr
            for b, lo in enumerate(range(0, n, cfg.batch_size)):
                idx = perm[lo:lo + cfg.batch_size]
                clouds = [train_ds.clouds[i] for i in idx]
                labels = train_ds.labels[idx]
                groups, centers = clouds_to_arrays(
                    clouds, model.bb_cfg, cfg.augment, er.split(1 + b))
                logits = model.forward(groups, centers)
                loss = cross_entropy(logits, labels, cfg.label_smoothing)
                _check_finite(model, loss.item(), step)
                loss.backward()
                lr = cosine_lr(step, total_steps, warmup_steps, cfg.lr, cfg.min_lr)
                opt.step(lr)
                opt.zero_grad()
                loss_sum += loss.item() * len(idx)
                hit_sum += int((np.argmax(logits.data, axis=1) == labels).sum())
                step += 1
            entry = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": loss_sum / n,
                "train_acc": hit_sum / n,
                "seconds": round(time.perf_counter() - t0, 3),
            }
            last = epoch == cfg.epochs - 1
            if val_ds is not None and (last or (epoch + 1) % cfg.eval_every == 0):
                _, entry["val_acc"] = evaluate(model, val_ds, cfg.batch_size)
            history["epochs"].append(entry)
            if sink:
                sink.write(json.dumps(entry) + "\n")
                sink.flush()
            if not quiet:
                print(json.dumps(entry))
        history["final_train_acc"] = history["epochs"][-1]["train_acc"]
        if val_ds is not None:
            history["final_val_acc"] = history["epochs"][-1]["val_acc"]
        if sink:
            summary = {"summary": True,
                       "tunable": model.store.n_tunable(),
                       "total": model.store.n_params(),
                       "final_val_acc": history["final_val_acc"],
                       "final_train_acc": history["final_train_acc"]}
            sink.write(json.dumps(summary) + "\n")
    finally:
        if sink:
            sink.close()
    return history


# ------------------------------------------------------------ checkpoints

CKPT_MAGIC = b"PETL"
CKPT_VERSION = 1


def save_checkpoint(path, store: bb.ParameterStore, config_hash: bytes = b"",
                    delta: bool = False) -> int:
    """Write tensors (all, or tunables only when ``delta``); returns bytes written."""
    entries = store.tunable_items() if delta else list(store.items())
    digest = config_hash[:32].ljust(32, b"\0")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<HB", CKPT_VERSION, 1 if delta else 0))
        f.write(digest)
        f.write(struct.pack("<I", len(entries)))
        for name, t in entries:
            nb = name.encode("utf-8")
            arr = np.ascontiguousarray(t.data, dtype="<f8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            if arr.ndim:
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
        size = f.tell()
    return size


def read_checkpoint(path):
    """-> (mode, config_hash, {name: array}) with strict container validation."""
    blob = open(path, "rb").read()
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    version, mode = struct.unpack_from("<HB", blob, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if mode not in (0, 1):
        raise FormatError(f"{path}: bad checkpoint mode {mode}")
    digest = blob[7:39]
    (count,) = struct.unpack_from("<I", blob, 39)
    off = 43
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        nbytes = 8 * int(np.prod(shape, dtype=np.int64)) if rank else 8
        arr = np.frombuffer(blob[off:off + nbytes], dtype="<f8").reshape(shape)
        off += nbytes
        out[name] = arr.astype(np.float64)
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes")
    return ("delta" if mode else "full"), digest, out


def load_checkpoint(path, store: bb.ParameterStore, expect_hash: bytes = None) -> int:
    """Restore every tensor recorded in the file; names must exist, shapes match."""
    _, digest, arrays = read_checkpoint(path)
    if expect_hash is not None and digest != expect_hash[:32].ljust(32, b"\0"):
        raise FormatError(f"{path}: config hash mismatch")
    for name, arr in arrays.items():
        if name not in store:
            raise FormatError(f"{path}: checkpoint names unknown parameter {name!r}")
        store.load_array(name, arr)
    return len(arrays)


def load_backbone(path, store: bb.ParameterStore) -> int:
    """Copy only the shared backbone tensors from a (typically full) checkpoint."""
    _, _, arrays = read_checkpoint(path)
    n = 0
    for name, arr in arrays.items():
        if bb.is_backbone_param(name) and name in store:
            store.load_array(name, arr)
            n += 1
    if n == 0:
        raise FormatError(f"{path}: no backbone tensors found")
    return n


# --------------------------------------------------------------- few-shot

def run_fewshot(build_model, dataset: Dataset, n_way: int, m_shot: int,
                episodes: int, cfg: TrainConfig, seed: int = 0) -> dict:
    """Episodic evaluation: fresh model per episode, fit on the support set,
    score on the query set.  ``build_model`` must return a ready Model."""
    rng = Rng(seed)
    accs = []
    for e in range(episodes):
        ep = sample_episode(dataset, n_way, m_shot, rng.split(e))
        support = [replace(c, label=int(l)) for c, l in zip(ep.support, ep.support_labels)]
        query = [replace(c, label=int(l)) for c, l in zip(ep.query, ep.query_labels)]
        model = build_model()
        train(model, Dataset(support), cfg)
        _, acc = evaluate(model, Dataset(query), cfg.batch_size)
        accs.append(acc)
    arr = np.array(accs)
    return {"episodes": accs, "mean": float(arr.mean()), "std": float(arr.std())}
