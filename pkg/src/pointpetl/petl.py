"""Parameter-efficient transfer strategies for the point transformer.

Everything a strategy adds lives in the shared ParameterStore under the
``petl.`` prefix; the backbone consults a :class:`PetlRuntime` at fixed hook
points (token-feature scale/shift sites, attention projections, the parallel
adapter slot after each block, prompt injection before each layer).

Strategies
    full            tune every backbone weight plus the head
    linear_probe    head only
    adapter_serial  bottleneck adapter appended after each block, fixed scale
    external_prompt trainable prompt tokens swapped in at each layer
    lora            low-rank deltas on the attention q/v projections
    bitfit          biases and shift vectors only
    tfts_only       per-site feature scale/shift vectors only
    dapt            tfts + parallel dynamic adapter + internally generated prompts

The dynamic adapter normalizes the block output, computes a per-token scale
``S = relu(z @ w + b)``, and emits ``S * up(gelu(down(z)))`` with the up
projection zero-initialized so a fresh adapter is an exact no-op.  Its pooled,
re-scaled activation becomes one new prompt token for the next layer.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import (EMBED_HIDDEN, BackboneConfig, ParameterStore,
                       is_backbone_param)
from .errors import ConfigError
from .tensor import Rng, Tensor

STRATEGIES = ("full", "linear_probe", "adapter_serial", "external_prompt",
              "lora", "bitfit", "tfts_only", "dapt")
SCALE_MODES = ("dynamic", "dynamic_no_relu", "fixed", "learnable_scalar")
PROMPT_MODES = ("off", "internal", "external")
POOL_MODES = ("mean", "max", "topk")
TFTS_GRANULARITIES = ("off", "ln_only", "ln_linear")

LN_SITES = ("ln1", "ln2")
LINEAR_SITES = ("qkv", "attn_out", "fc1", "fc2")


def tfts_sites(granularity: str) -> tuple:
    if granularity == "off":
        return ()
    if granularity == "ln_only":
        return LN_SITES
    return LN_SITES + LINEAR_SITES


@dataclass(frozen=True)
class PETLConfig:
    strategy: str = "dapt"
    rank: int = 16
    scale_mode: str = "dynamic"
    fixed_scale: float = 0.5
    scalar_init: float = 0.5
    inserted_layers: str = "all"
    prompt_mode: str = "auto"       # auto resolves from the strategy
    prompt_count: int = 4           # external prompt tokens per layer
    prompt_pool: str = "mean"
    prompt_topk: int = 4
    prompt_accumulate: bool = True
    tfts_granularity: str = "ln_linear"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; pick one of {STRATEGIES}")
        if self.scale_mode not in SCALE_MODES:
            raise ConfigError(f"unknown scale_mode {self.scale_mode!r}")
        if self.prompt_mode not in PROMPT_MODES + ("auto",):
            raise ConfigError(f"unknown prompt_mode {self.prompt_mode!r}")
        if self.prompt_pool not in POOL_MODES:
            raise ConfigError(f"unknown prompt_pool {self.prompt_pool!r}")
        if self.tfts_granularity not in TFTS_GRANULARITIES:
            raise ConfigError(f"unknown tfts_granularity {self.tfts_granularity!r}")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if self.prompt_count < 1 or self.prompt_topk < 1:
            raise ConfigError("prompt_count and prompt_topk must be >= 1")

    def effective_prompt_mode(self) -> str:
        if self.prompt_mode != "auto":
            return self.prompt_mode
        if self.strategy == "dapt":
            return "internal"
        if self.strategy == "external_prompt":
            return "external"
        return "off"

    def layers(self, depth: int) -> tuple:
        """Resolve ``inserted_layers`` ("all", "2,4", "1-3") to 1-based indices."""
        spec = self.inserted_layers.strip()
        if spec == "all":
            return tuple(range(1, depth + 1))
        out = []
        for part in spec.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                lo, hi = part.split("-", 1)
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
        got = tuple(sorted(set(out)))
        if not got or got[0] < 1 or got[-1] > depth:
            raise ConfigError(f"inserted_layers {spec!r} out of range for depth {depth}")
        return got


# ------------------------------------------------------------- param setup

def _uniform_fan_in(rng: Rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def build_petl_params(store: ParameterStore, bb: BackboneConfig, cfg: PETLConfig,
                      rng: Rng) -> None:
    """Insert all strategy parameters for ``cfg`` into ``store``.

    New tensors keep the exact-neutrality convention: up projections, low-rank
    B factors, and shift vectors start at zero; scale vectors start at one.
    """
    d, r = bb.dim, cfg.rank
    layers = cfg.layers(bb.depth)
    mode = cfg.effective_prompt_mode()

    if cfg.strategy in ("tfts_only", "dapt"):
        sites = tfts_sites(cfg.tfts_granularity)
        for i in layers:
            for s in sites:
                width = bb.ffn_ratio * d if s == "fc1" else d
                store.add(f"petl.tfts.{i}.{s}.gamma", np.ones(width), tunable=True)
                store.add(f"petl.tfts.{i}.{s}.beta", np.zeros(width), tunable=True)
        if mode == "internal" and cfg.tfts_granularity != "off":
            store.add("petl.tfts.prompt.gamma", np.ones(d), tunable=True)
            store.add("petl.tfts.prompt.beta", np.zeros(d), tunable=True)

    if cfg.strategy == "dapt":
        for j, i in enumerate(layers):
            ar = rng.split(100 + j)
            p = f"petl.adapter.{i}."
            store.add(p + "ln.gamma", np.ones(d), tunable=True)
            store.add(p + "ln.beta", np.zeros(d), tunable=True)
            if cfg.scale_mode in ("dynamic", "dynamic_no_relu"):
                store.add(p + "scale.weight", _uniform_fan_in(ar.split(0), d, (d, 1)), tunable=True)
                store.add(p + "scale.bias", _uniform_fan_in(ar.split(1), d, (1,)), tunable=True)
            elif cfg.scale_mode == "learnable_scalar":
                store.add(p + "scale.value", np.full((1,), cfg.scalar_init), tunable=True)
            store.add(p + "down.weight", _uniform_fan_in(ar.split(2), d, (d, r)), tunable=True)
            store.add(p + "down.bias", np.zeros(r), tunable=True)
            store.add(p + "up.weight", np.zeros((r, d)), tunable=True)
            store.add(p + "up.bias", np.zeros(d), tunable=True)

    if cfg.strategy == "adapter_serial":
        for j, i in enumerate(layers):
            ar = rng.split(100 + j)
            p = f"petl.serial.{i}."
            store.add(p + "down.weight", _uniform_fan_in(ar.split(2), d, (d, r)), tunable=True)
            store.add(p + "down.bias", np.zeros(r), tunable=True)
            store.add(p + "up.weight", np.zeros((r, d)), tunable=True)
            store.add(p + "up.bias", np.zeros(d), tunable=True)

    if cfg.strategy == "lora":
        for j, i in enumerate(layers):
            ar = rng.split(100 + j)
            p = f"petl.lora.{i}."
            for which, s in (("q", 0), ("v", 1)):
                store.add(p + which + ".a", _uniform_fan_in(ar.split(s), d, (d, r)), tunable=True)
                store.add(p + which + ".b", np.zeros((r, d)), tunable=True)

    if cfg.strategy == "external_prompt" or mode == "external":
        bound = np.sqrt(3.0 / d)
        for j, i in enumerate(layers):
            pr = rng.split(200 + j)
            store.add(f"petl.prompt.{i}.tokens",
                      pr.uniform(-bound, bound, (cfg.prompt_count, d)), tunable=True)


def tunable_mask(store: ParameterStore, cfg: PETLConfig) -> list:
    """Names to tune for this strategy.  The head is always included; the
    final norm stays frozen for everything except full fine-tuning."""
    names = []
    for name in store.names():
        if name.startswith("head."):
            names.append(name)
        elif cfg.strategy == "full":
            names.append(name)
        elif name.startswith("petl."):
            names.append(name)
        elif cfg.strategy == "bitfit" and is_backbone_param(name):
            if name.startswith("final_ln."):
                continue
            if name.endswith(".bias") or name.endswith(".beta"):
                names.append(name)
    return names


# ----------------------------------------------------------------- runtime

def dynamic_scale(z: Tensor, weight: Tensor, bias: Tensor, use_relu: bool = True) -> Tensor:
    """Per-token scale from the normalized adapter input; (B, T, 1)."""
    s = T.matmul(z, weight) + bias
    return T.relu(s) if use_relu else s


def pool_tokens(x: Tensor, mode: str, k: int = 4) -> Tensor:
    """(B, T, d) -> (B, 1, d) across the full token axis."""
    if mode == "mean":
        return T.mean_pool(x, axis=1, keepdims=True)
    if mode == "max":
        return T.max_pool(x, axis=1, keepdims=True)
    if mode == "topk":
        return T.topk_pool(x, k=k, axis=1, keepdims=True)
    raise ConfigError(f"unknown pool mode {mode!r}")


class PetlRuntime:
    """Per-forward strategy state consulted by the backbone hook points."""

    def __init__(self, store: ParameterStore, bb: BackboneConfig, cfg: PETLConfig):
        self.store = store
        self.bb = bb
        self.cfg = cfg
        self.layers = frozenset(cfg.layers(bb.depth))
        self.prompt_mode = cfg.effective_prompt_mode()
        self.sites = frozenset(tfts_sites(cfg.tfts_granularity)) \
            if cfg.strategy in ("tfts_only", "dapt") else frozenset()
        self._pending_prompt = None

    def begin(self, batch: int) -> None:
        self._pending_prompt = None

    # -- prompts ---------------------------------------------------------
    def inject_prompts(self, layer: int, x: Tensor, n_prompts: int):
        if self.prompt_mode == "external" and layer in self.layers:
            B = x.shape[0]
            tok = self.store[f"petl.prompt.{layer}.tokens"]
            n = tok.shape[0]
            block = T.broadcast_to(tok.reshape(1, n, tok.shape[1]), (B, n, tok.shape[1]))
            head = T.narrow(x, 1, 0, 1)
            tail = T.narrow(x, 1, 1 + n_prompts, x.shape[1] - 1 - n_prompts)
            return T.concat([head, block, tail], axis=1), n
        if self.prompt_mode == "internal" and self._pending_prompt is not None:
            prompt = self._pending_prompt
            self._pending_prompt = None
            if self.cfg.prompt_accumulate:
                head = T.narrow(x, 1, 0, 1 + n_prompts)
                tail = T.narrow(x, 1, 1 + n_prompts, x.shape[1] - 1 - n_prompts)
                return T.concat([head, prompt, tail], axis=1), n_prompts + 1
            head = T.narrow(x, 1, 0, 1)
            tail = T.narrow(x, 1, 1 + n_prompts, x.shape[1] - 1 - n_prompts)
            return T.concat([head, prompt, tail], axis=1), 1
        return x, n_prompts

    # -- feature scale/shift ----------------------------------------------
    def tfts(self, layer: int, site: str, x: Tensor) -> Tensor:
        if site not in self.sites or layer not in self.layers:
            return x
        p = f"petl.tfts.{layer}.{site}."
        return x * self.store[p + "gamma"] + self.store[p + "beta"]

    # -- attention deltas --------------------------------------------------
    def lora_delta(self, layer: int, which: str, u: Tensor):
        if self.cfg.strategy != "lora" or layer not in self.layers:
            return None
        p = f"petl.lora.{layer}.{which}."
        return T.matmul(T.matmul(u, self.store[p + "a"]), self.store[p + "b"])

    # -- adapters -----------------------------------------------------------
    def _scale(self, layer: int, z: Tensor):
        cfg = self.cfg
        p = f"petl.adapter.{layer}.scale."
        if cfg.scale_mode == "dynamic":
            return dynamic_scale(z, self.store[p + "weight"], self.store[p + "bias"], True)
        if cfg.scale_mode == "dynamic_no_relu":
            return dynamic_scale(z, self.store[p + "weight"], self.store[p + "bias"], False)
        if cfg.scale_mode == "learnable_scalar":
            return self.store[p + "value"]
        return Tensor(np.float64(cfg.fixed_scale))

    def parallel_adapter(self, layer: int, xp: Tensor, capture=None):
        if self.cfg.strategy != "dapt" or layer not in self.layers:
            return None
        p = f"petl.adapter.{layer}."
        z = T.layer_norm(xp, self.store[p + "ln.gamma"], self.store[p + "ln.beta"])
        scale = self._scale(layer, z)
        h = T.gelu(T.matmul(z, self.store[p + "down.weight"]) + self.store[p + "down.bias"])
        residual = (T.matmul(h, self.store[p + "up.weight"]) + self.store[p + "up.bias"]) * scale
        if capture is not None:
            arr = np.array(scale.data)
            if arr.ndim < 3:
                arr = np.broadcast_to(arr, (xp.shape[0], xp.shape[1], 1)).copy()
            capture.setdefault("scale", {})[layer] = arr
            capture.setdefault("residual", {})[layer] = np.array(residual.data)
        if self.prompt_mode == "internal" and layer < self.bb.depth:
            pooled = pool_tokens(T.gelu(residual), self.cfg.prompt_pool, self.cfg.prompt_topk)
            if "petl.tfts.prompt.gamma" in self.store:
                pooled = pooled * self.store["petl.tfts.prompt.gamma"] \
                    + self.store["petl.tfts.prompt.beta"]
            self._pending_prompt = pooled
            if capture is not None:
                capture.setdefault("prompt", {})[layer] = np.array(pooled.data)
        return residual

    def serial_adapter(self, layer: int, x: Tensor) -> Tensor:
        if self.cfg.strategy != "adapter_serial" or layer not in self.layers:
            return x
        p = f"petl.serial.{layer}."
        h = T.gelu(T.matmul(x, self.store[p + "down.weight"]) + self.store[p + "down.bias"])
        residual = (T.matmul(h, self.store[p + "up.weight"]) + self.store[p + "up.bias"]) \
            * self.cfg.fixed_scale
        return x + residual


def make_runtime(store: ParameterStore, bb: BackboneConfig, cfg: PETLConfig):
    """None for strategies with no forward-path modifications."""
    if cfg.strategy in ("full", "linear_probe", "bitfit"):
        return None
    return PetlRuntime(store, bb, cfg)


def prompt_schedule(cfg: PETLConfig, depth: int) -> list:
    """Number of prompt tokens present while layer i runs, for i = 1..depth."""
    layers = set(cfg.layers(depth))
    mode = cfg.effective_prompt_mode()
    out = []
    for i in range(1, depth + 1):
        if mode == "internal":
            feeders = [j for j in layers if j < i]
            if cfg.prompt_accumulate:
                out.append(len(feeders))
            else:
                out.append(1 if feeders else 0)
        elif mode == "external":
            out.append(cfg.prompt_count if any(j <= i for j in layers) else 0)
        else:
            out.append(0)
    return out


# ------------------------------------------------------------- accounting

def adapter_params_no_bias(dim: int, rank: int) -> int:
    """LN scale+shift, scale projection, down/up projections (weights only)."""
    return 2 * dim + dim + 2 * rank * dim


def count_params(store: ParameterStore) -> dict:
    groups: dict = {}
    for name, t in store.items():
        if name.startswith("petl.adapter."):
            g = "adapter"
        elif name.startswith("petl.tfts."):
            g = "tfts"
        elif name.startswith("petl.lora."):
            g = "lora"
        elif name.startswith("petl.serial."):
            g = "serial"
        elif name.startswith("petl.prompt."):
            g = "prompt"
        elif name.startswith("head."):
            g = "head"
        else:
            g = "backbone"
        groups.setdefault(g, [0, 0])
        groups[g][0] += t.size
        if store.is_tunable(name):
            groups[g][1] += t.size
    total = sum(v[0] for v in groups.values())
    tunable = sum(v[1] for v in groups.values())
    return {
        "total": total,
        "tunable": tunable,
        "ratio": tunable / total if total else 0.0,
        "groups": {k: {"total": v[0], "tunable": v[1]} for k, v in sorted(groups.items())},
    }


@dataclass
class FlopReport:
    baseline_macs: int
    model_macs: int
    breakdown: dict = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        return self.model_macs / self.baseline_macs


def _encoder_macs(bb: BackboneConfig, seq_lens, lora_rank: int = 0) -> int:
    """Matmul multiply-accumulates for the encoder stack; one length per layer."""
    d, f = bb.dim, bb.ffn_ratio * bb.dim
    total = 0
    for t in seq_lens:
        attn_proj = 4 * t * d * d
        attn_mix = 2 * t * t * d  # scores + context, summed over heads
        ffn_mac = 2 * t * d * f
        lora = 2 * (2 * t * d * lora_rank) if lora_rank else 0
        total += attn_proj + attn_mix + ffn_mac + lora
    return total


def _embed_macs(bb: BackboneConfig, profile: str) -> int:
    n, k = bb.patches, bb.patch_size
    if profile == "mini":
        per_point = 3 * EMBED_HIDDEN + EMBED_HIDDEN * bb.dim
        pos = n * (3 * EMBED_HIDDEN + EMBED_HIDDEN * bb.dim)
        return n * k * per_point + pos
    if profile == "grouped":
        # two-stage pointwise convs with a grouped-feature concat before the
        # second stage, the shape used by full-size point-MAE style encoders
        first = n * k * (3 * 128 + 128 * 256)
        second = n * k * (512 * 512 + 512 * bb.dim)
        pos = n * (3 * 128 + 128 * bb.dim)
        return first + second + pos
    raise ConfigError(f"unknown embed profile {profile!r}")


def count_flops(bb: BackboneConfig, cfg: PETLConfig = None, n_classes: int = 8,
                head_inputs: int = 2, head_hidden: int = 0,
                embed_profile: str = "mini") -> FlopReport:
    """Forward matmul MACs for one example; baseline is the frozen backbone
    with the same head and no strategy attached."""
    d = bb.dim
    base_seq = [1 + bb.patches] * bb.depth
    hid = head_hidden if head_hidden else max(32, 2 * d // 3)
    head = head_inputs * d * hid + hid * hid + hid * n_classes
    embed = _embed_macs(bb, embed_profile)
    final = 0  # layer norms: no matmuls
    baseline = embed + _encoder_macs(bb, base_seq) + head + final

    if cfg is None or cfg.strategy in ("full", "linear_probe", "bitfit", "tfts_only"):
        seq = base_seq
        extra = 0
        lora_rank = 0
    else:
        sched = prompt_schedule(cfg, bb.depth)
        seq = [1 + bb.patches + p for p in sched]
        layers = cfg.layers(bb.depth)
        extra = 0
        lora_rank = cfg.rank if cfg.strategy == "lora" else 0
        if cfg.strategy == "dapt":
            per_tok = d * 1 + 2 * cfg.rank * d  # scale + down + up
            extra = sum(seq[i - 1] * per_tok for i in layers)
        elif cfg.strategy == "adapter_serial":
            extra = sum(seq[i - 1] * 2 * cfg.rank * d for i in layers)
    model = embed + _encoder_macs(bb, seq, lora_rank) + extra + head
    return FlopReport(baseline, model, {
        "embed": embed,
        "encoder": _encoder_macs(bb, seq, lora_rank),
        "adapters": extra if cfg is not None else 0,
        "head": head,
    })


def optimizer_state_bytes(n_tunable: int) -> int:
    """Two float64 moment buffers per tunable scalar."""
    return 16 * n_tunable


# ------------------------------------------------------------ scale stats

@dataclass
class ScaleStats:
    layers: list
    mean_scale: list
    adjusted_ratio: list  # fraction of tokens with a strictly positive scale


def scale_stats_from_capture(capture: dict) -> ScaleStats:
    layers = sorted(capture.get("scale", {}))
    means, ratios = [], []
    for i in layers:
        s = capture["scale"][i]
        means.append(float(s.mean()))
        ratios.append(float((s > 0).mean()))
    return ScaleStats(layers, means, ratios)


def scale_stats_csv(stats: ScaleStats) -> str:
    buf = io.StringIO()
    buf.write("layer,mean_scale,adjusted_ratio\n")
    for i, m, r in zip(stats.layers, stats.mean_scale, stats.adjusted_ratio):
        buf.write(f"{i},{m:.17g},{r:.17g}\n")
    return buf.getvalue()
