"""Pre-norm point-cloud transformer.

Patches (kNN groups around farthest-point centers) are embedded by a small
shared PointNet (pointwise MLP then max-pool), positions come from an MLP on
the patch centers, and a learned CLS token is prepended.  Encoder layers are
standard pre-norm attention + FFN blocks with optional hook points consulted
between every stage so that PETL strategies can graft themselves on without
the backbone knowing any strategy details.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Rng, Tensor

EMBED_HIDDEN = 64  # width of the pointwise patch-embedding MLP


@dataclass(frozen=True)
class BackboneConfig:
    depth: int = 6
    dim: int = 96
    heads: int = 4
    ffn_ratio: int = 4
    patches: int = 32
    patch_size: int = 32

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("backbone depth must be >= 1")
        if self.dim < 2 or self.heads < 1 or self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.ffn_ratio < 1 or self.patches < 1 or self.patch_size < 1:
            raise ConfigError("ffn_ratio, patches and patch_size must be >= 1")


def desk_config() -> BackboneConfig:
    return BackboneConfig(depth=6, dim=96, heads=4, ffn_ratio=4, patches=32, patch_size=32)


def paper_scale_config() -> BackboneConfig:
    """The full-size configuration exercised only by the accountants."""
    return BackboneConfig(depth=12, dim=384, heads=6, ffn_ratio=4, patches=128, patch_size=32)


@dataclass
class TokenSequence:
    """(B, T, dim) tokens plus slot bookkeeping: [CLS | prompts | patches]."""

    tokens: Tensor
    n_prompts: int
    n_patches: int

    def __post_init__(self):
        expect = 1 + self.n_prompts + self.n_patches
        if self.tokens.shape[1] != expect:
            raise ShapeError(
                f"sequence length {self.tokens.shape[1]} != 1 + {self.n_prompts} prompts"
                f" + {self.n_patches} patches"
            )

    @property
    def cls_slot(self) -> int:
        return 0

    @property
    def prompt_slots(self) -> slice:
        return slice(1, 1 + self.n_prompts)

    @property
    def patch_slots(self) -> slice:
        return slice(1 + self.n_prompts, 1 + self.n_prompts + self.n_patches)


class ParameterStore:
    """Ordered name -> Tensor map with a one-shot tunability mask."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._tunable: dict[str, bool] = {}
        self._mask_sealed = False

    def add(self, name: str, array, tunable: bool = False) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(array, dtype=np.float64), requires_grad=tunable)
        self._params[name] = t
        self._tunable[name] = bool(tunable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def is_tunable(self, name: str) -> bool:
        return self._tunable[name]

    def set_tunable(self, names) -> None:
        """Fix the tunable mask; callable once per run, before training."""
        if self._mask_sealed:
            raise ConfigError("tunable mask is sealed for this run")
        chosen = set(names)
        missing = chosen - set(self._params)
        if missing:
            raise ConfigError(f"unknown parameters in mask: {sorted(missing)}")
        for name, t in self._params.items():
            on = name in chosen
            self._tunable[name] = on
            t.requires_grad = on
        self._mask_sealed = True

    def tunable_items(self):
        return [(n, t) for n, t in self._params.items() if self._tunable[n]]

    def tunable_names(self):
        return [n for n in self._params if self._tunable[n]]

    def n_params(self) -> int:
        return sum(t.size for t in self._params.values())

    def n_tunable(self) -> int:
        return sum(t.size for n, t in self._params.items() if self._tunable[n])

    def frozen_checksum(self) -> str:
        """sha256 over every frozen tensor, in insertion order."""
        h = hashlib.sha256()
        for name, t in self._params.items():
            if not self._tunable[name]:
                h.update(name.encode())
                h.update(t.data.tobytes())
        return h.hexdigest()

    def load_array(self, name: str, arr: np.ndarray) -> None:
        t = self._params[name]
        if t.data.shape != arr.shape:
            raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {t.data.shape}")
        t.data = np.asarray(arr, dtype=np.float64).copy()

    def state_arrays(self) -> dict:
        return {n: t.data.copy() for n, t in self._params.items()}


def _glorot(rng: Rng, fan_in: int, fan_out: int):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out))


def init_backbone(cfg: BackboneConfig, rng: Rng) -> ParameterStore:
    """Fresh store with all backbone weights (nothing tunable until masked)."""
    store = ParameterStore()
    d, hid = cfg.dim, EMBED_HIDDEN
    r = rng.split(0)
    store.add("embed.fc1.weight", _glorot(r.split(0), 3, hid))
    store.add("embed.fc1.bias", np.zeros(hid))
    store.add("embed.fc2.weight", _glorot(r.split(1), hid, d))
    store.add("embed.fc2.bias", np.zeros(d))
    store.add("pos.fc1.weight", _glorot(r.split(2), 3, hid))
    store.add("pos.fc1.bias", np.zeros(hid))
    store.add("pos.fc2.weight", _glorot(r.split(3), hid, d))
    store.add("pos.fc2.bias", np.zeros(d))
    store.add("cls.token", r.split(4).normal((1, d), scale=0.02))
    store.add("cls.pos", r.split(5).normal((1, d), scale=0.02))
    for i in range(1, cfg.depth + 1):
        b = rng.split(i)
        p = f"blocks.{i}."
        store.add(p + "ln1.gamma", np.ones(d))
        store.add(p + "ln1.beta", np.zeros(d))
        for j, name in enumerate(("q", "k", "v", "out")):
            store.add(p + f"attn.{name}.weight", _glorot(b.split(j), d, d))
            store.add(p + f"attn.{name}.bias", np.zeros(d))
        store.add(p + "ln2.gamma", np.ones(d))
        store.add(p + "ln2.beta", np.zeros(d))
        store.add(p + "ffn.fc1.weight", _glorot(b.split(4), d, cfg.ffn_ratio * d))
        store.add(p + "ffn.fc1.bias", np.zeros(cfg.ffn_ratio * d))
        store.add(p + "ffn.fc2.weight", _glorot(b.split(5), cfg.ffn_ratio * d, d))
        store.add(p + "ffn.fc2.bias", np.zeros(d))
    store.add("final_ln.gamma", np.ones(d))
    store.add("final_ln.beta", np.zeros(d))
    return store


BACKBONE_SENTINELS = ("embed.", "pos.", "cls.", "blocks.", "final_ln.")


def is_backbone_param(name: str) -> bool:
    return name.startswith(BACKBONE_SENTINELS)


# ------------------------------------------------------------------ forward

def _linear(x: Tensor, store: ParameterStore, prefix: str) -> Tensor:
    return T.matmul(x, store[prefix + ".weight"]) + store[prefix + ".bias"]


def embed_patches(store: ParameterStore, cfg: BackboneConfig,
                  groups: np.ndarray, centers: np.ndarray) -> Tensor:
    """Mini-PointNet per patch plus center positions; prepends CLS. -> (B, 1+N, d)."""
    B, N, k, _ = groups.shape
    if N != cfg.patches or k != cfg.patch_size:
        raise ShapeError(f"expected ({cfg.patches}, {cfg.patch_size}) patches, got ({N}, {k})")
    d = cfg.dim
    flat = Tensor(groups.reshape(B * N * k, 3))
    h = T.relu(_linear(flat, store, "embed.fc1"))
    feat = _linear(h, store, "embed.fc2").reshape(B * N, k, d)
    feat = T.max_pool(feat, axis=1).reshape(B, N, d)
    c = Tensor(centers.reshape(B * N, 3))
    ph = T.relu(_linear(c, store, "pos.fc1"))
    pos = _linear(ph, store, "pos.fc2").reshape(B, N, d)
    tokens = feat + pos
    cls = T.broadcast_to(store["cls.token"] + store["cls.pos"], (B, 1, d))
    return T.concat([cls, tokens], axis=1)


def _site(runtime, layer: int, site: str, x: Tensor) -> Tensor:
    return runtime.tfts(layer, site, x) if runtime is not None else x


def attention(store: ParameterStore, cfg: BackboneConfig, layer: int, x: Tensor,
              runtime=None, capture=None) -> Tensor:
    """Multi-head self-attention sub-block (normalized input -> output proj)."""
    p = f"blocks.{layer}."
    B, t, d = x.shape
    heads, dh = cfg.heads, cfg.dim // cfg.heads
    q = _linear(x, store, p + "attn.q")
    k = _linear(x, store, p + "attn.k")
    v = _linear(x, store, p + "attn.v")
    if runtime is not None:
        dq = runtime.lora_delta(layer, "q", x)
        dv = runtime.lora_delta(layer, "v", x)
        q = q if dq is None else q + dq
        v = v if dv is None else v + dv
    q = _site(runtime, layer, "qkv", q)
    k = _site(runtime, layer, "qkv", k)
    v = _site(runtime, layer, "qkv", v)

    def split(tns):
        return tns.reshape(B, t, heads, dh).swapaxes(1, 2)

    scores = T.matmul(split(q), split(k).swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    probs = T.softmax(scores, axis=-1)
    if capture is not None:
        capture.setdefault("attn", {})[layer] = np.array(probs.data)
    ctx = T.matmul(probs, split(v)).swapaxes(1, 2).reshape(B, t, d)
    out = _linear(ctx, store, p + "attn.out")
    return _site(runtime, layer, "attn_out", out)


def ffn(store: ParameterStore, cfg: BackboneConfig, layer: int, x: Tensor,
        runtime=None) -> Tensor:
    p = f"blocks.{layer}."
    h = _linear(x, store, p + "ffn.fc1")
    h = T.gelu(_site(runtime, layer, "fc1", h))
    out = _linear(h, store, p + "ffn.fc2")
    return _site(runtime, layer, "fc2", out)


def encoder_layer(store: ParameterStore, cfg: BackboneConfig, layer: int, x: Tensor,
                  runtime=None, capture=None) -> Tensor:
    p = f"blocks.{layer}."
    u = T.layer_norm(x, store[p + "ln1.gamma"], store[p + "ln1.beta"])
    u = _site(runtime, layer, "ln1", u)
    xp = x + attention(store, cfg, layer, u, runtime, capture)

    w = T.layer_norm(xp, store[p + "ln2.gamma"], store[p + "ln2.beta"])
    w = _site(runtime, layer, "ln2", w)
    out = xp + ffn(store, cfg, layer, w, runtime)
    if runtime is not None:
        residual = runtime.parallel_adapter(layer, xp, capture)
        if residual is not None:
            out = out + residual
        out = runtime.serial_adapter(layer, out)
    return out


def forward(store: ParameterStore, cfg: BackboneConfig, groups: np.ndarray,
            centers: np.ndarray, runtime=None, capture=None) -> TokenSequence:
    """Run the encoder; ``runtime`` (if any) injects prompts and adapters."""
    x = embed_patches(store, cfg, groups, centers)
    n_prompts = 0
    if runtime is not None:
        runtime.begin(x.shape[0])
    for layer in range(1, cfg.depth + 1):
        if runtime is not None:
            x, n_prompts = runtime.inject_prompts(layer, x, n_prompts)
        if capture is not None:
            capture.setdefault("seq_len", {})[layer] = x.shape[1]
        x = encoder_layer(store, cfg, layer, x, runtime, capture)
    x = T.layer_norm(x, store["final_ln.gamma"], store["final_ln.beta"])
    return TokenSequence(x, n_prompts, cfg.patches)
