"""Decoder-only transformer with a pluggable feed-forward slot per layer.

GPT-2 conventions throughout: learned absolute positions, pre-norm blocks,
GELU, tied input/output embeddings, inner FFN width 4h. The top ``l_moe``
layers swap the dense FFN for a routed expert bank when the variant asks
for one; the bottom layers stay dense in every variant.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import routing as R
from . import tensor as T
from .rng import make_rng
from .tensor import Tensor

VARIANTS = ("dense", "switch_moe", "pl_moe", "pl_moe_no_shared")

MASK_NEG = -1e9  # additive causal mask; exp underflows to exactly 0


@dataclass
class ModelConfig:
    vocab_size: int
    l_total: int = 12
    l_moe: int = 4
    hidden: int = 768
    max_seq: int = 1024
    heads: int = 12
    experts_per_layer: int = 32
    shared_experts: int = 1
    top_k: int = 2
    ffn_inner_multiplier: int = 4
    variant: str = "pl_moe"
    dropout: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.l_moe > self.l_total:
            raise ValueError("l_moe cannot exceed l_total")
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.experts_per_layer < self.shared_experts:
            raise ValueError("experts_per_layer must cover shared_experts")

    @property
    def inner(self) -> int:
        return self.ffn_inner_multiplier * self.hidden

    def is_expert_layer(self, layer: int) -> bool:
        return self.variant != "dense" and layer >= self.l_total - self.l_moe

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


def _param_specs(config: ModelConfig):
    """Ordered (name, shape, init) for every parameter."""
    h, m = config.hidden, config.inner
    specs: list[tuple[str, tuple[int, ...], str]] = [
        ("tok_emb", (config.vocab_size, h), "normal"),
        ("pos_emb", (config.max_seq, h), "normal"),
    ]
    for i in range(config.l_total):
        p = f"block{i}."
        specs += [
            (p + "ln1.gain", (h,), "ones"),
            (p + "ln1.bias", (h,), "zeros"),
            (p + "attn.wq", (h, h), "normal"),
            (p + "attn.bq", (h,), "zeros"),
            (p + "attn.wk", (h, h), "normal"),
            (p + "attn.bk", (h,), "zeros"),
            (p + "attn.wv", (h, h), "normal"),
            (p + "attn.bv", (h,), "zeros"),
            (p + "attn.wo", (h, h), "normal"),
            (p + "attn.bo", (h,), "zeros"),
            (p + "ln2.gain", (h,), "ones"),
            (p + "ln2.bias", (h,), "zeros"),
        ]
        if config.is_expert_layer(i):
            specs.append((p + "router.w", (h, config.experts_per_layer), "router"))
            for e in range(config.experts_per_layer):
                q = p + f"expert{e}."
                specs += [
                    (q + "w1", (h, m), "normal"),
                    (q + "b1", (m,), "zeros"),
                    (q + "w2", (m, h), "normal"),
                    (q + "b2", (h,), "zeros"),
                ]
        else:
            specs += [
                (p + "ffn.w1", (h, m), "normal"),
                (p + "ffn.b1", (m,), "zeros"),
                (p + "ffn.w2", (m, h), "normal"),
                (p + "ffn.b2", (h,), "zeros"),
            ]
    specs += [("ln_f.gain", (h,), "ones"), ("ln_f.bias", (h,), "zeros")]
    return specs


def init_params(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = make_rng(seed, "init")
    router_std = 0.02 / np.sqrt(config.hidden)
    params: dict[str, Tensor] = {}
    for name, shape, kind in _param_specs(config):
        if kind == "normal":
            data = rng.normal(0.0, 0.02, size=shape)
        elif kind == "router":
            data = rng.normal(0.0, router_std, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(np.float32), requires_grad=True, name=name)
    return params


def parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in _param_specs(config))


def dense_ffn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """linear(h -> m) -> gelu -> linear(m -> h) on [n, h] rows."""
    hdn = T.gelu(T.add(T.matmul(x, w1), b1))
    return T.add(T.matmul(hdn, w2), b2)


def causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), MASK_NEG, dtype=np.float32), k=1)


class Model:
    """A parameterized transformer LM plus its expert allocation."""

    def __init__(
        self,
        config: ModelConfig,
        alloc: R.ExpertAllocation | None = None,
        params: dict[str, Tensor] | None = None,
        seed: int = 0,
    ):
        if config.variant in ("pl_moe", "pl_moe_no_shared") and alloc is None:
            raise ValueError(f"variant {config.variant!r} requires an expert allocation")
        if alloc is not None and alloc.total_experts != config.experts_per_layer:
            raise ValueError("allocation and config disagree on expert count")
        self.config = config
        self.alloc = alloc
        self.params = params if params is not None else init_params(config, seed)

    def parameters(self):
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward ----------------------------------------------------------

    def _attention(self, x: Tensor, layer: int, mask: np.ndarray, train: bool, rng) -> Tensor:
        cfg = self.config
        b, t, h = x.shape
        nh, hd = cfg.heads, h // cfg.heads
        p = self.params
        pre = f"block{layer}.attn."
        flat = T.reshape(x, (b * t, h))

        def heads(w, bias):
            y = T.add(T.matmul(flat, p[pre + w]), p[pre + bias])
            y = T.reshape(y, (b, t, nh, hd))
            return T.reshape(T.transpose(y, (0, 2, 1, 3)), (b * nh, t, hd))

        q, k, v = heads("wq", "bq"), heads("wk", "bk"), heads("wv", "bv")
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(hd))
        scores = T.add(scores, Tensor(mask))
        weights = T.softmax(scores, axis=-1)
        weights = T.dropout(weights, cfg.dropout, rng, train)
        ctx = T.matmul(weights, v)  # [b*nh, t, hd]
        ctx = T.reshape(ctx, (b, nh, t, hd))
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b * t, h))
        out = T.add(T.matmul(ctx, p[pre + "wo"]), p[pre + "bo"])
        return T.reshape(out, (b, t, h))

    def _expert_fn(self, layer: int, e: int, counter: R.FlopCounter | None):
        p = self.params
        q = f"block{layer}.expert{e}."
        w1, b1, w2, b2 = p[q + "w1"], p[q + "b1"], p[q + "w2"], p[q + "b2"]
        cfg = self.config

        def fn(x: Tensor) -> Tensor:
            if counter is not None:
                counter.record(x.shape[0], cfg.hidden, cfg.inner)
            return dense_ffn(x, w1, b1, w2, b2)

        return fn

    def _ffn_slot(self, x: Tensor, layer: int, pl: str | None, trace, counter, aux_alpha: float):
        cfg = self.config
        b, t, h = x.shape
        flat = T.reshape(x, (b * t, h))
        p = self.params
        if not cfg.is_expert_layer(layer):
            if counter is not None:
                counter.record(b * t, cfg.hidden, cfg.inner)
            pre = f"block{layer}.ffn."
            out = dense_ffn(flat, p[pre + "w1"], p[pre + "b1"], p[pre + "w2"], p[pre + "b2"])
            return T.reshape(out, (b, t, h)), None

        experts = [self._expert_fn(layer, e, counter) for e in range(cfg.experts_per_layer)]
        w_r = p[f"block{layer}.router.w"]
        if cfg.variant == "switch_moe":
            out, aux = R.switch_route(
                flat, experts, w_r, trace=trace, layer=layer, pl=pl or "", aux_alpha=aux_alpha
            )
        else:
            if pl is None:
                raise ValueError("pl_moe forward needs the batch language")
            out, aux = R.pl_moe_route(
                flat,
                pl,
                self.alloc,
                experts,
                w_r,
                cfg.top_k,
                include_shared=(cfg.variant == "pl_moe"),
                trace=trace,
                layer=layer,
                aux_alpha=aux_alpha,
            )
        return T.reshape(out, (b, t, h)), aux

    def forward(
        self,
        tokens: np.ndarray,
        pl: str | None = None,
        train: bool = False,
        rng: np.random.Generator | None = None,
        trace: R.RoutingTrace | None = None,
        counter: R.FlopCounter | None = None,
        aux_alpha: float = 0.0,
    ) -> tuple[Tensor, Tensor | None]:
        """Logits [b, t, V] plus summed balance loss (None when disabled)."""
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        b, t = tokens.shape
        if t > cfg.max_seq:
            raise ValueError(f"sequence length {t} exceeds max_seq {cfg.max_seq}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError(f"token id out of range for vocab {cfg.vocab_size}")
        if train and rng is None:
            rng = make_rng(0, "fwd")

        p = self.params
        x = T.add(T.embedding_lookup(p["tok_emb"], tokens), T.embedding_lookup(p["pos_emb"], np.arange(t)))
        x = T.dropout(x, cfg.dropout, rng, train)
        mask = causal_mask(t)
        aux_total: Tensor | None = None
        for layer in range(cfg.l_total):
            pre = f"block{layer}."
            h1 = T.layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
            x = T.add(x, self._attention(h1, layer, mask, train, rng))
            h2 = T.layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
            f, aux = self._ffn_slot(h2, layer, pl, trace, counter, aux_alpha)
            f = T.dropout(f, cfg.dropout, rng, train)
            x = T.add(x, f)
            if aux is not None:
                aux_total = aux if aux_total is None else T.add(aux_total, aux)
        x = T.layer_norm(x, p["ln_f.gain"], p["ln_f.bias"])
        flat = T.reshape(x, (b * t, cfg.hidden))
        logits = T.matmul(flat, T.transpose(p["tok_emb"]))
        return T.reshape(logits, (b, t, cfg.vocab_size)), aux_total


# ---------------------------------------------------------------------------
# checkpoints: manifest.json + params.bin (little-endian float32)


def save_checkpoint(model: Model, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = []
    offset = 0
    with open(path / "params.bin", "wb") as f:
        for name, tensor in model.params.items():
            data = tensor.data.astype("<f4")
            manifest.append({"name": name, "shape": list(tensor.shape), "offset": offset})
            f.write(data.tobytes())
            offset += data.nbytes
    meta = {
        "config": model.config.to_json(),
        "alloc": None
        if model.alloc is None
        else {
            "per_pl": model.alloc.per_pl,
            "shared": model.alloc.shared,
            "total_experts": model.alloc.total_experts,
        },
        "tensors": manifest,
        "total_bytes": offset,
    }
    (path / "manifest.json").write_text(json.dumps(meta, indent=2))


def load_checkpoint(path: str | Path) -> Model:
    path = Path(path)
    meta = json.loads((path / "manifest.json").read_text())
    blob = (path / "params.bin").read_bytes()
    if len(blob) != meta["total_bytes"]:
        raise ValueError(
            f"params.bin is {len(blob)} bytes but manifest declares {meta['total_bytes']}"
        )
    config = ModelConfig.from_json(meta["config"])
    alloc = None
    if meta["alloc"] is not None:
        alloc = R.ExpertAllocation(
            per_pl=meta["alloc"]["per_pl"],
            shared=meta["alloc"]["shared"],
            total_experts=meta["alloc"]["total_experts"],
        )
    params: dict[str, Tensor] = {}
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=entry["offset"]).reshape(shape)
        params[entry["name"]] = Tensor(arr.copy(), requires_grad=True, name=entry["name"])
    return Model(config, alloc=alloc, params=params)
