"""Residual transformer with mixture-of-LoRA-experts sublayers.

The frozen base network (embeddings, attention/FFN weights, layer norms)
never receives gradients. Trainable state is the per-sublayer LoRA experts,
their top-k routers, and the classification head. Every forward pass
returns the full routing trace so uncertainty and balance losses can be
computed from router mass.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ContractError, DimensionError

CHECKPOINT_VERSION = 1

ADAPTED_SUBLAYERS = ("q", "k", "v", "o", "ffn")


class ConfigError(ValueError):
    """A configuration field is invalid or inconsistent."""


@dataclass
class ModelConfig:
    n_layers: int = 4
    d_model: int = 32
    n_experts: int = 8
    top_k: int = 2
    lora_rank: int = 4
    lora_alpha: float = 8.0
    vocab_size: int = 32
    seq_len: int = 16
    n_classes: int = 4
    ffn_mult: int = 2
    adapted: tuple = ADAPTED_SUBLAYERS
    pretrain_base: bool = False
    pretrain_steps: int = 200

    def __post_init__(self):
        self.adapted = tuple(self.adapted)
        for name, v in (("n_layers", self.n_layers), ("d_model", self.d_model),
                        ("n_experts", self.n_experts), ("top_k", self.top_k),
                        ("lora_rank", self.lora_rank), ("vocab_size", self.vocab_size),
                        ("seq_len", self.seq_len), ("n_classes", self.n_classes),
                        ("ffn_mult", self.ffn_mult)):
            if int(v) < 1:
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.top_k > self.n_experts:
            raise ConfigError(f"top_k {self.top_k} > n_experts {self.n_experts}")
        for s in self.adapted:
            if s not in ADAPTED_SUBLAYERS:
                raise ConfigError(f"unknown adapted sublayer {s!r}")

    def to_dict(self):
        d = asdict(self)
        d["adapted"] = list(self.adapted)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class FrozenLinear:
    """Linear map whose weight (and optional bias) never trains."""

    def __init__(self, weight, bias=None):
        self.weight = Tensor(weight, requires_grad=False)
        self.bias = None if bias is None else Tensor(bias, requires_grad=False)

    def forward(self, x):
        return ad.linear(x, self.weight, self.bias)


class TrainableLinear:
    def __init__(self, weight, bias=None):
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = None if bias is None else Tensor(bias, requires_grad=True)

    def forward(self, x):
        return ad.linear(x, self.weight, self.bias)


class LoraExpert:
    """One low-rank adapter pair over a shared frozen base weight."""

    def __init__(self, a, b, scale):
        self.A = Tensor(a, requires_grad=True)
        self.B = Tensor(b, requires_grad=True)
        self.scale = float(scale)

    @property
    def rank(self):
        return self.A.shape[0]

    def delta(self, x):
        """scale * B(A(x)) for x shaped [..., n_in]."""
        return ad.mul(ad.linear(ad.linear(x, self.A), self.B), self.scale)


class TopKRouter:
    """Linear router over experts; softmax then keep the k largest."""

    def __init__(self, weight, top_k):
        self.weight = Tensor(weight, requires_grad=True)
        self.top_k = int(top_k)
        if not 1 <= self.top_k <= self.weight.shape[0]:
            raise ConfigError(f"top_k {top_k} outside [1, {self.weight.shape[0]}]")

    @property
    def n_experts(self):
        return self.weight.shape[0]


@dataclass
class RoutingDecision:
    """Per-token router output: full softmax plus the retained top-k entries.

    Arrays are token-major: full_probs [T, K], kept_indices / kept_weights
    [T, k]. Kept weights are the raw softmax values (no renormalization).
    The private tensor handles keep the decision differentiable for the
    calibration and balance losses.
    """

    full_probs: np.ndarray
    kept_indices: np.ndarray
    kept_weights: np.ndarray
    probs_t: Tensor = field(default=None, repr=False, compare=False)
    kept_mass_t: Tensor = field(default=None, repr=False, compare=False)

    @property
    def n_tokens(self):
        return self.full_probs.shape[0]

    def kept_mass(self):
        return self.kept_weights.sum(axis=-1)


class MixLoraLayer:
    """Frozen base linear plus K LoRA experts mixed by a top-k router.

    The mixture uses the raw kept softmax weights, so the output is scaled
    by the kept mass (see the no-renormalization design note in the README).
    """

    def __init__(self, base, experts, router):
        self.base = base
        self.experts = experts
        self.router = router

    @property
    def n_experts(self):
        return len(self.experts)

    def forward(self, x, dropout_mask=None):
        """x: Tensor [T, n_in]. Returns (Tensor [T, n_out], RoutingDecision)."""
        decision = route_topk(self.router, x)
        probs = decision.probs_t
        t = x.shape[0]
        mask = np.zeros_like(probs.data)
        np.put_along_axis(mask, decision.kept_indices, 1.0, axis=1)
        masked = ad.mul(probs, mask)
        kept_mass = ad.tsum(masked, axis=1)
        decision.kept_mass_t = kept_mass

        base_out = self.base.forward(x)
        out = ad.mul(base_out, ad.reshape(kept_mass, (t, 1)))
        x_ad = x if dropout_mask is None else ad.mul(x, dropout_mask)
        for j, expert in enumerate(self.experts):
            if not mask[:, j].any():
                continue
            w_j = ad.reshape(ad.col(masked, j), (t, 1))
            out = ad.add(out, ad.mul(expert.delta(x_ad), w_j))
        return out, decision


def lora_forward(layer, expert_index, h):
    """Single expert output base(h) + scale * B(A(h)) for one hidden vector."""
    if not 0 <= expert_index < layer.n_experts:
        raise IndexError(f"expert index {expert_index} out of range ({layer.n_experts})")
    h = h if isinstance(h, Tensor) else Tensor(h)
    row = ad.reshape(h, (1, h.shape[-1])) if h.ndim == 1 else h
    out = ad.add(layer.base.forward(row), layer.experts[expert_index].delta(row))
    return ad.reshape(out, (out.shape[-1],)) if h.ndim == 1 else out


def route_topk(router, h):
    """Softmax over router logits, keeping the top-k raw values per token."""
    h = h if isinstance(h, Tensor) else Tensor(h)
    single = h.ndim == 1
    hh = ad.reshape(h, (1, h.shape[-1])) if single else h
    logits = ad.linear(hh, router.weight)
    probs = ad.softmax(logits)
    kept_idx = ad.topk_indices(probs.data, router.top_k)
    kept_w = np.take_along_axis(probs.data, kept_idx, axis=1)
    return RoutingDecision(
        full_probs=probs.data.copy(),
        kept_indices=kept_idx,
        kept_weights=kept_w,
        probs_t=probs,
    )


def mixlora_forward(layer, h, dropout_mask=None):
    """Mixture output plus the routing decision for one token or a token batch."""
    h = h if isinstance(h, Tensor) else Tensor(h)
    single = h.ndim == 1
    hh = ad.reshape(h, (1, h.shape[-1])) if single else h
    out, decision = layer.forward(hh, dropout_mask=dropout_mask)
    if single:
        out = ad.reshape(out, (out.shape[-1],))
    return out, decision


@dataclass
class TraceRecord:
    layer: int
    sublayer: str
    decision: RoutingDecision


@dataclass
class ForwardTrace:
    """All routing decisions of one forward pass plus the final logits."""

    records: list
    logits: np.ndarray
    n_layers: int
    seq_len: int
    logits_t: Tensor = field(default=None, repr=False, compare=False)


@dataclass
class BatchResult:
    """Differentiable forward output for a [B, s] token batch."""

    logits: Tensor
    records: list
    batch_size: int
    seq_len: int


class Block:
    """Pre-norm causal self-attention + feed-forward, both adapter-mixed."""

    def __init__(self, index, config, sublayers, ln1, ln2, ffn_down):
        self.index = index
        self.config = config
        self.sublayers = sublayers  # name -> MixLoraLayer or FrozenLinear
        self.ln1 = ln1  # (gain, bias) frozen tensors
        self.ln2 = ln2
        self.ffn_down = ffn_down

    def _sub(self, name, x, records, dropout_mask=None):
        layer = self.sublayers[name]
        if isinstance(layer, MixLoraLayer):
            out, decision = layer.forward(x, dropout_mask=dropout_mask)
            records.append(TraceRecord(self.index, name, decision))
            return out
        return layer.forward(x)

    def forward(self, h, records, dropout_masks=None):
        """h: Tensor [B, s, d]."""
        b, s, d = h.shape
        masks = dropout_masks or {}
        hn = ad.layer_norm(h, self.ln1[0], self.ln1[1])
        flat = ad.reshape(hn, (b * s, d))
        q = ad.reshape(self._sub("q", flat, records, masks.get("q")), (b, s, d))
        k = ad.reshape(self._sub("k", flat, records, masks.get("k")), (b, s, d))
        v = ad.reshape(self._sub("v", flat, records, masks.get("v")), (b, s, d))
        scores = ad.mul(ad.bmm(q, ad.transpose_last2(k)), 1.0 / np.sqrt(d))
        causal = np.triu(np.full((s, s), -1e30), k=1)
        attn = ad.softmax(ad.add(scores, causal))
        ctx = ad.bmm(attn, v)
        o = self._sub("o", ad.reshape(ctx, (b * s, d)), records, masks.get("o"))
        z = ad.add(h, ad.reshape(o, (b, s, d)))

        zn = ad.layer_norm(z, self.ln2[0], self.ln2[1])
        up = self._sub("ffn", ad.reshape(zn, (b * s, d)), records, masks.get("ffn"))
        down = self.ffn_down.forward(ad.relu(up))
        return ad.add(z, ad.reshape(down, (b, s, d)))


class MixLoraModel:
    def __init__(self, config, seed, embed, pos, blocks, ln_f, head):
        self.config = config
        self.seed = int(seed)
        self.embed = embed  # frozen Tensor [vocab, d]
        self.pos = pos  # frozen Tensor [s, d]
        self.blocks = blocks
        self.ln_f = ln_f
        self.head = head  # TrainableLinear d -> C

    # -- parameter bookkeeping -------------------------------------------------

    def named_parameters(self):
        params = {"embed": self.embed, "pos": self.pos,
                  "ln_f.gain": self.ln_f[0], "ln_f.bias": self.ln_f[1],
                  "head.weight": self.head.weight, "head.bias": self.head.bias}
        for i, blk in enumerate(self.blocks):
            params[f"blocks.{i}.ln1.gain"] = blk.ln1[0]
            params[f"blocks.{i}.ln1.bias"] = blk.ln1[1]
            params[f"blocks.{i}.ln2.gain"] = blk.ln2[0]
            params[f"blocks.{i}.ln2.bias"] = blk.ln2[1]
            params[f"blocks.{i}.ffn_down.weight"] = blk.ffn_down.weight
            for name, sub in blk.sublayers.items():
                prefix = f"blocks.{i}.{name}"
                if isinstance(sub, MixLoraLayer):
                    params[f"{prefix}.base.weight"] = sub.base.weight
                    params[f"{prefix}.router.weight"] = sub.router.weight
                    for j, ex in enumerate(sub.experts):
                        params[f"{prefix}.experts.{j}.A"] = ex.A
                        params[f"{prefix}.experts.{j}.B"] = ex.B
                else:
                    params[f"{prefix}.weight"] = sub.weight
        return params

    def trainable_parameters(self):
        return {n: p for n, p in self.named_parameters().items() if p.requires_grad}

    def adapter_param_count(self):
        """Trainable adapter parameter count: sum of rank*(n_in+n_out) per expert."""
        total = 0
        for blk in self.blocks:
            for sub in blk.sublayers.values():
                if isinstance(sub, MixLoraLayer):
                    for ex in sub.experts:
                        total += ex.A.data.size + ex.B.data.size
        return total

    # -- forward ---------------------------------------------------------------

    def forward_batch(self, tokens, dropout_rate=0.0, dropout_rng=None):
        """tokens: int array [B, s]. Returns a BatchResult with the live graph."""
        tokens = np.asarray(tokens, dtype=np.intp)
        if tokens.ndim != 2:
            raise DimensionError(f"expected [B, s] token batch, got shape {tokens.shape}")
        b, s = tokens.shape
        cfg = self.config
        if s > cfg.seq_len:
            raise ConfigError(f"sequence length {s} exceeds configured {cfg.seq_len}")
        h = ad.add(ad.embedding(self.embed, tokens), self.pos.data[:s])
        records = []
        for blk in self.blocks:
            masks = None
            if dropout_rate > 0.0 and dropout_rng is not None:
                masks = {name: (dropout_rng.random((b * s, cfg.d_model)) >= dropout_rate)
                         / (1.0 - dropout_rate)
                         for name in cfg.adapted}
            h = blk.forward(h, records, dropout_masks=masks)
        hn = ad.layer_norm(h, self.ln_f[0], self.ln_f[1])
        last = ad.select_axis1(hn, s - 1)
        logits = self.head.forward(last)
        return BatchResult(logits=logits, records=records, batch_size=b, seq_len=s)


def model_forward(model, tokens):
    """Forward one token sequence; returns the ForwardTrace with logits."""
    tokens = np.asarray(tokens, dtype=np.intp)
    if tokens.ndim != 1:
        raise DimensionError(f"expected a 1-D token sequence, got shape {tokens.shape}")
    result = model.forward_batch(tokens[None, :])
    return ForwardTrace(
        records=result.records,
        logits=result.logits.data[0].copy(),
        n_layers=model.config.n_layers,
        seq_len=tokens.shape[0],
        logits_t=result.logits,
    )


# -- initialization ------------------------------------------------------------


def _make_mix_layer(rng, cfg, n_in, n_out):
    base = FrozenLinear(rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_out, n_in)))
    scale = cfg.lora_alpha / cfg.lora_rank
    experts = [
        LoraExpert(
            rng.normal(0.0, np.sqrt(1.0 / n_in), size=(cfg.lora_rank, n_in)),
            np.zeros((n_out, cfg.lora_rank)),
            scale,
        )
        for _ in range(cfg.n_experts)
    ]
    router = TopKRouter(rng.normal(0.0, 0.02, size=(cfg.n_experts, n_in)), cfg.top_k)
    return MixLoraLayer(base, experts, router)


def init_model(config, seed):
    """Deterministically initialize a model from (config, seed)."""
    rng = np.random.default_rng(seed)
    cfg = config
    d = cfg.d_model
    d_ff = cfg.ffn_mult * d
    embed = Tensor(rng.normal(0.0, 1.0, size=(cfg.vocab_size, d)), requires_grad=False)
    pos = Tensor(rng.normal(0.0, 0.5, size=(cfg.seq_len, d)), requires_grad=False)

    blocks = []
    for i in range(cfg.n_layers):
        sublayers = {}
        for name in ("q", "k", "v", "o"):
            if name in cfg.adapted:
                sublayers[name] = _make_mix_layer(rng, cfg, d, d)
            else:
                sublayers[name] = FrozenLinear(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)))
        if "ffn" in cfg.adapted:
            sublayers["ffn"] = _make_mix_layer(rng, cfg, d, d_ff)
        else:
            sublayers["ffn"] = FrozenLinear(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d_ff, d)))
        ffn_down = FrozenLinear(rng.normal(0.0, 1.0 / np.sqrt(d_ff), size=(d, d_ff)))
        ln1 = (Tensor(np.ones(d)), Tensor(np.zeros(d)))
        ln2 = (Tensor(np.ones(d)), Tensor(np.zeros(d)))
        blocks.append(Block(i, cfg, sublayers, ln1, ln2, ffn_down))

    ln_f = (Tensor(np.ones(d)), Tensor(np.zeros(d)))
    head = TrainableLinear(rng.normal(0.0, 1.0 / np.sqrt(d), size=(cfg.n_classes, d)),
                           np.zeros(cfg.n_classes))
    model = MixLoraModel(cfg, seed, embed, pos, blocks, ln_f, head)
    if cfg.pretrain_base:
        _pretrain_base(model, rng)
    return model


def _pretrain_base(model, rng):
    """Briefly fit the frozen-to-be base on a generic mixture task, then freeze.

    Stand-in for a pretrained backbone: plain SGD on cross-entropy with the
    adapters untouched (B = 0 keeps them inert), so the base develops generic
    structure before freezing.
    """
    cfg = model.config
    base_params = []
    for name, p in model.named_parameters().items():
        if ".base.weight" in name or name in ("embed",) or name.endswith("ffn_down.weight") \
                or (name.endswith(".weight") and ".experts." not in name
                    and "router" not in name and "head" not in name):
            p.requires_grad = True
            base_params.append(p)
    head_params = [model.head.weight, model.head.bias]
    rule = rng.normal(size=(cfg.n_classes, cfg.vocab_size))
    lr = 1e-2
    for _ in range(cfg.pretrain_steps):
        tokens = rng.integers(0, cfg.vocab_size, size=(16, cfg.seq_len))
        bag = np.zeros((16, cfg.vocab_size))
        for i in range(16):
            np.add.at(bag[i], tokens[i], 1.0)
        labels = np.argmax(bag @ rule.T, axis=1)
        result = model.forward_batch(tokens)
        loss = ad.tmean(ad.cross_entropy_batch(result.logits, labels))
        ad.zero_grads(base_params + head_params)
        ad.backward(loss)
        for p in base_params + head_params:
            if p.grad is not None:
                p.data -= lr * p.grad
    for p in base_params:
        p.requires_grad = False
        p.grad = None
    # reset the head so fine-tuning starts from the same state as no-pretrain
    for p in head_params:
        p.grad = None


# -- checkpoint io -------------------------------------------------------------


def _encode_array(a):
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode_array(s, shape):
    raw = base64.b64decode(s.encode("ascii"))
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def save_checkpoint(model, path, step=0):
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "step": int(step),
        "params": {
            name: {"shape": list(p.data.shape), "data": _encode_array(p.data)}
            for name, p in model.named_parameters().items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')}")
    cfg = ModelConfig.from_dict(doc["config"])
    model = init_model(cfg, doc["seed"])
    params = model.named_parameters()
    for name, entry in doc["params"].items():
        if name not in params:
            raise ConfigError(f"unknown parameter {name!r} in checkpoint")
        params[name].data = _decode_array(entry["data"], entry["shape"])
    return model, int(doc["step"])
