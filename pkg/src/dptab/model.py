"""TabTransformer: column embeddings, post-norm transformer blocks, MLP head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractViolation

COMPUTE_DTYPE = np.float64


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    n_blocks: int = 4
    n_heads: int = 8
    ffn_hidden: int = 128
    mlp_layers: int = 5
    mlp_units: int = 72
    vocab_sizes: tuple[int, ...] = ()
    n_continuous: int = 2

    def __post_init__(self):
        object.__setattr__(self, "vocab_sizes", tuple(int(v) for v in self.vocab_sizes))
        for name in ("embed_dim", "n_blocks", "n_heads", "ffn_hidden", "mlp_layers", "mlp_units"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.embed_dim % self.n_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if not self.vocab_sizes:
            raise ConfigError("at least one categorical column is required")
        if any(v < 1 for v in self.vocab_sizes):
            raise ConfigError("vocabulary sizes must be positive")
        if self.n_continuous < 0:
            raise ConfigError("n_continuous must be >= 0")

    @property
    def n_categorical(self) -> int:
        return len(self.vocab_sizes)

    @property
    def mlp_input_dim(self) -> int:
        return self.n_categorical * self.embed_dim + self.n_continuous

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    def to_dict(self):
        d = asdict(self)
        d["vocab_sizes"] = list(self.vocab_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Parameter:
    """Named weight tensor with its trainable flag and optional element mask.

    ``mask`` restricts training to a subset of entries (unit-level tuning);
    it is only meaningful while ``trainable`` is set.
    """

    name: str
    data: np.ndarray
    trainable: bool = True
    mask: np.ndarray | None = None

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def n_trainable(self) -> int:
        if not self.trainable:
            return 0
        if self.mask is None:
            return self.size
        return int(self.mask.sum())


@dataclass
class Batch:
    cat: np.ndarray  # (B, n_categorical) int
    cont: np.ndarray  # (B, n_continuous) float32
    y: np.ndarray  # (B,) float32 in {0, 1}

    def __len__(self):
        return int(self.cat.shape[0])


class TabTransformer:
    """Parameter container plus a pure forward function over it."""

    def __init__(self, config: ModelConfig, params: dict[str, Parameter] | None = None,
                 peft: dict | None = None):
        self.config = config
        self.params: dict[str, Parameter] = params if params is not None else {}
        self.peft: dict = peft if peft is not None else {"variant": "none"}

    # -- bookkeeping -------------------------------------------------------

    def add_param(self, name, data, trainable=True):
        if name in self.params:
            raise ContractViolation(f"duplicate parameter name {name}")
        self.params[name] = Parameter(name, np.ascontiguousarray(data, dtype=np.float32), trainable)

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.params.items() if p.trainable]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def copy(self) -> "TabTransformer":
        params = {
            n: Parameter(n, p.data.copy(), p.trainable, None if p.mask is None else p.mask.copy())
            for n, p in self.params.items()
        }
        return TabTransformer(self.config, params, _deepcopy_meta(self.peft))

    # -- forward -----------------------------------------------------------

    def _resolve(self, leaves: Mapping[str, Tensor] | None) -> dict[str, Tensor]:
        # float32 storage, float64 compute
        leaves = leaves or {}
        return {
            n: leaves[n] if n in leaves
            else Tensor.param(p.data.astype(COMPUTE_DTYPE, copy=False), requires_grad=False)
            for n, p in self.params.items()
        }

    def forward_tensors(self, leaves: Mapping[str, Tensor] | None, batch: Batch) -> Tensor:
        self.check_batch(batch)
        return _forward(self.config, self._resolve(leaves), batch, self.peft)

    def logits(self, batch: Batch) -> np.ndarray:
        return self.forward_tensors(None, batch).data.copy()

    def example_losses(self, leaves: Mapping[str, Tensor], batch: Batch) -> Tensor:
        return ad.sigmoid_bce(self.forward_tensors(leaves, batch), batch.y)

    def check_batch(self, batch: Batch):
        cfg = self.config
        cat = np.asarray(batch.cat)
        if cat.ndim != 2 or cat.shape[1] != cfg.n_categorical:
            raise ContractViolation(
                f"expected {cfg.n_categorical} categorical columns, got shape {cat.shape}"
            )
        if np.asarray(batch.cont).shape != (cat.shape[0], cfg.n_continuous):
            raise ContractViolation("continuous block does not match batch/schema")
        for j, v in enumerate(cfg.vocab_sizes):
            col = cat[:, j]
            bad = np.flatnonzero((col < 0) | (col >= v))
            if bad.size:
                raise ContractViolation(
                    f"categorical column {j}: index {int(col[bad[0]])} outside vocabulary of size {v}"
                )

    def attention_weights(self, batch: Batch) -> list[np.ndarray]:
        """Per-block attention probabilities, each ``(B, heads, T, T)``."""
        self.check_batch(batch)
        probs: list[np.ndarray] = []
        _forward(self.config, self._resolve(None), batch, self.peft, attn_sink=probs)
        return probs


def _deepcopy_meta(meta):
    import copy

    return copy.deepcopy(meta)


def _linear(x, p, prefix):
    return ad.add(ad.matmul(x, p[prefix + ".weight"]), p[prefix + ".bias"])


def _ffn_matrix(x, p, prefix, which, peft):
    """One feed-forward matmul, plus the LoRA branch when present."""
    y = ad.add(ad.matmul(x, p[f"{prefix}.w{which}"]), p[f"{prefix}.b{which}"])
    a_name = f"{prefix}.lora{which}.A"
    if a_name in p:
        r = peft["lora_rank"]
        alpha = peft["lora_scale"]
        low = ad.matmul(x, p[a_name], trans_b=True)
        up = ad.matmul(low, p[f"{prefix}.lora{which}.B"], trans_b=True)
        y = ad.add(y, ad.scale(up, alpha / r))
    return y


def _forward(cfg: ModelConfig, p: Mapping[str, Tensor], batch: Batch, peft, attn_sink=None):
    cat = np.asarray(batch.cat)
    n = cat.shape[0]
    t, d, h = cfg.n_categorical, cfg.embed_dim, cfg.n_heads
    dh = cfg.head_dim

    cols = [ad.reshape(ad.gather(p[f"embed.{j}"], cat[:, j]), (n, 1, d)) for j in range(t)]
    x = ad.add(ad.concat(cols, axis=1), p["embed.column_id"])

    def heads(z):
        return ad.transpose(ad.reshape(z, (n, t, h, dh)), (0, 2, 1, 3))

    for i in range(cfg.n_blocks):
        pre = f"block.{i}"
        q = heads(_linear(x, p, f"{pre}.attn.q"))
        k = heads(_linear(x, p, f"{pre}.attn.k"))
        v = heads(_linear(x, p, f"{pre}.attn.v"))
        scores = ad.scale(ad.matmul(q, k, trans_b=True), 1.0 / math.sqrt(dh))
        attn = ad.softmax(scores, axis=-1)
        if attn_sink is not None:
            attn_sink.append(attn.data.copy())
        o = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (n, t, d))
        o = _linear(o, p, f"{pre}.attn.o")
        x = ad.layer_norm(ad.add(x, o), p[f"{pre}.norm1.gamma"], p[f"{pre}.norm1.beta"])

        f = ad.relu(_ffn_matrix(x, p, f"{pre}.ffn", 1, peft))
        f = _ffn_matrix(f, p, f"{pre}.ffn", 2, peft)
        if f"{pre}.adapter.down.weight" in p:
            z = ad.layer_norm(f, p[f"{pre}.adapter.norm.gamma"], p[f"{pre}.adapter.norm.beta"])
            z = ad.relu(_linear(z, p, f"{pre}.adapter.down"))
            z = _linear(z, p, f"{pre}.adapter.up")
            f = ad.add(f, z)
        x = ad.layer_norm(ad.add(x, f), p[f"{pre}.norm2.gamma"], p[f"{pre}.norm2.beta"])

    parts = [ad.reshape(x, (n, t * d))]
    if cfg.n_continuous:
        cont = Tensor.input(np.asarray(batch.cont, dtype=p["embed.column_id"].dtype))
        parts.append(ad.layer_norm(cont, p["cont_norm.gamma"], p["cont_norm.beta"]))
    z = ad.concat(parts, axis=1) if len(parts) > 1 else parts[0]
    for k in range(cfg.mlp_layers):
        z = ad.relu(_linear(z, p, f"mlp.{k}"))
    out = _linear(z, p, "head")
    return ad.reshape(out, (n,))


def init_model(config: ModelConfig, seed: int) -> TabTransformer:
    """Create every parameter in a fixed order from a seeded generator."""
    rng = np.random.default_rng(seed)
    m = TabTransformer(config)
    d = config.embed_dim

    def linear(name, fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        m.add_param(name + ".weight", rng.uniform(-bound, bound, (fan_in, fan_out)))
        m.add_param(name + ".bias", rng.uniform(-bound, bound, (fan_out,)))

    for j, v in enumerate(config.vocab_sizes):
        m.add_param(f"embed.{j}", rng.normal(0.0, 0.01, (v, d)))
    m.add_param("embed.column_id", rng.normal(0.0, 0.01, (config.n_categorical, d)))

    for i in range(config.n_blocks):
        pre = f"block.{i}"
        for proj in "qkvo":
            linear(f"{pre}.attn.{proj}", d, d)
        m.add_param(f"{pre}.norm1.gamma", np.ones(d))
        m.add_param(f"{pre}.norm1.beta", np.zeros(d))
        hid = config.ffn_hidden
        for which, (fi, fo) in ((1, (d, hid)), (2, (hid, d))):
            bound = 1.0 / math.sqrt(fi)
            m.add_param(f"{pre}.ffn.w{which}", rng.uniform(-bound, bound, (fi, fo)))
            m.add_param(f"{pre}.ffn.b{which}", rng.uniform(-bound, bound, (fo,)))
        m.add_param(f"{pre}.norm2.gamma", np.ones(d))
        m.add_param(f"{pre}.norm2.beta", np.zeros(d))

    if config.n_continuous:
        m.add_param("cont_norm.gamma", np.ones(config.n_continuous))
        m.add_param("cont_norm.beta", np.zeros(config.n_continuous))

    fan_in = config.mlp_input_dim
    for k in range(config.mlp_layers):
        linear(f"mlp.{k}", fan_in, config.mlp_units)
        fan_in = config.mlp_units
    linear("head", fan_in, 1)
    return m


def count_parameters(model: TabTransformer) -> tuple[int, int]:
    """Return ``(total, trainable)`` element counts."""
    total = sum(p.size for p in model.params.values())
    trainable = sum(p.n_trainable for p in model.params.values())
    return total, trainable


def predict(model: TabTransformer, batch: Batch, chunk=4096) -> np.ndarray:
    """Hard 0/1 predictions (logit thresholded at 0), evaluated in chunks."""
    out = []
    for s in range(0, len(batch), chunk):
        sub = Batch(batch.cat[s:s + chunk], batch.cont[s:s + chunk], batch.y[s:s + chunk])
        out.append(model.logits(sub) > 0)
    if not out:
        return np.zeros(0, dtype=bool)
    return np.concatenate(out)


def accuracy(model: TabTransformer, batch: Batch) -> float:
    if len(batch) == 0:
        raise ContractViolation("accuracy on an empty set")
    pred = predict(model, batch)
    return float(np.mean(pred == (batch.y > 0.5)))
