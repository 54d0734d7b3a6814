"""Parameter-efficient fine-tuning: freezing, LoRA, Adapter, unit-level tuning."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ContractViolation
from .model import TabTransformer

VARIANTS = ("full", "scratch", "lora", "adapter", "deep", "shallow", "zero_shot")
PEFT_VARIANTS = ("lora", "adapter", "deep", "shallow")


@dataclass
class PeftConfig:
    variant: str = "adapter"
    lora_rank: int = 1
    lora_scale: float | None = None
    adapter_bottleneck: int = 4
    tuned_units: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown PEFT variant '{self.variant}', expected one of {VARIANTS}")
        if self.lora_scale is None:
            self.lora_scale = float(self.lora_rank)
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be positive")
        if self.adapter_bottleneck < 1:
            raise ConfigError("adapter_bottleneck must be positive")
        if self.tuned_units < 1:
            raise ConfigError("tuned_units must be positive")

    def to_dict(self):
        return asdict(self)


def freeze_backbone(model: TabTransformer) -> TabTransformer:
    for p in model.params.values():
        p.trainable = False
        p.mask = None
    return model


def _require_frozen(model, what):
    if any(p.trainable for p in model.params.values()):
        raise ContractViolation(f"{what} expects a frozen backbone; call freeze_backbone first")


def apply_lora(model: TabTransformer, cfg: PeftConfig) -> TabTransformer:
    """Attach rank-``r`` factors to both feed-forward matrices of every block.

    ``A`` (r x in) starts uniform, ``B`` (out x r) starts at zero, so the
    augmented model initially computes exactly what the frozen one did.
    """
    _require_frozen(model, "apply_lora")
    mc = model.config
    r = cfg.lora_rank
    if r > min(mc.embed_dim, mc.ffn_hidden):
        raise ConfigError(f"lora_rank {r} exceeds min(embed_dim, ffn_hidden)")
    if "lora_rank" in model.peft:
        raise ContractViolation("LoRA already applied")
    rng = np.random.default_rng([cfg.seed, 0x10A])
    shapes = {1: (mc.embed_dim, mc.ffn_hidden), 2: (mc.ffn_hidden, mc.embed_dim)}
    for i in range(mc.n_blocks):
        for which, (fan_in, fan_out) in shapes.items():
            pre = f"block.{i}.ffn.lora{which}"
            bound = 1.0 / math.sqrt(fan_in)
            model.add_param(pre + ".A", rng.uniform(-bound, bound, (r, fan_in)))
            model.add_param(pre + ".B", np.zeros((fan_out, r)))
    model.peft.update(variant="lora", lora_rank=r, lora_scale=float(cfg.lora_scale), merged=False)
    return model


def merge_lora(model: TabTransformer) -> TabTransformer:
    """Fold every LoRA product into its base weight and drop the factors."""
    if model.peft.get("merged"):
        raise ContractViolation("LoRA already merged")
    if "lora_rank" not in model.peft:
        raise ContractViolation("no LoRA parameters to merge")
    r, alpha = model.peft["lora_rank"], model.peft["lora_scale"]
    for i in range(model.config.n_blocks):
        for which in (1, 2):
            pre = f"block.{i}.ffn"
            a = model.params.pop(f"{pre}.lora{which}.A").data.astype(np.float64)
            b = model.params.pop(f"{pre}.lora{which}.B").data.astype(np.float64)
            w = model.params[f"{pre}.w{which}"]
            # stored weights are (in, out): delta = (alpha/r) * (B @ A).T
            w.data = (w.data.astype(np.float64) + (alpha / r) * (a.T @ b.T)).astype(w.data.dtype)
    model.peft["merged"] = True
    return model


def apply_adapter(model: TabTransformer, cfg: PeftConfig) -> TabTransformer:
    """Insert a bottleneck adapter after each block's feed-forward output."""
    _require_frozen(model, "apply_adapter")
    mc = model.config
    m = cfg.adapter_bottleneck
    if m > mc.embed_dim:
        raise ConfigError(f"adapter_bottleneck {m} exceeds embed_dim {mc.embed_dim}")
    rng = np.random.default_rng([cfg.seed, 0xADA])
    d = mc.embed_dim
    for i in range(mc.n_blocks):
        pre = f"block.{i}.adapter"
        model.add_param(pre + ".norm.gamma", np.ones(d))
        model.add_param(pre + ".norm.beta", np.zeros(d))
        model.add_param(pre + ".down.weight", rng.normal(0.0, 1e-3, (d, m)))
        model.add_param(pre + ".down.bias", np.zeros(m))
        model.add_param(pre + ".up.weight", rng.normal(0.0, 1e-3, (m, d)))
        model.add_param(pre + ".up.bias", np.zeros(d))
    model.peft.update(variant="adapter", adapter_bottleneck=m)
    return model


def apply_unit_tuning(model: TabTransformer, cfg: PeftConfig, depth: str) -> TabTransformer:
    """Unfreeze the first ``tuned_units`` units (incoming weights and bias) of
    the first MLP layer (``shallow``) or of every MLP hidden layer (``deep``)."""
    _require_frozen(model, "apply_unit_tuning")
    if depth not in ("deep", "shallow"):
        raise ConfigError(f"depth must be 'deep' or 'shallow', got {depth!r}")
    mc = model.config
    u = cfg.tuned_units
    if u > mc.mlp_units:
        raise ConfigError(f"tuned_units {u} exceeds MLP width {mc.mlp_units}")
    layers = range(mc.mlp_layers) if depth == "deep" else range(1)
    for k in layers:
        for suffix in ("weight", "bias"):
            p = model.params[f"mlp.{k}.{suffix}"]
            mask = np.zeros(p.data.shape, dtype=bool)
            mask[..., :u] = True
            p.trainable = True
            p.mask = mask
    model.peft.update(variant=depth, tuned_units=u, tuned_layers=list(layers))
    return model


def unfreeze_all(model: TabTransformer) -> TabTransformer:
    for p in model.params.values():
        p.trainable = True
        p.mask = None
    return model


def apply_peft(model: TabTransformer, cfg: PeftConfig) -> TabTransformer:
    """Prepare a pretrained model for the configured fine-tuning variant."""
    v = cfg.variant
    if v in ("full", "scratch"):
        model.peft.update(variant=v)
        return unfreeze_all(model)
    freeze_backbone(model)
    if v == "lora":
        return apply_lora(model, cfg)
    if v == "adapter":
        return apply_adapter(model, cfg)
    if v in ("deep", "shallow"):
        return apply_unit_tuning(model, cfg, v)
    model.peft.update(variant="zero_shot")
    return model


# closed-form trainable counts


def lora_count(rank: int, embed_dim: int, ffn_hidden: int, n_blocks: int) -> int:
    per_matrix = rank * (embed_dim + ffn_hidden)
    return n_blocks * 2 * per_matrix


def adapter_count(bottleneck: int, embed_dim: int, n_blocks: int) -> int:
    d, m = embed_dim, bottleneck
    return n_blocks * (2 * d + (d * m + m) + (m * d + d))


def unit_count(units: int, mlp_input_dim: int, mlp_units: int, mlp_layers: int, deep: bool) -> int:
    first = units * (mlp_input_dim + 1)
    if not deep:
        return first
    return first + (mlp_layers - 1) * units * (mlp_units + 1)
