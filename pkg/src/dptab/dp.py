"""DP-SGD: per-example clipping, seeded Gaussian noise, masked parameter updates.

Order per step: clip every example's gradient to ``clip_norm``, sum in
example-index order, add ``N(0, (clip_norm * noise_multiplier)^2 I)`` once,
divide by the batch size, take an SGD step on trainable entries only.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractViolation

log = logging.getLogger(__name__)

NO_CLIP = math.inf


@dataclass
class DpConfig:
    clip_norm: float = 2.0
    noise_multiplier: float = 1.0
    sampling_rate: float = 1.0
    batch_size: int = 64
    delta: float = 1e-5
    learning_rate: float = 0.05
    steps: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        if self.noise_multiplier < 0:
            raise ConfigError("noise_multiplier must be >= 0")
        if not 0 < self.sampling_rate <= 1:
            raise ConfigError("sampling_rate must lie in (0, 1]")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be positive and steps non-negative")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class GradientSample:
    """One example's gradient over the trainable parameters."""

    grads: dict[str, np.ndarray]
    norm: float

    @classmethod
    def from_grads(cls, grads: Mapping[str, np.ndarray]) -> "GradientSample":
        return cls(dict(grads), global_norm(grads))


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    sq = 0.0
    for g in grads.values():
        g64 = np.asarray(g, dtype=np.float64)
        sq += float(np.dot(g64.ravel(), g64.ravel()))
    return math.sqrt(sq)


def clip(sample: GradientSample, clip_norm: float) -> GradientSample:
    if not clip_norm > 0:
        raise ContractViolation("clip_norm must be positive")
    # dividing by norm / C (rather than multiplying by C / norm) keeps
    # cases such as (3, 4) -> (1.2, 1.6) exact
    shrink = max(1.0, sample.norm / clip_norm)
    if shrink == 1.0:
        return GradientSample(dict(sample.grads), sample.norm)
    grads = {
        k: (np.asarray(v, dtype=np.float64) / shrink).astype(np.asarray(v).dtype)
        for k, v in sample.grads.items()
    }
    return GradientSample(grads, sample.norm / shrink)


def clip_stacked(stacked: Mapping[str, np.ndarray], clip_norm: float, inplace=False):
    """Clip a batch of per-example gradients ``{name: (B, ...)}`` in one pass.

    Returns float64 clipped arrays and the pre-clip per-example norms. With
    ``inplace`` set, float64 inputs are scaled in place.
    """
    names = list(stacked)
    b = stacked[names[0]].shape[0]
    sq = np.zeros(b, dtype=np.float64)
    out = {}
    for k in names:
        g = np.asarray(stacked[k])
        if not (inplace and g.dtype == np.float64):
            g = g.astype(np.float64)
        out[k] = g
        flat = g.reshape(b, -1)
        sq += np.einsum("ij,ij->i", flat, flat)
    norms = np.sqrt(sq)
    if not math.isinf(clip_norm):
        shrink = np.maximum(1.0, norms / clip_norm)
        for k in names:
            out[k].reshape(b, -1)[...] /= shrink[:, None]
    return out, norms


# ---------------------------------------------------------------------------
# noise


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


def gaussian_stream(seed: int, step: int, name: str, n: int) -> np.ndarray:
    """``n`` standard normals keyed by ``(seed, step, name)``.

    A Philox counter generator supplies uniforms; pairs become normals by
    Box-Muller. Coordinate ``i`` always comes from pair ``i // 2``, so
    results do not depend on call order or worker layout.
    """
    key = [seed & (2**64 - 1), ((step & (2**32 - 1)) << 32) ^ _name_key(name)]
    gen = np.random.Generator(np.random.Philox(key=np.array(key, dtype=np.uint64)))
    pairs = (n + 1) // 2
    u = gen.random((pairs, 2))
    r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))  # 1 - u in (0, 1]
    theta = 2.0 * np.pi * u[:, 1]
    z = np.empty((pairs, 2))
    z[:, 0] = r * np.cos(theta)
    z[:, 1] = r * np.sin(theta)
    return z.ravel()[:n]


def noisy_aggregate(
    samples: Sequence[GradientSample] | Mapping[str, np.ndarray],
    cfg: DpConfig,
    step: int,
    masks: Mapping[str, np.ndarray | None] | None = None,
) -> dict[str, np.ndarray]:
    """``(sum_i g_i + N(0, C^2 sigma^2 I)) / B`` per parameter.

    Accepts a list of clipped :class:`GradientSample` or a stacked
    ``{name: (B, ...)}`` map already clipped by :func:`clip_stacked`.
    """
    if isinstance(samples, Mapping):
        stacked = {k: np.asarray(v, dtype=np.float64) for k, v in samples.items()}
    else:
        if not samples:
            raise ContractViolation("noisy_aggregate needs at least one sample")
        names = list(samples[0].grads)
        stacked = {k: np.stack([np.asarray(s.grads[k], dtype=np.float64) for s in samples])
                   for k in names}
    names = list(stacked)
    b = stacked[names[0]].shape[0]
    if b == 0:
        raise ContractViolation("noisy_aggregate needs at least one sample")
    if not math.isinf(cfg.clip_norm):
        sq = np.zeros(b)
        for k in names:
            g = stacked[k].reshape(b, -1)
            sq += np.einsum("ij,ij->i", g, g)
        worst = float(np.sqrt(sq.max()))
        if worst > cfg.clip_norm + 1e-6:
            raise ContractViolation(f"unclipped gradient with norm {worst:.6g} > {cfg.clip_norm}")
    return _sum_noise_mean(stacked, cfg, step, masks)


def _sum_noise_mean(stacked, cfg: DpConfig, step, masks):
    b = next(iter(stacked.values())).shape[0]
    # axis-0 reduction accumulates examples sequentially in index order
    return _add_noise_mean({k: g.sum(axis=0) for k, g in stacked.items()}, b, cfg, step, masks)


def _add_noise_mean(summed, b, cfg: DpConfig, step, masks):
    std = 0.0 if math.isinf(cfg.clip_norm) else cfg.clip_norm * cfg.noise_multiplier
    out = {}
    for k, total in summed.items():
        if std > 0:
            noise = gaussian_stream(cfg.seed, step, k, total.size).reshape(total.shape) * std
            mask = None if masks is None else masks.get(k)
            if mask is not None:
                noise *= mask
            total = total + noise
        out[k] = total / b
    return out


def _clipped_noisy_mean(stacked, cfg: DpConfig, step, masks):
    """Clip, sum and noise in one pass: ``sum_i f_i g_i`` with clip factors ``f_i``.

    Equivalent to :func:`clip_stacked` followed by :func:`noisy_aggregate`
    without materializing the clipped per-example arrays.
    """
    names = list(stacked)
    b = stacked[names[0]].shape[0]
    flat = {k: stacked[k].reshape(b, -1) for k in names}
    sq = np.zeros(b)
    for k in names:
        sq += np.einsum("ij,ij->i", flat[k], flat[k])
    if math.isinf(cfg.clip_norm):
        factors = np.ones(b)
    else:
        factors = 1.0 / np.maximum(1.0, np.sqrt(sq) / cfg.clip_norm)
    summed = {k: np.einsum("i,ij->j", factors, flat[k]).reshape(stacked[k].shape[1:])
              for k in names}
    return _add_noise_mean(summed, b, cfg, step, masks)


# ---------------------------------------------------------------------------
# training


def sample_batches(n_rows: int, batch_size: int, epoch_seed: int) -> list[np.ndarray]:
    """Seeded shuffle into full batches; a trailing short batch is dropped."""
    if n_rows < 1:
        raise ContractViolation("cannot sample batches from an empty dataset")
    perm = np.random.default_rng(epoch_seed).permutation(n_rows)
    n_full = n_rows // batch_size
    return [perm[i * batch_size:(i + 1) * batch_size] for i in range(n_full)]


def _trainable(model):
    names = model.trainable_names()
    if not names:
        raise ConfigError("model has no trainable parameters")
    return names


def dp_sgd_step(model, batch, cfg: DpConfig, step_index: int) -> float:
    """One DP-SGD update in place; returns the mean training loss of the batch."""
    names = _trainable(model)
    params = {k: model.params[k].data for k in names}
    masks = {k: model.params[k].mask for k in names}
    stacked, losses = ad.per_example_grads_stacked(model.example_losses, batch, params, len(batch))
    for k, m in masks.items():
        if m is not None:
            stacked[k] *= m
    update = _clipped_noisy_mean(stacked, cfg, step_index, masks)
    _apply(model, update, cfg.learning_rate)
    return float(np.mean(losses, dtype=np.float64))


def sgd_step(model, batch, learning_rate: float) -> float:
    """Plain minibatch SGD on the mean loss (non-private reference path)."""
    names = _trainable(model)
    leaves = {k: ad.Tensor.param(model.params[k].data.astype(np.float64)) for k in names}
    with ad.Tape() as tape:
        losses = model.example_losses(leaves, batch)
        loss = ad.mean_all(losses)
    grads = ad.grad(tape, loss, leaves)
    for k in names:
        m = model.params[k].mask
        if m is not None:
            grads[k] = grads[k] * m
    _apply(model, {k: g.astype(np.float64) for k, g in grads.items()}, learning_rate)
    return float(loss.data)


def _apply(model, update: Mapping[str, np.ndarray], lr: float):
    for k, u in update.items():
        p = model.params[k]
        new = p.data.astype(np.float64) - lr * u
        if p.mask is not None:
            new = np.where(p.mask, new, p.data)
        p.data = new.astype(p.data.dtype)


def train(model, dataset, cfg: DpConfig, epochs: int, private=True, log_every=0) -> list[float]:
    """Run ``epochs`` passes of (DP-)SGD; returns the per-epoch mean loss.

    Batches come from :func:`sample_batches` seeded by ``(cfg.seed, epoch)``;
    the global step counter keys the noise stream.
    """
    history = []
    step = 0
    for epoch in range(epochs):
        epoch_seed = np.random.SeedSequence([cfg.seed, epoch]).generate_state(1)[0]
        losses = []
        for idx in sample_batches(len(dataset), cfg.batch_size, int(epoch_seed)):
            batch = dataset.take(idx)
            if private:
                losses.append(dp_sgd_step(model, batch, cfg, step))
            else:
                losses.append(sgd_step(model, batch, cfg.learning_rate))
            step += 1
            if log_every and step % log_every == 0:
                log.info("step %d loss %.4f", step, losses[-1])
        history.append(float(np.mean(losses)) if losses else float("nan"))
        log.info("epoch %d mean loss %.4f", epoch, history[-1])
    return history


def steps_per_epoch(n_rows: int, batch_size: int) -> int:
    return n_rows // batch_size
