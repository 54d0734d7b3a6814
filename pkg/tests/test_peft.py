import numpy as np
import pytest

from conftest import TINY, random_batch, randomize
from dptab.data import synth_generate, synth_schema
from dptab.dp import DpConfig, dp_sgd_step
from dptab.errors import ConfigError, ContractViolation
from dptab.model import ModelConfig, accuracy, count_parameters, init_model
from dptab.peft import (PeftConfig, adapter_count, apply_adapter, apply_lora, apply_peft,
                        freeze_backbone, lora_count, merge_lora, unit_count)

ACS = ModelConfig(vocab_sizes=synth_schema().vocab_sizes, n_continuous=2)


@pytest.fixture(scope="module")
def acs_model():
    return init_model(ACS, 0)


@pytest.mark.parametrize("variant,expected", [
    ("shallow", 2072), ("deep", 4408), ("adapter", 1424), ("lora", 1280),
])
def test_trainable_counts_at_reference_shape(acs_model, variant, expected):
    model = apply_peft(acs_model.copy(), PeftConfig(variant=variant))
    assert count_parameters(model)[1] == expected


def test_closed_forms_agree_with_counts(acs_model):
    assert lora_count(1, 32, 128, 4) == 1280
    assert adapter_count(4, 32, 4) == 1424
    assert unit_count(8, 258, 72, 5, deep=False) == 2072
    assert unit_count(8, 258, 72, 5, deep=True) == 4408
    for r in (1, 2, 4):
        m = apply_peft(acs_model.copy(), PeftConfig(variant="lora", lora_rank=r))
        assert count_parameters(m)[1] == lora_count(r, 32, 128, 4)


def test_zero_shot_has_nothing_trainable(acs_model):
    model = apply_peft(acs_model.copy(), PeftConfig(variant="zero_shot"))
    assert count_parameters(model)[1] == 0


def test_freeze_is_idempotent(tiny_model):
    freeze_backbone(tiny_model)
    once = count_parameters(tiny_model)
    freeze_backbone(tiny_model)
    assert count_parameters(tiny_model) == once == (once[0], 0)


def test_lora_starts_at_the_frozen_function(tiny_model):
    batch = random_batch(TINY, 10)
    before = tiny_model.logits(batch)
    model = apply_lora(freeze_backbone(tiny_model.copy()), PeftConfig(variant="lora", lora_rank=2))
    for k, p in model.params.items():
        if k.endswith(".B"):
            assert not p.data.any()
    assert model.logits(batch).tobytes() == before.tobytes()


def test_lora_merge_matches_unmerged_forward():
    model = apply_lora(freeze_backbone(init_model(TINY, 1)), PeftConfig(variant="lora", lora_rank=2))
    rng = np.random.default_rng(0)
    for k, p in model.params.items():
        if ".lora" in k:
            p.data = rng.normal(0, 0.3, p.data.shape).astype(np.float32)
    batch = random_batch(TINY, 16, seed=2)
    before = model.logits(batch)
    merged = merge_lora(model.copy())
    assert not any(".lora" in k for k in merged.params)
    np.testing.assert_allclose(merged.logits(batch), before, atol=1e-5)


def test_double_merge_rejected():
    model = apply_lora(freeze_backbone(init_model(TINY, 1)), PeftConfig(variant="lora"))
    merge_lora(model)
    with pytest.raises(ContractViolation):
        merge_lora(model)


def test_adapter_is_near_identity(tiny_model):
    batch = random_batch(TINY, 10)
    before = tiny_model.logits(batch)
    model = apply_adapter(freeze_backbone(tiny_model.copy()), PeftConfig(variant="adapter", adapter_bottleneck=2))
    assert np.max(np.abs(model.logits(batch) - before)) < 1e-2


def test_peft_needs_frozen_backbone(tiny_model):
    with pytest.raises(ContractViolation, match="frozen"):
        apply_lora(tiny_model, PeftConfig(variant="lora"))


@pytest.mark.parametrize("kwargs", [
    {"variant": "prefix"}, {"lora_rank": 0}, {"adapter_bottleneck": 0}, {"tuned_units": 0},
])
def test_bad_config_rejected(kwargs):
    with pytest.raises(ConfigError):
        PeftConfig(**kwargs)


def test_oversized_modules_rejected(tiny_model):
    with pytest.raises(ConfigError):
        apply_peft(tiny_model.copy(), PeftConfig(variant="lora", lora_rank=9))
    with pytest.raises(ConfigError):
        apply_peft(tiny_model.copy(), PeftConfig(variant="deep", tuned_units=9))


@pytest.mark.parametrize("variant", ["lora", "adapter", "deep", "shallow"])
def test_frozen_entries_unchanged_by_training(variant):
    model = apply_peft(randomize(init_model(TINY, 4), seed=1, scale=0.1),
                       PeftConfig(variant=variant, tuned_units=3))
    snapshot = {k: p.data.copy() for k, p in model.params.items()}
    cfg = DpConfig(noise_multiplier=1.0, clip_norm=1.0, learning_rate=0.5, batch_size=8)
    for step in range(3):
        dp_sgd_step(model, random_batch(TINY, 8, seed=step), cfg, step)
    moved = False
    for k, p in model.params.items():
        frozen = np.ones(p.data.shape, bool) if not p.trainable else (
            np.zeros(p.data.shape, bool) if p.mask is None else ~p.mask)
        assert p.data[frozen].tobytes() == snapshot[k][frozen].tobytes(), k
        moved |= not np.array_equal(p.data, snapshot[k])
    assert moved


def test_adapter_keeps_zero_shot_accuracy():
    ds = synth_generate(2000, 1.0, seed=0)
    base = init_model(ModelConfig(vocab_sizes=ds.schema.vocab_sizes, n_continuous=2), 1)
    before = accuracy(base, ds.as_batch())
    after = accuracy(apply_peft(base.copy(), PeftConfig(variant="adapter")), ds.as_batch())
    assert abs(after - before) <= 0.005
