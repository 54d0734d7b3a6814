import numpy as np
import pytest

from conftest import TINY, random_batch
from dptab.data import synth_schema
from dptab.errors import ConfigError, ContractViolation
from dptab.model import Batch, ModelConfig, accuracy, count_parameters, init_model, predict

ACS = ModelConfig(vocab_sizes=synth_schema().vocab_sizes, n_continuous=2)


def test_logit_shape(tiny_model):
    assert tiny_model.logits(random_batch(TINY, 5)).shape == (5,)


def test_batch_row_permutation_permutes_logits(tiny_model):
    batch = random_batch(TINY, 9, seed=1)
    perm = np.random.default_rng(0).permutation(9)
    shuffled = Batch(batch.cat[perm], batch.cont[perm], batch.y[perm])
    np.testing.assert_allclose(tiny_model.logits(shuffled), tiny_model.logits(batch)[perm],
                               rtol=0, atol=1e-12)


def test_examples_do_not_interact(tiny_model):
    a = random_batch(TINY, 6, seed=2)
    b = random_batch(TINY, 6, seed=3)
    mixed = Batch(np.concatenate([a.cat[:1], b.cat[1:]]),
                  np.concatenate([a.cont[:1], b.cont[1:]]), a.y)
    assert abs(tiny_model.logits(mixed)[0] - tiny_model.logits(a)[0]) < 1e-6


def test_attention_rows_sum_to_one(tiny_model):
    probs = tiny_model.attention_weights(random_batch(TINY, 4, seed=4))
    assert len(probs) == TINY.n_blocks
    for p in probs:
        assert p.shape == (4, TINY.n_heads, 3, 3)
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)


def test_head_count_must_divide_width():
    with pytest.raises(ConfigError, match="divisible"):
        ModelConfig(embed_dim=32, n_heads=7, vocab_sizes=(3,))


def test_same_seed_same_weights():
    a, b = init_model(TINY, 5), init_model(TINY, 5)
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
    c = init_model(TINY, 6)
    assert any(a.params[k].data.tobytes() != c.params[k].data.tobytes() for k in a.params)


def test_acs_shape_mlp_input_is_258():
    assert ACS.mlp_input_dim == 258
    model = init_model(ACS, 0)
    assert model.params["mlp.0.weight"].data.shape == (258, 72)
    assert model.params["head.weight"].data.shape == (72, 1)


def test_parameter_storage_is_float32():
    model = init_model(ACS, 0)
    assert all(p.data.dtype == np.float32 for p in model.params.values())


def test_full_count_matches_component_sum():
    total, trainable = count_parameters(init_model(ACS, 0))
    assert total == trainable
    d, t, nb = 32, 8, 4
    emb = sum(ACS.vocab_sizes) * d + t * d
    block = 4 * (d * d + d) + 2 * 2 * d + (d * 128 + 128) + (128 * d + d)
    mlp = (258 * 72 + 72) + 4 * (72 * 72 + 72) + (72 + 1)
    assert total == emb + nb * block + 2 * 2 + mlp


def test_out_of_vocabulary_index_names_column(tiny_model):
    batch = random_batch(TINY, 3)
    batch.cat[1, 2] = 3  # column 2 has vocabulary 3
    with pytest.raises(ContractViolation, match="column 2"):
        tiny_model.logits(batch)


def test_wrong_column_count_rejected(tiny_model):
    batch = random_batch(TINY, 3)
    with pytest.raises(ContractViolation):
        tiny_model.logits(Batch(batch.cat[:, :2], batch.cont, batch.y))


def test_predict_chunks_agree(tiny_model):
    batch = random_batch(TINY, 50, seed=7)
    np.testing.assert_array_equal(predict(tiny_model, batch, chunk=7), predict(tiny_model, batch))


def test_accuracy_of_constant_labels(tiny_model):
    batch = random_batch(TINY, 40, seed=8)
    preds = predict(tiny_model, batch)
    batch.y = preds.astype(np.float32)
    assert accuracy(tiny_model, batch) == 1.0


def test_unknown_index_zero_is_valid(tiny_model):
    batch = random_batch(TINY, 2)
    batch.cat[:] = 0
    assert np.all(np.isfinite(tiny_model.logits(batch)))
