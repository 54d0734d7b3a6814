import numpy as np
import pytest

from dptab.model import Batch, ModelConfig, init_model

TINY = ModelConfig(embed_dim=8, n_blocks=1, n_heads=2, ffn_hidden=32, mlp_layers=2,
                   mlp_units=8, vocab_sizes=(4, 5, 3), n_continuous=2)


def random_batch(cfg: ModelConfig, n: int, seed: int = 0, dtype=np.float32) -> Batch:
    rng = np.random.default_rng(seed)
    cat = np.stack([rng.integers(0, v, n) for v in cfg.vocab_sizes], axis=1)
    cont = rng.normal(size=(n, cfg.n_continuous)).astype(dtype)
    y = rng.integers(0, 2, n).astype(dtype)
    return Batch(cat, cont, y)


def as_float64(model):
    for p in model.params.values():
        p.data = p.data.astype(np.float64)
    return model


def randomize(model, seed=0, scale=0.3):
    """Replace every parameter with noise so gradients are not degenerate."""
    rng = np.random.default_rng(seed)
    for p in model.params.values():
        p.data = (p.data + rng.normal(0.0, scale, p.data.shape)).astype(p.data.dtype)
    return model


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_model():
    return init_model(TINY, 0)


# -- acceptance reporting ----------------------------------------------------------

CRITERIA: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str = ""):
    """Log one acceptance criterion; the verdict lines print at the end of the run."""
    CRITERIA.append((name, bool(passed), detail))
    print(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
    return passed


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
    n_ok = sum(ok for _, ok, _ in CRITERIA)
    terminalreporter.write_line(f"{n_ok}/{len(CRITERIA)} criteria passed")


def pytest_configure(config):
    config.addinivalue_line("markers", "desk: desk-scale reproduction (about 13 minutes)")
