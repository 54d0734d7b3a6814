"""Tabular ingestion: ACSIncome-style CSVs, vocabularies, splits, synthetic data."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, DataError
from .model import Batch

log = logging.getLogger(__name__)

ACS_CATEGORICAL = ("COW", "SCHL", "MAR", "OCCP", "POBP", "RELP", "SEX", "RAC1P")
ACS_CONTINUOUS = ("AGEP", "WKHP")
ACS_LABEL = "PINCP"
ACS_THRESHOLD = 50_000.0

# Category counts used by the synthetic generator (index 0 stays reserved).
SYNTH_CARDINALITIES = (9, 24, 5, 50, 50, 18, 2, 9)

UNKNOWN = 0


@dataclass
class DatasetSchema:
    categorical: tuple[str, ...]
    continuous: tuple[str, ...]
    label: str = ACS_LABEL
    threshold: float = ACS_THRESHOLD
    vocabs: dict[str, dict[str, int]] = field(default_factory=dict)
    means: tuple[float, ...] = ()
    stds: tuple[float, ...] = ()

    @property
    def vocab_sizes(self) -> tuple[int, ...]:
        """Embedding table rows per column, including the reserved unknown row."""
        return tuple(len(self.vocabs.get(c, {})) + 1 for c in self.categorical)

    @property
    def fitted(self) -> bool:
        return bool(self.vocabs) and len(self.means) == len(self.continuous)

    def to_dict(self):
        return {
            "categorical": list(self.categorical),
            "continuous": list(self.continuous),
            "label": self.label,
            "threshold": self.threshold,
            "vocabs": self.vocabs,
            "means": list(self.means),
            "stds": list(self.stds),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            categorical=tuple(d["categorical"]),
            continuous=tuple(d["continuous"]),
            label=d.get("label", ACS_LABEL),
            threshold=float(d.get("threshold", ACS_THRESHOLD)),
            vocabs={k: {str(c): int(i) for c, i in v.items()} for k, v in d.get("vocabs", {}).items()},
            means=tuple(d.get("means", ())),
            stds=tuple(d.get("stds", ())),
        )

    @classmethod
    def acs_income(cls):
        return cls(ACS_CATEGORICAL, ACS_CONTINUOUS)


@dataclass
class TabularDataset:
    cat: np.ndarray
    cont: np.ndarray
    y: np.ndarray
    schema: DatasetSchema | None = None
    dropped: int = 0

    def __post_init__(self):
        self.cat = np.asarray(self.cat, dtype=np.int64)
        self.cont = np.asarray(self.cont, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.float32)
        n = self.cat.shape[0]
        if self.cont.shape[0] != n or self.y.shape != (n,):
            raise ContractViolation("categorical, continuous and label blocks differ in rows")

    def __len__(self):
        return int(self.cat.shape[0])

    def take(self, idx) -> Batch:
        idx = np.asarray(idx)
        return Batch(self.cat[idx], self.cont[idx], self.y[idx])

    def subset(self, idx) -> "TabularDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return TabularDataset(self.cat[idx], self.cont[idx], self.y[idx], self.schema)

    def as_batch(self) -> Batch:
        return Batch(self.cat, self.cont, self.y)

    @property
    def base_rate(self) -> float:
        return float(self.y.mean()) if len(self) else float("nan")

    def summary(self) -> dict:
        return {
            "rows": len(self),
            "vocab_sizes": list(self.schema.vocab_sizes) if self.schema else None,
            "label_base_rate": self.base_rate,
            "dropped_rows": self.dropped,
        }


# ---------------------------------------------------------------------------
# CSV ingestion


def _norm_code(raw: str) -> str:
    s = raw.strip()
    try:
        f = float(s)
    except ValueError:
        return s
    if math.isfinite(f) and f.is_integer():
        return str(int(f))
    return s


def load_column_map(path) -> dict[str, str]:
    """JSON object mapping standard column names to the headers used in a file."""
    with open(path) as fh:
        mapping = json.load(fh)
    if not isinstance(mapping, dict):
        raise DataError(f"column map {path} must be a JSON object")
    return {str(k): str(v) for k, v in mapping.items()}


def read_rows(path, schema: DatasetSchema, column_map: dict[str, str] | None = None):
    """Parse a CSV into raw code strings, floats and labels.

    Returns ``(codes, cont, labels, dropped)``; rows with a missing field or
    an unparseable number are dropped and counted.
    """
    column_map = column_map or {}
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            log.warning("%s: empty file, zero rows", path)
            return [], [], [], 0
        header = [h.strip() for h in header]
        pos = {}
        for name in schema.categorical + schema.continuous + (schema.label,):
            col = column_map.get(name, name)
            if col not in header:
                raise DataError(f"{path}: missing column '{col}'")
            pos[name] = header.index(col)
        codes, cont, labels = [], [], []
        dropped = 0
        for row in reader:
            if not row:
                continue
            try:
                vals = [row[pos[c]].strip() for c in schema.categorical]
                nums = [float(row[pos[c]]) for c in schema.continuous]
                lab = float(row[pos[schema.label]])
            except (ValueError, IndexError):
                dropped += 1
                continue
            if any(v == "" for v in vals) or not all(map(math.isfinite, nums + [lab])):
                dropped += 1
                continue
            codes.append([_norm_code(v) for v in vals])
            cont.append(nums)
            labels.append(lab > schema.threshold)
    return codes, cont, labels, dropped


def fit_schema(schema: DatasetSchema, codes, cont) -> DatasetSchema:
    """Vocabularies (sorted codes, indices from 1) and z-score statistics."""
    vocabs = {}
    for j, name in enumerate(schema.categorical):
        seen = sorted({r[j] for r in codes}, key=lambda c: (len(c), c))
        vocabs[name] = {c: i + 1 for i, c in enumerate(seen)}
    arr = np.asarray(cont, dtype=np.float64).reshape(-1, len(schema.continuous))
    if arr.shape[0]:
        means = arr.mean(axis=0)
        stds = arr.std(axis=0)
    else:
        means = np.zeros(len(schema.continuous))
        stds = np.ones(len(schema.continuous))
    stds = np.where(stds > 0, stds, 1.0)
    return DatasetSchema(schema.categorical, schema.continuous, schema.label, schema.threshold,
                         vocabs, tuple(map(float, means)), tuple(map(float, stds)))


def encode(schema: DatasetSchema, codes, cont, labels, dropped=0) -> TabularDataset:
    if not schema.fitted:
        raise ContractViolation("schema has no vocabularies/statistics yet")
    n = len(codes)
    cat = np.zeros((n, len(schema.categorical)), dtype=np.int64)
    for j, name in enumerate(schema.categorical):
        vocab = schema.vocabs[name]
        cat[:, j] = [vocab.get(r[j], UNKNOWN) for r in codes]
    c = np.asarray(cont, dtype=np.float64).reshape(n, len(schema.continuous))
    c = (c - np.asarray(schema.means)) / np.asarray(schema.stds)
    return TabularDataset(cat, c, np.asarray(labels, dtype=np.float32), schema, dropped)


def load_csv(path, schema: DatasetSchema | None = None, column_map=None) -> TabularDataset:
    """Load a CSV. Without a fitted schema, vocabularies and statistics are
    fitted on this file (the pretraining corpus); with one, they are reused
    verbatim and unseen codes map to index 0."""
    base = schema or DatasetSchema.acs_income()
    codes, cont, labels, dropped = read_rows(path, base, column_map)
    if not base.fitted:
        base = fit_schema(base, codes, cont)
    ds = encode(base, codes, cont, labels, dropped)
    log.info("%s: %d rows loaded, %d dropped", path, len(ds), dropped)
    if len(ds) == 0:
        log.warning("%s: zero rows after ingestion", path)
    return ds


def split(dataset: TabularDataset, test_fraction: float, seed: int):
    """Seeded shuffle split; the test size is ``ceil(n * test_fraction)``."""
    if not 0 <= test_fraction <= 1:
        raise ContractViolation("test_fraction must lie in [0, 1]")
    n = len(dataset)
    n_test = math.ceil(n * test_fraction - 1e-9)
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


# ---------------------------------------------------------------------------
# synthetic shifted data


@dataclass(frozen=True)
class SynthWorld:
    """Fixed ground truth shared by every synthetic draw with the same world seed.

    ``shift`` moves category marginals toward an alternative Dirichlet draw
    and adds a perturbation to the per-category effects.
    """

    cardinalities: tuple[int, ...]
    marginals: tuple[np.ndarray, ...]
    alt_marginals: tuple[np.ndarray, ...]
    effects: tuple[np.ndarray, ...]
    effect_shift: tuple[np.ndarray, ...]
    interaction: np.ndarray
    cont_weights: np.ndarray
    cont_shift: np.ndarray
    bias: float
    temperature: float

    def logit(self, cat: np.ndarray, cont: np.ndarray, shift: float) -> np.ndarray:
        z = np.full(cat.shape[0], self.bias)
        for j, (e, de) in enumerate(zip(self.effects, self.effect_shift)):
            z += (e + shift * de)[cat[:, j] - 1]
        z += self.interaction[cat[:, 1] - 1, cat[:, 5] - 1]
        z += cont @ (self.cont_weights + shift * self.cont_shift)
        return z


def make_world(world_seed: int = 0, cardinalities=SYNTH_CARDINALITIES,
               effect_scale=1.0, shift_scale=0.7, temperature=0.5,
               base_rate=0.37) -> SynthWorld:
    rng = np.random.default_rng([world_seed, 7919])
    marg = tuple(rng.dirichlet(np.full(k, 2.0)) for k in cardinalities)
    alt = tuple(rng.dirichlet(np.full(k, 2.0)) for k in cardinalities)
    effects = tuple(rng.normal(0.0, effect_scale, k) for k in cardinalities)
    dshift = tuple(rng.normal(0.0, shift_scale, k) for k in cardinalities)
    inter = rng.normal(0.0, 0.5 * effect_scale, (cardinalities[1], cardinalities[5]))
    cw = np.array([0.8, 0.5])
    cs = np.array([-0.4, 0.3])
    world = SynthWorld(tuple(cardinalities), marg, alt, effects, dshift, inter, cw, cs, 0.0,
                       temperature)
    # intercept sets the shift-0 positive rate
    ref_cat, ref_cont = _draw_features(world, 50_000, 0.0, np.random.default_rng([world_seed, 1]))
    z = world.logit(ref_cat, ref_cont, 0.0)
    bias = -float(np.quantile(z, 1.0 - base_rate))
    return SynthWorld(tuple(cardinalities), marg, alt, effects, dshift, inter, cw, cs, bias,
                      temperature)


def _draw_features(world: SynthWorld, n, shift, rng):
    cat = np.empty((n, len(world.cardinalities)), dtype=np.int64)
    for j, k in enumerate(world.cardinalities):
        p = (1.0 - shift) * world.marginals[j] + shift * world.alt_marginals[j]
        cat[:, j] = rng.choice(k, size=n, p=p / p.sum()) + 1
    cont = rng.normal(0.0, 1.0, (n, 2))
    cont[:, 0] += 0.5 * shift
    return cat, cont


def synth_schema(cardinalities=SYNTH_CARDINALITIES) -> DatasetSchema:
    vocabs = {name: {str(c): c for c in range(1, k + 1)}
              for name, k in zip(ACS_CATEGORICAL, cardinalities)}
    return DatasetSchema(ACS_CATEGORICAL, ACS_CONTINUOUS, vocabs=vocabs,
                         means=(0.0, 0.0), stds=(1.0, 1.0))


def synth_generate(n_rows: int, shift: float, seed: int, world_seed: int = 0,
                   world: SynthWorld | None = None) -> TabularDataset:
    """Rows drawn from the synthetic world at the given shift level."""
    if not 0 <= shift <= 1:
        raise ContractViolation("shift must lie in [0, 1]")
    world = world or make_world(world_seed)
    rng = np.random.default_rng([seed, int(round(shift * 1_000_000))])
    cat, cont = _draw_features(world, n_rows, shift, rng)
    z = world.logit(cat, cont, shift)
    p = 1.0 / (1.0 + np.exp(-z / world.temperature))
    y = (rng.random(n_rows) < p).astype(np.float32)
    return TabularDataset(cat, cont, y, synth_schema(world.cardinalities))


def write_csv(dataset: TabularDataset, path):
    """Write a dataset back out in the raw ACS column layout (codes, not indices)."""
    schema = dataset.schema
    if schema is None:
        raise ContractViolation("dataset has no schema")
    inv = {name: {i: c for c, i in schema.vocabs[name].items()} for name in schema.categorical}
    means = np.asarray(schema.means) if schema.means else np.zeros(len(schema.continuous))
    stds = np.asarray(schema.stds) if schema.stds else np.ones(len(schema.continuous))
    raw_cont = dataset.cont.astype(np.float64) * stds + means
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(schema.categorical) + list(schema.continuous) + [schema.label])
        for i in range(len(dataset)):
            codes = [inv[name].get(int(dataset.cat[i, j]), "") for j, name in enumerate(schema.categorical)]
            income = schema.threshold * (2.0 if dataset.y[i] > 0.5 else 0.5)
            w.writerow(codes + [repr(float(v)) for v in raw_cont[i]] + [f"{income:.0f}"])
