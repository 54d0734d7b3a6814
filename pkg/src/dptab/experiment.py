"""End-to-end pipeline: DP pretraining, PEFT DP fine-tuning, evaluation, grids."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import accountant, data, dp
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError
from .model import ModelConfig, TabTransformer, accuracy, count_parameters, init_model
from .peft import VARIANTS, PeftConfig, apply_peft

log = logging.getLogger(__name__)

PAPER_EPSILONS = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0)
OUTPUT_ENV = "DPTAB_OUTPUT"


@dataclass
class PhaseConfig:
    """Training settings for one phase. ``epsilon=None`` trains without privacy."""

    epsilon: float | None = 8.0
    epochs: int = 5
    learning_rate: float = 0.05
    clip_norm: float = 2.0
    batch_size: int = 64
    delta: float = 1e-5

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise ConfigError("epsilon must be positive (or omitted for non-private training)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class DataConfig:
    pretrain_csv: str | None = None
    finetune_csv: str | None = None
    column_map: str | None = None
    test_fraction: float = 0.2
    split_seed: int = 0
    synth_pretrain_rows: int = 20_000
    synth_finetune_rows: int = 5_000
    synth_shift: float = 1.0
    world_seed: int = 0
    data_seed: int = 0


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(vocab_sizes=(1,)))
    peft: PeftConfig = field(default_factory=PeftConfig)
    pretrain: PhaseConfig = field(default_factory=PhaseConfig)
    finetune: PhaseConfig = field(default_factory=PhaseConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seeds: tuple[int, ...] = (0, 1, 2)
    output_dir: str | None = None

    def out_path(self) -> Path:
        return Path(self.output_dir or os.environ.get(OUTPUT_ENV) or "runs")


def _build(cls, section: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc)
    top = {"model", "peft", "pretrain", "finetune", "data", "seeds", "output_dir"}
    unknown = set(doc) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    model_sec = dict(doc.get("model", {}))
    model_sec.setdefault("vocab_sizes", [1])
    return ExperimentConfig(
        model=_build(ModelConfig, model_sec, "model"),
        peft=_build(PeftConfig, doc.get("peft", {}), "peft"),
        pretrain=_build(PhaseConfig, doc.get("pretrain", {}), "pretrain"),
        finetune=_build(PhaseConfig, doc.get("finetune", {}), "finetune"),
        data=_build(DataConfig, doc.get("data", {}), "data"),
        seeds=tuple(int(s) for s in doc.get("seeds", (0, 1, 2))),
        output_dir=doc.get("output_dir"),
    )


def load_config(path) -> ExperimentConfig:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_dict(doc)


# ---------------------------------------------------------------------------
# data


@dataclass
class ExperimentData:
    pretrain: data.TabularDataset
    finetune_train: data.TabularDataset
    finetune_test: data.TabularDataset
    schema: data.DatasetSchema


def load_data(cfg: DataConfig) -> ExperimentData:
    if cfg.pretrain_csv or cfg.finetune_csv:
        if not (cfg.pretrain_csv and cfg.finetune_csv):
            raise ConfigError("both pretrain_csv and finetune_csv are required")
        cmap = data.load_column_map(cfg.column_map) if cfg.column_map else None
        pre = data.load_csv(cfg.pretrain_csv, column_map=cmap)
        ft = data.load_csv(cfg.finetune_csv, pre.schema, column_map=cmap)
    else:
        world = data.make_world(cfg.world_seed)
        pre = data.synth_generate(cfg.synth_pretrain_rows, 0.0, cfg.data_seed, world=world)
        ft = data.synth_generate(cfg.synth_finetune_rows, cfg.synth_shift, cfg.data_seed + 1,
                                 world=world)
    train, test = data.split(ft, cfg.test_fraction, cfg.split_seed)
    return ExperimentData(pre, train, test, pre.schema)


def model_config_for(cfg: ExperimentConfig, schema: data.DatasetSchema) -> ModelConfig:
    return dataclasses.replace(cfg.model, vocab_sizes=schema.vocab_sizes,
                               n_continuous=len(schema.continuous))


# ---------------------------------------------------------------------------
# phases


def _derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


def phase_dp_config(phase: PhaseConfig, n_rows: int, seed: int) -> tuple[dp.DpConfig, bool]:
    """Calibrate the noise multiplier for a phase; returns ``(config, private)``."""
    if n_rows < phase.batch_size:
        raise ConfigError(f"dataset of {n_rows} rows is smaller than one batch")
    q = phase.batch_size / n_rows
    steps = phase.epochs * dp.steps_per_epoch(n_rows, phase.batch_size)
    private = phase.epsilon is not None
    sigma = 0.0
    if private and steps > 0:
        sigma = accountant.calibrate_sigma(phase.epsilon, phase.delta, q, steps)
    cfg = dp.DpConfig(
        clip_norm=phase.clip_norm if private else dp.NO_CLIP,
        noise_multiplier=sigma,
        sampling_rate=q,
        batch_size=phase.batch_size,
        delta=phase.delta,
        learning_rate=phase.learning_rate,
        steps=steps,
        seed=seed,
    )
    return cfg, private


def run_phase(model: TabTransformer, dataset, phase: PhaseConfig, seed: int, name: str):
    """Train ``model`` in place; returns ``(loss history, ledger entry)``."""
    cfg, private = phase_dp_config(phase, len(dataset), seed)
    ledger = accountant.PrivacyLedger()
    ledger.open_phase(name, cfg.sampling_rate, cfg.noise_multiplier if private else 0.0)
    history = dp.train(model, dataset, cfg, phase.epochs, private=private)
    ledger.consume(name, cfg.steps)
    entry = ledger.to_dict(cfg.delta)[name]
    entry["target_epsilon"] = phase.epsilon
    entry["private"] = private
    return history, entry


def pretrain(cfg: ExperimentConfig, ds: ExperimentData, seed: int):
    mcfg = model_config_for(cfg, ds.schema)
    model = init_model(mcfg, _derive_seed(seed, 1))
    history, entry = run_phase(model, ds.pretrain, cfg.pretrain, _derive_seed(seed, 2), "pretrain")
    extra = {"schema": ds.schema.to_dict(), "privacy": {"pretrain": entry},
             "loss_history": {"pretrain": history}}
    return model, extra


@dataclass
class ResultRecord:
    method: str
    eps_p: float | None
    eps_f: float | None
    seed: int
    accuracy: float
    trainable: int
    total: int
    achieved_eps_p: float | None
    achieved_eps_f: float | None
    delta: float
    wall_time: float = 0.0

    def key(self) -> str:
        return record_key(self.method, self.eps_p, self.eps_f, self.seed)

    def to_dict(self):
        return dataclasses.asdict(self)


def _eps_tag(e):
    return "none" if e is None else repr(float(e))


def record_key(method, eps_p, eps_f, seed) -> str:
    return f"{method}__ep{_eps_tag(eps_p)}__ef{_eps_tag(eps_f)}__s{seed}"


def _achieved(entry):
    if not entry or not entry.get("private"):
        return None
    return float(entry["epsilon"])


def finetune(cfg: ExperimentConfig, ds: ExperimentData, pretrained: TabTransformer | None,
             pre_extra: dict | None, method: str, seed: int):
    """Fine-tune a copy of ``pretrained`` with ``method``; returns ``(model, record, extra)``."""
    if method not in VARIANTS:
        raise ConfigError(f"unknown method {method!r}")
    t0 = time.perf_counter()
    pcfg = dataclasses.replace(cfg.peft, variant=method)
    if method == "scratch":
        model = init_model(model_config_for(cfg, ds.schema), _derive_seed(seed, 3))
        pre_entry = None
    else:
        if pretrained is None:
            raise ConfigError(f"method {method!r} needs a pretrained checkpoint")
        model = pretrained.copy()
        pre_entry = (pre_extra or {}).get("privacy", {}).get("pretrain")
    apply_peft(model, pcfg)
    ft_entry = None
    history = []
    if method != "zero_shot":
        history, ft_entry = run_phase(model, ds.finetune_train, cfg.finetune,
                                      _derive_seed(seed, 4), "finetune")
    total, trainable = count_parameters(model)
    if method == "zero_shot":
        trainable = 0
    acc = accuracy(model, ds.finetune_test.as_batch())
    rec = ResultRecord(
        method=method,
        eps_p=None if method == "scratch" else (pre_entry or {}).get("target_epsilon"),
        eps_f=None if method == "zero_shot" else cfg.finetune.epsilon,
        seed=seed,
        accuracy=acc,
        trainable=trainable,
        total=total,
        achieved_eps_p=_achieved(pre_entry),
        achieved_eps_f=_achieved(ft_entry),
        delta=cfg.finetune.delta,
        wall_time=time.perf_counter() - t0,
    )
    extra = dict(pre_extra or {})
    extra["schema"] = ds.schema.to_dict()
    privacy = dict(extra.get("privacy", {}))
    if ft_entry:
        privacy["finetune"] = ft_entry
    extra["privacy"] = privacy
    hist = dict(extra.get("loss_history", {}))
    hist["finetune"] = history
    extra["loss_history"] = hist
    return model, rec, extra


def evaluate(model: TabTransformer, dataset) -> float:
    return accuracy(model, dataset.as_batch())


# ---------------------------------------------------------------------------
# grid


def _write_json_atomic(path: Path, obj):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True, indent=1))
    os.replace(tmp, path)


def grid_cells(methods, eps_p_list, eps_f_list, seeds):
    """Every ``(method, eps_p, eps_f, seed)`` cell, with the unused axis of
    ``scratch`` (no pretraining) and ``zero_shot`` (no fine-tuning) set to None."""
    cells = []
    for seed in seeds:
        for m in methods:
            if m == "scratch":
                cells += [(m, None, ef, seed) for ef in eps_f_list]
            elif m == "zero_shot":
                cells += [(m, ep, None, seed) for ep in eps_p_list]
            else:
                cells += [(m, ep, ef, seed) for ep in eps_p_list for ef in eps_f_list]
    # de-duplicate while keeping order
    return list(dict.fromkeys(cells))


def run_grid(cfg: ExperimentConfig, methods: Iterable[str], eps_p_list, eps_f_list,
             seeds=None, out_dir=None, ds: ExperimentData | None = None, cells=None,
             progress=None) -> list[ResultRecord]:
    """Run (or resume) a grid. Completed cells are skipped via their record files."""
    out = Path(out_dir) if out_dir else cfg.out_path()
    rec_dir = out / "records"
    ckpt_dir = out / "pretrain"
    rec_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    methods = list(methods)
    for m in methods:
        if m not in VARIANTS:
            raise ConfigError(f"unknown method {m!r}")
    if cells is None:
        cells = grid_cells(methods, eps_p_list, eps_f_list, seeds)
    pending = [c for c in cells if not (rec_dir / (record_key(*c) + ".json")).exists()]
    if pending and ds is None:
        ds = load_data(cfg.data)

    pre_cache: dict = {}

    def get_pretrained(eps_p, seed):
        key = (eps_p, seed)
        if key in pre_cache:
            return pre_cache[key]
        path = ckpt_dir / f"pretrain__ep{_eps_tag(eps_p)}__s{seed}.dptt"
        if path.exists():
            model, extra = load_checkpoint(path)
        else:
            pcfg = dataclasses.replace(cfg, pretrain=dataclasses.replace(cfg.pretrain, epsilon=eps_p))
            model, extra = pretrain(pcfg, ds, seed)
            save_checkpoint(model, path, extra)
        pre_cache.clear()  # keep one pretrained model in memory
        pre_cache[key] = (model, extra)
        return model, extra

    # group by pretraining so each checkpoint is built once
    order = sorted(pending, key=lambda c: (c[3], _sort_eps(c[1]), c[0], _sort_eps(c[2])))
    for i, (method, eps_p, eps_f, seed) in enumerate(order):
        # eps_f=None means non-private fine-tuning (ignored by zero_shot)
        ccfg = dataclasses.replace(cfg, finetune=dataclasses.replace(cfg.finetune, epsilon=eps_f))
        pretrained = extra = None
        if method != "scratch":
            pretrained, extra = get_pretrained(eps_p, seed)
        _, rec, _ = finetune(ccfg, ds, pretrained, extra, method, seed)
        _write_json_atomic(rec_dir / (rec.key() + ".json"), rec.to_dict())
        if progress:
            progress(i + 1, len(order), rec)
    return read_records(rec_dir, cells)


def _sort_eps(e):
    return -1.0 if e is None else float(e)


def read_records(rec_dir, cells=None) -> list[ResultRecord]:
    rec_dir = Path(rec_dir)
    if cells is None:
        files = sorted(rec_dir.glob("*.json"))
    else:
        files = [rec_dir / (record_key(*c) + ".json") for c in cells]
    out = []
    for f in files:
        d = json.loads(f.read_text())
        out.append(ResultRecord(**d))
    return sorted(out, key=lambda r: (r.method, _sort_eps(r.eps_p), _sort_eps(r.eps_f), r.seed))


def summarize(records: Iterable[ResultRecord]) -> dict:
    """``{(method, eps_p, eps_f): (mean, std, n)}`` over seeds."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r.method, r.eps_p, r.eps_f), []).append(r.accuracy)
    out = {}
    for k, accs in groups.items():
        a = np.asarray(sorted(accs), dtype=np.float64)
        std = float(a.std(ddof=1)) if a.size > 1 else 0.0
        out[k] = (float(a.mean()), std, int(a.size))
    return out


def mean_accuracy(records, method, eps_p, eps_f) -> float:
    s = summarize(records)
    if (method, eps_p, eps_f) not in s:
        raise KeyError((method, eps_p, eps_f))
    return s[(method, eps_p, eps_f)][0]
