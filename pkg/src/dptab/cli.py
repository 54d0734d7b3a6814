"""Command-line entry point: ``dptab <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 infeasible
privacy budget.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import accountant, data, dp
from . import experiment as ex
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, DataError, InfeasibleBudget
from .model import count_parameters, init_model
from .peft import PEFT_VARIANTS, VARIANTS, apply_peft

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_BUDGET = 0, 2, 3, 4


def _eps_list(text: str):
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        if tok.lower() in ("none", "inf", "nonprivate"):
            out.append(None)
            continue
        try:
            out.append(float(tok))
        except ValueError:
            raise ConfigError(f"not an epsilon: {tok!r}") from None
    if not out:
        raise ConfigError("empty epsilon list")
    return out


def _int_list(text: str):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"not a list of integers: {text!r}") from None


def _config(args) -> ex.ExperimentConfig:
    cfg = ex.load_config(args.config) if getattr(args, "config", None) else ex.ExperimentConfig()
    if getattr(args, "output", None):
        cfg = dataclasses.replace(cfg, output_dir=args.output)
    return cfg


def _with_eps(cfg, eps_p="keep", eps_f="keep"):
    if eps_p != "keep":
        cfg = dataclasses.replace(cfg, pretrain=dataclasses.replace(cfg.pretrain, epsilon=eps_p))
    if eps_f != "keep":
        cfg = dataclasses.replace(cfg, finetune=dataclasses.replace(cfg.finetune, epsilon=eps_f))
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain(args):
    cfg = _config(args)
    if args.eps_p is not None:
        cfg = _with_eps(cfg, eps_p=_eps_list(args.eps_p)[0])
    ds = ex.load_data(cfg.data)
    model, extra = ex.pretrain(cfg, ds, args.seed)
    out = Path(args.checkpoint) if args.checkpoint else cfg.out_path() / f"pretrain_s{args.seed}.dptt"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out, extra)
    entry = extra["privacy"]["pretrain"]
    print(json.dumps({"checkpoint": str(out), "epsilon": entry["epsilon"],
                      "noise_multiplier": entry["noise_multiplier"]}))


def cmd_finetune(args):
    cfg = _config(args)
    if args.eps_f is not None:
        cfg = _with_eps(cfg, eps_f=_eps_list(args.eps_f)[0])
    ds = ex.load_data(cfg.data)
    pretrained = extra = None
    if args.method != "scratch":
        if not args.pretrained:
            raise ConfigError(f"--pretrained is required for method {args.method}")
        pretrained, extra = load_checkpoint(args.pretrained)
    model, rec, extra = ex.finetune(cfg, ds, pretrained, extra, args.method, args.seed)
    out = Path(args.checkpoint) if args.checkpoint else cfg.out_path() / f"{rec.key()}.dptt"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out, extra)
    d = rec.to_dict()
    d["checkpoint"] = str(out)
    print(json.dumps(d))


def cmd_evaluate(args):
    cfg = _config(args)
    model, _ = load_checkpoint(args.checkpoint)
    ds = ex.load_data(cfg.data)
    target = {"test": ds.finetune_test, "train": ds.finetune_train, "pretrain": ds.pretrain}[args.split]
    print(json.dumps({"split": args.split, "rows": len(target),
                      "accuracy": ex.evaluate(model, target)}))


def cmd_grid(args):
    cfg = _config(args)
    methods = args.methods.split(",") if args.methods else list(VARIANTS)
    eps_p = _eps_list(args.eps_p) if args.eps_p else list(ex.PAPER_EPSILONS)
    eps_f = _eps_list(args.eps_f) if args.eps_f else list(ex.PAPER_EPSILONS)
    seeds = _int_list(args.seeds) if args.seeds else list(cfg.seeds)
    out = cfg.out_path()

    def progress(i, n, rec):
        if not args.quiet:
            print(f"[{i}/{n}] {rec.key()} acc={rec.accuracy:.4f}", file=sys.stderr)

    records = ex.run_grid(cfg, methods, eps_p, eps_f, seeds, out, progress=progress)
    from .report import write_reports

    for p in write_reports(records, out / "report", figures=not args.no_figures):
        print(p)


def cmd_report(args):
    cfg = _config(args)
    out = cfg.out_path()
    records = ex.read_records(out / "records")
    if not records:
        raise DataError(f"no records under {out / 'records'}")
    from .report import write_reports

    for p in write_reports(records, out / "report", figures=not args.no_figures):
        print(p)


def cmd_calibrate(args):
    eps_list = _eps_list(args.epsilons) if args.epsilons else list(ex.PAPER_EPSILONS)
    q = args.batch_size / args.rows
    steps = args.epochs * dp.steps_per_epoch(args.rows, args.batch_size)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["target_epsilon", "delta", "sampling_rate", "steps", "noise_multiplier",
                "achieved_epsilon", "best_order"])
    for eps in eps_list:
        if eps is None:
            raise ConfigError("calibrate needs finite epsilons")
        sigma = accountant.calibrate_sigma(eps, args.delta, q, steps)
        got, order = accountant.compute_epsilon(q, sigma, steps, args.delta)
        w.writerow([eps, args.delta, repr(q), steps, f"{sigma:.6f}", f"{got:.6f}", order])


def cmd_count_params(args):
    cfg = _config(args)
    if args.vocab_sizes:
        vocab = tuple(_int_list(args.vocab_sizes))
    else:
        vocab = data.synth_schema().vocab_sizes
    mcfg = dataclasses.replace(cfg.model, vocab_sizes=vocab, n_continuous=len(data.ACS_CONTINUOUS))
    base = init_model(mcfg, 0)
    full_total, _ = count_parameters(base)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["method", "trainable", "total", "reduction_pct"])
    for method in ("full",) + PEFT_VARIANTS:
        m = base.copy()
        apply_peft(m, dataclasses.replace(cfg.peft, variant=method))
        total, trainable = count_parameters(m)
        w.writerow([method, trainable, total, f"{100.0 * (1 - trainable / full_total):.4f}"])


def cmd_synth(args):
    world = data.make_world(args.world_seed)
    ds = data.synth_generate(args.rows, args.shift, args.seed, world=world)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.write_csv(ds, out)
    print(json.dumps({"path": str(out), **ds.summary()}))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dptab", description="DP pretraining and PEFT fine-tuning "
                                "of tabular transformers.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, output=True):
        sp.add_argument("--config", help="TOML experiment config")
        if output:
            sp.add_argument("--output", help=f"output root (default: ${ex.OUTPUT_ENV} or ./runs)")

    sp = sub.add_parser("pretrain", help="DP-pretrain a model and save a checkpoint")
    common(sp)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--eps-p", help="pretraining epsilon ('none' for non-private)")
    sp.add_argument("--checkpoint", help="checkpoint path to write")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="fine-tune a pretrained checkpoint")
    common(sp)
    sp.add_argument("--pretrained", help="pretrained checkpoint")
    sp.add_argument("--method", choices=VARIANTS, default="adapter")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--eps-f", help="fine-tuning epsilon ('none' for non-private)")
    sp.add_argument("--checkpoint", help="checkpoint path to write")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("evaluate", help="accuracy of a checkpoint")
    common(sp, output=False)
    sp.add_argument("checkpoint")
    sp.add_argument("--split", choices=("test", "train", "pretrain"), default="test")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("grid", help="run (or resume) a method x eps_p x eps_f x seed grid")
    common(sp)
    sp.add_argument("--methods", help=f"comma list from {','.join(VARIANTS)}")
    sp.add_argument("--eps-p", help="comma list of pretraining budgets")
    sp.add_argument("--eps-f", help="comma list of fine-tuning budgets")
    sp.add_argument("--seeds", help="comma list of seeds")
    sp.add_argument("--no-figures", action="store_true")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_grid)

    sp = sub.add_parser("report", help="rebuild CSV reports and figures from records")
    common(sp)
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("calibrate", help="noise multiplier for target budgets")
    sp.add_argument("--epsilons", help="comma list (default: 0.5..32)")
    sp.add_argument("--delta", type=float, default=1e-5)
    sp.add_argument("--rows", type=int, default=195_665)
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--epochs", type=int, default=5)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("count-params", help="trainable/total counts per method")
    common(sp, output=False)
    sp.add_argument("--vocab-sizes", help="comma list of per-column vocabulary sizes")
    sp.set_defaults(func=cmd_count_params)

    sp = sub.add_parser("synth", help="write a synthetic shifted CSV")
    sp.add_argument("out")
    sp.add_argument("--rows", type=int, default=20_000)
    sp.add_argument("--shift", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--world-seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except InfeasibleBudget as exc:
        print(f"error: infeasible privacy budget: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (DataError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
