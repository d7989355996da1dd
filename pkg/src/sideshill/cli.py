"""Command-line entry point: ``run``, ``ablate``, ``plot`` and ``detect``.

Every config key is also a flag (``--schedule.rounds 3``). The short flags
``--dataset``, ``--target``, ``--variant``, ``--seed``, ``--mode`` and
``--out`` cover the common overrides.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import DataFormatError, ProfileBatch, inject, load_dataset
from .evaluation import ecod_auroc, fap_detect, rating_divergences

log = logging.getLogger("sideshill")

VARIANTS = {
    "gan_ae": dict(critic="bce", generator="ae_baseline"),
    "wgan_gp_vae": dict(critic="wgan_gp", generator="vae"),
    "wgan_sn_vae": dict(critic="wgan_sn", generator="vae"),
}

SHORT_FLAGS = {
    "dataset": "dataset.path",
    "target": "attack.targets",
    "seed": "run.seeds",
    "mode": "surrogate.mode",
    "out": "run.out",
}


def _add_config_flags(p: argparse.ArgumentParser):
    from .pipeline import ExperimentConfig

    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--dataset", help="dataset directory or triples file")
    p.add_argument("--format", dest="dataset_format", help="ml100k or rating_triples")
    p.add_argument("--target", help="target item id(s), comma separated")
    p.add_argument("--variant", choices=sorted(VARIANTS), help="generator/critic preset")
    p.add_argument("--seed", help="seed(s), comma separated")
    p.add_argument("--mode", choices=("persistent", "full_retrain"))
    p.add_argument("--out", help="output directory")
    p.add_argument("--cumulative", action="store_true", help="inject all batches so far each round")
    group = p.add_argument_group("config keys")
    for key in ExperimentConfig.keys():
        group.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE")


def _config_from_args(args, **defaults):
    from .pipeline import ExperimentConfig, parse_config_text

    values = {}
    if args.config:
        values.update(parse_config_text(Path(args.config).read_text()))
    for k, v in defaults.items():
        values.setdefault(k, v)
    if args.variant:
        preset = VARIANTS[args.variant]
        values["critic.variant"] = preset["critic"]
        values["generator.variant"] = preset["generator"]
        values["run.label"] = args.variant
    for flag, key in SHORT_FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            values[key] = v
    if args.dataset_format:
        values["dataset.format"] = args.dataset_format
    if args.cumulative:
        values["run.cumulative"] = "true"
    for name, v in vars(args).items():
        if name.startswith("cfg:") and v is not None:
            values[name[4:]] = v
    return ExperimentConfig.from_mapping(values)


def cmd_run(args) -> int:
    from .pipeline import ExperimentAborted, emit_plots, run_experiment

    cfg = _config_from_args(args)
    try:
        records, summary = run_experiment(cfg)
    except ExperimentAborted as exc:
        log.error("experiment aborted: %s (%d records kept)", exc, len(exc.records))
        return 1
    emit_plots(records, Path(cfg.out) / "plots")
    for row in summary:
        print(f"{row['variant']} {row['victim']} target={row['target']} round={row['round']} "
              f"hr={row['hr_mean']:.4f}±{row['hr_std']:.4f} auroc={row['ecod_auroc_mean']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    from .pipeline import ExperimentAborted, ablation_config, format_ablation_table, run_ablation

    cfg = _config_from_args(args, **{"attack.targets": "62", "features.enabled": "false",
                                     "surrogate.kind": "wrmf", "victim.kinds": "svd_mf,neumf",
                                     "schedule.rounds": "3", "run.out": "runs/ablation"})
    try:
        rows = run_ablation(cfg)
    except ExperimentAborted as exc:
        log.error("ablation aborted: %s", exc)
        return 1
    print(format_ablation_table(rows, cfg.k), end="")
    return 0


def cmd_plot(args) -> int:
    from .pipeline import emit_plots, load_records

    records = []
    for path in args.records:
        records.extend(load_records(path))
    if not records:
        log.error("no records found")
        return 1
    out = args.out or str(Path(args.records[0]).parent / "plots")
    for p in emit_plots(records, out):
        print(p)
    return 0


def cmd_detect(args) -> int:
    try:
        ds = load_dataset(args.dataset, args.format)
    except (DataFormatError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 1
    batch = ProfileBatch.load(args.batch)
    poisoned = inject(ds, batch)
    fakes = np.arange(ds.n_users, poisoned.n_users)
    fap = fap_detect(poisoned.ratings.csr, fakes, args.seed_fraction, args.iters, seed=args.seed)
    result = {
        "n_fakes": int(len(fakes)),
        "fap_precision": fap.precision,
        "fap_recall": fap.recall,
        "ecod_auroc": ecod_auroc(poisoned, fakes, args.r_svd, args.seed),
    }
    result["tvd"], result["js"] = rating_divergences(ds.ratings.csr, batch.ratings.csr)
    print(json.dumps(result, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sideshill", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train the attack and evaluate every round")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="rating-only ablation over the nine variants")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render per-round curves from records files")
    p.add_argument("records", nargs="+", help="records.jsonl files")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("detect", help="score a saved fake-profile batch with FAP and ECOD")
    p.add_argument("batch", help="ProfileBatch JSON file")
    p.add_argument("--dataset", default="data/ml-100k")
    p.add_argument("--format", default="ml100k")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--seed-fraction", type=float, default=0.1)
    p.add_argument("--r-svd", type=int, default=16)
    p.set_defaults(func=cmd_detect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
