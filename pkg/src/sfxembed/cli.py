"""``sfxembed`` command line: synth, train, extract and probe.

Exit status is 0 only when the requested artifact was written; configuration
and usage problems exit with 2, runtime failures with 1.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .evaluation import (EmbeddingTable, evaluate_tables, extract_embeddings, fit_zscore,
                         kfold_eval, kfold_train_eval, read_table, write_table, zscore)
from .features import SpectrogramCache
from .ingest import DEFAULT_RATIOS, DatasetCollection, parse_manifest, stratified_split
from .model import freeze_encoder, load_checkpoint, save_checkpoint
from .testkit import SynthSpec, synth_corpus
from .training import (ConfigError, TrainConfig, load_spectrograms, prepare_data, train,
                       transfer_head_finetune)

logger = logging.getLogger("sfxembed")


class UsageError(Exception):
    pass


def _collection(paths) -> DatasetCollection:
    if not paths:
        raise UsageError("at least one --manifest is required")
    merged = None
    for p in paths:
        col = parse_manifest(p)
        merged = col if merged is None else merged.merge(col)
    return merged


def _fresh_dir(path: Path) -> Path:
    if path.exists() and any(path.iterdir()):
        raise UsageError(f"output directory {path} is not empty (one run per directory)")
    path.mkdir(parents=True, exist_ok=True)
    return path


# -- commands --------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SynthSpec.load(args.config)
    if args.seed is not None:
        spec.seed = args.seed
    out = _fresh_dir(Path(args.out))
    manifest = synth_corpus(spec, out)
    spec.dump(out / "synth_spec.yaml")
    print(manifest)
    return 0


def cmd_train(args) -> int:
    config = TrainConfig.load(args.config)
    if args.seed is not None:
        config.seed = args.seed
    collection = _collection(args.manifest)
    config.validate(collection.dataset_ids)
    out = _fresh_dir(Path(args.out))
    config.dump(out / "config.yaml")
    cache = SpectrogramCache.from_env()

    names = config.training_datasets(collection.dataset_ids)
    data = prepare_data(collection, config, names, cache)
    model, record = train(config, data)
    record.write_jsonl(out / "runrecord.jsonl")

    if config.scenario == "transfer":
        frozen = freeze_encoder(model)
        others = [d for d in collection.dataset_ids if d not in names]
        for ds_id, dd in prepare_data(collection, config, others, cache).items():
            norm = config.base_dataset if config.dataset_aware_norm else None
            head, rec = transfer_head_finetune(frozen, dd, config, norm)
            model.add_head(ds_id, dd.dataset.classes).load_state_dict(head.state_dict())
            rec.write_jsonl(out / f"runrecord.transfer.{ds_id}.jsonl")

    model.metadata["config_digest"] = model.config.digest()
    save_checkpoint(model, out / "model.ckpt")
    if args.plot:
        _plot_curves(record, out / "curves.png")
    logger.info("best epoch %s, checkpoint %s", record.best_epoch, out / "model.ckpt")
    return 0


def cmd_extract(args) -> int:
    if not args.checkpoint or not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    model = load_checkpoint(args.checkpoint)
    encoder = freeze_encoder(model)
    collection = _collection(args.manifest)
    seed = args.seed if args.seed is not None else int(model.metadata.get("seed", 0))
    ratios = tuple(model.metadata.get("split_ratios", DEFAULT_RATIOS))
    cache = SpectrogramCache.from_env()

    tables, train_rows = [], []
    for ds in collection:
        split = stratified_split(ds, ratios, "fine_label", seed)
        specs, _ = load_spectrograms(collection, ds.entries, cache, skip_errors=True)
        table = extract_embeddings(encoder, collection, ds.entries, args.overlap,
                                   args.norm_dataset, spectrograms=specs)
        table.metadata["skipped"] = len(ds.entries) - len(set(table.file_ids))
        row_split = [split[(ds.dataset_id, f)] for f in table.file_ids]
        tables.append((table, row_split))
        train_rows.append(table.take(np.array([s == "train" for s in row_split], dtype=bool)))

    full = EmbeddingTable.concat([t for t, _ in tables])
    splits = [s for _, rs in tables for s in rs]
    if not args.no_standardize:
        full = zscore(full, fit_zscore(EmbeddingTable.concat(train_rows)))
    if args.split != "all":
        full = full.take(np.array([s == args.split for s in splits], dtype=bool))
    full.metadata = {"checkpoint": str(args.checkpoint), "split": args.split,
                     "overlap": args.overlap, "standardized": not args.no_standardize,
                     "config_digest": model.config.digest(), "seed": seed,
                     "skipped": sum(t.metadata["skipped"] for t, _ in tables)}
    path = write_table(full, args.out, binary=not args.text)
    print(f"{path}: {len(full)} rows, dim {full.dim}")
    return 0


def cmd_probe(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.kfold:
        if args.config:
            config = TrainConfig.load(args.config)
            if args.seed is not None:
                config.seed = args.seed
            report = kfold_train_eval(_collection(args.manifest), config, args.kfold,
                                      SpectrogramCache.from_env())
        else:
            if not args.train:
                raise UsageError("--kfold needs --train TABLE (probe-only) or --config (retrain)")
            collection = _collection(args.manifest)
            folds = {}
            for ds in collection:
                for e in ds.entries:
                    if e.fold is None:
                        raise UsageError(f"manifest entry {e.file_path} has no fold")
                    folds[e.file_path] = e.fold
            report = kfold_eval(read_table(args.train), folds, args.kfold, args.k,
                                not args.no_standardize)
    else:
        if not (args.train and args.test):
            raise UsageError("probe needs --train and --test tables (or --kfold)")
        report = evaluate_tables(read_table(args.train), read_table(args.test), args.k,
                                 not args.no_standardize, args.file_level)
    report.write_json(out)
    report.write_per_class_csv(out.with_suffix(".csv"))
    if args.plot and report.datasets:
        report.plot_per_class(out.with_suffix(".png"))
    for ds, res in report.datasets.items():
        dbi = "n/a" if res["dbi"] is None else f"{res['dbi']:.3f}"
        print(f"{ds}\tmacro_f1={res['macro_f1']:.4f}\tdbi={dbi}")
    for f in report.folds:
        print(f"fold {f['fold']}\tmacro_f1={f['macro_f1']:.4f}")
    if report.mean_macro_f1 is not None:
        print(f"mean\tmacro_f1={report.mean_macro_f1:.4f}")
    return 0


def _plot_curves(record, path: Path) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib not installed; skipping %s", path)
        return
    fig, ax = plt.subplots(figsize=(7, 4))
    for ds in record.dataset_ids():
        for split, style in (("train", "--"), ("val", "-")):
            ys = record.series(ds, split)
            ax.plot(range(1, len(ys) + 1), ys, style, label=f"{ds} {split}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# -- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, help="torch intra-op threads")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="sfxembed", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic corpus from a YAML spec")
    p.add_argument("--config", required=True, help="synthesis spec (YAML)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train an encoder; writes a run directory")
    p.add_argument("--config", required=True, help="training config (YAML)")
    p.add_argument("--manifest", action="append", default=[])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--plot", action="store_true", help="also write curves.png")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", parents=[common], help="embed every sliding patch of a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", action="append", default=[])
    p.add_argument("--out", required=True, help="output table path")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="all")
    p.add_argument("--seed", type=int, help="split seed (default: the run's seed)")
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--norm-dataset", help="norm set for datasets unknown to the encoder")
    p.add_argument("--no-standardize", action="store_true")
    p.add_argument("--text", action="store_true", help="write the plain-text table variant")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("probe", parents=[common], help="nearest-neighbour probe; writes an EvalReport")
    p.add_argument("--train", help="training table")
    p.add_argument("--test", help="query table")
    p.add_argument("--out", required=True, help="report path (.json; .csv written alongside)")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--kfold", type=int)
    p.add_argument("--manifest", action="append", default=[])
    p.add_argument("--config", help="with --kfold: retrain an encoder per fold")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-standardize", action="store_true")
    p.add_argument("--file-level", action="store_true")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
