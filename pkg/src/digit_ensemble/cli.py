"""Command-line entry point: ``digit-ensemble {synth,extract,train,evaluate,experiment}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .audio_io import SplitSpec, load_dataset, split_dataset
from .ensemble import config_label
from .errors import DigitEnsembleError
from .features import FEATURE_ORDER, DspConfig
from .harness import (
    FeatureCache,
    MetricsReport,
    ReportRow,
    all_configs,
    emit_table,
    evaluate_configs,
    experiment_from_mapping,
    extract_features,
    load_experiment_config,
    resolve_cache_dir,
    run_experiment,
    tomllib,
    write_probability_dump,
)
from .nn import build_table1_cnn, load_checkpoint, save_checkpoint, train
from .synth import write_synth_corpus

log = logging.getLogger("digit_ensemble")


def _add_data_args(p):
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--layout", default="fsdd", choices=["fsdd", "folder"],
                   help="fsdd: <digit>_<speaker>_<n>.wav names; folder: <root>/<class>/*.wav")
    p.add_argument("--config", help="flat TOML file with DSP / training / split overrides")
    p.add_argument("--target-seconds", type=float, default=None)


def _add_train_args(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--optimizer", choices=["sgd", "momentum"])
    p.add_argument("--stratified", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="digit-ensemble",
        description="Per-feature CNNs for spoken digits and their probability-averaging ensembles.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write the synthetic tone corpus")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("extract", help="compute and cache feature maps")
    _add_data_args(p)
    p.add_argument("--feature", action="append", choices=[k.value for k in FEATURE_ORDER])
    p.add_argument("--out", help="cache directory (default: $DIGIT_ENSEMBLE_CACHE)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train one model on one feature")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--feature", required=True, choices=[k.value for k in FEATURE_ORDER])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--cache", help="feature cache directory")

    p = sub.add_parser("evaluate", help="score checkpoints and their ensembles on the held-out split")
    _add_data_args(p)
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--format", default="markdown", choices=["markdown", "csv"])
    p.add_argument("--out", help="write the table here instead of stdout")
    p.add_argument("--dump-probs", help="directory for per-sample probability CSVs")
    p.add_argument("--seed", type=int, default=None, help="override the split seed stored in the checkpoint")
    p.add_argument("--cache", help="feature cache directory")

    p = sub.add_parser("experiment", help="full protocol from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--format", default="markdown", choices=["markdown", "csv"])
    p.add_argument("--cache", help="feature cache directory")
    return parser


def _read_config(path) -> dict:
    if not path:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _spec_from_args(args, feature_set):
    cfg = _read_config(getattr(args, "config", None))
    cfg["dataset"] = args.data
    cfg["layout"] = args.layout
    cfg["features"] = list(feature_set)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if args.target_seconds is not None:
        cfg["target_seconds"] = args.target_seconds
    for key in ("epochs", "batch_size", "learning_rate", "optimizer", "stratified"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return experiment_from_mapping(cfg)


def cmd_synth(args) -> int:
    paths = write_synth_corpus(args.out, args.classes, args.per_class, args.seed)
    print(f"wrote {len(paths)} clips to {args.out}")
    return 0


def cmd_extract(args) -> int:
    kinds = args.feature or [k.value for k in FEATURE_ORDER]
    spec = _spec_from_args(args, kinds)
    cache_root = resolve_cache_dir(args.out)
    if cache_root is None:
        raise DigitEnsembleError("no cache directory: pass --out or set DIGIT_ENSEMBLE_CACHE")
    cache = FeatureCache(cache_root)
    manifest = load_dataset(spec.dataset, spec.layout)
    for kind in spec.feature_set:
        extract_features(manifest, kind, spec.dsp, spec.target_seconds, cache)
    print(f"{len(manifest)} clips x {len(spec.feature_set)} features: "
          f"{cache.misses} extracted, {cache.hits} already cached in {cache_root}")
    return 0


def cmd_train(args) -> int:
    spec = _spec_from_args(args, [args.feature])
    kind = spec.feature_set[0]
    cache = FeatureCache(resolve_cache_dir(args.cache))
    train_m, val_m, test_m = split_dataset(load_dataset(spec.dataset, spec.layout), spec.split)
    x_tr, y_tr, _ = extract_features(train_m, kind, spec.dsp, spec.target_seconds, cache)
    x_va, y_va, _ = extract_features(val_m, kind, spec.dsp, spec.target_seconds, cache)
    ckpt = train(build_table1_cnn(), (x_tr, y_tr), (x_va, y_va), spec.train, feature_kind=kind,
                 metadata={"split": asdict(spec.split), "dsp": spec.dsp.as_dict(),
                           "target_seconds": spec.target_seconds, "dataset": spec.dataset,
                           "layout": spec.layout.value})
    save_checkpoint(ckpt, args.out)
    h = ckpt.history
    print(f"{kind.value}: {h.steps} steps, best val accuracy {h.val_accuracy[h.best_epoch]:.4f} "
          f"at epoch {h.best_epoch + 1}; saved {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    ckpts = [load_checkpoint(p) for p in args.checkpoint]
    kinds = [c.feature_kind for c in ckpts]
    if None in kinds or len(set(kinds)) != len(kinds):
        raise DigitEnsembleError("checkpoints must carry distinct feature kinds")
    meta = ckpts[0].metadata
    split = SplitSpec(**meta.get("split", {}))
    if args.seed is not None:
        split = replace(split, seed=args.seed)
    dsp = DspConfig(**meta.get("dsp", {}))
    target = args.target_seconds or float(meta.get("target_seconds", 2.0))
    cache = FeatureCache(resolve_cache_dir(args.cache))

    _, _, test_m = split_dataset(load_dataset(args.data, args.layout), split)
    networks, maps, extract_ms = {}, {}, {}
    for ckpt in ckpts:
        k = ckpt.feature_kind
        x, _, t = extract_features(test_m, k, dsp, target, cache, use_cache=False)
        networks[k], maps[k], extract_ms[k] = ckpt.network(), x, float(np.mean(t))
    results = evaluate_configs(networks, maps, test_m.labels, all_configs(networks))
    report = MetricsReport([ReportRow(config_label(r.members), r.members, [r.accuracy], [r.infer_ms],
                                      [sum(extract_ms[k] for k in r.members)]) for r in results])
    if args.dump_probs:
        out = Path(args.dump_probs)
        out.mkdir(parents=True, exist_ok=True)
        ids = [e.path for e in test_m.entries]
        for r in results:
            name = "_".join(k.value for k in r.members)
            write_probability_dump(out / f"{name}.csv", ids, test_m.labels, r.probs)
    _write_text(emit_table(report, args.format), args.out)
    return 0


def cmd_experiment(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.repeats is not None:
        overrides["repeats"] = args.repeats
    spec = load_experiment_config(args.config, overrides)
    report = run_experiment(spec, out_dir=args.out, cache_dir=args.cache)
    print(emit_table(report, args.format), end="")
    return 0


def _write_text(text: str, path) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DigitEnsembleError, ValueError, OSError, KeyError) as exc:
        print(f"digit-ensemble {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
