"""Experiment runner: split, extract, train, evaluate single models and ensembles, report."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import os
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Optional

import numpy as np

from .audio_io import (
    DEFAULT_TARGET_SECONDS,
    AudioClip,
    DatasetManifest,
    Layout,
    SplitSpec,
    fix_duration,
    load_dataset,
    parse_wav,
    split_dataset,
)
from .ensemble import average_probabilities, canonical_kinds, config_label, predict_label
from .errors import EmptyInput, LengthMismatch
from .features import (
    FEATURE_ORDER,
    DspConfig,
    FeatureKind,
    decode_feature_map,
    encode_feature_map,
    extract,
    normalize_map,
)
from .nn.checkpoint import save_checkpoint
from .nn.model import build_table1_cnn
from .nn.train import TrainConfig, train

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

CACHE_ENV = "DIGIT_ENSEMBLE_CACHE"
CURVE_HEADER = ("epoch", "train_loss", "val_accuracy")
# bump when extraction output changes so stale cache entries are ignored
FEATURE_CACHE_VERSION = 1


def accuracy(predictions, labels) -> float:
    """Fraction of predictions equal to their label."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise LengthMismatch(f"{predictions.size} predictions for {labels.size} labels")
    if labels.size == 0:
        raise EmptyInput("accuracy of an empty prediction set")
    return float(np.mean(predictions == labels))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentSpec:
    dataset: str
    layout: Layout = Layout.FSDD
    feature_set: tuple = FEATURE_ORDER
    dsp: DspConfig = DspConfig()
    train: TrainConfig = TrainConfig()
    split: SplitSpec = SplitSpec()
    repeats: int = 3
    target_seconds: float = DEFAULT_TARGET_SECONDS

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        kinds = [FeatureKind.parse(k) for k in self.feature_set]
        if not kinds:
            raise ValueError("feature_set must not be empty")
        if len(set(kinds)) != len(kinds):
            raise ValueError(f"feature_set has duplicates: {[k.value for k in kinds]}")
        object.__setattr__(self, "feature_set", canonical_kinds(kinds))
        object.__setattr__(self, "layout", Layout.parse(self.layout))

    def with_seed(self, seed: int) -> "ExperimentSpec":
        return replace(self, train=replace(self.train, seed=seed), split=replace(self.split, seed=seed))


_DSP_KEYS = set(DspConfig.__dataclass_fields__)
_TRAIN_KEYS = set(TrainConfig.__dataclass_fields__) - {"seed"}
_SPLIT_KEYS = set(SplitSpec.__dataclass_fields__) - {"seed"}


def experiment_from_mapping(cfg: dict, base_dir=None) -> ExperimentSpec:
    """Build a spec from a flat key/value mapping (the parsed config file)."""
    cfg = dict(cfg)
    unknown = set(cfg) - _DSP_KEYS - _TRAIN_KEYS - _SPLIT_KEYS - {
        "dataset", "layout", "features", "repeats", "seed", "target_seconds"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "dataset" not in cfg:
        raise ValueError("config needs a 'dataset' path")
    dataset = Path(cfg["dataset"])
    if base_dir is not None and not dataset.is_absolute():
        dataset = Path(base_dir) / dataset
    seed = int(cfg.get("seed", 0))
    features = cfg.get("features", [k.value for k in FEATURE_ORDER])
    if isinstance(features, str):
        features = [f for f in features.replace(",", " ").split() if f]
    return ExperimentSpec(
        dataset=str(dataset),
        layout=cfg.get("layout", "fsdd"),
        feature_set=tuple(features),
        dsp=DspConfig(**{k: cfg[k] for k in _DSP_KEYS if k in cfg}),
        train=TrainConfig(seed=seed, **{k: cfg[k] for k in _TRAIN_KEYS if k in cfg}),
        split=SplitSpec(seed=seed, **{k: cfg[k] for k in _SPLIT_KEYS if k in cfg}),
        repeats=int(cfg.get("repeats", 3)),
        target_seconds=float(cfg.get("target_seconds", DEFAULT_TARGET_SECONDS)),
    )


def load_experiment_config(path, overrides: Optional[dict] = None) -> ExperimentSpec:
    path = Path(path)
    with open(path, "rb") as fh:
        cfg = tomllib.load(fh)
    cfg.update(overrides or {})
    return experiment_from_mapping(cfg, base_dir=path.parent)


# ---------------------------------------------------------------------------
# feature extraction with an on-disk cache
# ---------------------------------------------------------------------------

def resolve_cache_dir(explicit=None) -> Optional[Path]:
    if explicit is not None:
        return Path(explicit)
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else None


class FeatureCache:
    """Normalised float32 maps keyed by file content, feature kind and DSP settings."""

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else None
        self.hits = 0
        self.misses = 0

    def key(self, wav_bytes: bytes, kind: FeatureKind, dsp: DspConfig, target_seconds: float) -> str:
        h = hashlib.sha256(wav_bytes)
        h.update(json.dumps({"kind": kind.value, "dsp": dsp.as_dict(), "target": target_seconds,
                             "version": FEATURE_CACHE_VERSION}, sort_keys=True).encode())
        return h.hexdigest()

    def _path(self, kind: FeatureKind, key: str) -> Optional[Path]:
        if self.root is None:
            return None
        return self.root / kind.value / key[:2] / f"{key}.fmap"

    def get(self, kind, key):
        p = self._path(kind, key)
        if p is not None and p.exists():
            self.hits += 1
            return decode_feature_map(p.read_bytes())
        self.misses += 1
        return None

    def put(self, kind, key, fmap) -> None:
        p = self._path(kind, key)
        if p is None:
            return
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_suffix(f".tmp{os.getpid()}")
        tmp.write_bytes(encode_feature_map(fmap))
        tmp.replace(p)


def compute_map(wav_bytes_or_clip, kind: FeatureKind, dsp: DspConfig, target_seconds: float) -> np.ndarray:
    clip = wav_bytes_or_clip
    if not isinstance(clip, AudioClip):
        clip = parse_wav(clip)
    clip = fix_duration(clip, target_seconds)
    return normalize_map(extract(clip, kind, dsp)).astype(np.float32)


def extract_features(manifest: DatasetManifest, kind, dsp: DspConfig = DspConfig(),
                     target_seconds: float = DEFAULT_TARGET_SECONDS, cache: Optional[FeatureCache] = None,
                     use_cache: bool = True):
    """Return ``(maps, labels, extract_ms)`` for every manifest entry.

    ``extract_ms`` holds the per-sample extraction time, NaN for cache hits.
    """
    kind = FeatureKind.parse(kind)
    cache = cache or FeatureCache(None)
    maps = np.empty((len(manifest), 32, 32, 1), dtype=np.float32)
    times = np.full(len(manifest), np.nan)
    for i, entry in enumerate(manifest.entries):
        data = Path(entry.path).read_bytes()
        key = cache.key(data, kind, dsp, target_seconds)
        fmap = cache.get(kind, key) if use_cache else None
        if fmap is None:
            t0 = time.perf_counter()
            fmap = compute_map(data, kind, dsp, target_seconds)
            times[i] = (time.perf_counter() - t0) * 1e3
            cache.put(kind, key, fmap)
        maps[i] = fmap
    return maps, manifest.labels, times


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def all_configs(kinds) -> list:
    """Every non-empty subset in table order: singles, then pairs, then the triple."""
    kinds = canonical_kinds(kinds)
    return [combo for r in range(1, len(kinds) + 1) for combo in itertools.combinations(kinds, r)]


@dataclass
class ConfigResult:
    members: tuple
    accuracy: float
    infer_ms: float
    predictions: np.ndarray
    probs: np.ndarray


def evaluate_configs(networks: dict, test_maps: dict, labels, configs=None) -> list:
    """Run each configuration sample by sample, timing forward passes plus averaging.

    ``networks`` and ``test_maps`` are keyed by :class:`FeatureKind`.
    """
    labels = np.asarray(labels)
    configs = configs if configs is not None else all_configs(networks)
    results = []
    for combo in configs:
        preds = np.empty(len(labels), dtype=np.int64)
        mean_probs = np.empty((len(labels), 0))
        elapsed = 0.0
        for i in range(len(labels)):
            t0 = time.perf_counter()
            avg = average_probabilities([networks[k].forward(test_maps[k][i])[0] for k in combo])
            preds[i] = predict_label(avg)
            elapsed += time.perf_counter() - t0
            if i == 0:
                mean_probs = np.empty((len(labels), avg.size))
            mean_probs[i] = avg
        results.append(ConfigResult(tuple(combo), accuracy(preds, labels),
                                    elapsed * 1e3 / len(labels), preds, mean_probs))
    return results


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class ReportRow:
    label: str
    members: tuple
    accuracies: list = field(default_factory=list)
    infer_ms: list = field(default_factory=list)
    extract_ms: list = field(default_factory=list)

    @property
    def accuracy_mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def accuracy_std(self) -> float:
        # population std, so a single repeat reports 0 rather than NaN
        return float(np.std(self.accuracies))

    @property
    def infer_time_ms_mean(self) -> float:
        return float(np.mean(self.infer_ms))

    @property
    def extract_time_ms_mean(self) -> float:
        return float(np.mean(self.extract_ms))


@dataclass
class MetricsReport:
    rows: list
    curves: dict = field(default_factory=dict)   # (run, kind value) -> TrainHistory
    complete: bool = True

    def row(self, *kinds) -> ReportRow:
        want = canonical_kinds(kinds)
        for r in self.rows:
            if r.members == want:
                return r
        raise KeyError(config_label(want))

    def to_dict(self) -> dict:
        return {
            "complete": self.complete,
            "rows": [{"label": r.label, "members": [k.value for k in r.members],
                      "accuracies": r.accuracies, "accuracy_mean": r.accuracy_mean,
                      "accuracy_std": r.accuracy_std, "infer_ms": r.infer_ms,
                      "extract_ms": r.extract_ms} for r in self.rows],
            "curves": {f"run{run}_{kind}": h.to_dict() for (run, kind), h in sorted(self.curves.items())},
        }


def _fmt(x: float, places: int = 3) -> str:
    q = Decimal(1).scaleb(-places)
    return str(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


def format_accuracy(mean: float, std: float) -> str:
    return f"{_fmt(mean)} ± {_fmt(std)}"


TABLE_HEADER = ("Model", "Accuracy", "Infer time (ms)", "Extract time (ms)")


def emit_table(report: MetricsReport, fmt: str = "markdown") -> str:
    """Render one line per configuration: accuracy mean ± std and both timing columns."""
    if not report.rows:
        raise ValueError("report has no rows")
    fmt = fmt.lower()
    rows = [(r.label, format_accuracy(r.accuracy_mean, r.accuracy_std),
             _fmt(r.infer_time_ms_mean, 4), _fmt(r.extract_time_ms_mean, 4)) for r in report.rows]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("model", "accuracy_mean", "accuracy_std", "infer_time_ms", "extract_time_ms"))
        for r in report.rows:
            w.writerow((r.label, _fmt(r.accuracy_mean), _fmt(r.accuracy_std),
                        _fmt(r.infer_time_ms_mean, 4), _fmt(r.extract_time_ms_mean, 4)))
        return buf.getvalue()
    if fmt in ("markdown", "md"):
        lines = ["| " + " | ".join(TABLE_HEADER) + " |",
                 "|" + "|".join(["---"] * len(TABLE_HEADER)) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown table format {fmt!r}")


def emit_accuracy_csv(report: MetricsReport) -> str:
    """Timing-free table (per-run accuracies); byte-identical across reruns with the same seed."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n_runs = max(len(r.accuracies) for r in report.rows)
    w.writerow(["model"] + [f"run{i}" for i in range(n_runs)] + ["accuracy_mean", "accuracy_std"])
    for r in report.rows:
        w.writerow([r.label] + [repr(a) for a in r.accuracies] + [repr(r.accuracy_mean), repr(r.accuracy_std)])
    return buf.getvalue()


def emit_curves(report: MetricsReport, path) -> list:
    """Write ``run<r>_<FEATURE>.csv`` per trained model with per-epoch loss and val accuracy."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for (run, kind), hist in sorted(report.curves.items()):
        p = out / f"run{run}_{kind}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CURVE_HEADER)
            for epoch, (loss, acc) in enumerate(zip(hist.train_loss, hist.val_accuracy), start=1):
                w.writerow((epoch, repr(float(loss)), repr(float(acc))))
        written.append(p)
    return written


def write_probability_dump(path, sample_ids, labels, probs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label"] + [f"p{i}" for i in range(probs.shape[1])])
        for sid, label, p in zip(sample_ids, labels, probs):
            w.writerow([sid, int(label)] + [repr(float(v)) for v in p])


def read_probability_dump(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    ids = [r[0] for r in body]
    labels = np.array([int(r[1]) for r in body])
    probs = np.array([[float(v) for v in r[2:]] for r in body])
    return ids, labels, probs


# ---------------------------------------------------------------------------
# the experiment loop
# ---------------------------------------------------------------------------

def run_experiment(spec: ExperimentSpec, out_dir=None, cache_dir=None, dtype=np.float32) -> MetricsReport:
    """Repeat split -> extract -> train -> evaluate ``spec.repeats`` times with seeds seed+r.

    With ``out_dir`` set, checkpoints, curves, probability dumps and tables are
    written under it; if a repeat fails, the finished repeats are flushed with a
    ``PARTIAL`` marker before the error propagates.
    """
    out = Path(out_dir) if out_dir is not None else None
    cache_root = resolve_cache_dir(cache_dir)
    if cache_root is None and out is not None:
        cache_root = out / "cache"
    cache = FeatureCache(cache_root)
    manifest = load_dataset(spec.dataset, spec.layout)
    kinds = spec.feature_set
    configs = all_configs(kinds)
    report = MetricsReport([ReportRow(config_label(c), c) for c in configs])
    base_seed = spec.train.seed

    try:
        for run in range(spec.repeats):
            _run_once(spec.with_seed(base_seed + run), run, manifest, kinds, configs, report, cache, out, dtype)
    except BaseException:
        report.complete = False
        if out is not None and any(r.accuracies for r in report.rows):
            _flush(report, out, "markdown")
            (out / "PARTIAL").write_text(
                "run aborted; tables hold completed repeats only\n" + traceback.format_exc())
        raise

    if out is not None:
        _flush(report, out, "markdown")
        partial = out / "PARTIAL"
        if partial.exists():
            partial.unlink()
    return report


def _run_once(spec, run, manifest, kinds, configs, report, cache, out, dtype):
    seed = spec.train.seed
    train_m, val_m, test_m = split_dataset(manifest, spec.split)
    log.info("run %d (seed %d): %d train / %d val / %d test", run, seed, len(train_m), len(val_m), len(test_m))

    networks, test_maps, extract_ms = {}, {}, {}
    for kind in kinds:
        x_tr, y_tr, _ = extract_features(train_m, kind, spec.dsp, spec.target_seconds, cache)
        x_va, y_va, _ = extract_features(val_m, kind, spec.dsp, spec.target_seconds, cache)
        # test maps are always recomputed so extraction time is measured on every run
        x_te, y_te, t_te = extract_features(test_m, kind, spec.dsp, spec.target_seconds, cache, use_cache=False)
        test_maps[kind], extract_ms[kind] = x_te, float(np.mean(t_te))

        ckpt = train(build_table1_cnn(), (x_tr, y_tr), (x_va, y_va), spec.train, feature_kind=kind,
                     metadata={"split": asdict(spec.split), "dsp": spec.dsp.as_dict(),
                               "target_seconds": spec.target_seconds, "run": run},
                     dtype=dtype)
        networks[kind] = ckpt.network(dtype)
        report.curves[(run, kind.value)] = ckpt.history
        if out is not None:
            save_checkpoint(ckpt, out / "models" / f"run{run}_{kind.value}.ckpt")

    results = evaluate_configs(networks, test_maps, test_m.labels, configs)
    if out is not None:
        (out / "probs").mkdir(parents=True, exist_ok=True)
        ids = [os.path.relpath(e.path, manifest.root) for e in test_m.entries]
        for res in results:
            if len(res.members) == 1:
                write_probability_dump(out / "probs" / f"run{run}_{res.members[0].value}.csv",
                                       ids, test_m.labels, res.probs)
    for row, res in zip(report.rows, results):
        row.accuracies.append(res.accuracy)
        row.infer_ms.append(res.infer_ms)
        row.extract_ms.append(sum(extract_ms[k] for k in res.members))
        log.info("run %d %s: acc %.4f", run, row.label, res.accuracy)


def _flush(report: MetricsReport, out: Path, fmt: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    done = MetricsReport([r for r in report.rows if r.accuracies], report.curves, report.complete)
    (out / "report.md").write_text(emit_table(done, "markdown"))
    (out / "report.csv").write_text(emit_table(done, "csv"))
    (out / "accuracy.csv").write_text(emit_accuracy_csv(done))
    (out / "report.json").write_text(json.dumps(done.to_dict(), indent=2, sort_keys=True) + "\n")
    emit_curves(done, out / "curves")
