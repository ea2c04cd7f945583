import csv
import io
import itertools
import json
from pathlib import Path

import numpy as np
import pytest

from digit_ensemble import harness
from digit_ensemble.audio_io import load_dataset
from digit_ensemble.ensemble import average_probabilities, predict_label
from digit_ensemble.errors import EmptyInput, LengthMismatch
from digit_ensemble.features import DspConfig, FeatureKind
from digit_ensemble.harness import (
    ExperimentSpec,
    FeatureCache,
    MetricsReport,
    ReportRow,
    accuracy,
    all_configs,
    emit_curves,
    emit_table,
    extract_features,
    format_accuracy,
    load_experiment_config,
    read_probability_dump,
    run_experiment,
)
from digit_ensemble.nn import TrainConfig, TrainHistory


def parse_markdown_table(text):
    rows = []
    for line in text.strip().splitlines():
        cells = next(csv.reader([line.strip().strip("|")], delimiter="|"))
        rows.append([c.strip() for c in cells])
    return rows


class TestAccuracy:
    def test_examples(self):
        assert accuracy([1, 2, 3, 4, 5, 6, 7, 8, 0, 0], [1, 2, 3, 4, 5, 6, 7, 8, 9, 9]) == 0.8
        assert accuracy([3, 1, 4], [3, 1, 4]) == 1.0
        assert accuracy([0, 0, 0], [1, 2, 3]) == 0.0

    def test_errors(self):
        with pytest.raises(LengthMismatch):
            accuracy([1, 2], [1])
        with pytest.raises(EmptyInput):
            accuracy([], [])


class TestFormatting:
    def test_rounding(self):
        assert format_accuracy(0.8875, 0.0149) == "0.888 ± 0.015"
        assert format_accuracy(1.0, 0.0) == "1.000 ± 0.000"
        assert format_accuracy(0.9785, 0.0305) == "0.979 ± 0.031"

    def one_row(self):
        return MetricsReport([ReportRow("CNN (MS)", (FeatureKind.MS,), [0.9, 0.8], [0.5, 0.7], [1.0, 1.0])])

    def test_single_row(self):
        md = emit_table(self.one_row(), "markdown").strip().splitlines()
        assert len(md) == 3  # header, separator, data
        assert md[2] == "| CNN (MS) | 0.850 ± 0.050 | 0.6000 | 1.0000 |"
        assert emit_table(self.one_row(), "csv").strip().splitlines() == [
            "model,accuracy_mean,accuracy_std,infer_time_ms,extract_time_ms",
            "CNN (MS),0.850,0.050,0.6000,1.0000"]

    def test_empty_report(self):
        with pytest.raises(ValueError):
            emit_table(MetricsReport([]))

    def test_curves_schema(self, tmp_path):
        hist = TrainHistory([float(i) for i in range(150)], [i / 150 for i in range(150)], 150, 149)
        report = self.one_row()
        report.curves = {(0, "MS"): hist, (1, "MS"): hist}
        files = emit_curves(report, tmp_path)
        assert sorted(p.name for p in files) == ["run0_MS.csv", "run1_MS.csv"]
        lines = files[0].read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_accuracy"
        assert len(lines) == 151
        assert lines[1].startswith("1,")


def test_config_enumeration():
    ms, mfcc, zcr = FeatureKind
    assert all_configs([zcr, ms, mfcc]) == [(ms,), (mfcc,), (zcr,), (ms, mfcc), (ms, zcr), (mfcc, zcr),
                                            (ms, mfcc, zcr)]
    for subset in itertools.chain.from_iterable(itertools.combinations(FeatureKind, r) for r in (1, 2, 3)):
        assert len(all_configs(subset)) == 2 ** len(subset) - 1


class TestExperimentSpec:
    def test_invariants(self):
        with pytest.raises(ValueError):
            ExperimentSpec("d", repeats=0)
        with pytest.raises(ValueError):
            ExperimentSpec("d", feature_set=())
        with pytest.raises(ValueError):
            ExperimentSpec("d", feature_set=("MS", "MS"))

    def test_config_file(self, tmp_path):
        (tmp_path / "exp.toml").write_text(
            'dataset = "data"\nfeatures = "ZCR, MS"\nepochs = 7\nn_mels = 30\nseed = 4\n'
            'stratified = true\nrepeats = 2\n')
        spec = load_experiment_config(tmp_path / "exp.toml", {"seed": 9})
        assert spec.dataset == str(tmp_path / "data")
        assert spec.feature_set == (FeatureKind.MS, FeatureKind.ZCR)
        assert spec.train.epochs == 7 and spec.train.seed == 9 and spec.split.seed == 9
        assert spec.dsp.n_mels == 30 and spec.split.stratified and spec.repeats == 2

    def test_unknown_key(self, tmp_path):
        (tmp_path / "bad.toml").write_text('dataset = "x"\nlearning_rat = 0.1\n')
        with pytest.raises(ValueError, match="learning_rat"):
            load_experiment_config(tmp_path / "bad.toml")


def test_cache_transparent(small_corpus, tmp_path):
    m = load_dataset(small_corpus)
    cold, labels, t_cold = extract_features(m, "MFCC", cache=FeatureCache(tmp_path))
    cache = FeatureCache(tmp_path)
    warm, _, t_warm = extract_features(m, "MFCC", cache=cache)
    assert cache.hits == len(m) and cache.misses == 0
    assert np.array_equal(cold, warm)
    assert np.all(t_cold >= 0) and np.all(np.isnan(t_warm))
    plain, _, _ = extract_features(m, "MFCC")
    assert np.array_equal(plain, cold)


def test_cache_key_depends_on_settings():
    c = FeatureCache(None)
    a = c.key(b"x", FeatureKind.MS, DspConfig(), 2.0)
    assert a != c.key(b"x", FeatureKind.MS, DspConfig(n_mels=30), 2.0)
    assert a != c.key(b"x", FeatureKind.MFCC, DspConfig(), 2.0)
    assert a != c.key(b"y", FeatureKind.MS, DspConfig(), 2.0)


# ---------------------------------------------------------------------------
# a real (tiny) experiment
# ---------------------------------------------------------------------------

SMALL_TRAIN = TrainConfig(epochs=3, batch_size=8, seed=5)


@pytest.fixture(scope="module")
def experiment(small_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    spec = ExperimentSpec(str(small_corpus), train=SMALL_TRAIN, repeats=2)
    report = run_experiment(spec, out_dir=out, cache_dir=out / "cache")
    return spec, report, out


def test_seven_rows_two_timing_columns(experiment):
    _, report, out = experiment
    rows = parse_markdown_table((out / "report.md").read_text())
    assert rows[0] == ["Model", "Accuracy", "Infer time (ms)", "Extract time (ms)"]
    assert {len(r) for r in rows} == {4}
    body = rows[2:]
    assert [r[0] for r in body] == ["CNN (MS)", "CNN (MFCC)", "CNN (ZCR)", "CNN (MS and MFCC)",
                                    "CNN (MS and ZCR)", "CNN (MFCC and ZCR)", "CNN (MS, MFCC, ZCR)"]
    for r, row in zip(body, report.rows):
        mean, std = r[1].split(" ± ")
        assert float(mean) == pytest.approx(row.accuracy_mean, abs=5e-4)
        assert float(std) == pytest.approx(np.std(row.accuracies), abs=5e-4)
        assert float(r[2]) >= 0 and float(r[3]) >= 0
    assert all(len(row.accuracies) == 2 for row in report.rows)


def test_report_invariants(experiment):
    _, report, out = experiment
    assert report.complete and not (out / "PARTIAL").exists()
    for row in report.rows:
        assert all(0 <= a <= 1 for a in row.accuracies)
        assert row.accuracy_std >= 0
        assert min(row.infer_ms) >= 0 and min(row.extract_ms) >= 0
    triple = report.row(*FeatureKind)
    singles = [report.row(k) for k in FeatureKind]
    for run in range(2):
        assert triple.infer_ms[run] >= max(s.infer_ms[run] for s in singles)
    data = json.loads((out / "report.json").read_text())
    assert len(data["rows"]) == 7 and len(data["curves"]) == 6


def test_curves_per_run_and_feature(experiment):
    _, _, out = experiment
    files = sorted(p.name for p in (out / "curves").iterdir())
    assert files == sorted(f"run{r}_{k.value}.csv" for r in range(2) for k in FeatureKind)
    for name in files:
        lines = (out / "curves" / name).read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_accuracy" and len(lines) == 1 + SMALL_TRAIN.epochs


def test_probability_dump_audit(experiment):
    _, report, out = experiment
    for run in range(2):
        dumps = {k: read_probability_dump(out / "probs" / f"run{run}_{k.value}.csv") for k in FeatureKind}
        ids, labels, _ = dumps[FeatureKind.MS]
        assert len(ids) == round(0.2 * 60)
        for row in report.rows:
            preds = [predict_label(average_probabilities([dumps[k][2][i] for k in row.members]))
                     for i in range(len(labels))]
            assert accuracy(preds, labels) == row.accuracies[run], row.label


def test_warm_cache_rerun_identical(experiment):
    spec, report, out = experiment
    assert any((out / "cache").rglob("*.fmap"))
    warm = run_experiment(spec, cache_dir=out / "cache")
    assert [r.accuracies for r in warm.rows] == [r.accuracies for r in report.rows]
    assert harness.emit_accuracy_csv(warm) == (out / "accuracy.csv").read_text()


def test_single_feature_one_row(small_corpus, tmp_path):
    spec = ExperimentSpec(str(small_corpus), feature_set=("MS",), train=TrainConfig(epochs=1, batch_size=16),
                          repeats=1)
    report = run_experiment(spec, out_dir=tmp_path)
    assert [r.label for r in report.rows] == ["CNN (MS)"]
    assert len((tmp_path / "report.md").read_text().strip().splitlines()) == 3
    assert report.rows[0].accuracy_std == 0.0


def test_partial_results_flushed(small_corpus, tmp_path, monkeypatch):
    real_train = harness.train
    calls = []

    def flaky(*args, **kwargs):
        calls.append(1)
        if len(calls) > 1:
            raise RuntimeError("disk full")
        return real_train(*args, **kwargs)

    monkeypatch.setattr(harness, "train", flaky)
    spec = ExperimentSpec(str(small_corpus), feature_set=("MS",), train=TrainConfig(epochs=1, batch_size=16),
                          repeats=3)
    with pytest.raises(RuntimeError):
        run_experiment(spec, out_dir=tmp_path)
    assert (tmp_path / "PARTIAL").exists()
    acc = list(csv.reader(io.StringIO((tmp_path / "accuracy.csv").read_text())))
    assert acc[0] == ["model", "run0", "accuracy_mean", "accuracy_std"]


@pytest.mark.parametrize("name", ["fsdd.toml", "synth.toml"])
def test_shipped_configs_parse(name):
    spec = load_experiment_config(Path(__file__).parent.parent / "configs" / name)
    assert spec.feature_set == tuple(FeatureKind)
