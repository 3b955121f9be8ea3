import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from actprompt.adapter import TrainConfig
from actprompt.errors import BadParams, InsufficientSamples, ManifestError, MissingLabel, NonPositive
from actprompt.evaluation import (
    ClassInfo,
    DatasetManifest,
    MetricsReport,
    RecordStore,
    SplitMetrics,
    SplitSpec,
    VideoEntry,
    aggregate_splits,
    harmonic_mean,
    make_base_novel_split,
    make_zero_shot_subsets,
    mean_std,
    run_base2novel,
    run_fewshot,
    run_zeroshot,
    sample_few_shot,
    top1_top5,
)
from actprompt.inference import CategoryBank, Prediction, Ranked
from actprompt.synth import SynthParams, synth_generate


def manifest_with(counts, per_split=None, names=None):
    names = names or [f"c{i}" for i in range(len(counts))]
    classes = [ClassInfo(i, n, c) for i, (n, c) in enumerate(zip(names, counts))]
    videos = []
    for n, c in zip(names, counts):
        for j in range(per_split if per_split is not None else c):
            videos.append(VideoEntry(f"{n}_t{j}", n, "train", "f.json"))
        videos.append(VideoEntry(f"{n}_v0", n, "val", "f.json"))
    return DatasetManifest("m", classes, videos)


def fake_prediction(order, video_id="v"):
    names = [f"c{i}" for i in range(len(order))]
    scores = np.zeros(len(order))
    for pos, k in enumerate(order):
        scores[k] = 1.0 - 0.1 * pos
    ranked = [Ranked(k, names[k], scores[k], 0.0) for k in order]
    return Prediction(video_id, ranked, 1, scores, np.full(len(order), 1 / len(order)))


# harmonic mean


@pytest.mark.parametrize(
    "base,novel,want",
    [(74.6, 55.9, 63.9), (77.2, 64.1, 70.0), (76.4, 61.1, 67.9), (50.0, 50.0, 50.0)],
)
def test_harmonic_mean_examples(base, novel, want):
    assert round(harmonic_mean(base, novel), 1) == want


def test_harmonic_mean_rejects_non_positive():
    with pytest.raises(NonPositive):
        harmonic_mean(0.0, 50.0)
    with pytest.raises(NonPositive):
        harmonic_mean(50.0, -1.0)


@given(st.floats(0.01, 100), st.floats(0.01, 100))
def test_harmonic_mean_properties(a, b):
    assert harmonic_mean(a, b) == harmonic_mean(b, a)
    assert harmonic_mean(a, b) <= (a + b) / 2 * (1 + 1e-12)
    assert math.isclose(harmonic_mean(a, a), a, rel_tol=1e-12)


# top-k accuracy


def test_top1_top5_all_correct():
    preds = [fake_prediction([0, 1, 2, 3, 4, 5]) for _ in range(4)]
    assert top1_top5(preds, ["c0"] * 4) == (100.0, 100.0)


def test_top1_top5_always_third():
    preds = [fake_prediction([1, 2, 0, 3, 4, 5]) for _ in range(3)]
    assert top1_top5(preds, ["c0"] * 3) == (0.0, 100.0)
    assert top1_top5(preds, [0, 0, 0]) == (0.0, 100.0)


def test_top1_top5_mixed_hand_count():
    # true class c0 at these ranks (1-based): 1, 2, 6, 1, 5, 3, 7, 1, 4, 6
    ranks = [1, 2, 6, 1, 5, 3, 7, 1, 4, 6]
    preds = []
    for r in ranks:
        order = [1, 2, 3, 4, 5, 6, 7]
        order.insert(r - 1, 0)
        preds.append(fake_prediction(order))
    # rank 1: three videos; ranks 1..5: 1,2,1,5,3,1,4 -> seven videos
    assert top1_top5(preds, ["c0"] * 10) == (30.0, 70.0)


def test_top1_top5_few_categories():
    preds = [fake_prediction([1, 0]), fake_prediction([0, 1])]
    assert top1_top5(preds, ["c0", "c0"]) == (50.0, 100.0)


def test_top1_top5_missing_label():
    with pytest.raises(MissingLabel):
        top1_top5([fake_prediction([0, 1])], [None])


# aggregation


def test_aggregate_examples():
    m, s = mean_std([54.6, 55.4, 56.2])
    assert m == pytest.approx(55.4, abs=1e-12)
    assert s == pytest.approx(0.653, abs=5e-4)
    assert mean_std([70.0, 70.0, 70.0]) == (70.0, 0.0)
    rep = aggregate_splits([SplitMetrics(61.0, 80.0)])
    assert (rep.mean, rep.std) == (61.0, 0.0)


def test_aggregate_report_fields():
    splits = [SplitMetrics(54.6, 80.0), SplitMetrics(55.4, 81.0), SplitMetrics(56.2, 82.0)]
    rep = aggregate_splits(splits, "zeroshot")
    assert rep.top1 == pytest.approx(55.4)
    assert rep.top5 == pytest.approx(81.0)
    d = json.loads(rep.to_json())
    assert d["protocol"] == "zeroshot" and len(d["splits"]) == 3
    assert "55.4 +/- 0.7" in rep.table()


def test_report_invariants():
    with pytest.raises(BadParams):
        MetricsReport("x", 60, 50, 60, 0, [SplitMetrics(60.0, 50.0)])
    with pytest.raises(BadParams):
        MetricsReport("x", 101, 101, 101, 0, [SplitMetrics(101.0, 101.0)])


# splits


def test_base_novel_order_by_count():
    m = manifest_with([10, 8, 6, 4], per_split=3)
    base, novel, _ = make_base_novel_split(m, SplitSpec("base_to_novel", shots=2))
    assert (base, novel) == (["c0", "c1"], ["c2", "c3"])
    m = manifest_with([4, 6, 8, 10], per_split=3)
    base, novel, _ = make_base_novel_split(m, SplitSpec("base_to_novel", shots=2))
    assert (base, novel) == (["c3", "c2"], ["c1", "c0"])


def test_base_novel_ceil_half_and_name_ties():
    m = manifest_with([5, 5, 5, 5, 5], per_split=3, names=["e", "d", "c", "b", "a"])
    base, novel, train = make_base_novel_split(m, SplitSpec("base_to_novel", shots=2))
    assert base == ["a", "b", "c"]
    assert novel == ["d", "e"]
    assert len(train) == 6
    assert {v.label for v in train} == set(base)
    assert all(v.split == "train" for v in train)


def test_base_novel_deterministic_and_seeded():
    m = manifest_with([20, 18, 16, 14], per_split=12)
    spec = SplitSpec("base_to_novel", shots=4, seed=3)
    a = [make_base_novel_split(m, spec, i)[2] for i in range(3)]
    b = [make_base_novel_split(m, spec, i)[2] for i in range(3)]
    assert a == b
    assert len({tuple(v.video_id for v in t) for t in a}) > 1


def test_base_novel_insufficient_samples_warns():
    m = manifest_with([10, 8, 6, 4], per_split=3)
    with pytest.warns(InsufficientSamples):
        _, _, train = make_base_novel_split(m, SplitSpec("base_to_novel", shots=16))
    assert len(train) == 6


def test_zero_shot_subsets_protocol_shape():
    m = manifest_with([1] * 220, per_split=0)
    subsets = make_zero_shot_subsets(m, SplitSpec("zero_shot_subsets", subset_size=160))
    assert len(subsets) == 3
    assert all(len(s) == 160 == len(set(s)) for s in subsets)
    assert len({tuple(s) for s in subsets}) == 3
    assert subsets == make_zero_shot_subsets(m, SplitSpec("zero_shot_subsets", subset_size=160))
    other = make_zero_shot_subsets(m, SplitSpec("zero_shot_subsets", subset_size=160, seed=1))
    assert other != subsets


def test_zero_shot_full_size_and_errors():
    m = manifest_with([1] * 5, per_split=0)
    full = make_zero_shot_subsets(m, SplitSpec("zero_shot_subsets", subset_size=5, n_splits=2))
    assert full == [m.class_names, m.class_names]
    with pytest.raises(BadParams):
        make_zero_shot_subsets(m, SplitSpec("zero_shot_subsets", subset_size=6))


def test_few_shot_sampling():
    m = manifest_with([3, 2, 5])
    assert len(sample_few_shot(m, 2, seed=0)) == 6
    with pytest.warns(InsufficientSamples):
        got = sample_few_shot(m, 4, seed=0)
    assert len(got) == 3 + 2 + 4
    assert all(v.split == "train" for v in got)
    assert sample_few_shot(m, 2, seed=9) == sample_few_shot(m, 2, seed=9)
    with pytest.raises(BadParams):
        sample_few_shot(m, 0, seed=0)


def test_manifest_validation_and_round_trip(tmp_path):
    m = manifest_with([2, 3])
    m.save(tmp_path / "d.json")
    back = DatasetManifest.read(tmp_path / "d.json")
    assert back == m
    with pytest.raises(ManifestError):
        DatasetManifest("x", [ClassInfo(0, "a", 1)], [VideoEntry("v", "b", "train", "f")])
    with pytest.raises(ManifestError):
        DatasetManifest("x", [ClassInfo(0, "a", 1)], [VideoEntry("v", "a", "train", "f")] * 2)


# protocols on synthetic data


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    ds = synth_generate(SynthParams(n_classes=8, dim=32, test_videos=3, seed=2))
    ds.write(out, created_at="t")
    return out, ds


def test_zeroshot_runner(synth_dir):
    out, ds = synth_dir
    m = DatasetManifest.read(out / "dataset.json")
    bank = CategoryBank.load(out / "bank.json")
    spec = SplitSpec("zero_shot_subsets", subset_size=5, seed=0)
    rep = run_zeroshot(m, RecordStore(m), bank, spec)
    assert len(rep.splits) == 3
    assert all(s.n_videos == 15 and s.classes == 5 for s in rep.splits)
    assert rep.to_json() == run_zeroshot(m, RecordStore(m, out / "frames"), bank, spec, jobs=2).to_json()


def test_base2novel_runner(synth_dir):
    out, ds = synth_dir
    m = DatasetManifest.read(out / "dataset.json")
    bank = CategoryBank.load(out / "bank.json")
    spec = SplitSpec("base_to_novel", shots=2, n_splits=2, seed=0)
    rep = run_base2novel(m, RecordStore(m), bank, spec)
    assert rep.hm is not None and len(rep.splits) == 2
    for s in rep.splits:
        assert s.hm == pytest.approx(harmonic_mean(s.base, s.novel))
    trained = run_base2novel(m, RecordStore(m), bank, spec, train_config=TrainConfig(epochs=2))
    assert trained.settings["trained"] is True


def test_fewshot_runner(synth_dir):
    out, ds = synth_dir
    m = DatasetManifest.read(out / "dataset.json")
    bank = CategoryBank.load(out / "bank.json")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", InsufficientSamples)
        a = run_fewshot(m, RecordStore(m), bank, 2, seed=1, train_config=TrainConfig(epochs=2))
        b = run_fewshot(m, RecordStore(m), bank, 2, seed=1, train_config=TrainConfig(epochs=2))
    assert a.to_json() == b.to_json()
    assert a.splits[0].n_videos == 8 * 3
