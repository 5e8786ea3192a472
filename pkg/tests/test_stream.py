import numpy as np
import pytest

from midl.adapt import Adapter, AdapterConfig
from midl.data import MultimodalDataset, accuracy
from midl.errors import ValidationError
from midl.model import Modality, ModelConfig, MultimodalClassifier
from midl.stream import (OnlineMetrics, StreamSchedule, TRACE_COLUMNS, argmax_label, build_schedule,
                         make_events, run_events, run_protocol, sample_order)

CFG = ModelConfig(audio_dim=3, video_dim=3, hidden_dim=6, num_classes=3)


@pytest.fixture
def dataset(rng):
    n = 60
    return MultimodalDataset(rng.normal(size=(n, 3)), rng.normal(size=(n, 3)),
                             rng.integers(0, 3, size=n), num_classes=3)


@pytest.fixture
def model():
    return MultimodalClassifier(CFG, seed=3)


def test_schedule_frequencies():
    seq = build_schedule((0.25, 0.0, 0.75), seed=11, n=100_000)
    counts = {m: seq.count(m) / len(seq) for m in Modality}
    assert counts[Modality.V] == 0
    assert abs(counts[Modality.A] - 0.25) <= 0.01
    assert abs(counts[Modality.AV] - 0.75) <= 0.01


def test_mixed_schedule_frequencies():
    sched = StreamSchedule.from_missing_rate(0.75, seed=5, length=100_000, missing="mixed")
    assert sched.probabilities == (0.375, 0.375, 0.25)
    seq = sched.modalities()
    for m, p in zip(Modality, sched.probabilities):
        assert abs(seq.count(m) / len(seq) - p) <= 0.01


def test_schedule_is_seeded():
    p = (0.3, 0.3, 0.4)
    assert build_schedule(p, 7, 500) == build_schedule(p, 7, 500)
    assert build_schedule(p, 7, 500) != build_schedule(p, 8, 500)
    # a longer schedule extends a shorter one
    assert build_schedule(p, 7, 800)[:500] == build_schedule(p, 7, 500)


def test_degenerate_schedules():
    assert set(build_schedule((0.0, 0.0, 1.0), 1, 200)) == {Modality.AV}
    assert set(build_schedule((1.0, 0.0, 0.0), 1, 200)) == {Modality.A}
    assert set(StreamSchedule.from_missing_rate(1.0, length=50, missing="audio").modalities()) == {Modality.V}


@pytest.mark.parametrize("p", [(0.5, 0.5, 0.5), (-0.1, 0.6, 0.5), (0.5, 0.5), (float("nan"), 0.5, 0.5)])
def test_invalid_probabilities(p):
    with pytest.raises(ValidationError):
        build_schedule(p, 0, 10)


def test_invalid_schedule_arguments():
    with pytest.raises(ValidationError):
        StreamSchedule.from_missing_rate(1.5)
    with pytest.raises(ValidationError):
        StreamSchedule.from_missing_rate(0.5, missing="both")
    with pytest.raises(ValidationError):
        StreamSchedule(0, 0, 1, length=0)
    with pytest.raises(ValidationError):
        make_events(StreamSchedule(0, 0, 1, length=11), dataset_size=10)


def test_sample_order_is_a_permutation():
    order = sample_order(3, 50)
    assert sorted(order.tolist()) == list(range(50))
    np.testing.assert_array_equal(order, sample_order(3, 50))


def test_argmax_ties_go_low():
    assert argmax_label([0.25, 0.25, 0.5]) == 2
    assert argmax_label([0.4, 0.4, 0.2]) == 0
    assert argmax_label(np.full(4, 0.25)) == 0


def test_none_equals_offline_accuracy(model, dataset):
    sched = StreamSchedule(0, 0, 1, seed=2, length=len(dataset))
    metrics = run_protocol(Adapter(model, AdapterConfig(method="none")), sched, dataset)
    assert metrics.total == len(dataset)
    assert metrics.accuracy == pytest.approx(accuracy(model, dataset, "AV"), abs=1e-12)


def test_per_modality_totals(model, dataset):
    sched = StreamSchedule(0.3, 0.3, 0.4, seed=4, length=len(dataset))
    m = run_protocol(Adapter(model, AdapterConfig(method="midl")), sched, dataset)
    assert sum(n for _, n in m.per_modality.values()) == m.total
    assert sum(c for c, _ in m.per_modality.values()) == m.correct
    assert m.adapted_steps == m.per_modality["AV"][1]


def test_warmup_then_evaluate_composes(model, dataset):
    events = make_events(StreamSchedule(0.2, 0.2, 0.6, seed=9, length=60), 60)
    whole = Adapter(model, AdapterConfig(method="midl", learning_rate=0.05))
    run_events(whole, dataset, events[:30], phase="warmup")
    second = run_events(whole, dataset, events[30:])

    ref = Adapter(model, AdapterConfig(method="midl", learning_rate=0.05))
    full = run_events(ref, dataset, events)
    np.testing.assert_array_equal(np.array(second.predictions), np.array(full.predictions[30:]))


def test_warmup_reads_no_labels(model, dataset):
    class Poisoned:
        def __getitem__(self, key):
            raise AssertionError("labels read during warmup")

        def __len__(self):
            return 60

    dataset.labels = Poisoned()
    sched = StreamSchedule(0, 0, 1, seed=1, length=20)
    m = run_protocol(Adapter(model, AdapterConfig(method="midl")), sched, dataset, phase="warmup")
    assert m.total == 0 and m.adapted_steps == 20


def test_causality_prefix(model, dataset):
    full = StreamSchedule(0.25, 0, 0.75, seed=6, length=60)
    prefix = StreamSchedule(0.25, 0, 0.75, seed=6, length=30)
    a = run_protocol(Adapter(model, AdapterConfig(method="midl", learning_rate=0.05)), full, dataset)
    b = run_protocol(Adapter(model, AdapterConfig(method="midl", learning_rate=0.05)), prefix, dataset)
    np.testing.assert_array_equal(np.array(a.predictions[:30]), np.array(b.predictions))


def test_batched_method_scores_every_sample(model, dataset):
    sched = StreamSchedule(0, 0, 1, seed=1, length=21)
    m = run_protocol(Adapter(model, AdapterConfig(method="shot")), sched, dataset)
    assert m.total == 21
    assert m.adapted_steps == 3


def test_trace_csv(tmp_path, model, dataset):
    sched = StreamSchedule(0.5, 0, 0.5, seed=1, length=10)
    m = run_protocol(Adapter(model, AdapterConfig(method="midl")), sched, dataset)
    path = tmp_path / "trace.csv"
    m.write_trace(path)
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == list(TRACE_COLUMNS)
    assert len(lines) == 11
    for line, row in zip(lines[1:], m.trace):
        cells = line.split(",")
        assert cells[1] == row["modality"]
        # unimodal rows carry no losses
        assert (cells[5] == "") == (row["modality"] != "AV")
    assert set(m.mean_losses()) == {"l_ent", "l_div", "l_mi", "l_kl"}


def test_empty_metrics():
    m = OnlineMetrics()
    assert np.isnan(m.accuracy)
    assert m.per_modality_accuracy() == {"A": None, "V": None, "AV": None}
