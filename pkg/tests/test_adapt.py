import numpy as np
import pytest

from midl.adapt import Adapter, AdapterConfig, Method, count_compute, on_sample, sgd_step
from midl.autodiff import Tensor
from midl.data import MultimodalSample
from midl.errors import ConfigurationError, ContractError
from midl.losses import midl_loss, mi_loss
from midl.model import Modality, ModelConfig, MultimodalClassifier

CFG = ModelConfig(audio_dim=5, video_dim=4, hidden_dim=8, num_classes=4, encoder_layers=2)


@pytest.fixture
def model():
    return MultimodalClassifier(CFG, seed=1)


def make_samples(rng, n):
    return [MultimodalSample(rng.normal(size=5), rng.normal(size=4), int(rng.integers(4))) for _ in range(n)]


# ---------------------------------------------------------------------- sgd


def test_sgd_zero_gradient_decays_buffer():
    p = {"w": Tensor([1.0, 2.0])}
    buf = {"w": np.array([0.5, -1.0])}
    sgd_step(p, {"w": np.zeros(2)}, buf, lr=0.1, momentum=0.9)
    np.testing.assert_allclose(buf["w"], [0.45, -0.9])
    # the decayed buffer still moves the parameter
    np.testing.assert_allclose(p["w"].data, [1.0 - 0.045, 2.0 + 0.09])
    q = {"w": Tensor([1.0, 2.0])}
    sgd_step(q, {"w": np.zeros(2)}, {"w": np.zeros(2)}, lr=0.1, momentum=0.9)
    np.testing.assert_array_equal(q["w"].data, [1.0, 2.0])


def test_sgd_vanilla():
    p = {"w": Tensor([1.0, -1.0])}
    g = np.array([0.3, 0.7])
    sgd_step(p, {"w": g}, {"w": np.zeros(2)}, lr=0.5, momentum=0.0)
    np.testing.assert_array_equal(p["w"].data, np.array([1.0, -1.0]) - 0.5 * g)


def test_sgd_two_step_recurrence():
    p = {"w": Tensor([0.0])}
    buf = {"w": np.zeros(1)}
    g = np.array([2.0])
    for _ in range(2):
        sgd_step(p, {"w": g}, buf, lr=0.01, momentum=0.9)
    # v1 = g, v2 = 0.9 g + g
    assert p["w"].data[0] == pytest.approx(-0.01 * 2.0 * (1 + 1.9), rel=1e-15)


def test_sgd_shape_mismatch():
    with pytest.raises(ContractError):
        sgd_step({"w": Tensor([1.0])}, {"w": np.zeros(2)}, {"w": np.zeros(1)}, 0.1, 0.0)


# ------------------------------------------------------------------- config


@pytest.mark.parametrize("kwargs", [{"method": "sar"}, {"learning_rate": 0}, {"momentum": 1.0},
                                    {"kl_mode": "each"}, {"param_selection": "head"}, {"batch_size": 0}])
def test_invalid_adapter_config(kwargs):
    with pytest.raises(ConfigurationError):
        AdapterConfig(**kwargs)


def test_batch_size_defaults():
    assert AdapterConfig(method="shot").resolved_batch_size == 8
    assert AdapterConfig(method="midl").resolved_batch_size == 1
    assert AdapterConfig(method="shot", batch_size=2).resolved_batch_size == 2


def test_resolved_config_materializes_defaults():
    r = AdapterConfig(method="eta").resolved(num_classes=8)
    assert r["eta_threshold"] == pytest.approx(0.4 * np.log(8))
    assert r["batch_size"] == 1


# ------------------------------------------------------------------ protocol


def _state(adapter):
    return {n: p.data.copy() for n, p in adapter.model.params.items()}


def test_midl_unimodal_sample_does_not_adapt(model, rng):
    a = Adapter(model, AdapterConfig(method="midl"))
    before = _state(a)
    for s in make_samples(rng, 5):
        pred, adapted = on_sample(a, s, "A")
        assert not adapted
        assert pred.shape == (4,)
    after = _state(a)
    for n in before:
        np.testing.assert_array_equal(before[n], after[n])


def test_none_matches_frozen(model, rng):
    a = Adapter(model, AdapterConfig(method="none"))
    for s, m in zip(make_samples(rng, 6), "A V AV AV A V".split()):
        pred, adapted = a.on_sample(s, m)
        assert not adapted
        np.testing.assert_array_equal(pred, model.predict(s.audio, s.video, m)[0])


def test_prediction_precedes_update(model, rng):
    a = Adapter(model, AdapterConfig(method="midl", learning_rate=0.5))
    s = make_samples(rng, 1)[0]
    expected = model.predict(s.audio, s.video, "AV")[0]
    pred, adapted = a.on_sample(s, "AV")
    assert adapted
    np.testing.assert_array_equal(pred, expected)
    assert not np.array_equal(a.model.predict(s.audio, s.video, "AV")[0], expected)


def test_midl_step_descends(model, rng):
    for s in make_samples(rng, 5):
        a = Adapter(model, AdapterConfig(method="midl"))
        before = midl_loss(a.model, a.frozen, s).total.item()
        a.on_sample(s, "AV")
        after = midl_loss(a.model, a.frozen, s).total.item()
        assert after <= before + 1e-6


def test_dl_only_is_inert(model, rng):
    a = Adapter(model, AdapterConfig(method="dl_only"))
    before = _state(a)
    for s in make_samples(rng, 50):
        _, adapted = a.on_sample(s, "AV")
        assert adapted
    after = _state(a)
    assert max(np.abs(after[n] - before[n]).max() for n in before) <= 1e-9


def test_mi_only_zero_gradient_when_views_agree(model):
    # all-zero features: zero-filling changes nothing, so the three views coincide
    s = MultimodalSample(np.zeros(5), np.zeros(4), 0)
    a = Adapter(model, AdapterConfig(method="mi_only", learning_rate=1.0))
    before = _state(a)
    a.on_sample(s, "AV")
    after = _state(a)
    assert max(np.abs(after[n] - before[n]).max() for n in before) <= 1e-12


def test_mi_only_descends_over_steps(model, rng):
    samples = make_samples(rng, 4)
    audio = np.stack([s.audio for s in samples])
    video = np.stack([s.video for s in samples])
    a = Adapter(model, AdapterConfig(method="mi_only", batch_size=4))

    def l_mi():
        return mi_loss([a.model.predict(audio, video, m) for m in "A V AV".split()])[2].item()

    start = l_mi()
    for _ in range(50):
        a.on_batch(audio, video, ["AV"] * 4)
    assert l_mi() < start


def test_compute_counters(model, rng):
    samples = make_samples(rng, 10)
    a = Adapter(model, AdapterConfig(method="midl"))
    for s in samples:
        a.on_sample(s, "AV")
    assert count_compute(a) == (30, 10, 10)
    b = Adapter(model, AdapterConfig(method="midl"))
    for s in samples:
        b.on_sample(s, "A")
    assert b.count_compute() == (10, 0, 0)
    c = Adapter(model, AdapterConfig(method="none"))
    for s in samples:
        c.on_sample(s, "AV")
    assert c.count_compute() == (10, 0, 0)


def test_per_modality_uses_three_frozen_passes(model, rng):
    a = Adapter(model, AdapterConfig(method="midl", kl_mode="per_modality"))
    a.on_sample(make_samples(rng, 1)[0], "AV")
    assert a.count_compute() == (3, 3, 1)


def test_frozen_model_never_changes(model, rng):
    probe = make_samples(rng, 1)[0]
    a = Adapter(model, AdapterConfig(method="midl", learning_rate=0.1, param_selection="all"))
    ref = a.frozen.predict(probe.audio, probe.video, "AV")
    for s in make_samples(rng, 20):
        a.on_sample(s, "AV")
    np.testing.assert_array_equal(a.frozen.predict(probe.audio, probe.video, "AV"), ref)
    # the caller's model is untouched as well
    np.testing.assert_array_equal(model.predict(probe.audio, probe.video, "AV"), ref)


@pytest.mark.parametrize("method", ["midl", "mi_only", "tent", "shot", "eta"])
def test_norm_only_changes_only_norm_parameters(model, rng, method):
    a = Adapter(model, AdapterConfig(method=method, learning_rate=0.05, batch_size=2,
                                     eta_threshold=10.0))
    before = _state(a)
    samples = make_samples(rng, 20)
    for i in range(0, 20, 2):
        pair = samples[i:i + 2]
        a.on_batch(np.stack([s.audio for s in pair]), np.stack([s.video for s in pair]), ["AV", "AV"])
    changed = {n for n in before if not np.array_equal(before[n], a.model.params[n].data)}
    assert changed == set(model.norm_parameter_names())


def test_all_parameters_selection_changes_weights(model, rng):
    a = Adapter(model, AdapterConfig(method="midl", learning_rate=0.05, param_selection="all"))
    before = _state(a)
    for s in make_samples(rng, 5):
        a.on_sample(s, "AV")
    assert not np.array_equal(before["head.weight"], a.model.params["head.weight"].data)
    assert set(a.buffers) == set(model.params)


@pytest.mark.parametrize("method", ["tent", "eta"])
def test_baselines_adapt_on_unimodal_samples(model, rng, method):
    a = Adapter(model, AdapterConfig(method=method, eta_threshold=10.0))
    _, adapted = a.on_sample(make_samples(rng, 1)[0], "A")
    assert adapted
    b = Adapter(model, AdapterConfig(method=method, eta_threshold=10.0, baselines_adapt_unimodal=False))
    _, adapted = b.on_sample(make_samples(rng, 1)[0], "A")
    assert not adapted


def test_eta_skips_uncertain_samples(model, rng):
    a = Adapter(model, AdapterConfig(method="eta", eta_threshold=1e-6))
    _, adapted = a.on_sample(make_samples(rng, 1)[0], "AV")
    assert not adapted
    assert a.count_compute() == (1, 0, 0)


def test_shot_single_sample_has_zero_gradient(model, rng):
    a = Adapter(model, AdapterConfig(method="shot", batch_size=1, learning_rate=1.0))
    before = _state(a)
    a.on_sample(make_samples(rng, 1)[0], "AV")
    assert all(np.array_equal(before[n], a.model.params[n].data) for n in before)


def test_adapter_is_deterministic(model, rng):
    samples = make_samples(rng, 15)
    mods = ["AV", "A", "AV"] * 5

    def run():
        a = Adapter(model, AdapterConfig(method="midl"))
        return [a.on_sample(s, m)[0] for s, m in zip(samples, mods)]

    for x, y in zip(run(), run()):
        np.testing.assert_array_equal(x, y)
