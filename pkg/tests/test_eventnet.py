"""Classifier variants: probability contracts, sensitivity, capacity, stream."""

import numpy as np
import pytest

from tev import dataset as ds
from tev import eventnet as ev
from tev import numerics as nx
from tev.errors import ConfigurationError, DimensionError


def _sequences(n_per_class, seed=5, noise=ds.DEFAULT_NOISE_MM):
    return ds.build_corpus(n_per_class, seed=seed, noise_mm=noise).sequences


def _random_frames(rng, t=15):
    return rng.normal(0.0, 0.5, size=(t, 2, 30, 30)).astype(np.float32)


# ---------------------------------------------------------------------------
# Config validation
# ---------------------------------------------------------------------------


def test_config_rejects_unknown_variant():
    with pytest.raises(ConfigurationError):
        ev.ClassifierConfig(variant="transformer")


def test_config_rejects_bad_input_len():
    with pytest.raises(ConfigurationError):
        ev.ClassifierConfig(input_len=0)
    with pytest.raises(ConfigurationError):
        ev.ClassifierConfig(input_len=16)


def test_config_rejects_wrong_head_width():
    with pytest.raises(ConfigurationError):
        ev.ClassifierConfig(n_classes=5)


def test_default_config_widths_per_variant():
    assert ev.default_config("lstm").hidden == 256
    assert ev.default_config("cnn_lstm").hidden == 128
    assert ev.default_config("convlstm").hidden == 8  # hidden channels
    assert ev.default_config("convlstm", hidden=16).hidden == 16


# ---------------------------------------------------------------------------
# Probability contracts
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("variant", ev.VARIANTS)
def test_zeroed_output_layer_gives_uniform_probabilities(variant):
    cfg = ev.default_config(variant, seed=1, hidden=8 if variant == "convlstm" else 32)
    params = ev.init_classifier(cfg)
    params["fc2.w"] = nx.parameter(np.zeros_like(params["fc2.w"].data))
    params["fc2.b"] = nx.parameter(np.zeros_like(params["fc2.b"].data))
    out = ev.classify(params, cfg, _random_frames(np.random.default_rng(0)))
    assert np.allclose(out.probabilities, 1.0 / 7.0, atol=1e-7)
    assert np.allclose(out.logits, 0.0)


@pytest.mark.parametrize("variant", ev.VARIANTS)
def test_probabilities_sum_to_one(variant):
    cfg = ev.default_config(variant, seed=2, hidden=8 if variant == "convlstm" else 32)
    params = ev.init_classifier(cfg)
    rng = np.random.default_rng(3)
    batch = np.stack([_random_frames(rng) for _ in range(4)])
    probs = ev.forward(params, cfg, batch).data
    assert probs.shape == (4, 7)
    assert np.all(probs >= 0)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_argmax_invariant_under_monotone_logit_transform():
    cfg = ev.default_config("lstm", seed=4, hidden=32)
    params = ev.init_classifier(cfg)
    out = ev.classify(params, cfg, _random_frames(np.random.default_rng(5)))
    warped = 3.0 * out.logits + 1.0
    e = np.exp(warped - warped.max())
    assert int(np.argmax(e / e.sum())) == out.label.value


def test_logits_reproduce_probabilities():
    cfg = ev.default_config("lstm", seed=4, hidden=32)
    params = ev.init_classifier(cfg)
    out = ev.classify(params, cfg, _random_frames(np.random.default_rng(6)))
    e = np.exp(out.logits - out.logits.max())
    assert np.allclose(e / e.sum(), out.probabilities, atol=1e-6)


# ---------------------------------------------------------------------------
# Sensitivity
# ---------------------------------------------------------------------------


def test_lstm_is_sensitive_to_frame_order():
    cfg = ev.default_config("lstm", seed=7, hidden=64)
    params = ev.init_classifier(cfg)
    frames = _random_frames(np.random.default_rng(8))
    swapped = frames.copy()
    swapped[[5, 11]] = swapped[[11, 5]]
    a = ev.classify(params, cfg, frames).probabilities
    b = ev.classify(params, cfg, swapped).probabilities
    assert not np.allclose(a, b, atol=1e-7)


def test_convlstm_is_sensitive_to_patch_position():
    cfg = ev.default_config("convlstm", seed=9, hidden=8)
    params = ev.init_classifier(cfg)
    base = np.zeros((15, 2, 30, 30), dtype=np.float32)
    base[:, 0, 8:14, 8:14] = 1.0
    shifted = np.roll(base, shift=9, axis=3)
    a = ev.classify(params, cfg, base).logits
    b = ev.classify(params, cfg, shifted).logits
    assert not np.allclose(a, b, atol=1e-7)


def test_convlstm_flattened_feature_length():
    cfg = ev.default_config("convlstm", hidden=8)
    params = ev.init_classifier(cfg)
    assert params["fc1.w"].shape[0] == 8 * 30 * 30 == 7200


def test_cnn_encoder_feature_length_is_content_independent():
    cfg = ev.default_config("cnn_lstm")
    params = ev.init_classifier(cfg)
    # Two stride-2 convs take 30x30 to 8x8; 16 channels -> 1024 features.
    assert params["lstm.w"].shape[0] == 16 * 8 * 8 + cfg.hidden


# ---------------------------------------------------------------------------
# Dropout and determinism
# ---------------------------------------------------------------------------


def test_infer_mode_is_deterministic():
    cfg = ev.default_config("lstm", seed=10, hidden=32)
    params = ev.init_classifier(cfg)
    frames = _random_frames(np.random.default_rng(11))
    a = ev.classify(params, cfg, frames).probabilities
    b = ev.classify(params, cfg, frames).probabilities
    assert np.array_equal(a, b)


def test_train_mode_requires_rng_and_perturbs_output():
    cfg = ev.default_config("lstm", seed=10, hidden=32)
    params = ev.init_classifier(cfg)
    frames = _random_frames(np.random.default_rng(12))
    with pytest.raises(ConfigurationError):
        ev.forward(params, cfg, frames[None], mode="train")
    a = ev.forward(params, cfg, frames[None], mode="train", rng=np.random.default_rng(1))
    b = ev.forward(params, cfg, frames[None], mode="train", rng=np.random.default_rng(2))
    assert not np.allclose(a.data, b.data, atol=1e-7)


def test_forward_rejects_unknown_mode():
    cfg = ev.default_config("lstm", hidden=32)
    params = ev.init_classifier(cfg)
    with pytest.raises(ConfigurationError):
        ev.forward(params, cfg, _random_frames(np.random.default_rng(0)), mode="test")


# ---------------------------------------------------------------------------
# Shape errors
# ---------------------------------------------------------------------------


def test_wrong_grid_is_rejected():
    cfg = ev.default_config("lstm", hidden=32)
    params = ev.init_classifier(cfg)
    with pytest.raises(DimensionError):
        ev.classify(params, cfg, np.zeros((15, 2, 16, 16), dtype=np.float32))


def test_too_few_frames_is_rejected():
    cfg = ev.default_config("lstm", hidden=32, input_len=12)
    params = ev.init_classifier(cfg)
    with pytest.raises(DimensionError):
        ev.classify(params, cfg, np.zeros((8, 2, 30, 30), dtype=np.float32))


def test_seq_first_wrappers_accept_tactile_sequences():
    seq = _sequences(1)[3]
    cfg = ev.default_config("lstm")
    params = ev.init_classifier(cfg)
    out = ev.forward_lstm(seq, params)
    ref = ev.classify(params, cfg, seq)
    assert np.array_equal(out.probabilities, ref.probabilities)
    assert out.latency_ms > 0.0


# ---------------------------------------------------------------------------
# Gradient flow and capacity
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("variant", ev.VARIANTS)
def test_every_parameter_receives_gradient(variant):
    cfg = ev.default_config(variant, seed=20, hidden=8 if variant == "convlstm" else 32)
    params = ev.init_classifier(cfg)
    rng = np.random.default_rng(21)
    batch = np.stack([_random_frames(rng) for _ in range(3)])
    onehot = np.eye(7, dtype=np.float32)[[1, 4, 6]]
    with nx.Tape() as tape:
        probs = ev.forward(params, cfg, batch, mode="train", rng=rng)
        loss = nx.cross_entropy(probs, onehot)
    tape.backward(loss)
    for name, p in params.items():
        g = tape.grad(p)
        assert g is not None and np.any(g != 0), f"no gradient reached {name}"


@pytest.mark.parametrize("variant", ev.VARIANTS)
def test_fifty_steps_overfit_ten_sequences(variant):
    seqs = _sequences(2, seed=30)[:10]
    batch = np.stack([s.frames for s in seqs])
    onehot = np.stack([ds.one_hot(s.label) for s in seqs])
    cfg = ev.default_config(
        variant, seed=31, hidden=8 if variant == "convlstm" else 64, dropout_p=0.0
    )
    params = ev.init_classifier(cfg)
    state = nx.AdamState(params, nx.LrSchedule(5e-3))
    for _ in range(50):
        with nx.Tape() as tape:
            probs = ev.forward(params, cfg, batch, mode="train", rng=np.random.default_rng(0))
            loss = nx.cross_entropy(probs, onehot)
        tape.backward(loss)
        nx.adam_step(params, {k: tape.grad(v) for k, v in params.items()}, state)
    final = nx.cross_entropy(ev.forward(params, cfg, batch), onehot)
    assert float(final.data) < 0.05


# ---------------------------------------------------------------------------
# Streaming
# ---------------------------------------------------------------------------


def test_stream_outputs_stale_until_window_fills():
    cfg = ev.default_config("lstm", hidden=32, seed=40)
    params = ev.init_classifier(cfg)
    rng = np.random.default_rng(41)
    frames = [rng.normal(0, 0.3, (2, 30, 30)).astype(np.float32) for _ in range(30)]
    outs = list(ev.classify_stream(iter(frames), params, cfg))
    assert len(outs) == 30
    need = (cfg.input_len - 1) * 2 + 1  # 23 frames at stride 2
    for i, (t, out) in enumerate(outs):
        assert t == pytest.approx(i / 30.0)
        assert out.stale == (i < need - 1)
    assert np.allclose(outs[0][1].probabilities, 1.0 / 7.0)


def test_stream_window_is_anchored_at_newest_frame():
    cfg = ev.default_config("lstm", hidden=32, seed=42)
    params = ev.init_classifier(cfg)
    rng = np.random.default_rng(43)
    frames = [rng.normal(0, 0.3, (2, 30, 30)).astype(np.float32) for _ in range(40)]
    outs = list(ev.classify_stream(iter(frames), params, cfg))
    # Reference: every stride-th frame counting back from the newest.
    for tick in (22, 30, 39):
        idx = [tick - 2 * k for k in range(cfg.input_len)][::-1]
        window = np.stack([frames[j] for j in idx])
        ref = ev.classify(params, cfg, window)
        assert np.array_equal(outs[tick][1].probabilities, ref.probabilities)
        assert not outs[tick][1].stale


def test_stream_rejects_bad_frame_shape():
    cfg = ev.default_config("lstm", hidden=32)
    params = ev.init_classifier(cfg)
    with pytest.raises(DimensionError):
        list(ev.classify_stream([np.zeros((2, 10, 10))], params, cfg))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def test_classifier_checkpoint_round_trip(tmp_path):
    cfg = ev.default_config("cnn_lstm", seed=50, hidden=16)
    params = ev.init_classifier(cfg)
    path = str(tmp_path / "clf.tevw")
    ev.save_classifier(path, cfg, params)
    cfg2, params2 = ev.load_classifier(path)
    assert cfg2 == cfg
    frames = _random_frames(np.random.default_rng(51))
    a = ev.classify(params, cfg, frames).probabilities
    b = ev.classify(params2, cfg2, frames).probabilities
    assert np.array_equal(a, b)


def test_load_rejects_non_classifier_checkpoint(tmp_path):
    from tev.checkpoint import save_params

    path = str(tmp_path / "other.tevw")
    save_params(path, {"kind": "something"}, {"w": np.zeros(3, dtype=np.float32)})
    with pytest.raises(ConfigurationError):
        ev.load_classifier(path)
