import math

import numpy as np
import pytest

from amsl.config import ABLATIONS, RunConfig
from amsl.detect import reconstruction_errors
from amsl.model import AmslModel, fit, total_loss
from amsl.nn import rel_error
from amsl.signal import Window, sliding_windows

TINY = RunConfig(window_length=16, channels=2, memory_size=4, feature_size=8, epochs=5, batch_size=8, seed=0)


def tiny_windows(n, seed=0, v=16, ch=2):
    rng = np.random.default_rng(seed)
    t = np.arange(v)[:, None]
    out = []
    for i in range(n):
        phase = rng.uniform(0, 2 * np.pi)
        x = 0.5 + 0.4 * np.sin(2 * np.pi * t / 8 + phase + np.arange(ch)) + 0.02 * rng.standard_normal((v, ch))
        out.append(Window(x, f"s{i}", 0))
    return out


@pytest.fixture(scope="module")
def trained():
    ws = tiny_windows(48)
    model, history = fit(ws[:40], ws[40:], TINY)
    return model, history, ws


def test_forward_shapes_and_weight_sets():
    m = AmslModel(TINY)
    x = m.expand(tiny_windows(3))
    out = m.forward(x)
    assert out.recon.shape == (3, 7, 16, 2)
    assert out.logits.shape == (21, 7)
    assert len(out.weights) == 14
    assert all(w.shape[1] == 4 for w in out.weights)
    assert out.alpha.shape == (14,)


def test_single_item_memory_reads_that_item():
    m = AmslModel(TINY.replace(memory_size=1))
    out = m.forward(m.expand(tiny_windows(2)))
    assert all(np.all(w == 1.0) for w in out.weights)


def test_total_loss_identity():
    lb = total_loss(2.0, 0.5, 3.0, 1.0, 0.0002)
    assert lb.total == 2.0 + 0.5 + 0.0006


@pytest.mark.parametrize("ablation", ABLATIONS)
def test_ablation_components(ablation):
    m = AmslModel(TINY.replace(ablation=ablation))
    out = m.forward(m.expand(tiny_windows(2)))
    assert (out.logits is not None) == m.cfg.use_ssl
    assert bool(out.weights) == m.cfg.use_memory
    assert (out.alpha is not None) == (ablation == "full")
    # without the pretext task only the original window is reconstructed
    assert out.recon.shape == (2, 7 if m.cfg.use_ssl else 1, 16, 2)


def test_forward_rejects_bad_shape():
    m = AmslModel(TINY)
    with pytest.raises(ValueError):
        m.forward(np.zeros((2, 6, 16, 2)))
    with pytest.raises(ValueError):
        m.expand([Window(np.zeros((8, 2)), "s", 0)])


@pytest.mark.parametrize("ablation", ["full", "cae-ssl-mem", "cae"])
def test_end_to_end_gradients(ablation):
    cfg = TINY.replace(ablation=ablation, lambda2=0.05)
    m = AmslModel(cfg, dtype=np.float64)
    rng = np.random.default_rng(3)
    for p in m.parameters():
        if p.name.endswith("bias"):
            p.value[...] = 0.05 * rng.standard_normal(p.shape)
    x = m.expand(tiny_windows(4, seed=1)).astype(np.float64)
    saved = {k: v.copy() for k, v in m.buffers().items()}

    def loss():
        for k, v in m.buffers().items():
            v[...] = saved[k]
        return m.losses(x, m.forward(x, train=True, rng=np.random.default_rng(7))).total

    for p in m.parameters():
        p.zero_grad()
    m.backward(x, m.forward(x, train=True, rng=np.random.default_rng(7)))
    # 1e-5 lets some samples straddle a ReLU kink when a bias moves every activation at once
    eps = 1e-6
    for p in m.parameters():
        flat, gflat = p.value.reshape(-1), p.grad.reshape(-1)
        for i in rng.choice(flat.size, size=min(6, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + eps
            up = loss()
            flat[i] = old - eps
            down = loss()
            flat[i] = old
            num = (up - down) / (2 * eps)
            assert rel_error(np.array(gflat[i]), np.array(num), floor=1e-4) < 1e-3, (p.name, i)


def test_training_reduces_loss(trained):
    _, history, _ = trained
    assert len(history) == 5
    assert history[-1].total < history[0].total
    assert all(math.isfinite(h.val_total) for h in history)


def test_zero_epochs_returns_initial_model():
    ws = tiny_windows(8)
    model, history = fit(ws, [], TINY.replace(epochs=0))
    assert history == []
    fresh = AmslModel(TINY)
    for k, v in fresh.state_dict().items():
        np.testing.assert_array_equal(model.state_dict()[k], v)


def test_fit_is_deterministic():
    ws = tiny_windows(16)
    cfg = TINY.replace(epochs=2)
    _, h1 = fit(ws, ws[:4], cfg)
    _, h2 = fit(ws, ws[:4], cfg)
    assert h1 == h2


def test_fusion_trace_recorded(trained):
    model, _, _ = trained
    assert model.alpha_trace.shape == (5, 14)
    assert np.all((model.alpha_trace > 0) & (model.alpha_trace < 1))


def test_error_scoring_is_stable_and_spike_sensitive(trained):
    model, _, ws = trained
    probe = ws[40:44]
    a = reconstruction_errors(model, probe)
    np.testing.assert_array_equal(a, reconstruction_errors(model, probe))
    spiked = []
    for w in probe:
        v = w.values.copy()
        v[5:8, 0] += 3.0
        spiked.append(Window(v, w.source_id, 0))
    assert np.all(reconstruction_errors(model, spiked) > a)


def test_perfect_reconstruction_has_zero_error():
    class Echo(AmslModel):
        def forward(self, x, train=False, rng=None):
            out = super().forward(x, train, rng)
            out.recon = x.copy()
            return out

    m = Echo(TINY)
    assert np.all(m.window_errors(m.expand(tiny_windows(3))) == 0)


def test_sliding_windows_feed_model():
    series = np.random.default_rng(0).random((40, 2))
    ws = sliding_windows(series, 16, 8, "s")
    assert reconstruction_errors(AmslModel(TINY), ws).shape == (4,)
