import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from multiconcept.backend import AdapterSet, ToyConfig, ToyUNet
from multiconcept.errors import ConfigError, ContractError
from multiconcept.layout import (LayoutConfig, ReferenceFeatures, align_latents, extract_reference_features,
                                 layout_loss, window_timesteps)
from multiconcept.scheduler import make_schedule, timestep_grid


def test_loss_examples():
    ref = np.zeros((4, 3))
    assert layout_loss(ref, [ref, ref], ref) == 0.0
    base = ref.copy()
    base[2, 1] = 3.0
    assert layout_loss(base, [], ref) == 3.0
    one = np.zeros((1, 1)) + 1.0
    assert layout_loss(one, [one * 2, one * 4], np.zeros((1, 1)), alpha=1.0) == 4.0
    assert layout_loss(one, [one * 2, one * 4], np.zeros((1, 1)), alpha=0.5) == 2.5


def test_loss_shape_mismatch():
    with pytest.raises(ContractError):
        layout_loss(np.zeros((2, 2)), [np.zeros((3, 2))], np.zeros((2, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_loss_is_custom_order_invariant_and_matches_numpy(seed, n):
    r = np.random.default_rng(seed)
    ref, base = r.standard_normal((5, 3)), r.standard_normal((5, 3))
    customs = [r.standard_normal((5, 3)) for _ in range(n)]
    expected = np.sqrt(((base - ref) ** 2).sum()) + 0.7 * np.mean([np.sqrt(((c - ref) ** 2).sum()) for c in customs])
    got = layout_loss(base, customs, ref, 0.7)
    assert got == pytest.approx(expected, rel=1e-12)
    assert layout_loss(base, customs[::-1], ref, 0.7) == pytest.approx(got, rel=1e-14)


def test_loss_returns_tensor_for_tensors():
    out = layout_loss(torch.ones(2, 2, requires_grad=True), [], torch.zeros(2, 2))
    assert isinstance(out, torch.Tensor) and out.requires_grad


def test_config_validation_and_window():
    cfg = LayoutConfig()
    assert (cfg.alpha, cfg.lambda_step, cfg.window) == (1.0, 10.0, (0, 60))
    ts = window_timesteps(cfg, 200, 1000)
    assert len(ts) == 61 and ts == timestep_grid(200)[:61]
    assert cfg.active(60) and not cfg.active(61)
    for bad in ({"lambda_step": 0}, {"window": (5, 2)}, {"repeats_per_step": 0}):
        with pytest.raises(ConfigError):
            LayoutConfig(**bad)
    with pytest.raises(ConfigError):
        window_timesteps(LayoutConfig(window=(0, 60)), 50, 1000)


class FakeBackend:
    """Returns a fixed synthetic gradient."""

    supports_gradients = True

    def __init__(self, grad, loss=1.0):
        self.grad, self.loss = grad, loss

    def loss_gradient(self, z, t, inputs, fn, layer):
        return self.grad, self.loss


def test_update_is_lambda_times_gradient(rng):
    z, g = rng.standard_normal((4, 8, 8)), rng.standard_normal((4, 8, 8))
    res = align_latents(FakeBackend(g), z, 0, 995, [], np.zeros(1), LayoutConfig())
    assert res.latent.tobytes() == (z - 10.0 * g).tobytes()
    assert res.losses == [1.0] and res.grad_norms[0] == pytest.approx(np.linalg.norm(g))


def test_zero_gradient_is_fixed_point(rng):
    z = rng.standard_normal((4, 8, 8))
    res = align_latents(FakeBackend(np.zeros_like(z)), z, 3, 980, [], np.zeros(1), LayoutConfig())
    assert res.latent.tobytes() == z.tobytes()


def test_outside_window_and_no_gradients(rng, caplog):
    z = rng.standard_normal((4, 8, 8))
    assert not align_latents(FakeBackend(z), z, 61, 690, [], np.zeros(1), LayoutConfig()).applied
    backend = FakeBackend(z)
    backend.supports_gradients = False
    with caplog.at_level(logging.WARNING):
        res = align_latents(backend, z, 0, 995, [], np.zeros(1), LayoutConfig())
    assert res.latent is z and not res.applied
    assert "gradient" in caplog.text


def test_single_step_descent_on_seeded_toy():
    """One step at lambda = 10 lowers the loss on this seeded 8x8 instance (observed 42.10 -> 30.89).

    Descent is only asserted here, where it was verified; a fixed step of 10 is
    not guaranteed to descend at every timestep of a trajectory.
    """
    toy = ToyUNet(ToyConfig())
    a = AdapterSet.seeded("a", [], toy.adapter_targets(), toy.config.context_dim, 1)
    text = toy.encode_text("a dog")
    rng = np.random.default_rng(3)
    z = rng.standard_normal((4, 8, 8))
    t = 995
    ref = toy.record_keys(rng.standard_normal((4, 8, 8)), t, text, None, "dec.0.self")
    inputs = [(text, None), (text, a)]
    res = align_latents(toy, z, 0, t, inputs, ref, LayoutConfig())

    def loss_at(zz):
        keys = [toy.record_keys(zz, t, tx, ad, "dec.0.self") for tx, ad in inputs]
        return layout_loss(keys[0], keys[1:], ref)

    before, after = loss_at(z), loss_at(res.latent)
    assert res.losses[0] == pytest.approx(before, rel=1e-12)
    assert after < before


def test_reference_features_roundtrip(tmp_path, toy, rng):
    cfg = LayoutConfig(window=(0, 4))
    sched = make_schedule()
    feats, inv = extract_reference_features(toy, rng.standard_normal((4, 8, 8)), toy.encode_text(""), cfg, 20, 20,
                                            sched, source_id="abc")
    assert len(feats) == 5 and list(feats.features) == timestep_grid(20)[:5]
    for t in feats.features:
        assert t in feats and feats[t].shape == (16, 32)
    again = ReferenceFeatures.load(feats.save(tmp_path / "ref.npz"))
    assert again.source_id == "abc" and again.layer == "dec.0.self"
    assert all(again[t].tobytes() == feats[t].tobytes() for t in feats.features)
