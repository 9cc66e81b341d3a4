import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import attention_loop, codec_matrices

from multiconcept.backend import (AdapterSet, AttentionWeights, LinearCodec, ToyConfig, ToyUNet, attention_forward,
                                  load_adapter, merge_adapter, save_adapter)
from multiconcept.backend.text import Tokenizer
from multiconcept.errors import CapabilityError, ConfigError, ContractError, IngestionError


# -- attention_forward --------------------------------------------------------------

def test_single_position_attends_to_itself():
    h = np.array([[0.3, -1.2]])
    w = AttentionWeights(np.eye(2), np.eye(2), np.eye(2))
    out, keys, probs = attention_forward(h, h, w)
    assert probs.tolist() == [[1.0]]
    np.testing.assert_array_equal(out, h)


def test_two_position_hand_example():
    I = np.eye(2)
    V = np.array([[1.0, 0.0], [0.0, 2.0]])
    # context rows are the identity so K = I and V = Wv^T
    w = AttentionWeights(I, I, V.T)
    out, _, probs = attention_forward(I, I, w)
    assert probs[0] == pytest.approx([0.7311, 0.2689], abs=1e-4)
    assert out[0] == pytest.approx([0.7311, 0.5378], abs=1e-4)
    ref_out, ref_probs = attention_loop(I, I, I, I, V.T)
    np.testing.assert_allclose(out, ref_out, atol=1e-12)
    np.testing.assert_allclose(probs, ref_probs, atol=1e-12)


def test_attention_matches_loop_oracle(rng):
    h, ctx = rng.standard_normal((5, 3)), rng.standard_normal((4, 6))
    wq, wk, wv = rng.standard_normal((2, 3)), rng.standard_normal((2, 6)), rng.standard_normal((3, 6))
    out, keys, probs = attention_forward(h, ctx, AttentionWeights(wq, wk, wv))
    ref_out, ref_probs = attention_loop(h, ctx, wq, wk, wv)
    np.testing.assert_allclose(out, ref_out, atol=1e-10)
    np.testing.assert_allclose(probs, ref_probs, atol=1e-12)
    np.testing.assert_allclose(keys, ctx @ wk.T, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_probabilities_are_row_stochastic(p, n, seed):
    r = np.random.default_rng(seed)
    _, _, probs = attention_forward(r.standard_normal((p, 4)), r.standard_normal((n, 3)),
                                    AttentionWeights(r.standard_normal((4, 4)), r.standard_normal((4, 3)),
                                                     r.standard_normal((2, 3)), heads=2))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)


def test_attention_shape_mismatch_is_contract_error():
    with pytest.raises(ContractError):
        attention_forward(np.ones((2, 3)), np.ones((2, 3)), AttentionWeights(np.eye(2), np.eye(3), np.eye(3)))


# -- predict_noise ------------------------------------------------------------------

def test_predict_noise_is_deterministic(toy, rng):
    z = rng.standard_normal((4, 8, 8))
    text = toy.encode_text("a photo")
    spec = ["dec.0.self", "dec.5.cross"]
    a, ra = toy.predict_noise(z, 500, text, record_spec=spec)
    b, rb = toy.predict_noise(z, 500, text, record_spec=spec)
    assert a.tobytes() == b.tobytes()
    for layer in spec:
        for name in ("keys", "probs", "output"):
            assert getattr(ra[layer], name).tobytes() == getattr(rb[layer], name).tobytes()


@pytest.mark.parametrize("shape", [(4, 8, 8), (4, 16, 8), (4, 16, 16)])
def test_noise_shape_matches_latent(toy, shape):
    eps, _ = toy.predict_noise(np.zeros(shape), 10, toy.encode_text(""))
    assert eps.shape == shape


def test_records_are_read_only_and_stochastic(toy, rng):
    _, rec = toy.predict_noise(rng.standard_normal((4, 16, 16)), 300, toy.encode_text("a dog"),
                               record_spec=list(toy.attention_layers))
    for layer in toy.attention_layers:
        r = rec[layer]
        np.testing.assert_allclose(r.probs.sum(axis=1), 1.0, atol=1e-5)
        assert r.probs.shape[0] == np.prod(toy.layer_resolution(layer, (16, 16)))
        with pytest.raises(ValueError):
            r.keys[0, 0] = 1.0


def test_zero_override_changes_noise(toy, rng):
    z = rng.standard_normal((4, 8, 8))
    text = toy.encode_text("a dog")
    plain, rec = toy.predict_noise(z, 400, text, record_spec={"dec.2.self": {"output"}})
    zeroed, _ = toy.predict_noise(z, 400, text, overrides={"dec.2.self": np.zeros_like(rec["dec.2.self"].output)})
    assert np.max(np.abs(plain - zeroed)) > 0


def test_identity_override_is_a_no_op(toy, rng):
    z = rng.standard_normal((4, 8, 8))
    text = toy.encode_text("a dog")
    plain, _ = toy.predict_noise(z, 400, text)
    same, _ = toy.predict_noise(z, 400, text, overrides={layer: (lambda h: h) for layer in toy.decoder_attention_layers})
    assert plain.tobytes() == same.tobytes()


def test_unknown_layers_are_config_errors(toy):
    z, text = np.zeros((4, 8, 8)), toy.encode_text("")
    with pytest.raises(ConfigError):
        toy.predict_noise(z, 1, text, record_spec=["dec.9.self"])
    with pytest.raises(ConfigError):
        toy.predict_noise(z, 1, text, overrides={"nope": np.zeros((1, 1))})


def test_override_shape_is_checked(toy):
    with pytest.raises(ContractError):
        toy.predict_noise(np.zeros((4, 8, 8)), 1, toy.encode_text(""), overrides={"dec.0.self": np.zeros((3, 3))})


@pytest.mark.parametrize("shape", [(4, 6, 8), (3, 8, 8), (4, 4, 4)])
def test_invalid_latents_rejected(toy, shape):
    with pytest.raises(ContractError):
        toy.predict_noise(np.zeros(shape), 1, toy.encode_text(""))


def test_non_finite_latent_rejected(toy):
    z = np.zeros((4, 8, 8))
    z[0, 0, 0] = np.nan
    with pytest.raises(ContractError):
        toy.predict_noise(z, 1, toy.encode_text(""))


def test_weights_roundtrip(tmp_path, toy, rng):
    path = toy.save(tmp_path / "toy.npz")
    again = ToyUNet.load(path)
    assert again.weights_hash() == toy.weights_hash()
    z, text = rng.standard_normal((4, 8, 8)), toy.encode_text("hi")
    assert toy.predict_noise(z, 7, text)[0].tobytes() == again.predict_noise(z, 7, again.encode_text("hi"))[0].tobytes()
    assert all(w.dtype == np.float32 for w in toy.weights.values())


# -- adapters -----------------------------------------------------------------------

def _adapter(toy, cid="a", seed=3, layers=None):
    targets = toy.adapter_targets()
    if layers is not None:
        targets = {k: v for k, v in targets.items() if k in layers}
    return AdapterSet.seeded(cid, [], targets, toy.config.context_dim, seed)


def test_zero_coefficient_is_identity(toy):
    merged = merge_adapter(toy.weights, _adapter(toy), coefficient=0.0)
    for name, w in toy.weights.items():
        assert merged[name] is w or merged[name].tobytes() == w.tobytes()


def test_default_coefficient_is_point_seven(toy):
    a = _adapter(toy, layers={"dec.0.self.q"})
    assert a.merge_coefficient == 0.7
    merged = merge_adapter(toy.weights, a)
    down, up = a.deltas["dec.0.self.q"]
    np.testing.assert_allclose(merged["dec.0.self.q"] - toy.weights["dec.0.self.q"], 0.7 * (up @ down), atol=1e-6)


def test_rank_one_delta_touches_one_entry():
    W = {"w": np.zeros((2, 2))}
    a = AdapterSet("c", {"w": (np.array([[0.0, 1.0]]), np.array([[1.0], [0.0]]))}, {}, 0.7)
    diff = merge_adapter(W, a, coefficient=0.3)["w"] - W["w"]
    assert np.count_nonzero(diff) == 1
    assert diff[0, 1] == 0.3


def test_disjoint_adapters_commute(toy):
    a = _adapter(toy, "a", 1, {"dec.0.self.q", "dec.1.cross.k"})
    b = _adapter(toy, "b", 2, {"dec.3.self.v"})
    ab = merge_adapter(merge_adapter(toy.weights, a), b)
    ba = merge_adapter(merge_adapter(toy.weights, b), a)
    assert all(ab[k].tobytes() == ba[k].tobytes() for k in ab)


def test_adapter_shape_mismatch(toy):
    bad = AdapterSet("x", {"dec.0.self.q": (np.ones((1, 5)), np.ones((32, 1)))}, {})
    with pytest.raises(ContractError):
        merge_adapter(toy.weights, bad)


def test_adapter_file_roundtrip(tmp_path, toy):
    a = _adapter(toy, "dog", 5)
    path = save_adapter(tmp_path / "dog.npz", a)
    b = load_adapter(path)
    assert b.concept_id == "dog" and b.content_hash() == a.content_hash()


def test_missing_adapter_names_concept(tmp_path):
    with pytest.raises(ConfigError, match="dog"):
        load_adapter(tmp_path / "nope.npz", "dog")


def test_token_embeddings_change_text_encoding():
    toy = ToyUNet(ToyConfig())
    toy.register_concept("dog", ["<d1>"])
    a = AdapterSet.seeded("dog", ["<d1>"], {}, toy.config.context_dim, 4)
    plain = toy.encode_text("a <d1>")
    adapted = toy.encode_text("a <d1>", a)
    assert not np.array_equal(plain.embeddings, adapted.embeddings)
    assert adapted.concept_token_slots == {"dog": (2,)}


def test_adapter_isolation(rng):
    toy = ToyUNet(ToyConfig())
    a, b = _adapter(toy, "a", 1), _adapter(toy, "b", 2)
    z, text = rng.standard_normal((4, 8, 8)), toy.encode_text("x")
    before, _ = toy.predict_noise(z, 50, text, adapter=a)
    b.deltas["dec.0.self.q"][1][:] += 1.0  # mutate the other adapter in place
    toy.predict_noise(z, 50, text, adapter=b)
    after, _ = toy.predict_noise(z, 50, text, adapter=a)
    assert before.tobytes() == after.tobytes()


# -- gradients ----------------------------------------------------------------------

def _keys_loss(ref, c=1.0):
    return lambda keys: c * sum(torch.sum((k - ref) ** 2) for k in keys)


def test_zero_loss_gives_zero_gradient(toy, rng):
    z = rng.standard_normal((4, 8, 8))
    text = toy.encode_text("a")
    ref = torch.as_tensor(toy.record_keys(z, 100, text, None, "dec.0.self"))
    grad, loss = toy.loss_gradient(z, 100, [(text, None)], lambda keys: torch.linalg.norm(keys[0] - ref), "dec.0.self")
    assert loss == 0.0
    assert not np.any(grad)


def test_gradient_is_linear_in_loss_scale(toy, rng):
    z = rng.standard_normal((4, 8, 8))
    text = toy.encode_text("a")
    ref = torch.zeros(1)
    g1, _ = toy.loss_gradient(z, 100, [(text, None)], _keys_loss(ref), "dec.0.self")
    g3, _ = toy.loss_gradient(z, 100, [(text, None)], _keys_loss(ref, 3.0), "dec.0.self")
    assert np.max(np.abs(g3 - 3.0 * g1)) / np.max(np.abs(3.0 * g1)) < 1e-10


def test_backend_without_gradients_raises(rng):
    toy = ToyUNet(ToyConfig())
    toy.supports_gradients = False
    with pytest.raises(CapabilityError):
        toy.loss_gradient(rng.standard_normal((4, 8, 8)), 1, [], lambda k: torch.zeros(()), "dec.0.self")


# -- codec --------------------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([(8, 8), (16, 8), (16, 16)]))
def test_encode_is_exact_left_inverse(seed, hw):
    codec = LinearCodec()
    z = np.random.default_rng(seed).standard_normal((4, *hw))
    assert codec.encode(codec.decode(z)).tobytes() == z.tobytes()


def test_codec_zero_and_shapes():
    codec = LinearCodec()
    assert not np.any(codec.encode(np.zeros((3, 64, 64))))
    assert not np.any(codec.decode(np.zeros((4, 8, 8))))
    assert codec.decode(np.zeros((4, 16, 16))).shape == (3, 128, 128)


def test_codec_matches_matrix_oracle(rng):
    codec = LinearCodec()
    h = w = 2
    D, E = codec_matrices(codec, h, w)
    z = rng.standard_normal((4, h, w))
    np.testing.assert_allclose(codec.decode(z).ravel(), D @ z.ravel(), atol=1e-6)
    x = rng.uniform(size=(3, 16, 16))
    np.testing.assert_allclose(codec.encode(x).ravel(), E @ x.ravel(), atol=0)
    # decode(encode(x)) is the projection D E x
    np.testing.assert_allclose(codec.decode(codec.encode(x)).ravel(), D @ (E @ x.ravel()), atol=1e-12)
    np.testing.assert_array_equal(E @ D, np.eye(4 * h * w))


def test_codec_rejects_bad_sizes():
    with pytest.raises(IngestionError):
        LinearCodec().encode(np.zeros((3, 12, 16)))


# -- tokenizer ----------------------------------------------------------------------

def test_tokenizer_limits():
    tok = Tokenizer(max_length=6)
    with pytest.raises(ConfigError):
        tok.encode("one two three four five")
    with pytest.raises(ConfigError):
        tok.encode("a <unknown>")
    tok.register("<v1>", "c")
    ids, slots = tok.encode("a <v1>")
    assert len(ids) == 6 and slots == {"c": (2,)}
