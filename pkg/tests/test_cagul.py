import numpy as np
import pytest

from cagul_lab import cagul, data, vlm
from cagul_lab.autodiff import ContractError, Tensor


@pytest.fixture(scope="module")
def small():
    ds = data.generate(m=4, n=3, n_private=1, seed=1, m_general=1, n_general=1)
    tok = vlm.Tokenizer(ds.vocab)
    cfg = vlm.VLMConfig(vocab_size=len(ds.vocab), d_model=8, n_layers=1, n_heads=2, d_ff=16).validate()
    return ds, tok, cfg


def _model(small, seed=0, **kw):
    ds, tok, cfg = small
    base = vlm.init_vlm(cfg, seed)
    return cagul.CagulModel(base, tok, ds.images, cagul.CagulConfig(**kw))


def test_default_k_has_a_floor_and_scales():
    assert cagul.default_k(16) == 3
    assert cagul.default_k(2) == 2
    assert cagul.default_k(6404) == 200


def test_config_resolution_rejects_bad_values():
    assert cagul.CagulConfig().resolve(16).k == 3
    with pytest.raises(ValueError):
        cagul.CagulConfig(k=17).resolve(16)
    with pytest.raises(ValueError):
        cagul.CagulConfig(ablation="nope").resolve(16)
    with pytest.raises(ValueError):
        cagul.CagulConfig(loss_variant="nope").resolve(16)


def test_transform_tokens_touches_only_selected_rows(rng):
    enc = cagul.TokenEncoder(4)
    enc.params["enc.b"].data[:] = 1.0
    v = rng.normal(size=(2, 5, 4)).astype(np.float32)
    out = cagul.transform_tokens(enc, Tensor(v), [[0, 3], [2]]).data
    np.testing.assert_allclose(out[0, [0, 3]], v[0, [0, 3]] + 1, atol=1e-6)
    assert out[0, [1, 2, 4]].tobytes() == v[0, [1, 2, 4]].tobytes()
    assert out[1, [0, 1, 3, 4]].tobytes() == v[1, [0, 1, 3, 4]].tobytes()


def test_transform_tokens_with_empty_set_is_bit_identical(rng):
    v = rng.normal(size=(5, 4)).astype(np.float32)
    out = cagul.transform_tokens(cagul.TokenEncoder(4), Tensor(v), []).data
    assert out.tobytes() == v.tobytes()


def test_transform_tokens_contract_errors(rng):
    v = Tensor(rng.normal(size=(5, 4)))
    with pytest.raises(ContractError):
        cagul.transform_tokens(cagul.TokenEncoder(4), v, [1, 1])
    with pytest.raises(ContractError):
        cagul.transform_tokens(cagul.TokenEncoder(4), v, [5])


def test_unrouted_samples_pass_through_bit_identically(small):
    model = _model(small)
    model.disc.params["disc.head.b"].data[:] = -50.0  # discriminator says "retain" for everything
    q = model.tokenizer.encode(small[0].records[0].question)
    ids = np.array([q + [vlm.BOS]])
    logits, route = model.forward([0], [q], ids)
    assert not route.any()
    plain = vlm.forward(model.base, vlm.encode_image(model.base, model.pixels([0])), ids).logits.data
    assert logits.data.tobytes() == plain.tobytes()


def test_identity_encoder_on_routed_samples_keeps_logits(small):
    model = _model(small)
    model.disc.params["disc.head.b"].data[:] = 50.0
    q = model.tokenizer.encode(small[0].records[0].question)
    ids = np.array([q + [vlm.BOS]])
    logits, route = model.forward([1], [q], ids)
    assert route.all()
    plain = vlm.forward(model.base, vlm.encode_image(model.base, model.pixels([1])), ids).logits.data
    np.testing.assert_allclose(logits.data, plain, atol=1e-6)


def test_selection_is_bottom_k_and_random_ablation_is_seeded(small):
    model = _model(small, k=4)
    q = model.tokenizer.encode(small[0].records[0].question)
    vis = vlm.encode_image(model.base, model.pixels([0])).data
    K = model.select([0], [q], vis)[0]
    assert len(K) == 4 and K == sorted(K)
    rand = _model(small, k=4, ablation="random_token_selection")
    assert rand.select([0], [q], vis) == rand.select([0], [q], vis)
    assert len(set(rand.select([0], [q], vis)[0])) == 4


def test_trainable_count_follows_ablation(small):
    d = small[2].d_model
    enc = d * d + d
    full = _model(small).trainable_count()
    assert _model(small, ablation="no_discriminator").trainable_count() == enc
    assert _model(small, ablation="no_encoder_random_noise").trainable_count() == full - enc


def test_training_leaves_backbone_untouched_and_round_trips(small, tmp_path):
    ds, tok, cfg = small
    base = vlm.init_vlm(cfg, 0)
    before = base.digest()
    flags = {n: t.requires_grad for n, t in base.tensors.items()}
    sp = data.split(ds, 1, seed=0)
    conf = cagul.CagulConfig(epochs_joint=2, ablation="no_discriminator")
    model, log = cagul.train_cagul(base, sp.forget, sp.retain, conf, tok, ds.images)
    assert base.digest() == before
    assert {n: t.requires_grad for n, t in base.tensors.items()} == flags
    assert len(log.epochs) == 2 and log.trainable_params == model.trainable_count()
    assert not np.array_equal(model.enc.params["enc.w"].data, np.eye(cfg.d_model))

    path = tmp_path / "m.cgul"
    model.save(path)
    loaded = cagul.CagulModel.load(path, base, tok, ds.images)
    assert loaded.config == model.config
    q = tok.encode(sp.forget[0].question)
    ids = np.array([q + [vlm.BOS]])
    a = model.forward([sp.forget[0].id], [q], ids)[0].data
    b = loaded.forward([sp.forget[0].id], [q], ids)[0].data
    assert a.tobytes() == b.tobytes()


def test_weak_discriminator_is_reported(small):
    ds, tok, cfg = small
    sp = data.split(ds, 1, seed=0)
    conf = cagul.CagulConfig(epochs_discriminator=0, epochs_joint=1, min_discriminator_accuracy=1.01)
    with pytest.raises(cagul.CagulError):
        cagul.train_cagul(vlm.init_vlm(cfg, 0), sp.forget, sp.retain, conf, tok, ds.images)


def test_empty_training_set_is_an_error(small):
    ds, tok, cfg = small
    with pytest.raises(cagul.CagulError):
        cagul.train_cagul(vlm.init_vlm(cfg, 0), [], [], cagul.CagulConfig(), tok, ds.images)
