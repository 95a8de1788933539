"""Style adapter tests: reference encoding, low-rank factor generation,
modulation-weight folding, and neutrality at initialization."""

import numpy as np
import pytest

from hlm import tensor as T
from hlm.adapter import (AdapterConfig, LoRAFactorSet, StyleAdapter,
                         apply_lora_film)
from hlm.backbone import (Backbone, DenoiserConfig, TextCondition, VAEConfig,
                          film_generate)
from hlm.tensor import Tensor


SMALL_VAE = VAEConfig(patch=4, width=32, j_latent=2, d_latent=4)
SMALL_DEN = DenoiserConfig(num_blocks=2, d_hidden=16, heads=2, d_latent=4,
                           j_latent=2, d_embed=16, d_text=16)
SMALL_CFG = AdapterConfig(rank=2, alpha=2.0, d_style=16, enc_width=32,
                          enc_blocks=2, trunk_width=48)


@pytest.fixture(scope="module")
def bb():
    bb = Backbone(["walk-forward", "walk-circle"], SMALL_VAE, SMALL_DEN, seed=11)
    # the output projection starts at zero; perturb it so styled and plain
    # passes can actually differ downstream
    r = np.random.default_rng(99)
    bb.out_proj.W.data = r.normal(size=bb.out_proj.W.data.shape) * 0.2
    bb.out_proj.b.data = r.normal(size=bb.out_proj.b.data.shape) * 0.05
    return bb


@pytest.fixture(scope="module")
def adapter(bb):
    return StyleAdapter(bb, SMALL_CFG, seed=12)


def rand_latent(rng, t_lat=6):
    return rng.normal(size=(t_lat, SMALL_DEN.j_latent, SMALL_DEN.d_latent))


# -- style encoder ----------------------------------------------------

def test_encoder_deterministic_and_batched(adapter):
    r = np.random.default_rng(0)
    ref = rand_latent(r, 8)
    with T.no_grad():
        a = adapter.encode_style(Tensor(ref)).data
        b = adapter.encode_style(Tensor(ref)).data
    np.testing.assert_array_equal(a, b)
    assert a.shape == (SMALL_CFG.d_style,)
    batch = np.stack([ref, ref + 0.1])
    with T.no_grad():
        ab = adapter.encode_style(Tensor(batch)).data
    assert ab.shape == (2, SMALL_CFG.d_style)
    np.testing.assert_allclose(ab[0], a, atol=1e-12)   # batch size may flip blas kernels


def test_encoder_sensitive_to_frame_order(adapter):
    # cross-step differences feed the embedding, so shuffling the latent
    # steps must change the code; a pool-only encoder could not tell gait
    # frequencies apart
    r = np.random.default_rng(1)
    ref = rand_latent(r, 10)
    perm = r.permutation(10)
    with T.no_grad():
        a = adapter.encode_style(Tensor(ref)).data
        b = adapter.encode_style(Tensor(ref[perm])).data
    assert np.abs(a - b).max() > 1e-8


def test_encoder_rejects_wrong_channel_count(adapter):
    with pytest.raises(ValueError, match="channels"):
        adapter.encode_style(Tensor(np.zeros((6, 2, 5))))


# -- hypernetwork factors ---------------------------------------------

def test_fresh_hypernetwork_emits_zero_deltas(adapter):
    r = np.random.default_rng(2)
    with T.no_grad():
        s = adapter.encode_style(Tensor(rand_latent(r)))
        lora = adapter.hyper_lora(s)
    assert len(lora.factors) == SMALL_DEN.num_blocks
    for li, (a, b) in enumerate(lora.factors):
        assert a.data.shape == (SMALL_CFG.rank, SMALL_DEN.d_embed)
        assert b.data.shape == (2 * SMALL_DEN.d_hidden, SMALL_CFG.rank)
        assert np.abs(a.data).max() > 0.0           # A heads start random
        np.testing.assert_array_equal(b.data, np.zeros_like(b.data))
        np.testing.assert_array_equal(lora.delta(li).data,
                                      np.zeros((2 * SMALL_DEN.d_hidden, SMALL_DEN.d_embed)))


def randomize_b_heads(adapter, rng, scale=0.1):
    saved = [h.W.data.copy() for h in adapter.hyper.b_heads]
    for h in adapter.hyper.b_heads:
        h.W.data = rng.normal(size=h.W.data.shape) * scale
    return saved


def restore_b_heads(adapter, saved):
    for h, w in zip(adapter.hyper.b_heads, saved):
        h.W.data = w


def test_delta_rank_bounded_by_r(adapter, bb):
    # push random values into the B heads so deltas are nonzero
    r = np.random.default_rng(3)
    saved = randomize_b_heads(adapter, r)
    try:
        with T.no_grad():
            s = adapter.encode_style(Tensor(rand_latent(r)))
            lora = adapter.hyper_lora(s)
        for li in range(SMALL_DEN.num_blocks):
            delta = lora.delta(li).data
            assert np.abs(delta).max() > 0.0
            sv = np.linalg.svd(delta, compute_uv=False)
            assert sv[SMALL_CFG.rank:].max() <= 1e-10
    finally:
        restore_b_heads(adapter, saved)


def test_factor_set_validates_shapes():
    a = Tensor(np.zeros((2, 16)))
    b = Tensor(np.zeros((32, 3)))     # rank mismatch
    with pytest.raises(ValueError, match="rank"):
        LoRAFactorSet([(a, b)], rank=2, alpha=2.0)


# -- low-rank film application ----------------------------------------

def test_apply_lora_film_zero_b_matches_plain_generate(bb):
    r = np.random.default_rng(4)
    e = Tensor(r.normal(size=(3, SMALL_DEN.d_embed)))
    a = Tensor(r.normal(size=(2, SMALL_DEN.d_embed)))
    zb = Tensor(np.zeros((2 * SMALL_DEN.d_hidden, 2)))
    g0, b0 = film_generate(e, bb.blocks[0]["film"])
    g1, b1 = apply_lora_film(e, bb.blocks[0]["film"], a, zb, alpha=2.0, rank=2)
    np.testing.assert_array_equal(g0.data, g1.data)
    np.testing.assert_array_equal(b0.data, b1.data)


def test_apply_lora_film_zero_alpha_matches_plain_generate(bb):
    r = np.random.default_rng(5)
    e = Tensor(r.normal(size=(3, SMALL_DEN.d_embed)))
    a = Tensor(r.normal(size=(2, SMALL_DEN.d_embed)))
    b = Tensor(r.normal(size=(2 * SMALL_DEN.d_hidden, 2)))
    g0, b0 = film_generate(e, bb.blocks[0]["film"])
    g1, b1 = apply_lora_film(e, bb.blocks[0]["film"], a, b, alpha=0.0, rank=2)
    np.testing.assert_array_equal(g0.data, g1.data)
    np.testing.assert_array_equal(b0.data, b1.data)


def test_apply_lora_film_matches_dense_oracle(bb):
    r = np.random.default_rng(6)
    gen = bb.blocks[1]["film"]
    e = r.normal(size=(4, SMALL_DEN.d_embed))
    a = r.normal(size=(2, SMALL_DEN.d_embed))
    b = r.normal(size=(2 * SMALL_DEN.d_hidden, 2)) * 0.3
    g, be = apply_lora_film(Tensor(e), gen, Tensor(a), Tensor(b), alpha=2.0, rank=2)
    wp = gen.W.data + (2.0 / 2) * (b @ a)
    phi = e / (1.0 + np.exp(-e))
    want = phi @ wp.T + gen.b.data
    np.testing.assert_allclose(g.data, want[:, :SMALL_DEN.d_hidden], atol=1e-12)
    np.testing.assert_allclose(be.data, want[:, SMALL_DEN.d_hidden:], atol=1e-12)


# -- end-to-end neutrality and equivalence ----------------------------

def test_fresh_adapter_is_bitwise_neutral_in_denoiser(bb, adapter):
    r = np.random.default_rng(7)
    z = rand_latent(r, 5)
    ref = rand_latent(r, 8)
    with T.no_grad():
        s = adapter.encode_style(Tensor(ref))
        lora = adapter.hyper_lora(s)
        plain = bb.denoise(z, 321, TextCondition("walk-forward"))
        styled = bb.denoise(z, 321, TextCondition("walk-forward"), lora=lora)
        films = adapter.precompute_adapted_films(s)
        precomp = bb.denoise(z, 321, TextCondition("walk-forward"), films=films)
    np.testing.assert_array_equal(styled.data, plain.data)
    np.testing.assert_array_equal(precomp.data, plain.data)


def test_precompute_matches_on_the_fly_with_nonzero_factors(bb, adapter):
    r = np.random.default_rng(8)
    saved = randomize_b_heads(adapter, r, scale=0.05)
    try:
        z = rand_latent(r, 5)
        with T.no_grad():
            s = adapter.encode_style(Tensor(rand_latent(r, 8)))
            lora = adapter.hyper_lora(s)
            on_fly = bb.denoise(z, 44, TextCondition("walk-circle"), lora=lora)
            films = adapter.precompute_adapted_films(s)
            pre = bb.denoise(z, 44, TextCondition("walk-circle"), films=films)
            plain = bb.denoise(z, 44, TextCondition("walk-circle"))
        assert np.abs(on_fly.data - plain.data).max() > 0.0
        np.testing.assert_allclose(pre.data, on_fly.data, atol=1e-12)
    finally:
        restore_b_heads(adapter, saved)


def test_gradient_reaches_zero_initialized_heads(bb, adapter):
    r = np.random.default_rng(9)
    z = rand_latent(r, 4)
    target = r.normal(size=z.shape)
    s = adapter.encode_style(Tensor(rand_latent(r, 6)))
    lora = adapter.hyper_lora(s)
    v = bb.denoise(z, 100, TextCondition("walk-forward"), lora=lora)
    loss = T.mse(v, Tensor(target))
    T.backward(loss)
    for head in adapter.hyper.b_heads:
        assert head.W.grad is not None and np.abs(head.W.grad).max() > 0.0
    for p in adapter.params():
        p.grad = None
    for _, p in bb.denoiser_params():
        p.grad = None


def test_state_roundtrip(bb, adapter):
    state = adapter.state_dict()
    clone = StyleAdapter.from_state_dict(bb, state)
    r = np.random.default_rng(10)
    ref = rand_latent(r, 7)
    with T.no_grad():
        np.testing.assert_array_equal(adapter.encode_style(Tensor(ref)).data,
                                      clone.encode_style(Tensor(ref)).data)
    assert clone.cfg == adapter.cfg
