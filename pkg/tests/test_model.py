import math

import numpy as np
import pytest

from cdsrnp import autodiff as ad
from cdsrnp import episode as E
from cdsrnp import model as M

from conftest import check_grad


def cfg(**kw):
    base = dict(D=4, T=3, n_items_a=5, n_items_b=4)
    base.update(kw)
    return M.ModelConfig(**base)


def noisy_params(c, seed=0):
    p = M.init_params(c, seed)
    rng = np.random.default_rng(seed + 100)
    for name in p:
        if name.startswith("emb."):
            p[name].data += 0.5 * rng.standard_normal(p[name].shape)
            if name in M.ITEM_TABLES:
                p[name].data[0] = 0.0
    return p


# ---------------------------------------------------------------- config and parameters

def test_config_invariants():
    with pytest.raises(ValueError):
        M.ModelConfig(D=6, heads=4)
    with pytest.raises(ValueError):
        M.ModelConfig(T=0)
    with pytest.raises(ValueError):
        M.ModelConfig(variant="bogus")
    assert M.ModelConfig(D=16).hidden == 16


def test_pad_rows_are_zero_at_init():
    p = M.init_params(cfg(), 0)
    for t in M.ITEM_TABLES:
        assert np.all(p[t].data[0] == 0.0)
    assert p["emb.v_shared"].shape == (5 + 4 + 1, 4)


def test_no_adaptive_removes_exactly_attention_weights():
    full = set(M.init_params(cfg(), 0))
    ablated = set(M.init_params(cfg(variant="no_adaptive"), 0))
    assert full - ablated == {"adapt.wq", "adapt.wk", "adapt.wv"}


def test_one_embedding_has_no_specific_tables():
    names = set(M.init_params(cfg(variant="one_embedding"), 0))
    for gone in ("emb.v_a", "emb.v_b", "emb.p_a", "emb.p_b"):
        assert gone not in names
    assert not any(n.startswith("enc_specific") for n in names)


def test_init_uniform_bounds_and_seed():
    p = M.init_params(cfg(D=8), 3)
    assert np.abs(p["fuse.w1"].data).max() <= 1 / math.sqrt(6 * 8)
    q = M.init_params(cfg(D=8), 3)
    assert p.to_bytes() == q.to_bytes()
    assert M.init_params(cfg(D=8), 4).to_bytes() != p.to_bytes()


# ---------------------------------------------------------------- embeddings

def test_all_pad_rows_equal_positions():
    c = cfg()
    p = noisy_params(c)
    e_a, e_a_sh, e_b, e_b_sh = M.embed_sample(p, c, np.zeros((1, 3), int), np.zeros((1, 3), int))
    np.testing.assert_array_equal(e_a.data[0], p["emb.p_a"].data)
    np.testing.assert_array_equal(e_b_sh.data[0], p["emb.p_shared"].data)


def test_zeroed_positions_give_raw_embeddings():
    c = cfg()
    p = noisy_params(c)
    for t in ("emb.p_a", "emb.p_b", "emb.p_shared"):
        p[t].data[:] = 0.0
    x_a, x_b = np.array([[0, 2, 5]]), np.array([[1, 0, 4]])
    e_a, e_a_sh, e_b, e_b_sh = M.embed_sample(p, c, x_a, x_b)
    np.testing.assert_array_equal(e_a.data[0], p["emb.v_a"].data[[0, 2, 5]])
    np.testing.assert_array_equal(e_b.data[0], p["emb.v_b"].data[[1, 0, 4]])
    np.testing.assert_array_equal(e_b_sh.data[0], p["emb.v_shared"].data[[6, 0, 9]])


def test_shared_index_mapping_full_vocab():
    local = np.arange(0, 5)
    np.testing.assert_array_equal(M.shared_index(local, 7), [0, 8, 9, 10, 11])


def test_embedding_out_of_range():
    c = cfg()
    with pytest.raises(IndexError):
        M.embed_sample(M.init_params(c, 0), c, np.array([[0, 0, 6]]), np.zeros((1, 3), int))


# ---------------------------------------------------------------- encoder

def encoder_params(D, seed=0):
    rng = np.random.default_rng(seed)
    s = ad.ParameterStore()
    for w in ("wq", "wk", "wv"):
        s.add(f"enc.{w}", rng.uniform(-0.5, 0.5, (D, D)))
    s.add("enc.ffn.w1", rng.uniform(-0.5, 0.5, (D, D)))
    s.add("enc.ffn.b1", rng.uniform(-0.5, 0.5, D))
    s.add("enc.ffn.w2", rng.uniform(-0.5, 0.5, (D, D)))
    s.add("enc.ffn.b2", rng.uniform(-0.5, 0.5, D))
    return s


def test_encoder_t2_matches_dense_formula():
    D = 3
    p = encoder_params(D)
    E_ = np.random.default_rng(1).standard_normal((1, 2, D))
    out = M.encode_sequence(p, "enc", ad.tensor(E_), np.zeros((1, 2), bool)).data[0]
    x = E_[0]
    q, k, v = x @ p["enc.wq"].data, x @ p["enc.wk"].data, x @ p["enc.wv"].data
    s = q @ k.T / math.sqrt(D)
    att = np.zeros_like(x)
    att[0] = v[0]
    w = np.exp(s[1] - s[1].max())
    w /= w.sum()
    att[1] = w @ v
    h = x + att
    ffn = np.maximum(h @ p["enc.ffn.w1"].data + p["enc.ffn.b1"].data, 0) @ p["enc.ffn.w2"].data + p["enc.ffn.b2"].data
    assert np.abs(out - (h + ffn)).max() < 1e-12


def test_encoder_all_pad_passes_through_residual():
    D = 4
    p = encoder_params(D)
    E_ = np.random.default_rng(2).standard_normal((1, 3, D))
    out = M.encode_sequence(p, "enc", ad.tensor(E_), np.ones((1, 3), bool)).data
    h = E_  # attention rows are all zero
    ffn = np.maximum(h @ p["enc.ffn.w1"].data + p["enc.ffn.b1"].data, 0) @ p["enc.ffn.w2"].data + p["enc.ffn.b2"].data
    np.testing.assert_allclose(out, h + ffn, atol=1e-14)


@pytest.mark.parametrize("heads", [1, 2])
def test_encoder_causality(heads):
    D, T = 4, 6
    p = encoder_params(D, 3)
    rng = np.random.default_rng(4)
    for _ in range(20):
        E_ = rng.standard_normal((1, T, D))
        pad = np.zeros((1, T), bool)
        pad[0, : rng.integers(0, 3)] = True
        t = int(rng.integers(0, T))
        E2 = E_.copy()
        E2[0, t] += rng.standard_normal(D)
        a = M.encode_sequence(p, "enc", ad.tensor(E_), pad, heads).data
        b = M.encode_sequence(p, "enc", ad.tensor(E2), pad, heads).data
        assert a[0, :t].tobytes() == b[0, :t].tobytes()


def test_pad_neutrality():
    """Extra pad prefix leaves non-pad encoder outputs unchanged."""
    c = cfg(T=4)
    p = noisy_params(c, 5)
    x_a, x_b = np.array([[0, 3, 1, 2]]), np.array([[0, 0, 4, 1]])
    c6 = cfg(T=6)
    p6 = ad.ParameterStore({k: p[k].data for k in p if not k.startswith("emb.p")})
    rng = np.random.default_rng(0)
    for t in ("emb.p_a", "emb.p_b", "emb.p_shared"):
        p6.add(t, np.vstack([rng.standard_normal((2, 4)), p[t].data]))
    px_a = np.hstack([np.zeros((1, 2), int), x_a])
    px_b = np.hstack([np.zeros((1, 2), int), x_b])
    es = M.embed_sample(p, c, x_a, x_b)
    el = M.embed_sample(p6, c6, px_a, px_b)
    pad_s = np.concatenate([x_a == 0, x_b == 0])
    pad_l = np.concatenate([px_a == 0, px_b == 0])
    short = M.encode_sequence(p, "enc_shared", ad.concat([es[1], es[3]], 0), pad_s).data
    long = M.encode_sequence(p6, "enc_shared", ad.concat([el[1], el[3]], 0), pad_l).data
    # non-pad positions of the short input sit at offset 2 in the long input
    for row in range(2):
        live = ~pad_s[row]
        np.testing.assert_array_equal(short[row][live], long[row][2:][live])


# ---------------------------------------------------------------- fusion and pooling

def fusion_params(D, zero_bias=False, seed=0):
    rng = np.random.default_rng(seed)
    s = ad.ParameterStore()
    for name, n_in in (("fuse_a", 2 * D), ("fuse_b", 2 * D), ("fuse", 6 * D)):
        s.add(f"{name}.w1", rng.uniform(-1, 1, (n_in, D)))
        s.add(f"{name}.b1", np.zeros(D) if zero_bias else rng.uniform(-1, 1, D))
        s.add(f"{name}.w2", rng.uniform(-1, 1, (D, D)))
        s.add(f"{name}.b2", np.zeros(D) if zero_bias else rng.uniform(-1, 1, D))
    return s


def test_fuse_zero_inputs_zero_bias():
    z = ad.tensor(np.zeros((1, 3, 4)))
    np.testing.assert_array_equal(M.fuse(fusion_params(4, True), z, z, z, z).data, 0.0)


def test_fuse_shape_and_positionwise():
    p = fusion_params(4)
    rng = np.random.default_rng(1)
    xs = [rng.standard_normal((1, 5, 4)) for _ in range(4)]
    out = M.fuse(p, *[ad.tensor(x) for x in xs]).data
    assert out.shape == (1, 5, 4)
    perm = rng.permutation(5)
    out_p = M.fuse(p, *[ad.tensor(x[:, perm]) for x in xs]).data
    np.testing.assert_allclose(out_p, out[:, perm], atol=1e-14)


def test_pool_examples():
    r = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(M.pool(ad.tensor(np.repeat(r, 4, 0))).data, r[0])
    np.testing.assert_array_equal(M.pool(ad.tensor(np.vstack([r, -r]))).data, [0.0, 0.0, 0.0])
    x = np.random.default_rng(3).standard_normal((2, 7, 3))
    assert np.abs(M.pool(ad.tensor(x)).data - x.sum(1) / 7).max() < 1e-15


def test_encode_users_dedupe_matches_direct(small_split, small_cfg):
    p = noisy_params(small_cfg, 2)
    b = E.SampleBatch.from_samples(E.build_training_episode(small_split, 4, 8, small_cfg.T, 0).query)
    f = M.encode_users(p, small_cfg, b.x_a, b.x_b).data
    for i in range(len(b)):
        fi = M.encode_users(p, small_cfg, b.x_a[i:i + 1], b.x_b[i:i + 1]).data[0]
        np.testing.assert_allclose(f[i], fi, atol=1e-13)


# ---------------------------------------------------------------- latent path

def latent_store(D, seed=0, zero=False):
    rng = np.random.default_rng(seed)
    s = ad.ParameterStore()
    s.add("sample_enc.w1", np.zeros((2 * D + 1, D)) if zero else rng.uniform(-1, 1, (2 * D + 1, D)))
    s.add("sample_enc.b1", np.zeros(D))
    s.add("sample_enc.w2", np.zeros((D, D)) if zero else rng.uniform(-1, 1, (D, D)))
    s.add("sample_enc.b2", np.zeros(D))
    return s


def test_sample_latent_zero_weights():
    s = latent_store(3, zero=True)
    r = M.encode_sample_latent(s, ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((2, 3))), [1.0, 0.0])
    np.testing.assert_array_equal(r.data, 0.0)


def test_sample_latent_label_slot_matters():
    s = latent_store(3, seed=1)
    f, c = ad.tensor(np.full((1, 3), 0.3)), ad.tensor(np.full((1, 3), -0.2))
    assert not np.array_equal(M.encode_sample_latent(s, f, c, [1.0]).data, M.encode_sample_latent(s, f, c, [0.0]).data)


def test_sample_latent_slot_order():
    D = 2
    s = ad.ParameterStore()
    w1 = np.zeros((2 * D + 1, 2 * D + 1))
    np.fill_diagonal(w1, 1.0)
    s.add("sample_enc.w1", w1)
    s.add("sample_enc.b1", np.zeros(2 * D + 1))
    s.add("sample_enc.w2", np.eye(2 * D + 1))
    s.add("sample_enc.b2", np.zeros(2 * D + 1))
    r = M.encode_sample_latent(s, ad.tensor([[1.0, 2.0]]), ad.tensor([[3.0, 4.0]]), [1.0]).data
    np.testing.assert_array_equal(r, [[1.0, 2.0, 3.0, 4.0, 1.0]])


def test_aggregate_examples():
    x = np.random.default_rng(0).standard_normal((6, 3))
    one = ad.tensor(x[0])
    np.testing.assert_array_equal(M.aggregate([one]).data, x[0])
    base = M.aggregate(ad.tensor(x)).data
    assert np.abs(base - x.sum(0) / 6).max() < 1e-12
    for perm in np.random.default_rng(1).permuted(np.tile(np.arange(6), (10, 1)), axis=1):
        assert np.abs(M.aggregate(ad.tensor(x[perm])).data - base).max() < 1e-9
    with pytest.raises(ValueError):
        M.aggregate([])


def reparam_store(D, w_r=None, w_mu=None, w_sigma=None):
    s = ad.ParameterStore()
    s.add("latent.w_r", np.eye(D) if w_r is None else w_r)
    s.add("latent.w_mu", np.zeros((D, D)) if w_mu is None else w_mu)
    s.add("latent.w_sigma", np.zeros((D, D)) if w_sigma is None else w_sigma)
    return s


def test_reparameterize_zero_mode():
    s = reparam_store(3, w_mu=np.random.default_rng(0).standard_normal((3, 3)))
    st = M.reparameterize(s, ad.tensor([0.5, 1.0, -1.0]), "zero", None)
    np.testing.assert_array_equal(st.z.data, st.mu.data)


def test_reparameterize_unit_case():
    s = reparam_store(3)

    class Ones:
        def standard_normal(self, shape):
            return np.ones(shape)

    st = M.reparameterize(s, ad.tensor([1.0, 2.0, 3.0]), "sample", Ones())
    np.testing.assert_array_equal(st.z.data, [1.0, 1.0, 1.0])
    np.testing.assert_array_equal(st.z.data, st.mu.data + np.exp(st.log_sigma.data) * st.eps)


def test_reparameterize_monte_carlo():
    D = 2
    s = reparam_store(D, w_mu=np.array([[0.7, 0.0], [0.0, -0.3]]), w_sigma=np.array([[0.2, 0.0], [0.0, -0.5]]))
    r = ad.tensor([1.0, 1.0])
    rng = np.random.default_rng(7)
    zs = np.array([M.reparameterize(s, r, "sample", rng).z.data for _ in range(10_000)])
    mu = np.array([0.7, -0.3])
    sigma = np.exp([0.2, -0.5])
    assert np.all(np.abs(zs.mean(0) - mu) < 4 * sigma / math.sqrt(10_000))


def ls(mu, log_sigma):
    return M.LatentState(ad.tensor(np.atleast_1d(mu)), ad.tensor(np.atleast_1d(log_sigma)), None, None)


def test_kl_examples():
    assert M.kl_divergence(ls(0.3, -0.2), ls(0.3, -0.2)).item() == 0.0
    assert abs(M.kl_divergence(ls(1.0, 0.0), ls(0.0, 0.0)).item() - 0.5) < 1e-15


def test_kl_nonnegative_and_gradient():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b = rng.uniform(-1, 1, (2, 4)), rng.uniform(-1, 1, (2, 4))
        assert M.kl_divergence(ls(a[0], a[1]), ls(b[0], b[1])).item() >= 0.0
    check_grad(lambda mq, lq, ms, lsg: M.kl_divergence(M.LatentState(mq, lq, None, None),
                                                        M.LatentState(ms, lsg, None, None)),
               [rng.uniform(-1, 1, 3) for _ in range(4)])


def attn_store(D, seed=0):
    rng = np.random.default_rng(seed)
    s = ad.ParameterStore()
    for w in ("wq", "wk", "wv"):
        s.add(f"adapt.{w}", rng.uniform(-1, 1, (D, D)))
    return s


def test_adaptive_single_support():
    s = attn_store(3)
    f1 = np.array([[0.2, -0.4, 1.0]])
    out = M.adaptive_attention(s, ad.tensor([[1.0, 2.0, 3.0]]), ad.tensor(f1)).data
    np.testing.assert_array_equal(out, f1 @ s["adapt.wv"].data)


def test_adaptive_identical_support():
    s = attn_store(3)
    f1 = np.tile([[0.2, -0.4, 1.0]], (4, 1))
    out = M.adaptive_attention(s, ad.tensor([[1.0, 2.0, 3.0]]), ad.tensor(f1)).data
    np.testing.assert_allclose(out, f1[:1] @ s["adapt.wv"].data, atol=1e-15)


def test_adaptive_hand_computed():
    D = 3
    s = attn_store(D, 1)
    rng = np.random.default_rng(2)
    fq, fs = rng.standard_normal((1, D)), rng.standard_normal((3, D))
    out = M.adaptive_attention(s, ad.tensor(fq), ad.tensor(fs)).data
    q, k, v = fq @ s["adapt.wq"].data, fs @ s["adapt.wk"].data, fs @ s["adapt.wv"].data
    sc = (q @ k.T)[0] / math.sqrt(D)
    w = np.exp(sc) / np.exp(sc).sum()
    assert np.abs(out[0] - w @ v).max() < 1e-12


def test_adaptive_empty_support():
    with pytest.raises(ValueError):
        M.adaptive_attention(attn_store(2), ad.tensor(np.ones((1, 2))), ad.tensor(np.zeros((0, 2))))


# ---------------------------------------------------------------- head and forward

def test_predict_zero_final_layer_is_half():
    c = cfg()
    p = noisy_params(c)
    p["head_out.w2"].data[:] = 0.0
    p["head_out.b2"].data[:] = 0.0
    f = ad.tensor(np.ones((2, 4)))
    y = M.predict(p, f, f, ad.tensor(np.ones(4)), ad.tensor(np.ones((2, 4)))).data
    np.testing.assert_array_equal(y, [0.5, 0.5])


def test_predict_range():
    c = cfg()
    p = noisy_params(c)
    f = ad.tensor(np.random.default_rng(0).uniform(-50, 50, (5, 4)))
    for big in (30.0, -30.0, 1e6, -1e6):
        p["head_out.b2"].data[:] = big
        y = M.predict(p, f, f, ad.tensor(np.full(4, 30.0)), f).data
        assert np.all((y > 0) & (y < 1))


def episode_for(split, c, seed=0, n_s=4, n_q=6):
    return E.build_training_episode(split, n_s, n_q, c.T, seed)


def test_forward_train_and_inference(small_split, small_cfg):
    p = noisy_params(small_cfg)
    ep = episode_for(small_split, small_cfg)
    tr = M.forward_episode(p, small_cfg, ep, "train", 0)
    assert tr.query_state is not None and tr.support_state is not None
    assert tr.predictions.shape == (6,)
    inf = M.forward_episode(p, small_cfg, ep, "inference", 0)
    assert inf.query_state is None
    assert not np.array_equal(tr.predictions.data, inf.predictions.data)


def test_train_mode_uses_query_latent_inference_uses_support(small_split, small_cfg):
    c = M.ModelConfig(**{**small_cfg.to_dict(), "epsilon_mode": "zero"})
    p = noisy_params(c)
    ep = episode_for(small_split, c)
    tr = M.forward_episode(p, c, ep, "train")
    inf = M.forward_episode(p, c, ep, "inference")
    assert not np.array_equal(tr.query_state.z.data, tr.support_state.z.data)
    ref_tr = M.predict(p, tr.f_query, tr.f_s, tr.query_state.z, M.candidate_embedding(
        p, E.SampleBatch.from_samples(ep.query).candidate)).data
    ref_inf = M.predict(p, tr.f_query, tr.f_s, tr.support_state.z, M.candidate_embedding(
        p, E.SampleBatch.from_samples(ep.query).candidate)).data
    np.testing.assert_array_equal(tr.predictions.data, ref_tr)
    np.testing.assert_array_equal(inf.predictions.data, ref_inf)


def test_inference_never_reads_query_labels(small_split, small_cfg):
    p = noisy_params(small_cfg)
    ep = episode_for(small_split, small_cfg)
    poisoned = E.Episode(ep.support, [E.Sample(q.x_a, q.x_b, q.candidate, q.candidate_domain, 1.0 - q.label, q.user)
                                      for q in ep.query])
    a = M.forward_episode(p, small_cfg, ep, "inference", 5).predictions.data
    b = M.forward_episode(p, small_cfg, poisoned, "inference", 5).predictions.data
    assert a.tobytes() == b.tobytes()


def test_mode_separation_bitwise(small_split, small_cfg):
    c = M.ModelConfig(**{**small_cfg.to_dict(), "epsilon_mode": "zero"})
    p = noisy_params(c)
    ep = episode_for(small_split, c)
    a = M.forward_episode(p, c, ep, "inference").predictions.data
    b = M.forward_episode(p, c, ep, "inference").predictions.data
    assert a.tobytes() == b.tobytes()


def test_exchangeability(small_split, small_cfg):
    c = M.ModelConfig(**{**small_cfg.to_dict(), "epsilon_mode": "zero"})
    p = noisy_params(c)
    ep = episode_for(small_split, c, n_s=6)
    base = M.forward_episode(p, c, ep, "inference")
    rng = np.random.default_rng(0)
    for _ in range(50):
        perm = rng.permutation(6)
        t = M.forward_episode(p, c, E.Episode([ep.support[i] for i in perm], ep.query), "inference")
        assert np.abs(t.predictions.data - base.predictions.data).max() <= 1e-9
        assert np.abs(M.aggregate(t.r_support).data - M.aggregate(base.r_support).data).max() <= 1e-9


def test_bad_mode(small_split, small_cfg):
    with pytest.raises(ValueError):
        M.forward_episode(M.init_params(small_cfg, 0), small_cfg, episode_for(small_split, small_cfg), "eval")


def test_no_adaptive_slot_is_zero(small_split, small_cfg):
    c = M.ModelConfig(**{**small_cfg.to_dict(), "variant": "no_adaptive"})
    tr = M.forward_episode(M.init_params(c, 0), c, episode_for(small_split, c), "train", 0)
    np.testing.assert_array_equal(tr.f_s.data, 0.0)


def test_one_embedding_forward(small_split, small_cfg):
    c = M.ModelConfig(**{**small_cfg.to_dict(), "variant": "one_embedding"})
    tr = M.forward_episode(M.init_params(c, 0), c, episode_for(small_split, c), "train", 0)
    assert np.all((tr.predictions.data > 0) & (tr.predictions.data < 1))


def test_multihead_forward(small_split, small_cfg):
    c = M.ModelConfig(**{**small_cfg.to_dict(), "heads": 2})
    tr = M.forward_episode(noisy_params(c), c, episode_for(small_split, c), "train", 0)
    assert tr.predictions.shape == (6,)
