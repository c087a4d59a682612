"""The CDSRNP network.

Per sample, item sequences of both domains go through specific and shared
embeddings and masked self-attention encoders, are fused position-wise and
mean-pooled into a user vector ``f``. Support and query sets are summarised
into Gaussian latents; each query attends over the support users' ``f`` and
the prediction head scores the candidate item.

Row-vector convention throughout: a layer computes ``x @ W + b``.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .episode import SampleBatch

VARIANTS = ("full", "one_embedding", "no_adaptive", "all_user_support")
ITEM_TABLES = ("emb.v_a", "emb.v_b", "emb.v_shared")
LOGIT_BOUND = 30.0


@dataclass
class ModelConfig:
    D: int = 32
    T: int = 15
    mlp_hidden: int = 0  # 0 means "same as D"
    heads: int = 1
    epsilon_mode: str = "sample"
    variant: str = "full"
    n_items_a: int = 0
    n_items_b: int = 0
    embed_std: float = 0.01

    def __post_init__(self):
        if self.D < 1 or self.T < 1:
            raise ValueError("D and T must be positive")
        if self.heads < 1 or self.D % self.heads:
            raise ValueError(f"heads={self.heads} must divide D={self.D}")
        if self.epsilon_mode not in ("sample", "zero"):
            raise ValueError(f"epsilon_mode must be 'sample' or 'zero', got {self.epsilon_mode!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def hidden(self):
        return self.mlp_hidden or self.D

    def to_dict(self):
        return asdict(self)


@dataclass
class LatentState:
    mu: ad.Tensor
    log_sigma: ad.Tensor
    z: ad.Tensor
    eps: np.ndarray


@dataclass
class SupportContext:
    f: ad.Tensor  # (N_s, D)
    r: ad.Tensor  # (N_s, D) per-sample representations
    state: LatentState


@dataclass
class ForwardTrace:
    f_support: ad.Tensor
    f_query: ad.Tensor
    f_s: ad.Tensor  # adaptive-layer output per query
    r_support: ad.Tensor
    support_state: LatentState
    query_state: LatentState | None
    predictions: ad.Tensor  # (N_q,)


# ---------------------------------------------------------------- parameters

def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_mlp(store, rng, prefix, n_in, n_hidden, n_out):
    store.add(f"{prefix}.w1", _uniform(rng, n_in, (n_in, n_hidden)))
    store.add(f"{prefix}.b1", _uniform(rng, n_in, (n_hidden,)))
    store.add(f"{prefix}.w2", _uniform(rng, n_hidden, (n_hidden, n_out)))
    store.add(f"{prefix}.b2", _uniform(rng, n_hidden, (n_out,)))


def _add_encoder(store, rng, prefix, D, hidden):
    for w in ("wq", "wk", "wv"):
        store.add(f"{prefix}.{w}", _uniform(rng, D, (D, D)))
    _add_mlp(store, rng, f"{prefix}.ffn", D, hidden, D)


def init_params(cfg, seed):
    """Fresh parameters for ``cfg``. The variant decides which tensors exist."""
    if cfg.n_items_a < 1 or cfg.n_items_b < 1:
        raise ValueError("vocabulary sizes must be set on the model config")
    rng = np.random.default_rng([seed, 0x1417])
    D, H, T = cfg.D, cfg.hidden, cfg.T
    na, nb = cfg.n_items_a, cfg.n_items_b
    store = ad.ParameterStore()

    def table(name, rows):
        t = cfg.embed_std * rng.standard_normal((rows, D))
        if name in ITEM_TABLES:
            t[0] = 0.0
        store.add(name, t)

    separate = cfg.variant != "one_embedding"
    if separate:
        table("emb.v_a", na + 1)
        table("emb.v_b", nb + 1)
    table("emb.v_shared", na + nb + 1)
    if separate:
        table("emb.p_a", T)
        table("emb.p_b", T)
    table("emb.p_shared", T)
    if separate:
        _add_encoder(store, rng, "enc_specific", D, H)
    _add_encoder(store, rng, "enc_shared", D, H)
    _add_mlp(store, rng, "fuse_a", 2 * D, H, D)
    _add_mlp(store, rng, "fuse_b", 2 * D, H, D)
    _add_mlp(store, rng, "fuse", 6 * D, H, D)
    _add_mlp(store, rng, "sample_enc", 2 * D + 1, H, D)
    for w in ("w_r", "w_mu", "w_sigma"):
        store.add(f"latent.{w}", _uniform(rng, D, (D, D)))
    if cfg.variant != "no_adaptive":
        for w in ("wq", "wk", "wv"):
            store.add(f"adapt.{w}", _uniform(rng, D, (D, D)))
    _add_mlp(store, rng, "head_d", 3 * D, H, D)
    _add_mlp(store, rng, "head_out", 2 * D, H, 1)
    return store


# ---------------------------------------------------------------- layers

def mlp(params, prefix, x):
    h = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return ad.add(ad.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def shared_index(x_b, n_items_a):
    """Map local domain-B indices to shared-table rows; pads stay 0."""
    x_b = np.asarray(x_b)
    return np.where(x_b > 0, x_b + n_items_a, 0)


def embed_sample(params, cfg, x_a, x_b):
    """Returns (E_a_specific, E_a_shared, E_b_specific, E_b_shared), each (n, T, D).
    Under the one-embedding variant the specific pair is the shared pair."""
    x_a = np.atleast_2d(x_a)
    x_b = np.atleast_2d(x_b)
    p = params["emb.p_shared"]
    e_a_sh = ad.add(ad.embedding(params["emb.v_shared"], x_a), p)
    e_b_sh = ad.add(ad.embedding(params["emb.v_shared"], shared_index(x_b, cfg.n_items_a)), p)
    if cfg.variant == "one_embedding":
        return e_a_sh, e_a_sh, e_b_sh, e_b_sh
    e_a = ad.add(ad.embedding(params["emb.v_a"], x_a), params["emb.p_a"])
    e_b = ad.add(ad.embedding(params["emb.v_b"], x_b), params["emb.p_b"])
    return e_a, e_a_sh, e_b, e_b_sh


def attention_mask(pad):
    """Position t may attend to non-pad positions u <= t. ``pad`` is (n, T) bool."""
    pad = np.asarray(pad, dtype=bool)
    T = pad.shape[-1]
    causal = np.tril(np.ones((T, T), dtype=bool))
    return causal[None, :, :] & ~pad[:, None, :]


def _split_heads(x, heads):
    n, T, D = x.shape
    return ad.transpose(ad.reshape(x, (n, T, heads, D // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    n, h, T, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (n, T, h * dh))


def encode_sequence(params, prefix, E, pad, heads=1):
    """One masked self-attention block with residuals and a position-wise
    feed-forward. ``E`` is (n, T, D)."""
    D = E.shape[-1]
    mask = attention_mask(pad)
    q = ad.matmul(E, params[f"{prefix}.wq"])
    k = ad.matmul(E, params[f"{prefix}.wk"])
    v = ad.matmul(E, params[f"{prefix}.wv"])
    if heads == 1:
        scores = ad.scale(ad.matmul(q, ad.swap_last(k)), 1.0 / math.sqrt(D))
        att = ad.matmul(ad.masked_softmax(scores, mask), v)
    else:
        qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
        scores = ad.scale(ad.matmul(qh, ad.swap_last(kh)), 1.0 / math.sqrt(D // heads))
        att = _merge_heads(ad.matmul(ad.masked_softmax(scores, mask[:, None]), vh))
    h = ad.add(E, att)
    return ad.add(h, mlp(params, f"{prefix}.ffn", h))


def fuse(params, x_a_spec, x_a_sh, x_b_spec, x_b_sh):
    f_a = mlp(params, "fuse_a", ad.concat([x_a_spec, x_a_sh], -1))
    f_b = mlp(params, "fuse_b", ad.concat([x_b_spec, x_b_sh], -1))
    return mlp(params, "fuse", ad.concat([f_a, f_b, x_a_spec, x_a_sh, x_b_spec, x_b_sh], -1))


def pool(F):
    return ad.mean(F, axis=-2)


def encode_users(params, cfg, x_a, x_b):
    """User vectors ``f`` (n, D) for rows of padded index arrays. Identical
    rows are encoded once."""
    x_a = np.asarray(x_a, dtype=np.int64)
    x_b = np.asarray(x_b, dtype=np.int64)
    n = x_a.shape[0]
    uniq, inverse = np.unique(np.concatenate([x_a, x_b], axis=1), axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    T = x_a.shape[1]
    ua, ub = uniq[:, :T], uniq[:, T:]
    m = ua.shape[0]
    e_a, e_a_sh, e_b, e_b_sh = embed_sample(params, cfg, ua, ub)
    pad = np.concatenate([ua == 0, ub == 0], axis=0)
    x_sh = encode_sequence(params, "enc_shared", ad.concat([e_a_sh, e_b_sh], 0), pad, cfg.heads)
    x_a_sh, x_b_sh = ad.split(x_sh, [m, m], axis=0)
    if cfg.variant == "one_embedding":
        x_a_sp, x_b_sp = x_a_sh, x_b_sh
    else:
        x_sp = encode_sequence(params, "enc_specific", ad.concat([e_a, e_b], 0), pad, cfg.heads)
        x_a_sp, x_b_sp = ad.split(x_sp, [m, m], axis=0)
    f = pool(fuse(params, x_a_sp, x_a_sh, x_b_sp, x_b_sh))
    if m == n and np.array_equal(inverse, np.arange(n)):
        return f
    return ad.take_rows(f, inverse)


def candidate_embedding(params, candidates):
    return ad.embedding(params["emb.v_shared"], np.asarray(candidates, dtype=np.int64))


def encode_sample_latent(params, f, cand_emb, labels):
    """Per-sample representation from [f, candidate embedding, label]."""
    y = ad.tensor(np.asarray(labels, dtype=np.float64).reshape(-1, 1))
    return mlp(params, "sample_enc", ad.concat([f, cand_emb, y], -1))


def aggregate(rs):
    """Mean over the sample axis of an (n, D) tensor, or over a list of (D,) tensors."""
    if isinstance(rs, (list, tuple)):
        if not rs:
            raise ValueError("cannot aggregate an empty set")
        rs = ad.concat([ad.reshape(r, (1, -1)) for r in rs], 0)
    if rs.shape[0] == 0:
        raise ValueError("cannot aggregate an empty set")
    return ad.mean(rs, axis=0)


def reparameterize(params, r, epsilon_mode, rng):
    r = ad.reshape(r, (1, -1))
    r_hat = ad.relu(ad.matmul(r, params["latent.w_r"]))
    mu = ad.reshape(ad.matmul(r_hat, params["latent.w_mu"]), (-1,))
    log_sigma = ad.reshape(ad.matmul(r_hat, params["latent.w_sigma"]), (-1,))
    if epsilon_mode == "zero":
        eps = np.zeros(mu.shape)
    else:
        eps = rng.standard_normal(mu.shape)
    z = ad.add(mu, ad.mul(ad.exp(log_sigma), ad.tensor(eps)))
    return LatentState(mu, log_sigma, z, eps)


def kl_divergence(q, s):
    """KL(N(mu_q, sigma_q^2) || N(mu_s, sigma_s^2)) summed over dimensions."""
    diff = ad.sub(q.mu, s.mu)
    log_ratio = ad.sub(s.log_sigma, q.log_sigma)
    var_ratio = ad.exp(ad.scale(log_ratio, -2.0))
    mahal = ad.mul(ad.square(diff), ad.exp(ad.scale(s.log_sigma, -2.0)))
    per_dim = ad.add(ad.add(log_ratio, ad.scale(ad.add(var_ratio, mahal), 0.5)), -0.5)
    return ad.sum(per_dim)


def adaptive_attention(params, f_query, f_support, heads=1):
    """Cross-attention of each query user over the support users. Returns (n_q, D)."""
    if f_support.shape[0] == 0:
        raise ValueError("adaptive attention needs a nonempty support set")
    D = f_query.shape[-1]
    q = ad.matmul(f_query, params["adapt.wq"])
    k = ad.matmul(f_support, params["adapt.wk"])
    v = ad.matmul(f_support, params["adapt.wv"])
    if heads == 1:
        w = ad.softmax(ad.scale(ad.matmul(q, ad.swap_last(k)), 1.0 / math.sqrt(D)))
        return ad.matmul(w, v)
    dh = D // heads

    def split(t):
        return ad.transpose(ad.reshape(t, (t.shape[0], heads, dh)), (1, 0, 2))

    qh, kh, vh = split(q), split(k), split(v)
    w = ad.softmax(ad.scale(ad.matmul(qh, ad.swap_last(kh)), 1.0 / math.sqrt(dh)))
    out = ad.matmul(w, vh)  # (heads, n_q, dh)
    return ad.reshape(ad.transpose(out, (1, 0, 2)), (f_query.shape[0], D))


def tile_rows(z, n):
    return ad.take_rows(ad.reshape(z, (1, -1)), np.zeros(n, dtype=np.int64))


def predict(params, f, f_s, z, cand_emb):
    """Scores in (0, 1) for each row; ``z`` is one latent vector shared by all rows."""
    d = mlp(params, "head_d", ad.concat([f, f_s, tile_rows(z, f.shape[0])], -1))
    logit = mlp(params, "head_out", ad.concat([d, cand_emb], -1))
    # sigmoid(+-30) stays strictly inside (0, 1) in float64
    return ad.sigmoid(ad.clip(ad.reshape(logit, (-1,)), -LOGIT_BOUND, LOGIT_BOUND))


# ---------------------------------------------------------------- episode forward

def _as_batch(samples):
    return samples if isinstance(samples, SampleBatch) else SampleBatch.from_samples(samples)


def support_context(params, cfg, support, rng, f=None):
    support = _as_batch(support)
    if f is None:
        f = encode_users(params, cfg, support.x_a, support.x_b)
    r = encode_sample_latent(params, f, candidate_embedding(params, support.candidate), support.label)
    state = reparameterize(params, aggregate(r), cfg.epsilon_mode, rng)
    return SupportContext(f, r, state)


def adaptive_or_zero(params, cfg, f_query, f_support):
    if cfg.variant == "no_adaptive":
        return ad.tensor(np.zeros(f_query.shape))
    return adaptive_attention(params, f_query, f_support, cfg.heads)


def score_queries(params, cfg, ctx, query, f=None):
    """Inference-mode scores for a query batch under a fixed support context.
    Query labels are never read."""
    query = _as_batch(query)
    if f is None:
        f = encode_users(params, cfg, query.x_a, query.x_b)
    f_s = adaptive_or_zero(params, cfg, f, ctx.f)
    return predict(params, f, f_s, ctx.state.z, candidate_embedding(params, query.candidate))


def forward_episode(params, cfg, episode, mode="train", rng=None):
    if mode not in ("train", "inference"):
        raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")
    rng = np.random.default_rng(rng)
    support = _as_batch(episode.support)
    query = _as_batch(episode.query)
    n_s = len(support)
    f_all = encode_users(params, cfg, np.concatenate([support.x_a, query.x_a]),
                         np.concatenate([support.x_b, query.x_b]))
    f_sup, f_q = ad.split(f_all, [n_s, len(query)], axis=0)
    ctx = support_context(params, cfg, support, rng, f=f_sup)
    f_s = adaptive_or_zero(params, cfg, f_q, f_sup)
    cand_q = candidate_embedding(params, query.candidate)
    q_state = None
    if mode == "train":
        r_q = encode_sample_latent(params, f_q, cand_q, query.label)
        q_state = reparameterize(params, aggregate(r_q), cfg.epsilon_mode, rng)
        z = q_state.z
    else:
        z = ctx.state.z
    preds = predict(params, f_q, f_s, z, cand_q)
    return ForwardTrace(f_sup, f_q, f_s, ctx.r, ctx.state, q_state, preds)
