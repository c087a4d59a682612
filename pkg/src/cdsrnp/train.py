"""Losses, Adam, the episodic training loop, checkpoints and gradient audits."""
import hashlib
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as M
from .episode import build_training_episode
from .evaluation import rank_targets, summarize

_CKPT_MAGIC = b"CDSRNPCK"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    lambda_reg: float = 1e-5
    reg_norm: str = "squared"  # "squared": lambda * sum(theta^2); "l2": lambda * ||theta||_2
    epochs: int = 20
    episodes_per_epoch: int = 0  # 0 -> ceil(#train targets / (n_query / 2))
    n_support: int = 10
    n_query: int = 20
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_negatives: int = 199
    validate: bool = True

    def __post_init__(self):
        if self.n_query < 2 or self.n_query % 2:
            raise ValueError("n_query must be a positive even number")
        if self.n_support < 1 or self.learning_rate <= 0 or self.epochs < 0:
            raise ValueError("n_support and learning_rate must be positive, epochs non-negative")
        if self.reg_norm not in ("squared", "l2"):
            raise ValueError(f"reg_norm must be 'squared' or 'l2', got {self.reg_norm!r}")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be non-negative")


# ---------------------------------------------------------------- losses

def mse_loss(predictions, labels):
    labels = np.asarray(labels, dtype=np.float64)
    if predictions.shape != labels.shape:
        raise ad.ShapeError(f"mse_loss: {predictions.shape} predictions vs {labels.shape} labels")
    return ad.mean(ad.square(ad.sub(predictions, ad.tensor(labels))), axis=0)


def regularizer(params, lambda_reg, norm="squared"):
    if not len(params):
        return ad.tensor(0.0)
    sq = ad.sum_of_squares(params[name] for name in params)
    if norm == "l2":
        sq = ad.sqrt(sq) if sq.data > 0 else sq
    return ad.scale(sq, lambda_reg)


def total_loss(rec, kl, params, lambda_reg, norm="squared"):
    """Returns (loss, parts) where parts holds the three addends as floats."""
    reg = regularizer(params, lambda_reg, norm) if lambda_reg else ad.tensor(0.0)
    loss = ad.add(ad.add(rec, kl), reg)
    parts = {"loss_total": loss.item(), "loss_rec": rec.item(), "loss_kl": kl.item(), "loss_reg": reg.item()}
    return loss, parts


def episode_loss(params, mcfg, tcfg, episode, rng):
    trace = M.forward_episode(params, mcfg, episode, "train", rng)
    labels = np.array([s.label for s in episode.query])
    rec = mse_loss(trace.predictions, labels)
    kl = M.kl_divergence(trace.query_state, trace.support_state)
    loss, parts = total_loss(rec, kl, params, tcfg.lambda_reg, tcfg.reg_norm)
    return loss, parts, trace


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def fresh(cls, params):
        return cls({k: np.zeros_like(params[k].data) for k in params},
                   {k: np.zeros_like(params[k].data) for k in params})


def adam_step(params, state, cfg):
    """One bias-corrected Adam update from ``params[name].grad``. Pad rows of
    the item tables are never touched."""
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in params:
        p = params[name]
        g = p.grad
        if g.shape != p.data.shape or state.m[name].shape != p.data.shape:
            raise ad.ShapeError(f"adam_step: shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if name in M.ITEM_TABLES:
            update[0] = 0.0
        p.data -= update


# ---------------------------------------------------------------- checkpoints

def checkpoint_bytes(params, mcfg, meta=None):
    header = json.dumps({"model_config": mcfg.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    return _CKPT_MAGIC + struct.pack("<I", len(header)) + header + params.to_bytes()


def save_checkpoint(path, params, mcfg, meta=None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params, mcfg, meta))


def load_checkpoint(path, expect_vocab=None):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    (n,) = struct.unpack_from("<I", buf, 8)
    header = json.loads(buf[12:12 + n])
    mcfg = M.ModelConfig(**header["model_config"])
    params = ad.ParameterStore.from_bytes(buf[12 + n:])
    reference = M.init_params(mcfg, 0)
    if sorted(reference) != sorted(params):
        raise ValueError("checkpoint parameter names do not match its model config")
    for name in reference:
        if reference[name].shape != params[name].shape:
            raise ValueError(f"checkpoint shape mismatch for {name}: "
                             f"{params[name].shape} vs expected {reference[name].shape}")
    if expect_vocab is not None and tuple(expect_vocab) != (mcfg.n_items_a, mcfg.n_items_b):
        raise ValueError(f"checkpoint vocabulary {(mcfg.n_items_a, mcfg.n_items_b)} "
                         f"does not match data vocabulary {tuple(expect_vocab)}")
    return params, mcfg, header["meta"]


def params_digest(params):
    return hashlib.sha256(params.to_bytes()).hexdigest()


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    params: ad.ParameterStore
    best_params: ad.ParameterStore
    best_epoch: int
    log: list = field(default_factory=list)


def default_episodes(split, tcfg):
    return max(1, math.ceil(len(split.train) / (tcfg.n_query // 2)))


def validation_metrics(params, mcfg, split, tcfg, all_user_support=False):
    ranks = rank_targets(params, mcfg, split, tcfg.val_negatives, tcfg.n_support, tcfg.seed,
                         "validation", all_user_support)
    s = summarize(ranks)
    out = {}
    for d in ("a", "b"):
        ms = s.get(d.upper(), {"ndcg10": float("nan"), "hr10": float("nan")})
        out[f"val_ndcg10_{d}"] = ms["ndcg10"]
        out[f"val_hr10_{d}"] = ms["hr10"]
    return out


def _selection_score(rec):
    vals = [v for v in (rec["val_ndcg10_a"], rec["val_ndcg10_b"]) if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("-inf")


def train_loop(split, mcfg, tcfg, params=None, on_epoch=None):
    """Train from ``params`` (fresh init from the seed when None).

    One episode per optimizer step. Each epoch ends with a validation pass;
    the parameters with the best mean validation NDCG@10 are kept.
    """
    if params is None:
        params = M.init_params(mcfg, tcfg.seed)
    all_user = mcfg.variant == "all_user_support"
    state = AdamState.fresh(params)
    n_episodes = tcfg.episodes_per_epoch or default_episodes(split, tcfg)
    best, best_epoch, best_score = params.copy(), 0, float("-inf")
    log = []
    step = 0
    for epoch in range(1, tcfg.epochs + 1):
        t0 = time.perf_counter()
        sums = {"loss_total": 0.0, "loss_rec": 0.0, "loss_kl": 0.0, "loss_reg": 0.0}
        for e in range(n_episodes):
            rng = np.random.default_rng([tcfg.seed, epoch, e])
            episode = build_training_episode(split, tcfg.n_support, tcfg.n_query, mcfg.T, rng, all_user)
            params.zero_grad()
            loss, parts, _ = episode_loss(params, mcfg, tcfg, episode, rng)
            loss.backward()
            adam_step(params, state, tcfg)
            step += 1
            for k in sums:
                sums[k] += parts[k]
        rec = {"epoch": epoch, "episode": step}
        rec.update({k: v / n_episodes for k, v in sums.items()})
        if tcfg.validate and split.validation:
            rec.update(validation_metrics(params, mcfg, split, tcfg, all_user))
        else:
            rec.update({k: float("nan") for k in ("val_ndcg10_a", "val_hr10_a", "val_ndcg10_b", "val_hr10_b")})
        rec["wall_ms"] = round(1000.0 * (time.perf_counter() - t0), 3)
        log.append(rec)
        score = _selection_score(rec)
        if score > best_score:
            best, best_epoch, best_score = params.copy(), epoch, score
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(params, best if best_epoch else params.copy(), best_epoch, log)


def write_log(path, log):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in log:
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------- gradient audit

@dataclass
class AuditReport:
    errors: dict  # parameter name -> relative error
    n_values: int
    seconds: float

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def worst(self):
        return max(self.errors, key=self.errors.get) if self.errors else None


def relative_error(analytic, numeric, floor=1e-8):
    """max |a - n| scaled by the larger of the two gradients' max magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def tiny_problem(seed=0, T=5, D=8, n_items=12):
    """A small synthetic split that supports a T=5, D=8 audit."""
    from .data import SynthConfig, prepare, synth_generate

    rows = synth_generate(SynthConfig(users=40, items_a=n_items, items_b=n_items, overlap_frac=0.6,
                                      latent_dim=3, min_len=5, max_len=8, seed=seed))
    split = prepare(rows, seed=seed, min_user=1, min_item=1)
    mcfg = M.ModelConfig(D=D, T=T, epsilon_mode="zero", n_items_a=split.vocab.size("A"),
                         n_items_b=split.vocab.size("B"))
    return split, mcfg


def gradient_audit(mcfg=None, seed=0, split=None, n_support=4, n_query=4, step=1e-5, lambda_reg=1e-3):
    """Compare every parameter gradient of one episode's total loss against
    central finite differences."""
    t0 = time.perf_counter()
    if split is None or mcfg is None:
        split, base = tiny_problem(seed)
        mcfg = mcfg or base
    if mcfg.epsilon_mode != "zero":
        mcfg = M.ModelConfig(**{**mcfg.to_dict(), "epsilon_mode": "zero"})
    tcfg = TrainConfig(n_support=n_support, n_query=n_query, lambda_reg=lambda_reg, seed=seed)
    params = M.init_params(mcfg, seed)
    # move off the tiny embedding init so every path carries signal
    rng = np.random.default_rng([seed, 0xAD])
    for name in params:
        if name.startswith("emb."):
            params[name].data += 0.3 * rng.standard_normal(params[name].shape)
            if name in M.ITEM_TABLES:
                params[name].data[0] = 0.0
    episode = build_training_episode(split, n_support, n_query, mcfg.T, np.random.default_rng([seed, 1]))

    def value():
        loss, _, _ = episode_loss(params, mcfg, tcfg, episode, None)
        return loss.item()

    params.zero_grad()
    loss, _, _ = episode_loss(params, mcfg, tcfg, episode, None)
    loss.backward()
    errors, n_values = {}, 0
    with ad.no_grad():
        for name in params:
            p = params[name]
            analytic = p.grad.copy()
            numeric = np.zeros_like(p.data)
            flat, nflat = p.data.reshape(-1), numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = value()
                flat[i] = orig - step
                down = value()
                flat[i] = orig
                nflat[i] = (up - down) / (2 * step)
            errors[name] = relative_error(analytic, numeric)
            n_values += flat.size
    return AuditReport(errors, n_values, time.perf_counter() - t0)


def config_dict(tcfg):
    return asdict(tcfg)
