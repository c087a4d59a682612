"""Sampled ranking evaluation: one positive against n negatives,
NDCG@10 and HR@10 per domain, aggregated over seeds."""
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as M
from .data import DOMAINS
from .episode import eval_query_batch, eval_support

K = 10


@dataclass(frozen=True)
class RankResult:
    user: int
    domain: str
    rank_of_positive: int
    candidate_count: int

    def __post_init__(self):
        if not 1 <= self.rank_of_positive <= self.candidate_count:
            raise ValueError(f"rank {self.rank_of_positive} outside 1..{self.candidate_count}")


@dataclass
class MetricsReport:
    # metrics[domain][metric] -> list of per-seed values
    metrics: dict
    seeds: list
    n_users: dict
    label: str = "model"
    extra: dict = field(default_factory=dict)

    def mean(self, domain, metric):
        return float(np.mean(self.metrics[domain][metric]))

    def variance(self, domain, metric):
        # population variance over seeds
        return float(np.var(self.metrics[domain][metric]))

    def overall(self, metric):
        """Mean over the domains that have test users."""
        ds = [d for d in DOMAINS if self.n_users.get(d)]
        return float(np.mean([self.mean(d, metric) for d in ds])) if ds else 0.0

    def records(self):
        out = []
        for d in DOMAINS:
            if d not in self.metrics:
                continue
            for m in sorted(self.metrics[d]):
                var = self.variance(d, m)
                out.append({"domain": d, "metric": m, "mean": self.mean(d, m), "variance": var,
                            "std": math.sqrt(var), "n_seeds": len(self.seeds),
                            "n_users": self.n_users.get(d, 0)})
        return out

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records():
                fh.write(json.dumps({"model": self.label, **rec}, sort_keys=False) + "\n")


def rank_positive(scores, positive_index):
    """1-based rank of the positive; ties count against it."""
    scores = np.asarray(scores, dtype=np.float64)
    s = scores[positive_index]
    return int(np.count_nonzero(scores >= s))


def ndcg_at_k(rank, k=K):
    if rank < 1:
        raise ValueError("rank must be >= 1")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def hr_at_k(rank, k=K):
    if rank < 1:
        raise ValueError("rank must be >= 1")
    return 1.0 if rank <= k else 0.0


def random_expectation(n_candidates, k=K):
    """HR@k and NDCG@k of a uniformly random ranking."""
    hr = min(k, n_candidates) / n_candidates
    ndcg = sum(1.0 / math.log2(r + 1) for r in range(1, min(k, n_candidates) + 1)) / n_candidates
    return hr, ndcg


def _targets(split, split_name):
    return {"test": split.test, "validation": split.validation, "train": split.train}[split_name]


def rank_targets(params, cfg, split, n_negatives, n_support, seed, split_name="test",
                 all_user_support=False, chunk=64):
    """Rank every target of ``split_name`` under one seed's support context."""
    targets = _targets(split, split_name)
    if not targets:
        return []
    T = cfg.T
    with ad.no_grad():
        support = eval_support(split, n_support, T, seed, all_user_support)
        ctx = M.support_context(params, cfg, support, np.random.default_rng([seed, 0x2E]))
        out = []
        for start in range(0, len(targets), chunk):
            block = targets[start:start + chunk]
            batches = [eval_query_batch(split, t, n_negatives, T, seed, split_name) for t in block]
            xa = np.stack([b.x_a[0] for b in batches])
            xb = np.stack([b.x_b[0] for b in batches])
            f_users = M.encode_users(params, cfg, xa, xb)
            n = n_negatives + 1
            f = ad.take_rows(f_users, np.repeat(np.arange(len(block)), n))
            cand = np.concatenate([b.candidate for b in batches])
            f_s = M.adaptive_or_zero(params, cfg, f, ctx.f)
            scores = M.predict(params, f, f_s, ctx.state.z, M.candidate_embedding(params, cand)).data
            for i, t in enumerate(block):
                out.append(RankResult(t.user, t.domain, rank_positive(scores[i * n:(i + 1) * n], 0), n))
    return out


def summarize(ranks):
    """Per-domain mean NDCG@10 / HR@10 over a list of RankResult."""
    out = {}
    for d in DOMAINS:
        rs = [r.rank_of_positive for r in ranks if r.domain == d]
        if rs:
            out[d] = {"ndcg10": float(np.mean([ndcg_at_k(r) for r in rs])),
                      "hr10": float(np.mean([hr_at_k(r) for r in rs]))}
    return out


def _report(per_seed, seeds, ranks_last, label):
    metrics = {}
    for summary in per_seed:
        for d, ms in summary.items():
            for m, v in ms.items():
                metrics.setdefault(d, {}).setdefault(m, []).append(v)
    n_users = {d: sum(1 for r in ranks_last if r.domain == d) for d in DOMAINS}
    return MetricsReport(metrics, list(seeds), n_users, label)


def evaluate(params, cfg, split, n_negatives=999, n_support=10, seeds=(0, 1, 2, 3, 4),
             split_name="test", all_user_support=None, label="model"):
    if not seeds:
        raise ValueError("at least one evaluation seed is required")
    if all_user_support is None:
        all_user_support = cfg.variant == "all_user_support"
    per_seed, ranks = [], []
    for s in seeds:
        ranks = rank_targets(params, cfg, split, n_negatives, n_support, s, split_name, all_user_support)
        per_seed.append(summarize(ranks))
    return _report(per_seed, seeds, ranks, label)


def random_baseline(split, n_negatives=999, seeds=(0,), split_name="test"):
    """Uniform random scores through the same ranking path."""
    per_seed, ranks = [], []
    for s in seeds:
        rng = np.random.default_rng([s, 0xBA5E])
        ranks = [RankResult(t.user, t.domain, rank_positive(rng.random(n_negatives + 1), 0), n_negatives + 1)
                 for t in _targets(split, split_name)]
        per_seed.append(summarize(ranks))
    return _report(per_seed, seeds, ranks, "random")
