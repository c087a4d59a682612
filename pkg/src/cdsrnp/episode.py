"""Meta-learning episodes: positive-only support sets from overlapped users,
query sets of positives and sampled negatives."""
from dataclasses import dataclass

import numpy as np

from .data import DOMAINS, ProtocolError, negatives_for, pad_or_truncate, sample_negatives

VAL_SALT = 1
TEST_SALT = 2


@dataclass(frozen=True)
class Sample:
    x_a: tuple
    x_b: tuple
    candidate: int  # index into the shared item table
    candidate_domain: str
    label: float
    user: int = -1

    def __post_init__(self):
        if self.candidate == 0:
            raise ValueError("candidate cannot be the pad index")
        if self.label not in (0.0, 1.0):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass
class Episode:
    support: list
    query: list


@dataclass
class SampleBatch:
    """Column view of a list of samples, as the model consumes it."""

    x_a: np.ndarray  # (n, T) local A indices
    x_b: np.ndarray  # (n, T) local B indices
    candidate: np.ndarray  # (n,) shared-table indices
    label: np.ndarray  # (n,)
    user: np.ndarray

    def __len__(self):
        return self.candidate.shape[0]

    @classmethod
    def from_samples(cls, samples):
        if not samples:
            raise ValueError("empty sample list")
        return cls(
            np.array([s.x_a for s in samples], dtype=np.int64),
            np.array([s.x_b for s in samples], dtype=np.int64),
            np.array([s.candidate for s in samples], dtype=np.int64),
            np.array([s.label for s in samples], dtype=np.float64),
            np.array([s.user for s in samples], dtype=np.int64),
        )

    def take(self, idx):
        return SampleBatch(self.x_a[idx], self.x_b[idx], self.candidate[idx], self.label[idx], self.user[idx])

    @classmethod
    def concat(cls, batches):
        return cls(*(np.concatenate([getattr(b, f) for b in batches])
                     for f in ("x_a", "x_b", "candidate", "label", "user")))


def make_sample(split, target, candidate_local, label, T, split_name="train"):
    rec = split.record_for(target, split_name)
    return Sample(
        tuple(pad_or_truncate(rec.history("A"), T)),
        tuple(pad_or_truncate(rec.history("B"), T)),
        split.vocab.to_global(target.domain, candidate_local),
        target.domain,
        float(label),
        target.user,
    )


def support_pool(split, all_users=False):
    """Training targets grouped by user, restricted to overlapped users
    unless ``all_users``."""
    key = ("support_pool", all_users)
    if key not in split.cache:
        by_user = {}
        for t in split.train:
            if all_users or split.train_records[t.user].overlapped:
                by_user.setdefault(t.user, []).append(t)
        split.cache[key] = by_user
    return split.cache[key]


def _draw_support(split, n_support, T, rng, all_users):
    pool = support_pool(split, all_users)
    users = sorted(pool)
    if len(users) < n_support:
        kind = "training" if all_users else "overlapped training"
        raise ProtocolError(f"need {n_support} {kind} users for the support set, have {len(users)}")
    chosen = rng.choice(len(users), size=n_support, replace=False)
    out = []
    for i in chosen:
        targets = pool[users[i]]
        t = targets[int(rng.integers(len(targets)))]
        out.append(make_sample(split, t, t.item, 1.0, T))
    return out


def _history_of(split, target):
    return split.records[target.user].seq(target.domain)


def build_training_episode(split, n_support, n_query, T, seed, all_user_support=False):
    if n_query % 2:
        raise ValueError("query size must be even")
    rng = np.random.default_rng(seed)
    support = _draw_support(split, n_support, T, rng, all_user_support)

    n_pos = n_query // 2
    if len(split.train) < n_pos:
        raise ProtocolError(f"need {n_pos} training targets for the query set, have {len(split.train)}")
    by_user = support_pool(split, all_users=True)
    users = sorted(by_user)
    if len(users) >= n_pos:
        picked_users = [users[i] for i in rng.choice(len(users), size=n_pos, replace=False)]
        positives = [by_user[u][int(rng.integers(len(by_user[u])))] for u in picked_users]
    else:
        positives = [split.train[i] for i in rng.choice(len(split.train), size=n_pos, replace=False)]

    query = [make_sample(split, t, t.item, 1.0, T) for t in positives]
    for t in positives:
        (neg,) = sample_negatives(rng, 1, split.vocab.size(t.domain), _history_of(split, t))
        query.append(make_sample(split, t, neg, 0.0, T))
    return Episode(support, query)


def eval_support(split, n_support, T, seed, all_user_support=False):
    """Support context shared by every evaluation query under one seed."""
    return _draw_support(split, n_support, T, np.random.default_rng([seed, 0xE5]), all_user_support)


def eval_query(split, target, n_negatives, T, seed, split_name="test"):
    """Positive first, then ``n_negatives`` negatives for the same user and domain."""
    salt = TEST_SALT if split_name == "test" else VAL_SALT
    negs = negatives_for(split, target, n_negatives, seed, salt)
    query = [make_sample(split, target, target.item, 1.0, T, split_name)]
    query.extend(make_sample(split, target, n, 0.0, T, split_name) for n in negs)
    return query


def eval_query_batch(split, target, n_negatives, T, seed, split_name="test"):
    """Array form of :func:`eval_query` (same rows, same order)."""
    salt = TEST_SALT if split_name == "test" else VAL_SALT
    negs = negatives_for(split, target, n_negatives, seed, salt)
    rec = split.record_for(target, split_name)
    n = n_negatives + 1
    cand = np.array([target.item] + negs, dtype=np.int64)
    return SampleBatch(
        np.tile(np.array(pad_or_truncate(rec.history("A"), T), dtype=np.int64), (n, 1)),
        np.tile(np.array(pad_or_truncate(rec.history("B"), T), dtype=np.int64), (n, 1)),
        cand if target.domain == "A" else cand + split.vocab.size("A"),
        np.concatenate([[1.0], np.zeros(n_negatives)]),
        np.full(n, target.user, dtype=np.int64),
    )


def build_eval_episode(split, target, n_support, n_negatives, T, seed, split_name="test",
                       all_user_support=False):
    return Episode(eval_support(split, n_support, T, seed, all_user_support),
                   eval_query(split, target, n_negatives, T, seed, split_name))

