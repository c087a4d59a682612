"""Interaction logs, preprocessing, splitting and synthetic data."""
import math
from collections import Counter
from dataclasses import dataclass, field, fields, replace

import numpy as np

DOMAINS = ("A", "B")
PAD = 0


class DataFormatError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    domain: str
    timestamp: int


@dataclass
class Vocabulary:
    """Per-domain item ids; position ``i`` in a list is item index ``i + 1``."""

    items_a: list = field(default_factory=list)
    items_b: list = field(default_factory=list)

    def __post_init__(self):
        self._index = {d: {item: i + 1 for i, item in enumerate(self.items(d))} for d in DOMAINS}

    def items(self, domain):
        return self.items_a if domain == "A" else self.items_b

    def size(self, domain):
        return len(self.items(domain))

    def index(self, domain, item):
        return self._index[domain][item]

    def item(self, domain, index):
        if index == PAD:
            raise KeyError("index 0 is the pad token")
        return self.items(domain)[index - 1]

    def to_global(self, domain, index):
        """Index into the shared table (domain B offset by |V^A|)."""
        return index if domain == "A" else index + len(self.items_a)


@dataclass
class UserRecord:
    user: str
    seq_a: list
    seq_b: list

    @property
    def overlapped(self):
        return bool(self.seq_a) and bool(self.seq_b)

    def seq(self, domain):
        return self.seq_a if domain == "A" else self.seq_b

    def history(self, domain):
        """Sequence without its final (target) item."""
        return self.seq(domain)[:-1]


@dataclass(frozen=True)
class Target:
    user: int  # position in DatasetSplit.records
    domain: str
    item: int  # local index in the target's domain


@dataclass
class DatasetSplit:
    vocab: Vocabulary
    records: list  # original records; test samples read these
    train_records: list  # after overlap-ratio conversion; train/validation read these
    train: list
    validation: list
    test: list
    k_u: float | None = None
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    def record_for(self, target, split):
        recs = self.records if split == "test" else self.train_records
        return recs[target.user]


# ---------------------------------------------------------------- ingest

def load_interactions(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataFormatError(f"line {lineno}: expected 4 tab-separated fields, got {len(parts)}")
            user, item, domain, ts = parts
            if domain not in DOMAINS:
                raise DataFormatError(f"line {lineno}: domain must be A or B, got {domain!r}")
            try:
                timestamp = int(ts)
            except ValueError:
                raise DataFormatError(f"line {lineno}: timestamp {ts!r} is not an integer") from None
            out.append(Interaction(user, item, domain, timestamp))
    return out


def write_interactions(path, interactions):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("#user\titem\tdomain\ttimestamp\n")
        for it in interactions:
            fh.write(f"{it.user}\t{it.item}\t{it.domain}\t{it.timestamp}\n")


def filter_sparse(interactions, min_user=10, min_item=5):
    """Drop users with fewer than ``min_user`` interactions and items with
    fewer than ``min_item`` until neither rule removes anything."""
    rows = list(interactions)
    while True:
        users = Counter(it.user for it in rows)
        items = Counter((it.domain, it.item) for it in rows)
        kept = [it for it in rows
                if users[it.user] >= min_user and items[(it.domain, it.item)] >= min_item]
        if len(kept) == len(rows):
            return kept
        rows = kept


def build_user_records(interactions):
    items = {d: {} for d in DOMAINS}
    per_user = {}
    for pos, it in enumerate(interactions):
        vocab = items[it.domain]
        if it.item not in vocab:
            vocab[it.item] = len(vocab) + 1
        per_user.setdefault(it.user, {d: [] for d in DOMAINS})[it.domain].append(
            (it.timestamp, pos, vocab[it.item]))
    vocab = Vocabulary(list(items["A"]), list(items["B"]))
    records = []
    for user, seqs in per_user.items():
        a = [i for _, _, i in sorted(seqs["A"])]
        b = [i for _, _, i in sorted(seqs["B"])]
        records.append(UserRecord(user, a, b))
    return vocab, records


# ---------------------------------------------------------------- K_u control

def conversions_needed(n_users, n_non_overlapped, k_u):
    return max(0, math.floor(k_u * n_users - n_non_overlapped + 1e-9))


def apply_overlap_ratio(records, k_u, seed):
    """Turn randomly chosen overlapped users into single-domain users until
    the non-overlapped share reaches ``k_u``."""
    if not 0.0 <= k_u <= 1.0:
        raise ValueError(f"K_u must lie in [0, 1], got {k_u}")
    rng = np.random.default_rng([seed, 0x4B75])
    overlapped = [i for i, r in enumerate(records) if r.overlapped]
    n_convert = min(len(overlapped), conversions_needed(len(records), len(records) - len(overlapped), k_u))
    out = [replace(r, seq_a=list(r.seq_a), seq_b=list(r.seq_b)) for r in records]
    if n_convert == 0:
        return out
    chosen = rng.choice(len(overlapped), size=n_convert, replace=False)
    keep_a = rng.random(n_convert) < 0.5
    for pos, ka in zip(np.sort(chosen), keep_a[np.argsort(chosen)]):
        r = out[overlapped[pos]]
        if ka:
            r.seq_b = []
        else:
            r.seq_a = []
    return out


# ---------------------------------------------------------------- split

def split_leave_recent(records, vocab, ratios=(0.8, 0.1, 0.1), seed=0, k_u=None):
    """Partition every user's last in-domain item (one target per user and
    domain) into train/validation/test.

    Inputs for any sample of a user are that user's histories with all of the
    user's targets removed, so held-out items never appear as inputs.
    """
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    targets = [Target(u, d, r.seq(d)[-1]) for u, r in enumerate(records) for d in DOMAINS if r.seq(d)]
    n = len(targets)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_val = min(n_val, n - n_train)
    rng = np.random.default_rng([seed, 0x5A17])
    perm = rng.permutation(n)
    train = sorted((targets[i] for i in perm[:n_train]), key=_target_key)
    val = sorted((targets[i] for i in perm[n_train:n_train + n_val]), key=_target_key)
    test = sorted((targets[i] for i in perm[n_train + n_val:]), key=_target_key)

    train_records = records
    if k_u is not None:
        train_records = apply_overlap_ratio(records, k_u, seed)
        train = [t for t in train if train_records[t.user].seq(t.domain)]
        val = [t for t in val if train_records[t.user].seq(t.domain)]
    return DatasetSplit(vocab, records, train_records, train, val, test, k_u)


def _target_key(t):
    return (t.user, t.domain)


def write_split_manifest(path, split):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("#user\ttarget_item\ttarget_domain\tsplit\n")
        for name, targets in (("train", split.train), ("validation", split.validation), ("test", split.test)):
            for t in targets:
                user = split.records[t.user].user
                fh.write(f"{user}\t{split.vocab.item(t.domain, t.item)}\t{t.domain}\t{name}\n")


def prepare(interactions, seed, k_u=None, min_user=10, min_item=5, ratios=(0.8, 0.1, 0.1)):
    rows = filter_sparse(interactions, min_user, min_item)
    if not rows:
        raise ProtocolError("no interactions survive filtering")
    vocab, records = build_user_records(rows)
    return split_leave_recent(records, vocab, ratios, seed, k_u)


# ---------------------------------------------------------------- sampling

def sample_negatives(rng, k, vocab_size, history):
    """``k`` distinct items from 1..vocab_size not in ``history``."""
    excluded = {i for i in history if i != PAD}
    pool = vocab_size - len(excluded)
    if k > pool:
        raise ProtocolError(f"cannot draw {k} negatives from a pool of {pool} items")
    if excluded:
        cand = np.setdiff1d(np.arange(1, vocab_size + 1), np.fromiter(excluded, dtype=np.int64))
    else:
        cand = np.arange(1, vocab_size + 1)
    return cand[rng.choice(cand.size, size=k, replace=False)].tolist()


def negatives_for(split, target, k, seed, salt=0):
    """Seeded negatives for one target, independent of evaluation order."""
    rng = np.random.default_rng([seed, salt, target.user, DOMAINS.index(target.domain)])
    history = split.records[target.user].seq(target.domain)
    return sample_negatives(rng, k, split.vocab.size(target.domain), history)


def pad_or_truncate(seq, T):
    if T < 1:
        raise ValueError("T must be at least 1")
    seq = list(seq)[-T:]
    return [PAD] * (T - len(seq)) + seq


# ---------------------------------------------------------------- synthetic

@dataclass
class SynthConfig:
    users: int = 2000
    items_a: int = 200
    items_b: int = 200
    overlap_frac: float = 0.5
    latent_dim: int = 2
    min_len: int = 10
    max_len: int = 20
    seed: int = 0
    # softmax inverse temperature for item choice
    sharpness: float = 6.0

    def validate(self):
        if self.users < 1 or self.items_a < 1 or self.items_b < 1 or self.latent_dim < 1:
            raise ValueError("users, items_a, items_b and latent_dim must be positive")
        if not 0.0 <= self.overlap_frac <= 1.0:
            raise ValueError("overlap_frac must lie in [0, 1]")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.max_len > min(self.items_a, self.items_b):
            raise ValueError("max_len cannot exceed the item count of a domain")
        if self.sharpness < 0:
            raise ValueError("sharpness must be non-negative")

    @classmethod
    def from_dict(cls, values):
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise KeyError(f"unknown synthetic config key {key!r}")
            kind = float if known[key] in (float, "float") else int
            kwargs[key] = kind(raw)
        return cls(**kwargs)


@dataclass
class SynthWorld:
    """Generator latents, kept so tests can build an oracle scorer."""

    user_latent: np.ndarray
    item_latent: dict
    item_bias: dict


def _synth_world(cfg, rng):
    L = cfg.latent_dim
    user_latent = rng.standard_normal((cfg.users, L))
    item_latent = {"A": rng.standard_normal((cfg.items_a, L)), "B": rng.standard_normal((cfg.items_b, L))}
    item_bias = {"A": 0.5 * rng.standard_normal(cfg.items_a), "B": 0.5 * rng.standard_normal(cfg.items_b)}
    return SynthWorld(user_latent, item_latent, item_bias)


def synth_affinity(world, cfg, user, domain):
    """Logits of every item of ``domain`` for ``user`` (item index i+1 at position i)."""
    lat = world.item_latent[domain] @ world.user_latent[user] / math.sqrt(cfg.latent_dim)
    return cfg.sharpness * lat + world.item_bias[domain]


def synth_generate(cfg, return_world=False):
    """Users share one latent space across both domains, so a user's history
    in one domain predicts their choices in the other."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 0x5E7])
    world = _synth_world(cfg, rng)
    n_over = int(round(cfg.overlap_frac * cfg.users))
    kinds = np.array(["AB"] * n_over + ["A", "B"] * ((cfg.users - n_over) // 2 + 1))[:cfg.users]
    kinds = kinds[rng.permutation(cfg.users)]
    events = []
    for u in range(cfg.users):
        for d in DOMAINS:
            if d not in kinds[u]:
                continue
            n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
            logits = synth_affinity(world, cfg, u, d)
            # Gumbel top-n draws n items without replacement from softmax(logits)
            keys = logits + rng.gumbel(size=logits.size)
            chosen = np.argsort(-keys, kind="stable")[:n]
            chosen = chosen[rng.permutation(n)]
            times = np.sort(rng.integers(0, 10_000_000, size=n))
            for item, ts in zip(chosen, times):
                events.append((int(ts) + 1_500_000_000, u, d, int(item)))
    events.sort(key=lambda e: (e[0], e[1]))
    interactions = [Interaction(f"u{u}", f"{d.lower()}{i}", d, ts) for ts, u, d, i in events]
    if return_world:
        return interactions, world
    return interactions
