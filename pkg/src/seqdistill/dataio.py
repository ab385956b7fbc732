"""Interaction-log ingestion, filtering, splitting, sampling, and synthesis.

The on-disk format is JSON Lines, one object per line:
``{"user": str, "item": str, "ts": int, "title": str}``. All derived
artifacts (splits, candidate sets, subset labels, synthetic data) are
deterministic functions of the dataset and a seeded `Rng`.
"""

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from seqdistill import kernels
from seqdistill.errors import ConfigError, ContractViolation, DataError
from seqdistill.numcore import Rng


@dataclass
class Interaction:
    user: str
    item: str
    ts: int
    title: str


class InteractionDataset:
    """Densely indexed users/items with time-ordered per-user sequences."""

    def __init__(self, users, items, titles, sequences, timestamps):
        self.users = users            # external user id by index
        self.items = items            # external item id by index
        self.titles = titles          # title by item index
        self.sequences = sequences    # per user: list of item indices
        self.timestamps = timestamps  # per user: list of epoch seconds
        self.user_index = {u: i for i, u in enumerate(users)}
        self.item_index = {it: i for i, it in enumerate(items)}
        self._hash = None

    @property
    def n_users(self):
        return len(self.users)

    @property
    def n_items(self):
        return len(self.items)

    @property
    def n_interactions(self):
        return sum(len(s) for s in self.sequences)

    @classmethod
    def from_interactions(cls, interactions):
        """Index users/items in first-appearance order; sort each sequence by
        (ts, input order) with a stable sort."""
        users, items, titles = [], [], []
        user_index, item_index = {}, {}
        per_user = []
        for rec in interactions:
            u = user_index.get(rec.user)
            if u is None:
                u = user_index[rec.user] = len(users)
                users.append(rec.user)
                per_user.append([])
            i = item_index.get(rec.item)
            if i is None:
                i = item_index[rec.item] = len(items)
                items.append(rec.item)
                titles.append(rec.title)
            per_user[u].append((rec.ts, i))
        sequences, timestamps = [], []
        for rows in per_user:
            rows.sort(key=lambda r: r[0])
            timestamps.append([ts for ts, _ in rows])
            sequences.append([i for _, i in rows])
        return cls(users, items, titles, sequences, timestamps)

    def to_interactions(self):
        out = []
        for u in range(self.n_users):
            for ts, i in zip(self.timestamps[u], self.sequences[u]):
                out.append(Interaction(self.users[u], self.items[i], ts, self.titles[i]))
        return out

    def content_hash(self):
        if self._hash is None:
            h = hashlib.sha256()
            for u in range(self.n_users):
                h.update(self.users[u].encode("utf-8"))
                for ts, i in zip(self.timestamps[u], self.sequences[u]):
                    h.update(f"\x1f{ts}\x1f{self.items[i]}\x1f{self.titles[i]}\x1e".encode("utf-8"))
            self._hash = h.hexdigest()
        return self._hash


def _parse_line(obj, lineno):
    if not isinstance(obj, dict):
        raise DataError(f"line {lineno}: expected a JSON object")
    for key, kind in (("user", str), ("item", str), ("ts", int), ("title", str)):
        if key not in obj:
            raise DataError(f"line {lineno}: missing field {key!r}")
        value = obj[key]
        if not isinstance(value, kind) or isinstance(value, bool):
            raise DataError(
                f"line {lineno}: field {key!r} must be {kind.__name__}, "
                f"got {type(value).__name__}"
            )
    if obj["ts"] < 0:
        raise DataError(f"line {lineno}: ts must be >= 0")
    return Interaction(obj["user"], obj["item"], obj["ts"], obj["title"])


def ingest(path):
    """Read a JSON-lines interaction log; duplicates are kept."""
    interactions = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            interactions.append(_parse_line(obj, lineno))
    if not interactions:
        raise DataError(f"{path}: no interactions found")
    return InteractionDataset.from_interactions(interactions)


def write_jsonl(ds, path):
    with open(path, "w", encoding="utf-8") as fh:
        for u in range(ds.n_users):
            for ts, i in zip(ds.timestamps[u], ds.sequences[u]):
                fh.write(json.dumps({
                    "user": ds.users[u],
                    "item": ds.items[i],
                    "ts": int(ts),
                    "title": ds.titles[i],
                }) + "\n")


def five_core(ds, k=5):
    """Iteratively drop users/items with < k interactions until a fixpoint."""
    interactions = ds.to_interactions()
    while True:
        user_counts, item_counts = {}, {}
        for rec in interactions:
            user_counts[rec.user] = user_counts.get(rec.user, 0) + 1
            item_counts[rec.item] = item_counts.get(rec.item, 0) + 1
        kept = [
            rec for rec in interactions
            if user_counts[rec.user] >= k and item_counts[rec.item] >= k
        ]
        if len(kept) == len(interactions):
            break
        interactions = kept
    if not interactions:
        raise DataError(f"dataset vanished: no user/item pair survives {k}-core filtering")
    return InteractionDataset.from_interactions(interactions)


@dataclass
class SplitSpec:
    """Per-user leave-last-out partition of each sequence."""

    users: list                 # included user indices
    train: dict                 # user -> list of item indices (prefix)
    valid: dict                 # user -> item index (second-to-last)
    test: dict                  # user -> item index (last)
    excluded: list = field(default_factory=list)   # users with fewer than 3 items


def split_leave_last_out(ds):
    users, train, valid, test, excluded = [], {}, {}, {}, []
    for u in range(ds.n_users):
        seq = ds.sequences[u]
        if len(seq) < 3:
            excluded.append(u)
            continue
        users.append(u)
        train[u] = list(seq[:-2])
        valid[u] = seq[-2]
        test[u] = seq[-1]
    return SplitSpec(users=users, train=train, valid=valid, test=test, excluded=excluded)


def eval_input(ds, split, u, phase):
    """Items and timestamps fed to a model when scoring ``phase`` for user u."""
    if phase == "valid":
        items = split.train[u]
    elif phase == "test":
        items = split.train[u] + [split.valid[u]]
    else:
        raise ContractViolation(f"unknown phase {phase!r}")
    return items, ds.timestamps[u][: len(items)]


@dataclass
class CandidateSet:
    user: int
    positive: int
    negatives: np.ndarray
    requested: int
    shortfall: bool = False

    def items(self):
        return np.concatenate(([self.positive], self.negatives))


_PHASE_CODE = {"valid": 1, "test": 2}


def sample_eval_candidates(ds, split, m, rng, phase):
    """Per-user candidate sets: the held-out positive plus m uniform negatives
    drawn without replacement from items the user never interacted with."""
    positives = split.valid if phase == "valid" else split.test
    code = _PHASE_CODE[phase]
    out = {}
    all_items = np.arange(ds.n_items)
    for u in split.users:
        seen = np.zeros(ds.n_items, dtype=bool)
        seen[ds.sequences[u]] = True
        pool = all_items[~seen]
        if len(pool) <= m:
            negs = pool.copy()
            shortfall = len(pool) < m
        else:
            negs = rng.split(code, u).choice(pool, size=m, replace=False)
            shortfall = False
        out[u] = CandidateSet(
            user=u, positive=positives[u], negatives=negs,
            requested=m, shortfall=shortfall,
        )
    return out


def candidates_hash(candidates):
    """Stable digest used to audit that compared models saw identical sets."""
    h = hashlib.sha256()
    for u in sorted(candidates):
        c = candidates[u]
        h.update(np.int64(u).tobytes())
        h.update(np.int64(c.positive).tobytes())
        h.update(np.asarray(c.negatives, dtype=np.int64).tobytes())
    return h.hexdigest()


def shuffle_sequences(target, rng, scope="inference"):
    """Uniformly permute each user's item payload; timestamps and position
    markers stay put. ``scope="train-once"`` (on a SplitSpec) fixes one
    permutation of the training prefixes for the whole run;
    ``scope="inference"`` permutes a {user: items} mapping at scoring time.
    """
    if scope not in ("train-once", "inference"):
        raise ContractViolation(f"unknown shuffle scope {scope!r}")
    if isinstance(target, SplitSpec):
        shuffled = {u: _permuted(items, rng, u) for u, items in target.train.items()}
        return SplitSpec(
            users=list(target.users), train=shuffled,
            valid=dict(target.valid), test=dict(target.test),
            excluded=list(target.excluded),
        )
    return {u: _permuted(items, rng, u) for u, items in target.items()}


def _permuted(items, rng, u):
    perm = rng.split(u).permutation(len(items))
    return [items[j] for j in perm]


@dataclass
class SubsetLabels:
    """Per-user transition labels and/or per-item warm/cold labels."""

    users: Optional[list] = None
    t_scores: Optional[np.ndarray] = None
    transition_flags: Optional[np.ndarray] = None
    item_counts: Optional[np.ndarray] = None
    item_labels: Optional[np.ndarray] = None   # 0 neither, 1 warm, 2 cold

    ITEM_LABEL_NAMES = ("neither", "warm", "cold")


def transition_scores(ds, split, mode="global"):
    """Score how strongly each user's training pairs follow corpus-level
    transition regularities; flag the top half as the Transition set.

    mode="global": Count(a->b) is the adjacent-pair frequency over all
    training sequences and a user's score is the mean Count over their own
    pairs. mode="per-user-unique": a user's score is the fraction of their
    adjacent pairs that are distinct within their own sequence.
    """
    if mode not in ("global", "per-user-unique"):
        raise ConfigError(f"unknown transition scoring mode {mode!r}")
    counts = {}
    if mode == "global":
        for u in split.users:
            seq = split.train[u]
            for a, b in zip(seq, seq[1:]):
                counts[(a, b)] = counts.get((a, b), 0) + 1
    t_scores = np.zeros(len(split.users))
    for row, u in enumerate(split.users):
        seq = split.train[u]
        pairs = list(zip(seq, seq[1:]))
        if not pairs:
            continue
        if mode == "global":
            t_scores[row] = sum(counts[p] for p in pairs) / len(pairs)
        else:
            t_scores[row] = len(set(pairs)) / len(pairs)
    order = sorted(range(len(split.users)), key=lambda r: (-t_scores[r], split.users[r]))
    flags = np.zeros(len(split.users), dtype=bool)
    for r in order[: len(split.users) // 2]:
        flags[r] = True
    return SubsetLabels(users=list(split.users), t_scores=t_scores, transition_flags=flags)


def label_warm_cold(ds, split, q=0.35):
    """Label the floor(q*|items|) most/least train-interacted items as
    warm/cold; ties break by ascending item index, warm assigned first."""
    if not 0.0 < q < 0.5:
        raise ContractViolation("q must lie in (0, 0.5)")
    counts = np.zeros(ds.n_items, dtype=np.int64)
    for u in split.users:
        for i in split.train[u]:
            counts[i] += 1
    k = int(q * ds.n_items)
    labels = np.zeros(ds.n_items, dtype=np.int8)
    warm_order = sorted(range(ds.n_items), key=lambda i: (-counts[i], i))
    for i in warm_order[:k]:
        labels[i] = 1
    cold_order = sorted(
        (i for i in range(ds.n_items) if labels[i] == 0),
        key=lambda i: (counts[i], i),
    )
    for i in cold_order[:k]:
        labels[i] = 2
    return SubsetLabels(item_counts=counts, item_labels=labels)


def export_transition_csv(labels, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user_id,t_score,transition_flag\n")
        for row, u in enumerate(labels.users):
            fh.write(f"{u},{labels.t_scores[row]:.6f},{int(labels.transition_flags[row])}\n")


def export_warmcold_csv(labels, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("item_id,count,label\n")
        for i in range(len(labels.item_labels)):
            name = SubsetLabels.ITEM_LABEL_NAMES[labels.item_labels[i]]
            fh.write(f"{i},{labels.item_counts[i]},{name}\n")


# -- synthetic Markov test bed ----------------------------------------------

_TITLE_VOCABS = {
    "words-a": (
        ["amber", "brisk", "cobalt", "dusty", "ember", "frost", "glade",
         "hollow", "iris", "jasper", "kelp", "lunar", "mossy", "noble",
         "opal", "prism"],
        ["anchor", "beacon", "cedar", "dynamo", "easel", "fjord", "garnet",
         "harbor", "ingot", "jetty", "kiln", "lantern", "mantle", "nimbus",
         "orchard", "pylon"],
    ),
    "words-b": (
        ["quartz", "rustic", "sable", "tidal", "umber", "velvet", "wistful",
         "xenon", "yonder", "zesty", "arcane", "breezy", "crisp", "drift",
         "elder", "fabled"],
        ["quiver", "rampart", "sextant", "trellis", "uplink", "vessel",
         "windlass", "xylem", "yardarm", "zenith", "abacus", "bulwark",
         "crucible", "derrick", "escarp", "foundry"],
    ),
}


@dataclass
class MarkovSpec:
    """Synthetic interaction process: each item has a designated successor
    (a seeded permutation) followed with probability ``p``; otherwise the
    next item is uniform over the remaining items."""

    num_users: int = 2000
    num_items: int = 200
    len_min: int = 20
    len_max: int = 20
    p: float = 0.9
    title_scheme: str = "words-a"
    seed: int = 0
    structure_seed: Optional[int] = None   # successors + titles; reuse across
    id_prefix: str = ""                    # datasets for shared-structure targets

    def validate(self):
        if not 0.0 < self.p <= 1.0:
            raise ConfigError("markov p must lie in (0, 1]")
        if self.num_items < 2:
            raise ConfigError("markov num_items must be >= 2")
        if not 1 <= self.len_min <= self.len_max:
            raise ConfigError("markov length range invalid")
        if self.title_scheme not in _TITLE_VOCABS:
            raise ConfigError(f"unknown title scheme {self.title_scheme!r}")


def markov_title(spec, item):
    adjectives, nouns = _TITLE_VOCABS[spec.title_scheme]
    a = adjectives[item % len(adjectives)]
    b = nouns[(item // len(adjectives)) % len(nouns)]
    c = adjectives[(item // (len(adjectives) * len(nouns))) % len(adjectives)]
    return f"{a} {b} {c}"


def markov_successors(spec):
    structure_seed = spec.seed if spec.structure_seed is None else spec.structure_seed
    rng = Rng(structure_seed).split("markov-structure")
    return rng.permutation(spec.num_items)


def gen_markov(spec):
    """Materialize a MarkovSpec as an InteractionDataset."""
    spec.validate()
    successors = markov_successors(spec)
    rng = Rng(spec.seed).split("markov-walk")
    lengths = rng.integers(spec.len_min, spec.len_max + 1, size=spec.num_users)
    starts = rng.integers(0, spec.num_items, size=spec.num_users)
    u01 = rng.random((spec.num_users, max(spec.len_max - 1, 1)))
    walks = kernels.markov_walk(successors, spec.p, starts, u01)

    titles = [markov_title(spec, i) for i in range(spec.num_items)]
    interactions = []
    base = 1_600_000_000
    step = 5 * 86_400   # 5 days, so month buckets vary along a sequence
    for u in range(spec.num_users):
        ext_user = f"{spec.id_prefix}u{u:05d}"
        for k in range(int(lengths[u])):
            item = int(walks[u, k])
            interactions.append(Interaction(
                user=ext_user,
                item=f"{spec.id_prefix}i{item:05d}",
                ts=base + k * step,
                title=titles[item],
            ))
    return InteractionDataset.from_interactions(interactions)
