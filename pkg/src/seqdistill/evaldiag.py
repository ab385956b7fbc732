"""Ranking metrics, model evaluation, and order-sensitivity diagnostics.

Models plug in through a small two-tower protocol:

- ``score_user_reps(ds, inputs, known_items=True)`` -> (n, k) array, where
  ``inputs`` is a list of (item_ids, timestamps) pairs;
- ``score_item_reps(ds, item_ids, known_items=True)`` -> (m, k) array;
- ``native_user_reps(ds, inputs)`` -> the model's own user representation
  (used for representation-similarity probes, before any scoring head).

Scores are always the dot product of the two score-rep families, so every
comparison in this module is candidate-set-identical by construction (and
audited via `dataio.candidates_hash`).
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from seqdistill import dataio
from seqdistill.errors import ContractViolation

METRIC_KEYS = ("HR@10", "HR@20", "NDCG@10", "NDCG@20")


@dataclass
class RankResult:
    user: int
    rank: int        # 1-indexed, pessimistic under ties
    count: int


@dataclass
class EvalReport:
    metrics: dict
    user_count: int
    subset: str = "all"
    skipped: int = 0


@dataclass
class SimilarityReport:
    mean: float
    std: float
    min: float
    max: float
    user_count: int
    skipped: int = 0


@dataclass
class DiagnosticReport:
    mode: str
    rows: list = field(default_factory=list)
    candidate_hash: str = ""
    similarity: dict = field(default_factory=dict)


def rank_of(scores, pos_index):
    """Pessimistic 1-indexed rank of the positive: ties count against it."""
    pos = scores[pos_index]
    others = np.delete(scores, pos_index)
    return 1 + int((others > pos).sum()) + int((others == pos).sum())


def rank_metrics(scores, pos_index, ns=(10, 20)):
    """Per-user metric contributions for one scored candidate list."""
    scores = np.asarray(scores)
    rank = rank_of(scores, pos_index)
    contrib = {}
    for n in ns:
        hit = 1.0 if rank <= n else 0.0
        contrib[f"HR@{n}"] = hit
        contrib[f"NDCG@{n}"] = 1.0 / math.log2(rank + 1) if rank <= n else 0.0
    return RankResult(user=-1, rank=rank, count=len(scores)), contrib


def _eval_threads():
    try:
        return max(1, int(os.environ.get("SEQDISTILL_THREADS", "1")))
    except ValueError:
        return 1


def _phase_inputs(ds, split, users, phase, shuffle_rng=None):
    inputs = []
    items_by_user = {}
    for u in users:
        items, ts = dataio.eval_input(ds, split, u, phase)
        items_by_user[u] = items
        inputs.append((items, ts))
    if shuffle_rng is not None:
        shuffled = dataio.shuffle_sequences(items_by_user, shuffle_rng, scope="inference")
        inputs = [
            (shuffled[u], inputs[row][1]) for row, u in enumerate(users)
        ]
    return inputs


def evaluate(model, ds, split, phase, candidates, shuffle_rng=None,
             ns=(10, 20), subset="all", users=None, known_items=True):
    """Mean HR@N / NDCG@N over all evaluable users.

    ``shuffle_rng`` switches on shuffled-inference scoring: each user's input
    items are permuted while timestamps stay in place. Candidate sets are
    taken as given so compared models rank identical lists.
    """
    pool = split.users if users is None else users
    eval_users = [u for u in pool if u in candidates]
    skipped = len(pool) - len(eval_users)
    if not eval_users:
        return EvalReport(metrics={f"{k}": float("nan") for k in _metric_keys(ns)},
                          user_count=0, subset=subset, skipped=skipped)

    inputs = _phase_inputs(ds, split, eval_users, phase, shuffle_rng)
    ureps = model.score_user_reps(ds, inputs, known_items=known_items)
    ireps = model.score_item_reps(ds, np.arange(ds.n_items), known_items=known_items)

    keys = _metric_keys(ns)
    totals = {k: 0.0 for k in keys}

    def _score_rows(rows):
        part = {k: 0.0 for k in keys}
        for row in rows:
            cand = candidates[eval_users[row]]
            cand_items = cand.items()
            scores = ireps[cand_items] @ ureps[row]
            _, contrib = rank_metrics(scores, 0, ns=ns)
            for k in keys:
                part[k] += contrib[k]
        return part

    threads = _eval_threads()
    rows = list(range(len(eval_users)))
    if threads > 1 and len(rows) > 64:
        chunks = np.array_split(rows, threads)
        with ThreadPoolExecutor(max_workers=threads) as pool_:
            parts = list(pool_.map(_score_rows, chunks))
        for part in parts:
            for k in keys:
                totals[k] += part[k]
    else:
        totals = _score_rows(rows)

    metrics = {k: totals[k] / len(eval_users) for k in keys}
    return EvalReport(metrics=metrics, user_count=len(eval_users),
                      subset=subset, skipped=skipped)


def _metric_keys(ns):
    keys = []
    for n in ns:
        keys.append(f"HR@{n}")
        keys.append(f"NDCG@{n}")
    return keys


def ndcg_at(model, ds, split, phase, candidates, n=10, users=None):
    """Single-metric shortcut used by early stopping."""
    report = evaluate(model, ds, split, phase, candidates, ns=(n,), users=users)
    return report.metrics[f"NDCG@{n}"]


def change_ratio(original, shuffled):
    """(shuffled - original) / original * 100; None when undefined."""
    if original == 0 or not np.isfinite(original):
        return None
    return (shuffled - original) / original * 100.0


def rep_similarity(model, ds, split, rng):
    """Mean cosine between each user's representation of their original and
    shuffled training prefix (the model's native representation)."""
    users = split.users
    inputs = _phase_inputs(ds, split, users, "valid")
    shuffled_inputs = _phase_inputs(ds, split, users, "valid", shuffle_rng=rng)
    a = model.native_user_reps(ds, inputs)
    b = model.native_user_reps(ds, shuffled_inputs)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    cos = (a[ok] * b[ok]).sum(axis=1) / (na[ok] * nb[ok])
    skipped = int((~ok).sum())
    if cos.size == 0:
        return SimilarityReport(float("nan"), float("nan"), float("nan"),
                                float("nan"), 0, skipped)
    return SimilarityReport(
        mean=float(cos.mean()), std=float(cos.std()),
        min=float(cos.min()), max=float(cos.max()),
        user_count=int(cos.size), skipped=skipped,
    )


def shuffle_infer_experiment(models, ds, split, candidates, rng, phase="test", ns=(10, 20)):
    """Evaluate each model on original vs shuffled inference inputs.

    ``models`` maps a display name to a scorer; every model sees the same
    candidate sets and the same per-user permutations (substreams of ``rng``).
    """
    report = DiagnosticReport(mode="shuffle-infer",
                              candidate_hash=dataio.candidates_hash(candidates))
    for name, model in models.items():
        orig = evaluate(model, ds, split, phase, candidates, ns=ns)
        shuf = evaluate(model, ds, split, phase, candidates,
                        shuffle_rng=rng.split("infer-shuffle"), ns=ns)
        for key in orig.metrics:
            report.rows.append({
                "model": name,
                "metric": key,
                "original": orig.metrics[key],
                "shuffled": shuf.metrics[key],
                "change_pct": change_ratio(orig.metrics[key], shuf.metrics[key]),
            })
    return report


def shuffle_train_experiment(train_fn, ds, split, candidates, rng,
                             phase="test", ns=(10, 20), model_name="model"):
    """Train twice (original vs once-shuffled training prefixes) and evaluate
    both on identical, non-shuffled test inputs and candidates.

    ``train_fn(split_variant, tag)`` must return a scorer model.
    """
    shuffled_split = dataio.shuffle_sequences(
        split, rng.split("train-shuffle"), scope="train-once"
    )
    model_orig = train_fn(split, "original")
    model_shuf = train_fn(shuffled_split, "shuffled")
    report = DiagnosticReport(mode="shuffle-train",
                              candidate_hash=dataio.candidates_hash(candidates))
    orig = evaluate(model_orig, ds, split, phase, candidates, ns=ns)
    shuf = evaluate(model_shuf, ds, split, phase, candidates, ns=ns)
    for key in orig.metrics:
        report.rows.append({
            "model": model_name,
            "metric": key,
            "original": orig.metrics[key],
            "shuffled": shuf.metrics[key],
            "change_pct": change_ratio(orig.metrics[key], shuf.metrics[key]),
        })
    return report


def subset_eval(model, ds, split, phase, candidates, labels, ns=(10, 20)):
    """Evaluate per subset: transition/non-transition users, or users whose
    held-out item is warm/cold."""
    reports = {}
    if labels.transition_flags is not None:
        flag_by_user = dict(zip(labels.users, labels.transition_flags))
        trans = [u for u in split.users if flag_by_user.get(u, False)]
        non = [u for u in split.users if not flag_by_user.get(u, False)]
        reports["transition"] = evaluate(
            model, ds, split, phase, candidates, ns=ns,
            subset="transition", users=trans)
        reports["non-transition"] = evaluate(
            model, ds, split, phase, candidates, ns=ns,
            subset="non-transition", users=non)
    if labels.item_labels is not None:
        positives = split.test if phase == "test" else split.valid
        for code, name in ((1, "warm"), (2, "cold")):
            users = [u for u in split.users if labels.item_labels[positives[u]] == code]
            reports[name] = evaluate(
                model, ds, split, phase, candidates, ns=ns,
                subset=name, users=users)
    return reports


def cross_domain_eval(model, target_ds, m, rng, phase="test", ns=(10, 20)):
    """Evaluate a trained model on a dataset it never saw.

    Target items carry no collaborative embeddings, so models must support
    ``known_items=False`` (title-only representations with zeroed embedding
    slots); the target gets its own split and candidate sets.
    """
    split = dataio.split_leave_last_out(target_ds)
    if not split.users:
        raise ContractViolation("target dataset has no evaluable users")
    candidates = dataio.sample_eval_candidates(
        target_ds, split, m, rng.split("cross-domain"), phase)
    return evaluate(model, target_ds, split, phase, candidates,
                    ns=ns, known_items=False)
