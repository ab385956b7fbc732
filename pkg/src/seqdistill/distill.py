"""Retrieval scoring and distillation objective over the frozen encoder.

The trainable surface is exactly: the item-injection projection (E -> slot
vectors), the three scoring/distillation heads, optionally the user-vector
prompt projection, and the two special-token rows. The recommender and the
encoder blocks stay frozen; the objective is the (optionally weighted) sum
of the retrieval softmax loss, an MSE pull between projected CF user
representations and projected encoder user representations, and a pairwise
uniformity term that keeps both projected families spread on the unit
sphere.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from seqdistill import evaldiag, frozenenc
from seqdistill.errors import ContractViolation, NumericError
from seqdistill.nn import Mlp2
from seqdistill.numcore import (
    AdamState,
    Rng,
    Tape,
    Tensor,
    adam_step,
    default_dtype,
    ops,
)

log = logging.getLogger(__name__)


@dataclass
class DistillTrainConfig:
    m_train: int = 32
    batch_size: int = 20
    lr: float = 1e-4
    max_epochs: int = 10
    eval_every: float = 0.1
    patience: int = 10
    regime: str = "last-item"          # or "auto-regressive"
    distill_kind: str = "mse"          # or "contrastive"
    include_user_rep: bool = False
    retrieval_weight: float = 1.0
    distill_weight: float = 1.0
    uniform_weight: float = 1.0
    d_prime: int = 128
    max_len: int = 50
    seed: int = 0
    valid_sample: int = 0              # 0 = all users at early-stop checks

    def validate(self):
        if self.m_train < 1 or self.batch_size < 1 or self.patience < 1:
            raise ContractViolation("distill config fields out of range")
        if self.regime not in ("last-item", "auto-regressive"):
            raise ContractViolation(f"unknown regime {self.regime!r}")
        if self.distill_kind not in ("mse", "contrastive"):
            raise ContractViolation(f"unknown distill kind {self.distill_kind!r}")


class DistillHeads:
    """All trainable MLPs: item injection f_I, optional prompt projection
    f_U, and the three d'-dimensional heads."""

    def __init__(self, d_cf, d_enc, d_prime, rng, include_user_rep=False):
        self.f_i = Mlp2(d_cf, d_enc, "f_i", rng.split("f_i"))
        self.f_user = Mlp2(d_enc, d_prime, "f_user", rng.split("f_user"))
        self.f_item = Mlp2(d_enc, d_prime, "f_item", rng.split("f_item"))
        self.f_cf_user = Mlp2(d_cf, d_prime, "f_cf_user", rng.split("f_cf_user"))
        self.f_u = (Mlp2(d_cf, d_enc, "f_u", rng.split("f_u"))
                    if include_user_rep else None)

    def params(self):
        out = (self.f_i.params() + self.f_user.params()
               + self.f_item.params() + self.f_cf_user.params())
        if self.f_u is not None:
            out += self.f_u.params()
        return out


# -- losses -------------------------------------------------------------------


def _as_2d(x):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=default_dtype())
    return Tensor(arr if arr.ndim == 2 else arr[None, :])


def score(h_u, h_i, heads):
    """Recommendation score: dot of the item head and user head outputs."""
    pu = heads.f_user(_as_2d(np.asarray(h_u)))
    pi = heads.f_item(_as_2d(np.asarray(h_i)))
    return float((pu.data * pi.data).sum())


def loss_retrieval(pos_scores, neg_scores):
    """Softmax cross-entropy of the positive against its candidate set,
    stabilized by (detached) max subtraction; mean over the batch."""
    pos = pos_scores if isinstance(pos_scores, Tensor) else Tensor(
        np.atleast_1d(np.asarray(pos_scores, dtype=default_dtype())))
    negs = neg_scores if isinstance(neg_scores, Tensor) else Tensor(
        np.atleast_2d(np.asarray(neg_scores, dtype=default_dtype())))
    if negs.shape[-1] < 1:
        raise ContractViolation("retrieval loss needs at least one negative")
    batch = pos.shape[0]
    allscores = ops.concat([ops.reshape(pos, (batch, 1)), negs], axis=1)
    shift = allscores.data.max(axis=-1, keepdims=True)
    z = ops.exp(ops.sub(allscores, Tensor(shift)))
    lse = ops.add(ops.log(ops.sum_(z, axis=-1)), Tensor(shift[:, 0]))
    return ops.mean(ops.sub(lse, pos))


def _mse(a, b):
    d = ops.sub(a, b)
    return ops.mean(ops.mul(d, d))


def loss_distill_mse(o_batch, h_batch, heads):
    """MSE between projected CF user representations and projected encoder
    user representations (raw head outputs, no normalization)."""
    return _mse(heads.f_cf_user(_as_2d(o_batch)), heads.f_user(_as_2d(h_batch)))


def _uniformity_term(proj):
    """Mean over ordered pairs u != u' of exp(-2 * ||g_u - g_u'||^2) with
    g = L2-normalized projections."""
    g = ops.l2_normalize(proj, eps=1e-12, axis=-1)
    batch = g.shape[0]
    sq = ops.sum_(ops.mul(g, g), axis=-1)
    gram = ops.matmul(g, ops.transpose(g))
    dist = ops.sub(ops.add(ops.reshape(sq, (batch, 1)), ops.reshape(sq, (1, batch))),
                   ops.mul(gram, 2.0))
    off = 1.0 - np.eye(batch, dtype=g.data.dtype)
    total = ops.sum_(ops.mul(ops.exp(ops.mul(dist, -2.0)), Tensor(off)))
    return ops.mul(total, 1.0 / float(batch * (batch - 1)))


def loss_uniform(cf_proj, enc_proj):
    """Sum of the per-family uniformity terms (CF side + encoder side).

    Returns 0 for batches smaller than 2 (a single user has no pairs).
    """
    cf_proj = _as_2d(cf_proj)
    enc_proj = _as_2d(enc_proj)
    if cf_proj.shape[0] < 2:
        log.warning("uniformity loss needs a batch of >= 2 users; returning 0")
        return Tensor(np.zeros((), dtype=default_dtype()))
    return ops.add(_uniformity_term(cf_proj), _uniformity_term(enc_proj))


def _contrastive_proj(pu, po):
    if pu.shape[0] < 2:
        raise ContractViolation("contrastive distillation needs a batch >= 2")
    scores = ops.matmul(pu, ops.transpose(po))
    batch = pu.shape[0]
    shift = scores.data.max(axis=-1, keepdims=True)
    z = ops.exp(ops.sub(scores, Tensor(shift)))
    lse = ops.add(ops.log(ops.sum_(z, axis=-1)), Tensor(shift[:, 0]))
    eye = np.eye(batch, dtype=pu.data.dtype)
    diag = ops.sum_(ops.mul(scores, Tensor(eye)), axis=-1)
    return ops.mean(ops.sub(lse, diag))


def loss_distill_contrastive(o_batch, h_batch, heads):
    """In-batch contrastive distillation: each user's projected encoder
    representation must retrieve its own projected CF representation."""
    return _contrastive_proj(heads.f_user(_as_2d(h_batch)),
                             heads.f_cf_user(_as_2d(o_batch)))


@dataclass
class LossBreakdown:
    retrieval: float
    distill: float
    uniform: float
    total: float


def loss_total(parts, weights=(1.0, 1.0, 1.0)):
    """Weighted sum of the loss parts (Tensors or None), default weights 1.

    Returns (total Tensor, LossBreakdown). A non-finite part fails loudly
    with the offending part named.
    """
    names = ("retrieval", "distill", "uniform")
    values = []
    total = None
    for name, part, w in zip(names, parts, weights):
        if part is None or w == 0.0:
            values.append(0.0)
            continue
        value = float(part.item()) * w
        if not np.isfinite(value):
            raise NumericError(f"loss part {name!r} is not finite")
        values.append(value)
        term = part if w == 1.0 else ops.mul(part, float(w))
        total = term if total is None else ops.add(total, term)
    if total is None:
        total = Tensor(np.zeros((), dtype=default_dtype()))
    return total, LossBreakdown(values[0], values[1], values[2],
                                values[0] + values[1] + values[2])


# -- model --------------------------------------------------------------------


class DistillModel:
    """Frozen encoder + frozen CF embeddings + trainable heads, exposing the
    two-tower scorer protocol used by evaluation and diagnostics."""

    kind = "distill"

    def __init__(self, encoder, heads, cf_item_emb, config, cf_model=None):
        self.encoder = encoder
        self.heads = heads
        self.cf_item_emb = np.asarray(cf_item_emb, dtype=default_dtype())
        self.config = config
        self.cf_model = cf_model   # only consulted for the prompt variant
        self.d_cf = self.cf_item_emb.shape[1]

    def trainable_params(self):
        return self.heads.params() + self.encoder.trainable_params()

    def _cf_rows(self, item_ids, known_items):
        ids = np.asarray(item_ids, dtype=np.int64)
        if known_items:
            return self.cf_item_emb[ids]
        return np.zeros((len(ids), self.d_cf), dtype=default_dtype())

    def _user_prompts(self, ds, inputs, known_items):
        prompts, slot_rows = [], []
        flag = 1 if self.config.include_user_rep else 0
        for items, ts in inputs:
            titles = [ds.titles[i] for i in items]
            prompt = frozenenc.assemble_user_prompt(
                self.encoder.space, items, titles, ts,
                max_items=self.config.max_len,
                max_units=self.encoder.config.max_prompt,
                include_user_rep=self.config.include_user_rep,
            )
            kept = prompt.n_slots - flag   # item slots surviving truncation
            rows = self._cf_rows(items[len(items) - kept:], known_items)
            if flag:
                z_src = np.zeros(self.d_cf, dtype=default_dtype())
                if known_items and self.cf_model is not None:
                    z_src = self.cf_model.user_reps([items])[0]
                rows = np.concatenate([z_src[None, :], rows], axis=0)
            prompts.append(prompt)
            slot_rows.append(rows)
        return prompts, slot_rows

    def _encode_users(self, ds, inputs, known_items, batch_size=128):
        out = np.zeros((len(inputs), self.encoder.config.d_enc),
                       dtype=default_dtype())
        for lo in range(0, len(inputs), batch_size):
            chunk = inputs[lo:lo + batch_size]
            prompts, slot_rows = self._user_prompts(ds, chunk, known_items)
            h = _encode_with_heads(self.encoder, self.heads, prompts, slot_rows,
                                   self.config.include_user_rep)
            out[lo:lo + len(chunk)] = h.data
        return out

    def _encode_items(self, ds, item_ids, known_items, batch_size=256):
        item_ids = np.asarray(item_ids)
        out = np.zeros((len(item_ids), self.encoder.config.d_enc),
                       dtype=default_dtype())
        rows = self._cf_rows(item_ids, known_items)
        for lo in range(0, len(item_ids), batch_size):
            ids = item_ids[lo:lo + batch_size]
            prompts = [
                frozenenc.assemble_item_prompt(self.encoder.space, ds.titles[i])
                for i in ids
            ]
            slots = self.heads.f_i(Tensor(rows[lo:lo + len(ids)]))
            h = self.encoder.encode_prompts(prompts, slots=slots)
            out[lo:lo + len(ids)] = h.data
        return out

    # two-tower scorer protocol -------------------------------------------
    def score_user_reps(self, ds, inputs, known_items=True):
        h = self._encode_users(ds, inputs, known_items)
        return self.heads.f_user(Tensor(h)).data

    def score_item_reps(self, ds, item_ids, known_items=True):
        h = self._encode_items(ds, item_ids, known_items)
        return self.heads.f_item(Tensor(h)).data

    def native_user_reps(self, ds, inputs):
        """Pre-head encoder user representations h (for similarity probes)."""
        return self._encode_users(ds, inputs, known_items=True)

    def state_arrays(self):
        return {p.name: p.data for p in self.trainable_params()}

    def load_arrays(self, arrays):
        for p in self.trainable_params():
            if p.name not in arrays or arrays[p.name].shape != p.data.shape:
                raise ContractViolation(f"checkpoint mismatch for {p.name!r}")
            p.data = arrays[p.name].astype(p.data.dtype)


@dataclass
class DistillLogRow:
    step: int
    l_retrieval: float
    l_distill: float
    l_uniform: float
    l_total: float
    valid_ndcg10: float = float("nan")


def build_examples(split, regime):
    """Training examples: last-item gives one (prefix -> last train item)
    pair per user; auto-regressive gives one pair per prefix position."""
    examples = []
    for u in split.users:
        t = split.train[u]
        if regime == "last-item":
            if len(t) >= 2:
                examples.append((u, t[:-1], t[-1]))
        else:
            for pos in range(1, len(t)):
                examples.append((u, t[:pos], t[pos]))
    return examples


def _sample_negatives(rng_gen, n_items, seen, m):
    out = np.empty(m, dtype=np.int64)
    for k in range(m):
        while True:
            cand = int(rng_gen.integers(0, n_items))
            if cand not in seen:
                out[k] = cand
                break
    return out


def train_distill(ds, split, cf_model, encoder, config, valid_candidates):
    """Train the heads and special tokens; CF model and encoder stay frozen.

    Each example scores its target against ``m_train`` freshly sampled
    non-interacted negatives through item prompts; the CF representation of
    the example's own input prefix anchors the distillation and uniformity
    terms. Early-stops on validation NDCG@10 and returns
    (DistillModel restored to its best validation state, log rows).
    """
    config.validate()
    rng = Rng(config.seed).split("distill-train")
    heads = DistillHeads(cf_model.d, encoder.config.d_enc, config.d_prime,
                         rng.split("heads"),
                         include_user_rep=config.include_user_rep)
    item_matrix = cf_model.item_embeddings()
    model = DistillModel(encoder, heads, item_matrix, config, cf_model=cf_model)

    frozen_before = encoder.frozen_digest()
    cf_before = item_matrix.copy()
    examples = build_examples(split, config.regime)
    if not examples:
        raise ContractViolation("no trainable users (all train prefixes < 2)")

    inputs = [(inp, ds.timestamps[u][: len(inp)]) for u, inp, _ in examples]
    o_matrix = cf_model.user_reps([inp for inp, _ in inputs])
    user_prompts, user_slot_rows = model._user_prompts(ds, inputs, known_items=True)

    item_prompt_cache = {}

    def item_prompt(i):
        p = item_prompt_cache.get(i)
        if p is None:
            p = frozenenc.assemble_item_prompt(encoder.space, ds.titles[i])
            item_prompt_cache[i] = p
        return p

    seen_sets = {u: set(ds.sequences[u]) for u in split.users}

    valid_users = None
    if config.valid_sample and config.valid_sample < len(split.users):
        pick = rng.split("valid-sample").choice(
            np.asarray(split.users), size=config.valid_sample, replace=False)
        valid_users = sorted(int(u) for u in pick)

    steps_per_epoch = math.ceil(len(examples) / config.batch_size)
    eval_stride = max(1, round(steps_per_epoch * config.eval_every))
    params = model.trainable_params()
    optimizer = AdamState(lr=config.lr)
    weights = (config.retrieval_weight, config.distill_weight,
               config.uniform_weight)

    best_metric = -np.inf
    best_state = {p.name: p.data.copy() for p in params}
    evals_since_best = 0
    log_rows = []
    step = 0
    stop = False

    neg_rng = rng.split("negatives").gen
    order_rng = rng.split("order").gen

    for _epoch in range(config.max_epochs):
        order = order_rng.permutation(len(examples))
        for lo in range(0, len(examples), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            batch = [examples[j] for j in idx]
            bsz = len(batch)

            negs = np.stack([
                _sample_negatives(neg_rng, ds.n_items, seen_sets[u], config.m_train)
                for u, _, _ in batch
            ])
            pos = np.asarray([tgt for _, _, tgt in batch])
            uniq, inverse = np.unique(
                np.concatenate([pos[:, None], negs], axis=1), return_inverse=True)
            inverse = inverse.reshape(bsz, 1 + config.m_train)
            pos_idx, neg_idx = inverse[:, 0], inverse[:, 1:]

            prompts_b = [user_prompts[j] for j in idx]
            slot_rows_b = [user_slot_rows[j] for j in idx]
            item_prompts_b = [item_prompt(int(i)) for i in uniq]

            with Tape() as tape:
                h_u = _encode_with_heads(model.encoder, heads, prompts_b,
                                         slot_rows_b, config.include_user_rep)
                item_slots = heads.f_i(Tensor(item_matrix[uniq]))
                h_i = model.encoder.encode_prompts(item_prompts_b, slots=item_slots)
                pu = heads.f_user(h_u)
                pi = heads.f_item(h_i)

                l_ret = None
                if config.retrieval_weight != 0.0:
                    pos_s = ops.sum_(ops.mul(pu, ops.gather(pi, pos_idx)), axis=-1)
                    neg_s = ops.sum_(
                        ops.mul(ops.reshape(pu, (bsz, 1, config.d_prime)),
                                ops.gather(pi, neg_idx)), axis=-1)
                    l_ret = loss_retrieval(pos_s, neg_s)

                l_dist = l_uni = None
                if config.distill_weight != 0.0 or config.uniform_weight != 0.0:
                    po = heads.f_cf_user(Tensor(o_matrix[idx]))
                    if config.distill_weight != 0.0:
                        l_dist = (_mse(po, pu) if config.distill_kind == "mse"
                                  else _contrastive_proj(pu, po))
                    if config.uniform_weight != 0.0 and bsz >= 2:
                        l_uni = ops.add(_uniformity_term(po), _uniformity_term(pu))

                total, breakdown = loss_total((l_ret, l_dist, l_uni), weights)
                tape.backward(total)

            if not np.isfinite(breakdown.total):
                raise NumericError(f"distillation diverged at step {step}")
            adam_step(params, optimizer)
            for p in params:
                p.grad = None
            step += 1

            row = DistillLogRow(step=step, l_retrieval=breakdown.retrieval,
                                l_distill=breakdown.distill,
                                l_uniform=breakdown.uniform,
                                l_total=breakdown.total)
            if step % eval_stride == 0:
                metric = evaldiag.ndcg_at(model, ds, split, "valid",
                                          valid_candidates, users=valid_users)
                row.valid_ndcg10 = metric
                if metric > best_metric:
                    best_metric = metric
                    best_state = {p.name: p.data.copy() for p in params}
                    evals_since_best = 0
                else:
                    evals_since_best += 1
                    if evals_since_best >= config.patience:
                        stop = True
            log_rows.append(row)
            if stop:
                break
        if stop:
            break

    for p in params:
        p.data = best_state[p.name]
    if encoder.frozen_digest() != frozen_before:
        raise AssertionError("frozen encoder weights changed during training")
    if not np.array_equal(cf_model.item_embeddings(), cf_before):
        raise AssertionError("frozen CF embeddings changed during training")
    return model, log_rows


def _encode_with_heads(encoder, heads, prompts, slot_rows, include_user_rep):
    """Project slot rows through f_I (and f_U for the leading user slot) and
    encode; keeps gradient flow when called under a tape."""
    if include_user_rep:
        z_rows = np.stack([r[0] for r in slot_rows]) if slot_rows else None
        item_rows = [r[1:] for r in slot_rows]
    else:
        z_rows = None
        item_rows = list(slot_rows)
    d_cf = heads.f_i.lin1.w.shape[0]
    stacked = (np.concatenate(item_rows, axis=0) if item_rows
               else np.zeros((0, d_cf), dtype=default_dtype()))
    projected = heads.f_i(Tensor(np.asarray(stacked, dtype=default_dtype())))
    if z_rows is not None:
        z_proj = heads.f_u(Tensor(np.asarray(z_rows, dtype=default_dtype())))
        slots = ops.concat([projected, z_proj], axis=0)
        n_items_total = sum(len(r) for r in item_rows)
        slot_ids, offset = [], 0
        for b, r in enumerate(item_rows):
            ids = np.concatenate(([n_items_total + b],
                                  np.arange(offset, offset + len(r))))
            slot_ids.append(ids)
            offset += len(r)
    else:
        slots = projected
        slot_ids, offset = [], 0
        for r in item_rows:
            slot_ids.append(np.arange(offset, offset + len(r)))
            offset += len(r)
    return encoder.encode_prompts(prompts, slots=slots, slot_ids=slot_ids)
