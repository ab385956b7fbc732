"""Self-attentive next-item recommender (the pre-trained CF model) and an
exactly order-invariant bag-of-embeddings contrast encoder.

Both models share one next-item training loop: binary cross-entropy on
(positive, sampled negative) pairs at every prefix position, early-stopped
on validation NDCG@10. Item id 0 is padding everywhere; dataset item index
``i`` maps to model id ``i + 1``.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from seqdistill import evaldiag, nn
from seqdistill.errors import ContractViolation, NumericError
from seqdistill.numcore import (
    AdamState,
    Param,
    Rng,
    Tape,
    Tensor,
    adam_step,
    default_dtype,
    ops,
)


@dataclass
class CfTrainConfig:
    batch_size: int = 128
    lr: float = 1e-4
    max_epochs: int = 200
    max_len: int = 50
    negatives: int = 1
    dropout: float = 0.2
    eval_every: float = 0.1
    patience: int = 10
    seed: int = 0
    d: int = 64
    blocks: int = 2
    heads: int = 1
    valid_sample: int = 0    # 0 = score every user at each early-stop check

    def validate(self):
        if min(self.batch_size, self.max_epochs, self.max_len,
               self.negatives, self.d, self.blocks, self.heads) < 1:
            raise ContractViolation("CF config fields must be positive")
        if self.patience < 1:
            raise ContractViolation("patience must be >= 1")


def _pad_batch(seqs, max_len, pad=0):
    """Right-align sequences (truncated to their most recent ``max_len``
    items) into a (B, L) int array, left-padded with ``pad``."""
    trimmed = [s[-max_len:] for s in seqs]
    width = max((len(s) for s in trimmed), default=1)
    width = max(width, 1)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for row, s in enumerate(trimmed):
        if s:
            out[row, width - len(s):] = s
    return out


class SasrecModel:
    """Causal self-attention encoder over item sequences; the user
    representation is the final hidden state at the last real position."""

    kind = "sasrec"

    def __init__(self, num_items, d=64, max_len=50, blocks=2, heads=1, seed=0):
        self.num_items = num_items
        self.d = d
        self.max_len = max_len
        self.n_blocks = blocks
        self.heads = heads
        self.seed = seed
        rng = Rng(seed).split("sasrec-init")
        sigma = 1.0 / math.sqrt(d)
        emb = rng.normal(0.0, sigma, size=(num_items + 1, d))
        emb[0] = 0.0   # padding row, never updated
        self.item_emb = Param(emb.astype(default_dtype()), name="item_emb")
        self.pos_emb = Param(
            rng.normal(0.0, sigma, size=(max_len, d)).astype(default_dtype()),
            name="pos_emb",
        )
        self.blocks = [
            nn.TransformerBlock(d, heads, 1, f"block{b}", rng.split("block", b),
                                activation="relu")
            for b in range(blocks)
        ]
        self.ln_final = nn.LayerNorm(d, "ln_final")

    def params(self):
        out = [self.item_emb, self.pos_emb]
        for b in self.blocks:
            out += b.params()
        out += self.ln_final.params()
        return out

    def hidden_states(self, ids, training=False, drop_rng=None, dropout=0.0):
        """ids: (B, L<=max_len) model item ids, 0 = padding. The output at
        position t depends only on positions <= t; padding keys are masked
        out of attention (each position may always attend to itself)."""
        ids = np.asarray(ids)
        batch, length = ids.shape
        if length > self.max_len:
            raise ContractViolation("sequence batch wider than max_len")
        if ids.max(initial=0) > self.num_items or ids.min(initial=0) < 0:
            raise ContractViolation("item id out of range")

        cols = np.arange(self.max_len - length, self.max_len)
        x = ops.add(ops.gather(self.item_emb, ids), ops.gather(self.pos_emb, cols))
        x = ops.dropout(x, dropout, drop_rng, training)

        blocked = nn.causal_blocked(length) | (ids == 0)[:, None, :]
        diag = np.arange(length)
        blocked[:, diag, diag] = False
        for block in self.blocks:
            x = block(x, blocked, dropout_rate=dropout,
                      drop_rng=drop_rng, training=training)
        return self.ln_final(x)

    def user_reps(self, prefixes, batch_size=256):
        """(n, d) array of final hidden states at each prefix's last item;
        empty prefixes map to zero vectors."""
        out = np.zeros((len(prefixes), self.d), dtype=default_dtype())
        rows = [r for r, s in enumerate(prefixes) if len(s) > 0]
        for lo in range(0, len(rows), batch_size):
            chunk = rows[lo:lo + batch_size]
            ids = _pad_batch([[i + 1 for i in prefixes[r]] for r in chunk],
                             self.max_len)
            h = self.hidden_states(ids)
            out[chunk] = h.data[:, -1, :]
        return out

    def item_embeddings(self):
        """Trained item embedding rows, padding excluded: (num_items, d)."""
        return self.item_emb.data[1:].copy()

    # two-tower scorer protocol -------------------------------------------
    def score_user_reps(self, ds, inputs, known_items=True):
        if not known_items:
            raise ContractViolation(
                "collaborative models cannot represent unseen items")
        return self.user_reps([items for items, _ in inputs])

    def score_item_reps(self, ds, item_ids, known_items=True):
        if not known_items:
            raise ContractViolation(
                "collaborative models cannot represent unseen items")
        return self.item_emb.data[np.asarray(item_ids) + 1]

    def native_user_reps(self, ds, inputs):
        return self.score_user_reps(ds, inputs)

    def state_arrays(self):
        return {p.name: p.data for p in self.params()}

    def load_arrays(self, arrays):
        for p in self.params():
            if p.name not in arrays:
                raise ContractViolation(f"checkpoint missing array {p.name!r}")
            if arrays[p.name].shape != p.data.shape:
                raise ContractViolation(f"checkpoint shape mismatch for {p.name!r}")
            p.data = arrays[p.name].astype(p.data.dtype)


class BagModel:
    """Mean-of-item-embeddings encoder: exactly permutation-invariant.

    Evaluation-time representations are accumulated in sorted-item order so
    invariance holds bit-for-bit, not just up to float rounding.
    """

    kind = "bag"

    def __init__(self, num_items, d=64, max_len=50, seed=0, emb=None):
        self.num_items = num_items
        self.d = d
        self.max_len = max_len
        self.seed = seed
        if emb is None:
            rng = Rng(seed).split("bag-init")
            emb = rng.normal(0.0, 1.0 / math.sqrt(d), size=(num_items + 1, d))
            emb[0] = 0.0
        self.item_emb = Param(np.asarray(emb, dtype=default_dtype()), name="item_emb")

    def params(self):
        return [self.item_emb]

    def hidden_states(self, ids, training=False, drop_rng=None, dropout=0.0):
        """Causal cumulative mean of item embeddings (pads contribute zero)."""
        ids = np.asarray(ids)
        batch, length = ids.shape
        x = ops.gather(self.item_emb, ids)
        tril = np.tril(np.ones((length, length), dtype=default_dtype()))
        csum = ops.matmul(Tensor(tril), x)
        counts = np.cumsum(ids != 0, axis=1).astype(default_dtype())
        inv = 1.0 / np.maximum(counts, 1.0)
        return ops.mul(csum, inv[:, :, None])

    def user_reps(self, prefixes, batch_size=0):
        out = np.zeros((len(prefixes), self.d), dtype=default_dtype())
        for row, items in enumerate(prefixes):
            if not items:
                continue
            ids = np.sort(np.asarray(items[-self.max_len:])) + 1
            out[row] = self.item_emb.data[ids].sum(axis=0) / len(ids)
        return out

    def item_embeddings(self):
        return self.item_emb.data[1:].copy()

    def score_user_reps(self, ds, inputs, known_items=True):
        if not known_items:
            raise ContractViolation(
                "collaborative models cannot represent unseen items")
        return self.user_reps([items for items, _ in inputs])

    def score_item_reps(self, ds, item_ids, known_items=True):
        if not known_items:
            raise ContractViolation(
                "collaborative models cannot represent unseen items")
        return self.item_emb.data[np.asarray(item_ids) + 1]

    def native_user_reps(self, ds, inputs):
        return self.score_user_reps(ds, inputs)

    def state_arrays(self):
        return {p.name: p.data for p in self.params()}

    def load_arrays(self, arrays):
        for p in self.params():
            if p.name not in arrays or arrays[p.name].shape != p.data.shape:
                raise ContractViolation(f"checkpoint mismatch for {p.name!r}")
            p.data = arrays[p.name].astype(p.data.dtype)


@dataclass
class TrainLogRow:
    step: int
    train_loss: float
    valid_ndcg10: float = float("nan")


def _sample_negative(rng_gen, num_items, seen):
    while True:
        cand = int(rng_gen.integers(1, num_items + 1))
        if cand not in seen:
            return cand


def train_next_item(model, ds, split, config, valid_candidates):
    """Next-item BCE training with early stopping on validation NDCG@10.

    Returns (model restored to its best-validation state, log rows). The
    model may be a SasrecModel or a BagModel; both expose hidden_states().
    """
    config.validate()
    rng = Rng(config.seed).split("cf-train")
    drop_rng = rng.split("dropout").gen
    examples = []
    seen_sets = {}
    for u in split.users:
        t = split.train[u]
        if len(t) < 2:
            continue
        inp = [i + 1 for i in t[:-1][-config.max_len:]]
        tgt = [i + 1 for i in t[1:][-config.max_len:]]
        examples.append((u, inp, tgt))
        seen_sets[u] = {i + 1 for i in ds.sequences[u]}
    if not examples:
        raise ContractViolation("no trainable users (all train prefixes < 2)")

    valid_users = None
    if config.valid_sample and config.valid_sample < len(split.users):
        pick = rng.split("valid-sample").choice(
            np.asarray(split.users), size=config.valid_sample, replace=False)
        valid_users = sorted(int(u) for u in pick)

    steps_per_epoch = math.ceil(len(examples) / config.batch_size)
    eval_stride = max(1, round(steps_per_epoch * config.eval_every))
    optimizer = AdamState(lr=config.lr)
    params = model.params()

    best_metric = -np.inf
    best_state = {p.name: p.data.copy() for p in params}
    evals_since_best = 0
    log = []
    step = 0
    stop = False

    neg_rng = rng.split("negatives").gen
    order_rng = rng.split("order").gen

    for epoch in range(config.max_epochs):
        order = order_rng.permutation(len(examples))
        for lo in range(0, len(examples), config.batch_size):
            batch = [examples[j] for j in order[lo:lo + config.batch_size]]
            width = max(len(inp) for _, inp, _ in batch)
            bsz = len(batch)
            ids = np.zeros((bsz, width), dtype=np.int64)
            tgt = np.zeros((bsz, width), dtype=np.int64)
            neg = np.zeros((bsz, width, config.negatives), dtype=np.int64)
            for row, (u, inp, tg) in enumerate(batch):
                ids[row, width - len(inp):] = inp
                tgt[row, width - len(tg):] = tg
                seen = seen_sets[u]
                for col in range(width - len(tg), width):
                    for k in range(config.negatives):
                        neg[row, col, k] = _sample_negative(
                            neg_rng, model.num_items, seen)

            with Tape() as tape:
                h = model.hidden_states(ids, training=True,
                                        drop_rng=drop_rng, dropout=config.dropout)
                pos_logit = ops.sum_(
                    ops.mul(h, ops.gather(model.item_emb, tgt)), axis=-1)
                neg_logit = ops.sum_(
                    ops.mul(ops.reshape(h, (bsz, width, 1, model.d)),
                            ops.gather(model.item_emb, neg)), axis=-1)
                per_pos = ops.add(ops.softplus(ops.neg(pos_logit)),
                                  ops.sum_(ops.softplus(neg_logit), axis=-1))
                mask = (tgt != 0).astype(h.data.dtype)
                loss = ops.mul(ops.sum_(ops.mul(per_pos, mask)),
                               1.0 / float(mask.sum()))
                tape.backward(loss)

            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise NumericError(f"training diverged at step {step}")
            if model.item_emb.grad is not None:
                model.item_emb.grad[0] = 0.0   # keep the padding row pinned
            adam_step(params, optimizer)
            for p in params:
                p.grad = None
            step += 1

            row = TrainLogRow(step=step, train_loss=loss_value)
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
            log.append(row)
            if stop:
                break
        if stop:
            break

    for p in params:
        p.data = best_state[p.name]
    return model, log


def train_sasrec(ds, split, config, valid_candidates):
    model = SasrecModel(ds.n_items, d=config.d, max_len=config.max_len,
                        blocks=config.blocks, heads=config.heads,
                        seed=config.seed)
    return train_next_item(model, ds, split, config, valid_candidates)


def train_bag(ds, split, config, valid_candidates):
    model = BagModel(ds.n_items, d=config.d, max_len=config.max_len,
                     seed=config.seed)
    return train_next_item(model, ds, split, config, valid_candidates)


def extract_cf_reps(model, ds, split):
    """O matrix (n_users, d): each user's representation of their training
    prefix; users excluded from the split get zero rows (counted)."""
    prefixes = [[] for _ in range(ds.n_users)]
    for u in split.users:
        prefixes[u] = split.train[u]
    reps = model.user_reps(prefixes)
    skipped = sum(1 for s in prefixes if not s)
    return reps, skipped


def export_item_embeddings(model):
    return model.item_embeddings()
