"""Frozen text backbone: hashed tokenization, prompt assembly, and a causal
transformer whose only trainable rows are the two output-token embeddings.

A prompt is a flat stream of units: hashed text tokens, injected embedding
slots (projected collaborative item embeddings, or a projected user vector),
and exactly one trailing special unit ([UserOut] or [ItemOut]). The encoder
returns the final hidden state at that special position, which under causal
attention can see the whole prompt. Gradients flow through the frozen
blocks into the slot vectors and the special-token rows, and nowhere else.
"""

import hashlib
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Optional

import numpy as np

from seqdistill import nn
from seqdistill.errors import ContractViolation
from seqdistill.numcore import Param, Rng, Tensor, default_dtype, ops

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

KIND_HASH = 0
KIND_SLOT = 1
KIND_SPECIAL = 2

USER_OUT = 0
ITEM_OUT = 1


@dataclass(frozen=True)
class EncoderConfig:
    d_enc: int = 64
    blocks: int = 2
    heads: int = 4
    ff_mult: int = 4
    max_prompt: int = 512
    hash_buckets: int = 16384
    hash_seed: int = 0
    init_seed: int = 0


class HashSpace:
    """Stable feature-hashing vocabulary with a frozen embedding table."""

    def __init__(self, buckets=16384, seed=0, d_enc=64):
        self.buckets = buckets
        self.seed = seed
        self.d_enc = d_enc
        rng = Rng(seed).split("hash-table")
        table = rng.normal(0.0, 1.0 / np.sqrt(d_enc), size=(buckets, d_enc))
        self.table = Param(table.astype(default_dtype()),
                           name="hash_table", frozen=True)
        self._memo = {}

    def bucket(self, token):
        hit = self._memo.get(token)
        if hit is None:
            digest = hashlib.blake2s(
                token.encode("utf-8"),
                salt=self.seed.to_bytes(8, "little", signed=False),
            ).digest()
            hit = int.from_bytes(digest[:8], "little") % self.buckets
            self._memo[token] = hit
        return hit


def hash_title_tokens(title, space):
    """Lowercase, split on non-alphanumerics, hash each token to a bucket."""
    return [space.bucket(tok) for tok in _TOKEN_RE.findall(title.lower())]


def _month_bucket(ts):
    dt = datetime.fromtimestamp(int(ts), tz=timezone.utc)
    return f"ts:{dt.year:04d}-{dt.month:02d}"


@dataclass
class PromptStream:
    """Flat unit stream; ``slot_vectors`` may be deferred and injected at
    encode time (one row per EMB_SLOT, in stream order)."""

    kinds: np.ndarray                     # (P,) int8
    hash_ids: np.ndarray                  # (P,) int32, 0 where not a hash unit
    special_id: int                       # USER_OUT or ITEM_OUT
    n_slots: int
    slot_vectors: Optional[np.ndarray] = None   # (n_slots, d_enc)

    def __len__(self):
        return len(self.kinds)


def _finish_prompt(units, special_id, slot_vectors):
    kinds = np.zeros(len(units) + 1, dtype=np.int8)
    hash_ids = np.zeros(len(units) + 1, dtype=np.int32)
    n_slots = 0
    for pos, (kind, payload) in enumerate(units):
        kinds[pos] = kind
        if kind == KIND_HASH:
            hash_ids[pos] = payload
        else:
            n_slots += 1
    kinds[-1] = KIND_SPECIAL
    if slot_vectors is not None:
        slot_vectors = np.asarray(slot_vectors, dtype=default_dtype())
        if slot_vectors.shape[0] != n_slots:
            raise ContractViolation("slot vector count does not match stream")
    return PromptStream(kinds=kinds, hash_ids=hash_ids, special_id=special_id,
                        n_slots=n_slots, slot_vectors=slot_vectors)


def assemble_user_prompt(space, items, titles, timestamps, item_embs=None, *,
                         max_items=50, max_units=512,
                         include_user_rep=False, z_u=None):
    """Build the user prompt stream from an interaction history.

    Position k contributes [no:k marker, month marker, title tokens,
    embedding slot]; the stream ends with [UserOut]. With
    ``include_user_rep`` a single extra slot for the projected user vector
    is prepended. Histories are truncated to the most recent ``max_items``
    positions, then oldest-first until the stream fits ``max_units``.

    ``item_embs`` (and ``z_u``) may be None, in which case slot vectors are
    injected later at encode time.
    """
    if not (len(items) == len(titles) == len(timestamps)):
        raise ContractViolation("items, titles, timestamps must align")
    if item_embs is not None and len(item_embs) != len(items):
        raise ContractViolation("item_embs must align with items")
    if include_user_rep and item_embs is not None and z_u is None:
        raise ContractViolation("include_user_rep requires z_u when vectors are given")

    titles = titles[-max_items:]
    timestamps = timestamps[-max_items:]
    embs = item_embs[-max_items:] if item_embs is not None else None

    head = [(KIND_SLOT, None)] if include_user_rep else []
    # tail units per position: month marker, title tokens, embedding slot;
    # the no:k marker (one unit per group) is numbered after truncation
    groups = []
    for title, ts in zip(titles, timestamps):
        group = [(KIND_HASH, space.bucket(_month_bucket(ts)))]
        group += [(KIND_HASH, b) for b in hash_title_tokens(title, space)]
        group.append((KIND_SLOT, None))
        groups.append(group)

    total = len(head) + sum(len(g) + 1 for g in groups) + 1
    dropped = 0
    while groups and total > max_units:
        total -= len(groups[0]) + 1
        groups.pop(0)
        dropped += 1

    units = list(head)
    for k, g in enumerate(groups, start=1):
        units.append((KIND_HASH, space.bucket(f"no:{k}")))
        units.extend(g)

    slot_vectors = None
    if embs is not None:
        rows = ([z_u] if include_user_rep else []) + list(embs[dropped:])
        slot_vectors = np.stack(rows) if rows else np.zeros((0, space.d_enc))
    return _finish_prompt(units, USER_OUT, slot_vectors)


def assemble_item_prompt(space, title, item_emb=None):
    """Item prompt: title tokens, one embedding slot, then [ItemOut]."""
    units = [(KIND_HASH, b) for b in hash_title_tokens(title, space)]
    units.append((KIND_SLOT, None))
    slot_vectors = None if item_emb is None else np.asarray(item_emb)[None, :]
    return _finish_prompt(units, ITEM_OUT, slot_vectors)


@dataclass
class EncodedRep:
    h: np.ndarray    # (d_enc,) final hidden state at the special position


class FrozenEncoder:
    """Causal transformer with every weight frozen except the two
    special-token embedding rows."""

    def __init__(self, config, space=None):
        self.config = config
        self.space = space or HashSpace(
            buckets=config.hash_buckets, seed=config.hash_seed,
            d_enc=config.d_enc)
        if self.space.d_enc != config.d_enc:
            raise ContractViolation("hash space width must match encoder width")
        rng = Rng(config.init_seed).split("encoder-init")
        sigma = 1.0 / np.sqrt(config.d_enc)
        self.pos_emb = Param(
            rng.normal(0.0, sigma, size=(config.max_prompt, config.d_enc))
            .astype(default_dtype()),
            name="enc_pos_emb", frozen=True,
        )
        self.blocks = [
            nn.TransformerBlock(
                config.d_enc, config.heads, config.ff_mult,
                f"enc_block{b}", rng.split("block", b),
                frozen=True, activation="gelu",
            )
            for b in range(config.blocks)
        ]
        self.ln_final = nn.LayerNorm(config.d_enc, "enc_ln_final", frozen=True)
        self.special_tokens = Param(
            rng.split("special").normal(0.0, sigma, size=(2, config.d_enc))
            .astype(default_dtype()),
            name="special_tokens",
        )

    def frozen_params(self):
        out = [self.pos_emb, self.space.table]
        for b in self.blocks:
            out += b.params()
        out += self.ln_final.params()
        return out

    def trainable_params(self):
        return [self.special_tokens]

    def frozen_digest(self):
        h = hashlib.sha256()
        for p in sorted(self.frozen_params(), key=lambda p: p.name):
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def encode_prompts(self, prompts, slots=None, slot_ids=None):
        """Batched encode; returns a (B, d_enc) Tensor of special-position
        hidden states.

        ``slots`` (a Tensor) overrides the prompts' stored slot vectors, with
        ``slot_ids`` giving each prompt's row indices into it (defaults to
        consecutive rows in prompt order). Gradients reach ``slots`` and the
        special-token rows only.
        """
        widths = [len(p) for p in prompts]
        max_width = max(widths)
        if max_width > self.config.max_prompt:
            raise ContractViolation(
                f"prompt length {max_width} exceeds max_prompt "
                f"{self.config.max_prompt}")
        batch = len(prompts)
        d = self.config.d_enc

        if slots is None:
            rows = [p.slot_vectors for p in prompts]
            if any(r is None for r in rows):
                raise ContractViolation("prompt has no slot vectors to encode")
            stacked = (np.concatenate(rows, axis=0) if sum(p.n_slots for p in prompts)
                       else np.zeros((0, d)))
            slots = Tensor(np.asarray(stacked, dtype=default_dtype()))
        if slot_ids is None:
            offsets = np.cumsum([0] + [p.n_slots for p in prompts])
            slot_ids = [np.arange(offsets[b], offsets[b + 1]) for b in range(batch)]

        base = np.zeros((batch, max_width, d), dtype=default_dtype())
        sids = np.zeros((batch, max_width), dtype=np.int64)
        eids = np.zeros((batch, max_width), dtype=np.int64)
        for b, prompt in enumerate(prompts):
            w = widths[b]
            hash_pos = prompt.kinds == KIND_HASH
            base[b, :w][hash_pos] = self.space.table.data[prompt.hash_ids[hash_pos]]
            base[b, :w] += self.pos_emb.data[:w]
            sids[b, w - 1] = 1 + prompt.special_id
            slot_pos = np.nonzero(prompt.kinds == KIND_SLOT)[0]
            eids[b, slot_pos] = 1 + np.asarray(slot_ids[b])

        zero = Tensor(np.zeros((1, d), dtype=default_dtype()))
        spec_ext = ops.concat([zero, self.special_tokens], axis=0)
        slot_ext = ops.concat([zero, slots], axis=0)
        x = ops.add(Tensor(base),
                    ops.add(ops.gather(spec_ext, sids), ops.gather(slot_ext, eids)))

        blocked = nn.causal_blocked(max_width)
        for block in self.blocks:
            x = block(x, blocked)
        x = self.ln_final(x)
        return ops.take_positions(x, np.asarray(widths) - 1)

    def encode(self, prompt):
        """Encode a single assembled prompt (slot vectors required)."""
        h = self.encode_prompts([prompt])
        return EncodedRep(h=np.asarray(h.data[0]))
