"""Gradient verification suite: every primitive, plus the full training
objective on a toy model, checked against central finite differences in f64.

Used both by the ``gradcheck`` CLI command and the acceptance tests.
"""

import numpy as np

from seqdistill import distill, frozenenc
from seqdistill.numcore import (
    Rng,
    Tensor,
    grad_check,
    grad_check_model,
    ops,
    using_dtype,
)


def _weighter(shape, rng):
    """A fixed random cotangent: turns any-shaped output into a scalar loss."""
    w = Tensor(rng.normal(size=shape))
    return lambda t: ops.sum_(ops.mul(t, w))


def primitive_checks(seed=0, h=1e-5):
    """Max finite-difference relative error per primitive at a random point."""
    rng = Rng(seed).split("gradsuite").gen
    results = {}

    def check(name, make, point, out_shape=None):
        if out_shape is None:
            results[name] = grad_check(make, point, h=h)
        else:
            w = _weighter(out_shape, rng)
            results[name] = grad_check(lambda p: w(make(p)), point, h=h)

    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 5))
    check("matmul", lambda p: ops.matmul(p["a"], p["b"]),
          {"a": a, "b": b}, out_shape=(3, 5))

    x = rng.normal(size=(3, 4))
    y = rng.normal(size=(3, 4))
    check("add", lambda p: ops.add(p["x"], p["y"]), {"x": x, "y": y}, (3, 4))
    check("sub", lambda p: ops.sub(p["x"], p["y"]), {"x": x, "y": y}, (3, 4))
    check("mul", lambda p: ops.mul(p["x"], p["y"]), {"x": x, "y": y}, (3, 4))

    bias = rng.normal(size=(4,))
    check("bias_add", lambda p: ops.add(p["x"], p["b"]),
          {"x": x, "b": bias}, (3, 4))

    # keep relu inputs away from the kink
    xr = rng.normal(size=(3, 4))
    xr = np.where(np.abs(xr) < 0.1, 0.5, xr)
    check("relu", lambda p: ops.relu(p["x"]), {"x": xr}, (3, 4))
    check("gelu", lambda p: ops.gelu(p["x"]), {"x": x}, (3, 4))
    check("softmax", lambda p: ops.softmax(p["x"]), {"x": x}, (3, 4))
    check("softmax_log", lambda p: ops.log(ops.softmax(p["x"])), {"x": x}, (3, 4))

    xp = np.abs(rng.normal(size=(3, 4))) + 0.5
    check("log", lambda p: ops.log(p["x"]), {"x": xp}, (3, 4))
    check("exp", lambda p: ops.exp(p["x"]), {"x": x}, (3, 4))
    check("softplus", lambda p: ops.softplus(p["x"]), {"x": x}, (3, 4))
    check("sigmoid", lambda p: ops.sigmoid(p["x"]), {"x": x}, (3, 4))

    check("sum", lambda p: ops.sum_(p["x"], axis=-1), {"x": x}, (3,))
    check("mean", lambda p: ops.mean(p["x"], axis=0), {"x": x}, (4,))

    gain = rng.normal(size=(4,)) + 1.0
    lnb = rng.normal(size=(4,))
    check("layernorm", lambda p: ops.layernorm(p["x"], p["g"], p["b"]),
          {"x": x, "g": gain, "b": lnb}, (3, 4))

    table = rng.normal(size=(6, 4))
    ids = np.array([[0, 2], [5, 2]])
    check("gather", lambda p: ops.gather(p["t"], ids), {"t": table}, (2, 2, 4))

    check("concat", lambda p: ops.concat([p["x"], p["y"]], axis=1),
          {"x": x, "y": y}, (3, 8))

    mask = rng.random((3, 4)) > 0.5
    check("masked_fill", lambda p: ops.masked_fill(p["x"], mask, -5.0),
          {"x": x}, (3, 4))

    v1 = rng.normal(size=(5,))
    v2 = rng.normal(size=(5,))
    check("dot", lambda p: ops.dot(p["a"], p["b"]), {"a": v1, "b": v2})
    check("sq_dist", lambda p: ops.sq_dist(p["x"], p["y"]),
          {"x": x, "y": y}, (3,))
    check("l2_normalize", lambda p: ops.l2_normalize(p["x"]), {"x": x}, (3, 4))

    idx = np.array([1, 0, 2])
    x3 = rng.normal(size=(3, 4, 2))
    check("take_positions", lambda p: ops.take_positions(p["x"], idx),
          {"x": x3}, (3, 2))
    check("transpose", lambda p: ops.transpose(p["x"], (1, 0)), {"x": x}, (4, 3))
    check("reshape", lambda p: ops.reshape(p["x"], (4, 3)), {"x": x}, (4, 3))

    check("mlp3",
          lambda p: ops.mean(ops.matmul(ops.relu(ops.add(ops.matmul(
              ops.gelu(ops.add(ops.matmul(p["x0"], p["w1"]), p["b1"])),
              p["w2"]), p["b2"])), p["w3"])),
          {"x0": rng.normal(size=(2, 5)),
           "w1": rng.normal(size=(5, 5)), "b1": rng.normal(size=(5,)),
           "w2": rng.normal(size=(5, 5)), "b2": rng.normal(size=(5,)),
           "w3": rng.normal(size=(5, 1))})

    return results


def full_objective_check(seed=0, h=1e-5):
    """Finite-difference check of the complete training objective (retrieval
    + distillation + uniformity) through the frozen encoder on a toy setup:
    d=8, d_enc=8, d'=8, batch of 4 users, 2 negatives each."""
    d_cf, d_enc, d_prime, batch, m_neg = 8, 8, 8, 4, 2

    with using_dtype("f64"):
        rng = Rng(seed).split("fullcheck")
        cfg = frozenenc.EncoderConfig(
            d_enc=d_enc, blocks=1, heads=2, ff_mult=2,
            max_prompt=32, hash_buckets=64, init_seed=seed)
        enc = frozenenc.FrozenEncoder(cfg)
        heads = distill.DistillHeads(d_cf, d_enc, d_prime, rng.split("heads"))

        gen = rng.split("data").gen
        o_matrix = gen.normal(size=(batch, d_cf))
        item_pool = gen.normal(size=(6, d_cf))
        titles = ["amber anchor", "brisk beacon", "cobalt cedar",
                  "dusty dynamo", "ember easel", "frost fjord"]
        user_prompts, user_rows = [], []
        for u in range(batch):
            items = [int(i) for i in gen.integers(0, 6, size=2)]
            ts = [1_600_000_000 + 86_400 * k for k in range(len(items))]
            user_prompts.append(frozenenc.assemble_user_prompt(
                enc.space, items, [titles[i] for i in items], ts,
                max_items=8, max_units=32))
            user_rows.append(item_pool[items])
        item_ids = np.arange(6)
        item_prompts = [
            frozenenc.assemble_item_prompt(enc.space, titles[i]) for i in item_ids
        ]
        pos_idx = np.asarray(gen.integers(0, 6, size=batch))
        neg_idx = np.asarray(gen.integers(0, 6, size=(batch, m_neg)))

        def loss_fn():
            h_u = distill._encode_with_heads(enc, heads, user_prompts,
                                             user_rows, False)
            item_slots = heads.f_i(Tensor(item_pool))
            h_i = enc.encode_prompts(item_prompts, slots=item_slots)
            pu = heads.f_user(h_u)
            pi = heads.f_item(h_i)
            pos_s = ops.sum_(ops.mul(pu, ops.gather(pi, pos_idx)), axis=-1)
            neg_s = ops.sum_(ops.mul(ops.reshape(pu, (batch, 1, d_prime)),
                                     ops.gather(pi, neg_idx)), axis=-1)
            po = heads.f_cf_user(Tensor(o_matrix))
            l_ret = distill.loss_retrieval(pos_s, neg_s)
            l_dist = distill._mse(po, pu)
            l_uni = ops.add(distill._uniformity_term(po),
                            distill._uniformity_term(pu))
            return ops.add(ops.add(l_ret, l_dist), l_uni)

        params = heads.params() + enc.trainable_params()
        return grad_check_model(loss_fn, params, h=h)


def run_suite(seed=0, h=1e-5):
    """(per-primitive errors, full-objective error) for the CLI and tests."""
    return primitive_checks(seed=seed, h=h), full_objective_check(seed=seed, h=h)
