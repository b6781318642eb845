"""Central finite-difference checks for the traced losses."""

from dataclasses import replace

import numpy as np

from fairdolce import nn
from fairdolce.core import DualState, init_params
from fairdolce.losses import (
    FairnessMode,
    Model,
    cls_and_fair,
    invariance,
    recon_doublet,
    recon_quartet,
)

STEP = 1e-5
KINK_MIN = 1e-3
LOSSES = ("recon_quartet", "recon_doublet", "inv", "cls", "fair_ddp", "fair_deo", "total")
ALL_BLOCKS = ("semantic", "variation", "decoder", "classifier")
# blocks each loss can depend on; the others are checked to have exactly zero gradient
TOUCHED = {
    "recon_quartet": ("semantic", "variation", "decoder"),
    "recon_doublet": ("semantic", "variation", "decoder"),
    "cls": ("semantic", "classifier"),
    "fair_ddp": ("semantic", "classifier"),
    "fair_deo": ("semantic", "classifier"),
}


def random_instance(rng):
    d = int(rng.integers(2, 9))
    ls = int(rng.integers(1, 5))
    lv = int(rng.integers(1, 5))
    n = int(rng.integers(2, 9))
    hidden = () if rng.random() < 0.5 else (int(rng.integers(2, 5)),)
    params = init_params(d, ls, lv, seed=int(rng.integers(2**31)), hidden=hidden)
    xs = [rng.standard_normal((n, d)) for _ in range(4)]
    y = rng.integers(0, 2, size=n)
    # both groups present so the fairness weights are non-degenerate
    z = np.where(rng.random(n) < 0.5, 1, -1)
    z[0], z[1] = 1, -1
    y[0] = y[1] = 1
    duals = DualState(*(rng.uniform(0, 2, size=3)), *(rng.uniform(0, 0.1, size=3)))
    return params, xs, y, z, duals


def loss_node(name, params, xs, y, z, duals):
    tape = nn.Tape()
    model = Model(tape, params)
    xa, xb, xc, xd = xs
    if name == "recon_quartet":
        return tape, model, recon_quartet(model, xa, xb, xc, xd)
    if name == "recon_doublet":
        return tape, model, recon_doublet(model, xa, xb)
    if name == "inv":
        return tape, model, invariance(model, xa, xb, xc, xd, y, 1 - y)
    X = np.concatenate([xa, xb])
    zz, yy = np.concatenate([z, -z]), np.concatenate([y, y])
    if name in ("cls", "fair_ddp", "fair_deo"):
        mode = FairnessMode.DEO if name == "fair_deo" else FairnessMode.DDP
        cls, fair, _ = cls_and_fair(model, X, zz, yy, mode)
        return tape, model, cls if name == "cls" else fair
    cls, fair, _ = cls_and_fair(model, X, zz, yy, FairnessMode.DDP)
    rec = recon_quartet(model, xa, xb, xc, xd)
    inv = invariance(model, xa, xb, xc, xd, y, 1 - y)
    total = cls
    for lam, node, eps in ((duals.lambda_fair, fair, duals.margin_fair),
                           (duals.lambda_recon, rec, duals.margin_recon),
                           (duals.lambda_inv, inv, duals.margin_inv)):
        total = nn.add(total, nn.scale(nn.sub(node, tape.leaf(eps)), lam))
    return tape, model, total


def _value(name, params, xs, y, z, duals):
    return float(loss_node(name, params, xs, y, z, duals)[2].value)


def check(name, params, xs, y, z, duals):
    """Norm-relative error between analytic and central-difference gradients.

    Returns None when the instance sits too close to an activation or |.| kink.
    """
    tape, model, node = loss_node(name, params, xs, y, z, duals)
    if tape.kink_margin < KINK_MIN:
        return None
    grads = model.grads(node)
    touched = TOUCHED.get(name, ALL_BLOCKS)
    for block_name in ALL_BLOCKS:
        if block_name not in touched:
            assert all(not g.any() for pair in grads[block_name] for g in pair), block_name
    analytic, numeric = [], []
    for block_name in touched:
        block = getattr(params, block_name)
        arrays = block.arrays()
        flat_grads = [g for pair in grads[block_name] for g in pair]
        for k, arr in enumerate(arrays):
            fd = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                vals = []
                for sign in (1.0, -1.0):
                    moved = [a.copy() for a in arrays]
                    moved[k][idx] += sign * STEP
                    p = replace(params, **{block_name: block.with_arrays(moved)})
                    vals.append(_value(name, p, xs, y, z, duals))
                fd[idx] = (vals[0] - vals[1]) / (2 * STEP)
            numeric.append(fd.ravel())
            analytic.append(flat_grads[k].ravel())
    a, f = np.concatenate(analytic), np.concatenate(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(f), 1e-12)
    return float(np.linalg.norm(a - f) / scale)


def run_suite(n_instances, seed=0, max_tries=None):
    """Check every loss on ``n_instances`` kink-free instances; returns max error per loss."""
    rng = np.random.default_rng(seed)
    worst = {name: 0.0 for name in LOSSES}
    counts = {name: 0 for name in LOSSES}
    tries = 0
    max_tries = max_tries or 20 * n_instances
    while min(counts.values()) < n_instances and tries < max_tries:
        tries += 1
        params, xs, y, z, duals = random_instance(rng)
        for name in LOSSES:
            if counts[name] >= n_instances:
                continue
            err = check(name, params, xs, y, z, duals)
            if err is None:
                continue
            worst[name] = max(worst[name], err)
            counts[name] += 1
    return worst, counts
