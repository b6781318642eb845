"""Reconstruction, class-invariance, classification and fairness losses.

Each loss takes a :class:`Model` (a ModelParams traced onto a tape) plus
batch arrays and returns a scalar tape node, so the same code gives values
and exact gradients.  :func:`evaluate` wraps this for callers that only
want numbers.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from fairdolce import nn
from fairdolce.core import DataPoint, DualState, ModelParams, stack

CLAMP = 1e-12


class FairnessMode(str, enum.Enum):
    DDP = "ddp"
    DEO = "deo"


@dataclass
class LossBundle:
    recon: float
    inv: float
    cls: float
    fair: float
    total: float


class Model:
    """ModelParams traced onto a tape.

    ``use_variation=False`` replaces the variation factor with zeros (the
    encoder is dropped but the decoder keeps its input width).
    """

    def __init__(self, tape: nn.Tape, params: ModelParams, use_variation: bool = True):
        self.tape = tape
        self.params = params
        self.use_variation = use_variation
        self.semantic = nn.trace_block(tape, params.semantic)
        self.variation = nn.trace_block(tape, params.variation)
        self.decoder = nn.trace_block(tape, params.decoder)
        self.classifier = nn.trace_block(tape, params.classifier)

    def const(self, x) -> nn.Node:
        return self.tape.leaf(x)

    def h_s(self, x: nn.Node) -> nn.Node:
        return self.semantic(x)

    def h_v(self, x: nn.Node) -> nn.Node:
        if not self.use_variation:
            n = x.value.shape[0]
            return self.tape.leaf(np.zeros((n, self.params.variation.out_dim)))
        return self.variation(x)

    def decode(self, s: nn.Node, v: nn.Node) -> nn.Node:
        return self.decoder(nn.concat(s, v))

    def score(self, s: nn.Node) -> nn.Node:
        return nn.column(self.classifier(s), 0)

    def blocks(self) -> dict[str, nn.TracedBlock]:
        return {
            "semantic": self.semantic,
            "variation": self.variation,
            "decoder": self.decoder,
            "classifier": self.classifier,
        }

    def grads(self, loss: nn.Node) -> dict[str, nn.BlockGrads]:
        blocks = self.blocks()
        return dict(zip(blocks, nn.backward(self.tape, loss, list(blocks.values()))))


def cross_entropy(score: float, label: int) -> float:
    p = min(max(float(score), CLAMP), 1.0 - CLAMP)
    return -label * math.log(p) - (1 - label) * math.log(1.0 - p)


def _rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def recon_quartet(model: Model, xa, xb, xc, xd) -> nn.Node:
    """Mean over quartets of |x_a - D(s_a, v_b)|_1 + |x_c - D(s_c, v_d)|_1."""
    xa, xb, xc, xd = (model.const(_rows(x)) for x in (xa, xb, xc, xd))
    s_a, s_c = model.h_s(xa), model.h_s(xc)
    v_b, v_d = model.h_v(xb), model.h_v(xd)
    first = nn.l1_rows(nn.sub(xa, model.decode(s_a, v_b)))
    second = nn.l1_rows(nn.sub(xc, model.decode(s_c, v_d)))
    return nn.mean(nn.add(first, second))


def recon_doublet(model: Model, xi, xj) -> nn.Node:
    """Mean over pairs of |x_i - D(s_i, v_j)|_1."""
    xi, xj = model.const(_rows(xi)), model.const(_rows(xj))
    return nn.mean(nn.l1_rows(nn.sub(xi, model.decode(model.h_s(xi), model.h_v(xj)))))


def invariance(model: Model, xa, xb, xc, xd, y, y_prime) -> nn.Node:
    """Mean over quartets of CE(w(h_s(x_a->c)), y) + CE(w(h_s(x_b->d)), y')."""
    xa, xb, xc, xd = (model.const(_rows(x)) for x in (xa, xb, xc, xd))
    x_ac = model.decode(model.h_s(xa), model.h_v(xc))
    x_bd = model.decode(model.h_s(xb), model.h_v(xd))
    ce1 = nn.binary_cross_entropy(model.score(model.h_s(x_ac)), np.atleast_1d(y), CLAMP)
    ce2 = nn.binary_cross_entropy(model.score(model.h_s(x_bd)), np.atleast_1d(y_prime), CLAMP)
    return nn.mean(nn.add(ce1, ce2))


def classification(model: Model, X, y) -> nn.Node:
    """Mean cross-entropy of the classifier on semantic factors."""
    score = model.score(model.h_s(model.const(_rows(X))))
    return nn.mean(nn.binary_cross_entropy(score, np.atleast_1d(y), CLAMP))


def fairness_weights(z, y, mode: FairnessMode) -> tuple[np.ndarray, bool]:
    """Per-point weights w with g = sum_i w_i * score_i, and a degenerate flag.

    DDP: p1 is the fraction of z=+1 points and the mean runs over the batch.
    DEO: only y=1 points take part; p1 is the fraction of them with z=+1.
    """
    z = np.asarray(z)
    y = np.asarray(y)
    if z.size == 0:
        raise ValueError("fairness notion of an empty batch")
    mask = np.ones(z.shape, dtype=bool) if FairnessMode(mode) is FairnessMode.DDP else (y == 1)
    n = int(mask.sum())
    w = np.zeros(z.shape, dtype=np.float64)
    if n == 0:
        return w, True
    p1 = float(np.sum((z == 1) & mask)) / n
    if p1 <= 0.0 or p1 >= 1.0:
        return w, True
    w[mask] = ((z[mask] + 1) / 2 - p1) / (p1 * (1 - p1)) / n
    return w, False


def fairness_node(model: Model, X, z, y, mode: FairnessMode) -> tuple[nn.Node, bool]:
    w, degenerate = fairness_weights(z, y, mode)
    score = model.score(model.h_s(model.const(_rows(X))))
    return nn.dot_const(score, w), degenerate


def fairness_notion(
    batch: list[DataPoint], params: ModelParams, mode: FairnessMode = FairnessMode.DDP
) -> tuple[float, bool]:
    """Signed linear fairness gap g of the classifier on ``batch``.

    Returns ``(g, degenerate)``; a batch with an empty sensitive group gives
    ``(0.0, True)``.
    """
    if not batch:
        raise ValueError("fairness notion of an empty batch")
    X, z, y = stack(batch)
    return fairness_from_scores(scores(params, X), z, y, mode)


def fairness_from_scores(score, z, y, mode: FairnessMode = FairnessMode.DDP) -> tuple[float, bool]:
    w, degenerate = fairness_weights(z, y, mode)
    return float(np.dot(np.asarray(score, dtype=np.float64), w)), degenerate


def scores(params: ModelParams, X) -> np.ndarray:
    """Classifier scores w(h_s(x)) for a batch of feature rows."""
    return nn.classify(params.classifier, nn.encode_semantic(params.semantic, _rows(X)))


def cls_and_fair(
    model: Model, X, z, y, mode: FairnessMode
) -> tuple[nn.Node, nn.Node, bool]:
    """Classification loss and fairness gap over one batch (evaluated once)."""
    if len(np.atleast_1d(y)) == 0:
        raise ValueError("empty batch")
    fair, degenerate = fairness_node(model, X, z, y, mode)
    return classification(model, X, y), fair, degenerate


def total_loss(recon: float, inv: float, cls: float, fair: float, duals: DualState) -> float:
    """cls + l1 (fair - e1) + l2 (recon - e2) + l3 (inv - e3)."""
    return (
        cls
        + duals.lambda_fair * (fair - duals.margin_fair)
        + duals.lambda_recon * (recon - duals.margin_recon)
        + duals.lambda_inv * (inv - duals.margin_inv)
    )


# ---- numeric wrappers over the traced losses


def recon_loss_quartet(quartet, params: ModelParams) -> float:
    r1, r2, r3, r4 = quartet
    if r1.environment != r2.environment or r3.environment != r4.environment:
        raise ValueError("quartet pairs (r1, r2) and (r3, r4) must share environments")
    model = Model(nn.Tape(), params)
    return float(recon_quartet(model, r1.features, r2.features, r3.features, r4.features).value)


def recon_loss_doublet(pair, params: ModelParams) -> float:
    ri, rj = pair
    if ri.environment != rj.environment:
        raise ValueError("doublet points must share an environment")
    model = Model(nn.Tape(), params)
    return float(recon_doublet(model, ri.features, rj.features).value)


def invariance_loss(quartet, params: ModelParams) -> float:
    r1, r2, r3, r4 = quartet
    model = Model(nn.Tape(), params)
    node = invariance(model, r1.features, r2.features, r3.features, r4.features, r1.label, r2.label)
    return float(node.value)


def cls_and_fair_losses(
    batch: list[DataPoint], params: ModelParams, mode: FairnessMode = FairnessMode.DDP
) -> tuple[float, float]:
    if not batch:
        raise ValueError("empty batch")
    X, z, y = stack(batch)
    model = Model(nn.Tape(), params)
    cls, fair, _ = cls_and_fair(model, X, z, y, mode)
    return float(cls.value), float(fair.value)
