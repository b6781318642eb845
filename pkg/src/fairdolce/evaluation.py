"""Group-fairness metrics, regret accounting, path length and comparator fitting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from fairdolce import nn
from fairdolce.core import TaskStream, init_params
from fairdolce.losses import Model, classification, fairness_from_scores, recon_doublet, scores


@dataclass
class MetricsRecord:
    timestep: int
    environment: int
    accuracy: float
    dp: Optional[float]
    eo: Optional[float]
    md: Optional[float]
    g_value: float
    recon: Optional[float] = None
    inv: Optional[float] = None
    cls: Optional[float] = None
    fair: Optional[float] = None
    total: Optional[float] = None
    lambda1: float = 0.0
    lambda2: float = 0.0
    lambda3: float = 0.0
    cumulative_violation: float = 0.0
    # prequential f_t: mean cross-entropy on the incoming task before adapting
    task_loss: float = 0.0
    g_degenerate: bool = False
    branch: Optional[str] = None  # "quartet", "doublet" or None (no inner loop)


def _check(*seqs) -> list[np.ndarray]:
    arrs = [np.asarray(s) for s in seqs]
    n = len(arrs[0])
    if n == 0:
        raise ValueError("metrics need at least one prediction")
    if any(len(a) != n for a in arrs):
        raise ValueError("inputs must have equal lengths")
    return arrs


def _counts(pred: np.ndarray, mask: np.ndarray) -> Optional[tuple[int, int]]:
    """(positive predictions, group size) or None for an empty group."""
    n = int(mask.sum())
    return None if n == 0 else (int(pred[mask].sum()), n)


def _min_ratio(a: Optional[tuple[int, int]], b: Optional[tuple[int, int]]) -> Optional[float]:
    # computed on integer cross-products so the only rounding is the final division
    if a is None or b is None:
        return None
    (ka, na), (kb, nb) = a, b
    if ka == 0 and kb == 0:
        return 1.0
    if ka == 0 or kb == 0:
        return 0.0
    u, v = ka * nb, kb * na
    return min(u, v) / max(u, v)


def demographic_parity(predictions, sensitive) -> Optional[float]:
    """Min-ratio of positive-prediction rates between z=+1 and z=-1; None if a group is empty."""
    pred, z = _check(predictions, sensitive)
    return _min_ratio(_counts(pred, z == 1), _counts(pred, z == -1))


def equalized_odds(predictions, labels, sensitive) -> Optional[float]:
    """Min-ratio of true-positive rates between groups; None if a group has no positives."""
    pred, y, z = _check(predictions, labels, sensitive)
    return _min_ratio(_counts(pred, (z == 1) & (y == 1)), _counts(pred, (z == -1) & (y == 1)))


def mean_difference(predictions, sensitive) -> Optional[float]:
    """|P(pred=1 | z=+1) - P(pred=1 | z=-1)|; None if a group is empty."""
    pred, z = _check(predictions, sensitive)
    a, b = _counts(pred, z == 1), _counts(pred, z == -1)
    if a is None or b is None:
        return None
    return abs(a[0] * b[1] - b[0] * a[1]) / (a[1] * b[1])


def predict(score) -> np.ndarray:
    return (np.asarray(score) >= 0.5).astype(np.int64)


def accuracy(predictions, labels) -> float:
    pred, y = _check(predictions, labels)
    return float(np.mean(pred == y))


def mean_cross_entropy(score, labels, clamp: float = 1e-12) -> float:
    p = np.clip(np.asarray(score, dtype=np.float64), clamp, 1 - clamp)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(-y * np.log(p) - (1 - y) * np.log(1 - p)))


# --------------------------------------------------------------------------
# comparators


@dataclass
class ComparatorSequence:
    per_env_semantic: dict[int, nn.DenseBlock]
    fixed_classifier: nn.DenseBlock
    environments: list[int]  # environment of each timestep

    def __post_init__(self) -> None:
        missing = set(self.environments) - set(self.per_env_semantic)
        if missing:
            raise ValueError(f"no comparator block for environments {sorted(missing)}")

    def vector(self, t: int) -> np.ndarray:
        """Flattened u_t^s + cls comparator for 1-based timestep t."""
        env = self.environments[t - 1]
        return np.concatenate([self.per_env_semantic[env].flat(), self.fixed_classifier.flat()])

    def vectors(self) -> list[np.ndarray]:
        return [self.vector(t) for t in range(1, len(self.environments) + 1)]

    def task_scores(self, env: int, X) -> np.ndarray:
        s = nn.encode_semantic(self.per_env_semantic[env], X)
        return nn.classify(self.fixed_classifier, s)

    def losses(self, stream: TaskStream) -> list[float]:
        return [mean_cross_entropy(self.task_scores(t.environment, t.X), t.y) for t in stream]


def path_length(comparators: ComparatorSequence | Sequence[np.ndarray]) -> float:
    """Sum of l2 distances between consecutive comparator vectors."""
    vecs = comparators.vectors() if isinstance(comparators, ComparatorSequence) else list(comparators)
    if not vecs:
        raise ValueError("path length of an empty sequence")
    return float(sum(np.linalg.norm(b - a) for a, b in zip(vecs, vecs[1:])))


@dataclass(frozen=True)
class ComparatorConfig:
    steps: int = 500
    lr: float = 0.01
    recon_weight: float = 0.1
    latent_semantic: int = 16
    latent_variation: int = 16
    hidden: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.steps < 0:
            raise ValueError("comparator steps must be nonnegative")
        if not self.lr > 0:
            raise ValueError("comparator lr must be positive")
        if self.recon_weight < 0:
            raise ValueError("recon_weight must be nonnegative")


def fit_comparators(
    stream: TaskStream, config: ComparatorConfig | None = None, shared: bool = False
) -> ComparatorSequence:
    """Offline oracle: full-batch Adam on all data of the stream.

    One semantic encoder per environment (or one shared one with
    ``shared=True``), a shared classifier, and a shared variation
    encoder/decoder that only serve the reconstruction term.  The objective
    is the per-environment mean cross-entropy plus ``recon_weight`` times the
    self-reconstruction l1 error, averaged over environments.
    """
    if len(stream) == 0:
        raise ValueError("cannot fit comparators to an empty stream")
    cfg = config or ComparatorConfig()
    envs = sorted(set(stream.environments()))
    data = {}
    for e in envs:
        tasks = [t for t in stream if t.environment == e]
        data[e] = (np.concatenate([t.X for t in tasks]), np.concatenate([t.y for t in tasks]))

    base = init_params(stream.feature_dim, cfg.latent_semantic, cfg.latent_variation,
                       cfg.seed, cfg.hidden)
    keys = ["shared"] if shared else envs
    rng = np.random.default_rng(cfg.seed + 1)
    # distinct random starts per environment
    sem = {k: nn.init_block([stream.feature_dim, *cfg.hidden, cfg.latent_semantic],
                            ["leaky_relu"] * (len(cfg.hidden) + 1), rng) for k in keys}
    variation, decoder, classifier = base.variation, base.decoder, base.classifier

    for _ in range(cfg.steps):
        tape = nn.Tape()
        traced_sem = {k: nn.trace_block(tape, b) for k, b in sem.items()}
        model = Model(tape, base)
        model.variation = nn.trace_block(tape, variation)
        model.decoder = nn.trace_block(tape, decoder)
        model.classifier = nn.trace_block(tape, classifier)
        terms = []
        for e in envs:
            model.semantic = traced_sem["shared" if shared else e]
            X, y = data[e]
            term = classification(model, X, y)
            if cfg.recon_weight > 0:
                term = nn.add(term, nn.scale(recon_doublet(model, X, X), cfg.recon_weight))
            terms.append(term)
        loss = terms[0]
        for term in terms[1:]:
            loss = nn.add(loss, term)
        loss = nn.scale(loss, 1.0 / len(terms))

        blocks = list(traced_sem.values()) + [model.variation, model.decoder, model.classifier]
        grads = nn.backward(tape, loss, blocks)
        for k, g in zip(list(sem), grads):
            sem[k] = nn.adam_step(sem[k], g, cfg.lr)
        g_var, g_dec, g_cls = grads[len(sem):]
        if cfg.recon_weight > 0:
            variation = nn.adam_step(variation, g_var, cfg.lr)
            decoder = nn.adam_step(decoder, g_dec, cfg.lr)
        classifier = nn.adam_step(classifier, g_cls, cfg.lr)

    per_env = {e: sem["shared" if shared else e] for e in envs}
    return ComparatorSequence(per_env, classifier, stream.environments())


# --------------------------------------------------------------------------
# regret


@dataclass
class RegretReport:
    fair_sdr: float
    static_regret: Optional[float]
    cumulative_violation: float
    fair_sdr_curve: list[float] = field(default_factory=list)  # fair_sdr(t) / t
    violation_curve: list[float] = field(default_factory=list)  # violation(t) / t
    cumulative_fair_sdr: list[float] = field(default_factory=list)
    cumulative_violations: list[float] = field(default_factory=list)


def positive_part_norm(g) -> float:
    """||[g]_+|| for a scalar or vector constraint value."""
    g = np.atleast_1d(np.asarray(g, dtype=np.float64))
    return float(np.linalg.norm(np.maximum(g, 0.0)))


def cumulative_violation(g_values) -> list[float]:
    out, acc = [], 0.0
    for g in g_values:
        acc += positive_part_norm(g)
        out.append(acc)
    return out


def regret_report(
    learner_losses: Sequence[float],
    comparator_losses: Sequence[float],
    g_values: Sequence,
    static_comparator_losses: Sequence[float] | None = None,
) -> RegretReport:
    n = len(learner_losses)
    if len(comparator_losses) != n or len(g_values) != n:
        raise ValueError("loss and constraint series must have equal lengths")
    if static_comparator_losses is not None and len(static_comparator_losses) != n:
        raise ValueError("static comparator series has the wrong length")
    gaps = np.asarray(learner_losses, dtype=np.float64) - np.asarray(comparator_losses, dtype=np.float64)
    cum_sdr = list(np.cumsum(gaps)) if n else []
    cum_viol = cumulative_violation(g_values)
    static = None
    if static_comparator_losses is not None:
        static = float(np.sum(learner_losses) - np.sum(static_comparator_losses))
    return RegretReport(
        fair_sdr=float(cum_sdr[-1]) if n else 0.0,
        static_regret=static,
        cumulative_violation=cum_viol[-1] if n else 0.0,
        fair_sdr_curve=[float(c) / t for t, c in enumerate(cum_sdr, start=1)],
        violation_curve=[c / t for t, c in enumerate(cum_viol, start=1)],
        cumulative_fair_sdr=[float(c) for c in cum_sdr],
        cumulative_violations=cum_viol,
    )


def final_window(records: Sequence[MetricsRecord]) -> list[MetricsRecord]:
    """The last ceil(T/3) records."""
    k = math.ceil(len(records) / 3)
    return list(records[-k:]) if k else []


def evaluate_task(params, X, z, y, mode) -> dict:
    """Prequential metrics of ``params`` on one task (no side effects)."""
    sc = scores(params, X)
    pred = predict(sc)
    g, degenerate = fairness_from_scores(sc, z, y, mode)
    return {
        "accuracy": accuracy(pred, y),
        "dp": demographic_parity(pred, z),
        "eo": equalized_odds(pred, y, z),
        "md": mean_difference(pred, z),
        "g_value": g,
        "g_degenerate": degenerate,
        "task_loss": mean_cross_entropy(sc, y),
    }
