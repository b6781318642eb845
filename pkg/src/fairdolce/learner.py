"""Prequential primal-dual online learner over a task stream.

At every timestep the incoming task is first scored with the current
semantic encoder and classifier, then the learner runs ``inner_steps``
primal-dual iterations on batches drawn from the tasks seen *before* this
one, and only afterwards adds the task to its buffer.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from fairdolce import nn
from fairdolce.core import DualState, ModelParams, Task, TaskStream, init_params
from fairdolce.evaluation import MetricsRecord, evaluate_task, positive_part_norm
from fairdolce.losses import (
    FairnessMode,
    Model,
    cls_and_fair,
    invariance,
    recon_doublet,
    recon_quartet,
    total_loss,
)
from fairdolce.sampler import (
    Buffers,
    QuartetInfeasible,
    sample_doublet_batch,
    sample_quartet_batch,
)

logger = logging.getLogger(__name__)


class Ablation(str, enum.Enum):
    FULL = "full"
    NO_DISENTANGLE = "no_disentangle"  # drop h_v and D
    NO_FAIRNESS = "no_fairness"  # drop the lambda_1 path
    NO_VARIATION_ENCODER = "no_variation_encoder"  # drop h_v only


class Schedule(str, enum.Enum):
    THEORY = "theory"
    CONSTANT = "constant"


@dataclass(frozen=True)
class LearnerConfig:
    Q: int = 16
    inner_steps: int = 20
    eta1_0: float = 0.01
    eta2_0: float = 0.01
    schedule: Schedule = Schedule.THEORY
    margin_fair: float = 0.05
    margin_recon: float = 0.05
    margin_inv: float = 0.05
    lambda_fair_init: float = 0.01
    lambda_recon_init: float = 0.01
    lambda_inv_init: float = 0.01
    fairness_mode: FairnessMode = FairnessMode.DDP
    ablation: Ablation = Ablation.FULL
    latent_semantic: int = 16
    latent_variation: int = 16
    hidden: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "schedule", Schedule(self.schedule))
        object.__setattr__(self, "fairness_mode", FairnessMode(self.fairness_mode))
        object.__setattr__(self, "ablation", Ablation(self.ablation))
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.Q < 1:
            raise ValueError("Q must be at least 1")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be at least 1")
        if not (self.eta1_0 > 0 and self.eta2_0 > 0):
            raise ValueError("learning rates must be positive")
        for name in ("margin_fair", "margin_recon", "margin_inv",
                     "lambda_fair_init", "lambda_recon_init", "lambda_inv_init"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def fairness_enabled(self) -> bool:
        return self.ablation is not Ablation.NO_FAIRNESS

    @property
    def disentangle(self) -> bool:
        return self.ablation is not Ablation.NO_DISENTANGLE

    @property
    def variation_enabled(self) -> bool:
        return self.ablation not in (Ablation.NO_DISENTANGLE, Ablation.NO_VARIATION_ENCODER)

    def initial_duals(self) -> DualState:
        return DualState(
            self.lambda_fair_init, self.lambda_recon_init, self.lambda_inv_init,
            self.margin_fair, self.margin_recon, self.margin_inv,
        )


@dataclass
class InnerResult:
    branch: str
    recon: float
    inv: float
    cls: float
    fair: float
    total: float
    degenerate: bool


@dataclass
class LearnerState:
    params: ModelParams
    duals: DualState
    buffers: Buffers = field(default_factory=Buffers)
    timestep: int = 0
    history: list[MetricsRecord] = field(default_factory=list)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    cumulative_violation: float = 0.0
    last_inner: Optional[InnerResult] = None


def initial_state(config: LearnerConfig, feature_dim: int) -> LearnerState:
    params = init_params(feature_dim, config.latent_semantic, config.latent_variation,
                         config.seed, config.hidden)
    return LearnerState(
        params=params,
        duals=config.initial_duals(),
        rng=np.random.default_rng([config.seed, 1]),
    )


def lr_schedule(config: LearnerConfig, t: int, T: Optional[int] = None) -> tuple[float, float]:
    """(eta1, eta2) at timestep t.

    The theory schedule is eta1 = eta1_0 / sqrt(T), eta2 = eta2_0 / sqrt(eta1),
    constant over t; it needs the horizon T.
    """
    if config.schedule is Schedule.CONSTANT:
        return config.eta1_0, config.eta2_0
    if T is None:
        raise ValueError("the theory schedule needs a known horizon T")
    if not 1 <= t <= T:
        raise ValueError(f"timestep {t} outside 1..{T}")
    eta1 = config.eta1_0 / math.sqrt(T)
    return eta1, config.eta2_0 / math.sqrt(eta1)


def dual_update(lam: float, loss_value: float, margin: float, eta2: float) -> float:
    """Projected ascent step max(lam + eta2 (loss - margin), 0)."""
    return max(lam + eta2 * (loss_value - margin), 0.0)


def _combine(terms: list[tuple[float, Optional[nn.BlockGrads]]], like: nn.DenseBlock) -> nn.BlockGrads:
    out = nn.zeros_grads(like)
    for weight, grads in terms:
        if grads is None or weight == 0.0:
            continue
        out = [(w + weight * gw, b + weight * gb) for (w, b), (gw, gb) in zip(out, grads)]
    return out


def inner_update(
    state: LearnerState,
    config: LearnerConfig,
    eta1: float,
    eta2: float,
    rng: Optional[np.random.Generator] = None,
) -> LearnerState:
    """One primal-dual iteration on a batch drawn from the task buffer."""
    rng = state.rng if rng is None else rng
    buffers, params, duals = state.buffers, state.params, state.duals

    batch = None
    if len(buffers.domain) != 1:
        try:
            batch = sample_quartet_batch(buffers, config.Q, rng)
        except QuartetInfeasible:
            batch = None
    branch = "quartet" if batch is not None else "doublet"
    if batch is None:
        batch = sample_doublet_batch(buffers, config.Q, rng)

    tape = nn.Tape()
    model = Model(tape, params, use_variation=config.variation_enabled)
    recon = inv = None
    if branch == "quartet":
        (xa, xb, xc, xd), y1, y2 = batch.arrays()
        if config.disentangle:
            recon = recon_quartet(model, xa, xb, xc, xd)
            inv = invariance(model, xa, xb, xc, xd, y1, y2)
    else:
        xi, xj = batch.arrays()
        if config.disentangle:
            recon = recon_doublet(model, xi, xj)
    pts = batch.points()
    X = np.stack([p.features for p in pts])
    z = np.array([p.sensitive for p in pts])
    y = np.array([p.label for p in pts])
    cls, fair, degenerate = cls_and_fair(model, X, z, y, config.fairness_mode)

    grads = {
        "cls": model.grads(cls),
        "fair": model.grads(fair) if config.fairness_enabled else None,
        "recon": model.grads(recon) if recon is not None else None,
        "inv": model.grads(inv) if inv is not None else None,
    }

    def part(name: str, block: str):
        g = grads[name]
        return None if g is None else g[block]

    lam1 = duals.lambda_fair if config.fairness_enabled else 0.0
    lam2 = duals.lambda_recon if config.disentangle else 0.0
    lam3 = duals.lambda_inv if inv is not None else 0.0

    # per-block objectives: s on L_total, v and d on the RLN constraints,
    # cls on L_cls + lam1 L_fair + lam3 L_inv
    g_s = _combine([(1.0, part("cls", "semantic")), (lam1, part("fair", "semantic")),
                    (lam2, part("recon", "semantic")), (lam3, part("inv", "semantic"))],
                   params.semantic)
    g_v = _combine([(lam2, part("recon", "variation")), (lam3, part("inv", "variation"))],
                   params.variation)
    g_d = _combine([(lam2, part("recon", "decoder")), (lam3, part("inv", "decoder"))],
                   params.decoder)
    g_c = _combine([(1.0, part("cls", "classifier")), (lam1, part("fair", "classifier")),
                    (lam3, part("inv", "classifier"))], params.classifier)

    new_params = replace(
        params,
        semantic=nn.adam_step(params.semantic, g_s, eta1),
        variation=nn.adam_step(params.variation, g_v, eta1) if config.variation_enabled else params.variation,
        decoder=nn.adam_step(params.decoder, g_d, eta1) if config.disentangle else params.decoder,
        classifier=nn.adam_step(params.classifier, g_c, eta1),
    )
    if not new_params.all_finite():
        raise FloatingPointError(f"non-finite parameters after inner update at t={state.timestep}")

    recon_v = float(recon.value) if recon is not None else 0.0
    inv_v = float(inv.value) if inv is not None else 0.0
    cls_v, fair_v = float(cls.value), float(fair.value)
    effective = replace(duals, lambda_fair=lam1, lambda_recon=lam2, lambda_inv=lam3)
    total_v = total_loss(recon_v, inv_v, cls_v, fair_v, effective)

    new_duals = duals
    if config.fairness_enabled:
        new_duals = replace(new_duals, lambda_fair=dual_update(
            duals.lambda_fair, fair_v, duals.margin_fair, eta2))
    if config.disentangle:
        new_duals = replace(new_duals, lambda_recon=dual_update(
            duals.lambda_recon, recon_v, duals.margin_recon, eta2))
        if branch == "quartet":
            new_duals = replace(new_duals, lambda_inv=dual_update(
                duals.lambda_inv, inv_v, duals.margin_inv, eta2))

    state.params = new_params
    state.duals = new_duals
    state.last_inner = InnerResult(branch, recon_v, inv_v, cls_v, fair_v, total_v, degenerate)
    return state


def online_step(
    state: LearnerState,
    task: Task,
    config: LearnerConfig,
    horizon: Optional[int] = None,
) -> tuple[LearnerState, MetricsRecord]:
    """Evaluate on the incoming task, adapt on past tasks, then buffer the task."""
    if task.timestep != state.timestep + 1:
        raise ValueError(f"expected timestep {state.timestep + 1}, got {task.timestep}")

    metrics = evaluate_task(state.params, task.X, task.z, task.y, config.fairness_mode)
    state.buffers.register_environment(task.environment)
    state.timestep = task.timestep
    state.last_inner = None

    if len(state.buffers) > 0:
        eta1, eta2 = lr_schedule(config, task.timestep, horizon)
        for _ in range(config.inner_steps):
            inner_update(state, config, eta1, eta2)
    state.buffers.append_task(task)

    state.cumulative_violation += positive_part_norm(metrics["g_value"])
    inner = state.last_inner
    record = MetricsRecord(
        timestep=task.timestep,
        environment=task.environment,
        accuracy=metrics["accuracy"],
        dp=metrics["dp"],
        eo=metrics["eo"],
        md=metrics["md"],
        g_value=metrics["g_value"],
        recon=inner.recon if inner else None,
        inv=inner.inv if inner else None,
        cls=inner.cls if inner else None,
        fair=inner.fair if inner else None,
        total=inner.total if inner else None,
        lambda1=state.duals.lambda_fair,
        lambda2=state.duals.lambda_recon,
        lambda3=state.duals.lambda_inv,
        cumulative_violation=state.cumulative_violation,
        task_loss=metrics["task_loss"],
        g_degenerate=metrics["g_degenerate"],
        branch=inner.branch if inner else None,
    )
    state.history.append(record)
    return state, record


def run_learner(stream: TaskStream, config: LearnerConfig) -> LearnerState:
    state = initial_state(config, stream.feature_dim)
    T = len(stream) if config.schedule is Schedule.THEORY else None
    for task in stream:
        online_step(state, task, config, T)
        logger.debug("t=%d acc=%.3f dp=%s", task.timestep, state.history[-1].accuracy,
                     state.history[-1].dp)
    return state
