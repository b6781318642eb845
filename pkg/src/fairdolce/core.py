"""Domain types: datapoints, tasks, task streams, model parameters, duals."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from fairdolce.nn import DenseBlock, init_block

logger = logging.getLogger(__name__)


class StreamWarning(UserWarning):
    """An environment lacks a class or a sensitive group."""


@dataclass(frozen=True)
class DataPoint:
    features: np.ndarray
    sensitive: int
    label: int
    environment: int

    def __post_init__(self) -> None:
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 1:
            raise ValueError("features must be a 1-d vector")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        if self.sensitive not in (-1, 1):
            raise ValueError(f"sensitive must be -1 or +1, got {self.sensitive}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.environment < 0:
            raise ValueError(f"environment must be nonnegative, got {self.environment}")

    def key(self) -> tuple:
        """Hashable identity used for multiset comparisons."""
        return (self.features.tobytes(), self.sensitive, self.label, self.environment)


def stack(points: Sequence[DataPoint]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(X, z, y) arrays for a list of points."""
    X = np.stack([p.features for p in points])
    z = np.array([p.sensitive for p in points], dtype=np.int64)
    y = np.array([p.label for p in points], dtype=np.int64)
    return X, z, y


@dataclass(frozen=True)
class Task:
    points: tuple[DataPoint, ...]
    environment: int
    timestep: int
    X: np.ndarray = field(init=False, repr=False, compare=False)
    z: np.ndarray = field(init=False, repr=False, compare=False)
    y: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.points:
            raise ValueError("a task must contain at least one point")
        if self.timestep < 1:
            raise ValueError("timesteps start at 1")
        if any(p.environment != self.environment for p in self.points):
            raise ValueError("every point of a task must share the task's environment")
        X, z, y = stack(self.points)
        object.__setattr__(self, "points", tuple(self.points))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[Task, ...]
    feature_dim: int
    environment_count: int
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "tasks", tuple(self.tasks))
        for i, task in enumerate(self.tasks, start=1):
            if task.timestep != i:
                raise ValueError(f"timesteps must be 1..T in order; task {i} has {task.timestep}")
            if not 0 <= task.environment < self.environment_count:
                raise ValueError(f"environment id {task.environment} out of range")
            if task.X.shape[1] != self.feature_dim:
                raise ValueError("feature dimension differs across tasks")

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def points(self) -> list[DataPoint]:
        return [p for t in self.tasks for p in t.points]

    def environments(self) -> list[int]:
        return [t.environment for t in self.tasks]


def build_task_stream(
    dataset: Sequence[DataPoint],
    tasks_per_environment: int,
    ordering: Iterable[int] | None = None,
) -> TaskStream:
    """Split each environment's points into equal consecutive tasks.

    Environments appear in ``ordering`` (default: order of first appearance
    in ``dataset``); the last task of an environment absorbs the remainder.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if tasks_per_environment < 1:
        raise ValueError("tasks_per_environment must be at least 1")

    by_env: dict[int, list[DataPoint]] = {}
    for p in dataset:
        by_env.setdefault(p.environment, []).append(p)
    order = list(by_env) if ordering is None else list(ordering)
    if sorted(order) != sorted(by_env):
        raise ValueError(f"ordering {order} does not match dataset environments {sorted(by_env)}")
    dims = {p.features.shape[0] for p in dataset}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dimensions {sorted(dims)}")

    notes = []
    tasks = []
    for env in order:
        pts = by_env[env]
        if len(pts) < tasks_per_environment:
            raise ValueError(
                f"environment {env} has {len(pts)} points, fewer than {tasks_per_environment} tasks"
            )
        labels = {p.label for p in pts}
        groups = {p.sensitive for p in pts}
        if len(labels) < 2 or len(groups) < 2:
            msg = f"environment {env} is missing a class or sensitive group"
            notes.append(msg)
            warnings.warn(msg, StreamWarning, stacklevel=2)
        size = len(pts) // tasks_per_environment
        for k in range(tasks_per_environment):
            stop = len(pts) if k == tasks_per_environment - 1 else (k + 1) * size
            tasks.append(Task(tuple(pts[k * size : stop]), env, len(tasks) + 1))

    return TaskStream(
        tuple(tasks),
        feature_dim=dims.pop(),
        environment_count=max(by_env) + 1,
        warnings=tuple(notes),
    )


@dataclass(frozen=True)
class ModelParams:
    semantic: DenseBlock
    variation: DenseBlock
    decoder: DenseBlock
    classifier: DenseBlock

    BLOCKS = ("semantic", "variation", "decoder", "classifier")

    def __post_init__(self) -> None:
        s, v = self.semantic.out_dim, self.variation.out_dim
        if self.semantic.in_dim != self.variation.in_dim:
            raise ValueError("encoders must share an input dimension")
        if self.decoder.in_dim != s + v:
            raise ValueError(f"decoder input {self.decoder.in_dim} != |s| + |v| = {s + v}")
        if self.decoder.out_dim != self.semantic.in_dim:
            raise ValueError("decoder output must match the feature dimension")
        if self.classifier.in_dim != s or self.classifier.out_dim != 1:
            raise ValueError("classifier must map |s| to a single score")

    @property
    def feature_dim(self) -> int:
        return self.semantic.in_dim

    def blocks(self) -> dict[str, DenseBlock]:
        return {name: getattr(self, name) for name in self.BLOCKS}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(b.flat())) for b in self.blocks().values())


def init_params(
    feature_dim: int,
    latent_semantic: int,
    latent_variation: int,
    seed: int,
    hidden: Sequence[int] = (),
) -> ModelParams:
    """Random tabular networks: LeakyReLU encoders/decoder, sigmoid classifier.

    ``hidden`` inserts LeakyReLU hidden layers of the given widths into both
    encoders and the decoder; the default is a single dense layer each.
    """
    for name, d in (("feature_dim", feature_dim), ("latent_semantic", latent_semantic),
                    ("latent_variation", latent_variation)):
        if d < 1:
            raise ValueError(f"{name} must be positive, got {d}")
    rng = np.random.default_rng(seed)
    hidden = list(hidden)
    acts = ["leaky_relu"] * (len(hidden) + 1)
    return ModelParams(
        semantic=init_block([feature_dim, *hidden, latent_semantic], acts, rng),
        variation=init_block([feature_dim, *hidden, latent_variation], acts, rng),
        decoder=init_block([latent_semantic + latent_variation, *hidden, feature_dim], acts, rng),
        classifier=init_block([latent_semantic, 1], ["sigmoid"], rng),
    )


@dataclass(frozen=True)
class DualState:
    lambda_fair: float = 0.01
    lambda_recon: float = 0.01
    lambda_inv: float = 0.01
    margin_fair: float = 0.05
    margin_recon: float = 0.05
    margin_inv: float = 0.05

    def __post_init__(self) -> None:
        for name in ("lambda_fair", "lambda_recon", "lambda_inv",
                     "margin_fair", "margin_recon", "margin_inv"):
            value = getattr(self, name)
            if not value >= 0:
                raise ValueError(f"{name} must be nonnegative, got {value}")
