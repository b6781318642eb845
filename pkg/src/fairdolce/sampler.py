"""Domain/task buffers and quartet/doublet batch sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fairdolce.core import DataPoint, Task


class SamplerError(Exception):
    pass


class QuartetInfeasible(SamplerError):
    """No two environments share two populated label cells."""


@dataclass
class Buffers:
    """Seen environments (U) and every buffered point, indexed by (env, label).

    The two are updated separately: an arriving task registers its
    environment straight away, while its points are appended only after the
    learner has finished adapting at that timestep.
    """

    domain: set[int] = field(default_factory=set)
    cells: dict[tuple[int, int], list[DataPoint]] = field(default_factory=dict)
    by_env: dict[int, list[DataPoint]] = field(default_factory=dict)

    def register_environment(self, env: int) -> None:
        self.domain.add(env)

    def append_task(self, task: Task) -> None:
        self.domain.add(task.environment)
        for p in task.points:
            self.cells.setdefault((p.environment, p.label), []).append(p)
            self.by_env.setdefault(p.environment, []).append(p)

    def update(self, task: Task) -> None:
        self.register_environment(task.environment)
        self.append_task(task)

    def __len__(self) -> int:
        return sum(len(v) for v in self.by_env.values())

    def buffered_environments(self) -> list[int]:
        return sorted(self.by_env)


def update_buffers(buffers: Buffers, task: Task) -> Buffers:
    """Both phases at once; the learner calls them separately around its inner loop."""
    buffers.update(task)
    return buffers


@dataclass(frozen=True)
class QuartetBatch:
    # each quartet is (r1, r2, r3, r4): envs (e, e, e', e'), labels (y, y', y, y')
    pairs: tuple[tuple[DataPoint, DataPoint, DataPoint, DataPoint], ...]

    def __post_init__(self) -> None:
        for r1, r2, r3, r4 in self.pairs:
            if not (r1.environment == r2.environment and r3.environment == r4.environment
                    and r1.environment != r3.environment):
                raise ValueError("quartet violates the environment pattern")
            if not (r1.label == r3.label and r2.label == r4.label and r1.label != r2.label):
                raise ValueError("quartet violates the label pattern")

    def points(self) -> list[DataPoint]:
        return [p for q in self.pairs for p in q]

    def arrays(self):
        """Feature matrices (Xa, Xb, Xc, Xd) and label vectors (y, y')."""
        cols = list(zip(*self.pairs))
        Xs = [np.stack([p.features for p in col]) for col in cols]
        y = np.array([p.label for p in cols[0]])
        y_prime = np.array([p.label for p in cols[1]])
        return Xs, y, y_prime


@dataclass(frozen=True)
class DoubletBatch:
    pairs: tuple[tuple[DataPoint, DataPoint], ...]

    def __post_init__(self) -> None:
        for a, b in self.pairs:
            if a.environment != b.environment:
                raise ValueError("doublet points must share an environment")

    def points(self) -> list[DataPoint]:
        return [p for q in self.pairs for p in q]

    def arrays(self):
        xi = np.stack([a.features for a, _ in self.pairs])
        xj = np.stack([b.features for _, b in self.pairs])
        return xi, xj


def eligible_quartet_cells(buffers: Buffers) -> list[tuple[int, int, int, int]]:
    """All ordered (e, e', y, y') whose four cells are nonempty."""
    envs = sorted(buffers.domain)
    labels = sorted({y for (_, y) in buffers.cells})
    out = []
    for e in envs:
        for e2 in envs:
            if e == e2:
                continue
            for y in labels:
                for y2 in labels:
                    if y == y2:
                        continue
                    if all(buffers.cells.get(c) for c in ((e, y), (e, y2), (e2, y), (e2, y2))):
                        out.append((e, e2, y, y2))
    return out


def sample_quartet_batch(buffers: Buffers, Q: int, rng: np.random.Generator) -> QuartetBatch:
    """Q quartets; environment pair uniform over eligible pairs, then label pair, then points."""
    if Q < 1:
        raise ValueError("Q must be at least 1")
    if len(buffers.domain) < 2:
        raise QuartetInfeasible("fewer than two environments seen")
    options = eligible_quartet_cells(buffers)
    if not options:
        raise QuartetInfeasible("no environment pair has both labels buffered")
    env_pairs = sorted({(e, e2) for e, e2, _, _ in options})
    labels_for = {ep: [(y, y2) for e, e2, y, y2 in options if (e, e2) == ep] for ep in env_pairs}

    quartets = []
    for _ in range(Q):
        e, e2 = env_pairs[rng.integers(len(env_pairs))]
        choices = labels_for[(e, e2)]
        y, y2 = choices[rng.integers(len(choices))]
        quartet = []
        for cell in ((e, y), (e, y2), (e2, y), (e2, y2)):
            pool = buffers.cells[cell]
            quartet.append(pool[rng.integers(len(pool))])
        quartets.append(tuple(quartet))
    return QuartetBatch(tuple(quartets))


def sample_doublet_batch(buffers: Buffers, Q: int, rng: np.random.Generator) -> DoubletBatch:
    """Q same-environment pairs drawn with replacement."""
    if Q < 1:
        raise ValueError("Q must be at least 1")
    envs = buffers.buffered_environments()
    if not envs:
        raise SamplerError("task buffer is empty")
    pairs = []
    for _ in range(Q):
        pool = buffers.by_env[envs[rng.integers(len(envs))]]
        i, j = rng.integers(len(pool), size=2)
        pairs.append((pool[i], pool[j]))
    return DoubletBatch(tuple(pairs))
