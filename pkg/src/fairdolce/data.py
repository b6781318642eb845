"""Synthetic shifting streams and CSV ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from fairdolce.core import DataPoint, TaskStream, build_task_stream

DEFAULT_ANGLES = (0.0, 15.0, 30.0, 45.0, 60.0, 75.0)
DEFAULT_CORRELATIONS = (0.9, 0.7, 0.5, 0.3, 0.1, 0.05)


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class RotatedStreamConfig:
    n_per_env: int = 600
    angles: tuple[float, ...] = DEFAULT_ANGLES
    correlations: tuple[float, ...] = DEFAULT_CORRELATIONS
    feature_dim: int = 8
    tasks_per_env: int = 3
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        object.__setattr__(self, "correlations", tuple(float(c) for c in self.correlations))
        if len(self.angles) != len(self.correlations):
            raise ValueError("angles and correlations must have the same length")
        if not self.angles:
            raise ValueError("at least one environment is required")
        if any(not 0.0 <= c <= 1.0 for c in self.correlations):
            raise ValueError("correlations must lie in [0, 1]")
        if self.feature_dim < 2:
            raise ValueError("the rotation needs at least two feature dimensions")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValueError("label_noise must lie in [0, 0.5)")
        if self.n_per_env < self.tasks_per_env or self.tasks_per_env < 1:
            raise ValueError("need at least one point per task")


def rotation(angle_deg: float, d: int) -> np.ndarray:
    """d x d matrix rotating the first two coordinates by ``angle_deg``."""
    a = np.deg2rad(angle_deg)
    R = np.eye(d)
    R[:2, :2] = [[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]
    return R


def class_means(angle_deg: float, d: int) -> np.ndarray:
    """Rotated cluster means, row 0 for y=0 and row 1 for y=1."""
    base = np.zeros((2, d))
    base[0, :2] = -1.0
    base[1, :2] = 1.0
    return base @ rotation(angle_deg, d).T


def rotated_environment(
    k: int, angle: float, correlation: float, config: RotatedStreamConfig
) -> list[DataPoint]:
    rng = np.random.default_rng([config.seed, k])
    n, d = config.n_per_env, config.feature_dim
    cluster = rng.integers(0, 2, size=n)
    base = rng.standard_normal((n, d))
    base[:, :2] += np.where(cluster[:, None] == 1, 1.0, -1.0)
    X = base @ rotation(angle, d).T
    flip = rng.random(n) < config.label_noise
    y = np.where(flip, 1 - cluster, cluster)
    p_pos = np.where(y == 1, correlation, 1.0 - correlation)
    z = np.where(rng.random(n) < p_pos, 1, -1)
    return [DataPoint(X[i], int(z[i]), int(y[i]), k) for i in range(n)]


def gen_rotated_stream(config: RotatedStreamConfig | None = None) -> TaskStream:
    """Rotated Gaussian clusters with an environment-specific label/group bias.

    Environment k rotates the first two coordinates by ``angles[k]`` and
    draws z with P(z=+1 | y=1) = correlations[k], P(z=+1 | y=0) = 1 - correlations[k].
    """
    cfg = config or RotatedStreamConfig()
    points: list[DataPoint] = []
    for k, (angle, corr) in enumerate(zip(cfg.angles, cfg.correlations)):
        points.extend(rotated_environment(k, angle, corr, cfg))
    return build_task_stream(points, cfg.tasks_per_env, range(len(cfg.angles)))


@dataclass(frozen=True)
class FlippedCopiesConfig:
    base: tuple[DataPoint, ...]
    n_copies: int = 3
    flip_middle: bool = True
    tasks_per_copy: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "base", tuple(self.base))
        if self.n_copies < 1:
            raise ValueError("n_copies must be at least 1")


def gen_flipped_copies(config: FlippedCopiesConfig) -> TaskStream:
    """Concatenate copies of ``base``; the middle copy has its features negated."""
    if not config.base:
        raise ValueError("base dataset is empty")
    middle = config.n_copies // 2 if config.flip_middle and config.n_copies > 1 else None
    points = []
    for c in range(config.n_copies):
        sign = -1.0 if c == middle else 1.0
        points.extend(DataPoint(sign * p.features, p.sensitive, p.label, c) for p in config.base)
    return build_task_stream(points, config.tasks_per_copy, range(config.n_copies))


def synthetic_credit_base(n: int = 1000, d: int = 20, seed: int = 0) -> list[DataPoint]:
    """German-Credit-shaped tabular base set: d standardized features, gender-like z.

    Labels depend on a random linear score of the features; the sensitive
    attribute is tied to one feature so a classifier can pick up the bias.
    """
    rng = np.random.default_rng([seed, 7])
    X = rng.standard_normal((n, d))
    z = np.where(rng.random(n) < 0.5 + 0.25 * np.tanh(X[:, 0]), 1, -1)
    w = rng.standard_normal(d) / np.sqrt(d)
    logits = X @ w + 0.8 * z
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-2.0 * logits))).astype(int)
    return [DataPoint(X[i], int(z[i]), int(y[i]), 0) for i in range(n)]


# --------------------------------------------------------------------------
# CSV


@dataclass(frozen=True)
class CsvSchema:
    sensitive_col: str = "z"
    label_col: str = "y"
    env_col: str = "e"
    # token -> -1/+1; must name exactly the two values in the column
    sensitive_map: dict = field(default_factory=lambda: {"-1": -1, "1": 1})
    label_map: Optional[dict] = None
    feature_cols: Optional[tuple[str, ...]] = None


def _label(token: str, label_map: Optional[dict]) -> int:
    if label_map is not None:
        if token not in label_map:
            raise SchemaError(f"label value {token!r} not in the declared label map")
        return int(label_map[token])
    value = float(token)
    if value not in (0.0, 1.0):
        raise SchemaError(f"label value {token!r} is not binary")
    return int(value)


def load_csv(path: str | Path, schema: CsvSchema | None = None) -> list[DataPoint]:
    """Read a header-row CSV into DataPoints.

    Environment tokens become ids 0..k-1: numeric tokens in sorted order,
    anything else in order of first appearance.
    """
    schema = schema or CsvSchema()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(reader)
    roles = (schema.sensitive_col, schema.label_col, schema.env_col)
    missing = [c for c in roles if c not in header]
    if missing:
        raise SchemaError(f"missing declared columns: {missing}")
    feature_cols = list(schema.feature_cols) if schema.feature_cols else [c for c in header if c not in roles]
    if not feature_cols:
        raise SchemaError("no feature columns")
    missing = [c for c in feature_cols if c not in header]
    if missing:
        raise SchemaError(f"missing feature columns: {missing}")

    smap = {str(k): int(v) for k, v in schema.sensitive_map.items()}
    if len(smap) != 2 or sorted(smap.values()) != [-1, 1]:
        raise SchemaError("sensitive map must send exactly two tokens to -1 and +1")
    seen_sensitive = {r[schema.sensitive_col] for r in rows}
    if len(seen_sensitive) > 2:
        raise SchemaError(f"sensitive column has {len(seen_sensitive)} distinct values, expected 2")
    lmap = {str(k): int(v) for k, v in schema.label_map.items()} if schema.label_map else None
    if lmap is not None and sorted(set(lmap.values())) != [0, 1]:
        raise SchemaError("label map must send tokens to 0 and 1")

    env_tokens = list(dict.fromkeys(r[schema.env_col] for r in rows))
    try:
        env_ids = {tok: i for i, tok in enumerate(sorted(env_tokens, key=float))}
    except ValueError:
        env_ids = {tok: i for i, tok in enumerate(env_tokens)}

    points, bad = [], []
    for lineno, row in enumerate(rows, start=2):
        s_tok = row[schema.sensitive_col]
        if s_tok not in smap:
            raise SchemaError(f"row {lineno}: sensitive value {s_tok!r} not in the declared map")
        try:
            label = _label(row[schema.label_col], lmap)
        except (SchemaError, ValueError) as exc:
            raise SchemaError(f"row {lineno}: {exc}") from None
        try:
            feats = np.array([float(row[c]) for c in feature_cols], dtype=np.float64)
        except (TypeError, ValueError) as exc:
            bad.append((lineno, str(exc)))
            continue
        points.append(DataPoint(feats, smap[s_tok], label, env_ids[row[schema.env_col]]))
    if bad:
        detail = "; ".join(f"row {n}: {msg}" for n, msg in bad[:10])
        raise ValueError(f"{len(bad)} unparseable row(s): {detail}")
    return points


def write_csv(path: str | Path, points: Sequence[DataPoint]) -> None:
    """Write points as f0..f{d-1}, z, y, e with round-trippable floats."""
    if not points:
        raise ValueError("nothing to write")
    d = points[0].features.shape[0]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(d)] + ["z", "y", "e"])
        for p in points:
            w.writerow([repr(float(v)) for v in p.features] + [p.sensitive, p.label, p.environment])
