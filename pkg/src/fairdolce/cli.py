"""Experiment runner: config resolution, seed sweeps and report files.

Two subcommands::

    fairdolce run --source rotated --seeds 0 1 2 --out runs/demo
    fairdolce generate --source rotated --seed 0 --out stream.csv

``run`` writes ``metrics.csv``, ``summary.json`` and ``config.resolved``
into ``--out``.  Settings resolve as defaults, then ``--config`` (a JSON
file shaped like ``config.resolved``), then explicit flags.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import enum
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from fairdolce.core import TaskStream, build_task_stream
from fairdolce.data import (
    DEFAULT_ANGLES,
    DEFAULT_CORRELATIONS,
    CsvSchema,
    FlippedCopiesConfig,
    RotatedStreamConfig,
    gen_flipped_copies,
    gen_rotated_stream,
    load_csv,
    synthetic_credit_base,
    write_csv,
)
from fairdolce.evaluation import (
    ComparatorConfig,
    MetricsRecord,
    fit_comparators,
    final_window,
    path_length,
    regret_report,
)
from fairdolce.learner import LearnerConfig, run_learner

logger = logging.getLogger("fairdolce")

SOURCES = ("rotated", "flipped", "csv")
METRICS_COLUMNS = (
    "seed", "t", "env", "accuracy", "dp", "eo", "md", "g", "recon", "inv", "cls", "fair",
    "total", "lambda1", "lambda2", "lambda3", "cum_violation",
)
WINDOW_METRICS = ("accuracy", "dp", "eo", "md", "g_value")
REPORT_FILES = ("metrics.csv", "summary.json", "config.resolved")


class ConfigError(ValueError):
    """Invalid, conflicting or incomplete experiment configuration."""


@dataclass(frozen=True)
class RotatedSource:
    n_per_env: int = 600
    angles: tuple[float, ...] = DEFAULT_ANGLES
    correlations: tuple[float, ...] = DEFAULT_CORRELATIONS
    feature_dim: int = 8
    tasks_per_env: int = 3
    label_noise: float = 0.0

    def build(self, seed: int) -> TaskStream:
        return gen_rotated_stream(RotatedStreamConfig(seed=seed, **dataclasses.asdict(self)))


@dataclass(frozen=True)
class FlippedSource:
    """Copies of a synthetic German-Credit-shaped base set."""

    n_copies: int = 3
    flip_middle: bool = True
    tasks_per_copy: int = 2
    base_n: int = 1000
    base_d: int = 20

    def build(self, seed: int) -> TaskStream:
        base = synthetic_credit_base(self.base_n, self.base_d, seed)
        return gen_flipped_copies(FlippedCopiesConfig(
            base, self.n_copies, self.flip_middle, self.tasks_per_copy, seed))


@dataclass(frozen=True)
class CsvSource:
    path: Optional[str] = None
    sensitive_col: str = "z"
    label_col: str = "y"
    env_col: str = "e"
    sensitive_map: dict = field(default_factory=lambda: {"-1": -1, "1": 1})
    label_map: Optional[dict] = None
    tasks_per_env: int = 3

    def build(self, seed: int) -> TaskStream:
        if self.path is None:
            raise ConfigError("csv source needs a path")
        schema = CsvSchema(self.sensitive_col, self.label_col, self.env_col,
                           dict(self.sensitive_map), self.label_map)
        return build_task_stream(load_csv(self.path, schema), self.tasks_per_env)


# keys per section that a config file may not set; seeds come from the top level
_EXCLUDED = {"learner": ("seed",), "comparator": ("seed",)}
_OPTIONAL_TYPES = {"path": str, "label_map": dict}


@dataclass(frozen=True)
class ExperimentConfig:
    source: str = "rotated"
    rotated: RotatedSource = field(default_factory=RotatedSource)
    flipped: FlippedSource = field(default_factory=FlippedSource)
    csv: CsvSource = field(default_factory=CsvSource)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    comparator: ComparatorConfig = field(default_factory=ComparatorConfig)
    seeds: tuple[int, ...] = (0,)
    out: str = "runs/default"
    label: str = "run"

    def __post_init__(self) -> None:
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if self.source not in SOURCES:
            raise ConfigError(f"unknown source {self.source!r}; expected one of {SOURCES}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.source == "csv" and self.csv.path is None:
            raise ConfigError("missing required source: csv selected without a path")
        if self.source != "csv" and self.csv.path is not None:
            raise ConfigError(f"conflicting sources: generator {self.source!r} and csv {self.csv.path!r}")

    def active_source(self):
        return getattr(self, self.source)

    def to_dict(self) -> dict:
        def plain(obj, exclude=()):
            out = {}
            for f in fields(obj):
                if f.name in exclude:
                    continue
                v = getattr(obj, f.name)
                if isinstance(v, enum.Enum):
                    v = v.value
                elif isinstance(v, tuple):
                    v = list(v)
                elif isinstance(v, dict):
                    v = dict(v)
                out[f.name] = v
            return out

        return {
            "source": self.source,
            "rotated": plain(self.rotated),
            "flipped": plain(self.flipped),
            "csv": plain(self.csv),
            "learner": plain(self.learner, _EXCLUDED["learner"]),
            "comparator": plain(self.comparator, _EXCLUDED["comparator"]),
            "seeds": list(self.seeds),
            "out": self.out,
            "label": self.label,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        sections = {"rotated": RotatedSource, "flipped": FlippedSource, "csv": CsvSource,
                    "learner": LearnerConfig, "comparator": ComparatorConfig}
        top = {"source": str, "seeds": list, "out": str, "label": str}
        unknown = set(data) - set(sections) - set(top)
        if unknown:
            raise ConfigError(f"unknown key(s): {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        for key, typ in top.items():
            if key in data:
                kwargs[key] = _typed(data[key], typ, key)
        if "seeds" in kwargs:
            kwargs["seeds"] = tuple(_typed(s, int, "seeds[]") for s in kwargs["seeds"])
        for name, section_cls in sections.items():
            if name in data:
                kwargs[name] = _section(section_cls, data[name], name, _EXCLUDED.get(name, ()))
        try:
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def _typed(value, typ, where: str):
    if typ is bool:
        ok = isinstance(value, bool)
    elif typ is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif typ is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif typ is list:
        ok = isinstance(value, (list, tuple))
    else:
        ok = isinstance(value, typ)
    if not ok:
        raise ConfigError(f"type mismatch for {where}: expected {typ.__name__}, got {type(value).__name__}")
    return value


def _section(section_cls, data, where: str, exclude: Sequence[str] = ()):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be an object")
    defaults = {f.name: getattr(section_cls(), f.name) for f in fields(section_cls) if f.name not in exclude}
    unknown = set(data) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        default = defaults[key]
        label = f"{where}.{key}"
        if value is None and key in _OPTIONAL_TYPES:
            kwargs[key] = None
        elif key in _OPTIONAL_TYPES:
            kwargs[key] = _typed(value, _OPTIONAL_TYPES[key], label)
        elif isinstance(default, enum.Enum):
            kwargs[key] = _typed(value, str, label)
        elif isinstance(default, tuple):
            item = int if key == "hidden" else float
            kwargs[key] = tuple(_typed(v, item, label + "[]") for v in _typed(value, list, label))
        else:
            kwargs[key] = _typed(value, type(default), label)
    try:
        return section_cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


# --------------------------------------------------------------------------
# argument parsing

# flag dest -> (section, key); None section means top level
_FLAG_MAP = {
    "source": (None, "source"),
    "seeds": (None, "seeds"),
    "out": (None, "out"),
    "label": (None, "label"),
    "n_per_env": ("rotated", "n_per_env"),
    "angles": ("rotated", "angles"),
    "correlations": ("rotated", "correlations"),
    "feature_dim": ("rotated", "feature_dim"),
    "label_noise": ("rotated", "label_noise"),
    "n_copies": ("flipped", "n_copies"),
    "flip_middle": ("flipped", "flip_middle"),
    "tasks_per_copy": ("flipped", "tasks_per_copy"),
    "base_n": ("flipped", "base_n"),
    "base_d": ("flipped", "base_d"),
    "csv": ("csv", "path"),
    "sensitive_col": ("csv", "sensitive_col"),
    "label_col": ("csv", "label_col"),
    "env_col": ("csv", "env_col"),
    "sensitive_map": ("csv", "sensitive_map"),
    "label_map": ("csv", "label_map"),
    "Q": ("learner", "Q"),
    "inner_steps": ("learner", "inner_steps"),
    "eta1": ("learner", "eta1_0"),
    "eta2": ("learner", "eta2_0"),
    "schedule": ("learner", "schedule"),
    "fairness_mode": ("learner", "fairness_mode"),
    "ablation": ("learner", "ablation"),
    "latent_semantic": ("learner", "latent_semantic"),
    "latent_variation": ("learner", "latent_variation"),
    "hidden": ("learner", "hidden"),
    "comparator_steps": ("comparator", "steps"),
    "comparator_lr": ("comparator", "lr"),
    "comparator_recon_weight": ("comparator", "recon_weight"),
}
_GENERATOR_SECTIONS = ("rotated", "flipped")


def _parse_map(text: str) -> dict:
    """'a:-1,b:1' or a JSON object."""
    text = text.strip()
    if text.startswith("{"):
        try:
            out = json.loads(text)
        except json.JSONDecodeError as exc:
            raise argparse.ArgumentTypeError(f"bad JSON map: {exc}") from None
    else:
        out = {}
        for item in filter(None, text.split(",")):
            tok, sep, val = item.rpartition(":")
            if not sep or not tok:
                raise argparse.ArgumentTypeError(f"bad map entry {item!r}; use token:value")
            out[tok] = val
    try:
        return {str(k): int(v) for k, v in out.items()}
    except (TypeError, ValueError):
        raise argparse.ArgumentTypeError("map values must be integers") from None


def _add_source_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data source")
    g.add_argument("--source", choices=SOURCES)
    g.add_argument("--n-per-env", type=int)
    g.add_argument("--angles", type=float, nargs="+")
    g.add_argument("--correlations", type=float, nargs="+")
    g.add_argument("--feature-dim", type=int)
    g.add_argument("--tasks-per-env", type=int, help="tasks per environment (rotated and csv)")
    g.add_argument("--label-noise", type=float)
    g.add_argument("--n-copies", type=int)
    g.add_argument("--flip-middle", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--tasks-per-copy", type=int)
    g.add_argument("--base-n", type=int)
    g.add_argument("--base-d", type=int)
    g.add_argument("--csv", metavar="PATH")
    g.add_argument("--sensitive-col")
    g.add_argument("--label-col")
    g.add_argument("--env-col")
    g.add_argument("--sensitive-map", type=_parse_map, help="e.g. 'female:-1,male:1'")
    g.add_argument("--label-map", type=_parse_map, help="e.g. 'bad:0,good:1'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairdolce", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the online learner over one or more seeds")
    run.add_argument("--config", metavar="FILE", help="JSON config; explicit flags override it")
    _add_source_flags(run)
    lg = run.add_argument_group("learner")
    lg.add_argument("--Q", type=int)
    lg.add_argument("--inner-steps", type=int)
    lg.add_argument("--eta1", type=float)
    lg.add_argument("--eta2", type=float)
    lg.add_argument("--margins", type=float, nargs="*", metavar="EPS",
                    help="fair, recon and inv margins; an empty list keeps 0.05")
    lg.add_argument("--lambda-init", type=float, nargs=3, metavar=("L1", "L2", "L3"))
    lg.add_argument("--schedule", choices=("theory", "constant"))
    lg.add_argument("--fairness-mode", choices=("ddp", "deo"))
    lg.add_argument("--ablation", choices=("full", "no_disentangle", "no_fairness", "no_variation_encoder"))
    lg.add_argument("--latent-semantic", type=int)
    lg.add_argument("--latent-variation", type=int)
    lg.add_argument("--hidden", type=int, nargs="*")
    cg = run.add_argument_group("comparators")
    cg.add_argument("--comparator-steps", type=int)
    cg.add_argument("--comparator-lr", type=float)
    cg.add_argument("--comparator-recon-weight", type=float)
    og = run.add_argument_group("output")
    og.add_argument("--seeds", type=int, nargs="+")
    og.add_argument("--out")
    og.add_argument("--label")
    og.add_argument("--force", action="store_true", help="replace a non-empty output directory")

    gen = sub.add_parser("generate", help="write a generated stream as CSV")
    _add_source_flags(gen)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    return parser


def _load_file(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Merge defaults, the optional config file and explicit flags."""
    data = ExperimentConfig().to_dict()
    if getattr(args, "config", None):
        file_data = _load_file(args.config)
        ExperimentConfig.from_dict(file_data)  # reject unknown keys and bad types early
        for key, value in file_data.items():
            if isinstance(value, dict):
                data[key].update(value)
            else:
                data[key] = value

    given = {k: v for k, v in vars(args).items() if v is not None and k in _FLAG_MAP}
    if "csv" in given and given.get("source", "csv") != "csv":
        raise ConfigError("conflicting sources: --csv given with a generator --source")
    generator_flags = [k for k in given if _FLAG_MAP[k][0] in _GENERATOR_SECTIONS]
    source = given.get("source", "csv" if "csv" in given else data["source"])
    if source == "csv" and generator_flags:
        raise ConfigError(f"generator flags {generator_flags} conflict with the csv source")
    if "csv" in given:
        given["source"] = "csv"

    for key, value in given.items():
        section, name = _FLAG_MAP[key]
        if isinstance(value, tuple):
            value = list(value)
        if section is None:
            data[name] = value
        else:
            data[section][name] = value
    tpe = getattr(args, "tasks_per_env", None)
    if tpe is not None:
        data["csv" if source == "csv" else "rotated"]["tasks_per_env"] = tpe
    margins = getattr(args, "margins", None)
    if margins:
        if len(margins) != 3:
            raise ConfigError("--margins takes exactly three values (fair, recon, inv)")
        for name, v in zip(("margin_fair", "margin_recon", "margin_inv"), margins):
            data["learner"][name] = v
    lam = getattr(args, "lambda_init", None)
    if lam:
        for name, v in zip(("lambda_fair_init", "lambda_recon_init", "lambda_inv_init"), lam):
            data["learner"][name] = v
    return ExperimentConfig.from_dict(data)


def parse_config(argv: Sequence[str]) -> ExperimentConfig:
    """Resolve an ExperimentConfig from ``run`` arguments (without the subcommand)."""
    args = build_parser().parse_args(["run", *argv])
    return resolve_config(args)


# --------------------------------------------------------------------------
# running


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def metrics_row(seed: int, r: MetricsRecord) -> list[str]:
    values = (seed, r.timestep, r.environment, r.accuracy, r.dp, r.eo, r.md, r.g_value, r.recon,
              r.inv, r.cls, r.fair, r.total, r.lambda1, r.lambda2, r.lambda3, r.cumulative_violation)
    return [_cell(v) for v in values]


def window_summary(records: Sequence[MetricsRecord]) -> dict:
    """Final-window means with the number of non-missing values behind each."""
    window = final_window(records)
    out = {"window": [window[0].timestep, window[-1].timestep] if window else []}
    for key in WINDOW_METRICS:
        vals = [getattr(r, key) for r in window if getattr(r, key) is not None]
        out[key] = {"mean": float(np.mean(vals)) if vals else None, "count": len(vals)}
    return out


def run_seed(config: ExperimentConfig, seed: int) -> tuple[list[MetricsRecord], dict]:
    stream = config.active_source().build(seed)
    learner_cfg = replace(config.learner, seed=seed)
    state = run_learner(stream, learner_cfg)
    history = state.history

    comp_cfg = replace(config.comparator, seed=seed)
    dynamic = fit_comparators(stream, comp_cfg)
    static = fit_comparators(stream, comp_cfg, shared=True)
    report = regret_report(
        [r.task_loss for r in history],
        dynamic.losses(stream),
        [r.g_value for r in history],
        static.losses(stream),
    )
    summary = {
        "seed": seed,
        "T": len(stream),
        "environments": stream.environment_count,
        "stream_warnings": list(stream.warnings),
        "final_window": window_summary(history),
        "fair_sdr": report.fair_sdr,
        "static_regret": report.static_regret,
        "path_length": path_length(dynamic),
        "cumulative_violation": report.cumulative_violation,
        "final_lambda": [state.duals.lambda_fair, state.duals.lambda_recon, state.duals.lambda_inv],
    }
    return history, summary


def _mean_over(items: list[dict], path: Sequence[str]) -> dict:
    vals = []
    for item in items:
        v = item
        for key in path:
            v = v[key]
        if v is not None:
            vals.append(v)
    return {"mean": float(np.mean(vals)) if vals else None, "count": len(vals)}


def aggregate(per_seed: list[dict]) -> dict:
    out = {"final_window": {k: _mean_over(per_seed, ("final_window", k, "mean")) for k in WINDOW_METRICS}}
    for key in ("fair_sdr", "static_regret", "path_length", "cumulative_violation"):
        out[key] = _mean_over(per_seed, (key,))
    return out


def _write_reports(directory: Path, config: ExperimentConfig, rows: list[list[str]], summary: dict) -> None:
    with (directory / "metrics.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        w.writerows(rows)
    (directory / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")
    (directory / "config.resolved").write_text(config.dumps(), encoding="utf-8")


def run_experiment(config: ExperimentConfig, force: bool = False) -> Path:
    """Run every seed and publish all three report files in one rename."""
    out = Path(config.out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())) and not force:
        raise FileExistsError(f"output {out} exists and is not empty (use --force)")
    out.parent.mkdir(parents=True, exist_ok=True)

    rows: list[list[str]] = []
    per_seed = []
    for seed in config.seeds:
        logger.info("seed %d: %s stream, ablation=%s", seed, config.source, config.learner.ablation.value)
        history, seed_summary = run_seed(config, seed)
        rows.extend(metrics_row(seed, r) for r in history)
        per_seed.append(seed_summary)
    summary = {
        "label": config.label,
        "seeds": list(config.seeds),
        "per_seed": per_seed,
        "mean": aggregate(per_seed),
        "config": config.to_dict(),
    }

    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        _write_reports(tmp, config, rows, summary)
        if out.exists():
            if out.is_dir():
                shutil.rmtree(out)
            else:
                out.unlink()
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out


def generate(args: argparse.Namespace) -> Path:
    cfg = resolve_config(argparse.Namespace(**{k: v for k, v in vars(args).items() if k != "out"}))
    if cfg.source == "csv":
        raise ConfigError("generate needs a generator source (rotated or flipped)")
    stream = cfg.active_source().build(args.seed)
    write_csv(args.out, stream.points())
    return Path(args.out)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    try:
        if args.command == "generate":
            path = generate(args)
        else:
            path = run_experiment(resolve_config(args), force=args.force)
    except ConfigError as exc:
        print(f"fairdolce: config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, FloatingPointError, RuntimeError) as exc:
        print(f"fairdolce: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
