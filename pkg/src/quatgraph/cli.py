"""Command-line entry point: ``quatgraph {train,count-params,export-embeddings,gradcheck}``.

Exit codes: 0 success, 1 training failure or failed gradient check,
2 invalid configuration, 3 dataset error.

Relative dataset paths resolve against ``$QUATGRAPH_DATA`` (default ``./data``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .autograd import NonFiniteError, Tape, check_gradients
from .datasets import FEATURE_MODES, FormatError, load_citation, load_text, load_tu
from .graph import Graph, GraphBatch
from .layers import ConfigError, Model, ModelConfig, load_checkpoint, save_checkpoint
from .qalg import DimensionError, DomainError
from .trainer import TrainConfig, export_embeddings, run_graph_task, run_node_task, run_text_task

SCHEMA = "quatgraph.run/1"
DATA_ENV = "QUATGRAPH_DATA"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3
FORMATS = ("tu", "citation", "text")
GRADCHECK_TOL = 1e-4


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    path: str | None = None
    format: str = "tu"
    feature_mode: str = "auto"
    window: int = 20
    # only consulted by count-params when no path is given
    feature_dim: int | None = None
    num_classes: int | None = None

    def __post_init__(self):
        if self.format not in FORMATS:
            raise ConfigError(f"dataset.format must be one of {FORMATS}")
        if self.feature_mode not in FEATURE_MODES:
            raise ConfigError(f"dataset.feature_mode must be one of {FEATURE_MODES}")
        if self.window < 1:
            raise ConfigError("dataset.window must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    task: str
    dataset: DatasetSpec
    model: ModelConfig
    train: TrainConfig
    output_dir: str = "runs"
    schema: str = SCHEMA

    def to_dict(self) -> dict:
        model = asdict(self.model)
        model.pop("task")
        train = asdict(self.train)
        train.pop("task")
        train["fractions"] = list(train["fractions"])
        return {"schema": self.schema, "task": self.task, "dataset": asdict(self.dataset), "model": model,
                "train": train, "output_dir": self.output_dir}


def _section(cls, raw, name, exclude=()):
    if not isinstance(raw, dict):
        raise ConfigError(f"{name} must be an object")
    allowed = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(unknown)}")
    return raw


def parse_config(raw: dict) -> RunConfig:
    """Validate a raw JSON object; raises :class:`ConfigError` on any problem."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    top = {"schema", "task", "dataset", "model", "train", "output_dir"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    if raw.get("schema") != SCHEMA:
        raise ConfigError(f"schema must be {SCHEMA!r}, got {raw.get('schema')!r}")
    task = raw.get("task")
    if task not in ("graph", "node", "text"):
        raise ConfigError(f"task must be graph, node or text, got {task!r}")
    try:
        dataset = DatasetSpec(**_section(DatasetSpec, raw.get("dataset", {}), "dataset"))
        model = ModelConfig(task="graph" if task == "graph" else "node",
                            **_section(ModelConfig, raw.get("model", {}), "model", exclude=("task",)))
        train = TrainConfig(task=task, **_section(TrainConfig, raw.get("train", {}), "train", exclude=("task",)))
    except TypeError as exc:  # wrong value types reaching dataclass validation
        raise ConfigError(str(exc)) from exc
    output_dir = raw.get("output_dir", "runs")
    if not isinstance(output_dir, str):
        raise ConfigError("output_dir must be a string")
    return RunConfig(task, dataset, model, train, output_dir)


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``a.b=value`` strings; values are parsed as JSON, falling back to plain strings."""
    raw = json.loads(json.dumps(raw))
    for item in overrides or ():
        key, sep, text = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override must look like key.path=value, got {item!r}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot descend into {part!r} in override {item!r}")
        node[parts[-1]] = value
    return raw


def load_config(path, overrides=()) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(apply_overrides(raw, overrides))


def resolve_data_path(path: str) -> Path:
    p = Path(path)
    if p.is_absolute():
        return p
    return Path(os.environ.get(DATA_ENV, "data")) / p


def load_dataset(spec: DatasetSpec):
    if spec.path is None:
        raise DatasetError("dataset.path is not set")
    path = resolve_data_path(spec.path)
    try:
        if spec.format == "tu":
            return load_tu(path, feature_mode=spec.feature_mode)
        if spec.format == "citation":
            return load_citation(path)
        return load_text(path, window=spec.window)
    except (FileNotFoundError, FormatError, DomainError, DimensionError) as exc:
        raise DatasetError(f"cannot load dataset from {path}: {exc}") from exc


def _check_task_format(cfg: RunConfig) -> None:
    expected = {"graph": "tu", "node": "citation", "text": "text"}[cfg.task]
    if cfg.dataset.format != expected:
        raise ConfigError(f"task {cfg.task!r} needs dataset.format {expected!r}")


def _dims(dataset) -> tuple[int, int]:
    return dataset.feature_dim, dataset.num_classes


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: RunConfig, jobs: int = 1, out=None) -> int:
    out = out or sys.stdout
    _check_task_format(cfg)
    dataset = load_dataset(cfg.dataset)
    runner = {"graph": run_graph_task, "node": run_node_task, "text": run_text_task}[cfg.task]
    metrics, models = runner(dataset, cfg.model, cfg.train, jobs=jobs, return_models=True)
    metrics.config = cfg.to_dict()
    outdir = Path(cfg.output_dir)
    (outdir / "checkpoints").mkdir(parents=True, exist_ok=True)
    metrics.write(outdir / "metrics.json")
    for k, model in enumerate(models):
        save_checkpoint(model, outdir / "checkpoints" / f"fold{k}.ckpt")
    epoch = f" (epoch {metrics.selected_epoch})" if metrics.selected_epoch else ""
    print(f"accuracy {100 * metrics.mean:.2f} +- {100 * metrics.std:.2f}{epoch}; "
          f"wrote {outdir / 'metrics.json'}", file=out)
    return EXIT_OK


def cmd_count_params(cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    if cfg.dataset.feature_dim is not None and cfg.dataset.num_classes is not None:
        in_dim, num_classes = cfg.dataset.feature_dim, cfg.dataset.num_classes
    else:
        in_dim, num_classes = _dims(load_dataset(cfg.dataset))
    print(Model(cfg.model, in_dim, num_classes, seed=cfg.train.seed).param_count(), file=out)
    return EXIT_OK


def cmd_export_embeddings(cfg: RunConfig, checkpoint, layer: int, out_path, out=None) -> int:
    out = out or sys.stdout
    _check_task_format(cfg)
    dataset = load_dataset(cfg.dataset)
    try:
        model = load_checkpoint(checkpoint)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read checkpoint {checkpoint}: {exc}") from exc
    if model.in_dim != dataset.feature_dim:
        raise ConfigError(f"checkpoint expects {model.in_dim} input features, dataset has {dataset.feature_dim}")
    n = export_embeddings(model, dataset, layer, out_path)
    print(f"wrote {n} rows to {out_path}", file=out)
    return EXIT_OK


def miniature_problem(model_cfg: ModelConfig, seed: int = 0, num_nodes: int = 6, in_dim: int = 5,
                      num_classes: int = 3, num_graphs: int = 3):
    """A small random model and input of the configured kind for gradient checking."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(**{**asdict(model_cfg), "hidden": min(model_cfg.hidden, 3), "dropout": 0.0})

    def random_graph(label=None, labels=None):
        pairs = np.array([(a, b) for a in range(num_nodes) for b in range(a + 1, num_nodes)])
        edges = pairs[rng.random(len(pairs)) < 0.5]
        # small inputs keep the softmax away from saturation, where gradients sink below FD noise
        return Graph(num_nodes, edges, 0.3 * rng.normal(size=(num_nodes, in_dim)), label=label, labels=labels)

    if cfg.task == "graph":
        data = GraphBatch.from_graphs([random_graph(label=c % num_classes) for c in range(num_graphs)])
    else:
        data = random_graph(labels=np.arange(num_nodes) % num_classes)
    model = Model(cfg, in_dim, num_classes, seed=seed)
    # Conditioning for finite differences: nonzero biases keep pre-activations
    # off the ReLU kink, and logits of order one keep the softmax unsaturated.
    for name, value in model.params.items():
        if name.endswith(".bias"):
            value[...] = 0.1 * rng.normal(size=value.shape)
    scale = np.abs(_logits(model, data)).max()
    if scale > 1.0:
        model.params["head.weight"] /= scale
    return model, data


def _logits(model: Model, data) -> np.ndarray:
    tape = Tape()
    logits, _ = model.forward(tape, data)
    return tape.value(logits)


def cmd_gradcheck(cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    model, data = miniature_problem(cfg.model, seed=cfg.train.seed)
    report = check_gradients(model, data)
    ok = report.passed(GRADCHECK_TOL)
    print(f"max relative error {report.max_rel_error:.3e} over {report.n_checked} entries "
          f"(epsilon {report.epsilon:g}): {'PASS' if ok else 'FAIL'}", file=out)
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quatgraph", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="run config JSON (see presets/)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key by dotted path, e.g. train.lr=0.001")
        return p

    p = add("train", "train and evaluate; writes metrics.json and checkpoints")
    p.add_argument("--jobs", type=int, default=1, help="parallel fold/split workers")
    add("count-params", "print the number of learnable parameters")
    p = add("export-embeddings", "write node embeddings of one layer as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", type=int, default=1, help="1-based layer index")
    p.add_argument("--out", required=True, help="output CSV path")
    add("gradcheck", "finite-difference check of a miniature configured model")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "train":
            if args.jobs < 1:
                raise ConfigError("--jobs must be >= 1")
            return cmd_train(cfg, jobs=args.jobs)
        if args.command == "count-params":
            return cmd_count_params(cfg)
        if args.command == "export-embeddings":
            return cmd_export_embeddings(cfg, args.checkpoint, args.layer, args.out)
        return cmd_gradcheck(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
