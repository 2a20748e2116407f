"""Config-driven command line: prepare, train, evaluate, sweep, analyze.

Experiments are described by a small INI file with [data], [model], [game],
and [eval] sections; every key has a default, unknown sections or keys are
errors (with line numbers), and the fully resolved configuration is embedded
in every output artifact so a run can be reproduced from its outputs alone.

Commands compose through files: ``prepare`` writes the windowed dataset
cache, ``train`` reads it and writes a model plus a training log,
``evaluate`` scores a model, ``sweep`` repeats train+evaluate across a
lambda grid into one summary table, and ``analyze`` solves the
unconstrained pointwise game on a raw series.  The output root comes from
``--output-dir``, then the ``SEQGAME_OUTPUT_ROOT`` environment variable,
then the [eval] section, then the current directory.

Model input width, coefficient-head order, and parameterization are not
separate knobs: they follow the data channels and the [game] section.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from dataclasses import dataclass, fields, replace

import numpy as np

from .data import (
    DataError,
    DatasetBundle,
    RawSeries,
    SynthSpec,
    load_csv_series,
    load_dataset,
    pct_change,
    save_dataset,
    synth_generate,
    window_split_many,
)
from .eval import (
    evaluate,
    fit_ar_baseline,
    write_report,
    write_step_table,
)
from .game import (
    DivergenceError,
    GameConfig,
    nonparametric_fixed_point,
    train,
)
from .numerics import SingularMatrixError
from .predictor import (
    ModelFormatError,
    PredictorConfig,
    SequencePredictor,
    load_model,
    save_model,
)

__all__ = [
    "ConfigError",
    "DataConfig",
    "EvalConfig",
    "ExperimentConfig",
    "ModelConfig",
    "build_bundle",
    "build_predictor",
    "cmd_analyze_fixed_point",
    "cmd_evaluate",
    "cmd_prepare",
    "cmd_sweep",
    "cmd_train",
    "load_config",
    "main",
    "parse_config",
    "resolved_text",
]

OUTPUT_ROOT_ENV = "SEQGAME_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Bad experiment configuration (unknown key, bad value, bad combination)."""


@dataclass(frozen=True)
class DataConfig:
    source: str = "synth"
    kind: str = "sinusoid_mix"
    csv_path: str = ""
    csv_channels: tuple[str, ...] = ()
    group_column: str = ""
    use_pct_change: bool = False
    channels: int = 1
    length: int = 1000
    periods: tuple[float, ...] = (5.0, 20.0)
    breakpoints: tuple[int, ...] = ()
    ar_coeffs: tuple[float, ...] = ()
    ar_intercept: tuple[float, ...] = ()
    ar_init: tuple[float, ...] = ()
    noise_sd: float = 0.0
    input_len: int = 30
    output_len: int = 7
    stride: int = 0  # 0 means one window length (disjoint windows)
    train_fraction: float = 0.85
    val_fraction: float = 0.05
    test_fraction: float = 0.10
    seed: int = 0

    @property
    def n_channels(self) -> int:
        return len(self.csv_channels) if self.source == "csv" else self.channels


@dataclass(frozen=True)
class ModelConfig:
    conv_width: int = 3
    conv_filters: int = 16
    hidden: int = 32
    dense1: int = 32
    dense2: int = 32
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    ar_baseline: bool = False
    output_dir: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig
    model: ModelConfig
    game: GameConfig
    eval: EvalConfig

    def with_master_seed(self, seed: int) -> "ExperimentConfig":
        """Derive all three section seeds from one master seed."""
        return ExperimentConfig(
            data=replace(self.data, seed=seed),
            model=replace(self.model, seed=seed + 1),
            game=replace(self.game, seed=seed + 2),
            eval=self.eval,
        )


# ---------------------------------------------------------------------------
# parsing


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: '{raw}'")


def _parse_floats(raw: str) -> tuple[float, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(float(p) for p in raw.split(","))


def _parse_ints(raw: str) -> tuple[int, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(int(p) for p in raw.split(","))


def _parse_strs(raw: str) -> tuple[str, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(p.strip() for p in raw.split(",") if p.strip())


_PARSERS = {
    "str": lambda raw: raw.strip(),
    "int": lambda raw: int(raw),
    "float": lambda raw: float(raw),
    "bool": _parse_bool,
    "floats": _parse_floats,
    "ints": _parse_ints,
    "strs": _parse_strs,
}

# section -> key -> (type, choices or None); INI key 'pct_change' maps onto
# DataConfig.use_pct_change, 'lambda' onto GameConfig.lam
_SCHEMA: dict[str, dict[str, tuple[str, tuple | None]]] = {
    "data": {
        "source": ("str", ("synth", "csv")),
        "kind": ("str", ("sinusoid_mix", "piecewise_linear", "ar_process")),
        "csv_path": ("str", None),
        "csv_channels": ("strs", None),
        "group_column": ("str", None),
        "pct_change": ("bool", None),
        "channels": ("int", None),
        "length": ("int", None),
        "periods": ("floats", None),
        "breakpoints": ("ints", None),
        "ar_coeffs": ("floats", None),
        "ar_intercept": ("floats", None),
        "ar_init": ("floats", None),
        "noise_sd": ("float", None),
        "input_len": ("int", None),
        "output_len": ("int", None),
        "stride": ("int", None),
        "train_fraction": ("float", None),
        "val_fraction": ("float", None),
        "test_fraction": ("float", None),
        "seed": ("int", None),
    },
    "model": {
        "conv_width": ("int", None),
        "conv_filters": ("int", None),
        "hidden": ("int", None),
        "dense1": ("int", None),
        "dense2": ("int", None),
        "seed": ("int", None),
    },
    "game": {
        "lambda": ("float", None),
        "epsilon": ("int", None),
        "markov_order": ("int", None),
        "ridge_alpha": ("float", None),
        "mode": ("str", ("asymmetric", "symmetric")),
        "parameterization": ("str", ("implicit", "explicit")),
        "reg_fraction": ("float", None),
        "optimizer": ("str", ("adam", "sgd")),
        "step_size": ("float", None),
        "epochs": ("int", None),
        "batch_size": ("int", None),
        "checkpoint_every": ("int", None),
        "seed": ("int", None),
    },
    "eval": {
        "split": ("str", ("train", "val", "test")),
        "ar_baseline": ("bool", None),
        "output_dir": ("str", None),
    },
}

_KEY_TO_FIELD = {
    ("data", "pct_change"): "use_pct_change",
    ("game", "lambda"): "lam",
}
_FIELD_TO_KEY = {v: k for (_, k), v in _KEY_TO_FIELD.items()}


def _key_line(lines: list[str], section: str, key: str) -> int | None:
    current = None
    for i, line in enumerate(lines, 1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
        elif current == section and stripped and stripped[0] not in "#;":
            head = stripped.split("=", 1)[0].split(":", 1)[0].strip()
            if head == key:
                return i
    return None


def _section_line(lines: list[str], section: str) -> int | None:
    for i, line in enumerate(lines, 1):
        if line.strip() == f"[{section}]":
            return i
    return None


def parse_config(text: str, origin: str = "<config>") -> ExperimentConfig:
    """Parse INI text against the schema; any unknown or bad value raises."""
    parser = configparser.ConfigParser(
        interpolation=None, strict=True, empty_lines_in_values=False
    )
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as err:
        raise ConfigError(f"{origin}: {err}") from None
    lines = text.splitlines()

    def where(section, key=None):
        line = (
            _key_line(lines, section, key) if key else _section_line(lines, section)
        )
        return f"{origin}:{line}" if line else origin

    values: dict[str, dict[str, object]] = {s: {} for s in _SCHEMA}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{where(section)}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(
                    f"{where(section, key)}: unknown key '{key}' in [{section}]"
                )
            type_name, choices = _SCHEMA[section][key]
            try:
                value = _PARSERS[type_name](raw)
            except ValueError as err:
                raise ConfigError(
                    f"{where(section, key)}: bad value for '{key}': {err}"
                ) from None
            if choices is not None and value not in choices:
                raise ConfigError(
                    f"{where(section, key)}: '{key}' must be one of {choices}, "
                    f"got '{value}'"
                )
            values[section][_KEY_TO_FIELD.get((section, key), key)] = value

    try:
        cfg = ExperimentConfig(
            data=DataConfig(**values["data"]),
            model=ModelConfig(**values["model"]),
            game=GameConfig(**values["game"]),
            eval=EvalConfig(**values["eval"]),
        )
    except ValueError as err:
        raise ConfigError(f"{origin}: {err}") from None
    _validate_combination(cfg, origin)
    return cfg


def _validate_combination(cfg: ExperimentConfig, origin: str):
    d = cfg.data
    if d.source == "csv":
        if not d.csv_path:
            raise ConfigError(f"{origin}: [data] source=csv requires csv_path")
        if not d.csv_channels:
            raise ConfigError(f"{origin}: [data] source=csv requires csv_channels")
    if d.source == "synth" and d.kind == "ar_process" and not d.ar_coeffs:
        raise ConfigError(f"{origin}: [data] kind=ar_process requires ar_coeffs")
    fracs = (d.train_fraction, d.val_fraction, d.test_fraction)
    if any(f < 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
        raise ConfigError(
            f"{origin}: [data] fractions must be non-negative and sum to 1, got {fracs}"
        )
    if d.input_len < 1 or d.output_len < 1:
        raise ConfigError(f"{origin}: [data] input_len and output_len must be >= 1")
    if d.stride < 0:
        raise ConfigError(f"{origin}: [data] stride must be >= 0 (0 = window length)")
    if d.input_len + d.output_len <= cfg.game.markov_order + 1:
        raise ConfigError(
            f"{origin}: window of {d.input_len + d.output_len} rows is too short "
            f"for markov_order {cfg.game.markov_order}"
        )


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ConfigError(f"no config file at {path}") from None
    return parse_config(text, origin=path)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolved_text(cfg: ExperimentConfig) -> str:
    """Canonical INI echo of every resolved value, in schema order."""
    sections = {
        "data": cfg.data,
        "model": cfg.model,
        "game": cfg.game,
        "eval": cfg.eval,
    }
    out = []
    for name, obj in sections.items():
        out.append(f"[{name}]")
        for f in fields(obj):
            key = _FIELD_TO_KEY.get(f.name, f.name)
            out.append(f"{key} = {_format_value(getattr(obj, f.name))}")
        out.append("")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# builders


def _synth_series(d: DataConfig) -> RawSeries:
    spec = SynthSpec(
        kind=d.kind,
        channels=d.channels,
        length=d.length,
        periods=d.periods,
        breakpoints=d.breakpoints,
        ar_coeffs=d.ar_coeffs,
        ar_intercept=d.ar_intercept,
        ar_init=d.ar_init,
        noise_sd=d.noise_sd,
        seed=d.seed,
    )
    return synth_generate(spec)


def build_bundle(cfg: ExperimentConfig) -> DatasetBundle:
    """Materialize the [data] section into train/val/test windows."""
    d = cfg.data
    if d.source == "csv":
        series_list = load_csv_series(
            d.csv_path, list(d.csv_channels), d.group_column or None
        )
    else:
        series_list = [_synth_series(d)]
    if d.use_pct_change:
        series_list = [pct_change(s) for s in series_list]
    return window_split_many(
        series_list,
        d.input_len,
        d.output_len,
        stride=d.stride or None,
        fractions=(d.train_fraction, d.val_fraction, d.test_fraction),
        seed=d.seed,
    )


def build_predictor(cfg: ExperimentConfig) -> SequencePredictor:
    """Model sized from [model], wired to the data channels and the game."""
    pc = PredictorConfig(
        channels=cfg.data.n_channels,
        conv_width=cfg.model.conv_width,
        conv_filters=cfg.model.conv_filters,
        hidden=cfg.model.hidden,
        dense1=cfg.model.dense1,
        dense2=cfg.model.dense2,
        parameterization=cfg.game.parameterization,
        ar_order=cfg.game.markov_order,
        seed=cfg.model.seed,
    )
    return SequencePredictor(pc)


# ---------------------------------------------------------------------------
# commands


def _load_experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_master_seed(args.seed)
    return cfg


def _output_root(args, cfg: ExperimentConfig) -> str:
    root = (
        getattr(args, "output_dir", None)
        or os.environ.get(OUTPUT_ROOT_ENV)
        or cfg.eval.output_dir
        or "."
    )
    os.makedirs(root, exist_ok=True)
    return root


def _echo_lines(cfg: ExperimentConfig) -> list[str]:
    return resolved_text(cfg).splitlines()


def _dataset_dir(root: str) -> str:
    return os.path.join(root, "dataset")


def _load_cache(root: str) -> DatasetBundle:
    directory = _dataset_dir(root)
    if not os.path.exists(os.path.join(directory, "manifest.json")):
        raise DataError(
            f"no dataset cache under {directory}; run the prepare command first"
        )
    return load_dataset(directory)


def cmd_prepare(args) -> int:
    """Build the windowed dataset cache described by the config."""
    cfg = _load_experiment(args)
    root = _output_root(args, cfg)
    bundle = build_bundle(cfg)
    save_dataset(bundle, _dataset_dir(root), extra={"config": resolved_text(cfg)})
    print(
        f"dataset cache written to {_dataset_dir(root)} "
        f"(train={len(bundle.train)} val={len(bundle.val)} test={len(bundle.test)})"
    )
    return 0


def cmd_train(args) -> int:
    """Train on the prepared cache; write the model and the epoch log."""
    cfg = _load_experiment(args)
    root = _output_root(args, cfg)
    bundle = _load_cache(root)
    model = build_predictor(cfg)
    checkpoints = (
        os.path.join(root, "checkpoints") if cfg.game.checkpoint_every > 0 else None
    )
    model, log = train(model, bundle, cfg.game, checkpoint_dir=checkpoints)
    model_path = os.path.join(root, "trained.model")
    save_model(model, model_path, extra={"config": resolved_text(cfg)})
    log.write_csv(os.path.join(root, "train_log.csv"), comments=_echo_lines(cfg))
    final = log.records[-1]
    print(f"model written to {model_path}")
    print(f"final validation error: {final.val_error!r}")
    return 0


def _evaluate_into(cfg, bundle: DatasetBundle, out_dir: str, model, tag: str = ""):
    split = bundle.split(cfg.eval.split)
    report = evaluate(model, split, cfg.game, config_echo=resolved_text(cfg))
    suffix = f"_{tag}" if tag else ""
    write_report(report, os.path.join(out_dir, f"eval_report{suffix}.json"))
    write_step_table(
        report,
        os.path.join(out_dir, f"eval_steps{suffix}.csv"),
        comments=_echo_lines(cfg),
    )
    return report


def cmd_evaluate(args) -> int:
    """Score a trained model (or the classical AR baseline) on one split."""
    cfg = _load_experiment(args)
    root = _output_root(args, cfg)
    bundle = _load_cache(root)
    use_baseline = cfg.eval.ar_baseline or getattr(args, "ar_baseline", False)
    if use_baseline:
        model = fit_ar_baseline(
            bundle.train.subsequences, cfg.game.markov_order, cfg.game.ridge_alpha
        )
        report = _evaluate_into(cfg, bundle, root, model, tag="ar_baseline")
    else:
        model_path = getattr(args, "model", None) or os.path.join(root, "trained.model")
        model, _ = load_model(model_path)
        report = _evaluate_into(cfg, bundle, root, model)
    print(f"error: {report.error_rmse!r}")
    print(f"deviation: {report.deviation_rmse!r}")
    print(f"tv: {report.tv!r}")
    return 0


def _format_lambda(value: float) -> str:
    return f"{value:g}"


def cmd_sweep(args) -> int:
    """Train and evaluate once per lambda; write one summary table.

    Per-cell failures leave FAILED markers in the summary and a nonzero exit,
    but never discard the completed cells.
    """
    cfg = _load_experiment(args)
    root = _output_root(args, cfg)
    try:
        lambdas = [float(v) for v in args.lambdas.split(",") if v.strip()]
    except ValueError as err:
        raise ConfigError(f"bad --lambdas value: {err}") from None
    if not lambdas:
        raise ConfigError("--lambdas must name at least one value")

    bundle = _load_cache(root)
    results: dict[float, "object"] = {}
    failures: list[str] = []
    for lam in lambdas:
        cell_cfg = ExperimentConfig(
            data=cfg.data,
            model=cfg.model,
            game=replace(cfg.game, lam=lam),
            eval=cfg.eval,
        )
        cell_root = os.path.join(root, "sweep", f"lam_{_format_lambda(lam)}")
        os.makedirs(cell_root, exist_ok=True)
        try:
            model = build_predictor(cell_cfg)
            model, log = train(model, bundle, cell_cfg.game)
            save_model(
                model,
                os.path.join(cell_root, "trained.model"),
                extra={"config": resolved_text(cell_cfg)},
            )
            log.write_csv(
                os.path.join(cell_root, "train_log.csv"),
                comments=_echo_lines(cell_cfg),
            )
            results[lam] = _evaluate_into(cell_cfg, bundle, cell_root, model)
        except (DataError, DivergenceError, ValueError, OSError) as err:
            failures.append(f"lambda={_format_lambda(lam)}: {err}")
            print(f"sweep cell lambda={_format_lambda(lam)} failed: {err}", file=sys.stderr)

    header = "metric," + ",".join(f"lam={_format_lambda(v)}" for v in lambdas)
    rows = {"error": [], "deviation": [], "tv": []}
    for lam in lambdas:
        report = results.get(lam)
        if report is None:
            for cells in rows.values():
                cells.append("FAILED")
        else:
            rows["error"].append(repr(report.error_rmse))
            rows["deviation"].append(repr(report.deviation_rmse))
            rows["tv"].append(repr(report.tv))
    lines = [f"# {c}" for c in _echo_lines(cfg)]
    lines.append(header)
    for metric in ("error", "deviation", "tv"):
        lines.append(",".join([metric] + rows[metric]))
    summary_path = os.path.join(root, "sweep", "summary.csv")
    payload = "\n".join(lines) + "\n"
    tmp = summary_path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(payload)
    os.replace(tmp, summary_path)

    print(f"sweep summary written to {summary_path}")
    for line in lines[len(_echo_lines(cfg)) :]:
        print(line)
    return 1 if failures else 0


def _read_series_file(path: str) -> np.ndarray:
    """One float per line; blank lines and #-comments are skipped."""
    try:
        with open(path) as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise DataError(f"no series file at {path}") from None
    values = []
    for i, line in enumerate(raw.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        try:
            values.append(float(stripped))
        except ValueError:
            raise DataError(f"{path}:{i}: not a number: '{stripped}'") from None
    if len(values) < 1:
        raise DataError(f"{path}: no values found")
    return np.asarray(values, dtype=np.float64)


def cmd_analyze_fixed_point(args) -> int:
    """Solve the unconstrained pointwise game on a 1-channel series file."""
    y = _read_series_file(args.series)
    f = nonparametric_fixed_point(y, args.epsilon, args.lam, args.mode)

    from .game import averaging_operator, _containing_average

    k = averaging_operator(len(y), args.epsilon)
    smooth = k if args.mode == "asymmetric" else _containing_average(len(y), args.epsilon) @ k
    residual = float(np.abs((1.0 + args.lam) * f - args.lam * (smooth @ f) - y).max())

    out_path = args.output or os.path.join(
        os.environ.get(OUTPUT_ROOT_ENV, "."), "fixed_point.csv"
    )
    lines = [
        f"# mode = {args.mode}",
        f"# epsilon = {args.epsilon}",
        f"# lambda = {repr(args.lam)}",
        f"# residual = {repr(residual)}",
        "index,input,solution",
    ]
    for i, (yi, fi) in enumerate(zip(y, f)):
        lines.append(f"{i},{float(yi)!r},{float(fi)!r}")
    payload = "\n".join(lines) + "\n"
    tmp = out_path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(payload)
    os.replace(tmp, out_path)
    print(f"solution written to {out_path}")
    print(f"stationarity residual: {residual!r}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", required=True, help="experiment INI file")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--output-dir", default=None, help="artifact root directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqgame",
        description="Train and evaluate sequence predictors that stay locally "
        "faithful to autoregressive explainers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build the windowed dataset cache")
    _add_common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on the prepared cache")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a model on one split")
    _add_common(p)
    p.add_argument("--model", default=None, help="model file (default: <root>/trained.model)")
    p.add_argument(
        "--ar-baseline",
        action="store_true",
        help="score the classical AR fit instead of a trained model",
    )
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="train+evaluate across a lambda grid")
    _add_common(p)
    p.add_argument(
        "--lambdas",
        default="0,0.1,1,10",
        help="comma-separated penalty weights (default: 0,0.1,1,10)",
    )
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="solve the unconstrained pointwise game")
    p.add_argument("--series", required=True, help="text file, one value per line")
    p.add_argument("--epsilon", type=int, required=True, help="neighborhood radius")
    p.add_argument("--lambda", dest="lam", type=float, required=True, help="penalty weight")
    p.add_argument(
        "--mode", choices=("asymmetric", "symmetric"), default="asymmetric"
    )
    p.add_argument("--output", default=None, help="solution CSV path")
    p.set_defaults(func=cmd_analyze_fixed_point)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (
        ConfigError,
        DataError,
        ModelFormatError,
        DivergenceError,
        SingularMatrixError,
        ValueError,
        OSError,
    ) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
