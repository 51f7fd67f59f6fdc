"""Command-line interface: simulate, train, forecast, evaluate, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 bad or missing
data, 3 failed verification (a gradient check over tolerance).
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import fields
from datetime import date as date_type, timedelta
from pathlib import Path

import numpy as np
import yaml

from . import datasets, evaluation, kernels, training
from .datasets import DataError, SyntheticScenario
from .domain import EpidemicParams, ValidationError
from .estimator import BackboneConfig
from .pipeline import CASES_CHANNEL, ForecastModel, ModelConfig, WindowBatch
from .suppression import ThresholdConfig
from .training import TrainConfig

__all__ = ["main"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3

# Domain objects require rates strictly inside (0, 1); a saturated sigmoid
# can emit exactly 1.0, so outputs are nudged inward at construction edges.
RATE_EPSILON = 1e-12


class UsageError(Exception):
    """Bad flags or configuration (CLI exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); route to our codes
        raise UsageError(message)


# -------------------------------------------------------------- configuration

_MODEL_KEYS = {
    "input_window": ("t_in", int),
    "forecast_horizon": ("t_out", int),
    "input_channels": ("channels", int),
    "pattern_count": ("pattern_count", int),
    "pattern_window": ("pattern_window", int),
    "pattern_key_dim": ("pattern_key_dim", int),
    "pattern_embed_dim": ("pattern_embed_dim", int),
    "lifted_channels": ("lifted_channels", int),
    "attention_heads": ("attention_heads", int),
}


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        payload = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as err:
        raise UsageError(f"{path}: invalid YAML ({err})") from None
    if payload is None:
        return {}
    if not isinstance(payload, dict):
        raise UsageError(f"{path}: top level must be a mapping of sections")
    return payload


def _section(config: dict, name: str) -> dict:
    section = config.get(name, {})
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise UsageError(f"config section {name!r} must be a mapping")
    return dict(section)


def _reject_unknown(section: dict, known: set[str], where: str) -> None:
    unknown = sorted(set(section) - known)
    if unknown:
        raise UsageError(
            f"unknown key(s) {', '.join(unknown)} in config section {where!r}; "
            f"valid keys: {', '.join(sorted(known))}"
        )


def _typed(section: dict, spec: dict[str, type], where: str) -> dict:
    _reject_unknown(section, set(spec), where)
    out = {}
    for key, value in section.items():
        cast = spec[key]
        try:
            out[key] = cast(value)
        except (TypeError, ValueError):
            raise UsageError(
                f"config {where}.{key} must be {cast.__name__}, got {value!r}"
            ) from None
    return out


def model_config_from(config: dict) -> ModelConfig:
    section = _section(config, "model")
    backbone_raw = section.pop("backbone", {}) or {}
    suppression_raw = section.pop("suppression", {}) or {}
    _reject_unknown(section, set(_MODEL_KEYS), "model")
    kwargs = {}
    for key, value in section.items():
        attr, cast = _MODEL_KEYS[key]
        try:
            kwargs[attr] = cast(value)
        except (TypeError, ValueError):
            raise UsageError(
                f"config model.{key} must be {cast.__name__}, got {value!r}"
            ) from None
    backbone_spec = {
        "hidden_dim": int,
        "skip_dim": int,
        "output_dim": int,
        "kernel_size": int,
        "dilations": lambda v: tuple(int(d) for d in v),
    }
    if not isinstance(backbone_raw, dict):
        raise UsageError("config section 'model.backbone' must be a mapping")
    _reject_unknown(backbone_raw, set(backbone_spec), "model.backbone")
    backbone_kwargs = {}
    for key, value in backbone_raw.items():
        try:
            backbone_kwargs[key] = backbone_spec[key](value)
        except (TypeError, ValueError):
            raise UsageError(f"config model.backbone.{key} is malformed: {value!r}")
    if backbone_kwargs:
        kwargs["backbone"] = BackboneConfig(**backbone_kwargs)
    if not isinstance(suppression_raw, dict):
        raise UsageError("config section 'model.suppression' must be a mapping")
    threshold_spec = {f.name: float for f in fields(ThresholdConfig)}
    typed = _typed(suppression_raw, threshold_spec, "model.suppression")
    if typed:
        kwargs["thresholds"] = ThresholdConfig(**typed)
    try:
        return ModelConfig(**kwargs)
    except (ValidationError, ValueError) as err:
        raise UsageError(f"invalid model configuration: {err}") from None


def train_config_from(config: dict) -> TrainConfig:
    spec = {
        "batch_size": int,
        "learning_rate": float,
        "weight_decay": float,
        "beta1": float,
        "beta2": float,
        "epsilon": float,
        "max_epochs": int,
        "patience": int,
        "curriculum_step": int,
        "seed": int,
    }
    return TrainConfig(**_typed(_section(config, "training"), spec, "training"))


def scenario_from(config: dict, overrides: dict | None = None) -> SyntheticScenario:
    spec = {
        "seed": int,
        "n_regions": int,
        "length": int,
        "beta_low": float,
        "beta_high": float,
        "season_period": float,
        "beta_kind": str,
        "gamma": float,
        "noise": float,
        "population_low": float,
        "population_high": float,
        "initial_infected_fraction": float,
        "self_flow": float,
        "cross_flow": float,
        "weekly_amplitude": float,
        "start_date": str,
    }
    kwargs = _typed(_section(config, "synthetic"), spec, "synthetic")
    for key, value in (overrides or {}).items():
        if value is not None:
            kwargs[key] = value
    try:
        return SyntheticScenario(**kwargs)
    except DataError as err:
        raise UsageError(f"invalid synthetic scenario: {err}") from None


def _apply_backend(args) -> None:
    if getattr(args, "backend", None):
        kernels.use(args.backend)


# ----------------------------------------------------------------- subcommands


def _cmd_simulate(args) -> int:
    _apply_backend(args)
    config = load_config(args.config)
    scenario = scenario_from(
        config,
        {
            "seed": args.seed,
            "n_regions": args.regions,
            "length": args.length,
            "noise": args.noise,
        },
    )
    dataset = datasets.generate_synthetic(scenario)
    datasets.save_dataset(dataset, args.out)
    print(
        f"wrote {dataset.n_regions} regions x {dataset.n_days} days "
        f"(seed {scenario.seed}) to {args.out}"
    )
    return EXIT_OK


def _channel_scaler(windows: datasets.WindowSet) -> tuple[np.ndarray, np.ndarray]:
    observations = windows.observations
    mean = observations.mean(axis=(0, 1, 2))
    scale = observations.std(axis=(0, 1, 2))
    return mean, scale


def _cmd_train(args) -> int:
    _apply_backend(args)
    config = load_config(args.config)
    model_config = model_config_from(config)
    train_config = train_config_from(config)
    dataset = datasets.load_dataset(args.data)
    train_split, val_split, _ = datasets.chronological_split(dataset)
    train_windows = datasets.windowize(train_split, model_config.t_in, model_config.t_out)
    val_windows = datasets.windowize(val_split, model_config.t_in, model_config.t_out)
    model = ForecastModel(model_config, dataset.n_regions, seed=train_config.seed)
    model.set_scaler(*_channel_scaler(train_windows))
    log = None if args.quiet else print
    history = training.fit(model, train_windows, val_windows, train_config, log=log)
    training.save_checkpoint(
        model,
        args.out,
        epoch=history.best_epoch,
        val_loss=history.best_val_loss,
        train_config=train_config,
        regions=dataset.regions,
    )
    stop = "early stop" if history.stopped_early else "epoch budget reached"
    print(
        f"best validation mae {history.best_val_loss:.6f} at epoch "
        f"{history.best_epoch + 1} ({stop}); checkpoint -> {args.out}"
    )
    return EXIT_OK


def _load_checkpoint(path) -> training.LoadedCheckpoint:
    if not Path(path).exists():
        raise DataError(
            f"checkpoint not found: {path} (run 'epicast train' to create one)"
        )
    try:
        return training.load_checkpoint(path)
    except ValueError as err:
        raise DataError(str(err)) from None


def _check_regions(dataset: datasets.Dataset, manifest: dict) -> None:
    stored = manifest.get("regions")
    if stored is not None and list(stored) != list(dataset.regions):
        raise DataError(
            "checkpoint was trained on different regions than this dataset; "
            "retrain or point --data at the matching dataset"
        )


def _window_ending_at(dataset: datasets.Dataset, t_in: int, end_index: int) -> WindowBatch:
    start = end_index - t_in + 1
    if start < 0:
        raise DataError(
            f"need {t_in} observed days before {dataset.dates[end_index]}, "
            f"but only {end_index + 1} are available"
        )
    stop = end_index + 1
    return WindowBatch(
        observations=dataset.stacked()[:, start:stop][None],
        mobility=dataset.flows[:, :, start:stop][None],
        susceptible0=dataset.susceptible[:, end_index][None],
        infected0=dataset.infected[:, end_index][None],
        recovered0=dataset.recovered[:, end_index][None],
        population=dataset.population,
        targets=None,
    )


def _cmd_forecast(args) -> int:
    _apply_backend(args)
    dataset = datasets.load_dataset(args.data)
    loaded = _load_checkpoint(args.checkpoint)
    _check_regions(dataset, loaded.manifest)
    model = loaded.model
    if model.n_regions != dataset.n_regions:
        raise DataError(
            f"checkpoint expects {model.n_regions} regions, dataset has "
            f"{dataset.n_regions}"
        )
    if args.at is None:
        end_index = dataset.n_days - 1
    else:
        try:
            end_index = dataset.dates.index(
                date_type.fromisoformat(args.at).isoformat()
            )
        except ValueError:
            raise DataError(
                f"--at {args.at}: not a date in the dataset "
                f"({dataset.dates[0]} .. {dataset.dates[-1]})"
            ) from None
    batch = _window_ending_at(dataset, model.config.t_in, end_index)
    result = model.forward(batch, training=False)

    beta = np.clip(result.beta.data[0], RATE_EPSILON, 1.0 - RATE_EPSILON)
    gamma = np.clip(result.gamma.data[0], RATE_EPSILON, 1.0 - RATE_EPSILON)
    suppressed = np.clip(
        result.suppressed_beta.data[0], RATE_EPSILON, 1.0 - RATE_EPSILON
    )
    EpidemicParams(beta=beta, gamma=gamma)  # validate at the domain edge
    cases = result.cases.data[0]
    strength = result.strength[0]
    trajectories = result.trajectories
    base_date = date_type.fromisoformat(dataset.dates[end_index])

    out = Path(args.out)
    with out.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            [
                "date",
                "lead_day",
                "region",
                "cases_pred",
                "beta",
                "beta_suppressed",
                "gamma",
                "transmission_strength",
                "small_rates_flag",
                "quiet_history_flag",
                "suppressed_flag",
                "susceptible",
                "infected",
                "recovered",
            ]
        )
        for lead in range(model.config.t_out):
            day = (base_date + timedelta(days=lead + 1)).isoformat()
            for r, region in enumerate(dataset.regions):
                writer.writerow(
                    [
                        day,
                        lead + 1,
                        region,
                        format(cases[r, lead], ".10g"),
                        format(beta[r, lead], ".10g"),
                        format(suppressed[r, lead], ".10g"),
                        format(gamma[r, lead], ".10g"),
                        format(strength[r, lead], ".10g"),
                        int(result.small_flags[0, r]),
                        int(result.quiet_flags[0, r]),
                        int(result.flags[0, r]),
                        format(trajectories["susceptible"][0, r, lead], ".10g"),
                        format(trajectories["infected"][0, r, lead], ".10g"),
                        format(trajectories["recovered"][0, r, lead], ".10g"),
                    ]
                )
    suppressed_count = int(result.flags.sum())
    print(
        f"forecast from {dataset.dates[end_index]} for {model.config.t_out} days "
        f"({suppressed_count}/{dataset.n_regions} regions suppressed) -> {out}"
    )
    return EXIT_OK


def _batched_predictions(model: ForecastModel, windows: datasets.WindowSet) -> np.ndarray:
    chunks = []
    for start in range(0, len(windows), 32):
        indices = np.arange(start, min(start + 32, len(windows)))
        result = model.forward(windows.batch(indices), training=False)
        chunks.append(result.cases.data)
    return np.concatenate(chunks, axis=0)


def _cmd_evaluate(args) -> int:
    _apply_backend(args)
    dataset = datasets.load_dataset(args.data)
    loaded = _load_checkpoint(args.checkpoint)
    _check_regions(dataset, loaded.manifest)
    model = loaded.model
    splits = dict(
        zip(("train", "val", "test"), datasets.chronological_split(dataset))
    )
    splits["full"] = dataset
    segment = splits[args.split]
    windows = datasets.windowize(segment, model.config.t_in, model.config.t_out)
    predictions = _batched_predictions(model, windows)
    truth = windows.targets
    days = tuple(d for d in (3, 7, 14) if d <= model.config.t_out)
    model_report = evaluation.horizon_report(predictions, truth, days=days)
    last_observed = windows.observations[:, :, -1, CASES_CHANNEL]
    baseline = evaluation.persistence_baseline(last_observed, model.config.t_out)
    baseline_report = evaluation.horizon_report(baseline, truth, days=days)

    print(
        evaluation.report_table(
            model_report, title=f"model ({args.split} split, {len(windows)} windows)"
        )
    )
    print(evaluation.report_table(baseline_report, title="persistence baseline"))
    if args.out:
        with Path(args.out).open("w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(
                handle,
                fieldnames=[
                    "source",
                    "slice",
                    "rmse",
                    "mae",
                    "smape",
                    "rae",
                    "rae_defined",
                ],
            )
            writer.writeheader()
            for source, report in (
                ("model", model_report),
                ("persistence", baseline_report),
            ):
                for row in evaluation.report_rows(report):
                    writer.writerow({"source": source, **row})
        print(f"report -> {args.out}")
    return EXIT_OK


def tiny_gradcheck_setup(seed: int = 7):
    """Small but fully generic configuration for finite-difference checks."""
    config = ModelConfig(
        t_in=8,
        t_out=4,
        pattern_count=4,
        pattern_window=7,
        pattern_key_dim=8,
        pattern_embed_dim=8,
        lifted_channels=8,
        attention_heads=4,
        backbone=BackboneConfig(
            hidden_dim=8, skip_dim=8, output_dim=8, kernel_size=2, dilations=(1, 2, 4)
        ),
    )
    # Small populations keep pooled flows and the learned case correction on
    # comparable scales, which keeps every finite difference well conditioned.
    scenario = SyntheticScenario(
        seed=seed,
        n_regions=3,
        length=40,
        noise=0.05,
        population_low=60.0,
        population_high=400.0,
        initial_infected_fraction=0.05,
    )
    dataset = datasets.generate_synthetic(scenario)
    windows = datasets.windowize(dataset, config.t_in, config.t_out)
    batch = windows.batch(np.arange(min(4, len(windows))))
    model = ForecastModel(config, dataset.n_regions, seed=seed)
    model.set_scaler(*_channel_scaler(windows))
    # The blend and the retrieval scale initialize at exactly zero, which
    # silences entire parameter groups; probe at a generic operating point.
    # The dependency and memory paths are smooth (softmax/sigmoid) but
    # heavily attenuated, so they get a strong perturbation to lift their
    # gradients off the finite-difference noise floor; the backbone keeps a
    # gentle one so no activation sits within a step of a relu/min kink.
    rng = np.random.default_rng([seed, 11])
    for name, tensor in model.parameters().items():
        if name.startswith(("attention.", "spatial.", "gate.")):
            spread = 0.4  # attenuated but smooth: lift gradients well off zero
        else:
            spread = 0.05  # generic nudge; keeps kinked paths off boundaries
        tensor.data += rng.normal(0.0, spread, size=tensor.data.shape)
    model.blend.data[...] = 0.9
    # A large retrieval scale amplifies every memory-bank gradient linearly
    # without sharpening its softmax, keeping that path's finite differences
    # well conditioned.
    model.memory.scale.data[...] = 5.0
    return model, batch


def _cmd_gradcheck(args) -> int:
    _apply_backend(args)
    model, batch = tiny_gradcheck_setup(seed=args.seed)
    report = training.gradient_check(
        model,
        batch,
        samples_per_group=args.samples,
        fd_step=args.step,
        tolerance=args.tolerance,
        seed=args.seed,
    )
    width = max(len(name) for name in report.groups)
    print(f"{'parameter group':<{width}}  checked  max rel err  status")
    for name, group in report.groups.items():
        status = "ok" if group.max_rel_error < report.tolerance else "FAIL"
        print(
            f"{name:<{width}}  {group.checked:7d}  {group.max_rel_error:11.3e}  "
            f"{status}"
        )
    if report.passed:
        print(f"all gradients within {report.tolerance:g} relative tolerance")
        return EXIT_OK
    print(
        f"gradient check FAILED against tolerance {report.tolerance:g}; "
        f"see groups above",
        file=sys.stderr,
    )
    return EXIT_VERIFY


# ----------------------------------------------------------------- entry point


def build_parser() -> _Parser:
    parser = _Parser(
        prog="epicast",
        description=(
            "Hybrid epidemic forecasting: learned per-region transmission and "
            "recovery rates driving a mechanistic metapopulation rollout."
        ),
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add_backend(p):
        p.add_argument(
            "--backend",
            choices=sorted(kernels.available_backends()),
            help="numerical kernel backend (default: EPICAST_BACKEND or auto)",
        )

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory for the CSVs")
    p.add_argument("--config", help="YAML file with a 'synthetic' section")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--regions", type=int, help="override the region count")
    p.add_argument("--length", type=int, help="override the number of days")
    p.add_argument("--noise", type=float, help="override the observation noise")
    add_backend(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("train", help="fit a model on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--config", help="YAML file with 'model'/'training' sections")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch lines")
    add_backend(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("forecast", help="roll a trained model forward")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="checkpoint from 'train'")
    p.add_argument("--out", required=True, help="forecast CSV to write")
    p.add_argument(
        "--at",
        help="last observed date (ISO) the forecast starts after "
        "(default: final day)",
    )
    add_backend(p)
    p.set_defaults(func=_cmd_forecast)

    p = sub.add_parser("evaluate", help="score a checkpoint against a baseline")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="checkpoint from 'train'")
    p.add_argument(
        "--split",
        choices=("train", "val", "test", "full"),
        default="test",
        help="which chronological segment to score (default: test)",
    )
    p.add_argument("--out", help="optional report CSV")
    add_backend(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("gradcheck", help="verify gradients by finite differences")
    p.add_argument("--samples", type=int, default=50, help="probes per group")
    p.add_argument("--step", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--tolerance", type=float, default=1e-4, help="relative tolerance")
    p.add_argument("--seed", type=int, default=7, help="setup and sampling seed")
    add_backend(p)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_help()
            return EXIT_USAGE
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        print("run 'epicast --help' for usage", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ValidationError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
