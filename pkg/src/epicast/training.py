"""Training loop, optimizer, curriculum, checkpointing, gradient checking.

Training minimizes mean absolute error on raw daily cases.  The horizon a
batch is scored on grows with the iteration counter (curriculum), while
validation always scores the full horizon.  Optimization is adaptive-moment
descent with decoupled weight decay, so a parameter with zero gradient
still shrinks by ``lr * weight_decay`` of itself each step.

Checkpoint container (documented layout, version 1):

* bytes 0-7: magic ``EPCAST\\x00\\x01`` (last byte is the format version);
* bytes 8-11: little-endian uint32 manifest length ``M``;
* bytes 12 .. 12+M: UTF-8 JSON manifest with the model configuration, its
  sha256 hash, region names, scaler statistics, smoothing state, training
  provenance (epoch, validation loss), and per-parameter ``name``/
  ``shape``/``offset``/``count`` records;
* the rest: the parameters' raw little-endian float64 bytes, concatenated
  in manifest order.

Round trips are bit-exact: identical state serializes to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import WindowSet
from .domain import DimensionMismatchError
from .pipeline import ForecastModel, ModelConfig
from .suppression import EmaState

__all__ = [
    "Adam",
    "GradientCheckReport",
    "GroupCheck",
    "TrainConfig",
    "TrainingDivergedError",
    "TrainingHistory",
    "curriculum_horizon",
    "fit",
    "gradient_check",
    "load_checkpoint",
    "mae_loss",
    "save_checkpoint",
    "validation_loss",
]

_MAGIC = b"EPCAST\x00\x01"


class TrainingDivergedError(RuntimeError):
    """Raised when a non-finite loss appears (with context for debugging)."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_epochs: int = 300
    patience: int = 20
    curriculum_step: int = 300
    seed: int = 2024

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "curriculum_step": self.curriculum_step,
            "seed": self.seed,
        }


def mae_loss(predictions, truth):
    """Mean absolute error; polymorphic over Tensors and ndarrays."""
    pred_shape = ad.as_data(predictions).shape
    truth_shape = ad.as_data(truth).shape
    if pred_shape != truth_shape:
        raise DimensionMismatchError(
            f"loss shapes differ: predictions {pred_shape}, truth {truth_shape}"
        )
    return ad.mean(ad.absolute(predictions - truth))


def curriculum_horizon(iteration: int, step: int, full_horizon: int) -> int:
    """Scored horizon after ``iteration`` optimizer steps (1-based days)."""
    if step <= 0:
        return full_horizon
    return min(iteration // step + 1, full_horizon)


class Adam:
    """Adaptive moments with decoupled weight decay on a parameter table."""

    def __init__(self, params: dict[str, Tensor], config: TrainConfig):
        self.params = params
        self.config = config
        self.step_count = 0
        self.first_moment = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.second_moment = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        cfg = self.config
        self.step_count += 1
        bias1 = 1.0 - cfg.beta1**self.step_count
        bias2 = 1.0 - cfg.beta2**self.step_count
        for name, param in self.params.items():
            grad = param.grad
            if grad is None:
                grad = 0.0
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * grad
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * np.square(grad)
            update = (m / bias1) / (np.sqrt(v / bias2) + cfg.epsilon)
            param.data -= cfg.learning_rate * (cfg.weight_decay * param.data + update)


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    iterations: int = 0
    stopped_early: bool = False


def _batch_order(count: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(count)
    for start in range(0, count, batch_size):
        yield order[start : start + batch_size]


def validation_loss(
    model: ForecastModel, windows: WindowSet, batch_size: int = 32
) -> float:
    """Full-horizon MAE over a window set (no smoothing updates)."""
    total_error = 0.0
    total_count = 0
    for start in range(0, len(windows), batch_size):
        indices = np.arange(start, min(start + batch_size, len(windows)))
        batch = windows.batch(indices)
        result = model.forward(batch, training=False)
        total_error += float(np.abs(result.cases.data - batch.targets).sum())
        total_count += batch.targets.size
    return total_error / total_count


def _snapshot(model: ForecastModel) -> dict:
    return {
        "params": {name: p.data.copy() for name, p in model.parameters().items()},
        "ema": model.ema.as_dict(),
    }


def _restore(model: ForecastModel, snapshot: dict) -> None:
    for name, param in model.parameters().items():
        param.data[...] = snapshot["params"][name]
    model.ema = EmaState.from_dict(snapshot["ema"])


def fit(
    model: ForecastModel,
    train_windows: WindowSet,
    val_windows: WindowSet,
    config: TrainConfig = TrainConfig(),
    log=None,
) -> TrainingHistory:
    """Train until the validation loss stalls; leave the model at its best.

    Shuffling, initialization, and smoothing updates are all driven by
    seeded generators, so identical inputs reproduce identical floats.
    """
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(model.parameters(), config)
    history = TrainingHistory()
    best = _snapshot(model)
    since_best = 0
    t_out = train_windows.t_out
    for epoch in range(config.max_epochs):
        epoch_error = 0.0
        epoch_count = 0
        for indices in _batch_order(len(train_windows), config.batch_size, rng):
            batch = train_windows.batch(indices)
            horizon = curriculum_horizon(
                history.iterations, config.curriculum_step, t_out
            )
            model.zero_grad()
            result = model.forward(batch, training=True)
            sliced = result.cases[:, :, :horizon]
            loss = mae_loss(sliced, batch.targets[:, :, :horizon])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite training loss {value} at epoch {epoch}, "
                    f"iteration {history.iterations} (horizon {horizon}); "
                    f"inspect the learning rate and input scaling"
                )
            loss.backward()
            optimizer.step()
            model.clamp_blend()
            history.iterations += 1
            epoch_error += value * sliced.data.size
            epoch_count += sliced.data.size
        train_loss = epoch_error / max(epoch_count, 1)
        val_loss = validation_loss(model, val_windows, config.batch_size)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        improved = val_loss < history.best_val_loss
        if improved:
            history.best_val_loss = val_loss
            history.best_epoch = epoch
            best = _snapshot(model)
            since_best = 0
        else:
            since_best += 1
        if log is not None:
            marker = " *" if improved else ""
            log(
                f"epoch {epoch + 1:4d}  train mae {train_loss:12.4f}  "
                f"val mae {val_loss:12.4f}{marker}"
            )
        if since_best > config.patience:
            history.stopped_early = True
            break
    _restore(model, best)
    return history


# ---------------------------------------------------------------- checkpoints


def _config_hash(config: ModelConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_checkpoint(
    model: ForecastModel,
    path: str | Path,
    epoch: int = 0,
    val_loss: float | None = None,
    train_config: TrainConfig | None = None,
    regions: list[str] | None = None,
) -> None:
    """Serialize the model to the versioned container described above."""
    params = model.parameters()
    records = []
    offset = 0
    blobs = []
    for name, tensor in params.items():
        blob = np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
        records.append(
            {
                "name": name,
                "shape": list(tensor.data.shape),
                "offset": offset,
                "count": int(tensor.data.size),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": 1,
        "config_hash": _config_hash(model.config),
        "model_config": model.config.to_dict(),
        "n_regions": model.n_regions,
        "regions": regions,
        "seed": model.seed,
        "epoch": epoch,
        "val_loss": val_loss,
        "ema": model.ema.as_dict(),
        "scaler_mean": [float(v) for v in model.scaler_mean],
        "scaler_scale": [float(v) for v in model.scaler_scale],
        "train_config": train_config.to_dict() if train_config else None,
        "params": records,
    }
    encoded = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as handle:
        handle.write(_MAGIC)
        handle.write(len(encoded).to_bytes(4, "little"))
        handle.write(encoded)
        for blob in blobs:
            handle.write(blob)


@dataclass
class LoadedCheckpoint:
    model: ForecastModel
    manifest: dict


def load_checkpoint(path: str | Path) -> LoadedCheckpoint:
    """Rebuild a model bit-for-bit from a checkpoint file."""
    raw = Path(path).read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise ValueError(
            f"{path}: not a recognized checkpoint (bad magic or version)"
        )
    cursor = len(_MAGIC)
    manifest_length = int.from_bytes(raw[cursor : cursor + 4], "little")
    cursor += 4
    manifest = json.loads(raw[cursor : cursor + manifest_length].decode("utf-8"))
    cursor += manifest_length
    payload = raw[cursor:]
    config = ModelConfig.from_dict(manifest["model_config"])
    if _config_hash(config) != manifest["config_hash"]:
        raise ValueError(f"{path}: configuration hash mismatch")
    model = ForecastModel(config, manifest["n_regions"], seed=manifest["seed"])
    params = model.parameters()
    stored = {record["name"]: record for record in manifest["params"]}
    if set(stored) != set(params):
        raise ValueError(f"{path}: parameter names do not match this build")
    for name, tensor in params.items():
        record = stored[name]
        if list(tensor.data.shape) != record["shape"]:
            raise ValueError(
                f"{path}: parameter {name} has shape {record['shape']} on disk "
                f"but {list(tensor.data.shape)} in the model"
            )
        flat = np.frombuffer(
            payload, dtype="<f8", count=record["count"], offset=record["offset"]
        )
        tensor.data = flat.reshape(record["shape"]).astype(np.float64).copy()
    model.scaler_mean = np.asarray(manifest["scaler_mean"], dtype=np.float64)
    model.scaler_scale = np.asarray(manifest["scaler_scale"], dtype=np.float64)
    model.ema = EmaState.from_dict(manifest["ema"])
    return LoadedCheckpoint(model=model, manifest=manifest)


# ------------------------------------------------------------- gradient check


@dataclass
class GroupCheck:
    checked: int
    max_rel_error: float
    worst_index: tuple[int, ...] | None
    analytic_at_worst: float
    numeric_at_worst: float


@dataclass
class GradientCheckReport:
    groups: dict[str, GroupCheck]
    tolerance: float
    passed: bool


def gradient_check(
    model: ForecastModel,
    batch,
    samples_per_group: int = 50,
    fd_step: float = 1e-5,
    tolerance: float = 1e-4,
    seed: int = 0,
) -> GradientCheckReport:
    """Compare backpropagated gradients with central finite differences.

    The suppression decision from an initial pass is frozen for every
    evaluation, matching its constant role in training.  Each parameter
    group is probed at up to ``samples_per_group`` randomly chosen entries;
    the relative error guards its denominator so exactly-zero pairs count
    as exact agreement.
    """
    rng = np.random.default_rng(seed)
    probe = model.forward(batch, training=False)
    flags = probe.flags

    def loss_tensor():
        result = model.forward(batch, training=False, fixed_filter=flags)
        return mae_loss(result.cases, batch.targets)

    model.zero_grad()
    loss = loss_tensor()
    loss.backward()
    params = model.parameters()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    groups: dict[str, GroupCheck] = {}
    passed = True
    for name, param in params.items():
        flat = param.data.reshape(-1)
        count = min(samples_per_group, flat.size)
        chosen = rng.choice(flat.size, size=count, replace=False)
        worst = GroupCheck(
            checked=count,
            max_rel_error=0.0,
            worst_index=None,
            analytic_at_worst=0.0,
            numeric_at_worst=0.0,
        )
        for index in chosen:
            original = flat[index]
            flat[index] = original + fd_step
            upper = loss_tensor().item()
            flat[index] = original - fd_step
            lower = loss_tensor().item()
            flat[index] = original
            numeric = (upper - lower) / (2.0 * fd_step)
            exact = float(analytic[name].reshape(-1)[index])
            scale = max(abs(exact), abs(numeric), 1e-10)
            rel = abs(exact - numeric) / scale
            if rel > worst.max_rel_error:
                worst.max_rel_error = rel
                worst.worst_index = tuple(
                    int(i) for i in np.unravel_index(index, param.data.shape)
                )
                worst.analytic_at_worst = exact
                worst.numeric_at_worst = numeric
        groups[name] = worst
        if worst.max_rel_error >= tolerance:
            passed = False
    return GradientCheckReport(groups=groups, tolerance=tolerance, passed=passed)
