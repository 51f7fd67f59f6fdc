"""Adaptive suppression of spurious transmission in weak-signal regions.

Two per-region detectors feed one decision:

* small-parameter: a region whose estimated infection AND recovery rates
  stay below adaptive thresholds over the whole horizon, and
* quiet-history: a region whose recent infected counts sit below an
  adaptive absolute level on a large enough fraction of days.

Thresholds are interpolated quantiles over the regions of the current
window, smoothed by an exponential moving average that only advances while
training, and floored by configured minimums (the quiet-ratio cutoff is
additionally capped).  A flagged region has its infection rate multiplied
by a fixed downscale before the mechanistic rollout; the flags themselves
are constants as far as gradients are concerned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .domain import (
    CompartmentState,
    EpidemicParams,
    Forecast,
    MobilitySeries,
    PopulationVector,
    SuppressionFilter,
)
from . import metapop

__all__ = [
    "EmaSlot",
    "EmaState",
    "SuppressionReport",
    "ThresholdConfig",
    "adaptive_threshold",
    "build_filter",
    "detect_low_infection",
    "detect_small_params",
    "forecast",
    "forecast_with_details",
    "suppress_beta",
]


@dataclass(frozen=True)
class ThresholdConfig:
    """Quantile levels, floors, smoothing, and the suppression strength."""

    infection_quantile: float = 0.1
    quiet_ratio_quantile: float = 0.9
    beta_quantile: float = 0.2
    gamma_quantile: float = 0.2
    infection_floor: float = 0.5
    quiet_ratio_floor: float = 0.7
    beta_floor: float = 2e-3
    gamma_floor: float = 2e-3
    quiet_ratio_cap: float = 0.98
    ema_decay: float = 0.9
    downscale: float = 0.5


class EmaSlot:
    """One scalar exponential-moving-average accumulator (None until seeded)."""

    __slots__ = ("value",)

    def __init__(self, value: float | None = None):
        self.value = value

    def __repr__(self) -> str:
        return f"EmaSlot({self.value!r})"


@dataclass
class EmaState:
    """The four smoothing slots used by the detectors (checkpointed)."""

    infection: EmaSlot = field(default_factory=EmaSlot)
    quiet_ratio: EmaSlot = field(default_factory=EmaSlot)
    beta: EmaSlot = field(default_factory=EmaSlot)
    gamma: EmaSlot = field(default_factory=EmaSlot)

    def as_dict(self) -> dict[str, float | None]:
        return {
            "infection": self.infection.value,
            "quiet_ratio": self.quiet_ratio.value,
            "beta": self.beta.value,
            "gamma": self.gamma.value,
        }

    @staticmethod
    def from_dict(payload: dict[str, float | None]) -> "EmaState":
        return EmaState(
            infection=EmaSlot(payload.get("infection")),
            quiet_ratio=EmaSlot(payload.get("quiet_ratio")),
            beta=EmaSlot(payload.get("beta")),
            gamma=EmaSlot(payload.get("gamma")),
        )


def adaptive_threshold(
    values,
    quantile: float,
    floor: float,
    slot: EmaSlot | None = None,
    training: bool = False,
    decay: float = 0.9,
) -> float:
    """Smoothed interpolated quantile of ``values``, never below ``floor``.

    The fresh quantile interpolates linearly between order statistics at
    rank 1 + (count - 1) * quantile.  With a slot attached, training steps
    fold the fresh value into the running average (seeding it on first use)
    and the smoothed value is used; outside training the stored average is
    read without being advanced.
    """
    flat = np.asarray(values, dtype=np.float64).ravel()
    fresh = float(np.quantile(flat, quantile))
    if slot is None:
        smoothed = fresh
    else:
        if training:
            slot.value = (
                fresh
                if slot.value is None
                else decay * slot.value + (1.0 - decay) * fresh
            )
        smoothed = fresh if slot.value is None else slot.value
    return max(smoothed, floor)


def _detect_small(
    beta: np.ndarray,
    gamma: np.ndarray,
    config: ThresholdConfig,
    state: EmaState | None,
    training: bool,
) -> tuple[np.ndarray, float, float]:
    beta_peaks = np.asarray(beta, dtype=np.float64).max(axis=1)
    gamma_peaks = np.asarray(gamma, dtype=np.float64).max(axis=1)
    beta_cut = adaptive_threshold(
        beta_peaks,
        config.beta_quantile,
        config.beta_floor,
        state.beta if state is not None else None,
        training,
        config.ema_decay,
    )
    gamma_cut = adaptive_threshold(
        gamma_peaks,
        config.gamma_quantile,
        config.gamma_floor,
        state.gamma if state is not None else None,
        training,
        config.ema_decay,
    )
    flags = (beta_peaks <= beta_cut) & (gamma_peaks <= gamma_cut)
    return flags, beta_cut, gamma_cut


def detect_small_params(
    params: EpidemicParams,
    config: ThresholdConfig,
    state: EmaState | None = None,
    training: bool = False,
) -> np.ndarray:
    """Flag regions whose rates stay small across the whole horizon.

    A region is flagged only when BOTH its peak infection rate and its peak
    recovery rate fall at or below their adaptive thresholds.
    """
    return _detect_small(params.beta, params.gamma, config, state, training)[0]


def _detect_quiet(
    infected_history: np.ndarray,
    config: ThresholdConfig,
    state: EmaState | None,
    training: bool,
) -> tuple[np.ndarray, float, float, np.ndarray]:
    history = np.asarray(infected_history, dtype=np.float64)
    level = adaptive_threshold(
        history,
        config.infection_quantile,
        config.infection_floor,
        state.infection if state is not None else None,
        training,
        config.ema_decay,
    )
    quiet_ratio = (history <= level).mean(axis=1)
    cutoff = min(
        adaptive_threshold(
            quiet_ratio,
            config.quiet_ratio_quantile,
            config.quiet_ratio_floor,
            state.quiet_ratio if state is not None else None,
            training,
            config.ema_decay,
        ),
        config.quiet_ratio_cap,
    )
    flags = quiet_ratio >= cutoff
    return flags, level, cutoff, quiet_ratio


def detect_low_infection(
    infected_history: np.ndarray,
    config: ThresholdConfig,
    state: EmaState | None = None,
    training: bool = False,
) -> np.ndarray:
    """Flag regions whose infected counts were quiet on most recent days.

    The absolute quiet level is an adaptive quantile of every (region, day)
    entry in the window; the per-region quiet-day fraction is then held
    against an adaptive cutoff over regions (floored, then capped).
    """
    return _detect_quiet(infected_history, config, state, training)[0]


def build_filter(small_params, quiet_history) -> SuppressionFilter:
    """Combine the two detectors with a logical OR."""
    small_params = np.asarray(small_params, dtype=bool)
    quiet_history = np.asarray(quiet_history, dtype=bool)
    return SuppressionFilter(
        small_params=small_params,
        quiet_history=quiet_history,
        combined=small_params | quiet_history,
    )


def suppress_beta(
    params: EpidemicParams,
    decision: SuppressionFilter,
    downscale: float,
) -> EpidemicParams:
    """Scale flagged regions' infection rates by ``downscale``; keep the rest."""
    multiplier = np.where(decision.combined, downscale, 1.0)
    return EpidemicParams(
        beta=params.beta * multiplier[:, None], gamma=params.gamma
    )


@dataclass(frozen=True)
class SuppressionReport:
    """Diagnostics for one forecast: decision, thresholds, applied rates."""

    decision: SuppressionFilter
    infection_level: float
    quiet_cutoff: float
    quiet_ratio: np.ndarray
    beta_cutoff: float
    gamma_cutoff: float
    applied: EpidemicParams


def forecast_with_details(
    params: EpidemicParams,
    infected_history: np.ndarray,
    state0: CompartmentState,
    mobility: MobilitySeries,
    population: PopulationVector,
    config: ThresholdConfig = ThresholdConfig(),
    state: EmaState | None = None,
    training: bool = False,
) -> tuple[Forecast, SuppressionReport]:
    """Run detection, suppress, and roll the mechanistic core forward."""
    small, beta_cut, gamma_cut = _detect_small(
        params.beta, params.gamma, config, state, training
    )
    quiet, level, cutoff, ratio = _detect_quiet(
        infected_history, config, state, training
    )
    decision = build_filter(small, quiet)
    applied = suppress_beta(params, decision, config.downscale)
    rolled = metapop.rollout(state0, applied, mobility, population)
    report = SuppressionReport(
        decision=decision,
        infection_level=level,
        quiet_cutoff=cutoff,
        quiet_ratio=ratio,
        beta_cutoff=beta_cut,
        gamma_cutoff=gamma_cut,
        applied=applied,
    )
    return rolled, report


def forecast(
    params: EpidemicParams,
    infected_history: np.ndarray,
    state0: CompartmentState,
    mobility: MobilitySeries,
    population: PopulationVector,
    config: ThresholdConfig = ThresholdConfig(),
    state: EmaState | None = None,
    training: bool = False,
) -> Forecast:
    """Suppressed mechanistic forecast (see ``forecast_with_details``)."""
    return forecast_with_details(
        params, infected_history, state0, mobility, population, config, state, training
    )[0]
