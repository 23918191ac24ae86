"""Timestep coefficient tables for both diffusion stages and DDIM plans.

Timesteps are 1-indexed; t=0 is the clean state. All arrays are indexed
directly by t (length T+1), so alpha[0] / delta[0] are the t=0 entries.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .voxcore import VoxError


@dataclass(frozen=True)
class BridgeSchedule:
    """Endpoint-pinned interpolation/variance tables for the bridge stage."""

    T: int
    alpha: np.ndarray  # alpha[0..T], 0 -> 1, monotone
    delta: np.ndarray  # delta[0..T], 0 at both endpoints
    s_max: float


@dataclass(frozen=True)
class DdpmSchedule:
    """Linear-beta DDPM tables; alpha_bar[0] = 1 by convention."""

    T: int
    beta: np.ndarray       # beta[0] unused sentinel 0.0, beta[1..T] in (0, 1)
    alpha_bar: np.ndarray  # alpha_bar[t] = prod_{i<=t} (1 - beta_i)


@dataclass(frozen=True)
class DdimPlan:
    """Strictly increasing timestep subsequence ending at T."""

    sub_steps: tuple[int, ...]
    eta: float


def bridge_schedule(T: int, s_max: float = 1.0) -> BridgeSchedule:
    """alpha_t = t/T, delta_t = 2*s_max*(alpha_t - alpha_t^2).

    delta peaks at t = T/2 with value s_max/2 and vanishes at both ends,
    so the forward bridge is exact at t=0 and t=T.
    """
    if T < 2:
        raise VoxError("bridge schedule needs T >= 2")
    if s_max <= 0:
        raise VoxError("s_max must be positive")
    alpha = np.arange(T + 1, dtype=np.float64) / T
    delta = 2.0 * s_max * (alpha - alpha**2)
    return BridgeSchedule(T, alpha, delta, float(s_max))


def ddpm_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> DdpmSchedule:
    if T < 1:
        raise VoxError("ddpm schedule needs T >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise VoxError(f"invalid beta range ({beta_start}, {beta_end})")
    beta = np.zeros(T + 1, dtype=np.float64)
    beta[1:] = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.cumprod(1.0 - beta)  # beta[0] = 0 gives alpha_bar[0] = 1
    return DdpmSchedule(T, beta, alpha_bar)


def ddim_plan(T: int, n_steps: int, eta: float = 0.0) -> DdimPlan:
    """Evenly spaced indices round(k*T/n) for k=1..n, deduplicated, last = T."""
    if n_steps < 1:
        raise VoxError("ddim plan needs n_steps >= 1")
    if n_steps > T:
        raise VoxError(f"n_steps {n_steps} exceeds T {T}")
    if not (0.0 <= eta <= 1.0):
        raise VoxError("eta must lie in [0, 1]")
    raw = [int(round(k * T / n_steps)) for k in range(1, n_steps + 1)]
    steps = sorted({t for t in raw if t >= 1})
    steps[-1] = T
    return DdimPlan(tuple(steps), float(eta))
