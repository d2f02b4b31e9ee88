"""Synthetic decay curves, ensemble averages and widefield image stacks.

All stochastic operations draw from a seeded numpy Generator in a fixed
vectorized order, so output is bit-reproducible for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import model
from .curves import DecayCurve
from .maps import ScalarMap
from .stackio import ImageStack

# below this many repetitions the finite-N population is used instead of
# the steady-state limit (the populations equilibrate within a few cycles)
STEADY_STATE_MIN_REPS = 50


@dataclass(frozen=True)
class ReadoutModel:
    """Linear population-to-counts map with optional Poisson shot noise.

    A fully polarized readout yields ``counts_bright`` photons per
    repetition; the depolarized state yields ``counts_bright*(1-contrast)``.
    """

    counts_bright: float = 0.05
    contrast: float = 0.3
    shot_noise: bool = True

    def __post_init__(self):
        if not (self.counts_bright > 0):
            raise ValueError(f"counts_bright must be > 0, got {self.counts_bright}")
        if not (0.0 < self.contrast < 1.0):
            raise ValueError(f"contrast must lie in (0, 1), got {self.contrast}")


def _check_tau_grid(tau_grid):
    tau = np.asarray(tau_grid, dtype=float)
    if tau.size == 0:
        raise ValueError("tau_grid must be nonempty")
    if np.any(tau <= 0):
        raise ValueError("all dark times must be > 0")
    if np.any(np.diff(tau) <= 0):
        raise ValueError("tau_grid must be strictly increasing")
    return tau


@dataclass
class CurveSimConfig:
    """Settings for a single simulated relaxometry curve."""

    rates: model.Rates
    t_p: float
    tau_grid: Sequence[float]
    n_reps: int = 1000
    readout: ReadoutModel = field(default_factory=ReadoutModel)
    reference_channel: bool = True
    seed: int = 0

    def __post_init__(self):
        self.tau_grid = _check_tau_grid(self.tau_grid)
        if self.n_reps < 1:
            raise ValueError(f"n_reps must be >= 1, got {self.n_reps}")
        if not (self.t_p > 0):
            raise ValueError(f"t_p must be > 0, got {self.t_p}")


def _steady_n0(eta, gamma1, tau):
    """Vectorized steady-state polarized population, overflow-safe."""
    em = np.exp(-2.0 * np.asarray(gamma1) * np.asarray(tau))
    return 0.5 * (1.0 + (eta - 1.0) * em / (eta * em - 1.0))


def _population_curve(eta: float, gamma1: float, tau: np.ndarray, n_reps: int):
    if n_reps >= STEADY_STATE_MIN_REPS:
        return _steady_n0(eta, gamma1, tau)
    return np.array([
        model.population_finite_n(eta, gamma1, t, n_reps).n0 for t in tau
    ])


def _expected_counts(n0, readout: ReadoutModel, n_reps: int, invert: bool = False):
    pol = 1.0 - n0 if invert else n0
    return n_reps * readout.counts_bright * (1.0 - readout.contrast * (1.0 - pol))


def simulate_curve(config: CurveSimConfig) -> DecayCurve:
    """Simulate one relaxometry decay under the configured readout.

    Counts are summed over ``n_reps`` repetitions per dark time and returned
    as per-repetition means; with a reference channel the pi-pulse-inverted
    sequence is simulated alongside. Channels are raw (not normalized).
    """
    eta = model.eta_from_pulse(config.t_p, config.rates.gamma_p)
    n0 = _population_curve(eta, config.rates.gamma1, config.tau_grid, config.n_reps)
    sig_tot = _expected_counts(n0, config.readout, config.n_reps)
    ref_tot = (_expected_counts(n0, config.readout, config.n_reps, invert=True)
               if config.reference_channel else None)
    sigma = None
    if config.readout.shot_noise:
        rng = np.random.default_rng(config.seed)
        sigma = np.sqrt(sig_tot) / config.n_reps
        sig_tot = rng.poisson(sig_tot).astype(float)
        if ref_tot is not None:
            ref_tot = rng.poisson(ref_tot).astype(float)
    return DecayCurve(
        tau=config.tau_grid,
        signal=sig_tot / config.n_reps,
        reference=None if ref_tot is None else ref_tot / config.n_reps,
        sigma=sigma,
    )


def simulate_ensemble_curve(rate_mean: float, rate_sd: float, n_members: int,
                            eta: float, config: CurveSimConfig) -> DecayCurve:
    """Average decay of an ensemble with normally distributed rates.

    Member rates are drawn from N(rate_mean, rate_sd) truncated to positive
    values; all members share the polarization inefficiency ``eta``. The
    grid, repetitions, readout and seed come from ``config``.
    """
    if rate_sd < 0:
        raise ValueError(f"rate_sd must be >= 0, got {rate_sd}")
    if n_members < 1:
        raise ValueError(f"n_members must be >= 1, got {n_members}")
    model.validate_eta(eta)
    rng = np.random.default_rng(config.seed)
    gammas = rng.normal(rate_mean, rate_sd, n_members)
    while np.any(gammas <= 0):
        bad = gammas <= 0
        gammas[bad] = rng.normal(rate_mean, rate_sd, int(bad.sum()))
    n0 = _steady_n0(eta, gammas[:, None], config.tau_grid[None, :]).mean(axis=0)
    sig_tot = _expected_counts(n0, config.readout, config.n_reps)
    ref_tot = (_expected_counts(n0, config.readout, config.n_reps, invert=True)
               if config.reference_channel else None)
    sigma = None
    if config.readout.shot_noise:
        sigma = np.sqrt(sig_tot) / config.n_reps
        sig_tot = rng.poisson(sig_tot).astype(float)
        if ref_tot is not None:
            ref_tot = rng.poisson(ref_tot).astype(float)
    return DecayCurve(
        tau=config.tau_grid,
        signal=sig_tot / config.n_reps,
        reference=None if ref_tot is None else ref_tot / config.n_reps,
        sigma=sigma,
    )


@dataclass(frozen=True)
class BeamProfile:
    """Circular Gaussian pumping-rate profile: peak at center, 1/e^2 radius."""

    center: Tuple[float, float]  # (x, y) in pixels
    waist: float                 # 1/e^2 intensity radius, pixels
    peak_gamma_p: float          # Hz at beam center

    def __post_init__(self):
        if not (self.waist > 0):
            raise ValueError(f"waist must be > 0, got {self.waist}")
        if not (self.peak_gamma_p > 0):
            raise ValueError(f"peak_gamma_p must be > 0, got {self.peak_gamma_p}")

    def gamma_p(self, x, y):
        r2 = (np.asarray(x) - self.center[0]) ** 2 + (np.asarray(y) - self.center[1]) ** 2
        return self.peak_gamma_p * np.exp(-2.0 * r2 / self.waist ** 2)


@dataclass(frozen=True)
class Particle:
    """Disk-shaped paramagnetic target adding gamma_target inside its radius."""

    center: Tuple[float, float]  # (x, y) in pixels
    radius: float                # pixels
    gamma_target: float          # Hz

    def __post_init__(self):
        if not (self.radius > 0):
            raise ValueError(f"radius must be > 0, got {self.radius}")
        if not (self.gamma_target > 0):
            raise ValueError(f"gamma_target must be > 0, got {self.gamma_target}")


@dataclass
class SceneConfig:
    """A synthetic widefield field of view."""

    width: int
    height: int
    beam: BeamProfile
    gamma1_background: float
    particles: List[Particle]
    t_p: float
    tau_grid: Sequence[float]
    n_reps: int = 1000
    readout: ReadoutModel = field(default_factory=ReadoutModel)
    seed: int = 0

    def __post_init__(self):
        self.tau_grid = _check_tau_grid(self.tau_grid)
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if not (self.gamma1_background > 0):
            raise ValueError("gamma1_background must be > 0")
        if not (self.t_p > 0):
            raise ValueError("t_p must be > 0")
        if self.n_reps < 1:
            raise ValueError("n_reps must be >= 1")
        for p in self.particles:
            x, y = p.center
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ValueError(f"particle at {p.center} outside {self.width}x{self.height}")


def scene_truth_maps(scene: SceneConfig):
    """Ground-truth eta and gamma1 maps implied by a scene, as ScalarMaps."""
    ys, xs = np.mgrid[0:scene.height, 0:scene.width]
    gp = scene.beam.gamma_p(xs, ys)
    eta_map = np.exp(-scene.t_p * gp)
    g1_map = np.full((scene.height, scene.width), scene.gamma1_background, dtype=float)
    for p in scene.particles:
        inside = (xs - p.center[0]) ** 2 + (ys - p.center[1]) ** 2 <= p.radius ** 2
        g1_map[inside] += p.gamma_target
    full = np.ones_like(eta_map, dtype=bool)
    prov = {"source": "simulate_widefield", "seed": scene.seed}
    return (ScalarMap(eta_map, full.copy(), "eta", "dimensionless", dict(prov)),
            ScalarMap(g1_map, full.copy(), "gamma1", "Hz", dict(prov)))


def simulate_widefield(scene: SceneConfig):
    """Simulate a widefield relaxometry stack with known ground truth.

    Returns ``(stack, truth)`` where ``truth`` is a dict of ScalarMaps
    ("eta", "gamma1"). The stack carries signal and pi-pulse reference
    channels of photon counts per plane (summed over repetitions).
    """
    eta_truth, g1_truth = scene_truth_maps(scene)
    eta_map = eta_truth.values
    g1_map = g1_truth.values
    tau = scene.tau_grid
    n0 = _steady_n0(eta_map[None, :, :], g1_map[None, :, :], tau[:, None, None])
    sig = _expected_counts(n0, scene.readout, scene.n_reps)
    ref = _expected_counts(n0, scene.readout, scene.n_reps, invert=True)
    if scene.readout.shot_noise:
        rng = np.random.default_rng(scene.seed)
        sig = rng.poisson(sig).astype(np.float32)
        ref = rng.poisson(ref).astype(np.float32)
    stack = ImageStack(
        taus=tau,
        signal=sig.astype(np.float32),
        reference=ref.astype(np.float32),
        metadata={
            "width": scene.width,
            "height": scene.height,
            "t_p": scene.t_p,
            "n_reps": scene.n_reps,
            "seed": scene.seed,
            "counts_bright": scene.readout.counts_bright,
            "contrast": scene.readout.contrast,
            "shot_noise": scene.readout.shot_noise,
        },
    )
    return stack, {"eta": eta_truth, "gamma1": g1_truth}


def log_tau_grid(start: float, stop: float, points: int) -> np.ndarray:
    """Log-spaced dark-time grid, the default spacing for simulations."""
    if not (0 < start < stop) or points < 2:
        raise ValueError("need 0 < start < stop and points >= 2")
    return np.geomspace(start, stop, points)
