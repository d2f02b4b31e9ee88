"""Analytic two-state spin dynamics: propagators, populations and PL models.

Conventions used throughout the package:

* times in seconds, rates in Hz
* the spin contrast decays as exp(-2*gamma1*tau), so the single-exponential
  model is A*exp(-2*gamma1*tau) + c and fitted rates from all three models
  are directly comparable
* population vectors are ordered (n0, n1) with n0 the polarized state
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# Jarmola-style empirical room-temperature ensemble relaxation rate:
# gamma1 = JARMOLA_SLOPE * density_ppm + JARMOLA_OFFSET  [s^-1]
JARMOLA_SLOPE = 0.82
JARMOLA_OFFSET = 175.5

# gammaP/gamma1 ratio above which the polarization step may be treated as
# instantaneous relative to spin relaxation.
WEAK_RELAXATION_RATIO = 100.0


class DomainError(ValueError):
    """Raised when a parameter lies outside the model's domain."""


@dataclass(frozen=True)
class Rates:
    """Spin relaxation rate gamma1 and optical pumping rate gamma_p, in Hz."""

    gamma1: float
    gamma_p: float = 0.0

    def __post_init__(self):
        if not (self.gamma1 > 0):
            raise DomainError(f"gamma1 must be > 0, got {self.gamma1}")
        if self.gamma_p < 0:
            raise DomainError(f"gamma_p must be >= 0, got {self.gamma_p}")

    @property
    def weak_relaxation(self) -> bool:
        """True when pumping dominates relaxation (gamma_p >= 100*gamma1)."""
        return self.gamma_p >= WEAK_RELAXATION_RATIO * self.gamma1


class Population(NamedTuple):
    """Occupation probabilities (n0, n1) of the two spin states."""

    n0: float
    n1: float

    def validate(self, tol: float = 1e-12) -> "Population":
        if abs(self.n0 + self.n1 - 1.0) > tol:
            raise DomainError(f"populations must sum to 1: {self}")
        if not (-tol <= self.n0 <= 1 + tol and -tol <= self.n1 <= 1 + tol):
            raise DomainError(f"populations must lie in [0, 1]: {self}")
        return self


def validate_eta(eta: float) -> float:
    """Check 0 <= eta < 1 (eta = 1 means no polarization; model singular)."""
    if not (0.0 <= eta < 1.0):
        raise DomainError(f"eta must lie in [0, 1), got {eta}")
    return float(eta)


@dataclass(frozen=True)
class TwoStateParams:
    """Parameters of the two-state PL model (eta-1)/(eta - A*exp(2*g1*tau)) + c."""

    gamma1: float
    eta: float
    amplitude: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if not (self.gamma1 > 0):
            raise DomainError(f"gamma1 must be > 0, got {self.gamma1}")
        validate_eta(self.eta)
        if not (self.amplitude > self.eta):
            # keeps the model denominator sign-definite for all tau >= 0
            raise DomainError(
                f"amplitude must exceed eta ({self.amplitude} <= {self.eta})")


@dataclass(frozen=True)
class StretchedExpParams:
    """Parameters of the stretched-exponential model A*exp(-(t*g1)^p) + c."""

    gamma1: float
    stretch: float
    amplitude: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if not (self.gamma1 > 0):
            raise DomainError(f"gamma1 must be > 0, got {self.gamma1}")
        if not (0.0 < self.stretch <= 2.0):
            raise DomainError(f"stretch must lie in (0, 2], got {self.stretch}")


# ---------------------------------------------------------------------------
# Propagators
# ---------------------------------------------------------------------------

def transition_matrix(rates: Rates) -> np.ndarray:
    """Generator matrix of the coupled two-state rate equations.

    Columns sum to zero; exp(T*t) is the full propagator.
    """
    g1, gp = rates.gamma1, rates.gamma_p
    return np.array([[-g1, g1 + gp],
                     [g1, -g1 - gp]], dtype=float)


def full_propagator(rates: Rates, t: float) -> np.ndarray:
    """Closed-form exp(T*t) for the two-state generator.

    Entries decay with exp(-t*(2*gamma1 + gamma_p)) toward the stationary
    column ((g1+gp)/(2*g1+gp), g1/(2*g1+gp)).
    """
    if t < 0:
        raise DomainError(f"t must be >= 0, got {t}")
    g1, gp = rates.gamma1, rates.gamma_p
    d = 2.0 * g1 + gp
    e = np.exp(-t * d)
    return np.array([
        [(g1 + gp) / d + g1 * e / d, (g1 + gp) / d - (g1 + gp) * e / d],
        [g1 / d - g1 * e / d, g1 / d + (g1 + gp) * e / d],
    ])


def eta_from_pulse(t_p: float, gamma_p: float) -> float:
    """Polarization inefficiency eta = exp(-t_p*gamma_p) of a finite pulse."""
    if not (t_p > 0):
        raise DomainError(f"t_p must be > 0, got {t_p}")
    if gamma_p < 0:
        raise DomainError(f"gamma_p must be >= 0, got {gamma_p}")
    return validate_eta(np.exp(-t_p * gamma_p))


def pol_propagator(eta: float) -> np.ndarray:
    """Polarization-step propagator [[1, 1-eta], [0, eta]]."""
    validate_eta(eta)
    return np.array([[1.0, 1.0 - eta], [0.0, eta]])


def relax_propagator(gamma1: float, tau: float) -> np.ndarray:
    """Dark-time propagator; off-diagonal mixing (1 - exp(-2*g1*tau))/2."""
    if not (gamma1 > 0):
        raise DomainError(f"gamma1 must be > 0, got {gamma1}")
    if tau < 0:
        raise DomainError(f"tau must be >= 0, got {tau}")
    e = np.exp(-2.0 * gamma1 * tau)
    return 0.5 * np.array([[1.0 + e, 1.0 - e], [1.0 - e, 1.0 + e]])


# ---------------------------------------------------------------------------
# Populations
# ---------------------------------------------------------------------------

def population_finite_n(eta: float, gamma1: float, tau: float, n_reps: int,
                        n_init: Population = Population(1.0, 0.0)) -> Population:
    """Population at readout after n_reps pump/relax cycles.

    Each cycle applies the polarization step and then the dark-time
    relaxation, so the state returned is (S_relax @ S_pol)^N @ n_init.
    """
    if n_reps < 1:
        raise DomainError(f"n_reps must be >= 1, got {n_reps}")
    cycle = relax_propagator(gamma1, tau) @ pol_propagator(eta)
    n = np.linalg.matrix_power(cycle, n_reps) @ np.asarray(n_init, dtype=float)
    return Population(float(n[0]), float(n[1]))


def population_finite_n_closed(eta: float, gamma1: float, tau: float,
                               n_reps: int) -> Population:
    """Closed-form finite-repetition population for a polarized start (1, 0).

    Agrees with the iterated matrix-product path to machine precision; the
    deviation from the steady state shrinks geometrically with ratio
    eta*exp(-2*gamma1*tau).
    """
    if n_reps < 1:
        raise DomainError(f"n_reps must be >= 1, got {n_reps}")
    validate_eta(eta)
    ep = np.exp(2.0 * gamma1 * tau)
    em = np.exp(-2.0 * gamma1 * tau)
    etaN = eta ** n_reps
    denom = 2.0 * (ep - eta)
    n0 = (ep - 2.0 * eta + etaN * em ** (n_reps - 1) - etaN * em ** n_reps
          + 1.0) / denom
    n1 = -(ep - 1.0) * ((eta * em) ** n_reps - 1.0) / denom
    return Population(float(n0), float(n1))


def population_steady(eta: float, gamma1: float, tau: float) -> Population:
    """Steady-state (N -> infinity) population at readout."""
    validate_eta(eta)
    if not (gamma1 > 0):
        raise DomainError(f"gamma1 must be > 0, got {gamma1}")
    if tau < 0:
        raise DomainError(f"tau must be >= 0, got {tau}")
    with np.errstate(over="ignore"):
        # overflowing exp drives the correction term to 0, the correct limit
        n0 = 0.5 * (1.0 + (eta - 1.0) / (eta - np.exp(2.0 * gamma1 * tau)))
    return Population(float(n0), float(1.0 - n0))


def apparent_rate(gamma1: float, eta: float) -> float:
    """Relaxation rate gamma1/(1 - eta) seen by a naive exponential fit."""
    if not (gamma1 > 0):
        raise DomainError(f"gamma1 must be > 0, got {gamma1}")
    validate_eta(eta)
    return gamma1 / (1.0 - eta)


# ---------------------------------------------------------------------------
# PL fit models and their analytic Jacobians
# ---------------------------------------------------------------------------

def pl_two_state(tau, params: TwoStateParams):
    """Normalized PL of the two-state model."""
    g1, eta, a, c = params.gamma1, params.eta, params.amplitude, params.offset
    with np.errstate(over="ignore"):
        return (eta - 1.0) / (eta - a * np.exp(2.0 * g1 * np.asarray(tau))) + c


def pl_single_exp(tau, gamma1: float, amplitude: float, offset: float):
    """Single-exponential PL model A*exp(-2*gamma1*tau) + c."""
    return amplitude * np.exp(-2.0 * gamma1 * np.asarray(tau)) + offset


def pl_stretched_exp(tau, params: StretchedExpParams):
    """Stretched-exponential PL model A*exp(-(tau*gamma1)^p) + c."""
    g1, p, a, c = params.gamma1, params.stretch, params.amplitude, params.offset
    return a * np.exp(-(np.asarray(tau) * g1) ** p) + c


def jacobian_two_state(tau, params: TwoStateParams) -> np.ndarray:
    """Partials of pl_two_state w.r.t. (gamma1, eta, amplitude, offset).

    Returns an array of shape (len(tau), 4).
    """
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    g1, eta, a = params.gamma1, params.eta, params.amplitude
    ep = np.exp(2.0 * g1 * tau)
    den = eta - a * ep
    den2 = den * den
    d_g1 = 2.0 * a * tau * ep * (eta - 1.0) / den2
    d_eta = (1.0 - a * ep) / den2
    d_a = ep * (eta - 1.0) / den2
    d_c = np.ones_like(tau)
    return np.stack([d_g1, d_eta, d_a, d_c], axis=-1)


def jacobian_single_exp(tau, gamma1: float, amplitude: float,
                        offset: float) -> np.ndarray:
    """Partials of pl_single_exp w.r.t. (gamma1, amplitude, offset)."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    e = np.exp(-2.0 * gamma1 * tau)
    return np.stack([-2.0 * amplitude * tau * e, e, np.ones_like(tau)], axis=-1)


def jacobian_stretched_exp(tau, params: StretchedExpParams) -> np.ndarray:
    """Partials of pl_stretched_exp w.r.t. (gamma1, stretch, amplitude, offset)."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    g1, p, a = params.gamma1, params.stretch, params.amplitude
    u = tau * g1
    up = u ** p
    e = np.exp(-up)
    with np.errstate(divide="ignore", invalid="ignore"):
        d_g1 = np.where(u > 0, -a * e * p * u ** (p - 1.0) * tau, 0.0)
        # u^p * log(u) -> 0 as u -> 0+ for p > 0
        d_p = np.where(u > 0, -a * e * up * np.log(np.where(u > 0, u, 1.0)), 0.0)
    return np.stack([d_g1, d_p, e, np.ones_like(tau)], axis=-1)


# ---------------------------------------------------------------------------
# Derived rates
# ---------------------------------------------------------------------------

class TargetRate(NamedTuple):
    """Rate difference attributed to an external target, with a sanity flag."""

    rate_hz: float
    unphysical: bool


def target_rate(gamma_measured: float, gamma_intrinsic: float) -> TargetRate:
    """Decay rate attributed to an external target: measured - intrinsic.

    Negative results are flagged unphysical rather than rejected.
    """
    if gamma_measured < 0 or gamma_intrinsic < 0:
        raise DomainError("rates must be >= 0")
    diff = gamma_measured - gamma_intrinsic
    return TargetRate(diff, diff < 0)


def jarmola_intrinsic_rate(nv_density_ppm: float) -> float:
    """Empirical room-temperature ensemble relaxation rate, in s^-1."""
    if nv_density_ppm < 0:
        raise DomainError(f"density must be >= 0, got {nv_density_ppm}")
    return JARMOLA_SLOPE * nv_density_ppm + JARMOLA_OFFSET
