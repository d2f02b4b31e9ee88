"""Weighted Levenberg-Marquardt least squares and decay-model fit drivers.

Bounds are enforced through smooth reparameterizations (log for one-sided,
scaled logit for two-sided), so the core iteration is unconstrained and the
fitted parameters satisfy their domain constraints exactly. Covariances are
mapped back through the transform Jacobian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .curves import DecayCurve
from . import model

_LOGIT_EPS = 1e-12


@dataclass
class ParamSpec:
    """One fit parameter: name, initial value, fixed flag and bounds."""

    name: str
    value: float
    fixed: bool = False
    lower: float = -math.inf
    upper: float = math.inf

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"{self.name}: bounds [{self.lower}, {self.upper}] empty")
        if not (self.lower <= self.value <= self.upper):
            raise ValueError(
                f"{self.name}: initial {self.value} outside [{self.lower}, {self.upper}]")


@dataclass
class FitResult:
    """Converged (or best-so-far) parameters with uncertainties and diagnostics."""

    param_names: List[str]
    values: np.ndarray
    stderr: np.ndarray
    covariance: np.ndarray
    chi2: float
    red_chi2: float
    n_points: int
    n_free: int
    iterations: int
    converged: bool
    message: str = ""
    flags: List[str] = field(default_factory=list)

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.param_names.index(name)])

    def stderr_of(self, name: str) -> float:
        return float(self.stderr[self.param_names.index(name)])

    def correlation(self, name_a: str, name_b: str) -> float:
        ia = self.param_names.index(name_a)
        ib = self.param_names.index(name_b)
        denom = self.stderr[ia] * self.stderr[ib]
        if denom == 0:
            return 0.0
        return float(self.covariance[ia, ib] / denom)

    def to_dict(self) -> dict:
        return {
            "params": {
                name: {"value": float(v), "stderr": float(s)}
                for name, v, s in zip(self.param_names, self.values, self.stderr)
            },
            "covariance": self.covariance.tolist(),
            "chi2": float(self.chi2),
            "red_chi2": float(self.red_chi2),
            "n_points": self.n_points,
            "n_free": self.n_free,
            "iterations": self.iterations,
            "converged": bool(self.converged),
            "message": self.message,
            "flags": list(self.flags),
        }


# ---------------------------------------------------------------------------
# Bound transforms
# ---------------------------------------------------------------------------

def _to_internal(x, lo, hi):
    if math.isfinite(lo) and math.isfinite(hi):
        s = (x - lo) / (hi - lo)
        s = min(max(s, _LOGIT_EPS), 1.0 - _LOGIT_EPS)
        return math.log(s / (1.0 - s))
    if math.isfinite(lo):
        return math.log(max(x - lo, 1e-300))
    if math.isfinite(hi):
        return math.log(max(hi - x, 1e-300))
    return x


def _to_external(u, lo, hi):
    if math.isfinite(lo) and math.isfinite(hi):
        if u >= 0:
            s = 1.0 / (1.0 + math.exp(-u))
        else:
            e = math.exp(u)
            s = e / (1.0 + e)
        return lo + (hi - lo) * s
    if math.isfinite(lo):
        return lo + math.exp(min(u, 700.0))
    if math.isfinite(hi):
        return hi - math.exp(min(u, 700.0))
    return u


def _dx_du(u, lo, hi):
    if math.isfinite(lo) and math.isfinite(hi):
        if u >= 0:
            s = 1.0 / (1.0 + math.exp(-u))
        else:
            e = math.exp(u)
            s = e / (1.0 + e)
        return (hi - lo) * s * (1.0 - s)
    if math.isfinite(lo):
        return math.exp(min(u, 700.0))
    if math.isfinite(hi):
        return -math.exp(min(u, 700.0))
    return 1.0


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------

def finite_difference_jacobian(residuals: Callable, x: np.ndarray) -> np.ndarray:
    """Central-difference Jacobian; steps scale with cbrt(machine epsilon)."""
    h0 = np.finfo(float).eps ** (1.0 / 3.0)
    r0 = np.atleast_1d(residuals(x))
    jac = np.empty((r0.size, x.size))
    for j in range(x.size):
        h = h0 * max(abs(x[j]), 1.0)
        xp = x.copy(); xp[j] += h
        xm = x.copy(); xm[j] -= h
        jac[:, j] = (np.atleast_1d(residuals(xp)) - np.atleast_1d(residuals(xm))) / (2.0 * h)
    return jac


def lm_minimize(residuals: Callable[[np.ndarray], np.ndarray],
                specs: Sequence[ParamSpec],
                jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                max_iter: int = 200,
                lambda0: float = 1e-3,
                ftol: float = 1e-10,
                gtol: float = 1e-12,
                weighted: bool = True) -> FitResult:
    """Minimize sum(residuals(x)**2) over the free parameters in ``specs``.

    ``residuals(x)`` receives the full parameter vector in spec order and
    returns the (already weighted) residual array; ``jacobian(x)`` its
    derivative w.r.t. all parameters, or None for central finite differences.

    The damping schedule is x10 on a rejected step and /10 on an accepted
    one; iteration stops on relative cost change < ftol, gradient infinity
    norm < gtol, or ``max_iter`` accepted steps. On non-convergence the best
    point seen so far is returned with ``converged=False``.
    """
    names = [s.name for s in specs]
    x = np.array([s.value for s in specs], dtype=float)
    free = [i for i, s in enumerate(specs) if not s.fixed]
    n_par = len(specs)
    n_free = len(free)
    lo = np.array([specs[i].lower for i in free])
    hi = np.array([specs[i].upper for i in free])

    def x_of(u):
        out = x.copy()
        for k, i in enumerate(free):
            out[i] = _to_external(u[k], lo[k], hi[k])
        return out

    r = np.atleast_1d(np.asarray(residuals(x), dtype=float))
    n_pts = r.size
    if n_pts < n_free:
        raise ValueError(f"{n_pts} points < {n_free} free parameters")
    cost = float(r @ r)
    if not math.isfinite(cost):
        raise ValueError("residuals not finite at the initial point")

    if n_free == 0:
        zeros = np.zeros(n_par)
        red = cost / max(n_pts, 1) if weighted else cost
        return FitResult(names, x, zeros, np.zeros((n_par, n_par)), cost, red,
                         n_pts, 0, 0, True, "all parameters fixed")

    if jacobian is None:
        jacobian = lambda xv: finite_difference_jacobian(residuals, xv)

    u = np.array([_to_internal(x[i], lo[k], hi[k]) for k, i in enumerate(free)])
    # bounded components move through a squashing transform whose derivative
    # vanishes at the bounds; cap their internal step so an overshoot cannot
    # pin them against a bound with zero gradient
    step_cap = np.array([4.0 if (math.isfinite(l) or math.isfinite(h)) else np.inf
                         for l, h in zip(lo, hi)])
    lam = lambda0
    iterations = 0
    converged = False
    message = "max iterations reached"
    flags: List[str] = []

    while iterations < max_iter:
        xv = x_of(u)
        jac_x = np.atleast_2d(np.asarray(jacobian(xv), dtype=float))
        dxdu = np.array([_dx_du(u[k], lo[k], hi[k]) for k in range(n_free)])
        jac = jac_x[:, free] * dxdu
        grad = jac.T @ r
        if np.max(np.abs(grad)) < gtol:
            converged = True
            message = "gradient norm below tolerance"
            break
        jtj = jac.T @ jac
        diag = np.diag(np.maximum(np.diag(jtj), 1e-300))

        accepted = False
        for _ in range(60):
            try:
                step = np.linalg.solve(jtj + lam * diag, -grad)
            except np.linalg.LinAlgError:
                if "singular normal matrix" not in flags:
                    flags.append("singular normal matrix")
                lam *= 10.0
                continue
            u_try = u + np.clip(step, -step_cap, step_cap)
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                r_try = np.atleast_1d(np.asarray(residuals(x_of(u_try)), dtype=float))
                cost_try = float(r_try @ r_try)
            if math.isfinite(cost_try) and cost_try < cost:
                rel = (cost - cost_try) / max(cost, 1e-300)
                u, r, cost = u_try, r_try, cost_try
                lam = max(lam / 10.0, 1e-14)
                iterations += 1
                accepted = True
                if rel < ftol:
                    converged = True
                    message = "relative cost change below tolerance"
                break
            lam *= 10.0
            if lam > 1e14:
                break
        if not accepted:
            if lam > 1e14:
                # cannot improve further; accept the point as stationary
                converged = True
                message = "no further improvement possible"
            else:
                message = "step repeatedly rejected"
            break
        if converged:
            break

    xv = x_of(u)
    jac_x = np.atleast_2d(np.asarray(jacobian(xv), dtype=float))
    dxdu = np.array([_dx_du(u[k], lo[k], hi[k]) for k in range(n_free)])
    jac = jac_x[:, free] * dxdu
    jtj = jac.T @ jac
    dof = max(n_pts - n_free, 1)
    scale = cost / dof
    try:
        cov_u = np.linalg.inv(jtj) * scale
    except np.linalg.LinAlgError:
        cov_u = np.linalg.pinv(jtj) * scale
        if "singular normal matrix" not in flags:
            flags.append("singular normal matrix")
    cov = np.zeros((n_par, n_par))
    cov_x = (cov_u * dxdu) * dxdu[:, None]
    for a, ia in enumerate(free):
        for b, ib in enumerate(free):
            cov[ia, ib] = cov_x[a, b]
    stderr = np.sqrt(np.maximum(np.diag(cov), 0.0))
    red_chi2 = cost / dof if weighted else cost
    return FitResult(names, xv, stderr, cov, cost, red_chi2, n_pts, n_free,
                     iterations, converged, message, flags)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def normalize_curve(curve: DecayCurve) -> DecayCurve:
    """Normalize a two-channel curve to (S - R)/(S0 - R0).

    This cancels common-mode (multiplicative) drifts of both channels. When
    the input carries ``sigma``, the channel variances are taken to scale
    like Poisson counts (var proportional to the mean, with the
    proportionality read off sigma**2/signal) and propagated to first order.
    """
    if curve.reference is None:
        raise ValueError("normalize_curve requires a reference channel")
    s = curve.signal
    r = curve.reference
    denom = s[0] - r[0]
    if denom == 0:
        raise ValueError("first-point signal equals reference: zero denominator")
    value = (s - r) / denom
    sigma = None
    if curve.sigma is not None:
        # per-point Poisson scaling factor k with var(S_i) = k_i * S_i.
        # The shared-denominator fluctuation is a common-mode scale error
        # (absorbed by the amplitude), so only per-point variance is kept.
        with np.errstate(divide="ignore", invalid="ignore"):
            k = np.where(s > 0, curve.sigma ** 2 / s, 0.0)
        var = (k * (s + r)) / denom ** 2
        sigma = np.sqrt(np.maximum(var, 0.0))
        sigma = np.maximum(sigma, 1e-12 * np.max(sigma) + 1e-300)
    return DecayCurve(tau=curve.tau, signal=value, sigma=sigma)


def normalize_tail(curve: DecayCurve, tail_fraction: float = 0.2) -> DecayCurve:
    """Normalize a single-channel curve to (S - S_inf)/(S0 - S_inf).

    S_inf is estimated from the mean of the trailing ``tail_fraction`` of
    points; any residual offset is absorbed by the fit models' ``offset``.
    """
    s = curve.signal
    k = max(3, int(round(len(s) * tail_fraction)))
    s_inf = float(np.mean(s[-k:]))
    denom = s[0] - s_inf
    if denom == 0:
        raise ValueError("flat curve: first point equals tail mean")
    sigma = None if curve.sigma is None else curve.sigma / abs(denom)
    return DecayCurve(tau=curve.tau, signal=(s - s_inf) / denom, sigma=sigma)


def _prepared(curve: DecayCurve) -> DecayCurve:
    return normalize_curve(curve) if curve.reference is not None else curve


def _tail_stats(y: np.ndarray, tail_fraction: float = 0.2):
    k = max(3, int(round(len(y) * tail_fraction)))
    return float(np.mean(y[-k:])), float(np.std(y[-k:]))


def _init_gamma(tau: np.ndarray, y: np.ndarray, offset0: float, amp0: float) -> float:
    """Rate guess from the 1/e crossing of the (offset-removed) curve."""
    target = offset0 + amp0 / math.e
    below = np.nonzero(y <= target)[0]
    idx = below[0] if below.size else len(tau) // 2
    t_e = tau[idx] if tau[idx] > 0 else tau[min(1, len(tau) - 1)]
    return 1.0 / (2.0 * t_e)


def _objective(curve: DecayCurve, model_fn, jac_fn):
    tau, y = curve.tau, curve.signal
    if curve.sigma is not None:
        inv_sig = 1.0 / curve.sigma
        weighted = True
    else:
        inv_sig = np.ones_like(y)
        weighted = False

    def residuals(x):
        return (model_fn(tau, x) - y) * inv_sig

    def jacobian(x):
        return jac_fn(tau, x) * inv_sig[:, None]

    return residuals, jacobian, weighted


def _apply_fixed(specs: List[ParamSpec], fixed: Optional[dict]) -> List[ParamSpec]:
    """Replace named specs with fixed ones; unknown names are an error."""
    if not fixed:
        return specs
    names = [s.name for s in specs]
    for name, value in fixed.items():
        if name not in names:
            raise ValueError(f"unknown parameter name {name!r} "
                             f"(expected one of {names})")
        i = names.index(name)
        specs[i] = ParamSpec(name, float(value), fixed=True)
    return specs


def fit_single_exp(curve: DecayCurve, fixed: Optional[dict] = None,
                   **lm_opts) -> FitResult:
    """Fit A*exp(-2*gamma1*tau) + c; initial values are data-driven."""
    curve = _prepared(curve)
    y = curve.signal
    c0, _ = _tail_stats(y)
    a0 = max(y[0] - c0, 1e-6)
    g0 = _init_gamma(curve.tau, y, c0, a0)
    specs = [
        ParamSpec("gamma1", g0, lower=0.0),
        ParamSpec("amplitude", a0, lower=0.0),
        ParamSpec("offset", c0),
    ]
    specs = _apply_fixed(specs, fixed)
    res, jac, weighted = _objective(
        curve,
        lambda t, x: model.pl_single_exp(t, x[0], x[1], x[2]),
        lambda t, x: model.jacobian_single_exp(t, x[0], x[1], x[2]),
    )
    return lm_minimize(res, specs, jacobian=jac, weighted=weighted, **lm_opts)


def fit_stretched_exp(curve: DecayCurve, fixed: Optional[dict] = None,
                      **lm_opts) -> FitResult:
    """Fit A*exp(-(tau*gamma1)^p) + c with the stretch bounded in (0, 2]."""
    curve = _prepared(curve)
    y = curve.signal
    c0, _ = _tail_stats(y)
    a0 = max(y[0] - c0, 1e-6)
    # stretched convention has no factor 2 in the exponent
    g0 = 2.0 * _init_gamma(curve.tau, y, c0, a0)
    specs = [
        ParamSpec("gamma1", g0, lower=0.0),
        ParamSpec("stretch", 1.0, lower=1e-6, upper=2.0),
        ParamSpec("amplitude", a0, lower=0.0),
        ParamSpec("offset", c0),
    ]
    specs = _apply_fixed(specs, fixed)

    def fn(t, x):
        with np.errstate(invalid="ignore"):
            return x[2] * np.exp(-(t * x[0]) ** x[1]) + x[3]

    def jac(t, x):
        return model.jacobian_stretched_exp(
            t, model.StretchedExpParams(x[0], min(max(x[1], 1e-9), 2.0), x[2], x[3]))

    res, jacw, weighted = _objective(curve, fn, jac)
    return lm_minimize(res, specs, jacobian=jacw, weighted=weighted, **lm_opts)


def fit_two_state(curve: DecayCurve, eta_spec: Optional[ParamSpec] = None,
                  gamma1_spec: Optional[ParamSpec] = None,
                  fixed: Optional[dict] = None,
                  **lm_opts) -> FitResult:
    """Fit the two-state PL model; eta may be free (bounded [0, 1)) or fixed.

    ``gamma1_spec`` allows pinning the rate instead (the polarization
    characterization mode). The amplitude is bounded to
    [max(eta + eps, 0.5), 2] so the model denominator stays sign-definite;
    data are assumed normalized to ~[0, 1]. A near-perfect correlation
    between eta and gamma1 is flagged.
    """
    curve = _prepared(curve)
    y = curve.signal
    fixed = dict(fixed) if fixed else {}
    if "eta" in fixed:
        if eta_spec is not None:
            raise ValueError("eta given both as spec and in fixed")
        eta_spec = ParamSpec("eta", fixed.pop("eta"), fixed=True)
    if "gamma1" in fixed:
        if gamma1_spec is not None:
            raise ValueError("gamma1 given both as spec and in fixed")
        gamma1_spec = ParamSpec("gamma1", fixed.pop("gamma1"), fixed=True)
    if eta_spec is None:
        eta_spec = ParamSpec("eta", 0.5, fixed=False, lower=0.0, upper=1.0 - 1e-9)
    if eta_spec.fixed:
        model.validate_eta(eta_spec.value)
    eta0 = eta_spec.value
    c0, _ = _tail_stats(y)
    a_lo = max(eta0 + 1e-6, 0.5) if eta_spec.fixed else 0.5
    # invert PL(0) = (1-eta)/(A-eta) + c for the amplitude guess
    y0 = y[0] - c0
    a0 = eta0 + (1.0 - eta0) / y0 if y0 > 0 else 1.0
    a0 = min(max(a0, a_lo + 1e-9), 2.0 - 1e-9)
    if gamma1_spec is None:
        g0 = _init_gamma(curve.tau, y, c0, max(y0, 1e-6))
        if eta_spec.fixed:
            g0 *= (1.0 - eta0)  # undo the apparent-rate inflation
        gamma1_spec = ParamSpec("gamma1", g0, lower=0.0)
    elif not gamma1_spec.fixed and not math.isfinite(gamma1_spec.lower):
        raise ValueError("free gamma1 requires a positive lower bound")
    specs = [
        gamma1_spec,
        eta_spec,
        ParamSpec("amplitude", a0, lower=a_lo, upper=2.0),
        ParamSpec("offset", c0),
    ]
    specs = _apply_fixed(specs, fixed)

    def fn(t, x):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            return (x[1] - 1.0) / (x[1] - x[2] * np.exp(2.0 * x[0] * t)) + x[3]

    def jac(t, x):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            ep = np.exp(2.0 * x[0] * t)
            den = x[1] - x[2] * ep
            den2 = den * den
            return np.stack([
                2.0 * x[2] * t * ep * (x[1] - 1.0) / den2,
                (1.0 - x[2] * ep) / den2,
                ep * (x[1] - 1.0) / den2,
                np.ones_like(t),
            ], axis=-1)

    res, jacw, weighted = _objective(curve, fn, jac)
    result = lm_minimize(res, specs, jacobian=jacw, weighted=weighted, **lm_opts)
    if not eta_spec.fixed and abs(result.correlation("eta", "gamma1")) > 0.99:
        result.flags.append("eta_gamma1_degenerate")
    if result["amplitude"] <= result["eta"]:
        result.flags.append("amplitude_below_eta")
    return result
