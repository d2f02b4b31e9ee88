"""Robust spin-relaxometry modeling, simulation and fitting.

Submodules:
    model     analytic two-state dynamics and PL fit models
    curves    decay-curve container and CSV format
    fitting   Levenberg-Marquardt engine, fit drivers, normalization
    simulate  synthetic curves, ensembles and widefield stacks
    stackio   image-stack manifest + raw plane format
    maps      scalar maps with masks, map files, graymap rendering
    pipeline  per-pixel widefield analysis
    cli       command-line front end
"""

from .curves import DecayCurve, read_curve_csv, write_curve_csv
from .fitting import (FitResult, ParamSpec, fit_single_exp, fit_stretched_exp,
                      fit_two_state, lm_minimize, normalize_curve, normalize_tail)
from .maps import ScalarMap, load_map, save_map
from .model import (DomainError, Population, Rates, StretchedExpParams,
                    TwoStateParams, apparent_rate, eta_from_pulse,
                    full_propagator, jarmola_intrinsic_rate, pl_single_exp,
                    pl_stretched_exp, pl_two_state, pol_propagator,
                    population_finite_n, population_steady, relax_propagator,
                    target_rate, transition_matrix)
from .pipeline import (ParticleList, RegionReport, analyze_particles,
                       characterize_eta, fit_rate_map, fit_rate_map_stretched,
                       render_map)
from .simulate import (BeamProfile, CurveSimConfig, Particle, ReadoutModel,
                       SceneConfig, log_tau_grid, simulate_curve,
                       simulate_ensemble_curve, simulate_widefield)
from .stackio import ImageStack, load_stack, save_stack

__version__ = "0.1.0"
