"""Command-line front end: simulate, fit, characterize, map, particles, render.

Exit codes: 0 success, 2 usage/input error, 3 analytic failure (partial
output is still written where possible). Numeric values accept unit
suffixes (us, ms, s, Hz, kHz); everything is stored in SI internally.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from typing import Dict, Optional

import numpy as np

from . import fitting, maps, model, pipeline, simulate, stackio
from .curves import read_curve_csv, write_curve_csv

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ANALYTIC = 3

CONFIG_VERSION = 1

_TIME_SUFFIXES = {"us": 1e-6, "ms": 1e-3, "s": 1.0}
_RATE_SUFFIXES = {"khz": 1e3, "hz": 1.0}


class CliError(Exception):
    """Usage or input error (exit code 2)."""


class AnalyticError(Exception):
    """Analysis failed on valid input (exit code 3)."""


def parse_time(value) -> float:
    """Seconds from a number or suffixed string like '10us' or '5ms'."""
    return _parse_quantity(value, _TIME_SUFFIXES, "time")


def parse_rate(value) -> float:
    """Hz from a number or suffixed string like '0.5kHz' or '180Hz'."""
    return _parse_quantity(value, _RATE_SUFFIXES, "rate")


def _parse_quantity(value, suffixes: Dict[str, float], what: str) -> float:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    text = str(value).strip()
    lower = text.lower()
    for suffix in sorted(suffixes, key=len, reverse=True):
        if lower.endswith(suffix):
            head = text[: len(text) - len(suffix)].strip()
            try:
                return float(head) * suffixes[suffix]
            except ValueError:
                break
    try:
        return float(text)
    except ValueError:
        raise CliError(f"cannot parse {what} value {value!r}") from None


# ---------------------------------------------------------------------------
# Config schemas
# ---------------------------------------------------------------------------

def _check_fields(obj: dict, required, optional, context: str):
    if not isinstance(obj, dict):
        raise CliError(f"{context}: expected a JSON object")
    for key in required:
        if key not in obj:
            raise CliError(f"{context}: missing required field {key!r}")
    allowed = set(required) | set(optional)
    for key in obj:
        if key not in allowed:
            raise CliError(f"{context}: unknown field {key!r}")


def _parse_tau(spec, context: str) -> np.ndarray:
    if isinstance(spec, list):
        return np.asarray([parse_time(t) for t in spec], dtype=float)
    _check_fields(spec, ["start", "stop", "points"], [], f"{context}.tau")
    return simulate.log_tau_grid(parse_time(spec["start"]), parse_time(spec["stop"]),
                                 int(spec["points"]))


def _parse_readout(spec, context: str) -> simulate.ReadoutModel:
    if spec is None:
        return simulate.ReadoutModel()
    _check_fields(spec, [], ["counts_bright", "contrast", "shot_noise"],
                  f"{context}.readout")
    defaults = simulate.ReadoutModel()
    try:
        return simulate.ReadoutModel(
            counts_bright=float(spec.get("counts_bright", defaults.counts_bright)),
            contrast=float(spec.get("contrast", defaults.contrast)),
            shot_noise=bool(spec.get("shot_noise", defaults.shot_noise)),
        )
    except ValueError as exc:
        raise CliError(f"{context}.readout: {exc}") from None


def _check_version(cfg: dict, context: str):
    if cfg.get("version") != CONFIG_VERSION:
        raise CliError(f"{context}: 'version' must be {CONFIG_VERSION}")


def _curve_config(cfg: dict) -> simulate.CurveSimConfig:
    _check_fields(cfg, ["version", "kind", "gamma1", "gamma_p", "t_p", "tau"],
                  ["n_reps", "readout", "reference_channel", "seed"], "curve config")
    _check_version(cfg, "curve config")
    try:
        return simulate.CurveSimConfig(
            rates=model.Rates(parse_rate(cfg["gamma1"]), parse_rate(cfg["gamma_p"])),
            t_p=parse_time(cfg["t_p"]),
            tau_grid=_parse_tau(cfg["tau"], "curve config"),
            n_reps=int(cfg.get("n_reps", 1000)),
            readout=_parse_readout(cfg.get("readout"), "curve config"),
            reference_channel=bool(cfg.get("reference_channel", True)),
            seed=int(cfg.get("seed", 0)),
        )
    except (ValueError, model.DomainError) as exc:
        raise CliError(f"curve config: {exc}") from None


def _simulate_curve_cmd(cfg: dict, outdir: str) -> dict:
    config = _curve_config(cfg)
    curve = simulate.simulate_curve(config)
    path = os.path.join(outdir, "curve.csv")
    write_curve_csv(path, curve)
    return {"kind": "curve", "outputs": [path], "points": len(curve)}


def _simulate_ensemble_cmd(cfg: dict, outdir: str) -> dict:
    _check_fields(cfg, ["version", "kind", "rate_mean", "rate_sd", "n_members",
                        "eta", "tau"],
                  ["n_reps", "readout", "reference_channel", "seed"],
                  "ensemble config")
    _check_version(cfg, "ensemble config")
    try:
        rate_mean = parse_rate(cfg["rate_mean"])
        base = simulate.CurveSimConfig(
            rates=model.Rates(rate_mean),
            t_p=1.0,  # unused: eta is given directly
            tau_grid=_parse_tau(cfg["tau"], "ensemble config"),
            n_reps=int(cfg.get("n_reps", 1000)),
            readout=_parse_readout(cfg.get("readout"), "ensemble config"),
            reference_channel=bool(cfg.get("reference_channel", True)),
            seed=int(cfg.get("seed", 0)),
        )
        curve = simulate.simulate_ensemble_curve(
            rate_mean, parse_rate(cfg["rate_sd"]), int(cfg["n_members"]),
            float(cfg["eta"]), base)
    except (ValueError, model.DomainError) as exc:
        raise CliError(f"ensemble config: {exc}") from None
    path = os.path.join(outdir, "curve.csv")
    write_curve_csv(path, curve)
    return {"kind": "ensemble", "outputs": [path], "points": len(curve)}


def _scene_config(cfg: dict) -> simulate.SceneConfig:
    _check_fields(cfg, ["version", "kind", "width", "height", "beam",
                        "gamma1_background", "t_p", "tau"],
                  ["particles", "n_reps", "readout", "seed"], "scene config")
    _check_version(cfg, "scene config")
    beam_cfg = cfg["beam"]
    _check_fields(beam_cfg, ["center", "waist", "peak_gamma_p"], [], "scene config.beam")
    particles = []
    for i, p in enumerate(cfg.get("particles", [])):
        _check_fields(p, ["center", "radius", "gamma_target"], [],
                      f"scene config.particles[{i}]")
        try:
            particles.append(simulate.Particle(
                center=(float(p["center"][0]), float(p["center"][1])),
                radius=float(p["radius"]),
                gamma_target=parse_rate(p["gamma_target"]),
            ))
        except (ValueError, IndexError, TypeError) as exc:
            raise CliError(f"scene config.particles[{i}]: {exc}") from None
    try:
        return simulate.SceneConfig(
            width=int(cfg["width"]),
            height=int(cfg["height"]),
            beam=simulate.BeamProfile(
                center=(float(beam_cfg["center"][0]), float(beam_cfg["center"][1])),
                waist=float(beam_cfg["waist"]),
                peak_gamma_p=parse_rate(beam_cfg["peak_gamma_p"]),
            ),
            gamma1_background=parse_rate(cfg["gamma1_background"]),
            particles=particles,
            t_p=parse_time(cfg["t_p"]),
            tau_grid=_parse_tau(cfg["tau"], "scene config"),
            n_reps=int(cfg.get("n_reps", 1000)),
            readout=_parse_readout(cfg.get("readout"), "scene config"),
            seed=int(cfg.get("seed", 0)),
        )
    except (ValueError, model.DomainError) as exc:
        raise CliError(f"scene config: {exc}") from None


def _simulate_scene_cmd(cfg: dict, outdir: str) -> dict:
    scene = _scene_config(cfg)
    stack, truth = simulate.simulate_widefield(scene)
    manifest = stackio.save_stack(stack, outdir, name="scene")
    outputs = [manifest]
    for key, smap in truth.items():
        outputs.append(maps.save_map(smap, os.path.join(outdir, f"truth_{key}")))
    return {"kind": "scene", "outputs": outputs,
            "width": scene.width, "height": scene.height,
            "planes": int(len(scene.tau_grid))}


def cmd_simulate(args) -> int:
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"malformed config JSON: {exc}") from None
    if not isinstance(cfg, dict) or "kind" not in cfg:
        raise CliError("config must be a JSON object with a 'kind' field")
    os.makedirs(args.output, exist_ok=True)
    dispatch = {
        "curve": _simulate_curve_cmd,
        "ensemble": _simulate_ensemble_cmd,
        "scene": _simulate_scene_cmd,
    }
    if cfg["kind"] not in dispatch:
        raise CliError(f"unknown config kind {cfg['kind']!r} "
                       f"(expected one of {sorted(dispatch)})")
    summary = dispatch[cfg["kind"]](cfg, args.output)
    json.dump(summary, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


def _parse_fixed(pairs) -> Dict[str, float]:
    fixed = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise CliError(f"--fix expects name=value, got {pair!r}")
        name, _, value = pair.partition("=")
        name = name.strip()
        if name in ("gamma1",):
            fixed[name] = parse_rate(value)
        else:
            try:
                fixed[name] = float(value)
            except ValueError:
                raise CliError(f"--fix {name}: cannot parse value {value!r}") from None
    return fixed


def cmd_fit(args) -> int:
    try:
        curve = read_curve_csv(args.curve)
    except OSError as exc:
        raise CliError(f"cannot read curve: {exc}") from None
    except ValueError as exc:
        raise CliError(str(exc)) from None
    fixed = _parse_fixed(args.fix)
    drivers = {
        "single": fitting.fit_single_exp,
        "stretched": fitting.fit_stretched_exp,
        "two-state": fitting.fit_two_state,
    }
    try:
        result = drivers[args.model](curve, fixed=fixed)
    except (ValueError, model.DomainError) as exc:
        raise CliError(str(exc)) from None
    payload = result.to_dict()
    payload["model"] = args.model
    text = json.dumps(payload, indent=2) + "\n"
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK if result.converged else EXIT_ANALYTIC


def _load_stack(path: str, bin_factor: int) -> stackio.ImageStack:
    try:
        return stackio.load_stack(path, bin_factor=bin_factor)
    except (OSError, ValueError) as exc:
        raise CliError(str(exc)) from None


def cmd_characterize(args) -> int:
    stack = _load_stack(args.manifest, args.bin)
    eta_map = pipeline.characterize_eta(stack, fixed_gamma1=parse_rate(args.gamma1),
                                        snr_threshold=args.snr_threshold,
                                        workers=args.workers)
    os.makedirs(args.output, exist_ok=True)
    sidecar = maps.save_map(eta_map, os.path.join(args.output, "eta"))
    summary = {"outputs": [sidecar], "valid_pixels": int(eta_map.mask.sum()),
               "total_pixels": int(eta_map.mask.size)}
    json.dump(summary, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


def cmd_map(args) -> int:
    if (args.eta is None) == (args.model is None):
        raise CliError("exactly one of --eta or --model stretched is required")
    stack = _load_stack(args.manifest, args.bin)
    if args.eta is not None:
        try:
            eta_map = maps.load_map(args.eta)
        except (OSError, ValueError) as exc:
            raise CliError(str(exc)) from None
        if eta_map.shape != stack.shape:
            raise CliError(f"eta map is {eta_map.shape[1]}x{eta_map.shape[0]} but "
                           f"stack is {stack.shape[1]}x{stack.shape[0]}")
        result = pipeline.fit_rate_map(stack, eta_map, snr_threshold=args.snr_threshold,
                                       workers=args.workers)
        prefix = "two_state"
    else:
        if args.model != "stretched":
            raise CliError(f"unsupported --model {args.model!r}")
        result = pipeline.fit_rate_map_stretched(stack, snr_threshold=args.snr_threshold,
                                                 workers=args.workers)
        prefix = "stretched"
    os.makedirs(args.output, exist_ok=True)
    outputs = []
    for key, smap in result.items():
        outputs.append(maps.save_map(smap, os.path.join(args.output, f"{prefix}_{key}")))
    gamma_map = result["gamma1"]
    json.dump({"outputs": outputs, "valid_pixels": int(gamma_map.mask.sum()),
               "total_pixels": int(gamma_map.mask.size)}, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


def _write_histogram_csv(path: str, edges: np.ndarray, counts: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "normalized_count"])
        for i, count in enumerate(counts):
            writer.writerow([repr(float(edges[i])), repr(float(edges[i + 1])),
                             repr(float(count))])


def cmd_particles(args) -> int:
    try:
        rate_map = maps.load_map(args.rate_map)
    except (OSError, ValueError) as exc:
        raise CliError(str(exc)) from None
    try:
        with open(args.particles) as fh:
            pcfg = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read particle list: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"malformed particle JSON: {exc}") from None
    _check_fields(pcfg, ["version", "particles"], ["half_size"], "particle list")
    _check_version(pcfg, "particle list")
    entries = []
    for i, entry in enumerate(pcfg["particles"]):
        _check_fields(entry, ["id", "center"], [], f"particle list[{i}]")
        entries.append((int(entry["id"]),
                        (int(entry["center"][0]), int(entry["center"][1]))))
    particles = pipeline.ParticleList(entries,
                                      half_size=int(pcfg.get("half_size",
                                                             pipeline.DEFAULT_ROI_HALF_SIZE)))
    try:
        report = pipeline.analyze_particles(rate_map, particles,
                                            intrinsic_rate=parse_rate(args.intrinsic))
    except ValueError as exc:
        raise CliError(str(exc)) from None
    os.makedirs(args.output, exist_ok=True)
    report_path = os.path.join(args.output, "report.json")
    with open(report_path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    bg_path = os.path.join(args.output, "background_hist.csv")
    target_path = os.path.join(args.output, "target_hist.csv")
    _write_histogram_csv(bg_path, report.bin_edges, report.background_hist)
    _write_histogram_csv(target_path, report.bin_edges, report.target_hist)
    json.dump({"outputs": [report_path, bg_path, target_path],
               "n_particles": len(report.particles)}, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


def cmd_render(args) -> int:
    try:
        smap = maps.load_map(args.map)
    except (OSError, ValueError) as exc:
        raise CliError(str(exc)) from None
    try:
        image, sidecar = pipeline.render_map(smap, lo_percentile=args.lo,
                                             hi_percentile=args.hi)
    except ValueError as exc:
        raise AnalyticError(str(exc)) from None
    maps.write_pgm16(args.output, image)
    with open(args.output + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")
    json.dump({"outputs": [args.output, args.output + ".json"]}, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _default_workers() -> int:
    env = os.environ.get("NVRELAX_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def _add_stack_options(sub):
    sub.add_argument("--workers", type=int, default=_default_workers(),
                     help="parallel worker count (env NVRELAX_WORKERS)")
    sub.add_argument("--bin", type=int, default=1, help="k x k sum-binning on load")
    sub.add_argument("--snr-threshold", type=float,
                     default=pipeline.DEFAULT_SNR_THRESHOLD,
                     help="mask pixels with contrast below this multiple of tail noise")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nvrelax",
        description="Simulate and analyze spin relaxometry decays and image stacks.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("simulate", help="generate a curve, ensemble curve or scene")
    p.add_argument("config", help="JSON config with a 'kind' field")
    p.add_argument("-o", "--output", default=".", help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = subs.add_parser("fit", help="fit one decay curve CSV")
    p.add_argument("curve", help="curve CSV (tau_s,signal,reference,sigma)")
    p.add_argument("--model", required=True, choices=["single", "stretched", "two-state"])
    p.add_argument("--fix", action="append", metavar="NAME=VALUE",
                   help="fix a parameter (repeatable)")
    p.add_argument("-o", "--output", help="write the fit JSON here as well")
    p.set_defaults(func=cmd_fit)

    p = subs.add_parser("characterize", help="per-pixel eta map from a reference stack")
    p.add_argument("manifest", help="stack manifest JSON")
    p.add_argument("--gamma1", default="180Hz",
                   help="fixed relaxation rate for the characterization")
    p.add_argument("-o", "--output", default=".", help="output directory")
    _add_stack_options(p)
    p.set_defaults(func=cmd_characterize)

    p = subs.add_parser("map", help="per-pixel rate maps from a target stack")
    p.add_argument("manifest", help="stack manifest JSON")
    p.add_argument("--eta", help="eta map sidecar JSON (two-state mode)")
    p.add_argument("--model", choices=["stretched"], help="stretched-exponential mode")
    p.add_argument("-o", "--output", default=".", help="output directory")
    _add_stack_options(p)
    p.set_defaults(func=cmd_map)

    p = subs.add_parser("particles", help="ROI statistics and histograms on a rate map")
    p.add_argument("rate_map", help="rate map sidecar JSON")
    p.add_argument("particles", help="particle list JSON")
    p.add_argument("--intrinsic", default="180Hz", help="intrinsic rate for target rates")
    p.add_argument("-o", "--output", default=".", help="output directory")
    p.set_defaults(func=cmd_particles)

    p = subs.add_parser("render", help="render a map to a 16-bit graymap")
    p.add_argument("map", help="map sidecar JSON")
    p.add_argument("--lo", type=float, default=1.0, help="low scaling percentile")
    p.add_argument("--hi", type=float, default=99.0, help="high scaling percentile")
    p.add_argument("-o", "--output", default="map.pgm", help="output PGM path")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AnalyticError as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYTIC
    except (OSError, ValueError, model.DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
