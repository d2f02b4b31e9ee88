"""Per-pixel widefield analysis: polarization characterization, rate maps,
particle region statistics and map rendering.

Every pixel is fit independently (no spatial coupling), so the batch is
embarrassingly parallel; rows are distributed over a worker pool and the
assembled maps are identical for any worker count.
"""

from __future__ import annotations

import multiprocessing
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import fitting, model
from .curves import DecayCurve
from .maps import ScalarMap
from .stackio import ImageStack

DEFAULT_SNR_THRESHOLD = 10.0
DEFAULT_ROI_HALF_SIZE = 5


# ---------------------------------------------------------------------------
# Particle bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class ParticleList:
    """Hand-identified particle centers with a square ROI half-size.

    The ROI spans ``2*half_size`` pixels per axis (default 10x10).
    """

    entries: List[Tuple[int, Tuple[int, int]]]  # (id, (x, y))
    half_size: int = DEFAULT_ROI_HALF_SIZE

    def roi_slices(self, shape: Tuple[int, int]):
        """Yield (id, row_slice, col_slice); raises if an ROI leaves the map."""
        h, w = shape
        k = self.half_size
        for pid, (cx, cy) in self.entries:
            y0, y1 = cy - k, cy + k
            x0, x1 = cx - k, cx + k
            if y0 < 0 or x0 < 0 or y1 > h or x1 > w:
                raise ValueError(f"particle {pid}: ROI [{x0}:{x1}, {y0}:{y1}] "
                                 f"outside {w}x{h} map")
            yield pid, slice(y0, y1), slice(x0, x1)

    def warn_overlaps(self, shape: Tuple[int, int]) -> None:
        cover = np.zeros(shape, dtype=np.uint8)
        for pid, ys, xs in self.roi_slices(shape):
            cover[ys, xs] += 1
        if np.any(cover > 1):
            warnings.warn("particle ROIs overlap", stacklevel=2)


@dataclass
class ParticleStats:
    particle_id: int
    center: Tuple[int, int]
    n_valid: int
    mean_rate: float
    sd_rate: float
    target_rate: float
    unphysical: bool


@dataclass
class RegionReport:
    """Per-particle and background rate statistics plus shared histograms."""

    intrinsic_rate: float
    particles: List[ParticleStats]
    background_mean: float
    background_sd: float
    background_n: int
    bin_edges: np.ndarray
    background_hist: np.ndarray   # normalized to total contributing pixels
    target_hist: np.ndarray

    def to_dict(self) -> dict:
        return {
            "intrinsic_rate_hz": self.intrinsic_rate,
            "particles": [
                {
                    "id": p.particle_id,
                    "center": list(p.center),
                    "n_valid": p.n_valid,
                    "mean_rate_hz": p.mean_rate,
                    "sd_rate_hz": p.sd_rate,
                    "target_rate_hz": p.target_rate,
                    "unphysical": bool(p.unphysical),
                }
                for p in self.particles
            ],
            "background": {
                "mean_rate_hz": self.background_mean,
                "sd_rate_hz": self.background_sd,
                "n_valid": self.background_n,
            },
            "histogram": {
                "bin_edges_hz": self.bin_edges.tolist(),
                "background_normalized": self.background_hist.tolist(),
                "target_normalized": self.target_hist.tolist(),
            },
        }


# ---------------------------------------------------------------------------
# Per-pixel fitting machinery
# ---------------------------------------------------------------------------

# Row context inherited by forked workers; set immediately before the pool
# is created so pool.map only has to pickle row indices.
_ROW_CTX: dict = {}


def _pixel_curve(ctx, x: int, y: int) -> Optional[DecayCurve]:
    """Gated, normalized decay at one pixel, or None if below SNR."""
    stack: ImageStack = ctx["stack"]
    sig, ref = stack.pixel_curve(x, y)
    # illumination gate: first-tau counts against the tail noise level
    k = max(4, len(sig) // 5)
    tail = sig[-k:]
    # successive differences are insensitive to residual decay in the tail
    noise = float(np.std(np.diff(tail))) / np.sqrt(2.0)
    if sig[0] <= 0 or sig[0] < ctx["snr_threshold"] * noise:
        return None
    sigma = np.sqrt(np.maximum(sig, 1.0)) if ctx["poisson"] else None
    try:
        curve = DecayCurve(tau=stack.taus, signal=sig, reference=ref, sigma=sigma)
        if ref is not None:
            return fitting.normalize_curve(curve)
        return fitting.normalize_tail(curve)
    except ValueError:
        return None


def _fit_pixel(ctx, x: int, y: int) -> Optional[dict]:
    mode = ctx["mode"]
    if mode == "rate":
        eta_map: ScalarMap = ctx["eta_map"]
        if not eta_map.mask[y, x]:
            return None
    curve = _pixel_curve(ctx, x, y)
    if curve is None:
        return None
    try:
        if mode == "eta":
            result = fitting.fit_two_state(
                curve,
                eta_spec=fitting.ParamSpec("eta", 0.5, lower=0.0, upper=1.0 - 1e-9),
                gamma1_spec=fitting.ParamSpec("gamma1", ctx["fixed_gamma1"], fixed=True),
            )
            if not result.converged:
                return None
            return {"eta": result["eta"], "red_chi2": result.red_chi2}
        if mode == "rate":
            eta = float(ctx["eta_map"].values[y, x])
            result = fitting.fit_two_state(
                curve, eta_spec=fitting.ParamSpec("eta", eta, fixed=True))
            if not result.converged:
                return None
            return {"gamma1": result["gamma1"], "amplitude": result["amplitude"],
                    "offset": result["offset"], "red_chi2": result.red_chi2}
        if mode == "stretched":
            result = fitting.fit_stretched_exp(curve)
            if not result.converged:
                return None
            return {"gamma1": result["gamma1"], "stretch": result["stretch"],
                    "amplitude": result["amplitude"], "offset": result["offset"],
                    "red_chi2": result.red_chi2}
    except (ValueError, model.DomainError):
        return None
    raise ValueError(f"unknown fit mode {mode!r}")


def _row_worker(y: int):
    ctx = _ROW_CTX
    width = ctx["stack"].shape[1]
    out = {key: np.full(width, np.nan) for key in ctx["keys"]}
    for x in range(width):
        res = _fit_pixel(ctx, x, y)
        if res is not None:
            for key in ctx["keys"]:
                out[key][x] = res[key]
    return out


def _run_pixel_fits(ctx: dict, workers: int) -> Dict[str, np.ndarray]:
    global _ROW_CTX
    height, width = ctx["stack"].shape
    _ROW_CTX = ctx
    try:
        if workers <= 1:
            rows = [_row_worker(y) for y in range(height)]
        else:
            mp = multiprocessing.get_context("fork")
            with mp.Pool(workers) as pool:
                rows = pool.map(_row_worker, range(height))
    finally:
        _ROW_CTX = {}
    return {
        key: np.stack([row[key] for row in rows], axis=0)
        for key in ctx["keys"]
    }


def _as_maps(planes: Dict[str, np.ndarray], units: Dict[str, str],
             provenance: dict) -> Dict[str, ScalarMap]:
    out = {}
    for key, values in planes.items():
        mask = np.isfinite(values)
        out[key] = ScalarMap(values, mask, key, units.get(key, ""), dict(provenance))
    return out


# ---------------------------------------------------------------------------
# Pipeline operations
# ---------------------------------------------------------------------------

def characterize_eta(reference_stack: ImageStack, fixed_gamma1: Optional[float] = None,
                     snr_threshold: float = DEFAULT_SNR_THRESHOLD,
                     workers: int = 1) -> ScalarMap:
    """Per-pixel polarization inefficiency from a reference (bare) stack.

    Each pixel decay is fit with the two-state model with gamma1 fixed (by
    default the empirical ensemble rate at 1 ppm, ~180 Hz) and eta free.
    Low-SNR and failed pixels are masked.
    """
    if fixed_gamma1 is None:
        fixed_gamma1 = model.jarmola_intrinsic_rate(1.0)
    if not (fixed_gamma1 > 0):
        raise ValueError(f"fixed_gamma1 must be > 0, got {fixed_gamma1}")
    ctx = {
        "stack": reference_stack,
        "mode": "eta",
        "keys": ["eta", "red_chi2"],
        "fixed_gamma1": float(fixed_gamma1),
        "snr_threshold": snr_threshold,
        "poisson": bool(reference_stack.metadata.get("shot_noise", True)),
    }
    planes = _run_pixel_fits(ctx, workers)
    prov = {"operation": "characterize_eta", "fixed_gamma1_hz": float(fixed_gamma1),
            "stack_metadata": dict(reference_stack.metadata)}
    return _as_maps({"eta": planes["eta"]}, {"eta": "dimensionless"}, prov)["eta"]


def fit_rate_map(target_stack: ImageStack, eta_map: ScalarMap,
                 snr_threshold: float = DEFAULT_SNR_THRESHOLD,
                 workers: int = 1) -> Dict[str, ScalarMap]:
    """Two-state rate maps with per-pixel eta fixed from a characterization.

    Returns maps keyed "gamma1", "amplitude", "offset", "red_chi2"; pixels
    masked in ``eta_map`` stay masked.
    """
    if eta_map.shape != target_stack.shape:
        raise ValueError(f"eta map {eta_map.shape} does not match "
                         f"stack {target_stack.shape}")
    ctx = {
        "stack": target_stack,
        "mode": "rate",
        "keys": ["gamma1", "amplitude", "offset", "red_chi2"],
        "eta_map": eta_map,
        "snr_threshold": snr_threshold,
        "poisson": bool(target_stack.metadata.get("shot_noise", True)),
    }
    planes = _run_pixel_fits(ctx, workers)
    prov = {"operation": "fit_rate_map", "model": "two_state",
            "stack_metadata": dict(target_stack.metadata),
            "eta_provenance": dict(eta_map.provenance)}
    return _as_maps(planes, {"gamma1": "Hz"}, prov)


def fit_rate_map_stretched(target_stack: ImageStack,
                           snr_threshold: float = DEFAULT_SNR_THRESHOLD,
                           workers: int = 1) -> Dict[str, ScalarMap]:
    """Per-pixel stretched-exponential maps (no polarization input)."""
    ctx = {
        "stack": target_stack,
        "mode": "stretched",
        "keys": ["gamma1", "stretch", "amplitude", "offset", "red_chi2"],
        "snr_threshold": snr_threshold,
        "poisson": bool(target_stack.metadata.get("shot_noise", True)),
    }
    planes = _run_pixel_fits(ctx, workers)
    prov = {"operation": "fit_rate_map_stretched", "model": "stretched_exp",
            "stack_metadata": dict(target_stack.metadata)}
    return _as_maps(planes, {"gamma1": "Hz"}, prov)


def analyze_particles(rate_map: ScalarMap, particles: ParticleList,
                      intrinsic_rate: float) -> RegionReport:
    """ROI statistics per particle plus background stats and histograms.

    Histograms share Freedman-Diaconis bin edges computed on the pooled
    background+target pixel rates and are normalized to the total number of
    contributing pixels, so the two populations are directly comparable.
    """
    particles.warn_overlaps(rate_map.shape)
    in_roi = np.zeros(rate_map.shape, dtype=bool)
    stats: List[ParticleStats] = []
    for pid, ys, xs in particles.roi_slices(rate_map.shape):
        in_roi[ys, xs] = True
        vals = rate_map.values[ys, xs][rate_map.mask[ys, xs]]
        if vals.size == 0:
            stats.append(ParticleStats(pid, _center_of(particles, pid), 0,
                                       float("nan"), float("nan"), float("nan"), False))
            continue
        mean = float(np.mean(vals))
        diff = model.target_rate(max(mean, 0.0), intrinsic_rate)
        stats.append(ParticleStats(pid, _center_of(particles, pid), int(vals.size),
                                   mean, float(np.std(vals)),
                                   mean - intrinsic_rate, diff.unphysical))
    bg_mask = rate_map.mask & ~in_roi
    bg_vals = rate_map.values[bg_mask]
    target_vals = rate_map.values[rate_map.mask & in_roi]
    pooled = np.concatenate([bg_vals, target_vals])
    if pooled.size == 0:
        raise ValueError("rate map has no valid pixels")
    edges = np.histogram_bin_edges(pooled, bins="fd")
    if len(edges) > 513:
        # Freedman-Diaconis explodes when the data are nearly constant
        edges = np.histogram_bin_edges(pooled, bins=512)
    total = pooled.size
    bg_hist = np.histogram(bg_vals, bins=edges)[0] / total
    target_hist = np.histogram(target_vals, bins=edges)[0] / total
    return RegionReport(
        intrinsic_rate=float(intrinsic_rate),
        particles=stats,
        background_mean=float(np.mean(bg_vals)) if bg_vals.size else float("nan"),
        background_sd=float(np.std(bg_vals)) if bg_vals.size else float("nan"),
        background_n=int(bg_vals.size),
        bin_edges=edges,
        background_hist=bg_hist,
        target_hist=target_hist,
    )


def _center_of(particles: ParticleList, pid: int) -> Tuple[int, int]:
    for entry_id, center in particles.entries:
        if entry_id == pid:
            return center
    raise KeyError(pid)


def detect_particles(rate_map: ScalarMap, half_size: int = DEFAULT_ROI_HALF_SIZE,
                     n_sigma: float = 3.0) -> ParticleList:
    """Threshold detector: pixels above background mean + n_sigma*SD,
    4-connected components, centroid per component. Convenience only; the
    hand-picked ParticleList is the primary input.
    """
    vals = rate_map.valid_values()
    if vals.size == 0:
        return ParticleList([], half_size)
    thresh = float(np.mean(vals) + n_sigma * np.std(vals))
    above = rate_map.mask & (rate_map.values > thresh)
    h, w = above.shape
    seen = np.zeros_like(above)
    entries = []
    next_id = 0
    for y in range(h):
        for x in range(w):
            if not above[y, x] or seen[y, x]:
                continue
            queue = [(y, x)]
            seen[y, x] = True
            component = []
            while queue:
                cy, cx = queue.pop()
                component.append((cy, cx))
                for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                    if 0 <= ny < h and 0 <= nx < w and above[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            comp = np.array(component)
            cy, cx = comp.mean(axis=0)
            cx, cy = int(round(cx)), int(round(cy))
            # keep only detections whose ROI fits inside the map
            if (half_size <= cx <= w - half_size and half_size <= cy <= h - half_size):
                entries.append((next_id, (cx, cy)))
                next_id += 1
    return ParticleList(entries, half_size)


def render_map(smap: ScalarMap, lo_percentile: float = 1.0,
               hi_percentile: float = 99.0):
    """Render a map to 16-bit grayscale with linear percentile scaling.

    Masked pixels render black. Returns (uint16 image, sidecar dict); a
    constant map renders uniform mid-gray with the degenerate range noted.
    """
    if not (0.0 <= lo_percentile <= hi_percentile <= 100.0):
        raise ValueError("need 0 <= lo <= hi <= 100")
    vals = smap.valid_values()
    if vals.size == 0:
        raise ValueError("fully masked map cannot be rendered")
    lo = float(np.percentile(vals, lo_percentile))
    hi = float(np.percentile(vals, hi_percentile))
    image = np.zeros(smap.shape, dtype=np.uint16)
    degenerate = hi == lo
    if degenerate:
        image[smap.mask] = 32768
    else:
        scaled = np.clip((smap.values - lo) / (hi - lo), 0.0, 1.0)
        image[smap.mask] = np.round(scaled[smap.mask] * 65535).astype(np.uint16)
    sidecar = {
        "quantity": smap.quantity,
        "units": smap.units,
        "lo_percentile": lo_percentile,
        "hi_percentile": hi_percentile,
        "lo_value": lo,
        "hi_value": hi,
        "degenerate_range": degenerate,
    }
    return image, sidecar
