"""Image-stack container and the manifest + raw-plane file format.

A stack on disk is a JSON manifest naming one raw plane file per
(dark time, channel); planes are little-endian float32, row-major.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

MANIFEST_VERSION = 1


@dataclass
class ImageStack:
    """A tau-indexed stack of 2D photon-count planes plus metadata."""

    taus: np.ndarray
    signal: np.ndarray                      # (ntau, H, W) float32
    reference: Optional[np.ndarray] = None  # same shape, pi-pulse channel
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.taus = np.asarray(self.taus, dtype=float)
        self.signal = np.asarray(self.signal, dtype=np.float32)
        if self.signal.ndim != 3 or self.signal.shape[0] != self.taus.size:
            raise ValueError("signal must be (ntau, H, W) matching taus")
        if self.reference is not None:
            self.reference = np.asarray(self.reference, dtype=np.float32)
            if self.reference.shape != self.signal.shape:
                raise ValueError("reference planes must match signal dimensions")
        if len(set(self.taus.tolist())) != self.taus.size:
            raise ValueError("duplicate dark times in stack")

    @property
    def shape(self):
        return self.signal.shape[1:]

    def pixel_curve(self, x: int, y: int):
        """Signal (and reference) counts across tau at one pixel."""
        sig = self.signal[:, y, x].astype(float)
        ref = None if self.reference is None else self.reference[:, y, x].astype(float)
        return sig, ref


def save_stack(stack: ImageStack, outdir: str, name: str = "stack") -> str:
    """Write manifest + plane files into ``outdir``; returns manifest path."""
    os.makedirs(outdir, exist_ok=True)
    ntau, h, w = stack.signal.shape
    channels = ["signal"] + (["reference"] if stack.reference is not None else [])
    planes = {}
    for channel in channels:
        data = stack.signal if channel == "signal" else stack.reference
        names = []
        for i in range(ntau):
            fname = f"{name}_{channel}_{i:03d}.raw"
            data[i].astype("<f4").tofile(os.path.join(outdir, fname))
            names.append(fname)
        planes[channel] = names
    manifest = {
        "version": MANIFEST_VERSION,
        "width": w,
        "height": h,
        "taus": [float(t) for t in stack.taus],
        "channels": channels,
        "planes": planes,
        "metadata": stack.metadata,
    }
    manifest_path = os.path.join(outdir, f"{name}.manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest_path


def load_stack(manifest_path: str, bin_factor: int = 1) -> ImageStack:
    """Load a stack, optionally sum-binning each plane by ``bin_factor``."""
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    for key in ("version", "width", "height", "taus", "channels", "planes"):
        if key not in manifest:
            raise ValueError(f"{manifest_path}: missing key {key!r}")
    if manifest["version"] != MANIFEST_VERSION:
        raise ValueError(f"{manifest_path}: unsupported version {manifest['version']}")
    w, h = int(manifest["width"]), int(manifest["height"])
    taus = np.asarray(manifest["taus"], dtype=float)
    if len(set(taus.tolist())) != taus.size:
        raise ValueError(f"{manifest_path}: duplicate dark times")
    if bin_factor < 1:
        raise ValueError("bin_factor must be >= 1")
    if bin_factor > 1 and (w % bin_factor or h % bin_factor):
        raise ValueError(f"{w}x{h} not divisible by bin factor {bin_factor}")
    base = os.path.dirname(os.path.abspath(manifest_path))
    arrays = {}
    for channel in manifest["channels"]:
        names = manifest["planes"].get(channel)
        if names is None or len(names) != taus.size:
            raise ValueError(f"{manifest_path}: plane list for {channel!r} "
                             f"does not match dark-time count")
        planes = np.empty((taus.size, h, w), dtype=np.float32)
        for i, fname in enumerate(names):
            path = os.path.join(base, fname)
            if not os.path.exists(path):
                raise FileNotFoundError(f"plane file missing: {path}")
            if os.path.getsize(path) != 4 * w * h:
                raise ValueError(f"{path}: expected {4 * w * h} bytes, "
                                 f"got {os.path.getsize(path)}")
            planes[i] = np.fromfile(path, dtype="<f4").reshape(h, w)
        arrays[channel] = planes
    metadata = dict(manifest.get("metadata", {}))
    if bin_factor > 1:
        k = bin_factor
        for channel, planes in arrays.items():
            nt = planes.shape[0]
            arrays[channel] = planes.reshape(nt, h // k, k, w // k, k).sum(axis=(2, 4))
        metadata["bin_factor"] = k
    return ImageStack(
        taus=taus,
        signal=arrays["signal"],
        reference=arrays.get("reference"),
        metadata=metadata,
    )
