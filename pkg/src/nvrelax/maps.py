"""2D scalar maps (fitted quantities) with validity masks, plus file formats.

On disk a map is a little-endian float32 raw plane, a uint8 mask plane and a
JSON sidecar naming both and carrying provenance. Rendered images are 16-bit
binary PGM with a JSON sidecar recording the gray scale.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

NAN = float("nan")


@dataclass
class ScalarMap:
    """A fitted 2D quantity; invalid pixels are NaN with mask False."""

    values: np.ndarray
    mask: np.ndarray
    quantity: str
    units: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape:
            raise ValueError("values and mask shapes differ")
        self.values = np.where(self.mask, self.values, NAN)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def valid_values(self) -> np.ndarray:
        return self.values[self.mask]


def save_map(smap: ScalarMap, basepath: str) -> str:
    """Write value plane, mask plane and sidecar; returns the sidecar path."""
    value_file = basepath + ".raw"
    mask_file = basepath + ".mask.raw"
    sidecar = basepath + ".json"
    smap.values.astype("<f4").tofile(value_file)
    smap.mask.astype(np.uint8).tofile(mask_file)
    h, w = smap.shape
    with open(sidecar, "w") as fh:
        json.dump({
            "version": 1,
            "quantity": smap.quantity,
            "units": smap.units,
            "width": w,
            "height": h,
            "value_file": os.path.basename(value_file),
            "mask_file": os.path.basename(mask_file),
            "provenance": smap.provenance,
        }, fh, indent=2)
        fh.write("\n")
    return sidecar


def load_map(sidecar_path: str) -> ScalarMap:
    with open(sidecar_path) as fh:
        meta = json.load(fh)
    for key in ("quantity", "width", "height", "value_file", "mask_file"):
        if key not in meta:
            raise ValueError(f"{sidecar_path}: missing key {key!r}")
    w, h = int(meta["width"]), int(meta["height"])
    base = os.path.dirname(os.path.abspath(sidecar_path))
    value_path = os.path.join(base, meta["value_file"])
    mask_path = os.path.join(base, meta["mask_file"])
    for path, nbytes in ((value_path, 4 * w * h), (mask_path, w * h)):
        if not os.path.exists(path):
            raise FileNotFoundError(f"map plane missing: {path}")
        if os.path.getsize(path) != nbytes:
            raise ValueError(f"{path}: expected {nbytes} bytes, got {os.path.getsize(path)}")
    values = np.fromfile(value_path, dtype="<f4").reshape(h, w).astype(np.float64)
    mask = np.fromfile(mask_path, dtype=np.uint8).reshape(h, w).astype(bool)
    return ScalarMap(values, mask, meta["quantity"], meta.get("units", ""),
                     meta.get("provenance", {}))


def write_pgm16(path: str, image: np.ndarray) -> None:
    """Write a 16-bit binary portable graymap (big-endian sample order)."""
    image = np.asarray(image)
    if image.dtype != np.uint16:
        raise ValueError("expected uint16 image data")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(image.astype(">u2").tobytes())


def read_pgm16(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"65535":
        raise ValueError(f"{path}: not a 16-bit binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3][: 2 * w * h], dtype=">u2").reshape(h, w).astype(np.uint16)
