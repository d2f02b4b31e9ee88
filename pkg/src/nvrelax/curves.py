"""Decay-curve container and its CSV representation.

CSV columns are fixed as ``tau_s, signal, reference, sigma``; reference and
sigma cells are left empty when the curve does not carry them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class DecayCurve:
    """A relaxometry decay: dark times, PL signal, optional pi-pulse reference.

    ``signal``/``reference`` may hold raw mean counts (simulator output) or
    normalized PL (after :func:`nvrelax.fitting.normalize_curve`); ``sigma``
    are per-point 1-sigma uncertainties on ``signal``.
    """

    tau: np.ndarray
    signal: np.ndarray
    reference: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=float)
        self.signal = np.asarray(self.signal, dtype=float)
        if self.reference is not None:
            self.reference = np.asarray(self.reference, dtype=float)
        if self.sigma is not None:
            self.sigma = np.asarray(self.sigma, dtype=float)
        n = len(self.tau)
        for name in ("signal", "reference", "sigma"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise ValueError(f"{name} length {len(arr)} != tau length {n}")
        if self.sigma is not None and np.any(self.sigma <= 0):
            raise ValueError("sigma must be > 0 everywhere when present")

    def __len__(self):
        return len(self.tau)


def write_curve_csv(path, curve: DecayCurve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau_s", "signal", "reference", "sigma"])
        ref = curve.reference
        sig = curve.sigma
        for i in range(len(curve)):
            writer.writerow([
                repr(float(curve.tau[i])),
                repr(float(curve.signal[i])),
                "" if ref is None else repr(float(ref[i])),
                "" if sig is None else repr(float(sig[i])),
            ])


def read_curve_csv(path) -> DecayCurve:
    tau, signal, reference, sigma = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["tau_s", "signal"]:
            raise ValueError(f"{path}: expected header 'tau_s,signal,reference,sigma'")
        for row in reader:
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                tau.append(float(row[0]))
                signal.append(float(row[1]))
                reference.append(float(row[2]) if len(row) > 2 and row[2].strip() else None)
                sigma.append(float(row[3]) if len(row) > 3 and row[3].strip() else None)
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}: malformed CSV row {row!r}") from exc
    if not tau:
        raise ValueError(f"{path}: no data rows")
    has_ref = any(r is not None for r in reference)
    has_sig = any(s is not None for s in sigma)
    if has_ref and any(r is None for r in reference):
        raise ValueError(f"{path}: reference column partially filled")
    if has_sig and any(s is None for s in sigma):
        raise ValueError(f"{path}: sigma column partially filled")
    return DecayCurve(
        tau=np.array(tau),
        signal=np.array(signal),
        reference=np.array(reference, dtype=float) if has_ref else None,
        sigma=np.array(sigma, dtype=float) if has_sig else None,
    )
