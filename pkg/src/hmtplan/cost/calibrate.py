"""Offline coefficient calibration from (C, M, eps, T, E) measurements.

Both models are linear in their coefficients, so each is a least-squares fit
weighted by ``1/observed`` (relative residuals). In the energy model the
cache, DRAM and shared-memory columns ``eps*M``, ``(1-eps)*M`` and ``M`` are
collinear, so the shared-memory coefficient is held at a fixed ratio to
``delta1`` (2 on GPU, 0 on CPU) and three coefficients are fitted.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from hmtplan.cost.model import LayerCost, compute_term
from hmtplan.cost.profiles import DeviceProfile, Processor
from hmtplan.errors import CalibrationError

CSV_HEADER = ("C", "M", "eps", "T", "E")


@dataclass(frozen=True)
class Measurement:
    C: float
    M: float
    eps: float
    T: float
    E: float


@dataclass(frozen=True)
class CalibrationResult:
    lambdas: tuple[float, float, float]
    deltas: tuple[float, float, float, float]
    latency_rel_rms: float
    energy_rel_rms: float
    flagged: bool
    notes: tuple[str, ...] = field(default_factory=tuple)

    def apply(self, device: DeviceProfile) -> DeviceProfile:
        l1, l2, l3 = self.lambdas
        d1, d2, d3, dsm = self.deltas
        return replace(device, lambda1=l1, lambda2=l2, lambda3=l3, delta1=d1, delta2=d2, delta3=d3, delta_sm=dsm)

    def to_dict(self) -> dict:
        return {
            "lambda1": self.lambdas[0], "lambda2": self.lambdas[1], "lambda3": self.lambdas[2],
            "delta1": self.deltas[0], "delta2": self.deltas[1], "delta3": self.deltas[2], "delta_sm": self.deltas[3],
            "latency_rel_rms": self.latency_rel_rms, "energy_rel_rms": self.energy_rel_rms,
            "flagged": self.flagged, "notes": list(self.notes),
        }


def read_measurements(text: str) -> list[Measurement]:
    reader = csv.DictReader(io.StringIO(text))
    header = tuple(h.strip() for h in (reader.fieldnames or ()))
    if header != CSV_HEADER:
        raise CalibrationError(f"calibration CSV header must be {','.join(CSV_HEADER)}, got {','.join(header)}")
    rows = []
    for i, r in enumerate(reader, start=2):
        try:
            rows.append(Measurement(*(float(r[k]) for k in CSV_HEADER)))
        except (TypeError, ValueError):
            raise CalibrationError(f"line {i}: non-numeric value") from None
    return rows


def _fit(A: np.ndarray, y: np.ndarray, what: str) -> tuple[np.ndarray, float]:
    if A.shape[0] < A.shape[1]:
        raise CalibrationError(f"{what}: {A.shape[0]} measurements for {A.shape[1]} coefficients")
    if np.any(y <= 0):
        raise CalibrationError(f"{what}: observations must be > 0")
    w = 1.0 / y
    Aw = A * w[:, None]
    # column scaling keeps the rank test meaningful when C and M differ by decades
    scale = np.linalg.norm(Aw, axis=0)
    if np.any(scale == 0):
        raise CalibrationError(f"{what}: design matrix is rank-deficient (an all-zero column)")
    As = Aw / scale
    if np.linalg.matrix_rank(As, tol=1e-10) < A.shape[1]:
        raise CalibrationError(f"{what}: design matrix is rank-deficient")
    coef, *_ = np.linalg.lstsq(As, np.ones_like(y), rcond=None)
    coef = coef / scale
    rel = (A @ coef - y) / y
    return coef, float(np.sqrt(np.mean(rel**2)))


def calibrate(
    measurements: Sequence[Measurement] | Iterable[Measurement],
    device: DeviceProfile,
    sm_ratio: float | None = None,
) -> CalibrationResult:
    """Fit ``lambda1..3`` from T and ``delta1..3`` (plus the pinned ``delta_sm``) from E.

    The compute column of the latency fit uses the device's intensity factor,
    and ``freq_scale`` is assumed to have been 1 while measuring.
    """
    rows = list(measurements)
    if sm_ratio is None:
        sm_ratio = 2.0 if device.processor is Processor.GPU else 0.0
    C = np.array([r.C for r in rows], dtype=float)
    M = np.array([r.M for r in rows], dtype=float)
    eps = np.array([r.eps for r in rows], dtype=float)
    T = np.array([r.T for r in rows], dtype=float)
    E = np.array([r.E for r in rows], dtype=float)
    if rows and (np.any(eps < 0) or np.any(eps > 1)):
        raise CalibrationError("eps must lie in [0, 1]")
    work = np.array([compute_term(LayerCost(r.C, r.M, r.eps), device) for r in rows])
    A_t = np.column_stack([work, eps * M, (1 - eps) * M]) if rows else np.zeros((0, 3))
    A_e = np.column_stack([C + sm_ratio * M, eps * M, (1 - eps) * M]) if rows else np.zeros((0, 3))
    lam, t_rms = _fit(A_t, T, "latency")
    dl, e_rms = _fit(A_e, E, "energy")
    notes = []
    if np.any(lam <= 0):
        notes.append("non-positive latency coefficient")
    if np.any(dl <= 0):
        notes.append("non-positive energy coefficient")
    deltas = (float(dl[0]), float(dl[1]), float(dl[2]), float(sm_ratio * dl[0]))
    return CalibrationResult(tuple(float(x) for x in lam), deltas, t_rms, e_rms, bool(notes), tuple(notes))


def synthesize(device: DeviceProfile, n: int, rng: np.random.Generator, noise: float = 0.0) -> list[Measurement]:
    """Measurements generated from ``device``'s own coefficients, with optional multiplicative noise.

    Rows cycle through three micro-benchmark regimes so every coefficient
    dominates some rows: compute-bound kernels, cache-resident streams
    (``eps = 1``) and DRAM streams (``eps = 0``).
    """
    from hmtplan.cost.model import layer_energy, layer_latency

    out = []
    for i in range(n):
        m = float(10 ** rng.uniform(4, 7))
        if i % 3 == 0:
            c, e = m * float(10 ** rng.uniform(1.5, 3)), float(rng.uniform(0.0, 1.0))
        else:
            c, e = m * float(10 ** rng.uniform(-3, -1)), 1.0 if i % 3 == 1 else 0.0
        layer = LayerCost(c, m, e)
        t, en = layer_latency(layer, device), layer_energy(layer, device)
        if noise:
            t *= 1 + noise * rng.standard_normal()
            en *= 1 + noise * rng.standard_normal()
        out.append(Measurement(c, m, e, t, en))
    return out
