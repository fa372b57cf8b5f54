"""Measurement noise: the two additive Gaussian models, rho-unit calibration and
a repeated-measurement estimator for the current noise level.

Noise level units
-----------------
``SignalIndependent``: per-component std is ``level * calibration`` where the
calibration constant is the per-component std of clean measurements taken
with uniformly random DMA configurations.  ``level = 1`` is therefore 0 dB SNR
for random configurations.

``SignalDependent``: ``Re(n) ~ N(0, (level |Re m|)^2)`` and likewise for the
imaginary part.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import CalibrationError

MEAN_FLOOR = 1e-12


class NoiseKind(str, enum.Enum):
    NONE = "none"
    SIGNAL_INDEPENDENT = "signal_independent"
    SIGNAL_DEPENDENT = "signal_dependent"

    @classmethod
    def parse(cls, value) -> "NoiseKind":
        if isinstance(value, cls):
            return value
        aliases = {
            "none": cls.NONE,
            "signal_independent": cls.SIGNAL_INDEPENDENT,
            "independent": cls.SIGNAL_INDEPENDENT,
            "rho": cls.SIGNAL_INDEPENDENT,
            "signal_dependent": cls.SIGNAL_DEPENDENT,
            "dependent": cls.SIGNAL_DEPENDENT,
            "beta": cls.SIGNAL_DEPENDENT,
        }
        key = str(value).strip().lower().replace("-", "_")
        if key not in aliases:
            raise ValueError(f"unknown noise kind {value!r}")
        return aliases[key]


@dataclass(frozen=True)
class NoiseSpec:
    kind: NoiseKind = NoiseKind.NONE
    level: float = 0.0
    calibration: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind.parse(self.kind))
        if not self.level >= 0:
            raise ValueError("noise level must be nonnegative")
        if self.calibration < 0:
            raise ValueError("calibration must be nonnegative")
        if self.kind is NoiseKind.SIGNAL_INDEPENDENT and self.calibration <= 0:
            raise ValueError("signal-independent noise needs a positive calibration constant")

    @property
    def component_std(self) -> float:
        """Per-component std of signal-independent noise."""
        return self.level * self.calibration

    def with_level(self, level: float) -> "NoiseSpec":
        return NoiseSpec(self.kind, level, self.calibration)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "level": self.level, "calibration": self.calibration}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return cls(NoiseKind.parse(d["kind"]), float(d["level"]), float(d["calibration"]))


@dataclass(frozen=True)
class NoisyMeasurement:
    clean: complex
    noisy: complex


def draw_standard(rng: np.random.Generator, shape) -> tuple[np.ndarray, np.ndarray]:
    """Standard-normal draws for the real and imaginary noise components."""
    return rng.standard_normal(shape), rng.standard_normal(shape)


def noise_from_draws(m: np.ndarray, spec: NoiseSpec, u_re: np.ndarray, u_im: np.ndarray) -> np.ndarray:
    """Complex noise for measurements ``m`` given fixed standard-normal draws.

    Splitting the draw from the scaling lets the training loop hold the draw
    fixed across a forward/backward pair.
    """
    m = np.asarray(m)
    if spec.kind is NoiseKind.NONE or spec.level == 0:
        return np.zeros(m.shape, dtype=complex)
    if spec.kind is NoiseKind.SIGNAL_INDEPENDENT:
        sd = spec.component_std
        return sd * u_re + 1j * sd * u_im
    return spec.level * (np.abs(m.real) * u_re + 1j * np.abs(m.imag) * u_im)


def apply_noise_array(m: np.ndarray, spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    m = np.asarray(m, dtype=complex)
    if spec.kind is NoiseKind.NONE:
        return m.copy()
    u_re, u_im = draw_standard(rng, m.shape)
    return m + noise_from_draws(m, spec, u_re, u_im)


def apply_noise(m: complex, spec: NoiseSpec, rng: np.random.Generator) -> NoisyMeasurement:
    """Corrupt one measurement with a fresh noise draw."""
    noisy = apply_noise_array(np.asarray(m, dtype=complex), spec, rng)
    return NoisyMeasurement(complex(m), complex(noisy))


def calibrate_rho_unit(
    forward: Callable[[np.ndarray, np.ndarray, np.ndarray], complex],
    scenes: Sequence,
    n_draws: int = 2000,
    rng_seed=0,
    n_atoms: int = 16,
) -> float:
    """Per-component signal std under uniformly random binary configurations.

    ``forward(config_tx, config_rx, scene)`` returns the clean measurement.
    For speed ``forward`` may also be vectorized: if it carries a truthy
    ``batched`` attribute it is called once with stacked ``(n_draws, N)``
    configurations and an ``(n_draws, ...)`` stack of scenes.
    """
    if n_draws < 100:
        raise ValueError("calibration needs at least 100 draws")
    if len(scenes) == 0:
        raise ValueError("calibration needs at least one scene")
    rng = np.random.default_rng(rng_seed)
    tx = rng.integers(0, 2, size=(n_draws, n_atoms)).astype(float)
    rx = rng.integers(0, 2, size=(n_draws, n_atoms)).astype(float)
    idx = rng.integers(0, len(scenes), size=n_draws)
    if getattr(forward, "batched", False):
        picked = np.stack([np.asarray(scenes[i]) for i in idx])
        m = np.asarray(forward(tx, rx, picked), dtype=complex)
    else:
        m = np.array([forward(tx[k], rx[k], scenes[idx[k]]) for k in range(n_draws)], dtype=complex)
    var = (np.var(m.real) + np.var(m.imag)) / 2
    if not var > 0:
        raise CalibrationError("all calibration measurements are identical; sigma_s = 0")
    return float(np.sqrt(var))


def estimate_noise_level(repeats: Sequence[complex], kind, calibration: float = 0.0) -> float:
    """Noise level from repeated measurements of one static scene.

    The signal-dependent estimate averages the per-component ratios of sample
    std to |sample mean|, skipping components whose mean is below 1e-12.
    """
    kind = NoiseKind.parse(kind)
    r = np.asarray(repeats, dtype=complex)
    if r.size < 2:
        raise CalibrationError("need at least two repeated measurements")
    sd_re = np.std(r.real, ddof=1)
    sd_im = np.std(r.imag, ddof=1)
    if kind is NoiseKind.NONE:
        return 0.0
    if kind is NoiseKind.SIGNAL_INDEPENDENT:
        if calibration <= 0:
            raise CalibrationError("signal-independent estimate needs a positive calibration")
        return float(np.sqrt((sd_re ** 2 + sd_im ** 2) / 2) / calibration)
    ratios = []
    for sd, mean in ((sd_re, np.mean(r.real)), (sd_im, np.mean(r.imag))):
        if abs(mean) >= MEAN_FLOOR:
            ratios.append(sd / abs(mean))
    if not ratios:
        raise CalibrationError("both components have zero mean; beta is not identifiable")
    return float(np.mean(ratios))
