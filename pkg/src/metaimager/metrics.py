"""Sequence-level descriptors of illumination patterns: overlap, intensity,
ON ratio, and mean/std aggregation across realizations."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .em import AntennaOperator, DmaLayout, EmModel, SceneGrid
from .errors import CalibrationError, DegeneratePatternError


@dataclass(frozen=True)
class SequenceMetrics:
    overlap: float
    intensity: float
    intensity_ratio: float
    on_ratio: float


def _as_stack(patterns) -> np.ndarray:
    arrs = [np.asarray(getattr(p, "values", p)) for p in patterns]
    if not arrs:
        return np.zeros((0, 0), dtype=complex)
    shapes = {a.shape for a in arrs}
    if len(shapes) != 1:
        raise ValueError("patterns live on different grids")
    return np.stack([a.ravel() for a in arrs])


def _grid_area(patterns, cell_area):
    if cell_area is not None:
        return cell_area
    grid = getattr(patterns[0], "grid", None) if len(patterns) else None
    return grid.cell_area if grid is not None else 1.0


def overlap(patterns: Sequence, cell_area: float | None = None, conjugate: bool = False) -> float:
    """Mean normalized pairwise overlap of a pattern sequence.

    The default compares magnitudes ``|J_i| |J_j|`` so every pair term is a
    real number in [0, 1].  ``conjugate=True`` uses ``|<J_i, J_j>|`` instead.
    Arrays may be passed directly, in which case ``cell_area`` defaults to 1
    (it cancels anyway).
    """
    stack = _as_stack(patterns)
    if len(stack) < 2:
        raise ValueError("overlap needs at least two patterns")
    da = _grid_area(patterns, cell_area)
    norms = da * np.sum(np.abs(stack) ** 2, axis=1)
    if np.any(norms == 0):
        raise DegeneratePatternError("a pattern has zero norm")
    if conjugate:
        gram = np.abs(da * (stack.conj() @ stack.T))
    else:
        mag = np.abs(stack)
        gram = da * (mag @ mag.T)
    terms = gram / np.sqrt(np.outer(norms, norms))
    iu = np.triu_indices(len(stack), k=1)
    return float(np.clip(terms[iu], 0.0, 1.0).mean())


def intensity(patterns: Sequence, cell_area: float | None = None) -> float:
    stack = _as_stack(patterns)
    if len(stack) == 0:
        raise ValueError("intensity needs at least one pattern")
    da = _grid_area(patterns, cell_area)
    return float(np.mean(da * np.sum(np.abs(stack) ** 2, axis=1)))


def on_ratio(config_tx, config_rx=None) -> float:
    bits = [np.asarray(config_tx).ravel()]
    if config_rx is not None:
        bits.append(np.asarray(config_rx).ravel())
    allbits = np.concatenate(bits)
    if allbits.size == 0:
        raise ValueError("on_ratio needs at least one bit")
    return float(np.count_nonzero(allbits) / allbits.size)


def random_config_patterns(op_tx: AntennaOperator, op_rx: AntennaOperator, bits_tx, bits_rx) -> np.ndarray:
    e_tx, _ = op_tx.fields(np.asarray(bits_tx, dtype=float))
    e_rx, _ = op_rx.fields(np.asarray(bits_rx, dtype=float))
    return e_tx * e_rx


def baseline_intensity(layout_tx: DmaLayout, layout_rx: DmaLayout, em: EmModel, grid: SceneGrid,
                       n_draws: int = 1000, rng_seed=0, sampler=None) -> float:
    """Monte-Carlo mean intensity over uniformly random binary configurations.

    ``sampler(rng, shape)`` replaces the uniform bit sampler (used in tests).
    """
    if n_draws < 100:
        raise ValueError("baseline intensity needs at least 100 draws")
    rng = np.random.default_rng(rng_seed)
    n = layout_tx.n_atoms
    draw = sampler or (lambda g, shape: g.integers(0, 2, size=shape))
    bits_tx = draw(rng, (n_draws, n))
    bits_rx = draw(rng, (n_draws, layout_rx.n_atoms))
    op_tx = AntennaOperator(layout_tx, grid, em)
    op_rx = AntennaOperator(layout_rx, grid, em)
    value = intensity(random_config_patterns(op_tx, op_rx, bits_tx, bits_rx), grid.cell_area)
    if not value > 0:
        raise CalibrationError("random-configuration intensity is zero")
    return value


def sequence_metrics(patterns: np.ndarray, cell_area: float, baseline: float, config_tx, config_rx,
                     conjugate_overlap: bool = False) -> SequenceMetrics:
    """All four descriptors; overlap is NaN for a single-pattern sequence."""
    o = overlap(patterns, cell_area, conjugate_overlap) if len(patterns) >= 2 else float("nan")
    i = intensity(patterns, cell_area)
    return SequenceMetrics(o, i, i / baseline, on_ratio(config_tx, config_rx))


def aggregate(values: Iterable[float]) -> tuple[float, float]:
    """Sample mean and (n-1) standard deviation; the std of one value is 0."""
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        raise ValueError("cannot aggregate an empty set of realizations")
    if arr.size == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std(ddof=1))


def aggregate_table(records: Iterable[Mapping[str, float]], keys: Sequence[str]) -> dict:
    records = list(records)
    return {k: aggregate(r[k] for r in records) for k in keys}

