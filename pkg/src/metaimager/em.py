"""Scalar coupled-dipole forward model of a waveguide-fed dynamic metasurface.

Each antenna is a parallel-plate guide fed at a single point.  The feed
launches a cylindrical wave ``exp(i k_g d) / sqrt(d)``; every meta-atom is a
point dipole whose polarizability is ``s * alpha_on`` (``s = 0`` is OFF,
``s = 1`` is ON, fractional values only appear during relaxed training).
Atoms talk to each other through the same in-guide kernel, so the moments
solve the dense system

    (I - A G) p = A h,        A = diag(s * alpha_on)

and radiate to the scene plane through the free-space Green's function
``exp(i k0 R) / (4 pi R)``.  A measurement is the Born-approximated overlap of
the TX field, the RX field and the scene reflectivity.

All arrays are float64 / complex128.  Functions accepting ``states`` also
accept a stacked ``(M, N)`` batch, which is how the training loop evaluates a
whole measurement sequence at once.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DegenerateGeometryError,
    PackingInfeasibleError,
    ResonanceSingularityError,
    ShapeError,
)

SPEED_OF_LIGHT = 299_792_458.0
CONDITION_LIMIT = 1e12
MAX_REJECTIONS = 10_000


@dataclass(frozen=True)
class EmModel:
    frequency: float = 10e9
    eps_r: float = 3.0
    gain: float = 0.1
    coupling_enabled: bool = True

    def __post_init__(self):
        if self.frequency <= 0:
            raise ValueError("frequency must be positive")
        if self.eps_r < 1:
            raise ValueError("eps_r must be >= 1 so that k_g >= k0")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.frequency

    @property
    def k0(self) -> float:
        return 2 * np.pi * self.frequency / SPEED_OF_LIGHT

    @property
    def k_g(self) -> float:
        return self.k0 * np.sqrt(self.eps_r)

    @property
    def alpha_on(self) -> complex:
        # purely imaginary (radiation-damped resonance at its peak): passive
        return 1j * 4 * np.pi / self.k0 * self.gain


def _plane_axes(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = normal / np.linalg.norm(normal)
    ref = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(ref, n)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return e1, e2


@dataclass(frozen=True, eq=False)
class DmaLayout:
    """Geometry of one antenna; positions are in metres on the aperture plane."""

    feed_position: np.ndarray
    atom_positions: np.ndarray
    aperture_half_width: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    min_spacing: float = 0.0

    def __post_init__(self):
        feed = np.asarray(self.feed_position, dtype=float).reshape(2)
        atoms = np.asarray(self.atom_positions, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "feed_position", feed)
        object.__setattr__(self, "atom_positions", atoms)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        object.__setattr__(self, "normal", np.asarray(self.normal, dtype=float).reshape(3))
        hw = self.aperture_half_width
        if hw <= 0:
            raise ValueError("aperture_half_width must be positive")
        if len(atoms) == 0:
            raise ValueError("layout needs at least one atom")
        if np.any(np.abs(atoms) > hw * (1 + 1e-12)) or np.any(np.abs(feed) > hw * (1 + 1e-12)):
            raise ValueError("atom or feed outside the aperture")
        if np.any(np.linalg.norm(atoms - feed, axis=1) == 0):
            raise DegenerateGeometryError("an atom coincides with the feed")
        if len(atoms) > 1:
            d = _pairwise(atoms)
            np.fill_diagonal(d, np.inf)
            if d.min() == 0:
                raise DegenerateGeometryError("two atoms coincide")
            if self.min_spacing > 0 and d.min() < self.min_spacing * (1 - 1e-12):
                raise ValueError("atom spacing below min_spacing")

    @property
    def n_atoms(self) -> int:
        return len(self.atom_positions)

    def atoms_3d(self) -> np.ndarray:
        e1, e2 = _plane_axes(self.normal)
        a = self.atom_positions
        return self.origin + a[:, :1] * e1 + a[:, 1:] * e2

    def to_dict(self) -> dict:
        return {
            "feed_position": self.feed_position.tolist(),
            "atom_positions": self.atom_positions.tolist(),
            "aperture_half_width": self.aperture_half_width,
            "origin": self.origin.tolist(),
            "normal": self.normal.tolist(),
            "min_spacing": self.min_spacing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DmaLayout":
        return cls(
            feed_position=np.array(d["feed_position"]),
            atom_positions=np.array(d["atom_positions"]),
            aperture_half_width=float(d["aperture_half_width"]),
            origin=np.array(d["origin"]),
            normal=np.array(d["normal"]),
            min_spacing=float(d["min_spacing"]),
        )


@dataclass(frozen=True)
class SceneGrid:
    n_rows: int = 28
    n_cols: int = 28
    pixel_pitch: float = 0.015
    plane_distance: float = 0.6

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("grid needs at least one pixel")
        if self.pixel_pitch <= 0 or self.plane_distance <= 0:
            raise ValueError("pixel_pitch and plane_distance must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def n_pixels(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def cell_area(self) -> float:
        return self.pixel_pitch ** 2

    def pixel_positions(self) -> np.ndarray:
        """Pixel centres, row-major, as an ``(n_rows * n_cols, 3)`` array.

        Row 0 is the top of the image (largest y), matching image conventions.
        """
        cols = (np.arange(self.n_cols) - (self.n_cols - 1) / 2) * self.pixel_pitch
        rows = -(np.arange(self.n_rows) - (self.n_rows - 1) / 2) * self.pixel_pitch
        yy, xx = np.meshgrid(rows, cols, indexing="ij")
        zz = np.full_like(xx, self.plane_distance)
        return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)


@dataclass(frozen=True, eq=False)
class SceneReflectivity:
    values: np.ndarray
    grid: SceneGrid

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise ShapeError(f"reflectivity shape {v.shape} does not match grid {self.grid.shape}")
        if np.any(v < 0) or np.any(v > 1):
            raise ValueError("reflectivity entries must lie in [0, 1]")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True, eq=False)
class FieldMap:
    values: np.ndarray
    grid: SceneGrid

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.shape != self.grid.shape:
            raise ShapeError(f"field shape {v.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field map has non-finite entries")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True, eq=False)
class IlluminationPattern:
    values: np.ndarray
    grid: SceneGrid

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.shape != self.grid.shape:
            raise ShapeError(f"pattern shape {v.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "values", v)


def _pairwise(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.sum(diff ** 2, axis=-1))


def _check_states(states: np.ndarray, n_atoms: int) -> np.ndarray:
    s = np.asarray(states, dtype=float)
    if s.shape[-1] != n_atoms:
        raise ShapeError(f"states have {s.shape[-1]} entries, layout has {n_atoms} atoms")
    if np.any(s < 0) or np.any(s > 1):
        raise ValueError("atom states must lie in [0, 1]")
    return s


def incident_waveguide_field(layout: DmaLayout, model: EmModel) -> np.ndarray:
    """Feed wave sampled at every atom, unit drive amplitude."""
    d = np.linalg.norm(layout.atom_positions - layout.feed_position, axis=1)
    if np.any(d == 0):
        raise DegenerateGeometryError("an atom coincides with the feed")
    return np.exp(1j * model.k_g * d) / np.sqrt(d)


def guide_coupling_matrix(layout: DmaLayout, model: EmModel) -> np.ndarray:
    """In-guide atom-to-atom kernel with a zero diagonal."""
    r = _pairwise(layout.atom_positions)
    np.fill_diagonal(r, 1.0)
    if np.any(r == 0):
        raise DegenerateGeometryError("two atoms coincide")
    g = np.exp(1j * model.k_g * r) / np.sqrt(r)
    np.fill_diagonal(g, 0.0)
    return g


def _system(states: np.ndarray, coupling: np.ndarray, model: EmModel) -> tuple[np.ndarray, np.ndarray]:
    a = states * model.alpha_on
    n = coupling.shape[0]
    k = np.eye(n) - a[..., :, None] * coupling
    return a, k


def _check_conditioning(k: np.ndarray) -> None:
    cond = np.linalg.cond(k)
    if np.any(~np.isfinite(cond)) or np.any(cond > CONDITION_LIMIT):
        raise ResonanceSingularityError(
            f"coupled-dipole system condition number {np.max(cond):.3g} exceeds {CONDITION_LIMIT:.0e}"
        )


def solve_dipole_moments(
    layout: DmaLayout,
    states: np.ndarray,
    incident: np.ndarray,
    model: EmModel,
    coupling: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Dipole moments for one configuration or a stacked batch of them."""
    s = _check_states(states, layout.n_atoms)
    h = np.asarray(incident, dtype=complex)
    if h.shape != (layout.n_atoms,):
        raise ShapeError("incident field length does not match the layout")
    if not model.coupling_enabled:
        return s * model.alpha_on * h
    if coupling is None:
        coupling = guide_coupling_matrix(layout, model)
    a, k = _system(s, coupling, model)
    _check_conditioning(k)
    return np.linalg.solve(k, (a * h)[..., None])[..., 0]


def radiation_matrix(layout: DmaLayout, grid: SceneGrid, model: EmModel) -> np.ndarray:
    """Free-space propagator from each atom to each pixel, shape ``(P, N)``."""
    diff = grid.pixel_positions()[:, None, :] - layout.atoms_3d()[None, :, :]
    r = np.sqrt(np.sum(diff ** 2, axis=-1))
    if np.any(r == 0):
        raise DegenerateGeometryError("a scene pixel coincides with a meta-atom")
    return np.exp(1j * model.k0 * r) / (4 * np.pi * r)


def radiate_to_scene(
    layout: DmaLayout, moments: np.ndarray, grid: SceneGrid, model: EmModel
) -> FieldMap:
    p = np.asarray(moments, dtype=complex)
    if p.shape != (layout.n_atoms,):
        raise ShapeError("moments length does not match the layout")
    field_values = radiation_matrix(layout, grid, model) @ p
    return FieldMap(field_values.reshape(grid.shape), grid)


def antenna_field(layout: DmaLayout, states: np.ndarray, grid: SceneGrid, model: EmModel) -> FieldMap:
    h = incident_waveguide_field(layout, model)
    p = solve_dipole_moments(layout, states, h, model)
    return radiate_to_scene(layout, p, grid, model)


def illumination(
    layout_tx: DmaLayout,
    states_tx: np.ndarray,
    layout_rx: DmaLayout,
    states_rx: np.ndarray,
    grid: SceneGrid,
    model: EmModel,
) -> IlluminationPattern:
    e_tx = antenna_field(layout_tx, states_tx, grid, model)
    e_rx = antenna_field(layout_rx, states_rx, grid, model)
    return IlluminationPattern(e_tx.values * e_rx.values, grid)


def measure(pattern: IlluminationPattern, sigma: SceneReflectivity) -> complex:
    if pattern.grid != sigma.grid or pattern.values.shape != sigma.values.shape:
        raise ShapeError("pattern and reflectivity live on different grids")
    return complex(pattern.grid.cell_area * np.sum(pattern.values * sigma.values))


def random_layout(
    rng_seed,
    n_atoms: int = 16,
    aperture_half_width: float = 0.15,
    min_spacing: float = 0.01,
    origin: Sequence[float] = (0.0, 0.0, 0.0),
) -> DmaLayout:
    """Uniform rejection-sampled atom positions with the feed at the centre.

    Atoms also keep ``min_spacing`` away from the feed probe.
    """
    if n_atoms < 1:
        raise ValueError("n_atoms must be >= 1")
    side = 2 * aperture_half_width + min_spacing
    # hexagonal packing density of equal disks of diameter min_spacing
    if (n_atoms + 1) * np.pi * (min_spacing / 2) ** 2 > 0.9069 * side ** 2:
        raise PackingInfeasibleError(f"{n_atoms} atoms cannot be packed at spacing {min_spacing}")
    rng = np.random.default_rng(rng_seed)
    feed = np.zeros(2)
    placed: list[np.ndarray] = []
    rejected = 0
    while len(placed) < n_atoms:
        cand = rng.uniform(-aperture_half_width, aperture_half_width, size=2)
        others = np.array(placed + [feed])
        if np.min(np.linalg.norm(others - cand, axis=1)) < min_spacing:
            rejected += 1
            if rejected > MAX_REJECTIONS:
                raise PackingInfeasibleError(
                    f"gave up after {MAX_REJECTIONS} rejected draws ({len(placed)}/{n_atoms} placed)"
                )
            continue
        placed.append(cand)
    return DmaLayout(
        feed_position=feed,
        atom_positions=np.array(placed),
        aperture_half_width=aperture_half_width,
        origin=np.asarray(origin, dtype=float),
        min_spacing=min_spacing,
    )


def default_grid(model: EmModel = EmModel()) -> SceneGrid:
    lam = model.wavelength
    return SceneGrid(28, 28, pixel_pitch=lam / 2, plane_distance=20 * lam)


def default_layouts(rng_seed, model: EmModel = EmModel(), n_atoms: int = 16) -> tuple[DmaLayout, DmaLayout]:
    """TX and RX apertures (10 wavelengths wide) at x = -/+ 7.5 wavelengths."""
    lam = model.wavelength
    ss = np.random.SeedSequence(rng_seed) if not isinstance(rng_seed, np.random.SeedSequence) else rng_seed
    tx_seed, rx_seed = ss.spawn(2)
    kw = dict(n_atoms=n_atoms, aperture_half_width=5 * lam, min_spacing=lam / 3)
    tx = random_layout(tx_seed, origin=(-7.5 * lam, 0.0, 0.0), **kw)
    rx = random_layout(rx_seed, origin=(7.5 * lam, 0.0, 0.0), **kw)
    return tx, rx


class AntennaOperator:
    """Precomputed feed, coupling and radiation operators for one antenna.

    Used by the training loop: ``fields`` maps a batch of states to field maps
    and ``states_grad`` runs the adjoint of that map.
    """

    def __init__(self, layout: DmaLayout, grid: SceneGrid, model: EmModel):
        self.layout = layout
        self.grid = grid
        self.model = model
        self.incident = incident_waveguide_field(layout, model)
        self.coupling = guide_coupling_matrix(layout, model)
        self.radiation = radiation_matrix(layout, grid, model)

    def moments(self, states: np.ndarray) -> tuple[np.ndarray, Optional[np.ndarray]]:
        s = _check_states(states, self.layout.n_atoms)
        h = self.incident
        if not self.model.coupling_enabled:
            return s * self.model.alpha_on * h, None
        a, k = _system(s, self.coupling, self.model)
        _check_conditioning(k)
        p = np.linalg.solve(k, (a * h)[..., None])[..., 0]
        return p, k

    def fields(self, states: np.ndarray) -> tuple[np.ndarray, dict]:
        """Flat field maps ``(..., P)`` plus the cache needed by ``states_grad``."""
        p, k = self.moments(states)
        return p @ self.radiation.T, {"p": p, "k": k}

    def states_grad(self, cache: dict, field_bar: np.ndarray) -> np.ndarray:
        """Real gradient w.r.t. states given the complex cotangent of the fields.

        Cotangents follow ``zbar = dL/dRe(z) + i dL/dIm(z)``.
        """
        alpha = self.model.alpha_on
        p_bar = field_bar @ self.radiation.conj()
        if cache["k"] is None:
            local = np.broadcast_to(self.incident, p_bar.shape)
            return np.real(np.conj(p_bar) * alpha * local)
        p = cache["p"]
        local = p @ self.coupling.T + self.incident
        lam = np.linalg.solve(np.conj(np.swapaxes(cache["k"], -1, -2)), p_bar[..., None])[..., 0]
        return np.real(np.conj(lam) * alpha * local)
