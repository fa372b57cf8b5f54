"""Experiment runner: M / noise-level sweeps over independent realizations,
the train-vs-test noise detuning matrix, and the noise-level codebook.

Every realization ``k`` draws its randomness from ``derive_seed(base_seed, k,
role)`` so layouts, training and evaluation noise are independent streams
that do not shift when the plan grows.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import data as dataio
from .em import AntennaOperator, EmModel, default_grid, default_layouts
from .errors import CalibrationError, MetaImagerError, ParseError
from .metrics import aggregate, baseline_intensity, sequence_metrics
from .noise import NoiseKind, NoiseSpec, calibrate_rho_unit, estimate_noise_level
from .pipeline import Mode, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

log = logging.getLogger(__name__)

RESULTS_FILE = "results.csv"
MANIFEST_FILE = "manifest.csv"
MANIFEST_COLUMNS = ["kind", "level", "path", "validation_accuracy", "status"]


def derive_seed(base_seed: int, k: int, role: str) -> int:
    digest = hashlib.sha256(f"{base_seed}:{k}:{role}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass
class ExperimentPlan:
    modes: list = field(default_factory=lambda: [Mode.LEARNED, Mode.RANDOM_BASELINE])
    m_values: list = field(default_factory=lambda: [1, 2, 3, 5, 8, 15])
    noise_kind: NoiseKind = NoiseKind.SIGNAL_INDEPENDENT
    train_levels: list = field(default_factory=lambda: [0.01, 0.1, 1.0, 10.0, 100.0])
    test_levels: Optional[list] = None
    realizations: int = 3
    base_seed: int = 0
    scale: float = 0.2
    output_dir: Path = Path("runs")
    mnist_dir: Optional[Path] = None
    mnist_images: Optional[Path] = None
    mnist_labels: Optional[Path] = None
    mnist_test_images: Optional[Path] = None
    mnist_test_labels: Optional[Path] = None
    binarize_digits: bool = False
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    physical_learning_rate: float = 1e-2
    tau0: float = 1.0
    growth: float = 1.3
    patience: int = 10
    calibration_draws: int = 2000
    baseline_draws: int = 1000
    conjugate_overlap: bool = False
    record_timing: bool = True
    jobs: int = 1

    def __post_init__(self):
        self.modes = [Mode.parse(m) for m in self.modes]
        self.noise_kind = NoiseKind.parse(self.noise_kind)
        self.m_values = [int(m) for m in self.m_values]
        self.train_levels = [float(x) for x in self.train_levels]
        if self.test_levels is not None:
            self.test_levels = [float(x) for x in self.test_levels]
        self.output_dir = Path(self.output_dir)
        if not (self.modes and self.m_values and self.train_levels):
            raise ValueError("modes, m_values and train_levels must be nonempty")
        if self.test_levels is not None and not self.test_levels:
            raise ValueError("test_levels must be nonempty when given")
        if self.realizations < 1:
            raise ValueError("realizations must be >= 1")

    def levels_to_test(self, train_level: float) -> list:
        return list(self.test_levels) if self.test_levels is not None else [train_level]

    def train_config(self, mode: Mode, m: int, seed: int) -> TrainConfig:
        return TrainConfig(m=m, epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate,
                           physical_learning_rate=self.physical_learning_rate,
                           tau0=self.tau0, growth=self.growth, rng_seed=seed,
                           patience=self.patience, mode=mode)

    def points(self) -> list[tuple]:
        return [(mode, m, level, k)
                for m in self.m_values
                for level in self.train_levels
                for k in range(self.realizations)
                for mode in self.modes]


def _mnist_paths(plan: ExperimentPlan) -> tuple[Path, Path, Path, Path]:
    if plan.mnist_images is not None and plan.mnist_labels is not None:
        tr_img, tr_lbl = Path(plan.mnist_images), Path(plan.mnist_labels)
        te_img = Path(plan.mnist_test_images) if plan.mnist_test_images else tr_img.with_name(tr_img.name.replace("train", "t10k"))
        te_lbl = Path(plan.mnist_test_labels) if plan.mnist_test_labels else tr_lbl.with_name(tr_lbl.name.replace("train", "t10k"))
        return tr_img, tr_lbl, te_img, te_lbl
    if plan.mnist_dir is None:
        raise ValueError("no MNIST location configured (mnist_dir or mnist_images/mnist_labels)")
    d = Path(plan.mnist_dir)

    def find(stem):
        for name in (stem, stem + ".gz"):
            if (d / name).exists():
                return d / name
        raise FileNotFoundError(d / stem)

    return (find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"),
            find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"))


@lru_cache(maxsize=4)
def _load_splits(paths: tuple, seed: int, scale: float, binarize: bool) -> dataio.DatasetSplits:
    tr_img, tr_lbl, te_img, te_lbl = paths
    train_file = dataio.load_mnist(tr_img, tr_lbl)
    test_file = dataio.load_mnist(te_img, te_lbl)
    return dataio.split(train_file, test_file, rng_seed=seed, scale=scale, binarize=binarize)


def load_plan_data(plan: ExperimentPlan) -> dataio.DatasetSplits:
    return _load_splits(_mnist_paths(plan), derive_seed(plan.base_seed, 0, "split"), plan.scale,
                        plan.binarize_digits)


@dataclass
class Realization:
    index: int
    seed: int
    layout_tx: object
    layout_rx: object
    calibration: float
    baseline_intensity: float


def measurement_closure(layout_tx, layout_rx, grid, em) -> Callable:
    """Batched clean-measurement map used by the rho-unit calibration."""
    op_tx = AntennaOperator(layout_tx, grid, em)
    op_rx = AntennaOperator(layout_rx, grid, em)

    def forward(config_tx, config_rx, scenes):
        j = op_tx.fields(config_tx)[0] * op_rx.fields(config_rx)[0]
        return grid.cell_area * np.sum(j * np.asarray(scenes).reshape(len(j), -1), axis=1)

    forward.batched = True
    return forward


_REALIZATIONS: dict = {}


def realization(plan: ExperimentPlan, splits: dataio.DatasetSplits, k: int,
                em: EmModel = EmModel()) -> Realization:
    """Layouts plus per-realization calibration constants (memoized)."""
    key = (plan.base_seed, k, plan.calibration_draws, plan.baseline_draws, id(splits), em)
    if key in _REALIZATIONS:
        return _REALIZATIONS[key]
    grid = default_grid(em)
    seed = derive_seed(plan.base_seed, k, "realization")
    tx, rx = default_layouts(derive_seed(plan.base_seed, k, "layout"), em)
    x_train, _ = splits.train_arrays()
    cal = calibrate_rho_unit(measurement_closure(tx, rx, grid, em), x_train, plan.calibration_draws,
                             derive_seed(plan.base_seed, k, "calibration"), n_atoms=tx.n_atoms)
    base = baseline_intensity(tx, rx, em, grid, plan.baseline_draws, derive_seed(plan.base_seed, k, "baseline"))
    out = Realization(k, seed, tx, rx, cal, base)
    _REALIZATIONS[key] = out
    return out


def noise_spec(kind: NoiseKind, level: float, calibration: float) -> NoiseSpec:
    if kind is NoiseKind.NONE:
        return NoiseSpec(kind, 0.0, calibration)
    return NoiseSpec(kind, level, calibration)


def _row_key(mode: Mode, m: int, kind: NoiseKind, level: float, seed: int) -> tuple:
    return (mode.value, m, kind.value, float(level), seed)


def run_point(plan: ExperimentPlan, point: tuple, em: EmModel = EmModel()) -> list:
    """Train one (mode, M, level, realization) point and evaluate it at every test level."""
    mode, m, level, k = point
    splits = load_plan_data(plan)
    real = realization(plan, splits, k, em)
    grid = default_grid(em)
    spec = noise_spec(plan.noise_kind, level, real.calibration)
    start = time.perf_counter()
    model, _ = train(plan.train_config(mode, m, derive_seed(plan.base_seed, k, "train")), splits,
                     real.layout_tx, real.layout_rx, em, spec, grid, signal_scale=real.calibration)
    ctx, crx = model.configs()
    metrics = sequence_metrics(model.patterns(), grid.cell_area, real.baseline_intensity, ctx, crx,
                               plan.conjugate_overlap)
    x_test, y_test = splits.test_arrays()
    rows = []
    for t_level in plan.levels_to_test(level):
        eval_seed = derive_seed(plan.base_seed, k, f"eval:{t_level!r}")
        acc = evaluate(model, x_test, y_test, noise_spec(plan.noise_kind, t_level, real.calibration), eval_seed)
        rows.append(dataio.ResultRow(
            mode=mode.value, M=m, noise_kind=plan.noise_kind.value, train_level=float(level),
            test_level=float(t_level), seed=real.seed, accuracy=acc, overlap=metrics.overlap,
            intensity_ratio=metrics.intensity_ratio, on_ratio=metrics.on_ratio, wall_time=0.0))
    elapsed = time.perf_counter() - start if plan.record_timing else 0.0
    return [replace(r, wall_time=elapsed) for r in rows]


def _run_point_job(args):
    plan, point = args
    return run_point(plan, point)


def run_plan(plan: ExperimentPlan, results_path: Optional[Path] = None,
             max_points: Optional[int] = None) -> list:
    """Run every plan point not yet present in the results file.

    Rows are appended point by point in plan order (a single writer), so an
    interrupted run keeps its finished points and a rerun fills in the rest.
    ``max_points`` caps how many new points are trained in this call.
    """
    results_path = Path(results_path) if results_path else plan.output_dir / RESULTS_FILE
    results_path.parent.mkdir(parents=True, exist_ok=True)
    existing = dataio.load_results(results_path) if results_path.exists() else []
    if not results_path.exists():
        dataio.persist_results([], results_path)
    done = {r.key() for r in existing}

    todo = []
    for point in plan.points():
        mode, m, level, k = point
        key = _row_key(mode, m, plan.noise_kind, level, derive_seed(plan.base_seed, k, "realization"))
        if key not in done:
            todo.append(point)
    if max_points is not None:
        todo = todo[:max_points]

    new_rows = []
    if plan.jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=plan.jobs) as pool:
            for rows in pool.map(_run_point_job, [(plan, p) for p in todo]):
                dataio.persist_results(rows, results_path, append=True)
                new_rows.extend(rows)
    else:
        for point in todo:
            rows = run_point(plan, point)
            dataio.persist_results(rows, results_path, append=True)
            new_rows.extend(rows)
            log.info("finished %s -> %s", point, [round(r.accuracy, 4) for r in rows])
    return dataio.load_results(results_path)


# -- detuning ------------------------------------------------------------------

@dataclass
class DetuningMatrix:
    mode: str
    train_levels: list
    test_levels: list
    mean: np.ndarray
    std: np.ndarray


def detuning_from_rows(rows: Sequence, mode: str, m: int, kind: str,
                       train_levels: Sequence[float], test_levels: Sequence[float]) -> DetuningMatrix:
    mean = np.full((len(train_levels), len(test_levels)), np.nan)
    std = np.full_like(mean, np.nan)
    for i, tr in enumerate(train_levels):
        for j, te in enumerate(test_levels):
            accs = [r.accuracy for r in rows if r.mode == mode and r.M == m and r.noise_kind == kind
                    and r.train_level == tr and r.test_level == te]
            if accs:
                mean[i, j], std[i, j] = aggregate(accs)
    return DetuningMatrix(mode, list(train_levels), list(test_levels), mean, std)


def detuning_matrix(plan: ExperimentPlan, results_path: Optional[Path] = None) -> dict:
    """Accuracy matrices (rows: trained level, columns: tested level) per mode and M."""
    test_levels = plan.test_levels if plan.test_levels is not None else plan.train_levels
    if not plan.train_levels or not test_levels:
        raise ValueError("detuning needs nonempty train and test grids")
    full = replace(plan, test_levels=list(test_levels))
    rows = run_plan(full, results_path)
    out = {}
    for mode in full.modes:
        for m in full.m_values:
            mat = detuning_from_rows(rows, mode.value, m, full.noise_kind.value, full.train_levels, test_levels)
            out[(mode.value, m)] = mat
            write_detuning_csv(mat, full.output_dir / f"detuning_{full.noise_kind.value}_M{m}_{mode.value}.csv")
    return out


def write_detuning_csv(mat: DetuningMatrix, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["train_level", "test_level", "mean_accuracy", "std_accuracy"])
        for i, tr in enumerate(mat.train_levels):
            for j, te in enumerate(mat.test_levels):
                w.writerow([repr(tr), repr(te), repr(float(mat.mean[i, j])), repr(float(mat.std[i, j]))])


# -- codebook -----------------------------------------------------------------

@dataclass
class CodebookEntry:
    kind: str
    level: float
    path: str
    validation_accuracy: float
    status: str = "ok"


@dataclass
class Codebook:
    entries: list
    root: Path = Path(".")

    def ok_entries(self) -> list:
        return [e for e in self.entries if e.status == "ok"]

    def resolve(self, entry: CodebookEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p


def quantize_level(level: float) -> float:
    """Snap a level onto the decade grid."""
    if level <= 0:
        return 0.0
    return float(10.0 ** round(math.log10(level)))


def write_manifest(codebook: Codebook, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for e in codebook.entries:
            w.writerow([e.kind, repr(float(e.level)), e.path, repr(float(e.validation_accuracy)), e.status])


def load_manifest(path) -> Codebook:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_COLUMNS:
            raise ParseError(f"{path}: unexpected manifest header {header}")
        entries = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(MANIFEST_COLUMNS):
                raise ParseError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} fields")
            try:
                entries.append(CodebookEntry(rec[0], float(rec[1]), rec[2], float(rec[3]), rec[4]))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return Codebook(entries, path.parent)


def build_codebook(plan: ExperimentPlan, levels: Optional[Sequence[float]] = None, m: Optional[int] = None,
                   realization_index: int = 0) -> Codebook:
    """Train and checkpoint one learned model per noise level; writes ``manifest.csv``.

    A failure at one level is logged and recorded with a ``failed`` status.
    """
    levels = [quantize_level(x) for x in (levels if levels is not None else plan.train_levels)]
    if not levels:
        raise ValueError("codebook grid is empty")
    m = m if m is not None else plan.m_values[0]
    splits = load_plan_data(plan)
    em = EmModel()
    grid = default_grid(em)
    real = realization(plan, splits, realization_index, em)
    x_val, y_val = splits.validation_arrays()
    out_dir = plan.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for level in levels:
        rel = f"ckpt_{plan.noise_kind.value}_{level!r}.txt"
        spec = noise_spec(plan.noise_kind, level, real.calibration)
        train_seed = derive_seed(plan.base_seed, realization_index, f"codebook:{level!r}")
        eval_seed = derive_seed(plan.base_seed, realization_index, f"codebook-eval:{level!r}")
        try:
            model, _ = train(plan.train_config(Mode.LEARNED, m, train_seed), splits, real.layout_tx,
                             real.layout_rx, em, spec, grid, signal_scale=real.calibration)
            acc = evaluate(model, x_val, y_val, rng_seed=eval_seed)
            save_checkpoint(model, out_dir / rel, seed=train_seed, extra={"eval_seed": eval_seed})
            entries.append(CodebookEntry(plan.noise_kind.value, level, rel, acc))
        except (MetaImagerError, ArithmeticError, ValueError) as exc:
            log.warning("codebook entry %s=%g failed: %s", plan.noise_kind.value, level, exc)
            entries.append(CodebookEntry(plan.noise_kind.value, level, rel, float("nan"), "failed"))
    book = Codebook(entries, out_dir)
    write_manifest(book, out_dir / MANIFEST_FILE)
    return book


def select_from_codebook(codebook: Codebook, repeats: Sequence[complex], kind, calibration: Optional[float] = None) -> CodebookEntry:
    """Estimate the noise level from repeats and pick the entry nearest in log-level.

    Ties (to 1e-9 in log space) go to the lower level.  For signal-independent
    noise the calibration defaults to the one stored in the first checkpoint.
    """
    kind = NoiseKind.parse(kind)
    candidates = sorted((e for e in codebook.ok_entries() if NoiseKind.parse(e.kind) is kind), key=lambda e: e.level)
    if not candidates:
        raise ValueError(f"codebook has no usable {kind.value} entries")
    if kind is NoiseKind.SIGNAL_INDEPENDENT and calibration is None:
        model, _ = load_checkpoint(codebook.resolve(candidates[0]))
        calibration = model.noise.calibration
    estimate = estimate_noise_level(repeats, kind, calibration or 0.0)
    return nearest_level_entry(candidates, estimate)


def nearest_level_entry(candidates: Sequence[CodebookEntry], estimate: float) -> CodebookEntry:
    if estimate <= 0:
        return min(candidates, key=lambda e: e.level)
    log_est = math.log(estimate)
    best, best_d = None, math.inf
    for e in sorted(candidates, key=lambda e: e.level):
        d = abs(math.log(e.level) - log_est) if e.level > 0 else math.inf
        if d < best_d - 1e-9:
            best, best_d = e, d
    if best is None:
        raise CalibrationError("no codebook entry with a positive level")
    return best
