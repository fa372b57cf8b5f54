import math

import numpy as np
import pytest

from metaimager import harness
from metaimager.data import load_results
from metaimager.errors import TrainingDivergedError
from metaimager.harness import (
    Codebook,
    CodebookEntry,
    ExperimentPlan,
    build_codebook,
    derive_seed,
    detuning_matrix,
    load_manifest,
    load_plan_data,
    nearest_level_entry,
    quantize_level,
    realization,
    run_plan,
    select_from_codebook,
)
from metaimager.noise import NoiseKind, NoiseSpec, apply_noise_array
from metaimager.pipeline import evaluate, load_checkpoint


@pytest.fixture
def tiny_plan(mnist_dir, tmp_path):
    def build(**kw):
        base = dict(mnist_dir=mnist_dir, scale=0.01, epochs=2, realizations=1, m_values=[2],
                    modes=["learned"], train_levels=[1.0], calibration_draws=200, baseline_draws=200,
                    record_timing=False, output_dir=tmp_path / "run")
        base.update(kw)
        return ExperimentPlan(**base)

    return build


class TestSeeds:
    def test_stable_and_distinct(self):
        a = derive_seed(0, 0, "layout")
        assert a == derive_seed(0, 0, "layout")
        others = {derive_seed(0, 0, "train"), derive_seed(0, 1, "layout"), derive_seed(1, 0, "layout")}
        assert a not in others and len(others) == 3
        assert 0 <= a < 2**63


class TestPlan:
    def test_validation(self):
        with pytest.raises(ValueError):
            ExperimentPlan(m_values=[])
        with pytest.raises(ValueError):
            ExperimentPlan(realizations=0)
        with pytest.raises(ValueError):
            ExperimentPlan(test_levels=[])

    def test_defaults(self):
        plan = ExperimentPlan()
        assert plan.realizations == 3 and plan.scale == 0.2
        assert plan.m_values == [1, 2, 3, 5, 8, 15]
        assert plan.levels_to_test(10.0) == [10.0]
        assert len(plan.points()) == 2 * 6 * 5 * 3

    def test_missing_data_location(self):
        with pytest.raises(ValueError):
            load_plan_data(ExperimentPlan())


class TestRunPlan:
    def test_row_count_matches_test_levels(self, tiny_plan):
        plan = tiny_plan(test_levels=[0.1, 1.0, 10.0])
        rows = run_plan(plan)
        assert len(rows) == 3
        assert [r.test_level for r in rows] == [0.1, 1.0, 10.0]
        assert len({(r.overlap, r.intensity_ratio, r.on_ratio) for r in rows}) == 1
        assert all(r.wall_time == 0.0 for r in rows)

    def test_rerun_is_idempotent(self, tiny_plan):
        plan = tiny_plan()
        run_plan(plan)
        path = plan.output_dir / "results.csv"
        before = path.read_bytes()
        assert len(run_plan(plan)) == 1
        assert path.read_bytes() == before

    def test_bitwise_determinism(self, tiny_plan, tmp_path):
        a = tiny_plan(modes=["learned", "random"], output_dir=tmp_path / "a")
        b = tiny_plan(modes=["learned", "random"], output_dir=tmp_path / "b")
        run_plan(a)
        run_plan(b)
        assert (tmp_path / "a/results.csv").read_bytes() == (tmp_path / "b/results.csv").read_bytes()

    def test_resume_matches_uninterrupted(self, tiny_plan, tmp_path):
        kw = dict(modes=["learned", "random"], train_levels=[0.1, 1.0])
        full = tiny_plan(output_dir=tmp_path / "full", **kw)
        part = tiny_plan(output_dir=tmp_path / "part", **kw)
        run_plan(full)
        run_plan(part, max_points=1)
        assert len(load_results(part.output_dir / "results.csv")) == 1
        run_plan(part, max_points=2)
        run_plan(part)
        assert (full.output_dir / "results.csv").read_bytes() == (part.output_dir / "results.csv").read_bytes()

    def test_failure_keeps_finished_points(self, tiny_plan, monkeypatch):
        plan = tiny_plan(train_levels=[0.1, 1.0])
        real_point = harness.run_point
        calls = []

        def flaky(p, point, *a, **k):
            calls.append(point)
            if len(calls) == 2:
                raise TrainingDivergedError("boom")
            return real_point(p, point, *a, **k)

        monkeypatch.setattr(harness, "run_point", flaky)
        with pytest.raises(TrainingDivergedError):
            run_plan(plan)
        rows = load_results(plan.output_dir / "results.csv")
        assert [r.train_level for r in rows] == [0.1]
        monkeypatch.setattr(harness, "run_point", real_point)
        assert [r.train_level for r in run_plan(plan)] == [0.1, 1.0]

    def test_parallel_matches_serial(self, tiny_plan, tmp_path):
        kw = dict(train_levels=[0.1, 1.0])
        serial = tiny_plan(output_dir=tmp_path / "s", **kw)
        parallel = tiny_plan(output_dir=tmp_path / "p", jobs=2, **kw)
        run_plan(serial)
        run_plan(parallel)
        assert (tmp_path / "s/results.csv").read_bytes() == (tmp_path / "p/results.csv").read_bytes()

    def test_timing_recorded_when_enabled(self, tiny_plan):
        rows = run_plan(tiny_plan(record_timing=True))
        assert rows[0].wall_time > 0

    def test_random_baseline_overlap_constant_across_levels(self, tiny_plan):
        rows = run_plan(tiny_plan(modes=["random"], m_values=[3], train_levels=[0.1, 10.0], realizations=2))
        by_seed = {}
        for r in rows:
            by_seed.setdefault(r.seed, []).append(r.overlap)
        assert len(by_seed) == 2
        for vals in by_seed.values():
            assert vals[0] == pytest.approx(vals[1])

    def test_realizations_differ(self, tiny_plan):
        plan = tiny_plan(realizations=2)
        splits = load_plan_data(plan)
        r0, r1 = realization(plan, splits, 0), realization(plan, splits, 1)
        assert not np.allclose(r0.layout_tx.atom_positions, r1.layout_tx.atom_positions)
        assert r0.calibration > 0 and r0.baseline_intensity > 0


class TestDetuning:
    def test_single_cell_equals_evaluate(self, tiny_plan):
        plan = tiny_plan(test_levels=[1.0])
        mats = detuning_matrix(plan)
        mat = mats[("learned", 2)]
        assert mat.mean.shape == (1, 1) and mat.std[0, 0] == 0.0
        row = load_results(plan.output_dir / "results.csv")[0]
        assert mat.mean[0, 0] == row.accuracy
        assert (plan.output_dir / "detuning_signal_independent_M2_learned.csv").exists()

    def test_diagonal_matches_run_plan(self, tiny_plan, tmp_path):
        levels = [0.1, 1.0]
        sweep = run_plan(tiny_plan(train_levels=levels, realizations=2, output_dir=tmp_path / "sweep"))
        mat = detuning_matrix(tiny_plan(train_levels=levels, test_levels=levels, realizations=2,
                                        output_dir=tmp_path / "det"))[("learned", 2)]
        for i, lv in enumerate(levels):
            accs = [r.accuracy for r in sweep if r.train_level == lv]
            assert mat.mean[i, i] == pytest.approx(np.mean(accs), abs=0)
        assert mat.mean.shape == (2, 2)

    def test_noiseless_cell_is_repeatable(self, tiny_plan, tmp_path):
        plan = tiny_plan(noise_kind="none", train_levels=[0.0], test_levels=[0.0])
        mat = detuning_matrix(plan)[("learned", 2)]
        again = detuning_matrix(tiny_plan(noise_kind="none", train_levels=[0.0], test_levels=[0.0],
                                          output_dir=tmp_path / "again"))[("learned", 2)]
        assert mat.mean[0, 0] == again.mean[0, 0]


class TestCodebook:
    def test_single_point(self, tiny_plan):
        plan = tiny_plan()
        book = build_codebook(plan, levels=[1.0])
        assert len(book.entries) == 1
        entry = book.entries[0]
        assert entry.status == "ok" and entry.level == 1.0
        assert book.resolve(entry).exists()
        back = load_manifest(plan.output_dir / "manifest.csv")
        assert back.entries == book.entries

    def test_checkpoints_reevaluate(self, tiny_plan):
        plan = tiny_plan()
        book = build_codebook(plan, levels=[0.1, 10.0])
        x_val, y_val = load_plan_data(plan).validation_arrays()
        for entry in book.entries:
            model, rec = load_checkpoint(book.resolve(entry))
            assert model.noise.kind is NoiseKind.SIGNAL_INDEPENDENT and model.noise.level == entry.level
            acc = evaluate(model, x_val, y_val, rng_seed=rec["extra"]["eval_seed"])
            assert abs(acc - entry.validation_accuracy) <= 0.01

    def test_failure_is_recorded(self, tiny_plan, monkeypatch):
        plan = tiny_plan()
        real_train = harness.train

        def failing(config, *a, **k):
            if a[4].level > 1:
                raise TrainingDivergedError("diverged")
            return real_train(config, *a, **k)

        monkeypatch.setattr(harness, "train", failing)
        book = build_codebook(plan, levels=[1.0, 10.0])
        assert [e.status for e in book.entries] == ["ok", "failed"]
        assert math.isnan(book.entries[1].validation_accuracy)
        assert len(load_manifest(plan.output_dir / "manifest.csv").entries) == 2

    def test_level_quantization(self):
        assert quantize_level(0.09) == 0.1
        assert quantize_level(30.0) == 10.0
        assert quantize_level(0.0) == 0.0

    def test_empty_grid(self, tiny_plan):
        with pytest.raises(ValueError):
            build_codebook(tiny_plan(), levels=[])


def grid_entries(kind="signal_independent", levels=(0.1, 1.0, 10.0)):
    return [CodebookEntry(kind, lv, f"ckpt_{lv}", 0.5) for lv in levels]


class TestSelection:
    def test_exact_level(self):
        assert nearest_level_entry(grid_entries(), 1.0).level == 1.0

    def test_geometric_midpoint_goes_lower(self):
        assert nearest_level_entry(grid_entries(), math.sqrt(0.1 * 1.0)).level == 0.1
        assert nearest_level_entry(grid_entries(), math.sqrt(10.0)).level == 1.0

    def test_out_of_range(self):
        assert nearest_level_entry(grid_entries(), 1e-9).level == 0.1
        assert nearest_level_entry(grid_entries(), 0.0).level == 0.1
        assert nearest_level_entry(grid_entries(), 1e6).level == 10.0

    def test_monte_carlo_selection(self):
        cal = 2e-7
        book = Codebook(grid_entries())
        spec = NoiseSpec(NoiseKind.SIGNAL_INDEPENDENT, 1.0, cal)
        rng = np.random.default_rng(0)
        hits = 0
        for _ in range(100):
            reps = apply_noise_array(np.full(10_000, 3e-7 - 1e-7j), spec, rng)
            hits += select_from_codebook(book, reps, "signal_independent", cal).level == 1.0
        assert hits >= 95

    def test_signal_dependent_selection(self):
        book = Codebook(grid_entries("signal_dependent", (0.01, 0.1, 1.0)))
        reps = apply_noise_array(np.full(5000, 2 + 1j), NoiseSpec(NoiseKind.SIGNAL_DEPENDENT, 0.12),
                                 np.random.default_rng(1))
        assert select_from_codebook(book, reps, "beta").level == 0.1

    def test_skips_failed_and_other_kinds(self):
        entries = grid_entries() + [CodebookEntry("signal_dependent", 1.0, "x", 0.5)]
        entries[1] = CodebookEntry("signal_independent", 1.0, "y", float("nan"), "failed")
        reps = apply_noise_array(np.zeros(4000, complex), NoiseSpec(NoiseKind.SIGNAL_INDEPENDENT, 1.0, 1.0),
                                 np.random.default_rng(2))
        assert select_from_codebook(Codebook(entries), reps, "signal_independent", 1.0).level in (0.1, 10.0)
        with pytest.raises(ValueError):
            select_from_codebook(Codebook(entries[:0]), reps, "signal_independent", 1.0)

    def test_calibration_from_checkpoint(self, tiny_plan):
        plan = tiny_plan()
        book = build_codebook(plan, levels=[0.1, 1.0, 10.0])
        cal = load_checkpoint(book.resolve(book.entries[0]))[0].noise.calibration
        reps = apply_noise_array(np.zeros(10_000, complex), NoiseSpec(NoiseKind.SIGNAL_INDEPENDENT, 10.0, cal),
                                 np.random.default_rng(3))
        assert select_from_codebook(load_manifest(plan.output_dir / "manifest.csv"), reps,
                                    "signal_independent").level == 10.0
