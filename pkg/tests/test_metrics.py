import numpy as np
import pytest

from ffstack.core import Dataset, LabeledStructure, Structure
from ffstack.errors import ValidationError
from ffstack.graph import GraphSpec
from ffstack.meta_direct import DirectSpec
from ffstack.metrics import (
    ParityData,
    SubsetScanRow,
    SubsetScanResult,
    base_predictor,
    eval_forces,
    mean_baseline_predictor,
    parity_data,
    subset_scan,
)
from ffstack.training import TrainHyper

from tests.test_meta_conserv import analytic_base, methane_dataset


def const_predictor(energies, forces):
    def run(d):
        return energies, forces

    return run


def _dataset_with_forces(f_ref, name="sys", energies=None):
    items = []
    for i, f in enumerate(f_ref):
        n = f.shape[0]
        s = Structure([1] * n, np.arange(n * 3, dtype=float).reshape(n, 3) * (i + 1))
        e = 0.0 if energies is None else energies[i]
        items.append(LabeledStructure(s, e, f))
    return Dataset(items, name=name)


class TestEvalForces:
    def test_perfect_zero(self):
        d = methane_dataset(4, seed=50)
        rep = eval_forces(base_predictor(analytic_base(1.0)), d)
        assert rep.force_rmse_mev == pytest.approx(0.0, abs=1e-9)
        assert rep.force_mae_mev == pytest.approx(0.0, abs=1e-9)
        assert rep.energy_mae_mev_atom == pytest.approx(0.0, abs=1e-9)

    def test_hand_arithmetic(self):
        # one system, residuals (3, 4) over 2 components
        f_ref = [np.array([[0.0, 0.0, 0.0]])]
        d = _dataset_with_forces(f_ref)
        # predictor returns a (1, 1, 3) forces array with residuals 3 and 4
        pred = np.array([[[3.0, 4.0, 0.0]]])
        # restrict to two components by folding the third into reference
        rep = eval_forces(const_predictor(None, pred), d)
        # residuals are (3, 4, 0) over three components
        want_mae = (3 + 4 + 0) / 3 * 1e3
        want_rmse = np.sqrt((9 + 16 + 0) / 3) * 1e3
        assert rep.force_mae_mev == pytest.approx(want_mae, rel=1e-12)
        assert rep.force_rmse_mev == pytest.approx(want_rmse, rel=1e-12)

    def test_mean_of_means_across_systems(self):
        d1 = _dataset_with_forces([np.zeros((1, 3))], name="a")
        d2 = _dataset_with_forces([np.zeros((1, 3))], name="b")

        def predictor_factory(value):
            return const_predictor(None, np.full((1, 1, 3), value))

        # system RMSEs 1 and 3 (eV/A) -> averaged 2
        class TwoSystemPredictor:
            def __call__(self, d):
                v = 1.0 if d.name == "a" else 3.0
                return None, np.full((1, 1, 3), v)

        rep = eval_forces(TwoSystemPredictor(), [d1, d2])
        assert rep.force_rmse_mev == pytest.approx(2000.0, rel=1e-12)

    def test_rmse_ge_mae(self):
        rng = np.random.Generator(np.random.PCG64(51))
        f_ref = [rng.normal(size=(3, 3)) for _ in range(5)]
        d = _dataset_with_forces(f_ref)
        pred = np.stack(f_ref) + rng.normal(size=(5, 3, 3)) * 0.3
        rep = eval_forces(const_predictor(None, pred), d)
        assert rep.force_rmse_mev >= rep.force_mae_mev

    def test_equal_residuals_rmse_equals_mae(self):
        f_ref = [np.zeros((2, 3))]
        d = _dataset_with_forces(f_ref)
        pred = np.full((1, 2, 3), 0.25)
        rep = eval_forces(const_predictor(None, pred), d)
        assert rep.force_rmse_mev == pytest.approx(rep.force_mae_mev, rel=1e-12)

    def test_frame_and_atom_permutation_invariance(self):
        d = methane_dataset(6, seed=52)
        base = analytic_base(1.05)
        rep1 = eval_forces(base_predictor(base), d)
        perm = np.array([3, 1, 5, 0, 2, 4])
        d2 = Dataset([d.items[p] for p in perm], name=d.name)
        rep2 = eval_forces(base_predictor(base), d2)
        assert rep1.force_rmse_mev == pytest.approx(rep2.force_rmse_mev, rel=1e-12)

    def test_matches_bruteforce_oracle(self):
        rng = np.random.Generator(np.random.PCG64(53))
        f_ref = [rng.normal(size=(4, 3)) for _ in range(3)]
        d = _dataset_with_forces(f_ref)
        pred = np.stack(f_ref) + rng.normal(size=(3, 4, 3)) * 0.2
        rep = eval_forces(const_predictor(None, pred), d)
        diffs = []
        for i in range(3):
            for a in range(4):
                for c in range(3):
                    diffs.append(pred[i, a, c] - f_ref[i][a, c])
        diffs = np.array(diffs)
        assert rep.force_mae_mev == pytest.approx(
            np.mean(np.abs(diffs)) * 1e3, rel=1e-12
        )
        assert rep.force_rmse_mev == pytest.approx(
            np.sqrt(np.mean(diffs**2)) * 1e3, rel=1e-12
        )


class TestSubsetScan:
    def _scan(self, n_bases, epochs=2):
        d = methane_dataset(14, seed=54)
        tr = Dataset(d.items[:10], "tr")
        va = Dataset(d.items[10:12], "va")
        te = Dataset(d.items[12:], "te")
        bases = [analytic_base(1.0 + 0.02 * i) for i in range(n_bases)]
        spec = DirectSpec(
            layers=1, hidden=8, heads=1, head_hidden=4,
            graph=GraphSpec(cutoff=6.0, energy_embed_dim=2, elements=(1, 6)),
            seed=0,
        )
        hyper = TrainHyper(epochs=epochs, patience=epochs, batch_size=8)
        return subset_scan(bases, spec, tr, va, te, hyper)

    def test_single_base_one_row(self):
        res = self._scan(1)
        assert len(res.rows) == 1
        assert res.rows[0].k == 1

    def test_three_bases_seven_rows(self):
        res = self._scan(3)
        assert len(res.rows) == 7
        counts = {}
        for r in res.rows:
            counts[r.k] = counts.get(r.k, 0) + 1
        assert counts == {1: 3, 2: 3, 3: 1}

    def test_rows_reproducible(self):
        r1 = self._scan(2)
        r2 = self._scan(2)
        for a, b in zip(r1.rows, r2.rows):
            assert a.bitmask == b.bitmask
            assert a.rmse_mev == b.rmse_mev

    def test_csv_shape(self):
        res = self._scan(2)
        lines = res.to_csv().strip().split("\n")
        assert lines[0].startswith("bitmask,k,")
        assert len(lines) == 4

    def test_summary_keys(self):
        res = self._scan(2)
        summ = res.per_k_summary()
        assert set(summ) == {1, 2}
        assert {"median", "iqr", "min", "max", "count"} <= set(summ[1])

    def test_failed_rows_recorded(self):
        res = SubsetScanResult(
            rows=[
                SubsetScanRow(1, 1, float("nan"), 0, error="boom"),
                SubsetScanRow(2, 1, 5.0, 0),
            ]
        )
        summ = res.per_k_summary()
        assert summ[1]["count"] == 1
        assert "boom" in res.to_csv()


class TestParity:
    def test_perfect_model_zero_mae(self):
        d = methane_dataset(3, seed=55)
        p = parity_data(base_predictor(analytic_base(1.0)), d)
        for lo, hi, mae in p.region_maes:
            if mae is not None:
                assert mae == pytest.approx(0.0, abs=1e-9)

    def test_constant_zero_model_uniform_band(self):
        rng = np.random.Generator(np.random.PCG64(56))
        f_ref = [rng.uniform(4.0, 6.0, size=(2, 3)) for _ in range(40)]
        d = _dataset_with_forces(f_ref)
        pred = np.zeros((40, 2, 3))
        p = parity_data(const_predictor(None, pred), d, regions=((4.0, 6.0),))
        lo, hi, mae = p.region_maes[0]
        # MAE = mean |reference| ~ 5 eV/A = 5000 meV/A
        assert mae == pytest.approx(np.mean(np.abs(np.stack(f_ref))) * 1e3, rel=1e-12)
        assert abs(mae - 5000.0) < 100.0

    def test_empty_region_absent(self):
        f_ref = [np.full((1, 3), 0.5)]
        d = _dataset_with_forces(f_ref)
        p = parity_data(
            const_predictor(None, np.zeros((1, 1, 3))), d, regions=((40.0, 60.0),)
        )
        assert p.region_maes[0][2] is None

    def test_csv_round_trip(self):
        f_ref = [np.array([[1.0, 2.0, 3.0]])]
        d = _dataset_with_forces(f_ref)
        p = parity_data(const_predictor(None, np.zeros((1, 1, 3))), d)
        lines = p.to_csv().strip().split("\n")
        assert len(lines) == 4
        assert lines[1].split(",")[0] == "1.0"


class TestMeanBaselinePredictor:
    def test_average_of_bases(self):
        d = methane_dataset(2, seed=57)
        b1, b2 = analytic_base(1.0), analytic_base(1.1)
        e, f = mean_baseline_predictor([b1, b2])(d)
        e1, f1 = b1.predict_dataset(d)
        e2, f2 = b2.predict_dataset(d)
        np.testing.assert_allclose(e, (e1 + e2) / 2, rtol=1e-12)
        np.testing.assert_allclose(f, (f1 + f2) / 2, rtol=1e-12)
