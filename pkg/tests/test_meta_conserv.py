import numpy as np
import pytest

from ffstack.basemodels import (
    BaseModel,
    BaseModelSpec,
    DescriptorSpec,
    hvp_counter,
    init_params,
    train_base,
)
from ffstack.core import Dataset, LabeledStructure, Structure
from ffstack.errors import ValidationError
from ffstack.meta_conserv import (
    ABLATION,
    FULL,
    ConservModel,
    ConservSpec,
    _param_layout,
    bind_conserv,
    conserv_forces,
    conserv_forces_ablation,
    init_conserv_params,
    theta_energy,
    train_conserv,
)
from ffstack.refpes import eval_ref, pseudo_methane_spec, pseudo_methane_structure
from ffstack.training import TrainHyper


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def analytic_base(eps_scale=1.0, elements=(1, 6)):
    spec = BaseModelSpec(
        f"pa-{eps_scale}", kind="perturbed_analytic",
        epsilon_scale=eps_scale, elements=elements,
    )
    return BaseModel(
        spec=spec, params=np.zeros(0),
        ref=pseudo_methane_spec().scaled(eps_scale, 1.0),
    )


def small_mlp_base(seed, train_data, val_data, epochs=40):
    spec = BaseModelSpec(
        f"mlp-{seed}", descriptor=DescriptorSpec(kind="radial", n_rbf=6),
        hidden=(12,), seed=seed, elements=(1, 6),
    )
    return train_base(spec, train_data, val_data,
                      TrainHyper(lr=3e-3, epochs=epochs, patience=epochs, seed=seed))


def methane_dataset(n_frames, seed, noise=0.08):
    spec, base = pseudo_methane_spec(), pseudo_methane_structure()
    rng = np.random.Generator(np.random.PCG64(seed))
    items = []
    for _ in range(n_frames):
        s = base.with_positions(base.positions + rng.normal(size=(5, 3)) * noise)
        e, f = eval_ref(spec, s)
        items.append(LabeledStructure(s, e, f))
    return Dataset(items, name="methane-mini")


def mk_model(mode=FULL, n_models=2, seed=0, stats=(0.0, 1.0), scale=0.05):
    spec = ConservSpec(
        layers=2, hidden=16, n_rbf=4, cutoff=5.0, mode=mode,
        energy_embed_dim=4, elements=(1, 6), seed=seed,
    )
    return ConservModel(
        spec=spec, n_models=n_models,
        params=init_conserv_params(spec, n_models),
        energy_stats=stats, energy_scale=scale,
    )


def perturbed_structure(seed, noise=0.06):
    s = pseudo_methane_structure()
    rng = np.random.Generator(np.random.PCG64(seed))
    return s.with_positions(s.positions + rng.normal(size=(5, 3)) * noise)


def composed_energy(m, s, bases):
    preds = [b.predict(s) for b in bases]
    return theta_energy(m, s, preds)


class TestThetaInvariance:
    def test_rotation_translation_invariance(self):
        m = mk_model(seed=1)
        bases = [analytic_base(1.0), analytic_base(1.03)]
        # randomize params so the test is not trivially zero
        rng = np.random.Generator(np.random.PCG64(2))
        m.params = m.params + rng.normal(size=m.params.size) * 0.05
        s = perturbed_structure(3)
        preds = [b.predict(s) for b in bases]
        e0 = theta_energy(m, s, preds)
        for _ in range(6):
            R = random_rotation(rng)
            t = rng.normal(size=3) * 4.0
            s2 = s.with_positions(s.positions @ R.T + t)
            preds2 = [
                type(p)(p.energy, p.forces @ R.T) for p in preds
            ]
            assert theta_energy(m, s2, preds2) == pytest.approx(e0, abs=1e-9)

    def test_permutation_invariance(self):
        m = mk_model(seed=4)
        rng = np.random.Generator(np.random.PCG64(5))
        m.params = m.params + rng.normal(size=m.params.size) * 0.05
        bases = [analytic_base(1.0), analytic_base(1.03)]
        s = perturbed_structure(6)
        preds = [b.predict(s) for b in bases]
        e0 = theta_energy(m, s, preds)
        perm = np.array([2, 0, 4, 1, 3])
        s2 = Structure([s.species[p] for p in perm], s.positions[perm])
        preds2 = [type(p)(p.energy, p.forces[perm]) for p in preds]
        assert theta_energy(m, s2, preds2) == pytest.approx(e0, abs=1e-10)

    def test_zero_params_zero_energy(self):
        m = mk_model(seed=7)
        m.params = np.zeros_like(m.params)
        bases = [analytic_base(1.0), analytic_base(1.03)]
        s = perturbed_structure(8)
        preds = [b.predict(s) for b in bases]
        assert theta_energy(m, s, preds) == 0.0


class TestChainRule:
    def test_identity_on_first_base(self):
        # theta == E_1 exactly: w_byp = (1, 0), all other params zero
        m = mk_model(seed=9)
        m.params = np.zeros_like(m.params)
        layout, _, _ = _param_layout(m.spec, 2)
        _, lo, hi = layout["w_byp"]
        m.params[lo] = 1.0
        bases = [analytic_base(1.0), analytic_base(1.03)]
        s = perturbed_structure(10)
        e, f = conserv_forces(m, s, bases)
        p = bases[0].predict(s)
        assert e == pytest.approx(p.energy, rel=1e-12)
        np.testing.assert_allclose(f, p.forces, atol=1e-10)

    def test_mean_combination(self):
        m = mk_model(seed=11)
        m.params = np.zeros_like(m.params)
        layout, _, _ = _param_layout(m.spec, 2)
        _, lo, hi = layout["w_byp"]
        m.params[lo:hi] = 0.5
        bases = [analytic_base(1.0), analytic_base(1.06)]
        s = perturbed_structure(12)
        e, f = conserv_forces(m, s, bases)
        p0, p1 = bases[0].predict(s), bases[1].predict(s)
        assert e == pytest.approx(0.5 * (p0.energy + p1.energy), rel=1e-12)
        np.testing.assert_allclose(f, 0.5 * (p0.forces + p1.forces), atol=1e-10)

    def test_matches_finite_difference_of_composed_map(self):
        # load-bearing oracle: F_total == -d/dx theta(E(x), F(x), x)
        rng = np.random.Generator(np.random.PCG64(13))
        m = mk_model(seed=13)
        m.params = m.params + rng.normal(size=m.params.size) * 0.05
        bases = [analytic_base(1.0), analytic_base(1.05)]
        h = 1e-4
        for trial in range(4):
            s = perturbed_structure(100 + trial)
            e, f = conserv_forces(m, s, bases)
            fscale = max(1.0, np.abs(f).max())
            for a, c in [(0, 0), (1, 2), (3, 1)]:
                xp = s.positions.copy()
                xp[a, c] += h
                xm = s.positions.copy()
                xm[a, c] -= h
                fd = -(
                    composed_energy(m, s.with_positions(xp), bases)
                    - composed_energy(m, s.with_positions(xm), bases)
                ) / (2 * h)
                assert abs(f[a, c] - fd) / fscale <= 1e-5

    def test_force_equivariance(self):
        rng = np.random.Generator(np.random.PCG64(14))
        m = mk_model(seed=14)
        m.params = m.params + rng.normal(size=m.params.size) * 0.05
        bases = [analytic_base(1.0), analytic_base(1.05)]
        s = perturbed_structure(15)
        e0, f0 = conserv_forces(m, s, bases)
        for _ in range(5):
            R = random_rotation(rng)
            s2 = s.with_positions(s.positions @ R.T + rng.normal(size=3))
            e2, f2 = conserv_forces(m, s2, bases)
            assert e2 == pytest.approx(e0, abs=1e-8)
            np.testing.assert_allclose(f2, f0 @ R.T, atol=1e-8)

    def test_closed_loop_work_is_zero(self):
        rng = np.random.Generator(np.random.PCG64(16))
        m = mk_model(seed=16)
        m.params = m.params + rng.normal(size=m.params.size) * 0.05
        bases = [analytic_base(1.0), analytic_base(1.05)]
        s = perturbed_structure(17)
        nodes_gl, weights_gl = np.polynomial.legendre.leggauss(24)
        for loop in range(3):
            lrng = np.random.Generator(np.random.PCG64(200 + loop))
            pts = [s.positions + lrng.normal(size=(5, 3)) * 0.025 for _ in range(5)]
            pts.append(pts[0])
            work = 0.0
            for a, b in zip(pts[:-1], pts[1:]):
                dxv = b - a
                for t, wq in zip(nodes_gl, weights_gl):
                    mid = a + (t + 1) / 2 * dxv
                    _, f = conserv_forces(m, s.with_positions(mid), bases)
                    work += wq / 2 * np.sum(f * dxv)
            assert abs(work) <= 1e-6

    def test_batch_provider_matches_single(self):
        rng = np.random.Generator(np.random.PCG64(18))
        m = mk_model(seed=18)
        m.params = m.params + rng.normal(size=m.params.size) * 0.05
        bases = [analytic_base(1.0), analytic_base(1.05)]
        s = pseudo_methane_structure()
        ff = bind_conserv(m, bases, s)
        xs = np.stack([perturbed_structure(300 + i).positions for i in range(3)])
        eb, fb = ff(xs)
        for i in range(3):
            e1, f1 = conserv_forces(m, s.with_positions(xs[i]), bases)
            assert eb[i] == pytest.approx(e1, rel=1e-12)
            np.testing.assert_allclose(fb[i], f1, atol=1e-12)


class TestAblation:
    def test_identity_on_first_base(self):
        m = mk_model(mode=ABLATION, seed=19)
        m.params = np.zeros_like(m.params)
        layout, _, _ = _param_layout(m.spec, 2)
        _, lo, hi = layout["w_byp"]
        m.params[lo] = 1.0
        bases = [analytic_base(1.0), analytic_base(1.03)]
        s = perturbed_structure(20)
        e, f = conserv_forces_ablation(m, s, bases)
        p = bases[0].predict(s)
        np.testing.assert_allclose(f, p.forces, atol=1e-10)

    def test_zero_hvp_calls(self):
        rng = np.random.Generator(np.random.PCG64(21))
        m = mk_model(mode=ABLATION, seed=21)
        m.params = m.params + rng.normal(size=m.params.size) * 0.05
        bases = [analytic_base(1.0), analytic_base(1.03)]
        s = perturbed_structure(22)
        hvp_counter.reset()
        conserv_forces_ablation(m, s, bases)
        assert hvp_counter.count == 0

    def test_matches_finite_difference(self):
        rng = np.random.Generator(np.random.PCG64(23))
        m = mk_model(mode=ABLATION, seed=23)
        m.params = m.params + rng.normal(size=m.params.size) * 0.05
        bases = [analytic_base(1.0), analytic_base(1.05)]
        s = perturbed_structure(24)
        e, f = conserv_forces_ablation(m, s, bases)
        h = 1e-4
        fscale = max(1.0, np.abs(f).max())
        for a, c in [(0, 1), (2, 0), (4, 2)]:
            xp = s.positions.copy()
            xp[a, c] += h
            xm = s.positions.copy()
            xm[a, c] -= h
            fd = -(
                composed_energy(m, s.with_positions(xp), bases)
                - composed_energy(m, s.with_positions(xm), bases)
            ) / (2 * h)
            assert abs(f[a, c] - fd) / fscale <= 1e-5

    def test_mode_enforced(self):
        m = mk_model(mode=FULL, seed=25)
        bases = [analytic_base(1.0), analytic_base(1.03)]
        with pytest.raises(ValidationError):
            conserv_forces_ablation(m, pseudo_methane_structure(), bases)


class TestTraining:
    def test_perfect_base_not_degraded(self):
        # near-identity init on a single perfect base: val force RMSE stays
        # within 2x of that base after a short training run
        d = methane_dataset(24, seed=40)
        tr, va = Dataset(d.items[:18], "tr"), Dataset(d.items[18:], "va")
        base = analytic_base(1.03)
        ev, fv = base.predict_dataset(va)
        base_rmse = float(np.sqrt(np.mean((fv - np.stack([i.forces for i in va])) ** 2)))
        spec = ConservSpec(layers=1, hidden=12, n_rbf=4, mode=FULL,
                           energy_embed_dim=4, elements=(1, 6), seed=1)
        m = train_conserv(spec, [base], tr, va,
                          TrainHyper(lr=1e-3, batch_size=6, epochs=50, patience=50))
        e_out, f_out = [], []
        for it in va.items:
            e, f = conserv_forces(m, it.structure, [base])
            f_out.append(f)
        rmse = float(np.sqrt(np.mean((np.stack(f_out) - np.stack([i.forces for i in va])) ** 2)))
        assert rmse <= 2.0 * base_rmse

    def test_cached_hessians_match_live_hvp(self):
        d = methane_dataset(6, seed=41)
        tr, va = Dataset(d.items[:4], "tr"), Dataset(d.items[4:], "va")
        bases = [analytic_base(1.0), analytic_base(1.05)]
        spec = ConservSpec(layers=1, hidden=8, n_rbf=4, mode=FULL,
                           energy_embed_dim=4, elements=(1, 6), seed=2)
        h = TrainHyper(lr=1e-3, batch_size=4, epochs=2, patience=2)
        m1 = train_conserv(spec, bases, tr, va, h, hessian_cache=True)
        m2 = train_conserv(spec, bases, tr, va, h, hessian_cache=False)
        np.testing.assert_allclose(m1.params, m2.params, atol=1e-11)

    def test_ablation_training_zero_hvp(self):
        d = methane_dataset(6, seed=42)
        tr, va = Dataset(d.items[:4], "tr"), Dataset(d.items[4:], "va")
        bases = [analytic_base(1.0), analytic_base(1.05)]
        spec = ConservSpec(layers=1, hidden=8, n_rbf=4, mode=ABLATION,
                           energy_embed_dim=4, elements=(1, 6), seed=3)
        hvp_counter.reset()
        train_conserv(spec, bases, tr, va, TrainHyper(epochs=2, patience=2, batch_size=4))
        assert hvp_counter.count == 0

    def test_deterministic(self):
        d = methane_dataset(8, seed=43)
        tr, va = Dataset(d.items[:6], "tr"), Dataset(d.items[6:], "va")
        bases = [analytic_base(1.03)]
        spec = ConservSpec(layers=1, hidden=8, n_rbf=4, mode=FULL,
                           energy_embed_dim=4, elements=(1, 6), seed=4)
        h = TrainHyper(epochs=3, patience=3, batch_size=4)
        m1 = train_conserv(spec, bases, tr, va, h)
        m2 = train_conserv(spec, bases, tr, va, h)
        np.testing.assert_array_equal(m1.params, m2.params)

    def test_training_gradient_matches_fd(self):
        # full-mode loss gradient (with cached Hessians) against central FD
        d = methane_dataset(3, seed=44)
        bases = [analytic_base(1.0), analytic_base(1.05)]
        spec = ConservSpec(layers=1, hidden=6, n_rbf=3, mode=FULL,
                           energy_embed_dim=3, elements=(1, 6), seed=5)
        from ffstack.meta_conserv import _cache_for_training, _forces_from_cache

        species = d[0].structure.species
        n = 5
        pos, e_atom, forces, hess = _cache_for_training(bases, d, True)
        y_e = np.array([it.energy for it in d.items])
        y_f = np.stack([it.forces for it in d.items])
        m = ConservModel(spec=spec, n_models=2,
                         params=init_conserv_params(spec, 2),
                         energy_stats=(float(e_atom.mean()), float(e_atom.std() + 1e-3)),
                         energy_scale=0.3)
        rng = np.random.Generator(np.random.PCG64(6))
        m.params = m.params + rng.normal(size=m.params.size) * 0.05
        lam_e, lam_f = 0.1, 1.0

        def loss_of(params):
            m.params = params
            e, dx, de, df = m.theta_with_partials(species, pos, e_atom, forces)
            f_tot = _forces_from_cache(dx, de, df, forces, hess, n)
            return lam_e * np.mean(((e - y_e) / n) ** 2) + lam_f * np.mean(
                (f_tot - y_f) ** 2
            )

        params = m.params.copy()
        b = 3
        prog, x_id, e_id, f_id, w_id, out_id = m._program(species, b)
        vals = prog.forward({x_id: pos.ravel(), e_id: e_atom.ravel(),
                             f_id: forces.ravel(), w_id: params})
        adj = prog.backward(vals, {out_id: np.ones(b)})

        def pick(i, shape):
            a = adj[i]
            return np.zeros(shape) if a is None else a.reshape(shape)

        e_pred = vals[out_id]
        dx = pick(x_id, (b, n, 3))
        de = pick(e_id, (b, 2))
        df = pick(f_id, (b, n, 6))
        f_pred = _forces_from_cache(dx, de, df, forces, hess, n)
        eres, fres = e_pred - y_e, f_pred - y_f
        u = (2.0 * lam_f / fres.size) * fres
        ux = -u
        ue = np.einsum("bni,bnmi->bm", u, forces.reshape(b, n, 2, 3)) / n
        uf = np.einsum("mbij,bj->bmi", hess, u.reshape(b, 3 * n))
        uf = np.ascontiguousarray(
            uf.reshape(b, 2, n, 3).transpose(0, 2, 1, 3)
        ).reshape(b, n, 6)
        seed_e = (2.0 * lam_e / (b * n * n)) * eres
        tans = prog.forward_tangent(
            vals, {x_id: ux.ravel(), e_id: ue.ravel(), f_id: uf.ravel()}
        )
        gw = prog.backward_dual(vals, tans, {out_id: np.ones(b)}, {out_id: seed_e})[
            w_id
        ].t

        h = 1e-5
        for j in rng.integers(0, params.size, size=15):
            pp, pm = params.copy(), params.copy()
            pp[j] += h
            pm[j] -= h
            fd = (loss_of(pp) - loss_of(pm)) / (2 * h)
            assert abs(gw[j] - fd) <= 2e-5 * max(1.0, abs(fd))
