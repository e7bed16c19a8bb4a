"""Conservative meta-model.

A learned scalar potential theta maps base-model energies, base-model
forces and the atomic coordinates to one total energy. Total forces follow
from the multivariate chain rule:

    F_total = -d theta/dx
              + sum_i [ (d theta/dE_i) F_i + (d theta/dF_i) H_i ]

with F_i = -grad E_i and H_i = -grad F_i (the base Hessian). The Hessian
term is evaluated as one Hessian-vector product per base model with
direction d theta/dF_i; no dense Hessian is ever formed on this path.
Because theta is built purely from rotation/translation/permutation
invariants (distances through radial basis filters, force norms, force-force
dot products, force-onto-edge projections, per-atom energies), the composed
potential is invariant and the assembled forces are exactly conservative
and equivariant.

The ablation variant conditions theta on energies and coordinates only; its
chain rule needs no Hessians at all (the HVP counter stays untouched).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .basemodels import BaseModel, BasePrediction
from .core import Dataset, Structure
from .errors import ConfigError, EvaluationError, TrainingError, ValidationError
from .graph import species_onehot
from .training import Adam, EarlyStopper, TrainHyper, batch_indices

FULL = "full_eq6"
ABLATION = "ablation_eq7"


@dataclass(frozen=True)
class ConservSpec:
    layers: int = 2
    hidden: int = 40
    n_rbf: int = 6
    cutoff: float = 5.0
    mode: str = FULL
    energy_embed_dim: int = 16
    elements: tuple[int, ...] = (1, 6, 18)
    mu_min: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1 or self.cutoff <= 0 or self.n_rbf < 1:
            raise ConfigError("conservative spec needs layers >= 1, cutoff > 0, n_rbf >= 1")
        if self.mode not in (FULL, ABLATION):
            raise ConfigError(f"unknown mode {self.mode!r}")
        object.__setattr__(self, "elements", tuple(int(z) for z in self.elements))

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(self.mu_min, self.cutoff, self.n_rbf)


def _param_layout(spec: ConservSpec, n_models: int):
    d_e = spec.energy_embed_dim
    z = len(spec.elements)
    m = n_models
    k = spec.n_rbf
    h = spec.hidden
    pm = m * (m - 1) // 2
    if spec.mode == FULL:
        f_in = z + d_e + m + pm + m * k + k
    else:
        f_in = z + d_e + k
    shapes = [
        ("w_byp", (m,)),
        ("c_shift", (1,)),
        ("W_emb", (d_e, m)),
        ("b_emb", (d_e,)),
        ("W_mix", (h, f_in)),
        ("b_mix", (h,)),
    ]
    for l in range(spec.layers):
        shapes += [
            (f"Wf{l}", (h, k)),
            (f"bf{l}", (h,)),
            (f"Wm{l}", (h, h)),
            (f"Ws{l}", (h, h)),
            (f"bl{l}", (h,)),
        ]
    shapes += [("R1", (h, h)), ("rb1", (h,)), ("R2", (1, h)), ("rb2", (1,))]
    layout = {}
    lo = 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        layout[name] = (shape, lo, lo + size)
        lo += size
    return layout, lo, f_in


def init_conserv_params(spec: ConservSpec, n_models: int) -> np.ndarray:
    """Start at the averaging baseline: w_byp = 1/M, net output zeroed."""
    layout, n, _ = _param_layout(spec, n_models)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    params = np.zeros(n)
    for name, (shape, lo, hi) in layout.items():
        if name in ("R2", "rb2", "c_shift"):
            continue
        if name == "w_byp":
            params[lo:hi] = 1.0 / n_models
            continue
        if name[0] in ("W", "R"):
            fan_in = shape[-1]
            params[lo:hi] = rng.normal(size=hi - lo) / np.sqrt(fan_in)
    return params


def build_theta_program(
    spec: ConservSpec,
    species,
    batch: int,
    n_models: int,
    energy_stats: tuple[float, float],
    energy_scale: float,
):
    """Compile theta for `batch` stacked frames.

    Leaves: positions (B*N*3), per-atom base energies (B*M), base forces
    (B*N*3M node-major, columns model-major xyz), parameters. Output:
    per-frame total energies (B,).
    """
    n = len(species)
    bn = batch * n
    m = n_models
    k = spec.n_rbf
    h = spec.hidden
    layout, n_params, f_in = _param_layout(spec, m)
    e_mean, e_std = energy_stats

    tape = ad.Tape()
    x = tape.leaf(batch * n * 3)
    e_leaf = tape.leaf(batch * m)
    f_leaf = tape.leaf(bn * 3 * m)
    w = tape.leaf(n_params)

    def slot(name):
        shape, lo, hi = layout[name]
        return ad.gather(w, np.arange(lo, hi)), shape

    # --- geometry: undirected pair distances, RBF filters, cutoff switch ---
    iu, ju = np.triu_indices(n, k=1)
    upairs = [(b, int(i), int(j)) for b in range(batch) for i, j in zip(iu, ju)]
    npair = len(upairs)

    def flat3(b, i):
        base = (b * n + i) * 3
        return (base, base + 1, base + 2)

    gi = ad.gather(x, np.array([q for b, i, j in upairs for q in flat3(b, i)]))
    gj = ad.gather(x, np.array([q for b, i, j in upairs for q in flat3(b, j)]))
    dvec = gj - gi  # i -> j
    seg3 = np.repeat(np.arange(npair), 3)
    r = ad.sqrt(ad.scatter_add(dvec * dvec, seg3, npair))
    fc = ad.cos_cutoff(r, spec.cutoff)
    tile_k = np.repeat(np.arange(npair), k)
    phi = ad.gauss_rbf(
        ad.gather(r, tile_k), np.tile(spec.centers, npair), 4.0
    ) * ad.gather(fc, tile_k)  # (npair*k,)

    # directed edges (src -> dst) reference undirected pair rows with a sign
    d_edges = []  # (src_node, dst_node, pair_row, sign) sign: dvec points src->dst?
    for p, (b, i, j) in enumerate(upairs):
        d_edges.append((b * n + i, b * n + j, p, 1.0))
        d_edges.append((b * n + j, b * n + i, p, -1.0))
    ne = len(d_edges)
    e_src = np.array([e[0] for e in d_edges])
    e_dst = np.array([e[1] for e in d_edges])
    e_pair = np.array([e[2] for e in d_edges])
    e_sign = np.array([e[3] for e in d_edges])

    # --- per-node invariant features, assembled as rows of (f_in, BN) ------
    z_dim = len(spec.elements)
    onehot = species_onehot(list(species) * batch, spec.elements)
    rows = [tape.const(onehot.T.ravel())]  # (Z, BN)

    W_emb, _ = slot("W_emb")
    b_emb, _ = slot("b_emb")
    e_t = ad.gather(  # (M, B) from frame-major (B, M)
        e_leaf, np.array([b * m + mm for mm in range(m) for b in range(batch)])
    )
    e_norm = (e_t - e_mean) * (1.0 / e_std)
    emb = ad.affine(W_emb, e_norm, b_emb, spec.energy_embed_dim, m, batch)
    bcast = np.array(
        [d * batch + (a // n) for d in range(spec.energy_embed_dim) for a in range(bn)]
    )
    rows.append(ad.gather(emb, bcast))  # (d_E, BN)

    def transpose_rows(v, cols_per_node):
        """(BN, q) node-major flat -> (q, BN) row-major flat."""
        idx = np.array(
            [a * cols_per_node + q for q in range(cols_per_node) for a in range(bn)]
        )
        return ad.gather(v, idx)

    if spec.mode == FULL:
        # force norms |F_j^m|
        sq = f_leaf * f_leaf
        idx_nm = np.array([a * m + mm for a in range(bn) for mm in range(m) for _ in range(3)])
        norms = ad.sqrt(ad.scatter_add(sq, idx_nm, bn * m) + 1e-12)
        rows.append(transpose_rows(norms, m))

        # pairwise dots F^mi . F^mj, mi < mj
        mpairs = [(a_, b_) for a_ in range(m) for b_ in range(a_ + 1, m)]
        pm = len(mpairs)
        if pm:
            ga = ad.gather(
                f_leaf,
                np.array([a * 3 * m + mi * 3 + c for a in range(bn) for mi, mj in mpairs for c in range(3)]),
            )
            gb = ad.gather(
                f_leaf,
                np.array([a * 3 * m + mj * 3 + c for a in range(bn) for mi, mj in mpairs for c in range(3)]),
            )
            segp = np.repeat(np.arange(bn * pm), 3)
            dots = ad.scatter_add(ga * gb, segp, bn * pm)
            rows.append(transpose_rows(dots, pm))

        # projections sum_k (F_src^m . dvec_pair * sign / r) phi_k(r)
        gf = ad.gather(
            f_leaf,
            np.array([s * 3 * m + mm * 3 + c for (s, _, _, _) in d_edges for mm in range(m) for c in range(3)]),
        )
        gd = ad.gather(
            dvec, np.array([p * 3 + c for (_, _, p, _) in d_edges for _m in range(m) for c in range(3)]),
        )
        seg_em = np.repeat(np.arange(ne * m), 3)
        fdotd = ad.scatter_add(gf * gd, seg_em, ne * m)
        sign_over_r = tape.const(np.repeat(e_sign, m)) / ad.gather(
            r, np.repeat(e_pair, m)
        )
        fdotd = fdotd * sign_over_r  # (ne*m,) F . unit(src->dst)
        tile_emk = np.repeat(np.arange(ne * m), k)
        phi_gather = ad.gather(
            phi, np.array([p * k + kk for (_, _, p, _) in d_edges for _m in range(m) for kk in range(k)]),
        )
        contrib = ad.gather(fdotd, tile_emk) * phi_gather
        proj_idx = np.array(
            [s * (m * k) + mm * k + kk for (s, _, _, _) in d_edges for mm in range(m) for kk in range(k)]
        )
        proj = ad.scatter_add(contrib, proj_idx, bn * m * k)
        rows.append(transpose_rows(proj, m * k))

    # geometry-only RBF sums per node
    geo_idx = np.array(
        [s * k + kk for (s, _, _, _) in d_edges for kk in range(k)]
    )
    geo = ad.scatter_add(
        ad.gather(phi, np.array([p * k + kk for (_, _, p, _) in d_edges for kk in range(k)])),
        geo_idx,
        bn * k,
    )
    rows.append(transpose_rows(geo, k))

    feat = ad.concat(rows)  # (f_in, BN)

    W_mix, _ = slot("W_mix")
    b_mix, _ = slot("b_mix")
    hcur = ad.silu(ad.affine(W_mix, feat, b_mix, h, f_in, bn))

    phi_t = ad.gather(  # (K, npair)
        phi, np.array([p * k + kk for kk in range(k) for p in range(npair)])
    )
    for l in range(spec.layers):
        Wf, _ = slot(f"Wf{l}")
        bf, _ = slot(f"bf{l}")
        Wm, _ = slot(f"Wm{l}")
        Ws, _ = slot(f"Ws{l}")
        bl, _ = slot(f"bl{l}")
        filt = ad.affine(Wf, phi_t, bf, h, k, npair)
        v = ad.matmul(Wm, hcur, h, h, bn)
        v_src = ad.gather(v, np.array([row * bn + s for row in range(h) for (s, _, _, _) in d_edges]))
        f_edge = ad.gather(filt, np.array([row * npair + p for row in range(h) for (_, _, p, _) in d_edges]))
        msg = ad.scatter_add(
            v_src * f_edge,
            np.array([row * bn + t for row in range(h) for (_, t, _, _) in d_edges]),
            h * bn,
        )
        hcur = hcur + ad.silu(ad.affine(Ws, hcur, bl, h, h, bn) + msg)

    R1, _ = slot("R1")
    rb1, _ = slot("rb1")
    R2, _ = slot("R2")
    rb2, _ = slot("rb2")
    per_atom = ad.affine(
        R2, ad.silu(ad.affine(R1, hcur, rb1, h, h, bn)), rb2, 1, h, bn
    )
    evec_net = ad.scatter_add(per_atom, np.repeat(np.arange(batch), n), batch)

    w_byp, _ = slot("w_byp")
    c_shift, _ = slot("c_shift")
    byp = ad.matmul(w_byp, e_t, 1, m, batch) * float(n)  # sum_m w_m E_m
    e_total = evec_net * energy_scale + byp + c_shift * float(n)
    prog = tape.compile([e_total])
    return prog, x.i, e_leaf.i, f_leaf.i, w.i, e_total.i


@dataclass
class ConservModel:
    spec: ConservSpec
    n_models: int
    params: np.ndarray
    energy_stats: tuple[float, float] = (0.0, 1.0)  # per-atom base-energy mean/std
    energy_scale: float = 0.05
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if not np.all(np.isfinite(self.params)):
            raise ValidationError("conservative model parameters must be finite")
        self._progs: dict = {}

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_progs", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._progs = {}

    def _program(self, species, batch: int):
        key = (tuple(species), batch)
        if key not in self._progs:
            self._progs[key] = build_theta_program(
                self.spec, species, batch, self.n_models,
                self.energy_stats, self.energy_scale,
            )
        return self._progs[key]

    # -- theta and its partials ---------------------------------------------

    def theta_batch(self, species, pos, e_atom, forces):
        """Energies (B,) for stacked frames; inputs as in the leaf layout."""
        b = pos.shape[0]
        prog, x_id, e_id, f_id, w_id, out_id = self._program(species, b)
        vals = prog.forward(
            {x_id: pos.ravel(), e_id: e_atom.ravel(), f_id: forces.ravel(),
             w_id: self.params}
        )
        return vals[out_id].copy()

    def theta_with_partials(self, species, pos, e_atom, forces):
        """(E (B,), dE/dx (B,N,3), dE/de_atom (B,M), dE/dF (B,N,3M))."""
        b, n = pos.shape[0], pos.shape[1]
        m = self.n_models
        prog, x_id, e_id, f_id, w_id, out_id = self._program(species, b)
        vals = prog.forward(
            {x_id: pos.ravel(), e_id: e_atom.ravel(), f_id: forces.ravel(),
             w_id: self.params}
        )
        adj = prog.backward(vals, {out_id: np.ones(b)}, targets=(x_id, e_id, f_id))

        def pick(i, shape):
            a = adj[i]
            return np.zeros(shape) if a is None else a.reshape(shape)

        return (
            vals[out_id].copy(),
            pick(x_id, (b, n, 3)),
            pick(e_id, (b, m)),
            pick(f_id, (b, n, 3 * m)),
        )


def theta_energy(m: ConservModel, s: Structure, preds: list[BasePrediction]) -> float:
    """Scalar meta-energy; SE(3)- and permutation-invariant."""
    if len(preds) != m.n_models:
        raise ValidationError(f"expected {m.n_models} predictions, got {len(preds)}")
    n = s.n_atoms
    e_atom = np.array([[p.energy for p in preds]]) / n
    forces = np.concatenate([p.forces for p in preds], axis=1)[None]
    return float(m.theta_batch(s.species, s.positions[None], e_atom, forces)[0])


def _assemble_forces(
    dth_x: np.ndarray,  # (B, N, 3)
    dth_e: np.ndarray,  # (B, M) w.r.t. per-atom energies
    dth_f: np.ndarray,  # (B, N, 3M)
    base_forces: np.ndarray,  # (B, N, 3M)
    hvp_of,  # callable (m, G (B,N,3)) -> (B,N,3)
    n_models: int,
    n_atoms: int,
    skip_hessian: bool,
):
    b = dth_x.shape[0]
    f_total = -dth_x
    for mm in range(n_models):
        fm = base_forces[:, :, 3 * mm : 3 * mm + 3]
        # theta consumes E_m / N, so d theta/dE_m = dth_e / N
        f_total = f_total + (dth_e[:, mm] / n_atoms)[:, None, None] * fm
        if not skip_hessian:
            g = dth_f[:, :, 3 * mm : 3 * mm + 3]
            if np.any(g):
                f_total = f_total + hvp_of(mm, g)
    return f_total


def conserv_forces(
    m: ConservModel, s: Structure, bases: list[BaseModel]
) -> tuple[float, np.ndarray]:
    """Total energy and chain-rule forces (Hessian terms as per-base HVPs)."""
    if m.spec.mode != FULL:
        return conserv_forces_ablation(m, s, bases)
    preds = [b.predict(s) for b in bases]
    n = s.n_atoms
    e_atom = np.array([[p.energy for p in preds]]) / n
    forces = np.concatenate([p.forces for p in preds], axis=1)[None]
    e, dx, de, df = m.theta_with_partials(
        s.species, s.positions[None], e_atom, forces
    )
    for name, part in (("dtheta/dx", dx), ("dtheta/dE", de), ("dtheta/dF", df)):
        if not np.all(np.isfinite(part)):
            raise EvaluationError(f"non-finite partial {name} in chain-rule assembly")

    def hvp_of(mm, g):
        return bases[mm].force_hvp(s, g[0])[None]

    f_total = _assemble_forces(dx, de, df, forces, hvp_of, m.n_models, n, False)
    if not np.all(np.isfinite(f_total)):
        raise EvaluationError("non-finite total force in chain-rule assembly")
    return float(e[0]), f_total[0]


def conserv_forces_ablation(
    m: ConservModel, s: Structure, bases: list[BaseModel]
) -> tuple[float, np.ndarray]:
    """Hessian-free variant: theta sees energies and coordinates only."""
    if m.spec.mode != ABLATION:
        raise ValidationError("model is not in ablation mode")
    preds = [b.predict(s) for b in bases]
    n = s.n_atoms
    e_atom = np.array([[p.energy for p in preds]]) / n
    forces = np.concatenate([p.forces for p in preds], axis=1)[None]
    e, dx, de, df = m.theta_with_partials(
        s.species, s.positions[None], e_atom, forces
    )
    f_total = _assemble_forces(dx, de, df, forces, None, m.n_models, n, True)
    return float(e[0]), f_total[0]


def bind_conserv(m: ConservModel, bases: list[BaseModel], template: Structure):
    """Batched force provider for MD replicas.

    All frozen bases run on one combined tape (`FrozenEnsemble`): a single
    reverse sweep yields every base's forces and a single dual sweep yields
    every Hessian contraction of Eq.-style chain-rule assembly."""
    from .ensemble import FrozenEnsemble

    species = template.species
    n = template.n_atoms
    nm = len(bases)
    skip = m.spec.mode == ABLATION
    ens_cache: dict[int, FrozenEnsemble] = {}

    def ff(xb):
        b = xb.shape[0]
        ens = ens_cache.get(b)
        if ens is None:
            ens = ens_cache[b] = FrozenEnsemble(bases, template, b)
        pos = np.broadcast_to(xb, (nm, b, n, 3))
        e_pm, f_pm, state = ens.energy_forces(pos)
        e_atom = e_pm.T / n  # (b, nm)
        forces = np.concatenate([f_pm[mi] for mi in range(nm)], axis=2)
        e, dx, de, df = m.theta_with_partials(species, xb, e_atom, forces)
        f_total = -dx + np.einsum("bm,mbni->bni", de / n, f_pm)
        if not skip:
            g = np.ascontiguousarray(
                df.reshape(b, n, nm, 3).transpose(2, 0, 1, 3)
            )
            if np.any(g):
                f_total = f_total + ens.hvp(pos, g, state).sum(axis=0)
        return e, f_total

    return ff


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _cache_for_training(bases: list[BaseModel], d: Dataset, with_hessians: bool):
    n = d[0].structure.n_atoms
    species = d[0].structure.species
    pos = np.stack([it.structure.positions for it in d.items])
    f_parts, e_parts = [], []
    for bmodel in bases:
        e, f = bmodel.predict_dataset(d)
        f_parts.append(f)
        e_parts.append(e / n)
    forces = np.concatenate(f_parts, axis=2)
    e_atom = np.stack(e_parts, axis=1)
    hess = None
    if with_hessians:
        nf = len(d)
        dof = 3 * n
        hess = np.zeros((len(bases), nf, dof, dof))
        for mi, bmodel in enumerate(bases):
            for q in range(dof):
                g = np.zeros((nf, n, 3))
                g.reshape(nf, dof)[:, q] = 1.0
                hess[mi, :, :, q] = bmodel.force_hvp_batch(species, pos, g).reshape(
                    nf, dof
                )
    return pos, e_atom, forces, hess


def _forces_from_cache(dx, de, df, forces, hess, n):
    """Chain-rule assembly with cached dense base Hessians (training only)."""
    b = dx.shape[0]
    n_models = de.shape[1]
    f_total = -dx
    for mm in range(n_models):
        fm = forces[:, :, 3 * mm : 3 * mm + 3]
        f_total = f_total + (de[:, mm] / n)[:, None, None] * fm
        if hess is not None:
            g = df[:, :, 3 * mm : 3 * mm + 3].reshape(b, 3 * n)
            contr = np.einsum("bij,bj->bi", hess[mm], g).reshape(b, n, 3)
            f_total = f_total + contr
    return f_total


def train_conserv(
    spec: ConservSpec,
    bases: list[BaseModel],
    train: Dataset,
    val: Dataset,
    hyper: TrainHyper,
    hessian_cache: bool = True,
) -> ConservModel:
    """Fit theta so that (E_total, chain-rule F_total) match the labels.

    Bases are frozen. With `hessian_cache` (default) the per-frame base
    Hessians are assembled once from exact HVP columns and reused every
    epoch; the evaluation path (`conserv_forces`) is unaffected and always
    contracts HVPs on the fly.
    """
    train.require_nonempty("conservative training")
    val.require_nonempty("conservative validation")
    species = train[0].structure.species
    n = len(species)
    full = spec.mode == FULL
    want_h = full and hessian_cache
    pos_tr, e_tr, f_tr, h_tr = _cache_for_training(bases, train, want_h)
    pos_va, e_va, f_va, h_va = _cache_for_training(bases, val, want_h)
    y_e_tr = np.array([it.energy for it in train.items])
    y_f_tr = np.stack([it.forces for it in train.items])
    y_e_va = np.array([it.energy for it in val.items])
    y_f_va = np.stack([it.forces for it in val.items])

    e_flat = e_tr.ravel()
    stats = (float(e_flat.mean()), float(max(e_flat.std(), 1e-3)))
    scale = float(max((y_e_tr / n).std(), 0.2 * np.sqrt(np.mean(y_f_tr**2)), 0.05))

    model = ConservModel(
        spec=spec,
        n_models=len(bases),
        params=init_conserv_params(spec, len(bases)),
        energy_stats=stats,
        energy_scale=scale,
    )
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence((spec.seed, hyper.seed)))
    )
    opt = Adam(model.params.size, hyper.lr)
    stopper = EarlyStopper(hyper.patience)
    log = []
    params = model.params

    def batch_eval(pos, e_atom, forces, hess, params_now):
        model.params = params_now
        e, dx, de, df = model.theta_with_partials(species, pos, e_atom, forces)
        if want_h:
            f_total = _forces_from_cache(dx, de, df, forces, hess, n)
        else:
            def hvp_of(mm, g):
                return bases[mm].force_hvp_batch(species, pos, g)

            f_total = _assemble_forces(
                dx, de, df, forces, hvp_of, len(bases), n, not full
            )
        return e, f_total

    def val_loss(params_now):
        e, f = batch_eval(pos_va, e_va, f_va, h_va, params_now)
        le = np.mean(((e - y_e_va) / n) ** 2)
        lf = np.mean((f - y_f_va) ** 2)
        return hyper.lambda_e * le + hyper.lambda_f * lf

    for epoch in range(hyper.epochs):
        opt.lr = hyper.lr_at(epoch)
        losses = []
        for idx in batch_indices(len(train), hyper.batch_size, rng):
            b = idx.size
            model.params = params
            prog, x_id, e_id, f_id, w_id, out_id = model._program(species, b)
            leaf_vals = {
                x_id: pos_tr[idx].ravel(),
                e_id: e_tr[idx].ravel(),
                f_id: f_tr[idx].ravel(),
                w_id: params,
            }
            vals = prog.forward(leaf_vals)
            adj = prog.backward(
                vals, {out_id: np.ones(b)}, targets=(x_id, e_id, f_id)
            )

            def pick(i, shape):
                a = adj[i]
                return np.zeros(shape) if a is None else a.reshape(shape)

            e_pred = vals[out_id]
            dx = pick(x_id, (b, n, 3))
            de = pick(e_id, (b, len(bases)))
            df = pick(f_id, (b, n, 3 * len(bases)))
            if want_h:
                f_pred = _forces_from_cache(dx, de, df, f_tr[idx], h_tr[:, idx], n)
            else:
                def hvp_of(mm, g, _idx=idx):
                    return bases[mm].force_hvp_batch(species, pos_tr[_idx], g)

                f_pred = _assemble_forces(
                    dx, de, df, f_tr[idx], hvp_of, len(bases), n, not full
                )

            eres = e_pred - y_e_tr[idx]
            fres = f_pred - y_f_tr[idx]
            loss = hyper.lambda_e * np.mean((eres / n) ** 2) + hyper.lambda_f * np.mean(
                fres**2
            )
            if not np.isfinite(loss):
                raise TrainingError(f"conservative loss non-finite at epoch {epoch}")
            losses.append(loss)

            # cotangents for d loss/d params through the chain-rule assembly
            u = (2.0 * hyper.lambda_f / fres.size) * fres  # dL/dF_total
            ux = -u
            ue = np.einsum(
                "bni,bnmi->bm",
                u,
                f_tr[idx].reshape(b, n, len(bases), 3),
            ) / n
            if full:
                if want_h:
                    uf = np.einsum(
                        "mbij,bj->bmi", h_tr[:, idx], u.reshape(b, 3 * n)
                    )  # (b, M, 3N); rearrange to node-major (b, n, 3M)
                    uf = uf.reshape(b, len(bases), n, 3).transpose(0, 2, 1, 3)
                    uf = np.ascontiguousarray(uf).reshape(b, n, 3 * len(bases))
                else:
                    parts = [
                        bases[mm].force_hvp_batch(species, pos_tr[idx], u)
                        for mm in range(len(bases))
                    ]
                    uf = np.concatenate(parts, axis=2)
            else:
                uf = np.zeros((b, n, 3 * len(bases)))

            seed_e = (2.0 * hyper.lambda_e / (b * n * n)) * eres
            tans = prog.forward_tangent(
                vals, {x_id: ux.ravel(), e_id: ue.ravel(), f_id: uf.ravel()}
            )
            adj_d = prog.backward_dual(
                vals, tans, {out_id: np.ones(b)}, {out_id: seed_e}, targets=(w_id,)
            )
            params = opt.step(params, adj_d[w_id].t)

        lv = float(val_loss(params))
        log.append((epoch, float(np.mean(losses)), lv))
        if stopper.update(epoch, lv, params):
            break

    model.params = stopper.best_params
    model.train_meta = {
        "best_epoch": stopper.best_epoch,
        "best_val_loss": stopper.best_val,
        "epochs_run": len(log),
        "log": log,
    }
    return model
