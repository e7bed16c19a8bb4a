"""One tape for a whole frozen base-model suite.

MD and evaluation call every base model at every step; interpreting eight
small tapes costs eight times the per-op overhead. This module compiles all
frozen MLP members into a single program whose descriptor pipeline is
vectorized across (model, frame, pair): each model owns its own slice of
the stacked coordinate leaf, so a single reverse sweep yields every model's
forces at once, and a single dual sweep yields every model's Hessian-vector
product. Analytic members keep their own (tiny) reference programs.

Parameters are baked in as constants; use only after training.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .basemodels import BaseModel, _param_layout, hvp_counter
from .core import Structure
from .errors import ValidationError
from .graph import species_onehot
from .refpes import build_ref_program


def _build_combined_mlp(models: list[BaseModel], species, batch: int):
    """Program over stacked coordinates (n_mlp, batch, N, 3) returning the
    raw per-(model, frame) energies (n_mlp * batch,)."""
    n = len(species)
    nm = len(models)
    bn = batch * n
    npair1 = n * (n - 1) // 2
    iu, ju = np.triu_indices(n, k=1)

    tape = ad.Tape()
    x = tape.leaf(nm * batch * n * 3)

    def flat3(mi, b, i):
        base = ((mi * batch + b) * n + i) * 3
        return (base, base + 1, base + 2)

    # distances for all (model, frame, pair)
    pair_meta = [
        (mi, b, int(i), int(j))
        for mi in range(nm)
        for b in range(batch)
        for i, j in zip(iu, ju)
    ]
    npr = len(pair_meta)
    gi = ad.gather(x, np.array([q for mi, b, i, j in pair_meta for q in flat3(mi, b, i)]))
    gj = ad.gather(x, np.array([q for mi, b, i, j in pair_meta for q in flat3(mi, b, j)]))
    d = gi - gj
    r = ad.sqrt(ad.scatter_add(d * d, np.repeat(np.arange(npr), 3), npr))
    rc_pair = np.array([models[mi].spec.descriptor.cutoff for mi, _, _, _ in pair_meta])
    fc = ad.cos_cutoff(r, rc_pair)

    # radial features for every model's own (mu, eta) table
    k_of = [m.spec.descriptor.n_rbf for m in models]
    k_tot_pair = []  # per pair row: that model's K
    mu_flat, eta_flat, tile_idx = [], [], []
    for p, (mi, b, i, j) in enumerate(pair_meta):
        dscr = models[mi].spec.descriptor
        mu_flat.extend(dscr.centers)
        eta_flat.extend([dscr.eta] * dscr.n_rbf)
        tile_idx.extend([p] * dscr.n_rbf)
        k_tot_pair.append(dscr.n_rbf)
    gauss = ad.gauss_rbf(
        ad.gather(r, np.array(tile_idx)), np.array(mu_flat), np.array(eta_flat)
    ) * ad.gather(fc, np.array(tile_idx))

    # scatter both pair ends into per-model node-major descriptor blocks
    d_of = [m.spec.descriptor.width for m in models]
    block_lo = np.cumsum([0] + [bn * dW for dW in d_of])
    ang_models = [
        mi for mi in range(nm) if models[mi].spec.descriptor.kind == "radial_angular"
    ]

    def desc_index(mi, b, atom, feat):
        return block_lo[mi] + (b * n + atom) * d_of[mi] + feat

    idx_i, idx_j = [], []
    for p, (mi, b, i, j) in enumerate(pair_meta):
        for kk in range(k_of[mi]):
            idx_i.append(desc_index(mi, b, i, kk))
            idx_j.append(desc_index(mi, b, j, kk))
    desc = ad.scatter_add(
        ad.concat([gauss, gauss]),
        np.array(idx_i + idx_j),
        int(block_lo[-1]),
    )

    if ang_models:
        pair_row = {
            (mi, b, i, j): p for p, (mi, b, i, j) in enumerate(pair_meta)
        }
        trips = []  # (model, b, center, p1, s1, p2, s2)
        for mi in ang_models:
            for b in range(batch):
                for c in range(n):
                    others = [o for o in range(n) if o != c]
                    for a_ in range(len(others)):
                        for b_ in range(a_ + 1, len(others)):
                            jj, kk = others[a_], others[b_]
                            p1 = pair_row[(mi, b, min(c, jj), max(c, jj))]
                            p2 = pair_row[(mi, b, min(c, kk), max(c, kk))]
                            trips.append(
                                (mi, b, c, p1, 1.0 if c < jj else -1.0,
                                 p2, 1.0 if c < kk else -1.0)
                            )
        nt = len(trips)
        g1 = ad.gather(d, np.array([t[3] * 3 + q for t in trips for q in range(3)]))
        g2 = ad.gather(d, np.array([t[5] * 3 + q for t in trips for q in range(3)]))
        dots = ad.scatter_add(g1 * g2, np.repeat(np.arange(nt), 3), nt) * np.array(
            [t[4] * t[6] for t in trips]
        )
        r1 = ad.gather(r, np.array([t[3] for t in trips]))
        r2 = ad.gather(r, np.array([t[5] for t in trips]))
        cos_t = dots / (r1 * r2)
        eta_a = np.array([models[t[0]].spec.descriptor.eta_ang for t in trips])
        decay = (
            ad.gauss_rbf(r1, 0.0, eta_a)
            * ad.gauss_rbf(r2, 0.0, eta_a)
            * ad.gather(fc, np.array([t[3] for t in trips]))
            * ad.gather(fc, np.array([t[5] for t in trips]))
        )
        # all angular models share one term table by construction
        terms = models[ang_models[0]].spec.descriptor.angular_terms
        for mi in ang_models:
            if models[mi].spec.descriptor.angular_terms != terms:
                raise ValidationError(
                    "combined program needs identical angular term tables"
                )
        for a_i, (zeta, lam) in enumerate(terms):
            ang = (1.0 + float(lam) * cos_t) ** float(zeta) * decay * (
                2.0 ** (1.0 - float(zeta))
            )
            idx = np.array(
                [
                    desc_index(t[0], t[1], t[2], k_of[t[0]] + a_i)
                    for t in trips
                ]
            )
            desc = desc + ad.scatter_add(ang, idx, int(block_lo[-1]))

    # per-model MLP heads on their descriptor slices
    e_blocks = []
    for mi, model in enumerate(models):
        spec = model.spec
        dW = d_of[mi]
        blk = ad.gather(desc, np.arange(block_lo[mi], block_lo[mi + 1]))
        perm = np.array([a * dW + q for q in range(dW) for a in range(bn)])
        xt = ad.gather(blk, perm)  # (D, BN)
        z_dim = len(spec.elements)
        onehot = species_onehot(list(species) * batch, spec.elements)
        h = ad.concat([xt, tape.const(onehot.T.ravel())])
        layout, _ = _param_layout(spec)
        params = model.params
        dims = [dW + z_dim] + list(spec.hidden) + [1]
        sl = {name: (lo, hi) for name, _, lo, hi in layout}
        for li in range(len(dims) - 1):
            fan_in, fan_out = dims[li], dims[li + 1]
            W = tape.const(params[sl[f"W{li}"][0] : sl[f"W{li}"][1]])
            bvec = tape.const(params[sl[f"b{li}"][0] : sl[f"b{li}"][1]])
            h = ad.affine(W, h, bvec, fan_out, fan_in, bn)
            if li < len(dims) - 2:
                h = ad.silu(h)
        e_blocks.append(h)  # (BN,)
    raw = ad.scatter_add(
        ad.concat(e_blocks), np.repeat(np.arange(nm * batch), n), nm * batch
    )
    prog = tape.compile([raw])
    return prog, x.i, raw.i


class FrozenEnsemble:
    """Batched evaluator over a frozen base suite.

    Positions are (n_models, batch, N, 3): every model sees its own
    coordinates, which both lets conservative forces reuse one sweep for all
    models (identical coordinates) and lets all base-model MD trajectories
    advance together (distinct coordinates).
    """

    def __init__(self, bases: list[BaseModel], template: Structure, batch: int):
        self.bases = bases
        self.species = template.species
        self.n = template.n_atoms
        self.batch = batch
        self.mlp_idx = [i for i, b in enumerate(bases) if b.spec.kind == "mlp"]
        self.ana_idx = [i for i, b in enumerate(bases) if b.spec.kind != "mlp"]
        mlp_models = [bases[i] for i in self.mlp_idx]
        if mlp_models:
            self._mlp = _build_combined_mlp(mlp_models, self.species, batch)
        else:
            self._mlp = None
        self._ana = [
            (i, *build_ref_program(bases[i].ref, self.n, batch)) for i in self.ana_idx
        ]

    def energy_forces(self, pos: np.ndarray):
        """pos (n_models, batch, N, 3) -> energies (n_models, batch),
        forces (n_models, batch, N, 3), opaque state for `hvp`."""
        nm, b, n = len(self.bases), self.batch, self.n
        if pos.shape != (nm, b, n, 3):
            raise ValidationError(f"expected positions {(nm, b, n, 3)}, got {pos.shape}")
        e = np.empty((nm, b))
        f = np.empty((nm, b, n, 3))
        state = {}
        if self._mlp is not None:
            prog, x_id, out_id = self._mlp
            xs = pos[self.mlp_idx].ravel()
            vals = prog.forward({x_id: xs})
            adj = prog.backward(
                vals, {out_id: np.ones(len(self.mlp_idx) * b)}, targets=(x_id,)
            )
            raw = vals[out_id].reshape(len(self.mlp_idx), b)
            grads = adj[x_id].reshape(len(self.mlp_idx), b, n, 3)
            for k, mi in enumerate(self.mlp_idx):
                model = self.bases[mi]
                e[mi] = n * model.energy_shift + model.energy_scale * raw[k]
                f[mi] = -model.energy_scale * grads[k]
            state["mlp"] = vals
        for mi, prog, x_id, out_id in self._ana:
            vals = prog.forward({x_id: pos[mi].ravel()})
            adj = prog.backward(vals, {out_id: np.ones(b)}, targets=(x_id,))
            e[mi] = vals[out_id]
            f[mi] = -adj[x_id].reshape(b, n, 3)
            state[mi] = vals
        return e, f, state

    def hvp(self, pos: np.ndarray, g: np.ndarray, state) -> np.ndarray:
        """Per-model Hessian contractions (n_models, batch, N, 3) along the
        per-model directions g, reusing the forward state."""
        nm, b, n = len(self.bases), self.batch, self.n
        hvp_counter.count += nm * b
        out = np.empty((nm, b, n, 3))
        if self._mlp is not None:
            prog, x_id, out_id = self._mlp
            vals = state["mlp"]
            tans = prog.forward_tangent(vals, {x_id: g[self.mlp_idx].ravel()})
            adj = prog.backward_dual(
                vals, tans, {out_id: np.ones(len(self.mlp_idx) * b)},
                targets=(x_id,),
            )
            t = adj[x_id].t.reshape(len(self.mlp_idx), b, n, 3)
            for k, mi in enumerate(self.mlp_idx):
                out[mi] = self.bases[mi].energy_scale * t[k]
        for mi, prog, x_id, out_id in self._ana:
            vals = state[mi]
            tans = prog.forward_tangent(vals, {x_id: g[mi].ravel()})
            adj = prog.backward_dual(
                vals, tans, {out_id: np.ones(b)}, targets=(x_id,)
            )
            out[mi] = adj[x_id].t.reshape(b, n, 3)
        return out


def bind_all_bases(bases: list[BaseModel], template: Structure, replicas: int):
    """Force provider advancing every base model's replica set in lock step.

    The returned callable treats its (n_models * replicas, N, 3) positions as
    n_models independent blocks of `replicas` trajectories, so one
    `run_md_replicas` call integrates the whole suite. Trajectory
    m * replicas + r belongs to (model m, replica r)."""
    ens = FrozenEnsemble(bases, template, replicas)
    nm, n = len(bases), template.n_atoms

    def ff(xb):
        pos = xb.reshape(nm, replicas, n, 3)
        e, f, _ = ens.energy_forces(pos)
        return e.reshape(-1), f.reshape(-1, n, 3)

    return ff
