"""Direct-fitting meta-model: graph attention with residual updates and
jumping-knowledge aggregation, mapping base-model predictions straight to
per-atom forces.

Layer update: H <- H + SiLU(GATConv(H, edges)); the final representation
concatenates every layer's output before a two-layer force head. Attention
uses one shared linear map per layer with per-head query/key vectors,
LeakyReLU(0.2) logits, softmax over in-neighbors plus self, and a mean over
heads inside the residual branch.

No rotational-equivariance claim: raw force components enter generic layers;
the conservative meta-model carries the symmetry contract.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .basemodels import BaseModel, BasePrediction
from .core import Dataset, Structure
from .errors import ConfigError, TrainingError, ValidationError
from .graph import EnergyEmbedder, GraphSpec, MolecularGraph, build_graph, neighbor_list, species_onehot
from .training import Adam, EarlyStopper, TrainHyper, batch_indices


@dataclass(frozen=True)
class DirectSpec:
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    head_hidden: int = 64
    graph: GraphSpec = field(default_factory=GraphSpec)
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("need at least one attention layer")
        if self.hidden % self.heads != 0:
            raise ConfigError("hidden width must be divisible by the head count")


def _param_layout(spec: DirectSpec, n_models: int):
    d_e = spec.graph.energy_embed_dim
    z = len(spec.graph.elements)
    f_in = 3 * n_models + d_e + z
    h, heads = spec.hidden, spec.heads
    shapes = [("W_emb", (d_e, n_models)), ("b_emb", (d_e,))]
    shapes += [("W_in", (h, f_in)), ("b_in", (h,))]
    for l in range(spec.layers):
        shapes += [
            (f"W{l}", (h, h)),
            (f"b{l}", (h,)),
            (f"asrc{l}", (heads, h)),
            (f"adst{l}", (heads, h)),
        ]
    shapes += [
        ("W_h1", (spec.head_hidden, spec.layers * h)),
        ("b_h1", (spec.head_hidden,)),
        ("W_h2", (3, spec.head_hidden)),
        ("b_h2", (3,)),
        ("W_skip", (3, f_in)),  # zero-init bypass; makes a perfect base exactly representable
    ]
    layout = {}
    lo = 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        layout[name] = (shape, lo, lo + size)
        lo += size
    return layout, lo, f_in


def init_direct_params(spec: DirectSpec, n_models: int) -> np.ndarray:
    layout, n, _ = _param_layout(spec, n_models)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    params = np.zeros(n)
    for name, (shape, lo, hi) in layout.items():
        if name in ("W_skip", "W_h2"):
            continue  # zero start: the initial model output is exactly zero
        if name.startswith(("W", "asrc", "adst")):
            fan_in = shape[-1]
            params[lo:hi] = rng.normal(size=hi - lo) / np.sqrt(fan_in)
    return params


def _batched_edges(edges: np.ndarray, n: int, batch: int, self_loops: bool):
    """Block-diagonal edge list over `batch` copies, with self loops."""
    per = []
    for b in range(batch):
        e = edges + b * n
        if self_loops:
            loops = np.stack([np.arange(n), np.arange(n)]) .T + b * n
            e = np.concatenate([e, loops])
        per.append(e)
    return np.concatenate(per)


def build_direct_program(spec: DirectSpec, n_models: int, species,
                         edges: np.ndarray, batch: int):
    """Compile the batched forward pass.

    Leaves: base forces (B*N*3M, node-major), base energies per atom (B*M),
    parameters. Outputs: forces (3, B*N) flattened row-major, plus the
    per-layer attention weights for inspection.
    """
    n = len(species)
    bn = batch * n
    layout, n_params, f_in = _param_layout(spec, n_models)
    d_e = spec.graph.energy_embed_dim
    z = len(spec.graph.elements)
    h, heads, L = spec.hidden, spec.heads, spec.layers

    tape = ad.Tape()
    f_leaf = tape.leaf(bn * 3 * n_models)
    e_leaf = tape.leaf(batch * n_models)
    w = tape.leaf(n_params)

    def slot(name):
        shape, lo, hi = layout[name]
        return ad.gather(w, np.arange(lo, hi)), shape

    # features (f_in, BN): forces rows, embedded-energy rows, one-hot rows
    fm = 3 * n_models
    perm = np.array([a * fm + d for d in range(fm) for a in range(bn)])
    forces_rows = ad.gather(f_leaf, perm)

    W_emb, _ = slot("W_emb")
    b_emb, _ = slot("b_emb")
    e_t = ad.gather(  # (M, B) from frame-major (B, M)
        e_leaf, np.array([b * n_models + m for m in range(n_models) for b in range(batch)])
    )
    emb = ad.affine(W_emb, e_t, b_emb, d_e, n_models, batch)
    # broadcast (d_E, B) across each frame's atoms -> (d_E, BN)
    bcast = np.array(
        [d * batch + (a // n) for d in range(d_e) for a in range(bn)]
    )
    emb_rows = ad.gather(emb, bcast)

    onehot = species_onehot(list(species) * batch, spec.graph.elements)  # (BN, Z)
    oh_rows = tape.const(onehot.T.ravel())

    x = ad.concat([forces_rows, emb_rows, oh_rows])

    W_in, _ = slot("W_in")
    b_in, _ = slot("b_in")
    hcur = ad.affine(W_in, x, b_in, h, f_in, bn)

    eb = _batched_edges(edges, n, batch, spec.graph.self_loops)
    ne = eb.shape[0]
    src, dst = eb[:, 0], eb[:, 1]

    layer_outputs = []
    attn_outputs = []
    for l in range(L):
        W_l, _ = slot(f"W{l}")
        b_l, _ = slot(f"b{l}")
        a_src, _ = slot(f"asrc{l}")
        a_dst, _ = slot(f"adst{l}")
        zmat = ad.affine(W_l, hcur, b_l, h, h, bn)
        ls = ad.matmul(a_src, zmat, heads, h, bn)  # (heads, BN)
        ld = ad.matmul(a_dst, zmat, heads, h, bn)
        g_src = np.array([hh * bn + s for hh in range(heads) for s in src])
        g_dst = np.array([hh * bn + d for hh in range(heads) for d in dst])
        logits = ad.leaky_relu(ad.gather(ls, g_src) + ad.gather(ld, g_dst), 0.2)
        seg = np.array([hh * bn + d for hh in range(heads) for d in dst])
        stab = ad.segment_max_detached(logits, seg, heads * bn)
        ex = ad.exp(logits - stab)
        denom = ad.gather(ad.scatter_add(ex, seg, heads * bn), seg)
        alpha = ex / denom  # (heads*ne,)
        attn_outputs.append(alpha)
        # mean over heads, then one weighted aggregation of shared values
        alpha_bar = ad.scatter_add(
            alpha, np.tile(np.arange(ne), heads), ne
        ) * (1.0 / heads)
        val_idx = np.array([r * bn + s for r in range(h) for s in src])
        out_idx = np.array([r * bn + d for r in range(h) for d in dst])
        weights = ad.gather(alpha_bar, np.tile(np.arange(ne), h))
        msg = ad.scatter_add(ad.gather(zmat, val_idx) * weights, out_idx, h * bn)
        hcur = hcur + ad.silu(msg)
        layer_outputs.append(hcur)

    jk = ad.concat(layer_outputs)  # (L*h, BN)
    W_h1, _ = slot("W_h1")
    b_h1, _ = slot("b_h1")
    W_h2, _ = slot("W_h2")
    b_h2, _ = slot("b_h2")
    hid = ad.silu(ad.affine(W_h1, jk, b_h1, spec.head_hidden, L * h, bn))
    W_skip, _ = slot("W_skip")
    out = ad.affine(W_h2, hid, b_h2, 3, spec.head_hidden, bn) + ad.matmul(
        W_skip, x, 3, f_in, bn
    )  # (3, BN)
    prog = tape.compile([out] + attn_outputs)
    return prog, f_leaf.i, e_leaf.i, w.i, out.i, [a.i for a in attn_outputs]


@dataclass
class DirectModel:
    spec: DirectSpec
    n_models: int
    params: np.ndarray
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if not np.all(np.isfinite(self.params)):
            raise ValidationError("direct model parameters must be finite")
        self._progs: dict = {}

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_progs", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._progs = {}

    def embedder(self) -> EnergyEmbedder:
        layout, _, _ = _param_layout(self.spec, self.n_models)
        shape, lo, hi = layout["W_emb"]
        w = self.params[lo:hi].reshape(shape)  # (d_E, M)
        shape, lo, hi = layout["b_emb"]
        return EnergyEmbedder(w.T, self.params[lo:hi])

    def _program(self, species, edges: np.ndarray, batch: int):
        key = (tuple(species), edges.tobytes(), batch)
        if key not in self._progs:
            self._progs[key] = build_direct_program(
                self.spec, self.n_models, species, edges, batch
            )
        return self._progs[key]

    def forward_batch(
        self,
        species,
        edges: np.ndarray,
        forces_block: np.ndarray,  # (B, N, 3M)
        energies: np.ndarray,  # (B, M), already per atom
    ) -> np.ndarray:
        b, n = forces_block.shape[0], forces_block.shape[1]
        prog, f_id, e_id, w_id, out_id, _ = self._program(species, edges, b)
        vals = prog.forward(
            {f_id: forces_block.ravel(), e_id: energies.ravel(), w_id: self.params}
        )
        return vals[out_id].reshape(3, b * n).T.reshape(b, n, 3).copy()

    def forward(self, g: MolecularGraph, species) -> np.ndarray:
        if g.node_features.shape[1] != 3 * self.n_models + self.spec.graph.energy_embed_dim + len(self.spec.graph.elements):
            raise ValidationError("graph feature width does not match the model")
        return self.forward_batch(
            species,
            g.edges,
            g.forces_block[None],
            g.energies_per_atom[None],
        )[0]

    def attention_weights(self, g: MolecularGraph, species) -> list[np.ndarray]:
        """Per-layer attention rows (heads, edges+self) for inspection."""
        prog, f_id, e_id, w_id, out_id, attn_ids = self._program(species, g.edges, 1)
        vals = prog.forward(
            {
                f_id: g.forces_block.ravel(),
                e_id: g.energies_per_atom.ravel(),
                w_id: self.params,
            }
        )
        return [vals[i].copy() for i in attn_ids]


def direct_forward(m: DirectModel, g: MolecularGraph, species) -> np.ndarray:
    return m.forward(g, species)


def mean_baseline(preds: list[BasePrediction]) -> BasePrediction:
    """Arithmetic mean of base predictions (the averaging baseline)."""
    if not preds:
        raise ValidationError("mean_baseline needs at least one prediction")
    n = preds[0].forces.shape[0]
    if any(p.forces.shape != (n, 3) for p in preds):
        raise ValidationError("inconsistent atom counts across predictions")
    return BasePrediction(
        float(np.mean([p.energy for p in preds])),
        np.mean([p.forces for p in preds], axis=0),
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def cache_base_predictions(bases: list[BaseModel], d: Dataset):
    """(forces (F, N, 3M), per-atom energies (F, M)) for a single-topology set."""
    d.require_nonempty("meta training")
    n = d[0].structure.n_atoms
    f_parts, e_parts = [], []
    for m in bases:
        e, f = m.predict_dataset(d)
        f_parts.append(f)
        e_parts.append(e / n)
    return np.concatenate(f_parts, axis=2), np.stack(e_parts, axis=1)


def train_direct(
    spec: DirectSpec,
    bases: list[BaseModel],
    train: Dataset,
    val: Dataset,
    hyper: TrainHyper,
) -> DirectModel:
    """Force-only MSE on cached base predictions; Adam with best-val
    checkpointing; deterministic per seed."""
    train.require_nonempty("direct training")
    val.require_nonempty("direct validation")
    species = train[0].structure.species
    edges, _, _ = neighbor_list(train[0].structure, spec.graph.cutoff)
    for d in (train, val):
        for it in d.items:
            e2, _, _ = neighbor_list(it.structure, spec.graph.cutoff)
            if e2.shape != edges.shape or not np.array_equal(e2, edges):
                raise ValidationError(
                    "frames disagree on graph topology; direct training batches "
                    "require a constant edge set"
                )

    f_tr, e_tr = cache_base_predictions(bases, train)
    f_va, e_va = cache_base_predictions(bases, val)
    y_tr = np.stack([it.forces for it in train.items])
    y_va = np.stack([it.forces for it in val.items])

    model = DirectModel(spec=spec, n_models=len(bases),
                        params=init_direct_params(spec, len(bases)))
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence((spec.seed, hyper.seed)))
    )
    opt = Adam(model.params.size, hyper.lr)
    stopper = EarlyStopper(hyper.patience)
    log = []
    params = model.params

    def val_loss(p):
        model.params = p
        pred = model.forward_batch(species, edges, f_va, e_va)
        return float(np.mean((pred - y_va) ** 2))

    n = len(species)
    for epoch in range(hyper.epochs):
        opt.lr = hyper.lr_at(epoch)
        losses = []
        for idx in batch_indices(len(train), hyper.batch_size, rng):
            b = idx.size
            prog, f_id, e_id, w_id, out_id, _ = model._program(species, edges, b)
            vals = prog.forward(
                {f_id: f_tr[idx].ravel(), e_id: e_tr[idx].ravel(), w_id: params}
            )
            pred = vals[out_id].reshape(3, b * n).T.reshape(b, n, 3)
            res = pred - y_tr[idx]
            loss = float(np.mean(res**2))
            if not np.isfinite(loss):
                raise TrainingError(f"direct training loss non-finite at epoch {epoch}")
            losses.append(loss)
            seed = (2.0 / res.size) * res.reshape(b * n, 3).T.ravel()
            adj = prog.backward(vals, {out_id: seed}, targets=(w_id,))
            params = opt.step(params, adj[w_id])
        lv = val_loss(params)
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
