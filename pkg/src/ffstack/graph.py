"""Stage-2 feature construction: the molecular graph fed to the meta-models.

Node features concatenate, per atom: the M base-model force vectors (3M
reals), an embedding of the M per-atom-normalized base energies (broadcast
to every node, global information), and the one-hot chemical identity.
Edges connect atoms within a distance cutoff, both directions, boundary
inclusive; minimum-image convention for periodic structures.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basemodels import BasePrediction
from .core import Structure
from .errors import ConfigError, ValidationError


@dataclass(frozen=True)
class GraphSpec:
    cutoff: float = 5.0
    self_loops: bool = True
    energy_embed_dim: int = 16
    elements: tuple[int, ...] = (1, 6, 18)

    def __post_init__(self):
        if self.cutoff <= 0:
            raise ConfigError("graph cutoff must be > 0")
        if self.energy_embed_dim < 1:
            raise ConfigError("energy embedding dimension must be >= 1")
        object.__setattr__(self, "elements", tuple(int(z) for z in self.elements))


@dataclass(frozen=True)
class EnergyEmbedder:
    """Linear embedding of per-atom-normalized base energies (meta-owned)."""

    weight: np.ndarray  # (M, d_E)
    bias: np.ndarray  # (d_E,)

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise ValidationError("embedder weight must be (M, d_E), bias (d_E,)")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @classmethod
    def init(cls, n_models: int, d_e: int, seed: int = 0) -> "EnergyEmbedder":
        rng = np.random.Generator(np.random.PCG64(seed))
        return cls(rng.normal(size=(n_models, d_e)) / np.sqrt(n_models), np.zeros(d_e))

    def __call__(self, energies_per_atom: np.ndarray) -> np.ndarray:
        e = np.asarray(energies_per_atom, dtype=np.float64)
        if e.shape != (self.weight.shape[0],):
            raise ValidationError(
                f"expected {self.weight.shape[0]} energies, got {e.shape}"
            )
        return e @ self.weight + self.bias


def _minimum_image(dvec: np.ndarray, cell: np.ndarray, periodic) -> np.ndarray:
    frac = dvec @ np.linalg.inv(cell)
    shift = np.where(np.array(periodic), np.round(frac), 0.0)
    return (frac - shift) @ cell


def _pairs_to_edges(src, dst, vec, dist):
    """Symmetrize undirected pair hits into both directed edges, sorted."""
    edges = np.concatenate(
        [np.stack([src, dst], axis=1), np.stack([dst, src], axis=1)]
    )
    vecs = np.concatenate([vec, -vec])
    dists = np.concatenate([dist, dist])
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return edges[order], vecs[order], dists[order]


def _all_pairs(s: Structure, r_c: float):
    n = s.n_atoms
    iu, ju = np.triu_indices(n, k=1)
    dvec = s.positions[ju] - s.positions[iu]  # vector from i to j
    if any(s.periodic):
        dvec = _minimum_image(dvec, s.cell, s.periodic)
    dist = np.linalg.norm(dvec, axis=1)
    keep = dist <= r_c
    return iu[keep], ju[keep], dvec[keep], dist[keep]


def _cell_list_pairs(s: Structure, r_c: float):
    """Non-periodic cell list; identical hits to the all-pairs scan."""
    pos = s.positions
    lo = pos.min(axis=0)
    cell_idx = np.floor((pos - lo) / r_c).astype(int)
    buckets: dict[tuple, list[int]] = {}
    for a, c in enumerate(map(tuple, cell_idx)):
        buckets.setdefault(c, []).append(a)
    src, dst = [], []
    for (cx, cy, cz), atoms in buckets.items():
        neigh = []
        for ox in (-1, 0, 1):
            for oy in (-1, 0, 1):
                for oz in (-1, 0, 1):
                    neigh.extend(buckets.get((cx + ox, cy + oy, cz + oz), ()))
        for a in atoms:
            for b in neigh:
                if b > a:
                    src.append(a)
                    dst.append(b)
    if not src:
        empty = np.zeros(0, dtype=int)
        return empty, empty, np.zeros((0, 3)), np.zeros(0)
    src = np.array(src)
    dst = np.array(dst)
    dvec = pos[dst] - pos[src]
    dist = np.linalg.norm(dvec, axis=1)
    keep = dist <= r_c
    return src[keep], dst[keep], dvec[keep], dist[keep]


def neighbor_list(s: Structure, r_c: float, brute_force_limit: int = 512):
    """Directed edge list within the cutoff (inclusive boundary).

    Returns (edges (E, 2), vectors (E, 3), distances (E,)) with both
    directions present and rows sorted by (src, dst). Exact all-pairs up to
    `brute_force_limit` atoms, cell-list beyond; both give identical sets.
    Periodic structures use the minimum-image convention and require every
    periodic axis to be at least 2*r_c thick.
    """
    if r_c <= 0:
        raise ValidationError("cutoff must be > 0")
    if any(s.periodic):
        cell = s.cell
        vol = abs(np.linalg.det(cell))
        for ax in range(3):
            if not s.periodic[ax]:
                continue
            cross = np.cross(cell[(ax + 1) % 3], cell[(ax + 2) % 3])
            width = vol / np.linalg.norm(cross)
            if width < 2.0 * r_c:
                raise ValidationError(
                    f"periodic axis {ax} is {width:.3g} A thick, below 2*r_c="
                    f"{2 * r_c:.3g}; minimum image is ambiguous"
                )
        src, dst, vec, dist = _all_pairs(s, r_c)
    elif s.n_atoms <= brute_force_limit:
        src, dst, vec, dist = _all_pairs(s, r_c)
    else:
        src, dst, vec, dist = _cell_list_pairs(s, r_c)
    return _pairs_to_edges(src, dst, vec, dist)


@dataclass
class MolecularGraph:
    n_nodes: int
    edges: np.ndarray  # (E, 2) directed, both directions present
    edge_vectors: np.ndarray  # (E, 3), vector src -> dst
    edge_distances: np.ndarray  # (E,)
    node_features: np.ndarray  # (N, 3M + d_E + Z)
    forces_block: np.ndarray  # (N, 3M) raw base forces
    energies_per_atom: np.ndarray  # (M,) base energies / N
    species_onehot: np.ndarray  # (N, Z)
    spec: GraphSpec

    @property
    def feature_width(self) -> int:
        return self.node_features.shape[1]


def species_onehot(species, elements) -> np.ndarray:
    out = np.zeros((len(species), len(elements)))
    for a, z in enumerate(species):
        try:
            out[a, elements.index(z)] = 1.0
        except ValueError:
            raise ValidationError(
                f"species Z={z} missing from element table {elements}"
            ) from None
    return out


def build_graph(
    s: Structure,
    preds: list[BasePrediction],
    spec: GraphSpec,
    embedder: EnergyEmbedder,
) -> MolecularGraph:
    """Assemble the meta-model input graph from base predictions."""
    if not preds:
        raise ValidationError("need at least one base prediction")
    n = s.n_atoms
    for k, p in enumerate(preds):
        if p.forces.shape != (n, 3):
            raise ValidationError(
                f"prediction {k} has forces shape {p.forces.shape}, expected ({n}, 3)"
            )
    m = len(preds)
    if embedder.weight.shape[0] != m:
        raise ValidationError(
            f"embedder expects {embedder.weight.shape[0]} models, got {m}"
        )
    edges, vecs, dists = neighbor_list(s, spec.cutoff)
    forces_block = np.concatenate([p.forces for p in preds], axis=1)
    energies = np.array([p.energy for p in preds]) / n
    embedded = embedder(energies)
    onehot = species_onehot(s.species, spec.elements)
    features = np.concatenate(
        [forces_block, np.broadcast_to(embedded, (n, embedded.size)), onehot], axis=1
    )
    return MolecularGraph(
        n_nodes=n,
        edges=edges,
        edge_vectors=vecs,
        edge_distances=dists,
        node_features=features,
        forces_block=forces_block,
        energies_per_atom=energies,
        species_onehot=onehot,
        spec=spec,
    )
