import numpy as np
import pytest

from ffstack.basemodels import BasePrediction
from ffstack.core import Structure
from ffstack.errors import ValidationError
from ffstack.graph import (
    EnergyEmbedder,
    GraphSpec,
    _all_pairs,
    _cell_list_pairs,
    _pairs_to_edges,
    build_graph,
    neighbor_list,
)
from ffstack.refpes import lj7_argon_structure


class TestNeighborList:
    def test_below_cutoff_no_edges(self):
        s = Structure([1, 1], [[0.0, 0, 0], [1.0, 0, 0]])
        edges, _, _ = neighbor_list(s, 0.5)
        assert edges.shape == (0, 2)

    def test_boundary_inclusive(self):
        s = Structure([1, 1], [[0.0, 0, 0], [1.0, 0, 0]])
        edges, vecs, dists = neighbor_list(s, 1.0)
        assert edges.tolist() == [[0, 1], [1, 0]]
        np.testing.assert_allclose(dists, [1.0, 1.0])
        np.testing.assert_allclose(vecs[0], [1.0, 0, 0])

    def test_cell_list_matches_bruteforce(self):
        rng = np.random.Generator(np.random.PCG64(0))
        s = Structure([1] * 64, rng.uniform(0, 8.0, size=(64, 3)))
        r_c = 2.2
        brute = _pairs_to_edges(*_all_pairs(s, r_c))
        cell = _pairs_to_edges(*_cell_list_pairs(s, r_c))
        np.testing.assert_array_equal(brute[0], cell[0])
        np.testing.assert_allclose(brute[2], cell[2], rtol=1e-15)

    def test_dispatch_above_limit(self):
        rng = np.random.Generator(np.random.PCG64(1))
        s = Structure([1] * 40, rng.uniform(0, 6.0, size=(40, 3)))
        a = neighbor_list(s, 2.0, brute_force_limit=512)
        b = neighbor_list(s, 2.0, brute_force_limit=10)  # force cell-list path
        np.testing.assert_array_equal(a[0], b[0])

    def test_periodic_minimum_image(self):
        s = Structure(
            [1, 1],
            [[0.5, 5.0, 5.0], [9.5, 5.0, 5.0]],
            cell=np.diag([10.0, 10.0, 10.0]),
            periodic=(True, True, True),
        )
        edges, vecs, dists = neighbor_list(s, 2.0)
        assert edges.tolist() == [[0, 1], [1, 0]]
        assert dists[0] == pytest.approx(1.0)
        np.testing.assert_allclose(vecs[0], [-1.0, 0.0, 0.0])

    def test_thin_cell_rejected(self):
        s = Structure(
            [1, 1],
            [[0.0, 0, 0], [1.0, 1.0, 1.0]],
            cell=np.diag([3.0, 20.0, 20.0]),
            periodic=(True, True, True),
        )
        with pytest.raises(ValidationError, match="minimum image"):
            neighbor_list(s, 2.0)

    def test_lj7_complete_graph(self):
        s = lj7_argon_structure()
        edges, _, _ = neighbor_list(s, 8.5)
        assert edges.shape[0] == 7 * 6  # complete directed graph


def _mk_preds(n, m, seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    return [
        BasePrediction(float(rng.normal()), rng.normal(size=(n, 3))) for _ in range(m)
    ]


class TestBuildGraph:
    def test_zero_case_feature_layout(self):
        s = Structure([6], [[0.0, 0, 0]])
        spec = GraphSpec(cutoff=5.0, energy_embed_dim=4, elements=(1, 6))
        emb = EnergyEmbedder(np.zeros((1, 4)), np.zeros(4))
        g = build_graph(s, [BasePrediction(0.0, np.zeros((1, 3)))], spec, emb)
        want = np.zeros(3 + 4 + 2)
        want[3 + 4 + 1] = 1.0  # one-hot for Z=6
        np.testing.assert_array_equal(g.node_features[0], want)

    def test_feature_width_contract(self):
        s = lj7_argon_structure()
        m, d_e = 3, 5
        spec = GraphSpec(cutoff=8.5, energy_embed_dim=d_e, elements=(18,))
        g = build_graph(s, _mk_preds(7, m), spec, EnergyEmbedder.init(m, d_e, 1))
        assert g.feature_width == 3 * m + d_e + 1
        assert g.node_features.shape == (7, g.feature_width)

    def test_permutation_equivariance(self):
        rng = np.random.Generator(np.random.PCG64(3))
        s = Structure([1, 1, 6, 1], rng.normal(size=(4, 3)) * 2.0)
        preds = _mk_preds(4, 2, seed=4)
        spec = GraphSpec(cutoff=6.0, energy_embed_dim=3, elements=(1, 6))
        emb = EnergyEmbedder.init(2, 3, 2)
        g0 = build_graph(s, preds, spec, emb)
        perm = np.array([2, 0, 3, 1])
        s2 = Structure([s.species[p] for p in perm], s.positions[perm])
        preds2 = [BasePrediction(p.energy, p.forces[perm]) for p in preds]
        g2 = build_graph(s2, preds2, spec, emb)
        inv = np.argsort(perm)
        np.testing.assert_allclose(g2.node_features, g0.node_features[perm], atol=0)
        # edge sets map consistently under the permutation
        remapped = sorted((int(inv[a]), int(inv[b])) for a, b in g2.edges)
        assert remapped == sorted(map(tuple, g0.edges.tolist()))

    def test_embedded_block_broadcast(self):
        s = lj7_argon_structure()
        preds = _mk_preds(7, 2, seed=5)
        spec = GraphSpec(cutoff=8.5, energy_embed_dim=4, elements=(18,))
        emb = EnergyEmbedder.init(2, 4, 3)
        g = build_graph(s, preds, spec, emb)
        block = g.node_features[:, 6 : 6 + 4]
        for row in block:
            np.testing.assert_array_equal(row, block[0])

    def test_atom_count_mismatch(self):
        s = lj7_argon_structure()
        spec = GraphSpec(cutoff=8.5, elements=(18,))
        bad = [BasePrediction(0.0, np.zeros((5, 3)))]
        with pytest.raises(ValidationError, match="forces shape"):
            build_graph(s, bad, spec, EnergyEmbedder.init(1, 16))


class TestEmbedder:
    def test_linear_map(self):
        emb = EnergyEmbedder(np.array([[1.0, 0.0], [0.0, 2.0]]), np.array([0.5, -0.5]))
        np.testing.assert_allclose(emb(np.array([3.0, 4.0])), [3.5, 7.5])

    def test_identical_energies_identical_embedding(self):
        emb = EnergyEmbedder.init(3, 8, seed=7)
        e = np.array([0.1, -0.2, 0.3])
        np.testing.assert_array_equal(emb(e), emb(e.copy()))
