import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rise3d import datasets as ds
from rise3d.errors import ContractError, DegenerateGeometryError, EmptyBinWarning
from rise3d.geometry import (
    AnnulusBinning,
    DirectedEdgeSet,
    EdgeMask,
    MolecularGraph,
    build_cutoff_graph,
    build_dpg,
    mask_annulus,
    pairwise_distances,
    quantile_annuli,
)
from conftest import make_ethane, ETHANE_BONDS


def simple_graph(positions, cutoff=5.0, labels=None):
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    labels = labels or ["C"] * n
    return MolecularGraph(
        positions=positions,
        construction_radii=np.full(n, cutoff),
        node_features=ds.one_hot_features(labels),
        atom_labels=labels,
    )


def edge_set_from_distances(dists):
    dists = np.asarray(dists, dtype=float)
    n = dists.size + 1
    return DirectedEdgeSet(n, np.arange(n - 1), np.arange(1, n), dists)


class TestPairwiseDistances:
    def test_three_four_five_triangle(self):
        g = simple_graph([[0, 0, 0], [3, 4, 0]])
        d = pairwise_distances(g)
        assert d[0, 1] == pytest.approx(5.0, abs=1e-12)

    def test_ethane_carbon_carbon_distance(self):
        d = pairwise_distances(make_ethane())
        assert d[0, 1] == pytest.approx(1.530, abs=1e-9)
        assert d[0, 2] == pytest.approx(1.095, abs=1e-9)

    def test_matches_naive_double_loop(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-2, 2, size=(5, 3))
        g = simple_graph(pts)
        d = pairwise_distances(g)
        naive = np.zeros((5, 5))
        for i in range(5):
            for j in range(5):
                naive[i, j] = np.sqrt(sum((pts[i, k] - pts[j, k]) ** 2 for k in range(3)))
        assert np.abs(d - naive).max() < 1e-12

    def test_symmetric_zero_diagonal(self):
        g = simple_graph(np.random.default_rng(0).uniform(0, 3, (6, 3)))
        d = pairwise_distances(g)
        assert np.array_equal(d, d.T)
        assert np.all(np.diag(d) == 0.0)

    def test_duplicate_points_rejected(self):
        with pytest.raises(DegenerateGeometryError):
            simple_graph([[0, 0, 0], [0, 0, 1e-10]])


class TestBuildDpg:
    def test_uniform_radii_gives_symmetric_relation(self):
        g = simple_graph(np.random.default_rng(1).uniform(0, 3, (7, 3)))
        edges = build_dpg(g, np.full(7, 2.5))
        adj = edges.adjacency()
        assert np.array_equal(adj, adj.T)

    def test_zero_radii_gives_empty_set(self):
        g = simple_graph([[0, 0, 0], [1, 0, 0]])
        assert build_dpg(g, np.zeros(2)).n_edges == 0

    def test_ethane_radii_extract_exactly_the_bonds(self):
        # Radii 1.532 (C) and 1.171 (H) keep the 7 bonds, both directions,
        # and nothing else.
        g = make_ethane()
        radii = np.array([1.532, 1.532] + [1.171] * 6)
        edges = build_dpg(g, radii)
        assert edges.n_edges == 14
        pairs = {(min(i, j), max(i, j)) for i, j in edges.as_pairs()}
        assert pairs == ETHANE_BONDS
        adj = edges.adjacency()
        assert np.array_equal(adj, adj.T)

    def test_tie_distance_excluded(self):
        g = simple_graph([[0, 0, 0], [1, 0, 0]])
        assert build_dpg(g, np.array([1.0, 1.0])).n_edges == 0
        assert build_dpg(g, np.array([1.0 + 1e-9, 1.0])).n_edges == 1

    def test_radii_length_mismatch(self):
        g = simple_graph([[0, 0, 0], [1, 0, 0]])
        with pytest.raises(ContractError):
            build_dpg(g, np.ones(3))

    def test_no_self_loops(self):
        g = simple_graph([[0, 0, 0], [1, 0, 0], [0, 1, 0]])
        edges = build_dpg(g, np.full(3, 10.0))
        assert np.all(edges.src != edges.dst)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_monotone_in_radii(self, seed):
        rng = np.random.default_rng(seed)
        g = simple_graph(rng.uniform(0, 3, (5, 3)))
        r1 = rng.uniform(0, 3, 5)
        grow = rng.uniform(0, 1.5, 5)
        small = set(build_dpg(g, r1).as_pairs())
        large = set(build_dpg(g, r1 + grow).as_pairs())
        assert small <= large


class TestBuildCutoffGraph:
    def test_collinear_points(self):
        g = simple_graph([[0, 0, 0], [2, 0, 0], [4, 0, 0]])
        edges = build_cutoff_graph(g, 3.0)
        assert edges.n_edges == 4
        assert set(edges.as_pairs()) == {(0, 1), (1, 0), (1, 2), (2, 1)}

    def test_ethane_at_five_angstroms_is_complete(self):
        g = make_ethane()
        d = pairwise_distances(g)
        assert d.max() < 5.0
        assert build_cutoff_graph(g, 5.0).n_edges == 56

    def test_rigid_motion_invariance(self):
        rng = np.random.default_rng(7)
        pts = rng.uniform(0, 3, (6, 3))
        g = simple_graph(pts)
        # Rotation from QR keeps distances exact up to roundoff.
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        g2 = simple_graph(pts @ q.T + np.array([10.0, -4.0, 2.0]))
        e1 = build_cutoff_graph(g, 2.4)
        e2 = build_cutoff_graph(g2, 2.4)
        assert e1.as_pairs() == e2.as_pairs()

    def test_nonpositive_cutoff_rejected(self):
        g = simple_graph([[0, 0, 0], [1, 0, 0]])
        with pytest.raises(ContractError):
            build_cutoff_graph(g, 0.0)


class TestQuantileAnnuli:
    def _edge_sets_for_bands(self, bands, per_band=5000, seed=0):
        rng = np.random.default_rng(seed)
        dists = np.concatenate([rng.uniform(lo, hi, per_band) for lo, hi in bands])
        return [edge_set_from_distances(dists)]

    def test_five_angstrom_reference_distribution(self):
        bands = [(0.8, 2.1), (2.1, 2.6), (2.6, 3.2), (3.2, 4.0), (4.0, 5.0)]
        binning = quantile_annuli(self._edge_sets_for_bands(bands), cutoff=5.0)
        assert np.allclose(binning.cutoffs, [0.0, 2.1, 2.6, 3.2, 4.0, 5.0], atol=0.05)

    def test_ten_angstrom_reference_distribution(self):
        bands = [(0.8, 2.2), (2.2, 2.8), (2.8, 3.5), (3.5, 4.4), (4.4, 10.0)]
        binning = quantile_annuli(self._edge_sets_for_bands(bands, seed=1), cutoff=10.0)
        assert np.allclose(binning.cutoffs, [0.0, 2.2, 2.8, 3.5, 4.4, 10.0], atol=0.08)

    def test_uniform_distances_split_evenly(self):
        rng = np.random.default_rng(9)
        dists = rng.uniform(0.0, 5.0, 100)
        binning = quantile_annuli([edge_set_from_distances(dists)], cutoff=5.0)
        # Oracle: counts against the sorted array.
        counts = np.bincount(binning.bin_of(dists), minlength=6)[1:]
        assert all(abs(c - 20) <= 1 for c in counts)

    def test_fitted_corpus_coverage_between_15_and_25_percent(self):
        corpus = ds.generate_synthetic_corpus(ds.SyntheticCorpusConfig(count=40, seed=2))
        edge_sets = [build_dpg(g, g.construction_radii) for g, _ in corpus]
        binning = quantile_annuli(edge_sets, cutoff=5.0)
        pooled = np.concatenate([e.dist for e in edge_sets])
        shares = np.bincount(binning.bin_of(pooled), minlength=6)[1:] / pooled.size
        assert np.all(shares >= 0.15) and np.all(shares <= 0.25)

    def test_empty_corpus_rejected(self):
        with pytest.raises(ContractError):
            quantile_annuli([], cutoff=5.0)

    def test_boundaries_ascending_and_anchored(self):
        binning = quantile_annuli(
            [edge_set_from_distances(np.linspace(0.5, 4.5, 200))], cutoff=5.0)
        assert binning.cutoffs[0] == 0.0
        assert binning.cutoffs[-1] == 5.0
        assert np.all(np.diff(binning.cutoffs) > 0)

    def test_last_bin_closed_at_cutoff(self):
        binning = AnnulusBinning(np.array([0.0, 1.0, 2.0, 3.0, 4.0, 5.0]))
        assert binning.bin_of(5.0) == 5
        assert binning.bin_of(1.0) == 2  # half-open lower edges


class TestMaskAnnulus:
    def setup_method(self):
        self.binning = AnnulusBinning(np.array([0.0, 1.0, 2.0, 3.0, 4.0, 5.0]))

    def test_full_fraction_removes_whole_bin(self):
        dists = np.array([0.5, 1.5, 1.7, 2.5, 3.5, 4.5])
        edges = edge_set_from_distances(dists)
        mask = mask_annulus(edges, self.binning, 2, fraction=1.0, seed=0)
        assert mask.values.tolist() == [1, 0, 0, 1, 1, 1]

    def test_ceiling_count(self):
        dists = np.concatenate([np.linspace(1.05, 1.95, 40), [0.2, 4.2]])
        edges = edge_set_from_distances(dists)
        mask = mask_annulus(edges, self.binning, 2, fraction=0.1, seed=3)
        assert int((mask.values == 0).sum()) == 4

    def test_seed_determinism_and_variation(self):
        dists = np.linspace(1.05, 1.95, 30)
        edges = edge_set_from_distances(dists)
        base = mask_annulus(edges, self.binning, 2, fraction=0.2, seed=42)
        again = mask_annulus(edges, self.binning, 2, fraction=0.2, seed=42)
        assert np.array_equal(base.values, again.values)
        differing = sum(
            not np.array_equal(
                base.values,
                mask_annulus(edges, self.binning, 2, fraction=0.2, seed=1000 + t).values)
            for t in range(20))
        assert differing >= 1

    def test_empty_bin_warns_and_returns_identity(self):
        edges = edge_set_from_distances(np.array([0.5, 4.5]))
        with pytest.warns(EmptyBinWarning):
            mask = mask_annulus(edges, self.binning, 3, fraction=0.5, seed=0)
        assert np.all(mask.values == 1.0)

    def test_invalid_bin_and_fraction(self):
        edges = edge_set_from_distances(np.array([0.5]))
        with pytest.raises(ContractError):
            mask_annulus(edges, self.binning, 6, 0.5, 0)
        with pytest.raises(ContractError):
            mask_annulus(edges, self.binning, 1, 0.0, 0)


class TestEdgeMask:
    def test_hard_mask_requires_binary(self):
        with pytest.raises(ContractError):
            EdgeMask.hard(np.array([0.5]))

    def test_soft_mask_requires_unit_interval(self):
        with pytest.raises(ContractError):
            EdgeMask.soft(np.array([1.2]))


class TestDirectedEdgeSet:
    def test_rejects_self_loops(self):
        with pytest.raises(ContractError):
            DirectedEdgeSet(3, np.array([0]), np.array([0]), np.array([0.0]))

    def test_rejects_duplicates(self):
        with pytest.raises(ContractError):
            DirectedEdgeSet(3, np.array([0, 0]), np.array([1, 1]), np.array([1.0, 1.0]))

    def test_distances_match_matrix(self):
        g = simple_graph(np.random.default_rng(4).uniform(0, 3, (6, 3)))
        d = pairwise_distances(g)
        edges = build_dpg(g, np.full(6, 2.0), distances=d)
        rel = np.abs(edges.dist - d[edges.src, edges.dst]) / d[edges.src, edges.dst]
        assert rel.max() < 1e-12

    def test_bond_truth_index_validation(self):
        with pytest.raises(ContractError):
            MolecularGraph(
                positions=np.array([[0.0, 0, 0], [1.0, 0, 0]]),
                construction_radii=np.ones(2),
                node_features=np.eye(2),
                atom_labels=["C", "C"],
                bond_truth={(0, 5)},
            )
