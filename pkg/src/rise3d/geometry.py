"""Point-cloud geometry: distances, directed proximity graphs, annulus binning.

A directed proximity graph places edge (i, j) whenever d_ij is strictly
below node i's radius; a uniform radius therefore yields a symmetric edge
relation. Messages on edge (i, j) flow from j to i: the radius owner is
the receiver. All functions here are pure and thread-safe.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateGeometryError, EmptyBinWarning

# Below any physical meaning; coincident points would blow up RBF features.
DUPLICATE_POINT_TOL = 1e-9

# Distance matrices are plain (n, n) float64 arrays: symmetric, zero diagonal.
DistanceMatrix = np.ndarray


@dataclass
class MolecularGraph:
    """Atomic point cloud with per-node construction radii.

    positions: (n, 3) in angstroms. construction_radii: (n,) strictly
    positive radii that built the original graph (a uniform cutoff for
    most models). node_features: (n, d_v), one-hot element encoding.
    bond_truth: optional set of unordered index pairs (i, j), i < j.
    """

    positions: np.ndarray
    construction_radii: np.ndarray
    node_features: np.ndarray
    atom_labels: list[str]
    bond_truth: set[tuple[int, int]] | None = None
    # Optional generative decomposition: energy per unordered pair. Filled by
    # the synthetic generator; enables subgraph-target training augmentation.
    pair_energies: dict | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.construction_radii = np.asarray(self.construction_radii, dtype=np.float64)
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        n = self.positions.shape[0]
        if self.positions.shape != (n, 3):
            raise ContractError("positions must be (n, 3)")
        if self.construction_radii.shape != (n,):
            raise ContractError("construction_radii must be length n")
        if np.any(self.construction_radii <= 0.0):
            raise ContractError("construction radii must be strictly positive")
        if self.node_features.shape[0] != n:
            raise ContractError("node_features must have n rows")
        if len(self.atom_labels) != n:
            raise ContractError("atom_labels must have n entries")
        if not np.all(np.isfinite(self.positions)):
            raise ContractError("positions must be finite")
        _check_no_duplicates(self.positions)
        if self.bond_truth is not None:
            pairs = set()
            for i, j in self.bond_truth:
                if not (0 <= i < n and 0 <= j < n and i != j):
                    raise ContractError(f"bond ({i}, {j}) references invalid node indices")
                pairs.add((min(i, j), max(i, j)))
            self.bond_truth = pairs
        if self.pair_energies is not None:
            self.pair_energies = {(min(i, j), max(i, j)): float(v)
                                  for (i, j), v in self.pair_energies.items()}

    @property
    def node_count(self) -> int:
        return self.positions.shape[0]


def _check_no_duplicates(positions: np.ndarray) -> None:
    n = positions.shape[0]
    if n < 2:
        return
    diff = positions[:, None, :] - positions[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    d2[np.diag_indices(n)] = np.inf
    if d2.min() < DUPLICATE_POINT_TOL ** 2:
        i, j = np.unravel_index(int(d2.argmin()), d2.shape)
        raise DegenerateGeometryError(
            f"nodes {i} and {j} are closer than {DUPLICATE_POINT_TOL} angstrom"
        )


def pairwise_distances(graph: MolecularGraph) -> DistanceMatrix:
    """Euclidean distance matrix: symmetric, zero diagonal, in angstroms."""
    p = graph.positions
    diff = p[:, None, :] - p[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(d, 0.0)
    off = d + np.where(np.eye(len(p), dtype=bool), np.inf, 0.0)
    if len(p) > 1 and off.min() < DUPLICATE_POINT_TOL:
        raise DegenerateGeometryError("duplicate points in geometry")
    return d


@dataclass
class DirectedEdgeSet:
    """Explicit directed edges (src, dst, distance).

    Edge (src, dst) exists because d(src, dst) < r_src; the src node owns
    the radius and receives the message computed from dst's state. Edges
    are stored in lexicographic (src, dst) order.
    """

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    dist: np.ndarray

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.intp)
        self.dst = np.asarray(self.dst, dtype=np.intp)
        self.dist = np.asarray(self.dist, dtype=np.float64)
        if not (self.src.shape == self.dst.shape == self.dist.shape):
            raise ContractError("src, dst, dist must share one shape")
        if self.src.size and (self.src == self.dst).any():
            raise ContractError("self-loops are not allowed")
        keys = self.src * self.n_nodes + self.dst
        if np.unique(keys).size != keys.size:
            raise ContractError("duplicate directed edges")

    @property
    def n_edges(self) -> int:
        return self.src.size

    def adjacency(self) -> np.ndarray:
        """Dense 0/1 view of the edge relation."""
        a = np.zeros((self.n_nodes, self.n_nodes), dtype=np.int8)
        a[self.src, self.dst] = 1
        return a

    def as_pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.src.tolist(), self.dst.tolist()))

    def subset(self, keep: np.ndarray) -> "DirectedEdgeSet":
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.nonzero(keep)[0]
        return DirectedEdgeSet(self.n_nodes, self.src[keep], self.dst[keep], self.dist[keep])


def build_dpg(graph: MolecularGraph, radii: np.ndarray,
              distances: DistanceMatrix | None = None) -> DirectedEdgeSet:
    """Directed proximity graph: edge (i, j) iff d_ij < radii[i], i != j.

    Ties (d_ij == radii[i]) exclude the edge; self-loops are never created.
    """
    radii = np.asarray(radii, dtype=np.float64)
    n = graph.node_count
    if radii.shape != (n,):
        raise ContractError(f"expected {n} radii, got shape {radii.shape}")
    if np.any(radii < 0.0):
        raise ContractError("radii must be nonnegative")
    d = pairwise_distances(graph) if distances is None else distances
    mask = d < radii[:, None]
    np.fill_diagonal(mask, False)
    src, dst = np.nonzero(mask)
    return DirectedEdgeSet(n, src, dst, d[src, dst])


def build_cutoff_graph(graph: MolecularGraph, cutoff: float,
                       distances: DistanceMatrix | None = None) -> DirectedEdgeSet:
    """Uniform-radius construction; the edge relation is symmetric."""
    if not cutoff > 0.0:
        raise ContractError("cutoff must be positive")
    return build_dpg(graph, np.full(graph.node_count, float(cutoff)), distances)


@dataclass
class AnnulusBinning:
    """Distance bands partitioning edges into quantile bins.

    cutoffs has num_bins + 1 ascending entries, from 0 to the construction
    cutoff. Bins are half-open [d_k, d_{k+1}) except the last, which is
    closed at the cutoff.
    """

    cutoffs: np.ndarray

    def __post_init__(self):
        self.cutoffs = np.asarray(self.cutoffs, dtype=np.float64)
        if self.cutoffs.ndim != 1 or self.cutoffs.size < 3:
            raise ContractError("cutoffs must be a 1-d array with at least 3 entries")
        if np.any(np.diff(self.cutoffs) <= 0.0):
            raise ContractError("bin boundaries must be strictly ascending")

    @property
    def num_bins(self) -> int:
        return self.cutoffs.size - 1

    def bin_of(self, dist) -> np.ndarray:
        """1-based bin index per distance; values beyond the cutoff clamp to the last bin."""
        idx = np.searchsorted(self.cutoffs[1:-1], np.asarray(dist, dtype=np.float64), side="right")
        return idx + 1


def quantile_annuli(edge_sets, cutoff: float, num_bins: int = 5) -> AnnulusBinning:
    """Fit bin boundaries so each annulus holds ~1/num_bins of pooled edges.

    Boundaries are the empirical k/num_bins quantiles of all edge
    distances across the corpus, with 0 below and the construction cutoff
    above.
    """
    dists = [e.dist for e in edge_sets if e.n_edges]
    if not dists:
        raise ContractError("corpus contains no edges to bin")
    pooled = np.concatenate(dists)
    qs = np.quantile(pooled, [k / num_bins for k in range(1, num_bins)])
    cutoffs = np.concatenate(([0.0], qs, [float(cutoff)]))
    return AnnulusBinning(cutoffs)


@dataclass
class EdgeMask:
    """Per-directed-edge values aligned with one DirectedEdgeSet.

    kind 'soft' allows the closed interval [0, 1]; kind 'hard' allows
    exactly 0 and 1.
    """

    kind: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.kind not in ("soft", "hard"):
            raise ContractError("kind must be 'soft' or 'hard'")
        if self.values.ndim != 1:
            raise ContractError("mask values must be 1-d")
        if self.kind == "hard":
            if not np.all((self.values == 0.0) | (self.values == 1.0)):
                raise ContractError("hard masks may contain only 0 and 1")
        elif np.any(self.values < 0.0) or np.any(self.values > 1.0):
            raise ContractError("soft masks must lie in [0, 1]")

    @classmethod
    def ones(cls, n_edges: int, kind: str = "hard") -> "EdgeMask":
        return cls(kind, np.ones(n_edges))

    @classmethod
    def soft(cls, values) -> "EdgeMask":
        return cls("soft", values)

    @classmethod
    def hard(cls, values) -> "EdgeMask":
        return cls("hard", values)


def mask_annulus(edges: DirectedEdgeSet, binning: AnnulusBinning, bin_index: int,
                 fraction: float, seed: int) -> EdgeMask:
    """Zero out ceil(fraction * |bin|) edges of one annulus, seeded.

    Sampling is without replacement and deterministic per seed. An empty
    bin with fraction > 0 warns and returns the identity mask.
    """
    if not (1 <= bin_index <= binning.num_bins):
        raise ContractError(f"bin index {bin_index} out of range")
    if not (0.0 < fraction <= 1.0):
        raise ContractError("fraction must lie in (0, 1]")
    values = np.ones(edges.n_edges)
    members = np.nonzero(binning.bin_of(edges.dist) == bin_index)[0]
    if members.size == 0:
        warnings.warn(f"annulus bin {bin_index} holds no edges", EmptyBinWarning)
        return EdgeMask.hard(values)
    count = int(np.ceil(fraction * members.size))
    rng = np.random.default_rng(seed)
    removed = rng.choice(members, size=count, replace=False)
    values[removed] = 0.0
    return EdgeMask.hard(values)
